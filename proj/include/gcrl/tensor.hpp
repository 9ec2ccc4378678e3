#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// TensorT<float> is the training type; TensorT<double> is the shadow type the
// gradient-check tests run the same graphs in. A tensor is an immutable value
// after construction except for its grad buffer, which backward() fills.
// Forward/backward of one tape is single-threaded; independent tapes may run
// on separate threads. The only internal parallelism is the row partitioning
// inside matmul (see parallel.hpp), which is bit-deterministic for every
// thread count.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "gcrl/errors.hpp"
#include "gcrl/parallel.hpp"
#include "gcrl/rng.hpp"

namespace gcrl {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d < 0) throw ShapeError("negative extent in shape " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

// Integer array (token ids, gather indices, fill masks). Not differentiable.
struct IntArray {
  Shape shape;
  std::vector<std::int32_t> data;

  IntArray() = default;
  IntArray(Shape s, std::vector<std::int32_t> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("IntArray: shape " + shape_str(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
  }
  static IntArray zeros(Shape s) {
    std::size_t n = shape_numel(s);
    return IntArray(std::move(s), std::vector<std::int32_t>(n, 0));
  }
  std::size_t numel() const { return data.size(); }
};

namespace detail {

template <typename S>
struct TapeNode {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad; // allocated lazily by backward()
  bool requires_grad = false;
  bool backward_done = false; // set on the loss root once its tape has run
  const char* op = "leaf";
  std::vector<std::shared_ptr<TapeNode>> parents;
  std::function<void(TapeNode&)> backprop;

  std::size_t numel() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

} // namespace detail

template <typename S>
class TensorT {
public:
  using Node = detail::TapeNode<S>;

  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), S(0), requires_grad);
  }

  static TensorT filled(Shape shape, S v, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value.assign(shape_numel(n->shape), v);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT from_vector(Shape shape, std::vector<S> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      throw ShapeError("from_vector: shape " + shape_str(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT scalar(S v, bool requires_grad = false) { return filled({}, v, requires_grad); }

  static TensorT randn(Shape shape, RngStream& rng, double mean = 0.0, double stddev = 1.0,
                       bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value.resize(shape_numel(n->shape));
    for (auto& x : n->value) x = static_cast<S>(mean + stddev * rng.normal());
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }

  std::vector<S>& data() { return node_->value; }
  const std::vector<S>& data() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  TensorT& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::vector<S>& grad() {
    if (!has_grad()) throw ValueError("grad(): no gradient present; run backward first");
    return node_->grad;
  }
  const std::vector<S>& grad() const {
    if (!has_grad()) throw ValueError("grad(): no gradient present; run backward first");
    return node_->grad;
  }

  S item() const {
    if (numel() != 1) throw ShapeError("item(): tensor has shape " + shape_str(shape()));
    return node_->value[0];
  }

  std::shared_ptr<Node> node() const { return node_; }

  explicit TensorT(std::shared_ptr<Node> n) : node_(std::move(n)) {}

private:
  std::shared_ptr<Node> node_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

// ---------------------------------------------------------------------------
// op plumbing

namespace detail {

template <typename S>
std::shared_ptr<TapeNode<S>> make_result(Shape shape, const char* op,
                                         std::initializer_list<std::shared_ptr<TapeNode<S>>> parents) {
  auto n = std::make_shared<TapeNode<S>>();
  n->shape = std::move(shape);
  n->value.resize(shape_numel(n->shape));
  n->op = op;
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  if (rg) n->parents.assign(parents);
  return n;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  std::size_t ra = a.size(), rb = b.size();
  std::size_t r = std::max(ra, rb);
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    int da = i < r - ra ? 1 : a[i - (r - ra)];
    int db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da == db || da == 1 || db == 1) {
      out[i] = std::max(da, db);
    } else {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    }
  }
  return out;
}

// Strides of `s` aligned to an output of rank `out_rank`, with stride 0 on
// broadcast (extent-1 or missing) dimensions.
inline std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
  std::size_t r = out.size(), rs = s.size();
  std::vector<std::size_t> native(rs);
  std::size_t acc = 1;
  for (std::size_t i = rs; i-- > 0;) {
    native[i] = acc;
    acc *= static_cast<std::size_t>(s[i]);
  }
  std::vector<std::size_t> st(r, 0);
  for (std::size_t i = 0; i < rs; ++i) {
    std::size_t oi = i + (r - rs);
    st[oi] = (s[i] == 1 && out[oi] != 1) ? 0 : native[i];
  }
  return st;
}

// True when b's shape is a trailing suffix of a's (the bias/row-table case):
// then b's offset is simply the output offset modulo b's length.
inline bool suffix_broadcast(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  for (std::size_t i = 0; i < b.size(); ++i)
    if (b[b.size() - 1 - i] != a[a.size() - 1 - i]) return false;
  return true;
}

// Odometer walk over the broadcast output; f(out_index, a_offset, b_offset).
template <typename F>
void for_each_broadcast2(const Shape& out, const Shape& as, const Shape& bs, F&& f) {
  std::size_t n = shape_numel(out);
  if (n == 0) return;
  if (as == bs) { // same-shape fast path
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  if (out == as && suffix_broadcast(as, bs)) {
    std::size_t bn = shape_numel(bs);
    if (bn == 1) {
      for (std::size_t i = 0; i < n; ++i) f(i, i, 0);
    } else {
      for (std::size_t base = 0; base < n; base += bn)
        for (std::size_t j = 0; j < bn; ++j) f(base + j, base + j, j);
    }
    return;
  }
  if (out == bs && suffix_broadcast(bs, as)) {
    std::size_t an = shape_numel(as);
    if (an == 1) {
      for (std::size_t i = 0; i < n; ++i) f(i, 0, i);
    } else {
      for (std::size_t base = 0; base < n; base += an)
        for (std::size_t j = 0; j < an; ++j) f(base + j, j, base + j);
    }
    return;
  }
  std::size_t r = out.size();
  auto sa = broadcast_strides(as, out);
  auto sb = broadcast_strides(bs, out);
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0;; ++i) {
    f(i, oa, ob);
    if (i + 1 == n) break;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < static_cast<std::size_t>(out[d])) break;
      oa -= sa[d] * idx[d];
      ob -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
}

template <typename S>
void check_finite_loss(const TapeNode<S>& n, const char* what) {
  for (S v : n.value)
    if (!std::isfinite(v)) throw ValueError(std::string(what) + ": non-finite value in forward result");
}

// Axis reduction geometry: outer * extent * inner element blocks.
struct AxisGeom {
  std::size_t outer, extent, inner;
};

inline AxisGeom axis_geom(const Shape& s, int axis, const char* op) {
  int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw ShapeError(std::string(op) + ": axis out of range for shape " + shape_str(s));
  AxisGeom g{1, static_cast<std::size_t>(s[static_cast<std::size_t>(axis)]), 1};
  for (int i = 0; i < axis; ++i) g.outer *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
  for (int i = axis + 1; i < r; ++i) g.inner *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
  return g;
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise and broadcast ops

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  Shape out = detail::broadcast_shape(a.shape(), b.shape(), "add");
  auto n = detail::make_result<S>(out, "add", {a.node(), b.node()});
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = n->value;
  detail::for_each_broadcast2(out, a.shape(), b.shape(),
                              [&](std::size_t o, std::size_t ia, std::size_t ib) { ov[o] = av[ia] + bv[ib]; });
  if (n->requires_grad) {
    Shape as = a.shape(), bs = b.shape();
    n->backprop = [as, bs, out](detail::TapeNode<S>& r) {
      auto& pa = *r.parents[0];
      auto& pb = *r.parents[1];
      if (pa.requires_grad) pa.ensure_grad();
      if (pb.requires_grad) pb.ensure_grad();
      detail::for_each_broadcast2(out, as, bs, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        if (pa.requires_grad) pa.grad[ia] += r.grad[o];
        if (pb.requires_grad) pb.grad[ib] += r.grad[o];
      });
    };
  }
  return TensorT<S>(std::move(n));
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  Shape out = detail::broadcast_shape(a.shape(), b.shape(), "sub");
  auto n = detail::make_result<S>(out, "sub", {a.node(), b.node()});
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = n->value;
  detail::for_each_broadcast2(out, a.shape(), b.shape(),
                              [&](std::size_t o, std::size_t ia, std::size_t ib) { ov[o] = av[ia] - bv[ib]; });
  if (n->requires_grad) {
    Shape as = a.shape(), bs = b.shape();
    n->backprop = [as, bs, out](detail::TapeNode<S>& r) {
      auto& pa = *r.parents[0];
      auto& pb = *r.parents[1];
      if (pa.requires_grad) pa.ensure_grad();
      if (pb.requires_grad) pb.ensure_grad();
      detail::for_each_broadcast2(out, as, bs, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        if (pa.requires_grad) pa.grad[ia] += r.grad[o];
        if (pb.requires_grad) pb.grad[ib] -= r.grad[o];
      });
    };
  }
  return TensorT<S>(std::move(n));
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  Shape out = detail::broadcast_shape(a.shape(), b.shape(), "mul");
  auto n = detail::make_result<S>(out, "mul", {a.node(), b.node()});
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = n->value;
  detail::for_each_broadcast2(out, a.shape(), b.shape(),
                              [&](std::size_t o, std::size_t ia, std::size_t ib) { ov[o] = av[ia] * bv[ib]; });
  if (n->requires_grad) {
    Shape as = a.shape(), bs = b.shape();
    n->backprop = [as, bs, out](detail::TapeNode<S>& r) {
      auto& pa = *r.parents[0];
      auto& pb = *r.parents[1];
      if (pa.requires_grad) pa.ensure_grad();
      if (pb.requires_grad) pb.ensure_grad();
      detail::for_each_broadcast2(out, as, bs, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        if (pa.requires_grad) pa.grad[ia] += r.grad[o] * pb.value[ib];
        if (pb.requires_grad) pb.grad[ib] += r.grad[o] * pa.value[ia];
      });
    };
  }
  return TensorT<S>(std::move(n));
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S c) {
  auto n = detail::make_result<S>(a.shape(), "scale", {a.node()});
  const auto& av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] * c;
  if (n->requires_grad) {
    n->backprop = [c](detail::TapeNode<S>& r) {
      auto& p = *r.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < r.grad.size(); ++i) p.grad[i] += r.grad[i] * c;
    };
  }
  return TensorT<S>(std::move(n));
}

template <typename S>
TensorT<S> gelu(const TensorT<S>& a) {
  auto n = detail::make_result<S>(a.shape(), "gelu", {a.node()});
  const auto& av = a.data();
  const double inv_sqrt2 = 0.7071067811865475244;
  for (std::size_t i = 0; i < av.size(); ++i) {
    double x = static_cast<double>(av[i]);
    n->value[i] = static_cast<S>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
  }
  if (n->requires_grad) {
    n->backprop = [inv_sqrt2](detail::TapeNode<S>& r) {
      auto& p = *r.parents[0];
      p.ensure_grad();
      const double inv_sqrt2pi = 0.3989422804014326779;
      for (std::size_t i = 0; i < r.grad.size(); ++i) {
        double x = static_cast<double>(p.value[i]);
        double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        p.grad[i] += r.grad[i] * static_cast<S>(cdf + x * pdf);
      }
    };
  }
  return TensorT<S>(std::move(n));
}

// ---------------------------------------------------------------------------
// shape ops

template <typename S>
TensorT<S> reshape(const TensorT<S>& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
  auto n = detail::make_result<S>(new_shape, "reshape", {a.node()});
  n->value = a.data();
  if (n->requires_grad) {
    n->backprop = [](detail::TapeNode<S>& r) {
      auto& p = *r.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < r.grad.size(); ++i) p.grad[i] += r.grad[i];
    };
  }
  return TensorT<S>(std::move(n));
}

template <typename S>
TensorT<S> permute(const TensorT<S>& a, const std::vector<int>& axes) {
  int r = a.rank();
  if (static_cast<int>(axes.size()) != r)
    throw ShapeError("permute: got " + std::to_string(axes.size()) + " axes for rank " +
                     std::to_string(r) + " tensor");
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  Shape out(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    int ax = axes[static_cast<std::size_t>(i)];
    if (ax < 0 || ax >= r || seen[static_cast<std::size_t>(ax)])
      throw ShapeError("permute: invalid axis permutation");
    seen[static_cast<std::size_t>(ax)] = true;
    out[static_cast<std::size_t>(i)] = a.dim(ax);
  }

  std::vector<std::size_t> in_strides(static_cast<std::size_t>(r));
  std::size_t acc = 1;
  for (int i = r; i-- > 0;) {
    in_strides[static_cast<std::size_t>(i)] = acc;
    acc *= static_cast<std::size_t>(a.dim(i));
  }
  // stride in the input for each output axis
  std::vector<std::size_t> strides(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i)
    strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];

  auto n = detail::make_result<S>(out, "permute", {a.node()});
  const auto& av = a.data();
  auto& ov = n->value;
  std::size_t total = ov.size();
  if (total > 0) {
    std::vector<std::size_t> idx(static_cast<std::size_t>(r), 0);
    std::size_t src = 0;
    for (std::size_t i = 0;; ++i) {
      ov[i] = av[src];
      if (i + 1 == total) break;
      for (int d = r; d-- > 0;) {
        auto du = static_cast<std::size_t>(d);
        ++idx[du];
        src += strides[du];
        if (idx[du] < static_cast<std::size_t>(out[du])) break;
        src -= strides[du] * idx[du];
        idx[du] = 0;
      }
    }
  }
  if (n->requires_grad) {
    n->backprop = [out, strides, r](detail::TapeNode<S>& rn) {
      auto& p = *rn.parents[0];
      p.ensure_grad();
      std::size_t total2 = rn.grad.size();
      if (total2 == 0) return;
      std::vector<std::size_t> idx(static_cast<std::size_t>(r), 0);
      std::size_t src = 0;
      for (std::size_t i = 0;; ++i) {
        p.grad[src] += rn.grad[i];
        if (i + 1 == total2) break;
        for (int d = r; d-- > 0;) {
          auto du = static_cast<std::size_t>(d);
          ++idx[du];
          src += strides[du];
          if (idx[du] < static_cast<std::size_t>(out[du])) break;
          src -= strides[du] * idx[du];
          idx[du] = 0;
        }
      }
    };
  }
  return TensorT<S>(std::move(n));
}

// Swap the last two axes.
template <typename S>
TensorT<S> transpose_last(const TensorT<S>& a) {
  int r = a.rank();
  if (r < 2) throw ShapeError("transpose: rank " + std::to_string(r) + " tensor has no matrix axes");
  std::vector<int> axes(static_cast<std::size_t>(r));
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[static_cast<std::size_t>(r - 2)], axes[static_cast<std::size_t>(r - 1)]);
  return permute(a, axes);
}

template <typename S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  int r = parts[0].rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("concat: axis out of range");
  Shape out = parts[0].shape();
  int total_axis = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i == axis) continue;
      if (p.dim(i) != out[static_cast<std::size_t>(i)])
        throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(out));
    }
    total_axis += p.dim(axis);
  }
  out[static_cast<std::size_t>(axis)] = total_axis;

  auto geom = detail::axis_geom(out, axis, "concat");
  auto node = std::make_shared<detail::TapeNode<S>>();
  node->shape = out;
  node->value.resize(shape_numel(out));
  node->op = "concat";
  bool rg = false;
  for (const auto& p : parts) rg = rg || p.requires_grad();
  node->requires_grad = rg;
  if (rg)
    for (const auto& p : parts) node->parents.push_back(p.node());

  std::vector<std::size_t> extents;
  extents.reserve(parts.size());
  for (const auto& p : parts) extents.push_back(static_cast<std::size_t>(p.dim(axis)));

  std::size_t row = geom.inner; // elements per unit of the concat axis
  std::size_t out_block = geom.extent * row;
  for (std::size_t o = 0; o < geom.outer; ++o) {
    std::size_t cursor = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      const auto& pv = parts[pi].data();
      std::size_t pblock = extents[pi] * row;
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * pblock), pblock,
                  node->value.begin() + static_cast<std::ptrdiff_t>(o * out_block + cursor));
      cursor += pblock;
    }
  }
  if (rg) {
    node->backprop = [geom, extents, row, out_block](detail::TapeNode<S>& rn) {
      for (std::size_t o = 0; o < geom.outer; ++o) {
        std::size_t cursor = 0;
        for (std::size_t pi = 0; pi < rn.parents.size(); ++pi) {
          auto& p = *rn.parents[pi];
          std::size_t pblock = extents[pi] * row;
          if (p.requires_grad) {
            p.ensure_grad();
            for (std::size_t k = 0; k < pblock; ++k)
              p.grad[o * pblock + k] += rn.grad[o * out_block + cursor + k];
          }
          cursor += pblock;
        }
      }
    };
  }
  return TensorT<S>(std::move(node));
}

template <typename S>
TensorT<S> slice_axis(const TensorT<S>& a, int axis, int start, int len) {
  int r = a.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("slice: axis out of range");
  int extent = a.dim(axis);
  if (start < 0 || len < 0 || start + len > extent)
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                     ") out of bounds for extent " + std::to_string(extent));
  Shape out = a.shape();
  out[static_cast<std::size_t>(axis)] = len;
  auto geom = detail::axis_geom(a.shape(), axis, "slice");
  auto n = detail::make_result<S>(out, "slice", {a.node()});
  const auto& av = a.data();
  std::size_t row = geom.inner;
  std::size_t in_block = geom.extent * row;
  std::size_t out_block = static_cast<std::size_t>(len) * row;
  for (std::size_t o = 0; o < geom.outer; ++o)
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(o * in_block + static_cast<std::size_t>(start) * row),
                out_block, n->value.begin() + static_cast<std::ptrdiff_t>(o * out_block));
  if (n->requires_grad) {
    std::size_t s0 = static_cast<std::size_t>(start) * row;
    n->backprop = [geom, row, in_block, out_block, s0](detail::TapeNode<S>& rn) {
      auto& p = *rn.parents[0];
      p.ensure_grad();
      for (std::size_t o = 0; o < geom.outer; ++o)
        for (std::size_t k = 0; k < out_block; ++k) p.grad[o * in_block + s0 + k] += rn.grad[o * out_block + k];
    };
  }
  return TensorT<S>(std::move(n));
}

// ---------------------------------------------------------------------------
// reductions

template <typename S>
TensorT<S> sum_axis(const TensorT<S>& a, int axis) {
  auto geom = detail::axis_geom(a.shape(), axis, "sum");
  Shape out;
  int r = a.rank();
  int ax = axis < 0 ? axis + r : axis;
  for (int i = 0; i < r; ++i)
    if (i != ax) out.push_back(a.dim(i));
  auto n = detail::make_result<S>(out, "sum", {a.node()});
  const auto& av = a.data();
  for (std::size_t o = 0; o < geom.outer; ++o)
    for (std::size_t in = 0; in < geom.inner; ++in) {
      S acc = 0;
      for (std::size_t e = 0; e < geom.extent; ++e) acc += av[(o * geom.extent + e) * geom.inner + in];
      n->value[o * geom.inner + in] = acc;
    }
  if (n->requires_grad) {
    n->backprop = [geom](detail::TapeNode<S>& rn) {
      auto& p = *rn.parents[0];
      p.ensure_grad();
      for (std::size_t o = 0; o < geom.outer; ++o)
        for (std::size_t e = 0; e < geom.extent; ++e)
          for (std::size_t in = 0; in < geom.inner; ++in)
            p.grad[(o * geom.extent + e) * geom.inner + in] += rn.grad[o * geom.inner + in];
    };
  }
  return TensorT<S>(std::move(n));
}

template <typename S>
TensorT<S> mean_axis(const TensorT<S>& a, int axis) {
  auto geom = detail::axis_geom(a.shape(), axis, "mean");
  if (geom.extent == 0) throw ShapeError("mean: empty axis in shape " + shape_str(a.shape()));
  return scale(sum_axis(a, axis), S(1) / static_cast<S>(geom.extent));
}

template <typename S>
TensorT<S> sum_all(const TensorT<S>& a) {
  auto n = detail::make_result<S>(Shape{}, "sum_all", {a.node()});
  S acc = 0;
  for (S v : a.data()) acc += v;
  n->value[0] = acc;
  if (n->requires_grad) {
    n->backprop = [](detail::TapeNode<S>& rn) {
      auto& p = *rn.parents[0];
      p.ensure_grad();
      for (auto& g : p.grad) g += rn.grad[0];
    };
  }
  return TensorT<S>(std::move(n));
}

template <typename S>
TensorT<S> mean_all(const TensorT<S>& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum_all(a), S(1) / static_cast<S>(a.numel()));
}

// ---------------------------------------------------------------------------
// normalization and probability ops

template <typename S>
TensorT<S> softmax(const TensorT<S>& a, int axis) {
  auto geom = detail::axis_geom(a.shape(), axis, "softmax");
  if (geom.extent == 0) throw ShapeError("softmax: empty axis in shape " + shape_str(a.shape()));
  auto n = detail::make_result<S>(a.shape(), "softmax", {a.node()});
  const auto& av = a.data();
  auto& ov = n->value;
  for (std::size_t o = 0; o < geom.outer; ++o)
    for (std::size_t in = 0; in < geom.inner; ++in) {
      std::size_t base = o * geom.extent * geom.inner + in;
      S mx = av[base];
      for (std::size_t e = 1; e < geom.extent; ++e) mx = std::max(mx, av[base + e * geom.inner]);
      S denom = 0;
      for (std::size_t e = 0; e < geom.extent; ++e) {
        S ex = std::exp(av[base + e * geom.inner] - mx);
        ov[base + e * geom.inner] = ex;
        denom += ex;
      }
      S inv = S(1) / denom;
      for (std::size_t e = 0; e < geom.extent; ++e) ov[base + e * geom.inner] *= inv;
    }
  if (n->requires_grad) {
    n->backprop = [geom](detail::TapeNode<S>& rn) {
      auto& p = *rn.parents[0];
      p.ensure_grad();
      for (std::size_t o = 0; o < geom.outer; ++o)
        for (std::size_t in = 0; in < geom.inner; ++in) {
          std::size_t base = o * geom.extent * geom.inner + in;
          S dot = 0;
          for (std::size_t e = 0; e < geom.extent; ++e)
            dot += rn.grad[base + e * geom.inner] * rn.value[base + e * geom.inner];
          for (std::size_t e = 0; e < geom.extent; ++e) {
            std::size_t k = base + e * geom.inner;
            p.grad[k] += rn.value[k] * (rn.grad[k] - dot);
          }
        }
    };
  }
  return TensorT<S>(std::move(n));
}

template <typename S>
TensorT<S> log_softmax(const TensorT<S>& a, int axis) {
  auto geom = detail::axis_geom(a.shape(), axis, "log_softmax");
  if (geom.extent == 0) throw ShapeError("log_softmax: empty axis in shape " + shape_str(a.shape()));
  auto n = detail::make_result<S>(a.shape(), "log_softmax", {a.node()});
  const auto& av = a.data();
  auto& ov = n->value;
  for (std::size_t o = 0; o < geom.outer; ++o)
    for (std::size_t in = 0; in < geom.inner; ++in) {
      std::size_t base = o * geom.extent * geom.inner + in;
      S mx = av[base];
      for (std::size_t e = 1; e < geom.extent; ++e) mx = std::max(mx, av[base + e * geom.inner]);
      S denom = 0;
      for (std::size_t e = 0; e < geom.extent; ++e) denom += std::exp(av[base + e * geom.inner] - mx);
      S lse = mx + std::log(denom);
      for (std::size_t e = 0; e < geom.extent; ++e)
        ov[base + e * geom.inner] = av[base + e * geom.inner] - lse;
    }
  if (n->requires_grad) {
    n->backprop = [geom](detail::TapeNode<S>& rn) {
      auto& p = *rn.parents[0];
      p.ensure_grad();
      for (std::size_t o = 0; o < geom.outer; ++o)
        for (std::size_t in = 0; in < geom.inner; ++in) {
          std::size_t base = o * geom.extent * geom.inner + in;
          S gsum = 0;
          for (std::size_t e = 0; e < geom.extent; ++e) gsum += rn.grad[base + e * geom.inner];
          for (std::size_t e = 0; e < geom.extent; ++e) {
            std::size_t k = base + e * geom.inner;
            p.grad[k] += rn.grad[k] - std::exp(rn.value[k]) * gsum;
          }
        }
    };
  }
  return TensorT<S>(std::move(n));
}

// Pure normalization: (x - mean) / sqrt(var + eps) along `axis`. Gain and
// bias, where a layer has them, are applied by the caller with mul/add.
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& a, int axis, S eps) {
  auto geom = detail::axis_geom(a.shape(), axis, "layer_norm");
  if (geom.extent == 0) throw ShapeError("layer_norm: empty axis in shape " + shape_str(a.shape()));
  auto n = detail::make_result<S>(a.shape(), "layer_norm", {a.node()});
  const auto& av = a.data();
  auto& ov = n->value;
  std::vector<S> inv_sigma(geom.outer * geom.inner);
  S inv_m = S(1) / static_cast<S>(geom.extent);
  for (std::size_t o = 0; o < geom.outer; ++o)
    for (std::size_t in = 0; in < geom.inner; ++in) {
      std::size_t base = o * geom.extent * geom.inner + in;
      S mean = 0;
      for (std::size_t e = 0; e < geom.extent; ++e) mean += av[base + e * geom.inner];
      mean *= inv_m;
      S var = 0;
      for (std::size_t e = 0; e < geom.extent; ++e) {
        S d = av[base + e * geom.inner] - mean;
        var += d * d;
      }
      var *= inv_m;
      S isg = S(1) / std::sqrt(var + eps);
      inv_sigma[o * geom.inner + in] = isg;
      for (std::size_t e = 0; e < geom.extent; ++e)
        ov[base + e * geom.inner] = (av[base + e * geom.inner] - mean) * isg;
    }
  if (n->requires_grad) {
    n->backprop = [geom, inv_sigma = std::move(inv_sigma), inv_m](detail::TapeNode<S>& rn) {
      auto& p = *rn.parents[0];
      p.ensure_grad();
      for (std::size_t o = 0; o < geom.outer; ++o)
        for (std::size_t in = 0; in < geom.inner; ++in) {
          std::size_t base = o * geom.extent * geom.inner + in;
          S isg = inv_sigma[o * geom.inner + in];
          S gmean = 0, gymean = 0;
          for (std::size_t e = 0; e < geom.extent; ++e) {
            std::size_t k = base + e * geom.inner;
            gmean += rn.grad[k];
            gymean += rn.grad[k] * rn.value[k];
          }
          gmean *= inv_m;
          gymean *= inv_m;
          for (std::size_t e = 0; e < geom.extent; ++e) {
            std::size_t k = base + e * geom.inner;
            p.grad[k] += isg * (rn.grad[k] - gmean - rn.value[k] * gymean);
          }
        }
    };
  }
  return TensorT<S>(std::move(n));
}

// Rows of unit Euclidean norm along `axis`; an exactly-zero slice maps to an
// exactly-zero slice (with zero gradient).
template <typename S>
TensorT<S> l2_normalize(const TensorT<S>& a, int axis) {
  auto geom = detail::axis_geom(a.shape(), axis, "l2_normalize");
  if (geom.extent == 0) throw ShapeError("l2_normalize: empty axis in shape " + shape_str(a.shape()));
  auto n = detail::make_result<S>(a.shape(), "l2_normalize", {a.node()});
  const auto& av = a.data();
  auto& ov = n->value;
  std::vector<S> inv_norm(geom.outer * geom.inner, S(0));
  for (std::size_t o = 0; o < geom.outer; ++o)
    for (std::size_t in = 0; in < geom.inner; ++in) {
      std::size_t base = o * geom.extent * geom.inner + in;
      S ss = 0;
      for (std::size_t e = 0; e < geom.extent; ++e) {
        S v = av[base + e * geom.inner];
        ss += v * v;
      }
      S inv = ss == S(0) ? S(0) : S(1) / std::sqrt(ss);
      inv_norm[o * geom.inner + in] = inv;
      for (std::size_t e = 0; e < geom.extent; ++e) ov[base + e * geom.inner] = av[base + e * geom.inner] * inv;
    }
  if (n->requires_grad) {
    n->backprop = [geom, inv_norm = std::move(inv_norm)](detail::TapeNode<S>& rn) {
      auto& p = *rn.parents[0];
      p.ensure_grad();
      for (std::size_t o = 0; o < geom.outer; ++o)
        for (std::size_t in = 0; in < geom.inner; ++in) {
          std::size_t base = o * geom.extent * geom.inner + in;
          S inv = inv_norm[o * geom.inner + in];
          if (inv == S(0)) continue;
          S dot = 0;
          for (std::size_t e = 0; e < geom.extent; ++e) {
            std::size_t k = base + e * geom.inner;
            dot += rn.grad[k] * rn.value[k];
          }
          for (std::size_t e = 0; e < geom.extent; ++e) {
            std::size_t k = base + e * geom.inner;
            p.grad[k] += inv * (rn.grad[k] - rn.value[k] * dot);
          }
        }
    };
  }
  return TensorT<S>(std::move(n));
}

// ---------------------------------------------------------------------------
// indexed ops

// Row lookup: table is K x d, ids any integer shape; output shape is
// ids.shape + [d]. Gradient scatters into the table rows.
template <typename S>
TensorT<S> embedding_lookup(const TensorT<S>& table, const IntArray& ids) {
  if (table.rank() != 2) throw ShapeError("embedding_lookup: table must be 2-d, got " + shape_str(table.shape()));
  int K = table.dim(0), d = table.dim(1);
  Shape out = ids.shape;
  out.push_back(d);
  auto n = detail::make_result<S>(out, "embedding_lookup", {table.node()});
  const auto& tv = table.data();
  for (std::size_t i = 0; i < ids.numel(); ++i) {
    std::int32_t id = ids.data[i];
    if (id < 0 || id >= K)
      throw ValueError("embedding_lookup: index " + std::to_string(id) + " out of range [0, " +
                       std::to_string(K) + ")");
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(id) * d, static_cast<std::size_t>(d),
                n->value.begin() + static_cast<std::ptrdiff_t>(i) * d);
  }
  if (n->requires_grad) {
    std::vector<std::int32_t> idv = ids.data;
    n->backprop = [idv = std::move(idv), d](detail::TapeNode<S>& rn) {
      auto& p = *rn.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < idv.size(); ++i) {
        std::size_t dst = static_cast<std::size_t>(idv[i]) * static_cast<std::size_t>(d);
        std::size_t src = i * static_cast<std::size_t>(d);
        for (int j = 0; j < d; ++j) p.grad[dst + static_cast<std::size_t>(j)] += rn.grad[src + static_cast<std::size_t>(j)];
      }
    };
  }
  return TensorT<S>(std::move(n));
}

// Pick one entry along the last axis per leading position. ids.shape must
// equal a.shape without its last axis.
template <typename S>
TensorT<S> gather_last(const TensorT<S>& a, const IntArray& ids) {
  if (a.rank() < 1) throw ShapeError("gather: scalar input");
  Shape lead(a.shape().begin(), a.shape().end() - 1);
  if (ids.shape != lead)
    throw ShapeError("gather: index shape " + shape_str(ids.shape) + " does not match leading dims of " +
                     shape_str(a.shape()));
  int last = a.dim(a.rank() - 1);
  auto n = detail::make_result<S>(lead, "gather", {a.node()});
  const auto& av = a.data();
  for (std::size_t i = 0; i < ids.numel(); ++i) {
    std::int32_t id = ids.data[i];
    if (id < 0 || id >= last)
      throw ValueError("gather: index " + std::to_string(id) + " out of range [0, " + std::to_string(last) + ")");
    n->value[i] = av[i * static_cast<std::size_t>(last) + static_cast<std::size_t>(id)];
  }
  if (n->requires_grad) {
    std::vector<std::int32_t> idv = ids.data;
    n->backprop = [idv = std::move(idv), last](detail::TapeNode<S>& rn) {
      auto& p = *rn.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < idv.size(); ++i)
        p.grad[i * static_cast<std::size_t>(last) + static_cast<std::size_t>(idv[i])] += rn.grad[i];
    };
  }
  return TensorT<S>(std::move(n));
}

// Where mask (broadcastable, nonzero = masked) is set, output takes `value`
// and the gradient is cut.
template <typename S>
TensorT<S> masked_fill(const TensorT<S>& a, const IntArray& mask, S value) {
  Shape out = detail::broadcast_shape(a.shape(), mask.shape, "masked_fill");
  if (out != a.shape())
    throw ShapeError("masked_fill: mask " + shape_str(mask.shape) + " does not broadcast onto " +
                     shape_str(a.shape()));
  auto n = detail::make_result<S>(a.shape(), "masked_fill", {a.node()});
  const auto& av = a.data();
  auto& ov = n->value;
  std::vector<std::uint8_t> hit(av.size());
  detail::for_each_broadcast2(out, a.shape(), mask.shape, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    bool m = mask.data[ib] != 0;
    hit[ia] = m ? 1 : 0;
    ov[o] = m ? value : av[ia];
  });
  if (n->requires_grad) {
    n->backprop = [hit = std::move(hit)](detail::TapeNode<S>& rn) {
      auto& p = *rn.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < rn.grad.size(); ++i)
        if (!hit[i]) p.grad[i] += rn.grad[i];
    };
  }
  return TensorT<S>(std::move(n));
}

// Inverted dropout: at train time each element is zeroed with probability
// `rate` and the survivors are scaled by 1/(1-rate); eval is the identity and
// consumes no randomness.
template <typename S>
TensorT<S> dropout(const TensorT<S>& a, double rate, RngStream* rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) throw ValueError("dropout: rate must be in [0, 1)");
  if (!training || rate == 0.0) {
    auto n = detail::make_result<S>(a.shape(), "dropout", {a.node()});
    n->value = a.data();
    if (n->requires_grad) {
      n->backprop = [](detail::TapeNode<S>& rn) {
        auto& p = *rn.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < rn.grad.size(); ++i) p.grad[i] += rn.grad[i];
      };
    }
    return TensorT<S>(std::move(n));
  }
  if (rng == nullptr) throw ValueError("dropout: training mode requires an RNG stream");
  auto n = detail::make_result<S>(a.shape(), "dropout", {a.node()});
  const auto& av = a.data();
  S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
  std::vector<S> mask(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    mask[i] = rng->next_double() < rate ? S(0) : keep_scale;
    n->value[i] = av[i] * mask[i];
  }
  if (n->requires_grad) {
    n->backprop = [mask = std::move(mask)](detail::TapeNode<S>& rn) {
      auto& p = *rn.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < rn.grad.size(); ++i) p.grad[i] += rn.grad[i] * mask[i];
    };
  }
  return TensorT<S>(std::move(n));
}

// ---------------------------------------------------------------------------
// matmul

namespace detail {

template <typename S>
void gemm_nn_range(const S* __restrict__ A, const S* __restrict__ B, S* __restrict__ C,
                   std::int64_t lo, std::int64_t hi, std::int64_t k, std::int64_t n,
                   bool accumulate) {
  for (std::int64_t i = lo; i < hi; ++i) {
    S* __restrict__ c = C + i * n;
    if (!accumulate)
      for (std::int64_t j = 0; j < n; ++j) c[j] = S(0);
    const S* __restrict__ a = A + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      S av = a[p];
      const S* __restrict__ b = B + p * n;
      for (std::int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m,n] (+)= A[m,k] @ B[k,n], all row-major. Rows are independent, so the
// parallel split cannot change results.
template <typename S>
void gemm_nn(const S* __restrict__ A, const S* __restrict__ B, S* __restrict__ C, std::int64_t m,
             std::int64_t k, std::int64_t n, bool accumulate) {
  if (m * n * k < 1 << 15 || max_threads() == 1) {
    gemm_nn_range(A, B, C, 0, m, k, n, accumulate);
    return;
  }
  parallel_for(m, 1, [&](std::int64_t lo, std::int64_t hi) {
    gemm_nn_range(A, B, C, lo, hi, k, n, accumulate);
  });
}

template <typename S>
void gemm_nt_range(const S* __restrict__ A, const S* __restrict__ B, S* __restrict__ C,
                   std::int64_t lo, std::int64_t hi, std::int64_t k, std::int64_t n,
                   bool accumulate) {
  for (std::int64_t i = lo; i < hi; ++i) {
    const S* __restrict__ a = A + i * k;
    S* __restrict__ c = C + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const S* __restrict__ b = B + j * k;
      S acc = 0;
      for (std::int64_t p = 0; p < k; ++p) acc += a[p] * b[p];
      c[j] = accumulate ? c[j] + acc : acc;
    }
  }
}

// C[m,n] (+)= A[m,k] @ B^T where B is given row-major as [n,k].
template <typename S>
void gemm_nt(const S* __restrict__ A, const S* __restrict__ B, S* __restrict__ C, std::int64_t m,
             std::int64_t k, std::int64_t n, bool accumulate) {
  if (m * n * k < 1 << 15 || max_threads() == 1) {
    gemm_nt_range(A, B, C, 0, m, k, n, accumulate);
    return;
  }
  parallel_for(m, 1, [&](std::int64_t lo, std::int64_t hi) {
    gemm_nt_range(A, B, C, lo, hi, k, n, accumulate);
  });
}

template <typename S>
void gemm_tn_range(const S* __restrict__ A, const S* __restrict__ B, S* __restrict__ C,
                   std::int64_t lo, std::int64_t hi, std::int64_t m, std::int64_t k, std::int64_t n,
                   bool accumulate) {
  if (!accumulate)
    for (std::int64_t p = lo; p < hi; ++p)
      for (std::int64_t j = 0; j < n; ++j) C[p * n + j] = S(0);
  for (std::int64_t i = 0; i < m; ++i) {
    const S* __restrict__ b = B + i * n;
    for (std::int64_t p = lo; p < hi; ++p) {
      S av = A[i * k + p];
      if (av == S(0)) continue;
      S* __restrict__ c = C + p * n;
      for (std::int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[k,n] (+)= A^T @ B where A is [m,k] and B is [m,n], row-major. Each output
// row accumulates over i in ascending order regardless of the column split.
template <typename S>
void gemm_tn(const S* __restrict__ A, const S* __restrict__ B, S* __restrict__ C, std::int64_t m,
             std::int64_t k, std::int64_t n, bool accumulate) {
  if (m * n * k < 1 << 15 || max_threads() == 1) {
    gemm_tn_range(A, B, C, 0, k, m, k, n, accumulate);
    return;
  }
  parallel_for(k, 1, [&](std::int64_t lo, std::int64_t hi) {
    gemm_tn_range(A, B, C, lo, hi, m, k, n, accumulate);
  });
}

} // namespace detail

// Matrix product over the last two axes. Either both operands carry identical
// leading (batch) dims, or b is a plain matrix applied to every batch of a.
template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul: operands must have matrix axes, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  int ra = a.rank(), rb = b.rank();
  std::int64_t m = a.dim(ra - 2), k = a.dim(ra - 1);
  std::int64_t kb = b.dim(rb - 2), nn = b.dim(rb - 1);
  if (k != kb)
    throw ShapeError("matmul: inner dims disagree, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  bool b_broadcast = (rb == 2 && ra > 2);
  if (!b_broadcast && ra != rb)
    throw ShapeError("matmul: rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::int64_t batch = 1;
  for (int i = 0; i < ra - 2; ++i) {
    if (!b_broadcast && a.dim(i) != b.dim(i))
      throw ShapeError("matmul: batch dims disagree, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    batch *= a.dim(i);
  }
  Shape out(a.shape().begin(), a.shape().end() - 2);
  out.push_back(static_cast<int>(m));
  out.push_back(static_cast<int>(nn));

  auto n = detail::make_result<S>(out, "matmul", {a.node(), b.node()});
  const S* A = a.data().data();
  const S* B = b.data().data();
  S* C = n->value.data();
  if (b_broadcast) {
    // one fused gemm over all batch rows; identical arithmetic per row
    detail::gemm_nn(A, B, C, batch * m, k, nn, false);
  } else {
    for (std::int64_t bi = 0; bi < batch; ++bi)
      detail::gemm_nn_range(A + bi * m * k, B + bi * k * nn, C + bi * m * nn, 0, m, k, nn, false);
  }

  if (n->requires_grad) {
    n->backprop = [m, k, nn, batch, b_broadcast](detail::TapeNode<S>& rn) {
      auto& pa = *rn.parents[0];
      auto& pb = *rn.parents[1];
      const S* G = rn.grad.data();
      if (pa.requires_grad) {
        pa.ensure_grad();
        // dA = dC @ B^T
        if (b_broadcast) {
          detail::gemm_nt(G, pb.value.data(), pa.grad.data(), batch * m, nn, k, true);
        } else {
          for (std::int64_t bi = 0; bi < batch; ++bi)
            detail::gemm_nt_range(G + bi * m * nn, pb.value.data() + bi * k * nn,
                                  pa.grad.data() + bi * m * k, 0, m, nn, k, true);
        }
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        // dB = A^T @ dC, accumulated over the batch when b is broadcast
        if (b_broadcast) {
          detail::gemm_tn(pa.value.data(), G, pb.grad.data(), batch * m, k, nn, true);
        } else {
          for (std::int64_t bi = 0; bi < batch; ++bi)
            detail::gemm_tn_range(pa.value.data() + bi * m * k, G + bi * m * nn,
                                  pb.grad.data() + bi * k * nn, 0, k, m, k, nn, true);
        }
      }
    };
  }
  return TensorT<S>(std::move(n));
}

// Batched A @ B^T with both operands [batch, m|n, k]; avoids materializing
// the transpose on the attention hot path. Semantics and gradients match
// matmul(a, transpose_last(b)).
template <typename S>
TensorT<S> matmul_nt(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
    throw ShapeError("matmul_nt: expected [N, m, k] x [N, n, k], got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  std::int64_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), nn = b.dim(1);
  auto n = detail::make_result<S>({a.dim(0), a.dim(1), b.dim(1)}, "matmul_nt", {a.node(), b.node()});
  const S* A = a.data().data();
  const S* B = b.data().data();
  S* C = n->value.data();
  for (std::int64_t bi = 0; bi < batch; ++bi)
    detail::gemm_nt_range(A + bi * m * k, B + bi * nn * k, C + bi * m * nn, 0, m, k, nn, false);
  if (n->requires_grad) {
    n->backprop = [batch, m, k, nn](detail::TapeNode<S>& rn) {
      auto& pa = *rn.parents[0];
      auto& pb = *rn.parents[1];
      const S* G = rn.grad.data();
      if (pa.requires_grad) {
        pa.ensure_grad();
        // dA = dC @ B
        for (std::int64_t bi = 0; bi < batch; ++bi)
          detail::gemm_nn_range(G + bi * m * nn, pb.value.data() + bi * nn * k,
                                pa.grad.data() + bi * m * k, 0, m, nn, k, true);
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        // dB = dC^T @ A
        for (std::int64_t bi = 0; bi < batch; ++bi)
          detail::gemm_tn_range(G + bi * m * nn, pa.value.data() + bi * m * k,
                                pb.grad.data() + bi * nn * k, 0, nn, m, nn, k, true);
      }
    };
  }
  return TensorT<S>(std::move(n));
}

// ---------------------------------------------------------------------------
// backward

// Reverse-mode sweep from a scalar loss. Fills `grad` on every reachable
// tensor whose requires_grad flag is set (including intermediates). The tape
// rooted at `loss` is consumed: a second call on the same loss is an error.
template <typename S>
void backward(TensorT<S>& loss) {
  if (loss.numel() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  auto root = loss.node();
  if (root->backward_done) throw ValueError("backward: tape already consumed for this loss");
  if (!root->requires_grad) throw ValueError("backward: loss has no differentiable ancestors");

  // Iterative post-order DFS; children (parents in tape terms) first.
  std::vector<detail::TapeNode<S>*> order;
  std::unordered_set<detail::TapeNode<S>*> visited;
  std::vector<std::pair<detail::TapeNode<S>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto* parent = node->parents[next].get();
      ++next;
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* node : order) {
    node->grad.assign(node->value.size(), S(0));
  }
  root->grad[0] = S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (node->backprop) node->backprop(*node);
  }
  root->backward_done = true;
}

} // namespace gcrl
