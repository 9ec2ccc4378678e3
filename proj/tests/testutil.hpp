#pragma once

// Shared helpers for the test suites. The finite-difference checker here is
// the independent oracle for every differentiable op: it never touches the
// backward path it is checking.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "gcrl/tensor.hpp"

namespace gcrl::testing {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst; // "input#i[j]"
};

// Central finite differences at eps on every element of every input, in
// 64-bit shadow mode, against one reverse-mode sweep. The relative error is
// |analytic - fd| / max(1, |fd|).
inline GradCheckResult gradcheck(
    std::vector<Tensor64> inputs,
    const std::function<Tensor64(std::vector<Tensor64>&)>& make_loss, double eps = 1e-3) {
  for (auto& in : inputs) in.set_requires_grad(true);
  Tensor64 loss = make_loss(inputs);
  backward(loss);

  GradCheckResult res;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& in = inputs[i];
    for (std::size_t j = 0; j < in.numel(); ++j) {
      double saved = in.data()[j];
      in.data()[j] = saved + eps;
      double up = make_loss(inputs).item();
      in.data()[j] = saved - eps;
      double down = make_loss(inputs).item();
      in.data()[j] = saved;
      double fd = (up - down) / (2.0 * eps);
      double rel = std::abs(in.grad()[j] - fd) / std::max(1.0, std::abs(fd));
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "input#" + std::to_string(i) + "[" + std::to_string(j) + "]";
      }
    }
  }
  return res;
}

inline Tensor64 rand_tensor64(gcrl::Shape shape, gcrl::RngStream& rng, double lo = -1.0,
                              double hi = 1.0) {
  auto t = Tensor64::zeros(shape);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline Tensor rand_tensor(gcrl::Shape shape, gcrl::RngStream& rng, double lo = -1.0, double hi = 1.0) {
  auto t = Tensor::zeros(shape);
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

} // namespace gcrl::testing
