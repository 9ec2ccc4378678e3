#include "gcrl/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace gcrl {

namespace {

std::atomic<int> g_max_threads{0}; // 0 = not yet resolved

int resolve_from_env() {
  const char* env = std::getenv("GCRL_THREADS");
  if (env != nullptr) {
    int v = std::atoi(env);
    if (v >= 1) return v;
  }
  return 1;
}

} // namespace

int max_threads() {
  int v = g_max_threads.load(std::memory_order_relaxed);
  if (v == 0) {
    v = resolve_from_env();
    g_max_threads.store(v, std::memory_order_relaxed);
  }
  return v;
}

void set_max_threads(int n) {
  g_max_threads.store(n < 1 ? 1 : n, std::memory_order_relaxed);
}

void parallel_for(std::int64_t n, std::int64_t grain,
                  const std::function<void(std::int64_t, std::int64_t)>& fn) {
  if (n <= 0) return;
  if (grain < 1) grain = 1;
  int workers = static_cast<int>(std::min<std::int64_t>(max_threads(), (n + grain - 1) / grain));
  if (workers <= 1) {
    fn(0, n);
    return;
  }
  std::int64_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(workers - 1));
  for (int w = 1; w < workers; ++w) {
    std::int64_t lo = w * chunk;
    std::int64_t hi = std::min<std::int64_t>(n, lo + chunk);
    if (lo >= hi) break;
    threads.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  fn(0, std::min<std::int64_t>(n, chunk));
  for (auto& t : threads) t.join();
}

} // namespace gcrl
