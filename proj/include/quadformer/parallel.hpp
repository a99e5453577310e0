#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace qf {

/// Worker count from QF_THREADS, else hardware concurrency (at least 1).
std::size_t thread_budget();

/// Runs fn(begin, end) over disjoint chunks of [0, n). Each index is
/// processed by exactly one call, so results do not depend on the split.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t grain, Fn&& fn) {
  const std::size_t workers = std::min(thread_budget(), grain ? n / grain : n);
  if (workers <= 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t b = w * chunk;
    const std::size_t e = std::min(n, b + chunk);
    if (b < e) pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(std::size_t{0}, std::min(n, chunk));
  for (auto& t : pool) t.join();
}

}  // namespace qf
