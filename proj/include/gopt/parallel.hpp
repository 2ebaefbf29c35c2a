#pragma once

#include <cstddef>
#include <thread>
#include <vector>

namespace gopt {

/// Splits [0, n) into at most `workers` contiguous chunks and runs
/// fn(begin, end) on each. Chunks own disjoint output ranges, so the result
/// of a map is identical for any worker count; reductions must be segmented
/// by the caller. workers <= 1 runs inline.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  if (n == 0) return;
  if (workers <= 1 || n == 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::size_t parts = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  std::size_t chunk = (n + parts - 1) / parts;
  std::vector<std::thread> threads;
  threads.reserve(parts);
  for (std::size_t p = 0; p < parts; ++p) {
    std::size_t b = p * chunk;
    std::size_t e = std::min(n, b + chunk);
    if (b >= e) break;
    threads.emplace_back([&fn, b, e] { fn(b, e); });
  }
  for (auto& t : threads) t.join();
}

}  // namespace gopt
