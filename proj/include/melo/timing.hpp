#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <numeric>
#include <vector>

namespace melo {

using MonotonicClock = std::chrono::steady_clock;

inline std::uint64_t elapsed_ns(MonotonicClock::time_point since) {
  return static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::nanoseconds>(MonotonicClock::now() - since).count());
}

struct LatencySummary {
  std::size_t count = 0;
  std::uint64_t min_ns = 0;
  std::uint64_t median_ns = 0;
  double mean_ns = 0;
  std::uint64_t total_ns = 0;
};

inline LatencySummary summarize(std::vector<std::uint64_t> samples) {
  LatencySummary s;
  if (samples.empty()) return s;
  std::sort(samples.begin(), samples.end());
  s.count = samples.size();
  s.min_ns = samples.front();
  s.median_ns = samples[samples.size() / 2];
  s.total_ns = std::accumulate(samples.begin(), samples.end(), std::uint64_t{0});
  s.mean_ns = static_cast<double>(s.total_ns) / static_cast<double>(s.count);
  return s;
}

}  // namespace melo
