#include "oshx/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace oshx {
namespace {

int default_workers() {
  if (const char* env = std::getenv("OSHX_WORKERS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return static_cast<int>(std::clamp(hw, 1u, 8u));
}

int g_workers = default_workers();

} // namespace

int worker_count() { return g_workers; }

void set_worker_count(int n) { g_workers = std::max(1, n); }

void parallel_for(int64_t begin, int64_t end,
                  const std::function<void(int64_t)>& fn) {
  const int64_t n = end - begin;
  if (n <= 0) return;
  const int workers = static_cast<int>(std::min<int64_t>(g_workers, n));
  if (workers <= 1 || n < 4) {
    for (int64_t i = begin; i < end; ++i) fn(i);
    return;
  }
  std::vector<std::thread> threads;
  threads.reserve(static_cast<size_t>(workers) - 1);
  const int64_t chunk = (n + workers - 1) / workers;
  auto run = [&fn](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) fn(i);
  };
  for (int w = 1; w < workers; ++w) {
    const int64_t lo = begin + w * chunk;
    const int64_t hi = std::min(end, lo + chunk);
    if (lo < hi) threads.emplace_back(run, lo, hi);
  }
  run(begin, std::min(end, begin + chunk));
  for (auto& t : threads) t.join();
}

} // namespace oshx
