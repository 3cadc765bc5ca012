#include "uformer/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace uformer {

namespace {

int threads_from_env() {
  const char* env = std::getenv("UFORMER_THREADS");
  if (!env) return 1;
  try {
    return std::max(1, std::stoi(env));
  } catch (...) {
    return 1;
  }
}

std::atomic<int> g_threads{threads_from_env()};
std::atomic<bool> g_deterministic{false};

}  // namespace

int thread_count() { return g_deterministic ? 1 : g_threads.load(); }
void set_thread_count(int n) { g_threads = std::max(1, n); }

bool deterministic_mode() { return g_deterministic; }
void set_deterministic_mode(bool on) { g_deterministic = on; }

void parallel_for(std::int64_t n, std::int64_t work_per_item,
                  const std::function<void(std::int64_t, std::int64_t)>& body) {
  if (n <= 0) return;
  constexpr std::int64_t kMinWorkPerThread = 1 << 15;
  const std::int64_t by_work = std::max<std::int64_t>(1, n * std::max<std::int64_t>(1, work_per_item) / kMinWorkPerThread);
  const auto workers = static_cast<std::int64_t>(std::min<std::int64_t>({thread_count(), n, by_work}));
  if (workers <= 1) {
    body(0, n);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(static_cast<std::size_t>(workers - 1));
  const std::int64_t chunk = (n + workers - 1) / workers;
  for (std::int64_t w = 1; w < workers; ++w) {
    const std::int64_t begin = w * chunk;
    const std::int64_t end = std::min(n, begin + chunk);
    if (begin < end) pool.emplace_back([&body, begin, end] { body(begin, end); });
  }
  body(0, std::min(n, chunk));
}

}  // namespace uformer
