#include "mokt/parallel.hpp"

#include <cstdlib>
#include <thread>
#include <vector>

namespace mokt {

int thread_count() {
  static const int cached = [] {
    const char* env = std::getenv("MOKT_THREADS");
    int n = 0;
    if (env && *env) n = std::atoi(env);
    if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
    return n > 0 ? n : 1;
  }();
  return cached;
}

void parallel_for(std::int64_t n,
                  const std::function<void(std::int64_t, std::int64_t)>& body,
                  std::int64_t min_grain) {
  if (n <= 0) return;
  int workers = thread_count();
  if (workers <= 1 || n < min_grain * 2) {
    body(0, n);
    return;
  }
  std::int64_t chunks = std::min<std::int64_t>(workers, (n + min_grain - 1) / min_grain);
  std::int64_t per = (n + chunks - 1) / chunks;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(chunks));
  for (std::int64_t c = 0; c < chunks; ++c) {
    std::int64_t begin = c * per;
    std::int64_t end = std::min(n, begin + per);
    if (begin >= end) break;
    pool.emplace_back([&body, begin, end] { body(begin, end); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace mokt
