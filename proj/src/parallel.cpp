#include "esfm/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace esfm {

int thread_width() {
  if (const char* env = std::getenv("ESFM_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

void parallel_chunks(int n, const std::function<void(int, int)>& fn) {
  if (n <= 0) return;
  const int width = std::min(thread_width(), n);
  if (width <= 1) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> workers;
  workers.reserve(width);
  const int base = n / width, extra = n % width;
  int begin = 0;
  for (int t = 0; t < width; ++t) {
    const int len = base + (t < extra ? 1 : 0);
    workers.emplace_back(fn, begin, begin + len);
    begin += len;
  }
  for (auto& w : workers) w.join();
}

}  // namespace esfm
