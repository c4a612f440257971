#include "p23d/common.hpp"

#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>

namespace p23d {

namespace {

std::atomic<unsigned> g_threads{0};

unsigned default_threads() {
  if (const char *env = std::getenv("P23D_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) {
      return static_cast<unsigned>(v);
    }
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

} // namespace

void set_thread_count(unsigned n) { g_threads.store(n); }

unsigned thread_count() {
  const unsigned n = g_threads.load();
  return n == 0 ? default_threads() : n;
}

void parallel_for(std::size_t n, std::size_t chunk,
                  const std::function<void(std::size_t, std::size_t)> &fn) {
  if (n == 0) {
    return;
  }
  chunk = std::max<std::size_t>(chunk, 1);
  const std::size_t chunks = (n + chunk - 1) / chunk;
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(thread_count(), chunks));
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) {
      fn(c * chunk, std::min(n, (c + 1) * chunk));
    }
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto body = [&] {
    for (std::size_t c = next.fetch_add(1); c < chunks; c = next.fetch_add(1)) {
      try {
        fn(c * chunk, std::min(n, (c + 1) * chunk));
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) {
          failure = std::current_exception();
        }
        next.store(chunks);
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (unsigned t = 1; t < workers; ++t) {
    pool.emplace_back(body);
  }
  body();
  for (auto &t : pool) {
    t.join();
  }
  if (failure) {
    std::rethrow_exception(failure);
  }
}

double pairwise_sum(const double *v, std::size_t n) {
  if (n <= 8) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      s += v[i];
    }
    return s;
  }
  const std::size_t half = n / 2;
  return pairwise_sum(v, half) + pairwise_sum(v + half, n - half);
}

} // namespace p23d
