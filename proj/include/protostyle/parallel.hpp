#pragma once

// Worker-count control and an order-preserving parallel map. Results land in
// their input slot, so reductions over the output are deterministic for any
// thread count.

#include "protostyle/core.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace protostyle {

// PROTOSTYLE_THREADS sets the worker cap; unset means hardware concurrency.
inline int worker_count() {
  const int hw = std::max(1u, std::thread::hardware_concurrency());
  const char* env = std::getenv("PROTOSTYLE_THREADS");
  if (!env || !*env) return hw;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError("PROTOSTYLE_THREADS", "must be a positive integer, got '" + std::string(env) + "'");
  return static_cast<int>(std::min<long>(v, 256));
}

template <class T>
std::vector<T> parallel_map(size_t n, const std::function<T(size_t)>& fn, int threads = worker_count()) {
  std::vector<T> out(n);
  const size_t workers = std::min<size_t>(static_cast<size_t>(std::max(1, threads)), n);
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&]() {
    for (size_t i = next++; i < n; i = next++) {
      try {
        out[i] = fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
  return out;
}

}  // namespace protostyle
