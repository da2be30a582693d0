#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace sparse_moe {

/// Worker cap from SPARSE_MOE_THREADS, or 1 when unset or malformed.
inline int threads_from_env() {
  const char* raw = std::getenv("SPARSE_MOE_THREADS");
  if (raw == nullptr) return 1;
  try {
    return std::max(1, std::stoi(raw));
  } catch (const std::exception&) {
    return 1;
  }
}

/// Runs fn(j) for j in [0, count). Each index writes only its own slot, so
/// results are identical to the sequential loop. The exception raised by the
/// lowest failing index is rethrown.
template <typename Fn>
void parallel_for(long count, int threads, Fn&& fn) {
  if (threads <= 1 || count <= 1) {
    for (long j = 0; j < count; ++j) fn(j);
    return;
  }
  const long workers = std::min<long>(threads, count);
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(count));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (long w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (long j = w; j < count; j += workers) {
        try {
          fn(j);
        } catch (...) {
          errors[static_cast<std::size_t>(j)] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace sparse_moe
