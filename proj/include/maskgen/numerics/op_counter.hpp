// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace maskgen {

/// Tally of scalar multiplications performed inside matrix products.
///
/// Only the multiplies of `matmul` (and its batched form) are counted.
/// Additions, elementwise scaling, softmax and normalisation are ignored,
/// which is the convention the analytic attention cost formulas use.
class OpCounter {
 public:
  void add(std::uint64_t multiplies) {
    if (enabled_) count_ += multiplies;
  }
  std::uint64_t count() const { return count_; }
  void reset() { count_ = 0; }
  bool enabled() const { return enabled_; }
  void set_enabled(bool on) { enabled_ = on; }

  /// Folds a private per-worker counter into this one.
  void merge(const OpCounter& other) { count_ += other.count_; }

 private:
  std::uint64_t count_ = 0;
  bool enabled_ = true;
};

namespace detail {
inline OpCounter*& active_counter() {
  thread_local OpCounter* current = nullptr;
  return current;
}
}  // namespace detail

/// Routes multiply counts of the current thread into `counter` for the
/// lifetime of the scope. Scopes nest; the previous target is restored.
class CountingScope {
 public:
  explicit CountingScope(OpCounter& counter) : previous_(detail::active_counter()) {
    detail::active_counter() = &counter;
  }
  ~CountingScope() { detail::active_counter() = previous_; }
  CountingScope(const CountingScope&) = delete;
  CountingScope& operator=(const CountingScope&) = delete;

 private:
  OpCounter* previous_;
};

inline void count_multiplies(std::uint64_t n) {
  if (OpCounter* c = detail::active_counter()) c->add(n);
}

}  // namespace maskgen
