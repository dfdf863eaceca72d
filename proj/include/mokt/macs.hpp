#pragma once

#include <atomic>
#include <cstdint>

namespace mokt {

// Multiply-accumulate instrumentation. Ops credit the counter with the MAC
// convention amount for the work they perform (dense: in*out*positions,
// conv: k*k*Cin*Cout*positions, depthwise: k*k*C*positions; norms,
// activations, biases and elementwise products are free). The counter is a
// process-global atomic so counts from worker threads are not lost; ops add
// one bulk amount per call, so contention is negligible.
namespace macs {

inline std::atomic<std::int64_t>& counter() {
  static std::atomic<std::int64_t> c{0};
  return c;
}

inline std::atomic<bool>& enabled_flag() {
  static std::atomic<bool> f{false};
  return f;
}

inline bool enabled() { return enabled_flag().load(std::memory_order_relaxed); }

inline void add(std::int64_t n) {
  if (enabled()) counter().fetch_add(n, std::memory_order_relaxed);
}

// RAII scope: zeroes the counter on entry, restores the previous enable state
// on exit. Read the total with macs::total() before the scope closes.
class CountScope {
 public:
  CountScope() : previous_(enabled_flag().exchange(true)) {
    counter().store(0, std::memory_order_relaxed);
  }
  ~CountScope() { enabled_flag().store(previous_); }
  CountScope(const CountScope&) = delete;
  CountScope& operator=(const CountScope&) = delete;

 private:
  bool previous_;
};

inline std::int64_t total() {
  return counter().load(std::memory_order_relaxed);
}

}  // namespace macs
}  // namespace mokt
