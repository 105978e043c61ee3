#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cstddef>
#include <mutex>
#include <stdexcept>

namespace htmtree {

// Upper bound on simultaneously registered threads. Process ids are dense
// integers in [0, kMaxThreads).
inline constexpr int kMaxThreads = 128;

// Hands out the lowest free process id to each thread on first use and returns
// it when the thread exits, so ids stay dense across trials.
class ThreadRegistry {
 public:
  static int this_thread_id() {
    thread_local Slot slot;
    return slot.id;
  }

  // One past the highest id ever handed out. Scans over per-thread state only
  // need to look below this mark.
  static int high_water() noexcept { return state().high_water.load(std::memory_order_acquire); }

 private:
  struct State {
    std::mutex mu;
    std::array<bool, kMaxThreads> used{};
    std::atomic<int> high_water{0};
  };

  static State& state() {
    static State s;
    return s;
  }

  struct Slot {
    int id;
    Slot() : id(acquire()) {}
    ~Slot() { release(id); }
  };

  static int acquire() {
    State& s = state();
    std::lock_guard lock(s.mu);
    for (int i = 0; i < kMaxThreads; ++i) {
      if (!s.used[i]) {
        s.used[i] = true;
        if (i + 1 > s.high_water.load(std::memory_order_relaxed)) {
          s.high_water.store(i + 1, std::memory_order_release);
        }
        return i;
      }
    }
    throw std::runtime_error("htmtree: more than kMaxThreads threads registered");
  }

  static void release(int id) {
    State& s = state();
    std::lock_guard lock(s.mu);
    s.used[id] = false;
  }
};

}  // namespace htmtree
