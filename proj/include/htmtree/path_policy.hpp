#pragma once

// Execution-path policies for template operations.
//
// A data structure supplies each operation as an object with four bodies:
//   fast(txn)    sequential code, run inside a transaction
//   middle(txn)  LLX/SCX code using the transactional variants, inside a
//                transaction
//   fallback()   LLX/SCX code using the original lock-free variants
//   locked()     sequential code run without a transaction (TLE's fallback,
//                under the global lock)
// Each returns std::optional<Result>; nullopt asks for a restart from a fresh
// search on the same path. Restarts do not consume attempt budget; aborted
// transactions do.

#include <algorithm>
#include <array>
#include <atomic>
#include <cassert>
#include <chrono>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>

#include "htmtree/llxscx.hpp"
#include "htmtree/thread_registry.hpp"
#include "htmtree/txn.hpp"

namespace htmtree {

enum class PolicyKind : uint8_t { NonHtm, Tle, TwoPathConcurrent, TwoPathNonConcurrent, ThreePath };

inline constexpr std::array<PolicyKind, 5> kAllPolicies = {
    PolicyKind::NonHtm, PolicyKind::Tle, PolicyKind::TwoPathConcurrent,
    PolicyKind::TwoPathNonConcurrent, PolicyKind::ThreePath};

inline std::string_view to_string(PolicyKind k) {
  switch (k) {
    case PolicyKind::NonHtm: return "nonhtm";
    case PolicyKind::Tle: return "tle";
    case PolicyKind::TwoPathConcurrent: return "2pc";
    case PolicyKind::TwoPathNonConcurrent: return "2pnc";
    case PolicyKind::ThreePath: return "3path";
  }
  return "?";
}

inline std::optional<PolicyKind> parse_policy(std::string_view s) {
  for (PolicyKind k : kAllPolicies) {
    if (to_string(k) == s) return k;
  }
  return std::nullopt;
}

struct PathBudget {
  uint32_t attempt_limit = 20;
  uint32_t fast_limit = 10;
  uint32_t middle_limit = 10;

  void validate() const {
    if (attempt_limit < 1 || fast_limit < 1 || middle_limit < 1) {
      throw std::invalid_argument("path budgets must be >= 1");
    }
  }
};

enum class Path : uint8_t { Fast = 0, Middle = 1, Fallback = 2 };

inline std::string_view to_string(Path p) {
  switch (p) {
    case Path::Fast: return "fast";
    case Path::Middle: return "middle";
    case Path::Fallback: return "fallback";
  }
  return "?";
}

struct PathCounters {
  uint64_t completions = 0;
  // Completions of auxiliary operations (rebalancing steps), kept apart so
  // that `completions` counts dictionary operations only.
  uint64_t aux_completions = 0;
  uint64_t commits = 0;
  uint64_t restarts = 0;
  std::array<uint64_t, tm::kAbortReasonCount> aborts{};
  // Explicit aborts broken down by code (codes above 3 land in slot 0).
  std::array<uint64_t, 4> explicit_codes{};

  uint64_t abort_count(tm::AbortReason r) const { return aborts[static_cast<int>(r)]; }
  uint64_t total_aborts() const {
    uint64_t n = 0;
    for (uint64_t a : aborts) n += a;
    return n;
  }
  uint64_t attempts() const { return commits + total_aborts(); }

  PathCounters& operator+=(const PathCounters& o) {
    completions += o.completions;
    aux_completions += o.aux_completions;
    commits += o.commits;
    restarts += o.restarts;
    for (std::size_t i = 0; i < aborts.size(); ++i) aborts[i] += o.aborts[i];
    for (std::size_t i = 0; i < explicit_codes.size(); ++i) explicit_codes[i] += o.explicit_codes[i];
    return *this;
  }
};

struct PathStats {
  std::array<PathCounters, 3> paths;
  uint64_t ops_reaching_fallback = 0;
  // Transactional attempts made by an operation before it switched to the
  // fallback path.
  uint64_t min_attempts_before_fallback = std::numeric_limits<uint64_t>::max();
  uint64_t max_attempts_before_fallback = 0;

  PathCounters& operator[](Path p) { return paths[static_cast<int>(p)]; }
  const PathCounters& operator[](Path p) const { return paths[static_cast<int>(p)]; }

  uint64_t total_completions() const {
    return paths[0].completions + paths[1].completions + paths[2].completions;
  }

  PathStats& operator+=(const PathStats& o) {
    for (std::size_t i = 0; i < paths.size(); ++i) paths[i] += o.paths[i];
    ops_reaching_fallback += o.ops_reaching_fallback;
    min_attempts_before_fallback = std::min(min_attempts_before_fallback, o.min_attempts_before_fallback);
    max_attempts_before_fallback = std::max(max_attempts_before_fallback, o.max_attempts_before_fallback);
    return *this;
  }
};

// Counts operations currently on the fallback path.
class FallbackGate {
 public:
  void enter() { f_.fetch_add(1); }
  void exit() {
    [[maybe_unused]] const uint64_t prev = f_.fetch_add(-1);
    assert(prev > 0 && "gate exit without matching enter");
  }
  uint64_t value() const { return f_.load(); }
  tm::Word& word() { return f_; }

  class Scope {
   public:
    explicit Scope(FallbackGate& g) : g_(g) { g_.enter(); }
    ~Scope() { g_.exit(); }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    FallbackGate& g_;
  };

 private:
  tm::Word f_{0};
};

// TLE's global lock.
class GlobalLock {
 public:
  void acquire() {
    tm::detail::Backoff backoff;
    while (!held_.cas(0, 1)) {
      while (held_.load() != 0) backoff();
    }
  }
  bool try_acquire() { return held_.cas(0, 1); }
  void release() { held_.store(0); }
  bool held() const { return held_.load() != 0; }
  tm::Word& word() { return held_; }

 private:
  tm::Word held_{0};
};

namespace detail {

// Waits until `w` reads zero: a short spin, then sleeps that double up to 1 ms.
inline void wait_for_zero(const tm::Word& w) {
  if (w.load() == 0) return;
  for (int i = 0; i < 64; ++i) {
    std::this_thread::yield();
    if (w.load() == 0) return;
  }
  auto delay = std::chrono::microseconds(1);
  while (w.load() != 0) {
    std::this_thread::sleep_for(delay);
    delay = std::min(delay * 2, std::chrono::microseconds(1000));
  }
}

}  // namespace detail

class PathRuntime {
 public:
  PathRuntime(PolicyKind kind, PathBudget budget, tm::Engine& engine)
      : kind_(kind), budget_(budget), engine_(engine), stats_(std::make_unique<Slot[]>(kMaxThreads)) {
    budget_.validate();
  }

  PolicyKind kind() const noexcept { return kind_; }
  const PathBudget& budget() const noexcept { return budget_; }
  tm::Engine& engine() noexcept { return engine_; }
  FallbackGate& gate() noexcept { return gate_; }
  GlobalLock& lock() noexcept { return lock_; }

  // Merged per-thread statistics. Only meaningful when no operation runs.
  PathStats stats() const {
    PathStats total;
    for (int p = 0; p < kMaxThreads; ++p) total += stats_[p].s;
    return total;
  }
  void reset_stats() {
    for (int p = 0; p < kMaxThreads; ++p) stats_[p].s = PathStats{};
    fast_commits_gate_closed_.store(0);
    middle_commits_gate_closed_.store(0);
  }

  // Fast-path commits observed while the gate (or TLE lock) was closed. The
  // subscription to the gate makes this impossible; the probe checks it.
  uint64_t fast_commits_while_gate_closed() const { return fast_commits_gate_closed_.load(); }
  // Middle-path commits observed while some operation was on the fallback
  // path.
  uint64_t middle_commits_while_gate_closed() const { return middle_commits_gate_closed_.load(); }

  template <class Op>
  auto run(int pid, Op& op) -> typename Op::Result {
    switch (kind_) {
      case PolicyKind::NonHtm: return run_fallback(pid, op, 0, false);
      case PolicyKind::Tle: return run_tle(pid, op);
      case PolicyKind::TwoPathConcurrent: return run_two_path_con(pid, op);
      case PolicyKind::TwoPathNonConcurrent: return run_two_path_noncon(pid, op);
      case PolicyKind::ThreePath: return run_three_path(pid, op);
    }
    throw std::logic_error("unknown policy");
  }

 private:
  struct alignas(64) Slot {
    PathStats s;
  };

  enum class Gating { None, Gate, Lock };

  PathStats& my(int pid) { return stats_[pid].s; }

  void record(int pid, Path p, const tm::TxnOutcome& out) {
    PathCounters& c = my(pid)[p];
    if (out.is_committed()) {
      ++c.commits;
      return;
    }
    ++c.aborts[static_cast<int>(out.reason())];
    if (out.reason() == tm::AbortReason::Explicit) ++c.explicit_codes[out.code() < 4 ? out.code() : 0];
  }

  template <class Op>
  void complete(int pid, Path p) {
    if constexpr (requires { Op::kAuxiliary; }) {
      ++my(pid)[p].aux_completions;
    } else {
      ++my(pid)[p].completions;
    }
  }

  void note_fallback(int pid, uint64_t attempts) {
    PathStats& s = my(pid);
    ++s.ops_reaching_fallback;
    s.min_attempts_before_fallback = std::min(s.min_attempts_before_fallback, attempts);
    s.max_attempts_before_fallback = std::max(s.max_attempts_before_fallback, attempts);
  }

  struct ProbeCtx {
    tm::Word* gate;
    std::atomic<uint64_t>* counter;
  };

  static void fast_probe(void* ctx, const tm::Transaction& txn) {
    auto* c = static_cast<ProbeCtx*>(ctx);
    // Seqlock read: a gate change landing mid-probe is ordered after this
    // commit, so only a stable snapshot counts.
    const uint64_t version = c->gate->version();
    const uint64_t value = c->gate->peek();
    std::atomic_thread_fence(std::memory_order_acquire);
    if (c->gate->version() != version || (version & 1)) return;
    if (value != 0 && (!txn.has_read(*c->gate) || txn.read_version(*c->gate) == version)) {
      c->counter->fetch_add(1);
    }
  }

  static void middle_probe(void* ctx, const tm::Transaction&) {
    auto* c = static_cast<ProbeCtx*>(ctx);
    if (c->gate->peek() != 0) c->counter->fetch_add(1);
  }

  // One transactional attempt of `body` on path `p`. Returns the outcome and
  // stores the body's result in `result` on commit.
  template <class R, class Body>
  tm::TxnOutcome attempt(int pid, Path p, Gating gating, bool probe_middle, std::optional<R>& result,
                         Body&& body) {
    result.reset();
    ProbeCtx fast_ctx{gating == Gating::Lock ? &lock_.word() : &gate_.word(), &fast_commits_gate_closed_};
    ProbeCtx mid_ctx{&gate_.word(), &middle_commits_gate_closed_};
    std::optional<R> tmp;
    const tm::TxnOutcome out = engine_.execute_as(pid, [&](tm::Transaction& txn) {
      tmp.reset();
      if (gating == Gating::Gate) {
        if (txn.read(gate_.word()) != 0) txn.abort_explicit(llx::kGateClosed);
        txn.set_commit_probe(&fast_probe, &fast_ctx);
      } else if (gating == Gating::Lock) {
        if (txn.read(lock_.word()) != 0) txn.abort_explicit(llx::kGateClosed);
        txn.set_commit_probe(&fast_probe, &fast_ctx);
      } else if (probe_middle) {
        txn.set_commit_probe(&middle_probe, &mid_ctx);
      }
      tmp = body(txn);
    });
    record(pid, p, out);
    if (out.is_committed()) result = std::move(tmp);
    return out;
  }

  template <class Op>
  auto run_fallback(int pid, Op& op, uint64_t attempts_so_far, bool gated) -> typename Op::Result {
    if (kind_ != PolicyKind::NonHtm) note_fallback(pid, attempts_so_far);
    std::optional<FallbackGate::Scope> scope;
    if (gated) scope.emplace(gate_);
    for (;;) {
      auto r = op.fallback();
      if (r) {
        complete<Op>(pid, Path::Fallback);
        return std::move(*r);
      }
      ++my(pid)[Path::Fallback].restarts;
    }
  }

  template <class Op>
  auto run_three_path(int pid, Op& op) -> typename Op::Result {
    using R = typename Op::Result;
    std::optional<R> result;
    uint64_t tries = 0;
    for (uint32_t fast = 0; fast < budget_.fast_limit;) {
      const auto out = attempt<R>(pid, Path::Fast, Gating::Gate, false, result,
                                  [&](tm::Transaction& txn) { return op.fast(txn); });
      if (out.is_committed()) {
        if (result) {
          complete<Op>(pid, Path::Fast);
          return std::move(*result);
        }
        ++my(pid)[Path::Fast].restarts;
        continue;
      }
      ++fast;
      ++tries;
      if (out.is_explicit(llx::kGateClosed)) break;
    }
    for (uint32_t mid = 0; mid < budget_.middle_limit;) {
      const auto out = attempt<R>(pid, Path::Middle, Gating::None, true, result,
                                  [&](tm::Transaction& txn) { return op.middle(txn); });
      if (out.is_committed()) {
        if (result) {
          complete<Op>(pid, Path::Middle);
          return std::move(*result);
        }
        ++my(pid)[Path::Middle].restarts;
        continue;
      }
      ++mid;
      ++tries;
    }
    return run_fallback(pid, op, tries, true);
  }

  template <class Op>
  auto run_two_path_con(int pid, Op& op) -> typename Op::Result {
    using R = typename Op::Result;
    std::optional<R> result;
    for (uint32_t tries = 0; tries < budget_.attempt_limit;) {
      const auto out = attempt<R>(pid, Path::Fast, Gating::None, false, result,
                                  [&](tm::Transaction& txn) { return op.middle(txn); });
      if (out.is_committed()) {
        if (result) {
          complete<Op>(pid, Path::Fast);
          return std::move(*result);
        }
        ++my(pid)[Path::Fast].restarts;
        continue;
      }
      ++tries;
    }
    return run_fallback(pid, op, budget_.attempt_limit, false);
  }

  template <class Op>
  auto run_two_path_noncon(int pid, Op& op) -> typename Op::Result {
    using R = typename Op::Result;
    std::optional<R> result;
    for (uint32_t tries = 0; tries < budget_.attempt_limit;) {
      detail::wait_for_zero(gate_.word());
      const auto out = attempt<R>(pid, Path::Fast, Gating::Gate, false, result,
                                  [&](tm::Transaction& txn) { return op.fast(txn); });
      if (out.is_committed()) {
        if (result) {
          complete<Op>(pid, Path::Fast);
          return std::move(*result);
        }
        ++my(pid)[Path::Fast].restarts;
        continue;
      }
      ++tries;
    }
    return run_fallback(pid, op, budget_.attempt_limit, true);
  }

  template <class Op>
  auto run_tle(int pid, Op& op) -> typename Op::Result {
    using R = typename Op::Result;
    std::optional<R> result;
    for (uint32_t tries = 0; tries < budget_.attempt_limit;) {
      detail::wait_for_zero(lock_.word());
      const auto out = attempt<R>(pid, Path::Fast, Gating::Lock, false, result,
                                  [&](tm::Transaction& txn) { return op.fast(txn); });
      if (out.is_committed()) {
        if (result) {
          complete<Op>(pid, Path::Fast);
          return std::move(*result);
        }
        ++my(pid)[Path::Fast].restarts;
        continue;
      }
      ++tries;
    }
    note_fallback(pid, budget_.attempt_limit);
    lock_.acquire();
    struct Release {
      GlobalLock& l;
      ~Release() { l.release(); }
    } release{lock_};
    for (;;) {
      auto r = op.locked();
      if (r) {
        complete<Op>(pid, Path::Fallback);
        return std::move(*r);
      }
      ++my(pid)[Path::Fallback].restarts;
    }
  }

  PolicyKind kind_;
  PathBudget budget_;
  tm::Engine& engine_;
  FallbackGate gate_;
  GlobalLock lock_;
  std::unique_ptr<Slot[]> stats_;
  std::atomic<uint64_t> fast_commits_gate_closed_{0};
  std::atomic<uint64_t> middle_commits_gate_closed_{0};
};

}  // namespace htmtree
