#pragma once

// Benchmark harness: prefill, timed light/heavy trials, and CSV reporting.

#include <atomic>
#include <barrier>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "htmtree/abtree.hpp"
#include "htmtree/bst.hpp"
#include "htmtree/checker.hpp"
#include "htmtree/path_policy.hpp"

namespace htmtree::bench {

enum class TreeKind { Bst, AbTree };
enum class Workload { Light, Heavy };

inline std::string_view to_string(TreeKind t) { return t == TreeKind::Bst ? "bst" : "abtree"; }
inline std::string_view to_string(Workload w) { return w == Workload::Light ? "light" : "heavy"; }

inline std::optional<TreeKind> parse_tree(std::string_view s) {
  if (s == "bst") return TreeKind::Bst;
  if (s == "abtree") return TreeKind::AbTree;
  return std::nullopt;
}

inline std::optional<Workload> parse_workload(std::string_view s) {
  if (s == "light") return Workload::Light;
  if (s == "heavy") return Workload::Heavy;
  return std::nullopt;
}

inline constexpr uint64_t kDefaultKeyRange = 100000;
inline constexpr uint64_t kBstRangeMax = 1000;
inline constexpr uint64_t kAbTreeRangeMax = 10000;

inline uint64_t default_range_max(TreeKind t) { return t == TreeKind::Bst ? kBstRangeMax : kAbTreeRangeMax; }

// Range query size for a uniform x in [0, 1): floor(x^2 S) + 1.
inline uint64_t sample_range_size(double x, uint64_t S) {
  if (!(x >= 0.0 && x < 1.0)) throw std::invalid_argument("x must be in [0, 1)");
  if (S < 1) throw std::invalid_argument("S must be >= 1");
  return static_cast<uint64_t>(std::floor(x * x * static_cast<double>(S))) + 1;
}

struct WorkloadSpec {
  TreeKind tree = TreeKind::Bst;
  Workload kind = Workload::Light;
  int threads = 4;
  uint64_t key_range = kDefaultKeyRange;
  uint32_t duration_ms = 1000;
  // 0 selects the tree's default.
  uint64_t range_max = 0;
  PolicyKind policy = PolicyKind::ThreePath;
  PathBudget budget;
  tm::TxnConfig txn;
  bool search_outside_txn = false;
  uint64_t seed = 1;
  int trials = 5;
  // When nonzero, each thread runs exactly this many operations instead of
  // running for duration_ms.
  uint64_t ops_per_thread = 0;

  uint64_t effective_range_max() const { return range_max ? range_max : default_range_max(tree); }

  void validate() const {
    if (threads < 1 || threads > kMaxThreads - 1) throw std::invalid_argument("threads out of range");
    if (kind == Workload::Heavy && threads < 2) {
      throw std::invalid_argument("heavy workload needs at least 2 threads");
    }
    if (key_range < 2) throw std::invalid_argument("key range must be >= 2");
    if (trials < 1) throw std::invalid_argument("trials must be >= 1");
    if (duration_ms == 0 && ops_per_thread == 0) throw std::invalid_argument("duration must be > 0");
    budget.validate();
    txn.validate();
  }
};

struct TrialResult {
  int trial = 0;
  uint64_t ops = 0;
  double seconds = 0.0;
  double ops_per_sec = 0.0;
  PathStats stats;
  bool keysum_ok = false;
  std::vector<std::string> structure_errors;
  // Last operations of each thread, for diagnostics.
  std::vector<std::string> history_tail;

  bool valid() const { return keysum_ok && structure_errors.empty(); }
};

class VerificationError : public std::runtime_error {
 public:
  VerificationError(const std::string& what, TrialResult r) : std::runtime_error(what), result(std::move(r)) {}
  TrialResult result;
};

// Single-threaded, seeded 50/50 insert/delete on uniform keys until the
// dictionary holds exactly floor(K/2) keys. Returns the sum of its keys.
template <class Dict>
uint64_t prefill(Dict& d, uint64_t key_range, uint64_t seed,
                 std::chrono::milliseconds timeout = std::chrono::seconds(60)) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<uint64_t> key(0, key_range - 1);
  const uint64_t target = key_range / 2;
  uint64_t size = d.size();
  uint64_t sum = d.key_sum();
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  for (uint64_t i = 0; size != target; ++i) {
    if ((i & 1023) == 0 && std::chrono::steady_clock::now() > deadline) {
      throw std::runtime_error("prefill did not converge before the timeout");
    }
    const Key k = key(rng);
    if (rng() & 1) {
      if (d.insert(k, k)) {
        ++size;
        sum += k;
      }
    } else if (d.remove(k)) {
      --size;
      sum -= k;
    }
  }
  return sum;
}

namespace detail {

struct Tail {
  static constexpr std::size_t kLength = 16;
  std::deque<std::string> lines;

  void add(int tid, std::string_view op, Key k, uint64_t r) {
    if (lines.size() == kLength) lines.pop_front();
    std::ostringstream os;
    os << tid << ' ' << op << ' ' << k << " → " << r;
    lines.push_back(os.str());
  }
};

struct alignas(64) WorkerState {
  uint64_t ops = 0;
  uint64_t keysum = 0;
  Tail tail;
};

inline uint64_t mix(uint64_t seed, uint64_t a, uint64_t b) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(a),
                    static_cast<uint32_t>(a >> 32), static_cast<uint32_t>(b), static_cast<uint32_t>(b >> 32)};
  std::array<uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<uint64_t>(out[0]) << 32) | out[1];
}

template <class Dict>
TrialResult run_trial_on(Dict& d, const WorkloadSpec& spec, int trial) {
  TrialResult res;
  res.trial = trial;
  const uint64_t base_sum = prefill(d, spec.key_range, mix(spec.seed, 0x9e37, static_cast<uint64_t>(trial)));
  d.runtime().reset_stats();

  const uint64_t S = spec.effective_range_max();
  std::vector<WorkerState> workers(static_cast<std::size_t>(spec.threads));
  std::atomic<bool> stop{false};
  std::barrier start(spec.threads + 1);
  std::vector<std::thread> threads;
  for (int t = 0; t < spec.threads; ++t) {
    threads.emplace_back([&, t] {
      WorkerState& w = workers[static_cast<std::size_t>(t)];
      std::mt19937_64 rng(mix(spec.seed, static_cast<uint64_t>(trial) + 1, static_cast<uint64_t>(t) + 1));
      std::uniform_int_distribution<uint64_t> key(0, spec.key_range - 1);
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      const bool ranger = spec.kind == Workload::Heavy && t == 0;
      ThreadRegistry::this_thread_id();
      start.arrive_and_wait();
      while (spec.ops_per_thread ? w.ops < spec.ops_per_thread : !stop.load(std::memory_order_relaxed)) {
        const Key k = key(rng);
        if (ranger) {
          const Key hi = k + sample_range_size(unit(rng), S);
          const auto items = d.range_query(k, hi);
          w.tail.add(t, "range", k, items.size());
        } else if (rng() & 1) {
          const bool r = d.insert(k, k);
          if (r) w.keysum += k;
          w.tail.add(t, "insert", k, r);
        } else {
          const bool r = d.remove(k);
          if (r) w.keysum -= k;
          w.tail.add(t, "remove", k, r);
        }
        ++w.ops;
      }
    });
  }
  start.arrive_and_wait();
  const auto t0 = std::chrono::steady_clock::now();
  if (!spec.ops_per_thread) {
    std::this_thread::sleep_for(std::chrono::milliseconds(spec.duration_ms));
    stop.store(true);
  }
  for (auto& th : threads) th.join();
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::vector<uint64_t> sums{base_sum};
  for (const WorkerState& w : workers) {
    res.ops += w.ops;
    sums.push_back(w.keysum);
    res.history_tail.insert(res.history_tail.end(), w.tail.lines.begin(), w.tail.lines.end());
  }
  res.ops_per_sec = res.seconds > 0 ? static_cast<double>(res.ops) / res.seconds : 0.0;
  res.stats = d.runtime().stats();
  res.keysum_ok = check::keysum_verify(sums, d);
  res.structure_errors = check::drain_and_validate(d);
  return res;
}

}  // namespace detail

// Runs one trial on a fresh tree. Throws VerificationError if the key-sum
// or structural check fails.
inline TrialResult run_trial(const WorkloadSpec& spec, int trial) {
  spec.validate();
  tm::TxnConfig txn = spec.txn;
  txn.rng_seed = detail::mix(spec.seed, 0x7a3d, static_cast<uint64_t>(trial));
  TrialResult r;
  if (spec.tree == TreeKind::Bst) {
    BstConfig cfg;
    cfg.policy = spec.policy;
    cfg.budget = spec.budget;
    cfg.txn = txn;
    cfg.search_outside_txn = spec.search_outside_txn;
    Bst d(cfg);
    r = detail::run_trial_on(d, spec, trial);
  } else {
    AbTreeConfig cfg;
    cfg.policy = spec.policy;
    cfg.budget = spec.budget;
    cfg.txn = txn;
    cfg.search_outside_txn = spec.search_outside_txn;
    AbTree<> d(cfg);
    r = detail::run_trial_on(d, spec, trial);
  }
  if (!r.valid()) {
    std::ostringstream os;
    os << "trial " << trial << " failed verification:";
    if (!r.keysum_ok) os << "\n  key-sum mismatch";
    for (const auto& e : r.structure_errors) os << "\n  structure: " << e;
    os << "\nhistory tail:";
    for (const auto& l : r.history_tail) os << "\n  " << l;
    throw VerificationError(os.str(), std::move(r));
  }
  return r;
}

// ---- CSV ----------------------------------------------------------------

inline constexpr std::string_view kCsvHeader =
    "tree,policy,threads,workload,trial,ops,ops_per_sec,fast_done,middle_done,fallback_done,"
    "fast_commit,fast_abort_conflict,fast_abort_capacity,fast_abort_explicit,fast_abort_spurious,"
    "middle_commit,middle_abort_conflict,middle_abort_capacity,middle_abort_explicit,middle_abort_spurious,"
    "keysum_ok";

namespace detail {

inline void write_counters(std::ostream& os, const PathCounters& c) {
  os << ',' << c.commits << ',' << c.abort_count(tm::AbortReason::Conflict) << ','
     << c.abort_count(tm::AbortReason::Capacity) << ',' << c.abort_count(tm::AbortReason::Explicit) << ','
     << c.abort_count(tm::AbortReason::Spurious);
}

inline void write_row(std::ostream& os, const WorkloadSpec& spec, std::string_view trial, uint64_t ops,
                      double ops_per_sec, const PathStats& s, bool keysum_ok) {
  os << to_string(spec.tree) << ',' << htmtree::to_string(spec.policy) << ',' << spec.threads << ','
     << to_string(spec.kind) << ',' << trial << ',' << ops << ',' << static_cast<uint64_t>(std::llround(ops_per_sec))
     << ',' << s[Path::Fast].completions << ',' << s[Path::Middle].completions << ','
     << s[Path::Fallback].completions;
  write_counters(os, s[Path::Fast]);
  write_counters(os, s[Path::Middle]);
  os << ',' << (keysum_ok ? 1 : 0) << '\n';
}

}  // namespace detail

// One row per trial followed by a summary row with trial=summary. The
// summary sums the counts and divides total operations by total time.
inline void report(std::ostream& os, const WorkloadSpec& spec, const std::vector<TrialResult>& results,
                   bool header = true) {
  if (header) os << kCsvHeader << '\n';
  PathStats total;
  uint64_t ops = 0;
  double seconds = 0.0;
  bool all_ok = true;
  for (const TrialResult& r : results) {
    detail::write_row(os, spec, std::to_string(r.trial), r.ops, r.ops_per_sec, r.stats, r.keysum_ok);
    total += r.stats;
    ops += r.ops;
    seconds += r.seconds;
    all_ok = all_ok && r.keysum_ok;
  }
  detail::write_row(os, spec, "summary", ops, seconds > 0 ? static_cast<double>(ops) / seconds : 0.0, total,
                    all_ok);
}

}  // namespace htmtree::bench
