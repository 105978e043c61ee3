#pragma once

// Best-effort transactional memory, emulated in software.
//
// Shared memory is made of `Word`s: a 64-bit value plus a version stamp whose
// low bit doubles as a short-lived commit lock. Transactions buffer their
// writes, record the version of every word they read, and validate against a
// global version clock (TL2-style, with snapshot extension), which gives
// word-granularity conflict detection and opacity. Non-transactional loads,
// stores, CAS and fetch-add go through the same version protocol, so a
// committed non-transactional write invalidates every transaction that read
// the word, and non-transactional readers never observe half of a commit.
//
// Like real best-effort HTM, a transaction may abort for a conflict, for
// exceeding its footprint (capacity), explicitly, or spuriously. The engine
// never retries; retry policy belongs to the caller.

#include <array>
#include <atomic>
#include <cstdint>
#include <cstring>
#include <limits>
#include <memory>
#include <random>
#include <stdexcept>
#include <thread>
#include <utility>
#include <vector>

#include "htmtree/thread_registry.hpp"

namespace htmtree::tm {

class Word;
class Transaction;

namespace detail {

struct alignas(64) Clock {
  std::atomic<uint64_t> now{0};
};

inline Clock& global_clock() {
  static Clock c;
  return c;
}

inline uint64_t next_stamp() {
  return global_clock().now.fetch_add(1, std::memory_order_acq_rel) + 1;
}

inline void cpu_pause() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_ia32_pause();
#endif
}

struct Backoff {
  unsigned spins = 0;
  void operator()() {
    if (++spins < 16) {
      cpu_pause();
    } else {
      std::this_thread::yield();
    }
  }
};

// Test-only interleaving amplifier: with probability p/2^32, yield the CPU
// before touching shared memory. Zero (the default) costs one relaxed load.
inline std::atomic<uint32_t>& yield_threshold() {
  static std::atomic<uint32_t> t{0};
  return t;
}

inline void maybe_yield() {
  const uint32_t t = yield_threshold().load(std::memory_order_relaxed);
  if (t == 0) return;
  thread_local uint64_t x = 0x9E3779B97F4A7C15ull ^
                            reinterpret_cast<uintptr_t>(&x);
  x ^= x << 13;
  x ^= x >> 7;
  x ^= x << 17;
  if (static_cast<uint32_t>(x) < t) std::this_thread::yield();
}

#ifdef HTMTREE_DEBUG_INFO_HISTORY
using WriteObserver = void (*)(const Word&, uint64_t value, uint64_t seq);
inline std::atomic<WriteObserver>& write_observer() {
  static std::atomic<WriteObserver> o{nullptr};
  return o;
}
inline std::atomic<uint64_t>& write_seq() {
  static std::atomic<uint64_t> s{0};
  return s;
}
#endif

}  // namespace detail

namespace debug {

// Probability in [0, 1] of yielding before each shared-memory access.
inline void set_yield_injection(double p) {
  const double clamped = p < 0 ? 0 : (p > 1 ? 1 : p);
  detail::yield_threshold().store(
      static_cast<uint32_t>(clamped * std::numeric_limits<uint32_t>::max()),
      std::memory_order_relaxed);
}

#ifdef HTMTREE_DEBUG_INFO_HISTORY
// Called under the word's commit lock for every committed write, with a
// global sequence number that is consistent with real-time order.
inline void set_write_observer(detail::WriteObserver o) {
  detail::write_observer().store(o, std::memory_order_release);
}
#endif

}  // namespace debug

// A shared 64-bit memory word.
class Word {
 public:
  Word() = default;
  explicit Word(uint64_t v) : value_(v) {}
  Word(const Word&) = delete;
  Word& operator=(const Word&) = delete;

  // Plain initialisation of memory no other thread can see yet.
  void init(uint64_t v) noexcept { value_.store(v, std::memory_order_relaxed); }

  // Racy read with no synchronisation. Only for quiescent inspection.
  uint64_t peek() const noexcept { return value_.load(std::memory_order_relaxed); }

  uint64_t load() const noexcept {
    detail::maybe_yield();
    detail::Backoff backoff;
    for (;;) {
      const uint64_t v1 = version_.load(std::memory_order_seq_cst);
      if (v1 & 1) {
        backoff();
        continue;
      }
      const uint64_t val = value_.load(std::memory_order_seq_cst);
      if (version_.load(std::memory_order_seq_cst) == v1) return val;
    }
  }

  void store(uint64_t v) noexcept {
    detail::maybe_yield();
    lock();
    write_locked(v);
    unlock_new_version();
  }

  bool cas(uint64_t expected, uint64_t desired) noexcept {
    detail::maybe_yield();
    const uint64_t old_version = lock();
    if (value_.load(std::memory_order_relaxed) != expected) {
      version_.store(old_version, std::memory_order_release);
      return false;
    }
    write_locked(desired);
    unlock_new_version();
    return true;
  }

  uint64_t fetch_add(int64_t delta) noexcept {
    detail::maybe_yield();
    lock();
    const uint64_t prev = value_.load(std::memory_order_relaxed);
    write_locked(prev + static_cast<uint64_t>(delta));
    unlock_new_version();
    return prev;
  }

  // Version stamp (even when unlocked). Exposed for instrumentation.
  uint64_t version() const noexcept { return version_.load(std::memory_order_seq_cst); }

#ifdef HTMTREE_DEBUG_INFO_HISTORY
  // Opaque owner tag for the debug write observer.
  void* debug_owner = nullptr;
  int debug_role = 0;
#endif

 private:
  friend class Transaction;

  uint64_t lock() noexcept {
    detail::Backoff backoff;
    for (;;) {
      uint64_t v = version_.load(std::memory_order_relaxed);
      if (!(v & 1) && version_.compare_exchange_weak(v, v | 1, std::memory_order_seq_cst)) {
        return v;
      }
      backoff();
    }
  }

  bool try_lock(uint64_t& old_version) noexcept {
    uint64_t v = version_.load(std::memory_order_relaxed);
    if (v & 1) return false;
    if (!version_.compare_exchange_strong(v, v | 1, std::memory_order_seq_cst)) return false;
    old_version = v;
    return true;
  }

  void write_locked(uint64_t v) noexcept {
    value_.store(v, std::memory_order_seq_cst);
#ifdef HTMTREE_DEBUG_INFO_HISTORY
    if (auto obs = detail::write_observer().load(std::memory_order_acquire)) {
      obs(*this, v, detail::write_seq().fetch_add(1, std::memory_order_relaxed));
    }
#endif
  }

  void unlock_new_version() noexcept {
    version_.store(detail::next_stamp() << 1, std::memory_order_release);
  }

  void unlock_with(uint64_t version) noexcept { version_.store(version, std::memory_order_release); }

  std::atomic<uint64_t> value_{0};
  std::atomic<uint64_t> version_{0};
};

enum class AbortReason : uint8_t { Conflict, Capacity, Explicit, Spurious };

inline constexpr int kAbortReasonCount = 4;

inline const char* to_string(AbortReason r) {
  switch (r) {
    case AbortReason::Conflict: return "conflict";
    case AbortReason::Capacity: return "capacity";
    case AbortReason::Explicit: return "explicit";
    case AbortReason::Spurious: return "spurious";
  }
  return "?";
}

// Result of one transaction attempt.
class TxnOutcome {
 public:
  static TxnOutcome committed() { return TxnOutcome(true, AbortReason::Conflict, 0); }
  static TxnOutcome aborted(AbortReason r, uint8_t code = 0) {
    return TxnOutcome(false, r, r == AbortReason::Explicit ? code : 0);
  }

  bool is_committed() const noexcept { return committed_; }
  bool is_aborted() const noexcept { return !committed_; }
  // Only meaningful when aborted.
  AbortReason reason() const noexcept { return reason_; }
  // Explicit abort code; zero unless reason() == Explicit.
  uint8_t code() const noexcept { return code_; }
  bool is_explicit(uint8_t c) const noexcept {
    return !committed_ && reason_ == AbortReason::Explicit && code_ == c;
  }

  friend bool operator==(const TxnOutcome& a, const TxnOutcome& b) {
    if (a.committed_ != b.committed_) return false;
    return a.committed_ || (a.reason_ == b.reason_ && a.code_ == b.code_);
  }

 private:
  TxnOutcome(bool c, AbortReason r, uint8_t code) : committed_(c), reason_(r), code_(code) {}
  bool committed_;
  AbortReason reason_;
  uint8_t code_;
};

// Thrown through the body of a transaction when it aborts. Bodies must let it
// propagate (no catch-all handlers inside a transaction body).
struct TxnAbort {
  AbortReason reason;
  uint8_t code;
};

struct TxnConfig {
  // Distinct shared words a transaction may touch before a capacity abort.
  uint32_t capacity_limit = 64;
  // Probability that an attempt aborts spuriously.
  double spurious_abort_prob = 0.0;
  uint64_t rng_seed = 1;

  void validate() const {
    if (capacity_limit < 1) throw std::invalid_argument("capacity_limit must be >= 1");
    if (!(spurious_abort_prob >= 0.0 && spurious_abort_prob <= 1.0)) {
      throw std::invalid_argument("spurious_abort_prob must be in [0, 1]");
    }
  }
};

namespace detail {

// Open-addressed map from word address to read/write-set slots. Cleared in
// O(1) by bumping a generation counter, so one instance is reused across many
// short transactions.
class Footprint {
 public:
  static constexpr uint32_t kNone = std::numeric_limits<uint32_t>::max();

  struct Entry {
    const Word* key = nullptr;
    uint32_t gen = 0;
    uint32_t read_idx = kNone;
    uint32_t write_idx = kNone;
  };

  Footprint() { slots_.resize(64); }

  void clear() noexcept {
    size_ = 0;
    if (++gen_ == 0) {
      for (auto& e : slots_) e.gen = 0;
      gen_ = 1;
    }
  }

  std::size_t size() const noexcept { return size_; }

  Entry* find(const Word* w) noexcept {
    const std::size_t mask = slots_.size() - 1;
    for (std::size_t i = hash(w) & mask;; i = (i + 1) & mask) {
      Entry& e = slots_[i];
      if (e.gen != gen_) return nullptr;
      if (e.key == w) return &e;
    }
  }

  Entry& insert(const Word* w) {
    if ((size_ + 1) * 2 > slots_.size()) grow();
    const std::size_t mask = slots_.size() - 1;
    for (std::size_t i = hash(w) & mask;; i = (i + 1) & mask) {
      Entry& e = slots_[i];
      if (e.gen != gen_) {
        e = Entry{w, gen_, kNone, kNone};
        ++size_;
        return e;
      }
    }
  }

 private:
  static std::size_t hash(const Word* w) noexcept {
    auto x = reinterpret_cast<uintptr_t>(w) >> 4;
    x *= 0x9E3779B97F4A7C15ull;
    return static_cast<std::size_t>(x ^ (x >> 29));
  }

  void grow() {
    std::vector<Entry> old;
    old.swap(slots_);
    slots_.assign(old.size() * 2, Entry{});
    const uint32_t g = gen_;
    gen_ = 1;
    for (auto& e : slots_) e.gen = 0;
    size_ = 0;
    for (const Entry& e : old) {
      if (e.gen != g) continue;
      Entry& n = insert(e.key);
      n.read_idx = e.read_idx;
      n.write_idx = e.write_idx;
    }
  }

  std::vector<Entry> slots_;
  uint32_t gen_ = 1;
  std::size_t size_ = 0;
};

struct ReadEntry {
  Word* word;
  uint64_t version;
  uint64_t value;
};

struct WriteEntry {
  Word* word;
  uint64_t value;
  uint64_t locked_version;
};

struct Deferred {
  void (*fn)(void*, void*);
  void* a;
  void* b;
};

struct Scratch {
  Footprint footprint;
  std::vector<ReadEntry> reads;
  std::vector<WriteEntry> writes;
  std::vector<Deferred> on_commit;
  std::vector<Deferred> on_abort;
  Scratch* next = nullptr;

  void reset() {
    footprint.clear();
    reads.clear();
    writes.clear();
    on_commit.clear();
    on_abort.clear();
  }
};

// Per-thread free list of scratch buffers. A thread may hold several live
// transactions at once only in scripted tests.
class ScratchPool {
 public:
  ~ScratchPool() {
    while (head_) {
      Scratch* n = head_->next;
      delete head_;
      head_ = n;
    }
  }
  Scratch* take() {
    if (!head_) return new Scratch();
    Scratch* s = head_;
    head_ = s->next;
    s->reset();
    return s;
  }
  void give(Scratch* s) {
    s->next = head_;
    head_ = s;
  }

  static ScratchPool& local() {
    thread_local ScratchPool pool;
    return pool;
  }

 private:
  Scratch* head_ = nullptr;
};

}  // namespace detail

// One transaction attempt. Created by Engine::execute, or directly by tests
// that script interleavings of several transactions on one thread.
class Transaction {
 public:
  explicit Transaction(uint32_t capacity_limit)
      : capacity_(capacity_limit),
        scratch_(detail::ScratchPool::local().take()),
        read_stamp_(detail::global_clock().now.load(std::memory_order_acquire)) {}

  Transaction(const Transaction&) = delete;
  Transaction& operator=(const Transaction&) = delete;

  ~Transaction() {
    if (state_ == State::Active) rollback();
    detail::ScratchPool::local().give(scratch_);
  }

  bool alive() const noexcept { return state_ == State::Active; }
  bool committed() const noexcept { return state_ == State::Committed; }
  std::size_t footprint() const noexcept { return scratch_->footprint.size(); }

  uint64_t read(Word& w) {
    require_alive();
    detail::maybe_yield();
    auto* e = scratch_->footprint.find(&w);
    if (e) {
      if (e->write_idx != detail::Footprint::kNone) return scratch_->writes[e->write_idx].value;
      if (e->read_idx != detail::Footprint::kNone) return scratch_->reads[e->read_idx].value;
    } else if (scratch_->footprint.size() >= capacity_) {
      fail(AbortReason::Capacity);
    }
    detail::Backoff backoff;
    for (int tries = 0;; ++tries) {
      if (tries > 64) fail(AbortReason::Conflict);
      const uint64_t v1 = w.version_.load(std::memory_order_seq_cst);
      if (v1 & 1) {
        backoff();
        continue;
      }
      const uint64_t val = w.value_.load(std::memory_order_seq_cst);
      if (w.version_.load(std::memory_order_seq_cst) != v1) continue;
      if ((v1 >> 1) > read_stamp_) {
        if (!extend()) fail(AbortReason::Conflict);
        continue;
      }
      if (!e) e = &scratch_->footprint.insert(&w);
      e->read_idx = static_cast<uint32_t>(scratch_->reads.size());
      scratch_->reads.push_back({&w, v1, val});
      return val;
    }
  }

  void write(Word& w, uint64_t v) {
    require_alive();
    detail::maybe_yield();
    auto* e = scratch_->footprint.find(&w);
    if (!e) {
      if (scratch_->footprint.size() >= capacity_) fail(AbortReason::Capacity);
      e = &scratch_->footprint.insert(&w);
    }
    if (e->write_idx == detail::Footprint::kNone) {
      e->write_idx = static_cast<uint32_t>(scratch_->writes.size());
      scratch_->writes.push_back({&w, v, 0});
    } else {
      scratch_->writes[e->write_idx].value = v;
    }
  }

  [[noreturn]] void abort_explicit(uint8_t code) {
    require_alive();
    fail(AbortReason::Explicit, code);
  }

  // Runs `fn(a, b)` after a successful commit / after an abort.
  void defer_on_commit(void (*fn)(void*, void*), void* a, void* b = nullptr) {
    scratch_->on_commit.push_back({fn, a, b});
  }
  void defer_on_abort(void (*fn)(void*, void*), void* a, void* b = nullptr) {
    scratch_->on_abort.push_back({fn, a, b});
  }

  // Instrumentation callback invoked at the commit point: after validation,
  // while every written word is still locked.
  void set_commit_probe(void (*fn)(void*, const Transaction&), void* ctx) {
    probe_ = fn;
    probe_ctx_ = ctx;
  }

  // Version of `w` as recorded in the read set, or 0 when `w` was not read.
  uint64_t read_version(const Word& w) const noexcept {
    auto* e = scratch_->footprint.find(&w);
    if (!e || e->read_idx == detail::Footprint::kNone) return 0;
    return scratch_->reads[e->read_idx].version;
  }

  bool has_read(const Word& w) const noexcept {
    auto* e = scratch_->footprint.find(&w);
    return e && e->read_idx != detail::Footprint::kNone;
  }

  // Throws TxnAbort on failure, after rolling back.
  void commit() {
    require_alive();
    auto& writes = scratch_->writes;
    if (writes.empty()) {
      if (probe_) probe_(probe_ctx_, *this);
      finish_commit();
      return;
    }
    std::size_t locked = 0;
    for (; locked < writes.size(); ++locked) {
      detail::Backoff backoff;
      bool ok = false;
      for (int tries = 0; tries < 64; ++tries) {
        if (writes[locked].word->try_lock(writes[locked].locked_version)) {
          ok = true;
          break;
        }
        backoff();
      }
      if (!ok) {
        unlock_prefix(locked);
        fail(AbortReason::Conflict);
      }
    }
    const uint64_t stamp = detail::next_stamp();
    for (const auto& r : scratch_->reads) {
      const uint64_t cur = r.word->version_.load(std::memory_order_seq_cst);
      if (cur == r.version) continue;
      auto* e = scratch_->footprint.find(r.word);
      if (cur == (r.version | 1) && e->write_idx != detail::Footprint::kNone &&
          writes[e->write_idx].locked_version == r.version) {
        continue;
      }
      unlock_prefix(writes.size());
      fail(AbortReason::Conflict);
    }
    if (probe_) probe_(probe_ctx_, *this);
    for (const auto& w : writes) w.word->write_locked(w.value);
    for (const auto& w : writes) w.word->unlock_with(stamp << 1);
    finish_commit();
  }

 private:
  enum class State { Active, Committed, Aborted };

  void require_alive() const {
    if (state_ != State::Active) throw std::logic_error("transaction is not active");
  }

  bool extend() {
    const uint64_t now = detail::global_clock().now.load(std::memory_order_acquire);
    for (const auto& r : scratch_->reads) {
      if (r.word->version_.load(std::memory_order_seq_cst) != r.version) return false;
    }
    read_stamp_ = now;
    return true;
  }

  void unlock_prefix(std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      scratch_->writes[i].word->unlock_with(scratch_->writes[i].locked_version);
    }
  }

  void rollback() {
    state_ = State::Aborted;
    for (const auto& d : scratch_->on_abort) d.fn(d.a, d.b);
    scratch_->on_abort.clear();
    scratch_->on_commit.clear();
  }

  void finish_commit() {
    state_ = State::Committed;
    for (const auto& d : scratch_->on_commit) d.fn(d.a, d.b);
    scratch_->on_commit.clear();
    scratch_->on_abort.clear();
  }

  [[noreturn]] void fail(AbortReason r, uint8_t code = 0) {
    rollback();
    throw TxnAbort{r, r == AbortReason::Explicit ? code : uint8_t{0}};
  }

  uint32_t capacity_;
  detail::Scratch* scratch_;
  uint64_t read_stamp_;
  State state_ = State::Active;
  void (*probe_)(void*, const Transaction&) = nullptr;
  void* probe_ctx_ = nullptr;
};

// Owns the configuration and the per-thread random streams that decide
// spurious aborts.
class Engine {
 public:
  explicit Engine(TxnConfig cfg = {}) : cfg_(cfg), rngs_(std::make_unique<Rng[]>(kMaxThreads)) {
    cfg_.validate();
  }

  const TxnConfig& config() const noexcept { return cfg_; }

  // Runs `body(Transaction&)` as one transaction attempt. Nested invocation on
  // the same thread throws std::logic_error.
  template <class Body>
  TxnOutcome execute(Body&& body) {
    return execute_as(ThreadRegistry::this_thread_id(), std::forward<Body>(body));
  }

  template <class Body>
  TxnOutcome execute_as(int pid, Body&& body) {
    NestingGuard guard;
    if (draw_spurious(pid)) return TxnOutcome::aborted(AbortReason::Spurious);
    Transaction txn(cfg_.capacity_limit);
    try {
      body(txn);
      txn.commit();
    } catch (const TxnAbort& a) {
      return TxnOutcome::aborted(a.reason, a.code);
    }
    return TxnOutcome::committed();
  }

  bool draw_spurious(int pid) {
    const double p = cfg_.spurious_abort_prob;
    if (p <= 0.0) return false;
    if (p >= 1.0) return true;
    Rng& r = rngs_[pid];
    if (!r.seeded) {
      const uint64_t seed = cfg_.rng_seed;
      std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(pid)};
      r.gen.seed(seq);
      r.seeded = true;
    }
    return std::bernoulli_distribution(p)(r.gen);
  }

  static bool in_transaction() noexcept { return depth() > 0; }

 private:
  static int& depth() noexcept {
    thread_local int d = 0;
    return d;
  }

  struct NestingGuard {
    NestingGuard() {
      if (depth() > 0) throw std::logic_error("nested transactions are not supported");
      ++depth();
    }
    ~NestingGuard() { --depth(); }
  };

  struct alignas(64) Rng {
    std::mt19937_64 gen;
    bool seeded = false;
  };

  TxnConfig cfg_;
  std::unique_ptr<Rng[]> rngs_;
};

}  // namespace htmtree::tm
