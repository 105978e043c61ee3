#pragma once

// LLX/SCX: multi-record load-link / store-conditional.
//
// Three implementations share the records defined here:
//   * llx_o / scx_o / help   the original lock-free algorithm built from CAS,
//                            with operation descriptors and helping;
//   * llx_htm / scx_htm      the transactional variant, which stores tagged
//                            sequence numbers instead of descriptor handles;
//   * scx_dispatch           tries scx_htm in small transactions up to an
//                            attempt budget, then falls back to scx_o.
// Any mix of them may run concurrently over the same records.
//
// Info words hold 64-bit InfoValues, never raw pointers:
//   bit 0        tag: 1 = tagged sequence number, 0 = descriptor handle
//   bits 1..15   process id
//   bits 16..63  sequence number
// Each process owns one descriptor that it reuses for every scx_o; the
// descriptor's status word carries the sequence number of its current use,
// so a handle whose sequence number no longer matches refers to an operation
// that has already finished. Handles and tagged values are never reused,
// which keeps every value written to an info word fresh.

#include <algorithm>
#include <array>
#include <cassert>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <stdexcept>
#include <vector>

#include "htmtree/thread_registry.hpp"
#include "htmtree/txn.hpp"

namespace htmtree::llx {

using InfoValue = uint64_t;

inline constexpr int kSeqShift = 16;
inline constexpr uint64_t kPidMask = 0x7FFF;
inline constexpr uint64_t kSeqIncrement = uint64_t{1} << kSeqShift;

constexpr bool is_tagged(InfoValue v) noexcept { return (v & 1) != 0; }
constexpr int info_pid(InfoValue v) noexcept { return static_cast<int>((v >> 1) & kPidMask); }
constexpr uint64_t info_seq(InfoValue v) noexcept { return v >> kSeqShift; }

constexpr InfoValue make_tagged(int pid, uint64_t seq) noexcept {
  return (seq << kSeqShift) | (static_cast<uint64_t>(pid) << 1) | 1;
}
constexpr InfoValue make_handle(int pid, uint64_t seq) noexcept {
  return (seq << kSeqShift) | (static_cast<uint64_t>(pid) << 1);
}

// Info value of a freshly created record: the handle of a permanently
// Aborted dummy descriptor (sequence number 0 is never issued).
inline constexpr InfoValue kInitialInfo = make_handle(0, 0);

// Explicit abort codes.
inline constexpr uint8_t kFailedValidation = 1;
inline constexpr uint8_t kGateClosed = 2;
inline constexpr uint8_t kNodeMarked = 3;

enum class ScxState : uint8_t { InProgress = 0, Committed = 1, Aborted = 2 };

inline constexpr std::size_t kMaxSlots = 32;
inline constexpr std::size_t kMaxV = 8;
inline constexpr std::size_t kTableSize = 16;

#ifdef HTMTREE_DEBUG_INFO_HISTORY
enum class WordRole : int { Info = 1, Marked = 2, Slot = 3 };

// Bounded log of committed writes to one record's words, for checking that
// every change of a mutable slot is preceded by a never-before-seen info
// value.
class InfoHistory {
 public:
  static constexpr std::size_t kCapacity = 64;
  struct Event {
    uint64_t seq;
    WordRole role;
    uint64_t value;
  };

  void append(Event e) {
    std::lock_guard lock(mu_);
    ring_[count_ % kCapacity] = e;
    ++count_;
  }

  // Events in commit order (only the last kCapacity are retained).
  std::vector<Event> events() const {
    std::lock_guard lock(mu_);
    std::vector<Event> out;
    const std::size_t n = std::min(count_, kCapacity);
    for (std::size_t i = count_ - n; i < count_; ++i) out.push_back(ring_[i % kCapacity]);
    std::sort(out.begin(), out.end(), [](const Event& a, const Event& b) { return a.seq < b.seq; });
    return out;
  }

  std::size_t total() const {
    std::lock_guard lock(mu_);
    return count_;
  }

 private:
  mutable std::mutex mu_;
  std::array<Event, kCapacity> ring_{};
  std::size_t count_ = 0;
};
#endif

namespace detail {
inline uint64_t next_order(int pid) {
  static std::array<std::atomic<uint64_t>, kMaxThreads> counters{};
  return (counters[pid].fetch_add(1, std::memory_order_relaxed) << 8) | static_cast<uint64_t>(pid);
}
}  // namespace detail

// Base of every node managed by LLX/SCX. Derived types own the mutable slot
// words and register them with bind_slots().
class DataRecord {
 public:
  tm::Word info{kInitialInfo};
  tm::Word marked{0};

  DataRecord() : order_(detail::next_order(ThreadRegistry::this_thread_id())) {
#ifdef HTMTREE_DEBUG_INFO_HISTORY
    info.debug_owner = this;
    info.debug_role = static_cast<int>(WordRole::Info);
    marked.debug_owner = this;
    marked.debug_role = static_cast<int>(WordRole::Marked);
#endif
  }
  DataRecord(const DataRecord&) = delete;
  DataRecord& operator=(const DataRecord&) = delete;

  // Position in the global total order used to freeze records.
  uint64_t order() const noexcept { return order_; }
  std::size_t slot_count() const noexcept { return slot_count_; }
  tm::Word& slot(std::size_t i) noexcept { return slots_[i]; }

#ifdef HTMTREE_DEBUG_INFO_HISTORY
  InfoHistory history;
#endif

 protected:
  void bind_slots(tm::Word* slots, std::size_t n) noexcept {
    assert(n <= kMaxSlots);
    slots_ = slots;
    slot_count_ = n;
#ifdef HTMTREE_DEBUG_INFO_HISTORY
    for (std::size_t i = 0; i < n; ++i) {
      slots_[i].debug_owner = this;
      slots_[i].debug_role = static_cast<int>(WordRole::Slot);
    }
#endif
  }

 private:
  uint64_t order_;
  tm::Word* slots_ = nullptr;
  std::size_t slot_count_ = 0;
};

#ifdef HTMTREE_DEBUG_INFO_HISTORY
inline void install_history_observer() {
  tm::debug::set_write_observer([](const tm::Word& w, uint64_t value, uint64_t seq) {
    if (!w.debug_owner) return;
    static_cast<DataRecord*>(w.debug_owner)
        ->history.append({seq, static_cast<WordRole>(w.debug_role), value});
  });
}

// True iff, within the retained window, no info value repeats and every slot
// write after the first is preceded by an info write since the previous one.
inline bool check_info_freshness(const DataRecord& r) {
  std::vector<uint64_t> seen{kInitialInfo};
  bool fresh_since_slot_write = true;
  for (const auto& e : r.history.events()) {
    if (e.role == WordRole::Info) {
      if (std::find(seen.begin(), seen.end(), e.value) != seen.end()) return false;
      seen.push_back(e.value);
      fresh_since_slot_write = true;
    } else if (e.role == WordRole::Slot) {
      if (!fresh_since_slot_write) return false;
      fresh_since_slot_write = false;
    }
  }
  return true;
}
#endif

// One mutable slot of one record.
struct FieldRef {
  DataRecord* record;
  uint32_t slot;
  tm::Word& word() const noexcept { return record->slot(slot); }
};

struct Snapshot {
  uint32_t size = 0;
  std::array<uint64_t, kMaxSlots> values{};
  uint64_t operator[](std::size_t i) const noexcept { return values[i]; }
};

enum class LlxStatus : uint8_t { Snapshot, Fail, Finalized };

struct LlxResult {
  LlxStatus status = LlxStatus::Fail;
  InfoValue info = 0;
  Snapshot snapshot;

  bool ok() const noexcept { return status == LlxStatus::Snapshot; }
  uint64_t operator[](std::size_t i) const noexcept { return snapshot[i]; }
};

// Memory access through plain atomic operations.
struct DirectAccess {
  uint64_t load(tm::Word& w) const { return w.load(); }
  void store(tm::Word& w, uint64_t v) const { w.store(v); }
  bool cas(tm::Word& w, uint64_t expected, uint64_t desired) const { return w.cas(expected, desired); }
};

// Memory access inside a transaction.
struct TxnAccess {
  tm::Transaction& txn;
  uint64_t load(tm::Word& w) const { return txn.read(w); }
  void store(tm::Word& w, uint64_t v) const { txn.write(w, v); }
  bool cas(tm::Word& w, uint64_t expected, uint64_t desired) const {
    if (txn.read(w) != expected) return false;
    txn.write(w, desired);
    return true;
  }
};

// Points in help() where a test hook can pause the calling thread.
enum class HookPoint { AfterFreezingCas, AfterAllFrozen, BeforeCommitStep };

// Per-process table of the last successful LLX on each record.
class LlxTable {
 public:
  struct Entry {
    DataRecord* record;
    InfoValue info;
    Snapshot snapshot;
  };

  void clear() noexcept { size_ = 0; }
  std::size_t size() const noexcept { return size_; }

  void put(DataRecord* r, InfoValue info, const Snapshot& snap) {
    for (std::size_t i = 0; i < size_; ++i) {
      if (entries_[i].record == r) {
        entries_[i].info = info;
        entries_[i].snapshot = snap;
        return;
      }
    }
    if (size_ == kTableSize) throw std::logic_error("LLX table full");
    entries_[size_++] = Entry{r, info, snap};
  }

  const Entry* find(const DataRecord* r) const noexcept {
    for (std::size_t i = 0; i < size_; ++i) {
      if (entries_[i].record == r) return &entries_[i];
    }
    return nullptr;
  }

 private:
  std::array<Entry, kTableSize> entries_;
  std::size_t size_ = 0;
};

// Shared state of one LLX/SCX instance: per-process descriptors, LLX tables,
// attempt counters and tagged sequence numbers.
class Domain {
 public:
  Domain() : procs_(std::make_unique<Process[]>(kMaxThreads)) {
    for (int p = 0; p < kMaxThreads; ++p) procs_[p].tagseq = make_tagged(p, 0);
  }

  Domain(const Domain&) = delete;
  Domain& operator=(const Domain&) = delete;

  LlxTable& table(int pid) noexcept { return procs_[pid].table; }
  const LlxTable& table(int pid) const noexcept { return procs_[pid].table; }
  uint64_t attempts(int pid) const noexcept { return procs_[pid].attempts; }
  InfoValue current_tagseq(int pid) const noexcept { return procs_[pid].tagseq; }
  // Transactions started by scx_dispatch on behalf of pid.
  uint64_t dispatch_txn_attempts(int pid) const noexcept { return procs_[pid].dispatch_txns; }
  uint64_t dispatch_fallbacks(int pid) const noexcept { return procs_[pid].dispatch_fallbacks; }
  // Calls to help() made by pid for a descriptor it does not own.
  uint64_t help_calls(int pid) const noexcept { return procs_[pid].help_calls; }

  void set_test_hook(std::function<void(HookPoint, int pid)> hook) { hook_ = std::move(hook); }

  // State of the operation behind an info value. Tagged values and handles of
  // finished (reused) descriptors count as Committed.
  template <class Access = DirectAccess>
  ScxState state_of(InfoValue v, const Access& acc = {}) {
    if (is_tagged(v)) return ScxState::Committed;
    if (info_seq(v) == 0) return ScxState::Aborted;
    const uint64_t st = acc.load(procs_[info_pid(v)].desc.status);
    if (status_seq(st) != info_seq(v)) return ScxState::Committed;
    return status_state(st);
  }

  // ---- LLX --------------------------------------------------------------

  // The original LLX. Never expects tagged values, but tolerates them.
  LlxResult llx_o(int pid, DataRecord* r) { return llx_impl(pid, r, DirectAccess{}, true); }

  // LLX that treats tagged info values as unfrozen. Usable outside or inside
  // a transaction.
  LlxResult llx_htm(int pid, DataRecord* r) { return llx_impl(pid, r, DirectAccess{}, true); }
  LlxResult llx_htm(int pid, DataRecord* r, tm::Transaction& txn) {
    return llx_impl(pid, r, TxnAccess{txn}, true);
  }

  // LLX without recording into the process's table (for read-only
  // validation of many records).
  template <class Access>
  LlxResult llx_unlinked(int pid, DataRecord* r, const Access& acc) {
    return llx_impl(pid, r, acc, false);
  }

  // ---- SCX --------------------------------------------------------------

  // The original lock-free SCX. `records` is V, `finalize` is R (a subset of
  // V), `fld` a slot of some record in V. Each record of V must have a linked
  // LLX in pid's table.
  bool scx_o(int pid, std::span<DataRecord* const> records, std::span<DataRecord* const> finalize,
             FieldRef fld, uint64_t new_value) {
    Process& me = procs_[pid];
    ScxDescriptor& d = me.desc;
    const std::size_t n = records.size();
    if (n == 0 || n > kMaxV) throw std::invalid_argument("scx: |V| must be in [1, kMaxV]");

    std::array<DataRecord*, kMaxV> sorted{};
    std::copy(records.begin(), records.end(), sorted.begin());
    std::sort(sorted.begin(), sorted.begin() + n,
              [](const DataRecord* a, const DataRecord* b) { return a->order() < b->order(); });

    uint64_t r_mask = 0;
    uint64_t fld_index = kMaxV;
    for (std::size_t i = 0; i < n; ++i) {
      if (std::find(finalize.begin(), finalize.end(), sorted[i]) != finalize.end()) r_mask |= 1ull << i;
      if (sorted[i] == fld.record) fld_index = i;
    }
    if (fld_index == kMaxV) throw std::invalid_argument("scx: fld must belong to a record in V");

    const auto* fld_entry = me.table.find(fld.record);
    assert(fld_entry && "scx: missing linked LLX");

    const uint64_t seq = status_seq(d.status.load()) + 1;
    d.status.store(make_status(seq, ScxState::InProgress, false));
    for (std::size_t i = 0; i < n; ++i) {
      const auto* e = me.table.find(sorted[i]);
      assert(e && "scx: missing linked LLX");
      d.records[i].store(reinterpret_cast<uint64_t>(sorted[i]));
      d.info_fields[i].store(e->info);
    }
    d.shape.store(n | (r_mask << 8) | (fld_index << 16) | (static_cast<uint64_t>(fld.slot) << 24));
    d.new_value.store(new_value);
    d.old_value.store(fld_entry->snapshot[fld.slot]);
    return help_impl(make_handle(pid, seq), DirectAccess{}, true);
  }

  // Performs a descriptor's SCX (possibly on behalf of another process).
  // Returns true iff that SCX succeeds; false also when the handle refers to
  // an already finished use of the descriptor.
  bool help(InfoValue handle) { return help_impl(handle, DirectAccess{}, false); }
  template <class Access>
  bool help(InfoValue handle, const Access& acc) {
    return help_impl(handle, acc, false);
  }

  // Transactional SCX. Must run inside `txn`; returns true, or aborts the
  // transaction explicitly with kFailedValidation.
  bool scx_htm(int pid, tm::Transaction& txn, std::span<DataRecord* const> records,
               std::span<DataRecord* const> finalize, FieldRef fld, uint64_t new_value) {
    Process& me = procs_[pid];
    me.tagseq += kSeqIncrement;
    const InfoValue tag = me.tagseq;
    for (DataRecord* r : records) {
      const auto* e = me.table.find(r);
      assert(e && "scx_htm: missing linked LLX");
      if (txn.read(r->info) != e->info) txn.abort_explicit(kFailedValidation);
    }
    for (DataRecord* r : records) txn.write(r->info, tag);
    for (DataRecord* r : finalize) txn.write(r->marked, 1);
    txn.write(fld.word(), new_value);
    return true;
  }

  // SCX that tries scx_htm in its own transaction while the process has
  // budget left, then falls back to scx_o. A failed validation inside the
  // transaction returns false without resetting the budget.
  bool scx_dispatch(tm::Engine& engine, int pid, std::span<DataRecord* const> records,
                    std::span<DataRecord* const> finalize, FieldRef fld, uint64_t new_value,
                    uint64_t budget) {
    Process& me = procs_[pid];
    for (;;) {
      if (me.attempts < budget) {
        ++me.attempts;
        ++me.dispatch_txns;
        const tm::TxnOutcome out = engine.execute_as(pid, [&](tm::Transaction& txn) {
          scx_htm(pid, txn, records, finalize, fld, new_value);
        });
        if (out.is_committed()) {
          me.attempts = 0;
          return true;
        }
        if (out.is_explicit(kFailedValidation)) return false;
        continue;
      }
      ++me.dispatch_fallbacks;
      const bool ok = scx_o(pid, records, finalize, fld, new_value);
      if (ok) me.attempts = 0;
      return ok;
    }
  }

 private:
  struct ScxDescriptor {
    // seq << 3 | allFrozen << 2 | state
    tm::Word status{0};
    // |V| | R bitmask << 8 | index of fld's record << 16 | fld slot << 24
    tm::Word shape;
    std::array<tm::Word, kMaxV> records;
    std::array<tm::Word, kMaxV> info_fields;
    tm::Word new_value;
    tm::Word old_value;
  };

  struct alignas(64) Process {
    ScxDescriptor desc;
    LlxTable table;
    uint64_t attempts = 0;
    InfoValue tagseq = 1;
    uint64_t dispatch_txns = 0;
    uint64_t dispatch_fallbacks = 0;
    uint64_t help_calls = 0;
  };

  static constexpr uint64_t make_status(uint64_t seq, ScxState s, bool all_frozen) noexcept {
    return (seq << 3) | (static_cast<uint64_t>(all_frozen) << 2) | static_cast<uint64_t>(s);
  }
  static constexpr uint64_t status_seq(uint64_t st) noexcept { return st >> 3; }
  static constexpr ScxState status_state(uint64_t st) noexcept { return static_cast<ScxState>(st & 3); }
  static constexpr bool status_all_frozen(uint64_t st) noexcept { return (st >> 2) & 1; }

  void hook(HookPoint p) {
    if (hook_) hook_(p, ThreadRegistry::this_thread_id());
  }

  template <class Access>
  LlxResult llx_impl(int pid, DataRecord* r, const Access& acc, bool link) {
    LlxResult res;
    const bool marked1 = acc.load(r->marked) != 0;
    const InfoValue rinfo = acc.load(r->info);
    const ScxState state = state_of(rinfo, acc);
    const bool marked2 = acc.load(r->marked) != 0;
    if (!marked2 && state != ScxState::InProgress) {
      res.snapshot.size = static_cast<uint32_t>(r->slot_count());
      for (std::size_t i = 0; i < r->slot_count(); ++i) res.snapshot.values[i] = acc.load(r->slot(i));
      if (acc.load(r->info) == rinfo) {
        res.status = LlxStatus::Snapshot;
        res.info = rinfo;
        if (link) procs_[pid].table.put(r, rinfo, res.snapshot);
        return res;
      }
    }
    // A record marked outside any SCX (by sequential code removing it) can
    // carry the info value of an aborted SCX.
    const ScxState state2 = state_of(rinfo, acc);
    if ((state2 != ScxState::InProgress ||
         (state2 == ScxState::InProgress && help_impl(rinfo, acc, false))) &&
        marked1) {
      res.status = LlxStatus::Finalized;
      return res;
    }
    const InfoValue rinfo2 = acc.load(r->info);
    if (state_of(rinfo2, acc) == ScxState::InProgress) help_impl(rinfo2, acc, false);
    res.status = LlxStatus::Fail;
    return res;
  }

  template <class Access>
  bool help_impl(InfoValue handle, const Access& acc, bool owner) {
    assert(!is_tagged(handle));
    const uint64_t seq = info_seq(handle);
    ScxDescriptor& d = procs_[info_pid(handle)].desc;
    if (!owner) ++procs_[ThreadRegistry::this_thread_id()].help_calls;

    // Copy the descriptor, then confirm it was not reused meanwhile.
    if (status_seq(acc.load(d.status)) != seq) return false;
    const uint64_t shape = acc.load(d.shape);
    const std::size_t n = shape & 0xFF;
    const uint64_t r_mask = (shape >> 8) & 0xFF;
    const std::size_t fld_index = (shape >> 16) & 0xFF;
    const uint32_t fld_slot = static_cast<uint32_t>((shape >> 24) & 0xFF);
    std::array<DataRecord*, kMaxV> records{};
    std::array<InfoValue, kMaxV> infos{};
    for (std::size_t i = 0; i < n && i < kMaxV; ++i) {
      records[i] = reinterpret_cast<DataRecord*>(acc.load(d.records[i]));
      infos[i] = acc.load(d.info_fields[i]);
    }
    const uint64_t new_value = acc.load(d.new_value);
    const uint64_t old_value = acc.load(d.old_value);
    if (status_seq(acc.load(d.status)) != seq) return false;

    // Freeze every record of V, in order.
    for (std::size_t i = 0; i < n; ++i) {
      DataRecord* r = records[i];
      if (!acc.cas(r->info, infos[i], handle)) {
        if (acc.load(r->info) != handle) {
          const uint64_t st = acc.load(d.status);
          if (status_seq(st) != seq) return false;
          if (status_all_frozen(st)) return true;
          acc.cas(d.status, make_status(seq, ScxState::InProgress, false),
                  make_status(seq, ScxState::Aborted, false));
          return false;
        }
      }
      hook(HookPoint::AfterFreezingCas);
    }
    hook(HookPoint::AfterAllFrozen);

    // Frozen step. The mark and update steps below only run while the
    // operation is observed in progress, so the nodes they touch cannot have
    // been retired yet.
    acc.cas(d.status, make_status(seq, ScxState::InProgress, false),
            make_status(seq, ScxState::InProgress, true));
    const uint64_t st = acc.load(d.status);
    if (status_seq(st) != seq) return true;
    if (status_state(st) == ScxState::Committed) return true;
    if (status_state(st) == ScxState::Aborted) return false;

    for (std::size_t i = 0; i < n; ++i) {
      if (r_mask & (1ull << i)) acc.cas(records[i]->marked, 0, 1);
    }
    acc.cas(records[fld_index]->slot(fld_slot), old_value, new_value);
    hook(HookPoint::BeforeCommitStep);
    acc.cas(d.status, make_status(seq, ScxState::InProgress, true),
            make_status(seq, ScxState::Committed, true));
    return true;
  }

  std::unique_ptr<Process[]> procs_;
  std::function<void(HookPoint, int)> hook_;
};

}  // namespace htmtree::llx
