#pragma once

// Epoch-based memory reclamation in the style of DEBRA.
//
// Every operation runs between enter() and leave(). A retired record goes
// into the calling process's limbo bag for the current epoch. A bag is
// emptied when its owner reuses it, three epochs later: two advances make the
// records unreachable for every guarded reader, and the third covers helpers
// that reach a record through a descriptor copied just before the owner of
// that descriptor finished. Each process tries to
// advance the epoch every `advance_every` operations by checking that every
// active process has announced the current epoch.
//
// Records allocated inside a transaction are deleted if it aborts, and
// records retired inside a transaction only reach a limbo bag if it commits.

#include <array>
#include <cassert>
#include <atomic>
#include <cstdint>
#include <cstring>
#include <memory>
#include <mutex>
#include <new>
#include <stdexcept>
#include <vector>

#include "htmtree/thread_registry.hpp"
#include "htmtree/txn.hpp"

namespace htmtree::reclaim {

inline constexpr unsigned char kPoisonByte = 0xA5;

struct ReclaimerOptions {
  uint32_t advance_every = 64;
  // Poison freed records and keep their memory until the reclaimer is
  // destroyed, so a premature free shows up as garbage rather than reuse.
  bool quarantine = false;
};

class EpochReclaimer {
 public:
  explicit EpochReclaimer(ReclaimerOptions opts = {})
      : opts_(opts), procs_(std::make_unique<Process[]>(kMaxThreads)) {}

  EpochReclaimer(const EpochReclaimer&) = delete;
  EpochReclaimer& operator=(const EpochReclaimer&) = delete;

  ~EpochReclaimer() {
    drain();
    for (const Retired& r : quarantine_) r.release(r.ptr);
  }

  // RAII wrapper around enter()/leave().
  class Guard {
   public:
    Guard(EpochReclaimer& r, int pid) : r_(r), pid_(pid) { r_.enter(pid_); }
    ~Guard() { r_.leave(pid_); }
    Guard(const Guard&) = delete;
    Guard& operator=(const Guard&) = delete;

   private:
    EpochReclaimer& r_;
    int pid_;
  };

  // Throws std::logic_error if pid is already inside an operation.
  void enter(int pid) {
    Process& me = procs_[pid];
    if (me.announce.load(std::memory_order_relaxed) & 1) throw std::logic_error("nested reclamation guard");
    uint64_t e = epoch_.load(std::memory_order_seq_cst);
    for (;;) {
      me.announce.store((e << 1) | 1, std::memory_order_seq_cst);
      const uint64_t again = epoch_.load(std::memory_order_seq_cst);
      if (again == e) break;
      e = again;
    }
    if (e != me.local_epoch) {
      me.local_epoch = e;
      rotate(me, e);
    }
    if (++me.ops % opts_.advance_every == 0) try_advance_from(e);
  }

  void leave(int pid) {
    Process& me = procs_[pid];
    assert((me.announce.load(std::memory_order_relaxed) & 1) && "leave without enter");
    me.announce.store(me.local_epoch << 1, std::memory_order_seq_cst);
  }

  // Retires a record that has been unlinked. Must be called between enter()
  // and leave() by the process that unlinked it.
  template <class T>
  void retire(int pid, T* p) {
    push(procs_[pid], make_retired(p));
  }

  // Allocation owned by the transaction until it commits.
  template <class T, class... Args>
  T* alloc_in(tm::Transaction& txn, int pid, Args&&... args) {
    T* p = new T(std::forward<Args>(args)...);
    Process& me = procs_[pid];
    me.txn_allocs.push_back(make_retired(p));
    register_hooks(txn, me);
    return p;
  }

  // Retirement that takes effect only if the transaction commits.
  template <class T>
  void retire_in(tm::Transaction& txn, int pid, T* p) {
    Process& me = procs_[pid];
    me.txn_retires.push_back(make_retired(p));
    register_hooks(txn, me);
  }

  // Frees every limbo record. Only valid when no process is inside an
  // operation.
  void drain() {
    for (int p = 0; p < kMaxThreads; ++p) {
      for (auto& bag : procs_[p].bags) {
        for (const Retired& r : bag.items) free_one(r);
        bag.items.clear();
      }
    }
  }

  bool active(int pid) const noexcept { return procs_[pid].announce.load(std::memory_order_relaxed) & 1; }
  // Advances the epoch if every active process has announced it, then frees
  // pid's expired bags. Returns true if the epoch moved.
  bool try_advance(int pid) {
    const uint64_t before = epoch_.load(std::memory_order_seq_cst);
    try_advance_from(before);
    const uint64_t now = epoch_.load(std::memory_order_seq_cst);
    rotate(procs_[pid], now);
    return now != before;
  }

  uint64_t epoch() const noexcept { return epoch_.load(std::memory_order_acquire); }
  uint64_t retired_count() const noexcept { return retired_.load(std::memory_order_relaxed); }
  uint64_t freed_count() const noexcept { return freed_.load(std::memory_order_relaxed); }
  std::size_t limbo_size(int pid) const {
    std::size_t n = 0;
    for (const auto& bag : procs_[pid].bags) n += bag.items.size();
    return n;
  }
  const ReclaimerOptions& options() const noexcept { return opts_; }

 private:
  struct Retired {
    void* ptr;
    std::size_t size;
    void (*destroy)(void*);
    void (*release)(void*);
  };

  struct Bag {
    uint64_t epoch = 0;
    std::vector<Retired> items;
  };

  struct alignas(64) Process {
    std::atomic<uint64_t> announce{0};
    uint64_t local_epoch = 0;
    uint64_t ops = 0;
    std::array<Bag, 3> bags;
    std::vector<Retired> txn_allocs;
    std::vector<Retired> txn_retires;
    EpochReclaimer* owner = nullptr;
  };

  template <class T>
  static Retired make_retired(T* p) {
    return Retired{p, sizeof(T), [](void* q) { static_cast<T*>(q)->~T(); },
                   [](void* q) {
                     if constexpr (alignof(T) > __STDCPP_DEFAULT_NEW_ALIGNMENT__) {
                       ::operator delete(q, std::align_val_t(alignof(T)));
                     } else {
                       ::operator delete(q);
                     }
                   }};
  }

  void push(Process& me, const Retired& r) {
    retired_.fetch_add(1, std::memory_order_relaxed);
    Bag& bag = me.bags[me.local_epoch % 3];
    if (bag.epoch != me.local_epoch) {
      for (const Retired& old : bag.items) free_one(old);
      bag.items.clear();
      bag.epoch = me.local_epoch;
    }
    bag.items.push_back(r);
  }

  void rotate(Process& me, uint64_t e) {
    for (Bag& bag : me.bags) {
      if (!bag.items.empty() && bag.epoch + 3 <= e) {
        for (const Retired& r : bag.items) free_one(r);
        bag.items.clear();
      }
    }
  }

  void try_advance_from(uint64_t e) {
    const int n = ThreadRegistry::high_water();
    for (int p = 0; p < n; ++p) {
      const uint64_t a = procs_[p].announce.load(std::memory_order_seq_cst);
      if ((a & 1) && (a >> 1) != e) return;
    }
    epoch_.compare_exchange_strong(e, e + 1, std::memory_order_seq_cst);
  }

  void free_one(const Retired& r) {
    freed_.fetch_add(1, std::memory_order_relaxed);
    r.destroy(r.ptr);
    if (opts_.quarantine) {
      std::memset(r.ptr, kPoisonByte, r.size);
      std::lock_guard lock(quarantine_mu_);
      quarantine_.push_back(r);
    } else {
      r.release(r.ptr);
    }
  }

  void register_hooks(tm::Transaction& txn, Process& me) {
    me.owner = this;
    txn.defer_on_commit(&on_commit, this, &me);
    txn.defer_on_abort(&on_abort, this, &me);
  }

  static void on_commit(void* self, void* proc) {
    auto* r = static_cast<EpochReclaimer*>(self);
    auto* me = static_cast<Process*>(proc);
    me->txn_allocs.clear();
    for (const Retired& x : me->txn_retires) r->push(*me, x);
    me->txn_retires.clear();
  }

  static void on_abort(void*, void* proc) {
    auto* me = static_cast<Process*>(proc);
    for (const Retired& x : me->txn_allocs) {
      x.destroy(x.ptr);
      x.release(x.ptr);
    }
    me->txn_allocs.clear();
    me->txn_retires.clear();
  }

  ReclaimerOptions opts_;
  alignas(64) std::atomic<uint64_t> epoch_{0};
  std::atomic<uint64_t> retired_{0};
  std::atomic<uint64_t> freed_{0};
  std::unique_ptr<Process[]> procs_;
  std::mutex quarantine_mu_;
  std::vector<Retired> quarantine_;
};

}  // namespace htmtree::reclaim
