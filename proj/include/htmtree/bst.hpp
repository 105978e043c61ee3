#pragma once

// Leaf-oriented (external) unbalanced binary search tree.
//
// Dictionary keys live in leaves; an internal node's key routes searches:
// keys below it go left, keys at or above it go right. Two sentinel leaves
// (kInf1, kInf2) hang under the permanent entry node, so every real leaf has
// a parent and a grandparent.
//
// Fallback and middle paths follow the tree update template: every update
// replaces a small connected set of nodes with fresh copies through one SCX.
// The fast path is plain sequential code inside a transaction: it writes a
// leaf's value in place, links in new nodes with one write, and deletes by
// swinging the grandparent's pointer to the existing sibling.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <type_traits>
#include <utility>
#include <vector>

#include "htmtree/llxscx.hpp"
#include "htmtree/path_policy.hpp"
#include "htmtree/reclamation.hpp"
#include "htmtree/thread_registry.hpp"
#include "htmtree/txn.hpp"
#include "htmtree/types.hpp"

namespace htmtree {

struct BstConfig {
  PolicyKind policy = PolicyKind::ThreePath;
  PathBudget budget;
  tm::TxnConfig txn;
  reclaim::ReclaimerOptions reclaim;
  // Run the search phase of fast/middle attempts before the transaction and
  // check the marked bit of every node the transaction then touches.
  bool search_outside_txn = false;
  // Checker sensitivity only: the fallback insert links its new nodes with a
  // plain store instead of an SCX, so concurrent updates can be lost.
  bool fault_unvalidated_insert = false;
};

struct BstNode : llx::DataRecord {
  const Key key;
  const bool leaf;
  tm::Word value;
  std::array<tm::Word, 2> child;

  BstNode(Key k, Value v) : key(k), leaf(true) {
    value.init(v);
    bind_slots(child.data(), 2);
  }
  BstNode(Key k, uint64_t left, uint64_t right) : key(k), leaf(false) {
    child[0].init(left);
    child[1].init(right);
    bind_slots(child.data(), 2);
  }
};

class Bst {
 public:
  static constexpr Key kInf1 = ~Key{0} - 1;
  static constexpr Key kInf2 = ~Key{0};
  // Largest key accepted by the dictionary.
  static constexpr Key kMaxKey = kInf1 - 1;

  explicit Bst(BstConfig cfg = {})
      : cfg_(cfg),
        engine_(cfg.txn),
        runtime_(cfg.policy, cfg.budget, engine_),
        reclaimer_(cfg.reclaim),
        allocs_(std::make_unique<Counter[]>(kMaxThreads)) {
    entry_ = new BstNode(kInf2, ref(new BstNode(kInf1, 0)), ref(new BstNode(kInf2, 0)));
  }

  Bst(const Bst&) = delete;
  Bst& operator=(const Bst&) = delete;

  ~Bst() { free_subtree(entry_); }

  const BstConfig& config() const noexcept { return cfg_; }
  tm::Engine& engine() noexcept { return engine_; }
  PathRuntime& runtime() noexcept { return runtime_; }
  llx::Domain& domain() noexcept { return domain_; }
  reclaim::EpochReclaimer& reclaimer() noexcept { return reclaimer_; }
  BstNode* entry() noexcept { return entry_; }

  // Returns true if `key` was absent. The value is stored either way.
  bool insert(Key key, Value value) {
    check_key(key);
    const int pid = ThreadRegistry::this_thread_id();
    reclaim::EpochReclaimer::Guard guard(reclaimer_, pid);
    InsertOp op{*this, pid, key, value};
    return runtime_.run(pid, op);
  }

  // Returns true if `key` was present.
  bool remove(Key key) {
    check_key(key);
    const int pid = ThreadRegistry::this_thread_id();
    reclaim::EpochReclaimer::Guard guard(reclaimer_, pid);
    RemoveOp op{*this, pid, key};
    return runtime_.run(pid, op);
  }

  std::optional<Value> find(Key key) {
    const int pid = ThreadRegistry::this_thread_id();
    reclaim::EpochReclaimer::Guard guard(reclaimer_, pid);
    llx::DirectAccess acc;
    BstNode* n = deref(acc.load(entry_->child[0]));
    while (!n->leaf) n = deref(acc.load(n->child[key < n->key ? 0 : 1]));
    if (n->key != key) return std::nullopt;
    return acc.load(n->value);
  }

  // Keys in [lo, hi), in order, as an atomic snapshot.
  std::vector<KeyValue> range_query(Key lo, Key hi) {
    const int pid = ThreadRegistry::this_thread_id();
    reclaim::EpochReclaimer::Guard guard(reclaimer_, pid);
    RangeOp op{*this, pid, lo, hi};
    return runtime_.run(pid, op);
  }

  // Nothing to rebalance; present for interface parity with AbTree.
  void drain() {}

  // ---- Quiescent inspection ----------------------------------------------

  std::vector<KeyValue> contents() const {
    std::vector<KeyValue> out;
    collect(entry_, out);
    return out;
  }

  std::size_t size() const { return contents().size(); }

  uint64_t key_sum() const {
    uint64_t s = 0;
    for (const auto& kv : contents()) s += kv.first;
    return s;
  }

  // Structural violations; empty when the tree is well formed.
  std::vector<std::string> validate() const {
    std::vector<std::string> errs;
    if (entry_->leaf || entry_->key != kInf2) errs.push_back("entry is not an internal node with key inf2");
    BstNode* right = deref(entry_->child[1].peek());
    if (!right || !right->leaf || right->key != kInf2) errs.push_back("entry's right child is not the inf2 leaf");
    BstNode* left = deref(entry_->child[0].peek());
    if (!left) {
      errs.push_back("entry has no left child");
      return errs;
    }
    Key prev = 0;
    bool have_prev = false;
    validate_node(left, 0, kInf2, prev, have_prev, errs);
    if (!have_prev || prev != kInf1) errs.push_back("last leaf is not the inf1 sentinel");
    return errs;
  }

  // Node allocations made by operations (all paths, all threads).
  uint64_t allocations() const {
    uint64_t n = 0;
    for (int p = 0; p < kMaxThreads; ++p) n += allocs_[p].n;
    return n;
  }

  // Order-sensitive hash of the tree's shape and contents.
  uint64_t structure_hash() const { return hash_node(entry_); }

 private:
  struct alignas(64) Counter {
    uint64_t n = 0;
  };

  struct Found {
    BstNode* gp;
    BstNode* p;
    BstNode* l;
    int gpdir;
    int pdir;
  };

  static uint64_t ref(BstNode* n) noexcept { return reinterpret_cast<uint64_t>(n); }
  static BstNode* deref(uint64_t v) noexcept { return reinterpret_cast<BstNode*>(v); }

  static void check_key(Key k) {
    if (k > kMaxKey) throw std::out_of_range("key collides with a sentinel");
  }

  template <class Load>
  Found search(Key key, Load&& load) {
    Found f{nullptr, entry_, nullptr, 0, 0};
    BstNode* n = deref(load(entry_->child[0]));
    while (!n->leaf) {
      f.gp = f.p;
      f.gpdir = f.pdir;
      f.p = n;
      f.pdir = key < n->key ? 0 : 1;
      n = deref(load(n->child[f.pdir]));
    }
    f.l = n;
    return f;
  }

  // ---- Sequential code (fast path, and TLE under the lock) ----------------

  struct TxnSeq {
    Bst& t;
    int pid;
    tm::Transaction& txn;

    uint64_t load(tm::Word& w) { return txn.read(w); }
    void store(tm::Word& w, uint64_t v) { txn.write(w, v); }
    template <class... A>
    BstNode* make(A&&... a) {
      ++t.allocs_[pid].n;
      return t.reclaimer_.alloc_in<BstNode>(txn, pid, std::forward<A>(a)...);
    }
    void retire(BstNode* n) { t.reclaimer_.retire_in(txn, pid, n); }
    void check_unmarked(BstNode* n) {
      if (txn.read(n->marked) != 0) txn.abort_explicit(llx::kNodeMarked);
    }
  };

  struct DirectSeq {
    Bst& t;
    int pid;

    uint64_t load(tm::Word& w) { return w.load(); }
    void store(tm::Word& w, uint64_t v) { w.store(v); }
    template <class... A>
    BstNode* make(A&&... a) {
      ++t.allocs_[pid].n;
      return new BstNode(std::forward<A>(a)...);
    }
    void retire(BstNode* n) { t.reclaimer_.retire(pid, n); }
    void check_unmarked(BstNode*) {}
  };

  // Search for the sequential code; in search-outside mode the traversal is
  // plain and the transaction re-reads only the links it relies on.
  template <class Env>
  std::optional<Found> seq_search(Env& env, Key key, bool need_gp) {
    if (!cfg_.search_outside_txn) {
      return search(key, [&](tm::Word& w) { return env.load(w); });
    }
    Found f = search(key, [](tm::Word& w) { return w.load(); });
    if (need_gp && f.gp) {
      env.check_unmarked(f.gp);
      if (env.load(f.gp->child[f.gpdir]) != ref(f.p)) return std::nullopt;
    }
    env.check_unmarked(f.p);
    env.check_unmarked(f.l);
    if (env.load(f.p->child[f.pdir]) != ref(f.l)) return std::nullopt;
    return f;
  }

  template <class Env>
  std::optional<bool> insert_seq(Env& env, Key key, Value value) {
    auto f = seq_search(env, key, false);
    if (!f) return std::nullopt;
    if (f->l->key == key) {
      env.store(f->l->value, value);
      return false;
    }
    BstNode* leaf = env.make(key, value);
    BstNode* internal = key < f->l->key ? env.make(f->l->key, ref(leaf), ref(f->l))
                                        : env.make(key, ref(f->l), ref(leaf));
    env.store(f->p->child[f->pdir], ref(internal));
    return true;
  }

  template <class Env>
  std::optional<bool> remove_seq(Env& env, Key key) {
    auto f = seq_search(env, key, true);
    if (!f) return std::nullopt;
    if (f->l->key != key) return false;
    const uint64_t sibling = env.load(f->p->child[1 - f->pdir]);
    env.store(f->gp->child[f->gpdir], sibling);
    if (cfg_.search_outside_txn) {
      env.store(f->p->marked, 1);
      env.store(f->l->marked, 1);
    }
    env.retire(f->p);
    env.retire(f->l);
    return true;
  }

  // ---- Template code (middle and fallback paths) -------------------------

  struct MiddleEnv {
    Bst& t;
    int pid;
    tm::Transaction& txn;

    MiddleEnv(Bst& tree, int p, tm::Transaction& x) : t(tree), pid(p), txn(x) { t.domain_.table(pid).clear(); }

    uint64_t load(tm::Word& w) { return txn.read(w); }
    std::optional<llx::Snapshot> llx(BstNode* n) {
      auto r = t.domain_.llx_htm(pid, n, txn);
      if (!r.ok()) return std::nullopt;
      return r.snapshot;
    }
    template <class... A>
    BstNode* make(A&&... a) {
      ++t.allocs_[pid].n;
      return t.reclaimer_.alloc_in<BstNode>(txn, pid, std::forward<A>(a)...);
    }
    bool scx(std::span<llx::DataRecord* const> v, std::span<llx::DataRecord* const> r, llx::FieldRef fld,
             BstNode* n) {
      t.domain_.scx_htm(pid, txn, v, r, fld, ref(n));
      for (llx::DataRecord* x : r) t.reclaimer_.retire_in(txn, pid, static_cast<BstNode*>(x));
      return true;
    }
  };

  struct FallbackEnv {
    Bst& t;
    int pid;
    std::array<BstNode*, 4> fresh{};
    std::size_t nfresh = 0;

    FallbackEnv(Bst& tree, int p) : t(tree), pid(p) { t.domain_.table(pid).clear(); }

    uint64_t load(tm::Word& w) { return w.load(); }
    std::optional<llx::Snapshot> llx(BstNode* n) {
      auto r = t.domain_.llx_o(pid, n);
      if (!r.ok()) return std::nullopt;
      return r.snapshot;
    }
    template <class... A>
    BstNode* make(A&&... a) {
      ++t.allocs_[pid].n;
      return fresh[nfresh++] = new BstNode(std::forward<A>(a)...);
    }
    bool scx(std::span<llx::DataRecord* const> v, std::span<llx::DataRecord* const> r, llx::FieldRef fld,
             BstNode* n) {
      if (!t.domain_.scx_o(pid, v, r, fld, ref(n))) {
        for (std::size_t i = 0; i < nfresh; ++i) delete fresh[i];
        nfresh = 0;
        return false;
      }
      for (llx::DataRecord* x : r) t.reclaimer_.retire(pid, static_cast<BstNode*>(x));
      nfresh = 0;
      return true;
    }
  };

  template <class Env>
  Found tmpl_search(Env& env, Key key) {
    if (cfg_.search_outside_txn) return search(key, [](tm::Word& w) { return w.load(); });
    return search(key, [&](tm::Word& w) { return env.load(w); });
  }

  template <class Env>
  std::optional<bool> insert_tmpl(Env& env, Key key, Value value) {
    const Found f = tmpl_search(env, key);
    auto sp = env.llx(f.p);
    if (!sp || (*sp)[f.pdir] != ref(f.l)) return std::nullopt;
    if (!env.llx(f.l)) return std::nullopt;
    const std::array<llx::DataRecord*, 2> v{f.p, f.l};
    const std::array<llx::DataRecord*, 1> r{f.l};
    const llx::FieldRef fld{f.p, static_cast<uint32_t>(f.pdir)};
    if (f.l->key == key) {
      BstNode* n = env.make(key, value);
      if (!env.scx(v, r, fld, n)) return std::nullopt;
      return false;
    }
    BstNode* leaf = env.make(key, value);
    BstNode* copy = env.make(f.l->key, env.load(f.l->value));
    BstNode* internal = key < f.l->key ? env.make(f.l->key, ref(leaf), ref(copy))
                                       : env.make(key, ref(copy), ref(leaf));
    if constexpr (std::is_same_v<Env, FallbackEnv>) {
      if (cfg_.fault_unvalidated_insert) {
        std::this_thread::yield();
        fld.word().store(ref(internal));
        env.nfresh = 0;
        return true;
      }
    }
    if (!env.scx(v, r, fld, internal)) return std::nullopt;
    return true;
  }

  template <class Env>
  std::optional<bool> remove_tmpl(Env& env, Key key) {
    const Found f = tmpl_search(env, key);
    if (f.l->key != key) return false;
    auto sgp = env.llx(f.gp);
    if (!sgp || (*sgp)[f.gpdir] != ref(f.p)) return std::nullopt;
    auto sp = env.llx(f.p);
    if (!sp || (*sp)[f.pdir] != ref(f.l)) return std::nullopt;
    BstNode* s = deref((*sp)[1 - f.pdir]);
    if (!env.llx(f.l)) return std::nullopt;
    auto ss = env.llx(s);
    if (!ss) return std::nullopt;
    BstNode* copy = s->leaf ? env.make(s->key, env.load(s->value)) : env.make(s->key, (*ss)[0], (*ss)[1]);
    const std::array<llx::DataRecord*, 4> v{f.gp, f.p, f.l, s};
    const std::array<llx::DataRecord*, 3> r{f.p, f.l, s};
    if (!env.scx(v, r, llx::FieldRef{f.gp, static_cast<uint32_t>(f.gpdir)}, copy)) return std::nullopt;
    return true;
  }

  // ---- Operations --------------------------------------------------------

  struct InsertOp {
    using Result = bool;
    Bst& t;
    int pid;
    Key key;
    Value value;

    std::optional<bool> fast(tm::Transaction& txn) {
      TxnSeq env{t, pid, txn};
      return t.insert_seq(env, key, value);
    }
    std::optional<bool> middle(tm::Transaction& txn) {
      MiddleEnv env(t, pid, txn);
      return t.insert_tmpl(env, key, value);
    }
    std::optional<bool> fallback() {
      FallbackEnv env(t, pid);
      return t.insert_tmpl(env, key, value);
    }
    std::optional<bool> locked() {
      DirectSeq env{t, pid};
      return t.insert_seq(env, key, value);
    }
  };

  struct RemoveOp {
    using Result = bool;
    Bst& t;
    int pid;
    Key key;

    std::optional<bool> fast(tm::Transaction& txn) {
      TxnSeq env{t, pid, txn};
      return t.remove_seq(env, key);
    }
    std::optional<bool> middle(tm::Transaction& txn) {
      MiddleEnv env(t, pid, txn);
      return t.remove_tmpl(env, key);
    }
    std::optional<bool> fallback() {
      FallbackEnv env(t, pid);
      return t.remove_tmpl(env, key);
    }
    std::optional<bool> locked() {
      DirectSeq env{t, pid};
      return t.remove_seq(env, key);
    }
  };

  template <class Load>
  void collect_range(BstNode* n, Key lo, Key hi, std::vector<KeyValue>& out, Load&& load) {
    if (n->leaf) {
      if (n->key >= lo && n->key < hi) out.emplace_back(n->key, load(n->value));
      return;
    }
    if (lo < n->key) collect_range(deref(load(n->child[0])), lo, hi, out, load);
    if (hi > n->key) collect_range(deref(load(n->child[1])), lo, hi, out, load);
  }

  // Fallback range query: LLX every node of the covering subtree, then check
  // that none of their info words changed.
  std::optional<std::vector<KeyValue>> range_validated(int pid, Key lo, Key hi) {
    std::vector<KeyValue> out;
    std::vector<std::pair<BstNode*, llx::InfoValue>> seen;
    std::vector<BstNode*> stack{entry_};
    llx::DirectAccess acc;
    while (!stack.empty()) {
      BstNode* n = stack.back();
      stack.pop_back();
      auto r = domain_.llx_unlinked(pid, n, acc);
      if (!r.ok()) return std::nullopt;
      seen.emplace_back(n, r.info);
      if (n->leaf) {
        if (n->key >= lo && n->key < hi) out.emplace_back(n->key, n->value.load());
        continue;
      }
      // Right first so that leaves pop in key order.
      if (hi > n->key) stack.push_back(deref(r[1]));
      if (lo < n->key) stack.push_back(deref(r[0]));
    }
    for (const auto& [n, info] : seen) {
      if (n->info.load() != info) return std::nullopt;
    }
    return out;
  }

  struct RangeOp {
    using Result = std::vector<KeyValue>;
    Bst& t;
    int pid;
    Key lo;
    Key hi;

    std::optional<Result> in_txn(tm::Transaction& txn) {
      Result out;
      t.collect_range(deref(txn.read(t.entry_->child[0])), lo, hi, out,
                      [&](tm::Word& w) { return txn.read(w); });
      return out;
    }
    std::optional<Result> fast(tm::Transaction& txn) { return in_txn(txn); }
    std::optional<Result> middle(tm::Transaction& txn) { return in_txn(txn); }
    std::optional<Result> fallback() { return t.range_validated(pid, lo, hi); }
    std::optional<Result> locked() {
      Result out;
      t.collect_range(deref(t.entry_->child[0].load()), lo, hi, out, [](tm::Word& w) { return w.load(); });
      return out;
    }
  };

  // ---- Quiescent helpers -------------------------------------------------

  static void collect(const BstNode* n, std::vector<KeyValue>& out) {
    std::vector<const BstNode*> stack{n};
    while (!stack.empty()) {
      const BstNode* x = stack.back();
      stack.pop_back();
      if (x->leaf) {
        if (x->key <= kMaxKey) out.emplace_back(x->key, x->value.peek());
        continue;
      }
      stack.push_back(deref(x->child[1].peek()));
      stack.push_back(deref(x->child[0].peek()));
    }
  }

  static void free_subtree(BstNode* n) {
    std::vector<BstNode*> stack{n};
    while (!stack.empty()) {
      BstNode* x = stack.back();
      stack.pop_back();
      if (!x->leaf) {
        stack.push_back(deref(x->child[0].peek()));
        stack.push_back(deref(x->child[1].peek()));
      }
      delete x;
    }
  }

  // Checks keys of the subtree at n lie in [lo, hi).
  static void validate_node(const BstNode* n, Key lo, Key hi, Key& prev, bool& have_prev,
                            std::vector<std::string>& errs) {
    if (n->info.peek() == poison_word() || n->marked.peek() != 0) {
      errs.push_back("reachable node with key " + std::to_string(n->key) + " is marked or freed");
    }
    if (n->key < lo || n->key >= hi) {
      errs.push_back("node with key " + std::to_string(n->key) + " is outside its range [" + std::to_string(lo) +
                     ", " + std::to_string(hi) + ")");
    }
    if (n->leaf) {
      if (n->child[0].peek() != 0 || n->child[1].peek() != 0) {
        errs.push_back("leaf " + std::to_string(n->key) + " has children");
      }
      if (have_prev && n->key <= prev) errs.push_back("leaf keys not increasing at " + std::to_string(n->key));
      prev = n->key;
      have_prev = true;
      return;
    }
    const BstNode* l = deref(n->child[0].peek());
    const BstNode* r = deref(n->child[1].peek());
    if (!l || !r) {
      errs.push_back("internal node " + std::to_string(n->key) + " lacks a child");
      return;
    }
    validate_node(l, lo, n->key, prev, have_prev, errs);
    validate_node(r, n->key, hi, prev, have_prev, errs);
  }

  static uint64_t poison_word() {
    uint64_t w;
    std::memset(&w, reclaim::kPoisonByte, sizeof w);
    return w;
  }

  static uint64_t hash_node(const BstNode* n) {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&](uint64_t x) {
      h ^= x + 0x9E3779B97F4A7C15ull + (h << 6) + (h >> 2);
    };
    std::vector<const BstNode*> stack{n};
    while (!stack.empty()) {
      const BstNode* x = stack.back();
      stack.pop_back();
      mix(x->key);
      mix(x->leaf);
      if (x->leaf) {
        mix(x->value.peek());
        continue;
      }
      stack.push_back(deref(x->child[1].peek()));
      stack.push_back(deref(x->child[0].peek()));
    }
    return h;
  }

  BstConfig cfg_;
  tm::Engine engine_;
  PathRuntime runtime_;
  llx::Domain domain_;
  reclaim::EpochReclaimer reclaimer_;
  std::unique_ptr<Counter[]> allocs_;
  BstNode* entry_;
};

}  // namespace htmtree
