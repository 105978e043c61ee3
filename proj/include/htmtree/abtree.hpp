#pragma once

// Relaxed (a,b)-tree.
//
// Leaves hold up to b sorted key-value pairs. An internal node of degree d
// holds d - 1 routing keys, and child i receives the keys k with
// keys[i-1] <= k < keys[i]. The permanent entry node has one child, the
// root, which starts out as an empty leaf.
//
// Balance is relaxed. Inserting into a full leaf puts a tagged node with two
// children where the leaf was, and deletions may leave nodes with fewer than
// a children or pairs. Rebalancing steps remove these violations, each by
// replacing a few nodes with new ones:
//
//   * a tagged node whose parent has room is absorbed into the parent;
//     otherwise the parent is split and the node above the halves is tagged;
//   * an underfull node shares with a sibling when together they have at
//     least 2a children or pairs, and is joined with it otherwise; a root
//     left with a single child is replaced by that child.
//
// Nodes created directly under the entry node are never tagged, so the tree
// grows at the root. With no update running and no violation left, every
// leaf is at the same depth and every node except the root has degree in
// [a, b].
//
// Fast-path updates change leaves in place; an insertion into a full leaf
// keeps the lower half in the leaf and creates only a sibling and a tagged
// parent. Fallback and middle updates replace the leaf with a copy. An update
// that creates a violation fixes every violation on its search path before
// it returns, one rebalancing step per executor run.

#include <algorithm>
#include <array>
#include <cassert>
#include <cstdint>
#include <cstring>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "htmtree/llxscx.hpp"
#include "htmtree/path_policy.hpp"
#include "htmtree/reclamation.hpp"
#include "htmtree/thread_registry.hpp"
#include "htmtree/txn.hpp"
#include "htmtree/types.hpp"

namespace htmtree {

struct AbTreeConfig {
  PolicyKind policy = PolicyKind::ThreePath;
  PathBudget budget;
  tm::TxnConfig txn;
  reclaim::ReclaimerOptions reclaim;
  bool search_outside_txn = false;
  uint32_t a = 6;
  uint32_t b = 16;
  // Updates that leave a violation fix it before returning. When off,
  // violations stay until rebalance_step() or drain().
  bool auto_rebalance = true;
};

template <std::size_t MaxDegree>
struct AbNode : llx::DataRecord {
  static_assert(MaxDegree >= 3 && MaxDegree <= llx::kMaxSlots);

  const bool leaf;
  const bool tagged;
  // Number of children of an internal node.
  const uint32_t degree;
  std::array<Key, MaxDegree - 1> keys{};
  // Leaf size; changed in place only by the fast path.
  tm::Word size;
  // Children of an internal node, or the keys of a leaf.
  std::array<tm::Word, MaxDegree> slots;
  std::array<tm::Word, MaxDegree> values;

  AbNode(std::span<const Key> k, std::span<const Value> v) : leaf(true), tagged(false), degree(0) {
    size.init(k.size());
    for (std::size_t i = 0; i < k.size(); ++i) {
      slots[i].init(k[i]);
      values[i].init(v[i]);
    }
  }

  AbNode(bool tag, std::span<const Key> k, std::span<const uint64_t> children)
      : leaf(false), tagged(tag), degree(static_cast<uint32_t>(children.size())) {
    assert(children.size() <= MaxDegree && k.size() + 1 == children.size());
    std::copy(k.begin(), k.end(), keys.begin());
    for (std::size_t i = 0; i < children.size(); ++i) slots[i].init(children[i]);
    bind_slots(slots.data(), children.size());
  }
};

template <std::size_t MaxDegree = 16>
class AbTree {
 public:
  using Node = AbNode<MaxDegree>;

  explicit AbTree(AbTreeConfig cfg = {})
      : cfg_(cfg),
        engine_(cfg.txn),
        runtime_(cfg.policy, cfg.budget, engine_),
        reclaimer_(cfg.reclaim),
        allocs_(std::make_unique<Counter[]>(kMaxThreads)) {
    if (cfg_.a < 2) throw std::invalid_argument("abtree: a must be at least 2");
    if (cfg_.b < 2 * cfg_.a - 1) throw std::invalid_argument("abtree: b must be at least 2a - 1");
    if (cfg_.b > MaxDegree) throw std::invalid_argument("abtree: b exceeds the node capacity");
    const uint64_t root = ref(new Node(std::span<const Key>{}, std::span<const Value>{}));
    entry_ = new Node(false, std::span<const Key>{}, std::span<const uint64_t>(&root, 1));
  }

  AbTree(const AbTree&) = delete;
  AbTree& operator=(const AbTree&) = delete;

  ~AbTree() { free_subtree(entry_); }

  const AbTreeConfig& config() const noexcept { return cfg_; }
  // Only valid while no operation runs.
  void set_auto_rebalance(bool on) noexcept { cfg_.auto_rebalance = on; }
  tm::Engine& engine() noexcept { return engine_; }
  PathRuntime& runtime() noexcept { return runtime_; }
  llx::Domain& domain() noexcept { return domain_; }
  reclaim::EpochReclaimer& reclaimer() noexcept { return reclaimer_; }
  Node* entry() noexcept { return entry_; }

  bool insert(Key key, Value value) {
    const int pid = ThreadRegistry::this_thread_id();
    reclaim::EpochReclaimer::Guard guard(reclaimer_, pid);
    InsertOp op{*this, pid, key, value};
    const Update u = runtime_.run(pid, op);
    if (u.violation && cfg_.auto_rebalance) cleanup(pid, key);
    return u.result;
  }

  bool remove(Key key) {
    const int pid = ThreadRegistry::this_thread_id();
    reclaim::EpochReclaimer::Guard guard(reclaimer_, pid);
    RemoveOp op{*this, pid, key};
    const Update u = runtime_.run(pid, op);
    if (u.violation && cfg_.auto_rebalance) cleanup(pid, key);
    return u.result;
  }

  std::optional<Value> find(Key key) {
    const int pid = ThreadRegistry::this_thread_id();
    reclaim::EpochReclaimer::Guard guard(reclaimer_, pid);
    FindOp op{*this, key};
    return runtime_.run(pid, op);
  }

  std::vector<KeyValue> range_query(Key lo, Key hi) {
    const int pid = ThreadRegistry::this_thread_id();
    reclaim::EpochReclaimer::Guard guard(reclaimer_, pid);
    RangeOp op{*this, pid, lo, hi};
    return runtime_.run(pid, op);
  }

  // Runs one rebalancing step on the first violation along the search path
  // for `key`. Returns false if that path has no violation.
  bool rebalance_step(Key key) {
    const int pid = ThreadRegistry::this_thread_id();
    reclaim::EpochReclaimer::Guard guard(reclaimer_, pid);
    StepOp op{*this, pid, key};
    return runtime_.run(pid, op);
  }

  // Fixes violations until none is left. Only valid when no update runs.
  void drain() {
    const int pid = ThreadRegistry::this_thread_id();
    reclaim::EpochReclaimer::Guard guard(reclaimer_, pid);
    while (auto key = any_violation()) cleanup(pid, *key);
  }

  // ---- Quiescent inspection ----------------------------------------------

  std::vector<KeyValue> contents() const {
    std::vector<KeyValue> out;
    collect(root(), out);
    return out;
  }

  std::size_t size() const { return contents().size(); }

  uint64_t key_sum() const {
    uint64_t s = 0;
    for (const auto& kv : contents()) s += kv.first;
    return s;
  }

  // Distance from the root to the leftmost leaf (a leaf root has height 0).
  std::size_t height() const {
    std::size_t h = 0;
    for (const Node* n = root(); !n->leaf; n = deref(n->slots[0].peek())) ++h;
    return h;
  }

  // Violations of shape, order and balance; empty when the tree is well
  // formed and fully rebalanced.
  std::vector<std::string> validate() const {
    std::vector<std::string> errs;
    if (entry_->leaf || entry_->degree != 1) errs.push_back("entry is not an internal node with one child");
    const Node* r = root();
    if (!r) {
      errs.push_back("entry has no child");
      return errs;
    }
    Walk w;
    validate_node(r, 0, Bound{}, Bound{}, true, w, errs);
    return errs;
  }

  // Tagged nodes and underfull non-root nodes currently in the tree.
  std::size_t violation_count() const {
    std::size_t n = 0;
    count_violations(root(), true, n);
    return n;
  }

  uint64_t allocations() const {
    uint64_t n = 0;
    for (int p = 0; p < kMaxThreads; ++p) n += allocs_[p].n;
    return n;
  }

  uint64_t structure_hash() const {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&](uint64_t x) { h ^= x + 0x9E3779B97F4A7C15ull + (h << 6) + (h >> 2); };
    std::vector<const Node*> stack{root()};
    while (!stack.empty()) {
      const Node* n = stack.back();
      stack.pop_back();
      mix(n->leaf);
      mix(n->tagged);
      if (n->leaf) {
        const uint64_t sz = n->size.peek();
        mix(sz);
        for (uint64_t i = 0; i < sz; ++i) {
          mix(n->slots[i].peek());
          mix(n->values[i].peek());
        }
        continue;
      }
      mix(n->degree);
      for (uint32_t i = 0; i + 1 < n->degree; ++i) mix(n->keys[i]);
      for (uint32_t i = n->degree; i-- > 0;) stack.push_back(deref(n->slots[i].peek()));
    }
    return h;
  }

 private:
  struct alignas(64) Counter {
    uint64_t n = 0;
  };

  struct Update {
    bool result;
    // The update left a tagged or underfull node on its search path.
    bool violation;
  };

  struct Found {
    Node* gp = nullptr;
    Node* p = nullptr;
    Node* n = nullptr;
    uint32_t gpidx = 0;
    uint32_t pidx = 0;
  };

  enum class Violation { None, Tag, Degree };

  struct LeafData {
    uint32_t size = 0;
    std::array<Key, 2 * MaxDegree> keys{};
    std::array<Value, 2 * MaxDegree> vals{};
  };

  static uint64_t ref(const Node* n) noexcept { return reinterpret_cast<uint64_t>(n); }
  static Node* deref(uint64_t v) noexcept { return reinterpret_cast<Node*>(v); }

  Node* root() const noexcept { return deref(entry_->slots[0].peek()); }

  static uint32_t route(const Node* n, Key key) {
    const auto end = n->keys.begin() + (n->degree - 1);
    return static_cast<uint32_t>(std::upper_bound(n->keys.begin(), end, key) - n->keys.begin());
  }

  static uint64_t plain_load(tm::Word& w) { return w.load(); }

  template <class Load>
  Found search(Key key, Load&& load) {
    Found f;
    f.n = entry_;
    while (!f.n->leaf) {
      f.gp = f.p;
      f.gpidx = f.pidx;
      f.p = f.n;
      f.pidx = route(f.n, key);
      f.n = deref(load(f.n->slots[f.pidx]));
    }
    return f;
  }

  template <class Load>
  uint32_t degree_of(Node* n, Load&& load) {
    if (!n->leaf) return n->degree;
    return static_cast<uint32_t>(std::min<uint64_t>(load(n->size), MaxDegree));
  }

  // First tagged or underfull node on the search path for `key`.
  template <class Load>
  std::pair<Found, Violation> find_violation(Key key, Load&& load) {
    Found f;
    f.n = entry_;
    for (;;) {
      if (f.n != entry_) {
        if (f.n->tagged) return {f, Violation::Tag};
        if (f.p != entry_ && degree_of(f.n, load) < cfg_.a) return {f, Violation::Degree};
      }
      if (f.n->leaf) return {f, Violation::None};
      f.gp = f.p;
      f.gpidx = f.pidx;
      f.p = f.n;
      f.pidx = route(f.n, key);
      f.n = deref(load(f.n->slots[f.pidx]));
    }
  }

  template <class Env>
  static LeafData read_leaf(Env& env, Node* l) {
    LeafData d;
    d.size = static_cast<uint32_t>(std::min<uint64_t>(env.load(l->size), MaxDegree));
    for (uint32_t i = 0; i < d.size; ++i) {
      d.keys[i] = env.load(l->slots[i]);
      d.vals[i] = env.load(l->values[i]);
    }
    return d;
  }

  template <class Env>
  static Node* make_leaf(Env& env, const LeafData& d, uint32_t from, uint32_t to) {
    return env.make(std::span<const Key>(d.keys.data() + from, to - from),
                    std::span<const Value>(d.vals.data() + from, to - from));
  }

  template <class Env>
  static Node* make_internal(Env& env, bool tag, const Key* keys, uint32_t nkeys, const uint64_t* children,
                             uint32_t nchildren) {
    return env.make(tag, std::span<const Key>(keys, nkeys), std::span<const uint64_t>(children, nchildren));
  }

  // ---- Environments ---------------------------------------------------------
  //
  // Each provides load/store for leaf words, make() for new nodes, llx()
  // returning something indexable by child slot, and scx(). Sequential
  // environments read slots lazily and link with a plain write.

  template <class Access>
  struct LazyView {
    const Access* acc;
    Node* n;
    uint64_t operator[](std::size_t i) const { return acc->load(n->slots[i]); }
  };

  struct TxnSeq {
    AbTree& t;
    int pid;
    tm::Transaction& txn;
    llx::TxnAccess acc{txn};

    uint64_t load(tm::Word& w) { return txn.read(w); }
    void store(tm::Word& w, uint64_t v) { txn.write(w, v); }
    template <class... A>
    Node* make(A&&... a) {
      ++t.allocs_[pid].n;
      return t.reclaimer_.template alloc_in<Node>(txn, pid, std::forward<A>(a)...);
    }
    void check_unmarked(Node* n) {
      if (txn.read(n->marked) != 0) txn.abort_explicit(llx::kNodeMarked);
    }
    std::optional<LazyView<llx::TxnAccess>> llx(Node* n) {
      if (t.cfg_.search_outside_txn) check_unmarked(n);
      return LazyView<llx::TxnAccess>{&acc, n};
    }
    bool scx(std::span<llx::DataRecord* const>, std::span<llx::DataRecord* const> r, llx::FieldRef fld, Node* n) {
      store(fld.word(), ref(n));
      for (llx::DataRecord* x : r) {
        if (t.cfg_.search_outside_txn) store(x->marked, 1);
        t.reclaimer_.retire_in(txn, pid, static_cast<Node*>(x));
      }
      return true;
    }
  };

  struct DirectSeq {
    AbTree& t;
    int pid;
    llx::DirectAccess acc{};

    uint64_t load(tm::Word& w) { return w.load(); }
    void store(tm::Word& w, uint64_t v) { w.store(v); }
    template <class... A>
    Node* make(A&&... a) {
      ++t.allocs_[pid].n;
      return new Node(std::forward<A>(a)...);
    }
    void check_unmarked(Node*) {}
    std::optional<LazyView<llx::DirectAccess>> llx(Node* n) { return LazyView<llx::DirectAccess>{&acc, n}; }
    bool scx(std::span<llx::DataRecord* const>, std::span<llx::DataRecord* const> r, llx::FieldRef fld, Node* n) {
      store(fld.word(), ref(n));
      for (llx::DataRecord* x : r) {
        if (t.cfg_.search_outside_txn) store(x->marked, 1);
        t.reclaimer_.retire(pid, static_cast<Node*>(x));
      }
      return true;
    }
  };

  struct MiddleEnv {
    AbTree& t;
    int pid;
    tm::Transaction& txn;

    MiddleEnv(AbTree& tree, int p, tm::Transaction& x) : t(tree), pid(p), txn(x) { t.domain_.table(pid).clear(); }

    uint64_t load(tm::Word& w) { return txn.read(w); }
    std::optional<llx::Snapshot> llx(Node* n) {
      auto r = t.domain_.llx_htm(pid, n, txn);
      if (!r.ok()) return std::nullopt;
      return r.snapshot;
    }
    template <class... A>
    Node* make(A&&... a) {
      ++t.allocs_[pid].n;
      return t.reclaimer_.template alloc_in<Node>(txn, pid, std::forward<A>(a)...);
    }
    bool scx(std::span<llx::DataRecord* const> v, std::span<llx::DataRecord* const> r, llx::FieldRef fld, Node* n) {
      t.domain_.scx_htm(pid, txn, v, r, fld, ref(n));
      for (llx::DataRecord* x : r) t.reclaimer_.retire_in(txn, pid, static_cast<Node*>(x));
      return true;
    }
  };

  struct FallbackEnv {
    AbTree& t;
    int pid;
    std::array<Node*, 4> fresh{};
    std::size_t nfresh = 0;

    FallbackEnv(AbTree& tree, int p) : t(tree), pid(p) { t.domain_.table(pid).clear(); }

    uint64_t load(tm::Word& w) { return w.load(); }
    std::optional<llx::Snapshot> llx(Node* n) {
      auto r = t.domain_.llx_o(pid, n);
      if (!r.ok()) return std::nullopt;
      return r.snapshot;
    }
    template <class... A>
    Node* make(A&&... a) {
      ++t.allocs_[pid].n;
      return fresh[nfresh++] = new Node(std::forward<A>(a)...);
    }
    bool scx(std::span<llx::DataRecord* const> v, std::span<llx::DataRecord* const> r, llx::FieldRef fld, Node* n) {
      if (!t.domain_.scx_o(pid, v, r, fld, ref(n))) {
        for (std::size_t i = 0; i < nfresh; ++i) delete fresh[i];
        nfresh = 0;
        return false;
      }
      for (llx::DataRecord* x : r) t.reclaimer_.retire(pid, static_cast<Node*>(x));
      nfresh = 0;
      return true;
    }
  };

  template <class Env>
  auto search_load(Env& env) {
    return [this, &env](tm::Word& w) { return cfg_.search_outside_txn ? w.load() : env.load(w); };
  }

  // ---- Sequential updates (fast path, and TLE under the lock) -------------

  template <class Env>
  std::optional<Found> seq_search(Env& env, Key key) {
    Found f = search(key, search_load(env));
    if (cfg_.search_outside_txn) {
      env.check_unmarked(f.p);
      env.check_unmarked(f.n);
      if (env.load(f.p->slots[f.pidx]) != ref(f.n)) return std::nullopt;
    }
    return f;
  }

  // Position of the first key >= `key` among the first `size` leaf keys.
  template <class Env>
  static uint32_t leaf_lower_bound(Env& env, Node* l, uint32_t size, Key key) {
    uint32_t lo = 0;
    uint32_t hi = size;
    while (lo < hi) {
      const uint32_t mid = (lo + hi) / 2;
      if (env.load(l->slots[mid]) < key) {
        lo = mid + 1;
      } else {
        hi = mid;
      }
    }
    return lo;
  }

  template <class Env>
  std::optional<Update> insert_seq(Env& env, Key key, Value value) {
    const auto f = seq_search(env, key);
    if (!f) return std::nullopt;
    Node* l = f->n;
    const uint32_t size = degree_of(l, [&](tm::Word& w) { return env.load(w); });
    const uint32_t pos = leaf_lower_bound(env, l, size, key);
    if (pos < size && env.load(l->slots[pos]) == key) {
      env.store(l->values[pos], value);
      return Update{false, false};
    }
    if (size < cfg_.b) {
      for (uint32_t i = size; i > pos; --i) {
        env.store(l->slots[i], env.load(l->slots[i - 1]));
        env.store(l->values[i], env.load(l->values[i - 1]));
      }
      env.store(l->slots[pos], key);
      env.store(l->values[pos], value);
      env.store(l->size, size + 1);
      return Update{true, false};
    }
    LeafData d;
    d.size = size + 1;
    for (uint32_t i = 0, j = 0; i < d.size; ++i) {
      if (i == pos) {
        d.keys[i] = key;
        d.vals[i] = value;
      } else {
        d.keys[i] = env.load(l->slots[j]);
        d.vals[i] = env.load(l->values[j]);
        ++j;
      }
    }
    const uint32_t nl = (d.size + 1) / 2;
    for (uint32_t i = pos; i < nl; ++i) {
      env.store(l->slots[i], d.keys[i]);
      env.store(l->values[i], d.vals[i]);
    }
    env.store(l->size, nl);
    Node* sibling = make_leaf(env, d, nl, d.size);
    const bool tag = f->p != entry_;
    const Key sep = d.keys[nl];
    const std::array<uint64_t, 2> kids{ref(l), ref(sibling)};
    Node* top = make_internal(env, tag, &sep, 1, kids.data(), 2);
    env.store(f->p->slots[f->pidx], ref(top));
    return Update{true, tag};
  }

  template <class Env>
  std::optional<Update> remove_seq(Env& env, Key key) {
    const auto f = seq_search(env, key);
    if (!f) return std::nullopt;
    Node* l = f->n;
    const uint32_t size = degree_of(l, [&](tm::Word& w) { return env.load(w); });
    const uint32_t pos = leaf_lower_bound(env, l, size, key);
    if (pos == size || env.load(l->slots[pos]) != key) return Update{false, false};
    for (uint32_t i = pos; i + 1 < size; ++i) {
      env.store(l->slots[i], env.load(l->slots[i + 1]));
      env.store(l->values[i], env.load(l->values[i + 1]));
    }
    env.store(l->size, size - 1);
    return Update{true, f->p != entry_ && size - 1 < cfg_.a};
  }

  // ---- Template updates (middle and fallback paths) -------------------------

  template <class Env>
  std::optional<Update> insert_tmpl(Env& env, Key key, Value value) {
    const Found f = search(key, search_load(env));
    auto sp = env.llx(f.p);
    if (!sp || (*sp)[f.pidx] != ref(f.n)) return std::nullopt;
    if (!env.llx(f.n)) return std::nullopt;
    LeafData d = read_leaf(env, f.n);
    const uint32_t pos =
        static_cast<uint32_t>(std::lower_bound(d.keys.begin(), d.keys.begin() + d.size, key) - d.keys.begin());
    const std::array<llx::DataRecord*, 2> v{f.p, f.n};
    const std::array<llx::DataRecord*, 1> r{f.n};
    const llx::FieldRef fld{f.p, f.pidx};
    if (pos < d.size && d.keys[pos] == key) {
      d.vals[pos] = value;
      if (!env.scx(v, r, fld, make_leaf(env, d, 0, d.size))) return std::nullopt;
      return Update{false, false};
    }
    for (uint32_t i = d.size; i > pos; --i) {
      d.keys[i] = d.keys[i - 1];
      d.vals[i] = d.vals[i - 1];
    }
    d.keys[pos] = key;
    d.vals[pos] = value;
    ++d.size;
    if (d.size <= cfg_.b) {
      if (!env.scx(v, r, fld, make_leaf(env, d, 0, d.size))) return std::nullopt;
      return Update{true, false};
    }
    const uint32_t nl = (d.size + 1) / 2;
    Node* left = make_leaf(env, d, 0, nl);
    Node* right = make_leaf(env, d, nl, d.size);
    const bool tag = f.p != entry_;
    const Key sep = d.keys[nl];
    const std::array<uint64_t, 2> kids{ref(left), ref(right)};
    if (!env.scx(v, r, fld, make_internal(env, tag, &sep, 1, kids.data(), 2))) return std::nullopt;
    return Update{true, tag};
  }

  template <class Env>
  std::optional<Update> remove_tmpl(Env& env, Key key) {
    const Found f = search(key, search_load(env));
    auto sp = env.llx(f.p);
    if (!sp || (*sp)[f.pidx] != ref(f.n)) return std::nullopt;
    if (!env.llx(f.n)) return std::nullopt;
    LeafData d = read_leaf(env, f.n);
    const uint32_t pos =
        static_cast<uint32_t>(std::lower_bound(d.keys.begin(), d.keys.begin() + d.size, key) - d.keys.begin());
    if (pos == d.size || d.keys[pos] != key) return Update{false, false};
    for (uint32_t i = pos; i + 1 < d.size; ++i) {
      d.keys[i] = d.keys[i + 1];
      d.vals[i] = d.vals[i + 1];
    }
    --d.size;
    const std::array<llx::DataRecord*, 2> v{f.p, f.n};
    const std::array<llx::DataRecord*, 1> r{f.n};
    if (!env.scx(v, r, llx::FieldRef{f.p, f.pidx}, make_leaf(env, d, 0, d.size))) return std::nullopt;
    return Update{true, f.p != entry_ && d.size < cfg_.a};
  }

  // ---- Rebalancing (all paths) ----------------------------------------------

  template <class Env>
  std::optional<bool> step(Env& env, Key key) {
    const auto [f, v] = find_violation(key, search_load(env));
    if (v == Violation::None) return false;
    if (v == Violation::Tag) return fix_tag(env, f);
    return fix_degree(env, f);
  }

  template <class Env>
  std::optional<bool> fix_tag(Env& env, const Found& f) {
    Node* t = f.n;
    Node* p = f.p;
    if (p == entry_) {
      auto sp = env.llx(p);
      if (!sp || (*sp)[0] != ref(t)) return std::nullopt;
      auto st = env.llx(t);
      if (!st) return std::nullopt;
      std::array<uint64_t, MaxDegree> cs{};
      for (uint32_t i = 0; i < t->degree; ++i) cs[i] = (*st)[i];
      Node* copy = make_internal(env, false, t->keys.data(), t->degree - 1, cs.data(), t->degree);
      const std::array<llx::DataRecord*, 2> v{p, t};
      const std::array<llx::DataRecord*, 1> r{t};
      if (!env.scx(v, r, llx::FieldRef{p, 0}, copy)) return std::nullopt;
      return true;
    }
    auto sg = env.llx(f.gp);
    if (!sg || (*sg)[f.gpidx] != ref(p)) return std::nullopt;
    auto sp = env.llx(p);
    if (!sp || (*sp)[f.pidx] != ref(t)) return std::nullopt;
    return fix_tag_under(env, f.gp, f.gpidx, p, *sp, f.pidx, t);
  }

  // Absorbs tagged child `t` (slot `tidx` of `p`) into p, splitting p if the
  // result would exceed b. gp and p must already be LLXed.
  template <class Env, class View>
  std::optional<bool> fix_tag_under(Env& env, Node* gp, uint32_t gpidx, Node* p, const View& sp, uint32_t tidx,
                                    Node* t) {
    if (p->tagged) return std::nullopt;
    auto st = env.llx(t);
    if (!st) return std::nullopt;
    std::array<Key, 2 * MaxDegree> ks{};
    std::array<uint64_t, 2 * MaxDegree> cs{};
    uint32_t nk = 0;
    uint32_t nc = 0;
    for (uint32_t i = 0; i < p->degree; ++i) {
      if (i == tidx) {
        for (uint32_t j = 0; j < t->degree; ++j) cs[nc++] = (*st)[j];
        for (uint32_t j = 0; j + 1 < t->degree; ++j) ks[nk++] = t->keys[j];
      } else {
        cs[nc++] = sp[i];
      }
      if (i + 1 < p->degree) ks[nk++] = p->keys[i];
    }
    const std::array<llx::DataRecord*, 3> v{gp, p, t};
    const std::array<llx::DataRecord*, 2> r{p, t};
    const llx::FieldRef fld{gp, gpidx};
    Node* replacement;
    if (nc <= cfg_.b) {
      replacement = make_internal(env, false, ks.data(), nk, cs.data(), nc);
    } else {
      const uint32_t nl = (nc + 1) / 2;
      Node* left = make_internal(env, false, ks.data(), nl - 1, cs.data(), nl);
      Node* right = make_internal(env, false, ks.data() + nl, nk - nl, cs.data() + nl, nc - nl);
      const std::array<uint64_t, 2> kids{ref(left), ref(right)};
      replacement = make_internal(env, gp != entry_, &ks[nl - 1], 1, kids.data(), 2);
    }
    if (!env.scx(v, r, fld, replacement)) return std::nullopt;
    return true;
  }

  template <class Env>
  std::optional<bool> fix_degree(Env& env, const Found& f) {
    Node* u = f.n;
    Node* p = f.p;
    Node* gp = f.gp;
    auto sg = env.llx(gp);
    if (!sg || (*sg)[f.gpidx] != ref(p)) return std::nullopt;
    auto sp = env.llx(p);
    if (!sp || (*sp)[f.pidx] != ref(u)) return std::nullopt;
    if (p->tagged || u->tagged || p->degree < 2) return std::nullopt;
    const uint32_t sidx = f.pidx > 0 ? f.pidx - 1 : f.pidx + 1;
    Node* s = deref((*sp)[sidx]);
    if (s->tagged) return fix_tag_under(env, gp, f.gpidx, p, *sp, sidx, s);
    auto su = env.llx(u);
    if (!su) return std::nullopt;
    auto ss = env.llx(s);
    if (!ss) return std::nullopt;
    if (s->leaf != u->leaf) return std::nullopt;
    if (degree_of(u, [&](tm::Word& w) { return env.load(w); }) >= cfg_.a) return std::nullopt;

    const uint32_t lidx = std::min(f.pidx, sidx);
    Node* l = lidx == f.pidx ? u : s;
    Node* r = lidx == f.pidx ? s : u;
    const bool join_root = gp == entry_ && p->degree == 2;
    Node* left = nullptr;
    Node* right = nullptr;
    Key sep = 0;
    if (u->leaf) {
      const LeafData dl = read_leaf(env, l);
      const LeafData dr = read_leaf(env, r);
      LeafData d = dl;
      for (uint32_t i = 0; i < dr.size; ++i) {
        d.keys[d.size] = dr.keys[i];
        d.vals[d.size] = dr.vals[i];
        ++d.size;
      }
      if (d.size < 2 * cfg_.a) {
        left = make_leaf(env, d, 0, d.size);
      } else {
        const uint32_t nl = (d.size + 1) / 2;
        left = make_leaf(env, d, 0, nl);
        right = make_leaf(env, d, nl, d.size);
        sep = d.keys[nl];
      }
    } else {
      const auto& sl = lidx == f.pidx ? *su : *ss;
      const auto& sr = lidx == f.pidx ? *ss : *su;
      std::array<Key, 2 * MaxDegree> ks{};
      std::array<uint64_t, 2 * MaxDegree> cs{};
      uint32_t nk = 0;
      uint32_t nc = 0;
      for (uint32_t i = 0; i < l->degree; ++i) cs[nc++] = sl[i];
      for (uint32_t i = 0; i + 1 < l->degree; ++i) ks[nk++] = l->keys[i];
      ks[nk++] = p->keys[lidx];
      for (uint32_t i = 0; i < r->degree; ++i) cs[nc++] = sr[i];
      for (uint32_t i = 0; i + 1 < r->degree; ++i) ks[nk++] = r->keys[i];
      if (nc < 2 * cfg_.a) {
        left = make_internal(env, false, ks.data(), nk, cs.data(), nc);
      } else {
        const uint32_t nl = (nc + 1) / 2;
        left = make_internal(env, false, ks.data(), nl - 1, cs.data(), nl);
        right = make_internal(env, false, ks.data() + nl, nk - nl, cs.data() + nl, nc - nl);
        sep = ks[nl - 1];
      }
    }

    Node* replacement;
    if (!right && join_root) {
      replacement = left;
    } else {
      std::array<Key, MaxDegree> pk{};
      std::array<uint64_t, MaxDegree> pc{};
      uint32_t nk = 0;
      uint32_t nc = 0;
      for (uint32_t i = 0; i < p->degree; ++i) {
        if (i == lidx) {
          pc[nc++] = ref(left);
          if (right) {
            pc[nc++] = ref(right);
            pk[nk++] = sep;
          }
          ++i;
          if (i + 1 < p->degree) pk[nk++] = p->keys[i];
          continue;
        }
        pc[nc++] = (*sp)[i];
        if (i + 1 < p->degree) pk[nk++] = p->keys[i];
      }
      replacement = make_internal(env, false, pk.data(), nk, pc.data(), nc);
    }
    const std::array<llx::DataRecord*, 4> v{gp, p, l, r};
    const std::array<llx::DataRecord*, 3> rr{p, l, r};
    if (!env.scx(v, rr, llx::FieldRef{gp, f.gpidx}, replacement)) return std::nullopt;
    return true;
  }

  void cleanup(int pid, Key key) {
    StepOp op{*this, pid, key};
    while (runtime_.run(pid, op)) {
    }
  }

  // ---- Operations -----------------------------------------------------------

  struct InsertOp {
    using Result = Update;
    AbTree& t;
    int pid;
    Key key;
    Value value;

    std::optional<Update> fast(tm::Transaction& txn) {
      TxnSeq env{t, pid, txn};
      return t.insert_seq(env, key, value);
    }
    std::optional<Update> middle(tm::Transaction& txn) {
      MiddleEnv env(t, pid, txn);
      return t.insert_tmpl(env, key, value);
    }
    std::optional<Update> fallback() {
      FallbackEnv env(t, pid);
      return t.insert_tmpl(env, key, value);
    }
    std::optional<Update> locked() {
      DirectSeq env{t, pid};
      return t.insert_seq(env, key, value);
    }
  };

  struct RemoveOp {
    using Result = Update;
    AbTree& t;
    int pid;
    Key key;

    std::optional<Update> fast(tm::Transaction& txn) {
      TxnSeq env{t, pid, txn};
      return t.remove_seq(env, key);
    }
    std::optional<Update> middle(tm::Transaction& txn) {
      MiddleEnv env(t, pid, txn);
      return t.remove_tmpl(env, key);
    }
    std::optional<Update> fallback() {
      FallbackEnv env(t, pid);
      return t.remove_tmpl(env, key);
    }
    std::optional<Update> locked() {
      DirectSeq env{t, pid};
      return t.remove_seq(env, key);
    }
  };

  struct StepOp {
    using Result = bool;
    static constexpr bool kAuxiliary = true;
    AbTree& t;
    int pid;
    Key key;

    std::optional<bool> fast(tm::Transaction& txn) {
      TxnSeq env{t, pid, txn};
      return t.step(env, key);
    }
    std::optional<bool> middle(tm::Transaction& txn) {
      MiddleEnv env(t, pid, txn);
      return t.step(env, key);
    }
    std::optional<bool> fallback() {
      FallbackEnv env(t, pid);
      return t.step(env, key);
    }
    std::optional<bool> locked() {
      DirectSeq env{t, pid};
      return t.step(env, key);
    }
  };

  template <class Load>
  std::optional<Value> lookup(Key key, Load&& load) {
    Node* l = search(key, load).n;
    const uint32_t size = degree_of(l, load);
    for (uint32_t i = 0; i < size; ++i) {
      const Key k = load(l->slots[i]);
      if (k == key) return load(l->values[i]);
      if (k > key) break;
    }
    return std::nullopt;
  }

  struct FindOp {
    using Result = std::optional<Value>;
    AbTree& t;
    Key key;

    std::optional<Result> in_txn(tm::Transaction& txn) {
      return std::optional<Result>(std::in_place, t.lookup(key, [&](tm::Word& w) { return txn.read(w); }));
    }
    std::optional<Result> fast(tm::Transaction& txn) { return in_txn(txn); }
    std::optional<Result> middle(tm::Transaction& txn) { return in_txn(txn); }
    // Leaves change in place only on the fast path, which never overlaps
    // with this path.
    std::optional<Result> fallback() { return std::optional<Result>(std::in_place, t.lookup(key, plain_load)); }
    std::optional<Result> locked() { return std::optional<Result>(std::in_place, t.lookup(key, plain_load)); }
  };

  static bool child_overlaps(const Node* n, uint32_t i, Key lo, Key hi) {
    return (i == 0 || n->keys[i - 1] < hi) && (i + 1 == n->degree || lo < n->keys[i]);
  }

  template <class Load>
  void collect_range(Node* n, Key lo, Key hi, std::vector<KeyValue>& out, Load&& load) {
    if (n->leaf) {
      const uint32_t size = degree_of(n, load);
      for (uint32_t i = 0; i < size; ++i) {
        const Key k = load(n->slots[i]);
        if (k >= hi) break;
        if (k >= lo) out.emplace_back(k, load(n->values[i]));
      }
      return;
    }
    for (uint32_t i = 0; i < n->degree; ++i) {
      if (child_overlaps(n, i, lo, hi)) collect_range(deref(load(n->slots[i])), lo, hi, out, load);
    }
  }

  // Fallback range query: LLX every node of the covering subtree, then check
  // that none of their info words changed.
  std::optional<std::vector<KeyValue>> range_validated(int pid, Key lo, Key hi) {
    std::vector<KeyValue> out;
    std::vector<std::pair<Node*, llx::InfoValue>> seen;
    std::vector<Node*> stack{entry_};
    llx::DirectAccess acc;
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      auto r = domain_.llx_unlinked(pid, n, acc);
      if (!r.ok()) return std::nullopt;
      seen.emplace_back(n, r.info);
      if (n->leaf) {
        const uint32_t size = degree_of(n, plain_load);
        for (uint32_t i = 0; i < size; ++i) {
          const Key k = n->slots[i].load();
          if (k >= lo && k < hi) out.emplace_back(k, n->values[i].load());
        }
        continue;
      }
      for (uint32_t i = n->degree; i-- > 0;) {
        if (child_overlaps(n, i, lo, hi)) stack.push_back(deref(r[i]));
      }
    }
    for (const auto& [n, info] : seen) {
      if (n->info.load() != info) return std::nullopt;
    }
    return out;
  }

  struct RangeOp {
    using Result = std::vector<KeyValue>;
    AbTree& t;
    int pid;
    Key lo;
    Key hi;

    std::optional<Result> in_txn(tm::Transaction& txn) {
      Result out;
      t.collect_range(t.entry_, lo, hi, out, [&](tm::Word& w) { return txn.read(w); });
      return out;
    }
    std::optional<Result> fast(tm::Transaction& txn) { return in_txn(txn); }
    std::optional<Result> middle(tm::Transaction& txn) { return in_txn(txn); }
    std::optional<Result> fallback() { return t.range_validated(pid, lo, hi); }
    std::optional<Result> locked() {
      Result out;
      t.collect_range(t.entry_, lo, hi, out, plain_load);
      return out;
    }
  };

  // ---- Quiescent helpers ----------------------------------------------------

  bool violates(const Node* n, bool is_root) const {
    if (n->tagged) return true;
    if (is_root) return false;
    const uint64_t deg = n->leaf ? n->size.peek() : n->degree;
    return deg < cfg_.a;
  }

  // A key whose search path meets a violation.
  std::optional<Key> any_violation() const {
    struct Item {
      const Node* n;
      Key lo;
      bool is_root;
    };
    std::vector<Item> stack{{root(), 0, true}};
    while (!stack.empty()) {
      const Item it = stack.back();
      stack.pop_back();
      if (violates(it.n, it.is_root)) return it.lo;
      if (it.n->leaf) continue;
      for (uint32_t i = 0; i < it.n->degree; ++i) {
        stack.push_back({deref(it.n->slots[i].peek()), i == 0 ? it.lo : it.n->keys[i - 1], false});
      }
    }
    return std::nullopt;
  }

  void count_violations(const Node* n, bool is_root, std::size_t& count) const {
    if (violates(n, is_root)) ++count;
    if (n->leaf) return;
    for (uint32_t i = 0; i < n->degree; ++i) count_violations(deref(n->slots[i].peek()), false, count);
  }

  static void collect(const Node* n, std::vector<KeyValue>& out) {
    if (n->leaf) {
      const uint64_t size = n->size.peek();
      for (uint64_t i = 0; i < size; ++i) out.emplace_back(n->slots[i].peek(), n->values[i].peek());
      return;
    }
    for (uint32_t i = 0; i < n->degree; ++i) collect(deref(n->slots[i].peek()), out);
  }

  static void free_subtree(Node* n) {
    std::vector<Node*> stack{n};
    while (!stack.empty()) {
      Node* x = stack.back();
      stack.pop_back();
      if (!x->leaf) {
        for (uint32_t i = 0; i < x->degree; ++i) stack.push_back(deref(x->slots[i].peek()));
      }
      delete x;
    }
  }

  struct Bound {
    bool set = false;
    Key key = 0;
  };

  struct Walk {
    bool have_prev = false;
    Key prev = 0;
    std::optional<std::size_t> leaf_depth;
  };

  static uint64_t poison_word() {
    uint64_t w;
    std::memset(&w, reclaim::kPoisonByte, sizeof w);
    return w;
  }

  static std::string describe(const Node* n) {
    if (n->leaf) {
      const uint64_t size = n->size.peek();
      return "leaf" + (size > 0 ? " starting at " + std::to_string(n->slots[0].peek()) : std::string(" (empty)"));
    }
    return "internal node" + (n->degree > 1 ? " with first key " + std::to_string(n->keys[0]) : std::string());
  }

  void validate_node(const Node* n, std::size_t depth, Bound lo, Bound hi, bool is_root, Walk& w,
                     std::vector<std::string>& errs) const {
    if (n->info.peek() == poison_word() || n->marked.peek() != 0) {
      errs.push_back("reachable " + describe(n) + " is marked or freed");
      return;
    }
    if (n->tagged) errs.push_back("tagged " + describe(n));
    auto in_bounds = [&](Key k) { return (!lo.set || k >= lo.key) && (!hi.set || k < hi.key); };
    if (n->leaf) {
      const uint64_t size = n->size.peek();
      if (size > cfg_.b) {
        errs.push_back(describe(n) + " holds " + std::to_string(size) + " pairs");
        return;
      }
      if (!is_root && size < cfg_.a) errs.push_back(describe(n) + " is underfull (" + std::to_string(size) + ")");
      for (uint64_t i = 0; i < size; ++i) {
        const Key k = n->slots[i].peek();
        if (!in_bounds(k)) errs.push_back("key " + std::to_string(k) + " is outside its leaf's range");
        if (w.have_prev && k <= w.prev) errs.push_back("leaf keys not increasing at " + std::to_string(k));
        w.prev = k;
        w.have_prev = true;
      }
      if (!w.leaf_depth) {
        w.leaf_depth = depth;
      } else if (*w.leaf_depth != depth) {
        errs.push_back(describe(n) + " is at depth " + std::to_string(depth) + ", expected " +
                       std::to_string(*w.leaf_depth));
      }
      return;
    }
    const uint32_t deg = n->degree;
    if (deg > cfg_.b || deg < 2 || (!is_root && deg < cfg_.a)) {
      errs.push_back(describe(n) + " has degree " + std::to_string(deg));
    }
    for (uint32_t i = 0; i + 1 < deg; ++i) {
      if (!in_bounds(n->keys[i])) errs.push_back("routing key " + std::to_string(n->keys[i]) + " is out of range");
      if (i > 0 && n->keys[i] <= n->keys[i - 1]) errs.push_back(describe(n) + " has unsorted routing keys");
    }
    for (uint32_t i = 0; i < deg; ++i) {
      const Node* c = deref(n->slots[i].peek());
      if (!c) {
        errs.push_back(describe(n) + " lacks child " + std::to_string(i));
        continue;
      }
      const Bound clo = i == 0 ? lo : Bound{true, n->keys[i - 1]};
      const Bound chi = i + 1 == deg ? hi : Bound{true, n->keys[i]};
      validate_node(c, depth + 1, clo, chi, false, w, errs);
    }
  }

  AbTreeConfig cfg_;
  tm::Engine engine_;
  PathRuntime runtime_;
  llx::Domain domain_;
  reclaim::EpochReclaimer reclaimer_;
  std::unique_ptr<Counter[]> allocs_;
  Node* entry_;
};

}  // namespace htmtree
