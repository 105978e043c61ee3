#include <gtest/gtest.h>

#include <atomic>
#include <map>
#include <random>
#include <thread>

#include "htmtree/abtree.hpp"

using namespace htmtree;

namespace {

using Small = AbTree<4>;
using SmallNode = Small::Node;

AbTreeConfig small_config(PolicyKind k, bool outside = false) {
  AbTreeConfig c;
  c.policy = k;
  c.search_outside_txn = outside;
  c.a = 2;
  c.b = 4;
  return c;
}

template <class Node>
Node* kid(Node* n, std::size_t i) {
  return reinterpret_cast<Node*>(n->slots[i].peek());
}

template <class Tree>
typename Tree::Node* root_of(Tree& t) {
  return kid(t.entry(), 0);
}

struct Mode {
  PolicyKind policy;
  bool outside;
};

std::vector<Mode> all_modes() {
  std::vector<Mode> m;
  for (PolicyKind k : kAllPolicies) {
    m.push_back({k, false});
    m.push_back({k, true});
  }
  return m;
}

std::string mode_name(const ::testing::TestParamInfo<Mode>& info) {
  std::string n(to_string(info.param.policy));
  for (char& c : n) {
    if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
  }
  return "p" + n + (info.param.outside ? "_outside" : "_inside");
}

}  // namespace

TEST(AbTree, EmptyTree) {
  AbTree<> t;
  EXPECT_FALSE(t.find(1));
  EXPECT_TRUE(t.range_query(0, 10).empty());
  EXPECT_TRUE(t.validate().empty());
  EXPECT_EQ(t.height(), 0u);
  EXPECT_FALSE(t.remove(1));
}

TEST(AbTree, DefaultsAndConfigChecks) {
  AbTreeConfig c;
  EXPECT_EQ(c.a, 6u);
  EXPECT_EQ(c.b, 16u);
  c.a = 9;
  EXPECT_THROW(AbTree<>{c}, std::invalid_argument);
  c.a = 2;
  c.b = 17;
  EXPECT_THROW(AbTree<>{c}, std::invalid_argument);
}

TEST(AbTree, InsertFindRange) {
  AbTree<> t;
  for (Key k : {1, 3, 5}) EXPECT_TRUE(t.insert(k, k * 10));
  EXPECT_FALSE(t.insert(3, 31));
  EXPECT_EQ(t.find(3), 31u);
  EXPECT_EQ(t.range_query(2, 6), (std::vector<KeyValue>{{3, 31}, {5, 50}}));
  EXPECT_TRUE(t.remove(3));
  EXPECT_FALSE(t.find(3));
}

TEST(AbTree, DeleteAbsentKeyLeavesTreeUnchanged) {
  AbTree<> t;
  for (Key k = 0; k < 100; ++k) t.insert(k * 2, k);
  const uint64_t h = t.structure_hash();
  EXPECT_FALSE(t.remove(51));
  EXPECT_EQ(t.structure_hash(), h);
}

TEST(AbTree, FastPathAllocations) {
  Small t(small_config(PolicyKind::ThreePath));
  uint64_t a = t.allocations();
  for (Key k : {1, 2, 3, 4}) t.insert(k, k);
  EXPECT_EQ(t.allocations(), a);
  EXPECT_FALSE(t.insert(2, 9));
  EXPECT_TRUE(t.remove(4));
  EXPECT_EQ(t.allocations(), a);
  t.insert(4, 4);
  // A full leaf keeps its lower half in place and gains a sibling and parent.
  a = t.allocations();
  t.set_auto_rebalance(false);
  EXPECT_TRUE(t.insert(5, 5));
  EXPECT_EQ(t.allocations() - a, 2u);
}

TEST(AbTree, TemplatePathSplitCreatesThreeNodes) {
  Small t(small_config(PolicyKind::NonHtm));
  t.set_auto_rebalance(false);
  uint64_t a = t.allocations();
  t.insert(1, 1);
  EXPECT_EQ(t.allocations() - a, 1u);
  for (Key k : {2, 3, 4}) t.insert(k, k);
  a = t.allocations();
  // Splitting the full root leaf grows the tree by one level, untagged.
  EXPECT_TRUE(t.insert(5, 5));
  EXPECT_EQ(t.allocations() - a, 3u);
  EXPECT_EQ(t.height(), 1u);
  EXPECT_TRUE(t.validate().empty());

  SmallNode* root = root_of(t);
  ASSERT_EQ(root->degree, 2u);
  EXPECT_EQ(kid(root, 0)->size.peek(), 3u);
  EXPECT_EQ(kid(root, 1)->size.peek(), 2u);

  // Fill the right leaf and split it below the root: a tagged node appears.
  t.insert(6, 6);
  t.insert(7, 7);
  a = t.allocations();
  EXPECT_TRUE(t.insert(8, 8));
  EXPECT_EQ(t.allocations() - a, 3u);
  root = root_of(t);
  SmallNode* tagged = kid(root, 1);
  ASSERT_FALSE(tagged->leaf);
  EXPECT_TRUE(tagged->tagged);
  EXPECT_EQ(kid(tagged, 0)->size.peek(), 3u);
  EXPECT_EQ(kid(tagged, 1)->size.peek(), 2u);
  EXPECT_EQ(t.violation_count(), 1u);
  EXPECT_FALSE(t.validate().empty());

  // Absorbing the tagged child into the root removes the violation without
  // changing the height.
  EXPECT_TRUE(t.rebalance_step(8));
  EXPECT_EQ(t.violation_count(), 0u);
  EXPECT_EQ(t.height(), 1u);
  EXPECT_EQ(root_of(t)->degree, 3u);
  EXPECT_TRUE(t.validate().empty());
  EXPECT_FALSE(t.rebalance_step(8));
  EXPECT_EQ(t.contents().size(), 8u);
}

TEST(AbTree, UnderfullLeafSharesWithLargerSibling) {
  Small t(small_config(PolicyKind::NonHtm));
  for (Key k : {1, 2, 3, 4, 5}) t.insert(k, k);
  ASSERT_EQ(kid(root_of(t), 0)->size.peek(), 3u);
  t.set_auto_rebalance(false);
  EXPECT_TRUE(t.remove(4));
  EXPECT_EQ(t.violation_count(), 1u);
  EXPECT_TRUE(t.rebalance_step(5));
  SmallNode* root = root_of(t);
  ASSERT_EQ(root->degree, 2u);
  EXPECT_EQ(kid(root, 0)->size.peek(), 2u);
  EXPECT_EQ(kid(root, 1)->size.peek(), 2u);
  EXPECT_TRUE(t.validate().empty());
  EXPECT_EQ(t.contents(), (std::vector<KeyValue>{{1, 1}, {2, 2}, {3, 3}, {5, 5}}));
}

TEST(AbTree, UnderfullLeafJoinsMinimalSibling) {
  Small t(small_config(PolicyKind::NonHtm));
  for (Key k = 1; k <= 9; ++k) t.insert(k, k);
  t.drain();
  ASSERT_EQ(t.height(), 1u);
  SmallNode* root = root_of(t);
  const uint32_t degree = root->degree;
  ASSERT_GE(degree, 3u);
  // Shrink the first two leaves to exactly a = 2 keys.
  for (int leaf = 0; leaf < 2; ++leaf) {
    for (;;) {
      SmallNode* l = kid(root_of(t), leaf);
      if (l->size.peek() == 2) break;
      ASSERT_TRUE(t.remove(l->slots[l->size.peek() - 1].peek()));
      ASSERT_EQ(root_of(t)->degree, degree);
    }
  }
  t.set_auto_rebalance(false);
  const Key victim = kid(root_of(t), 0)->slots[0].peek();
  ASSERT_TRUE(t.remove(victim));
  EXPECT_EQ(t.violation_count(), 1u);
  EXPECT_TRUE(t.rebalance_step(victim));
  EXPECT_EQ(root_of(t)->degree, degree - 1);
  EXPECT_EQ(kid(root_of(t), 0)->size.peek(), 3u);
  EXPECT_TRUE(t.validate().empty());
}

TEST(AbTree, JoinUnderRootOfDegreeTwoShrinksHeight) {
  Small t(small_config(PolicyKind::NonHtm));
  for (Key k : {1, 2, 3, 4, 5}) t.insert(k, k);
  t.remove(3);
  ASSERT_EQ(t.height(), 1u);
  ASSERT_EQ(kid(root_of(t), 0)->size.peek(), 2u);
  ASSERT_EQ(kid(root_of(t), 1)->size.peek(), 2u);
  t.set_auto_rebalance(false);
  t.remove(5);
  EXPECT_TRUE(t.rebalance_step(5));
  EXPECT_EQ(t.height(), 0u);
  EXPECT_TRUE(t.validate().empty());
  EXPECT_EQ(t.contents(), (std::vector<KeyValue>{{1, 1}, {2, 2}, {4, 4}}));
}

TEST(AbTree, RandomInsertsThenDrainAreBalanced) {
  for (PolicyKind k : {PolicyKind::ThreePath, PolicyKind::NonHtm}) {
    AbTreeConfig c;
    c.policy = k;
    c.auto_rebalance = false;
    AbTree<> t(c);
    std::mt19937_64 rng(5);
    for (int i = 0; i < 10000; ++i) t.insert(rng() % 100000, i);
    t.drain();
    EXPECT_EQ(t.violation_count(), 0u);
    EXPECT_TRUE(t.validate().empty()) << t.validate().front();
  }
}

class AbModes : public ::testing::TestWithParam<Mode> {};

TEST_P(AbModes, MatchesSequentialOracle) {
  for (double spurious : {0.0, 0.6}) {
    AbTreeConfig c = small_config(GetParam().policy, GetParam().outside);
    c.txn.spurious_abort_prob = spurious;
    Small t(c);
    std::map<Key, Value> oracle;
    std::mt19937_64 rng(99);
    for (int i = 0; i < 20000; ++i) {
      const Key k = rng() % 300;
      const int op = static_cast<int>(rng() % 10);
      if (op < 4) {
        ASSERT_EQ(t.insert(k, i), !oracle.contains(k)) << "insert " << k << " at " << i;
        oracle[k] = i;
      } else if (op < 8) {
        ASSERT_EQ(t.remove(k), oracle.erase(k) == 1) << "remove " << k << " at " << i;
      } else if (op < 9) {
        const auto it = oracle.find(k);
        ASSERT_EQ(t.find(k), it == oracle.end() ? std::nullopt : std::optional<Value>(it->second));
      } else {
        const Key hi = k + rng() % 64;
        ASSERT_EQ(t.range_query(k, hi), std::vector<KeyValue>(oracle.lower_bound(k), oracle.lower_bound(hi)));
      }
    }
    EXPECT_EQ(t.violation_count(), 0u);
    EXPECT_TRUE(t.validate().empty());
    EXPECT_EQ(t.contents(), std::vector<KeyValue>(oracle.begin(), oracle.end()));
  }
}

TEST_P(AbModes, ConcurrentStressThenDrainIsBalanced) {
  AbTreeConfig c;
  c.policy = GetParam().policy;
  c.search_outside_txn = GetParam().outside;
  c.txn.spurious_abort_prob = 0.2;
  c.reclaim.quarantine = true;
  AbTree<> t(c);
  tm::debug::set_yield_injection(0.005);
  constexpr int kThreads = 6;
  std::vector<uint64_t> sums(kThreads);
  std::atomic<int> bad{0};
  std::atomic<bool> stop{false};
  std::vector<std::thread> ts;
  for (int i = 0; i < kThreads; ++i) {
    ts.emplace_back([&, i] {
      std::mt19937_64 rng(i + 11);
      uint64_t s = 0;
      while (!stop) {
        const Key k = rng() % 512;
        const int op = static_cast<int>(rng() % 10);
        if (op < 4) {
          if (t.insert(k, 2 * k)) s += k;
        } else if (op < 8) {
          if (t.remove(k)) s -= k;
        } else if (op < 9) {
          const auto v = t.find(k);
          if (v && *v != 2 * k) bad++;
        } else {
          Key prev = 0;
          bool first = true;
          for (const auto& [key, v] : t.range_query(k, k + 100)) {
            if (v != 2 * key || key < k || key >= k + 100 || (!first && key <= prev)) bad++;
            prev = key;
            first = false;
          }
        }
      }
      sums[i] = s;
    });
  }
  std::this_thread::sleep_for(std::chrono::milliseconds(250));
  stop = true;
  for (auto& th : ts) th.join();
  tm::debug::set_yield_injection(0);
  uint64_t total = 0;
  for (uint64_t s : sums) total += s;
  EXPECT_EQ(total, t.key_sum());
  EXPECT_EQ(bad.load(), 0);
  t.drain();
  const auto errs = t.validate();
  EXPECT_TRUE(errs.empty()) << errs.front();
  EXPECT_EQ(t.runtime().fast_commits_while_gate_closed(), 0u);
}

INSTANTIATE_TEST_SUITE_P(AllPolicies, AbModes, ::testing::ValuesIn(all_modes()), mode_name);
