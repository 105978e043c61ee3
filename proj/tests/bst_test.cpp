#include <gtest/gtest.h>

#include <atomic>
#include <map>
#include <random>
#include <thread>

#include "htmtree/bst.hpp"

using namespace htmtree;

namespace {

struct Mode {
  PolicyKind policy;
  bool outside;
};

std::string mode_name(const ::testing::TestParamInfo<Mode>& info) {
  std::string n(to_string(info.param.policy));
  for (char& c : n) {
    if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
  }
  return "p" + n + (info.param.outside ? "_outside" : "_inside");
}

std::vector<Mode> all_modes() {
  std::vector<Mode> m;
  for (PolicyKind k : kAllPolicies) {
    m.push_back({k, false});
    m.push_back({k, true});
  }
  return m;
}

BstConfig config(PolicyKind k, bool outside = false, double spurious = 0.0) {
  BstConfig c;
  c.policy = k;
  c.search_outside_txn = outside;
  c.txn.spurious_abort_prob = spurious;
  return c;
}

BstNode* child(BstNode* n, int dir) { return reinterpret_cast<BstNode*>(n->child[dir].peek()); }

// The leaf holding `key`, found by a plain traversal.
BstNode* leaf_of(Bst& t, Key key) {
  BstNode* n = child(t.entry(), 0);
  while (!n->leaf) n = child(n, key < n->key ? 0 : 1);
  return n;
}

}  // namespace

TEST(Bst, EmptyTree) {
  Bst t;
  EXPECT_FALSE(t.find(5));
  EXPECT_TRUE(t.range_query(0, 100).empty());
  EXPECT_TRUE(t.validate().empty());
  EXPECT_EQ(t.size(), 0u);
  EXPECT_EQ(t.key_sum(), 0u);
  EXPECT_FALSE(t.remove(5));
}

TEST(Bst, InsertThenFind) {
  Bst t;
  EXPECT_TRUE(t.insert(5, 50));
  EXPECT_EQ(t.find(5), 50u);
  EXPECT_FALSE(t.insert(5, 51));
  EXPECT_EQ(t.find(5), 51u);
  EXPECT_TRUE(t.validate().empty());
}

TEST(Bst, RangeQuery) {
  Bst t;
  for (Key k : {1, 3, 5}) t.insert(k, k * 10);
  EXPECT_EQ(t.range_query(2, 6), (std::vector<KeyValue>{{3, 30}, {5, 50}}));
  EXPECT_TRUE(t.range_query(6, 6).empty());
  EXPECT_TRUE(t.range_query(5, 2).empty());
  EXPECT_EQ(t.range_query(0, 100).size(), 3u);
}

TEST(Bst, RejectsSentinelKeys) {
  Bst t;
  EXPECT_THROW(t.insert(Bst::kMaxKey + 1, 0), std::out_of_range);
  EXPECT_TRUE(t.insert(Bst::kMaxKey, 0));
}

TEST(Bst, DeleteAbsentKeyLeavesTreeUnchanged) {
  Bst t;
  for (Key k : {4, 2, 9}) t.insert(k, k);
  const uint64_t h = t.structure_hash();
  EXPECT_FALSE(t.remove(3));
  EXPECT_EQ(t.structure_hash(), h);
}

TEST(Bst, ValidatorNamesOutOfOrderNode) {
  Bst t;
  t.insert(1, 1);
  t.insert(5, 5);
  BstNode* parent = child(child(t.entry(), 0), 0);
  ASSERT_FALSE(parent->leaf);
  ASSERT_EQ(parent->key, 5u);
  BstNode* old = child(parent, 1);
  parent->child[1].store(reinterpret_cast<uint64_t>(new BstNode(4, 4)));
  delete old;
  const auto errs = t.validate();
  ASSERT_EQ(errs.size(), 1u);
  EXPECT_NE(errs[0].find("key 4"), std::string::npos) << errs[0];
}

TEST(Bst, FastPathAllocations) {
  Bst t(config(PolicyKind::ThreePath));
  t.insert(10, 1);
  uint64_t a = t.allocations();
  EXPECT_TRUE(t.insert(20, 2));
  EXPECT_EQ(t.allocations() - a, 2u);
  a = t.allocations();
  EXPECT_FALSE(t.insert(20, 3));
  EXPECT_EQ(t.allocations(), a);
  EXPECT_EQ(t.find(20), 3u);
  EXPECT_TRUE(t.remove(10));
  EXPECT_EQ(t.allocations(), a);
  EXPECT_EQ(t.runtime().stats()[Path::Fast].completions, 4u);
}

TEST(Bst, TemplatePathAllocations) {
  // NonHtm runs the fallback bodies; 2-path concurrent runs the middle
  // bodies in its transactions.
  for (PolicyKind k : {PolicyKind::NonHtm, PolicyKind::TwoPathConcurrent}) {
    Bst t(config(k));
    t.insert(10, 1);
    uint64_t a = t.allocations();
    EXPECT_TRUE(t.insert(20, 2));
    EXPECT_EQ(t.allocations() - a, 3u);
    a = t.allocations();
    BstNode* before = leaf_of(t, 20);
    EXPECT_FALSE(t.insert(20, 3));
    EXPECT_EQ(t.allocations() - a, 1u);
    EXPECT_NE(leaf_of(t, 20), before);
    a = t.allocations();
    EXPECT_TRUE(t.remove(10));
    EXPECT_EQ(t.allocations() - a, 1u);
    EXPECT_TRUE(t.validate().empty());
  }
}

TEST(Bst, FallbackDeleteGivesGrandparentFreshInfo) {
  Bst t(config(PolicyKind::NonHtm));
  for (Key k : {10, 20, 30}) t.insert(k, k);
  // Path to 30: entry -> inf1 internal -> 20 internal -> 30 internal -> leaf.
  BstNode* gp = child(child(t.entry(), 0), 0);
  ASSERT_EQ(gp->key, 20u);
  const uint64_t before = gp->info.load();
  EXPECT_TRUE(t.remove(30));
  const uint64_t after = gp->info.load();
  EXPECT_NE(after, before);
  EXPECT_FALSE(llx::is_tagged(after));
  EXPECT_TRUE(t.validate().empty());
}

TEST(Bst, OutsideModeFastDeleteMarksRemovedNodes) {
  BstConfig c = config(PolicyKind::ThreePath, true);
  c.reclaim.quarantine = true;
  Bst t(c);
  t.insert(1, 1);
  t.insert(2, 2);
  BstNode* leaf = leaf_of(t, 1);
  ASSERT_EQ(leaf->key, 1u);
  EXPECT_EQ(leaf->marked.load(), 0u);
  EXPECT_TRUE(t.remove(1));
  EXPECT_EQ(leaf->marked.load(), 1u);
  EXPECT_EQ(t.runtime().stats()[Path::Fast].completions, 3u);
}

TEST(Bst, TleAlwaysAbortingRunsUnderLock) {
  BstConfig c = config(PolicyKind::Tle, false, 1.0);
  Bst t(c);
  std::map<Key, Value> oracle;
  std::mt19937_64 rng(3);
  for (int i = 0; i < 2000; ++i) {
    const Key k = rng() % 64;
    if (rng() & 1) {
      ASSERT_EQ(t.insert(k, i), !oracle.contains(k));
      oracle[k] = i;
    } else {
      ASSERT_EQ(t.remove(k), oracle.erase(k) == 1);
    }
  }
  EXPECT_EQ(t.contents(), std::vector<KeyValue>(oracle.begin(), oracle.end()));
  EXPECT_EQ(t.runtime().stats()[Path::Fallback].completions, 2000u);
}

class BstModes : public ::testing::TestWithParam<Mode> {};

TEST_P(BstModes, MatchesSequentialOracle) {
  for (double spurious : {0.0, 0.6}) {
    Bst t(config(GetParam().policy, GetParam().outside, spurious));
    std::map<Key, Value> oracle;
    std::mt19937_64 rng(42);
    for (int i = 0; i < 20000; ++i) {
      const Key k = rng() % 256;
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
        ASSERT_EQ(t.range_query(k, hi),
                  std::vector<KeyValue>(oracle.lower_bound(k), oracle.lower_bound(hi)));
      }
    }
    EXPECT_TRUE(t.validate().empty());
    EXPECT_EQ(t.contents(), std::vector<KeyValue>(oracle.begin(), oracle.end()));
  }
}

// Concurrent updates with key-sum conservation, canary-checked values and a
// structural check at the end. Values are always 2*key, so any other value
// (such as the poison pattern of a freed node) is a use-after-free.
TEST_P(BstModes, ConcurrentKeySumAndNoFreedReads) {
  BstConfig c = config(GetParam().policy, GetParam().outside, 0.2);
  c.reclaim.quarantine = true;
  Bst t(c);
  tm::debug::set_yield_injection(0.005);
  constexpr int kThreads = 6;
  std::vector<uint64_t> sums(kThreads);
  std::atomic<int> bad{0};
  std::atomic<bool> stop{false};
  std::vector<std::thread> ts;
  for (int i = 0; i < kThreads; ++i) {
    ts.emplace_back([&, i] {
      std::mt19937_64 rng(i + 7);
      uint64_t s = 0;
      while (!stop) {
        const Key k = rng() % 128;
        const int op = static_cast<int>(rng() % 10);
        if (op < 4) {
          if (t.insert(k, 2 * k)) s += k;
        } else if (op < 8) {
          if (t.remove(k)) s -= k;
        } else if (op < 9) {
          const auto v = t.find(k);
          if (v && *v != 2 * k) bad++;
        } else {
          for (const auto& [key, v] : t.range_query(k, k + 32)) {
            if (v != 2 * key || key < k || key >= k + 32) bad++;
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
  EXPECT_TRUE(t.validate().empty());
  EXPECT_EQ(t.runtime().fast_commits_while_gate_closed(), 0u);
}

INSTANTIATE_TEST_SUITE_P(AllPolicies, BstModes, ::testing::ValuesIn(all_modes()), mode_name);

TEST(Bst, OutsideModeRestartsOnMarkedNodes) {
  Bst t(config(PolicyKind::ThreePath, true));
  tm::debug::set_yield_injection(0.05);
  std::vector<std::thread> ts;
  for (int i = 0; i < 4; ++i) {
    ts.emplace_back([&, i] {
      std::mt19937_64 rng(i);
      for (int n = 0; n < 20000; ++n) {
        const Key k = rng() % 16;
        if (rng() & 1) {
          t.insert(k, k);
        } else {
          t.remove(k);
        }
      }
    });
  }
  for (auto& th : ts) th.join();
  tm::debug::set_yield_injection(0);
  const auto s = t.runtime().stats();
  EXPECT_GT(s[Path::Fast].explicit_codes[llx::kNodeMarked] + s[Path::Fast].restarts, 0u);
  EXPECT_TRUE(t.validate().empty());
}
