#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "htmtree/abtree.hpp"
#include "htmtree/bst.hpp"
#include "htmtree/checker.hpp"

using namespace htmtree;
using namespace htmtree::check;

namespace {

Event ev(int tid, OpKind op, Key k, uint64_t inv, uint64_t res) {
  Event e;
  e.tid = tid;
  e.op = op;
  e.key = k;
  e.inv = inv;
  e.res = res;
  return e;
}

Event ins(int tid, Key k, Value v, bool flag, uint64_t inv, uint64_t res) {
  Event e = ev(tid, OpKind::Insert, k, inv, res);
  e.value = v;
  e.resp.flag = flag;
  return e;
}

Event rem(int tid, Key k, bool flag, uint64_t inv, uint64_t res) {
  Event e = ev(tid, OpKind::Remove, k, inv, res);
  e.resp.flag = flag;
  return e;
}

Event fnd(int tid, Key k, std::optional<Value> v, uint64_t inv, uint64_t res) {
  Event e = ev(tid, OpKind::Find, k, inv, res);
  e.resp.value = v;
  return e;
}

// Reference decision procedure: tries every permutation that respects
// real-time order and replays it on a plain map.
bool brute_force_linearizable(const History& h, const Oracle& initial) {
  std::vector<std::size_t> perm(h.size());
  std::iota(perm.begin(), perm.end(), 0);
  do {
    bool ok = true;
    for (std::size_t i = 0; i < perm.size() && ok; ++i) {
      for (std::size_t j = i + 1; j < perm.size() && ok; ++j) {
        if (h[perm[j]].res < h[perm[i]].inv) ok = false;
      }
    }
    if (!ok) continue;
    std::map<Key, Value> m = initial;
    for (std::size_t i : perm) {
      const Event& e = h[i];
      switch (e.op) {
        case OpKind::Insert: {
          const bool absent = !m.contains(e.key);
          m[e.key] = e.value;
          ok = ok && absent == e.resp.flag;
          break;
        }
        case OpKind::Remove: ok = ok && (m.erase(e.key) == 1) == e.resp.flag; break;
        case OpKind::Find: {
          const auto it = m.find(e.key);
          ok = ok && (it == m.end() ? !e.resp.value : e.resp.value == it->second);
          break;
        }
        case OpKind::Range: {
          std::vector<KeyValue> got;
          for (const auto& kv : m) {
            if (kv.first >= e.key && kv.first < e.hi) got.push_back(kv);
          }
          ok = ok && got == e.resp.items;
          break;
        }
      }
      if (!ok) break;
    }
    if (ok) return true;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return false;
}

// Random small history with random timestamps and random (mostly wrong)
// responses; each thread's events are sequential.
History random_history(std::mt19937_64& rng) {
  History h;
  const int threads = 1 + static_cast<int>(rng() % 3);
  std::vector<uint64_t> clock(threads, 0);
  const int n = 2 + static_cast<int>(rng() % 6);
  for (int i = 0; i < n; ++i) {
    const int t = static_cast<int>(rng() % threads);
    const uint64_t inv = clock[t] + 1 + rng() % 4;
    const uint64_t res = inv + rng() % 6;
    clock[t] = res;
    const Key k = rng() % 3;
    switch (rng() % 4) {
      case 0: h.push_back(ins(t, k, rng() % 3, rng() & 1, inv, res)); break;
      case 1: h.push_back(rem(t, k, rng() & 1, inv, res)); break;
      case 2: h.push_back(fnd(t, k, (rng() & 1) ? std::optional<Value>(rng() % 3) : std::nullopt, inv, res)); break;
      default: {
        Event e = ev(t, OpKind::Range, k, inv, res);
        e.hi = k + 1 + rng() % 3;
        if (rng() & 1) e.resp.items.push_back({k, rng() % 3});
        h.push_back(e);
      }
    }
  }
  return h;
}

}  // namespace

TEST(Checker, TextFormatRoundTrips) {
  Event r = ev(2, OpKind::Range, 1, 3, 6);
  r.hi = 4;
  r.resp.items = {{3, 30}};
  const History h{ins(0, 3, 30, true, 1, 4), fnd(1, 3, std::nullopt, 2, 5), r, rem(0, 3, false, 7, 8)};
  const std::string text = format_history(h);
  EXPECT_EQ(text,
            "0 insert 3 30 → true @1,4\n"
            "1 find 3 → absent @2,5\n"
            "2 range 1 4 → [(3,30)] @3,6\n"
            "0 remove 3 → false @7,8\n");
  const History back = parse_history(text);
  ASSERT_EQ(back.size(), h.size());
  EXPECT_EQ(format_history(back), text);
  EXPECT_THROW(parse_event("0 insert 3"), std::invalid_argument);
  EXPECT_THROW(parse_event("0 frob 3 → true @1,2"), std::invalid_argument);
}

TEST(Checker, SequentialHistoryIsLinearizable) {
  const History h{ins(0, 1, 10, true, 1, 2), fnd(0, 1, 10, 3, 4), rem(0, 1, true, 5, 6), fnd(0, 1, std::nullopt, 7, 8)};
  EXPECT_TRUE(check_linearizable(h).ok());
}

TEST(Checker, OverlapAllowsEitherOrder) {
  // The find overlaps the insert, so both answers are fine.
  EXPECT_TRUE(check_linearizable({ins(0, 1, 10, true, 1, 4), fnd(1, 1, 10, 2, 3)}).ok());
  EXPECT_TRUE(check_linearizable({ins(0, 1, 10, true, 1, 4), fnd(1, 1, std::nullopt, 2, 3)}).ok());
  // Once the insert has returned, the key must be visible.
  EXPECT_FALSE(check_linearizable({ins(0, 1, 10, true, 1, 2), fnd(1, 1, std::nullopt, 3, 4)}).ok());
}

TEST(Checker, LostInsertIsViolation) {
  // Two inserts of the same key both report that it was absent.
  const History h{ins(0, 5, 1, true, 1, 3), ins(1, 5, 2, true, 2, 4), fnd(2, 5, 2, 5, 6)};
  const Verdict v = check_linearizable(h);
  EXPECT_EQ(v.kind, Verdict::Kind::Violation);
  EXPECT_EQ(v.witness.size(), 1u);
  EXPECT_NE(v.message.find("longest legal prefix"), std::string::npos);
}

TEST(Checker, InitialContentsAreRespected) {
  const History h{fnd(0, 4, 40, 1, 2)};
  EXPECT_FALSE(check_linearizable(h).ok());
  EXPECT_TRUE(check_linearizable(h, {{4, 40}}).ok());
}

TEST(Checker, BudgetExceeded) {
  History big;
  for (uint64_t i = 0; i <= kMaxCheckOps; ++i) big.push_back(fnd(0, 1, std::nullopt, 2 * i + 1, 2 * i + 2));
  EXPECT_EQ(check_linearizable(big).kind, Verdict::Kind::BudgetExceeded);
  EXPECT_EQ(check_linearizable({fnd(3, 1, std::nullopt, 1, 2)}).kind, Verdict::Kind::BudgetExceeded);
}

TEST(Checker, AgreesWithBruteForce) {
  std::mt19937_64 rng(2024);
  int positives = 0;
  for (int i = 0; i < 4000; ++i) {
    const History h = random_history(rng);
    Oracle init;
    if (rng() & 1) init[rng() % 3] = rng() % 3;
    const bool expect = brute_force_linearizable(h, init);
    positives += expect;
    ASSERT_EQ(check_linearizable(h, init).ok(), expect) << format_history(h);
  }
  EXPECT_GT(positives, 100);
  EXPECT_LT(positives, 3900);
}

TEST(Checker, RecorderStampsEveryEvent) {
  Bst t;
  Recorder rec(1);
  EXPECT_TRUE(rec.insert(0, t, 3, 30));
  EXPECT_EQ(rec.find(0, t, 3), 30u);
  EXPECT_EQ(rec.range(0, t, 0, 10), (std::vector<KeyValue>{{3, 30}}));
  EXPECT_TRUE(rec.remove(0, t, 3));
  const History h = rec.merged();
  ASSERT_EQ(h.size(), 4u);
  for (std::size_t i = 0; i < h.size(); ++i) {
    EXPECT_LT(h[i].inv, h[i].res);
    if (i) {
      EXPECT_LT(h[i - 1].res, h[i].inv);
    }
  }
  EXPECT_TRUE(check_linearizable(h).ok());
}

TEST(Checker, RandomHistoriesOnCorrectTreesPass) {
  for (PolicyKind k : {PolicyKind::ThreePath, PolicyKind::NonHtm, PolicyKind::Tle}) {
    for (uint64_t seed = 1; seed <= 60; ++seed) {
      BstConfig bc;
      bc.policy = k;
      bc.txn.spurious_abort_prob = 0.3;
      Bst b(bc);
      const RecordedHistory rb = record_random_history(b, seed);
      const Verdict vb = check_linearizable(rb.history, rb.initial);
      ASSERT_TRUE(vb.ok()) << vb.message;

      AbTreeConfig ac;
      ac.policy = k;
      ac.a = 2;
      ac.b = 4;
      ac.txn.spurious_abort_prob = 0.3;
      AbTree<4> a(ac);
      const RecordedHistory ra = record_random_history(a, seed);
      const Verdict va = check_linearizable(ra.history, ra.initial);
      ASSERT_TRUE(va.ok()) << va.message;
    }
  }
}

TEST(Checker, DetectsFaultyInsert) {
  HistoryOptions opt;
  opt.key_range = 4;
  opt.prefill = 1;
  opt.insert_pct = 45;
  opt.remove_pct = 25;
  opt.find_pct = 30;
  int violations = 0;
  for (uint64_t seed = 1; seed <= 2000 && violations == 0; ++seed) {
    BstConfig c;
    c.policy = PolicyKind::NonHtm;
    c.fault_unvalidated_insert = true;
    Bst t(c);
    tm::debug::set_yield_injection(0.2);
    const RecordedHistory r = record_random_history(t, seed, opt);
    tm::debug::set_yield_injection(0);
    if (check_linearizable(r.history, r.initial).kind == Verdict::Kind::Violation) ++violations;
  }
  EXPECT_GE(violations, 1);
}

TEST(Checker, KeysumAndStructuralChecks) {
  Bst t;
  const std::vector<uint64_t> none{0, 0};
  EXPECT_TRUE(keysum_verify(none, t));
  t.insert(7, 1);
  const std::vector<uint64_t> seven{7, 0};
  EXPECT_TRUE(keysum_verify(seven, t));
  EXPECT_FALSE(keysum_verify(none, t));
  // Wrapping sums still balance.
  t.remove(7);
  const std::vector<uint64_t> wrap{7, static_cast<uint64_t>(-7)};
  EXPECT_TRUE(keysum_verify(wrap, t));
  EXPECT_TRUE(structural_validate(t).empty());

  AbTree<> a;
  EXPECT_TRUE(drain_and_validate(a).empty());
}
