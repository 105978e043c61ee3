#include <gtest/gtest.h>

#include <random>
#include <thread>

#include "htmtree/llxscx.hpp"
#include "test_support.hpp"

using namespace htmtree;
using namespace htmtree::llx;
using htmtree::testing::Rec;

namespace {

int me() { return ThreadRegistry::this_thread_id(); }

}  // namespace

TEST(InfoHistory, DetectsSlotChangeWithoutNewInfo) {
  install_history_observer();
  Rec<> r{0, 0};
  r.slots[0].store(1);
  EXPECT_TRUE(check_info_freshness(r));
  r.slots[0].store(2);
  EXPECT_FALSE(check_info_freshness(r));
}

TEST(InfoHistory, DetectsReusedInfoValue) {
  install_history_observer();
  Rec<> r{0, 0};
  r.info.store(make_tagged(0, 1));
  r.info.store(make_tagged(0, 2));
  EXPECT_TRUE(check_info_freshness(r));
  r.info.store(make_tagged(0, 1));
  EXPECT_FALSE(check_info_freshness(r));
}

TEST(InfoHistory, ScxRecordsFreshInfoBeforeEachChange) {
  install_history_observer();
  Domain d;
  Rec<> a{0, 0};
  Rec<> b{0, 0};
  tm::Engine eng;
  for (int i = 0; i < 10; ++i) {
    ASSERT_TRUE(d.llx_o(me(), &a).ok());
    ASSERT_TRUE(d.llx_o(me(), &b).ok());
    const auto v = htmtree::testing::recs(&a, &b);
    if (i % 2) {
      ASSERT_TRUE(d.scx_o(me(), v, {}, {&a, 0}, i));
    } else {
      ASSERT_TRUE(d.scx_dispatch(eng, me(), v, {}, {&a, 0}, i, 3));
    }
  }
  EXPECT_GE(a.history.total(), 20u);
  EXPECT_TRUE(check_info_freshness(a));
  EXPECT_TRUE(check_info_freshness(b));
}

// Random LLX/SCX traffic on a small set of records, mixing the lock-free
// and transactional SCX, with the freshness property checked after every
// round.
TEST(InfoHistory, FreshnessUnderContention) {
  install_history_observer();
  Domain d;
  tm::TxnConfig cfg;
  cfg.spurious_abort_prob = 0.3;
  tm::Engine eng(cfg);
  constexpr int kRecords = 8;
  std::vector<std::unique_ptr<Rec<>>> rs;
  for (int i = 0; i < kRecords; ++i) rs.push_back(std::make_unique<Rec<>>(std::initializer_list<uint64_t>{0, 0}));
  tm::debug::set_yield_injection(0.02);
  uint64_t successes = 0;
  for (int round = 0; round < 300; ++round) {
    std::array<uint64_t, 2> wins{};
    std::vector<std::thread> ts;
    for (int t = 0; t < 2; ++t) {
      ts.emplace_back([&, t] {
        const int pid = me();
        std::mt19937_64 rng(round * 2 + t);
        for (int i = 0; i < 10; ++i) {
          d.table(pid).clear();
          std::vector<DataRecord*> v;
          std::vector<LlxResult> snaps;
          const int n = 1 + static_cast<int>(rng() % 3);
          bool ok = true;
          while (static_cast<int>(v.size()) < n) {
            auto* r = rs[rng() % kRecords].get();
            if (std::find(v.begin(), v.end(), r) != v.end()) continue;
            const LlxResult res = d.llx_htm(pid, r);
            if (!res.ok()) {
              ok = false;
              break;
            }
            v.push_back(r);
            snaps.push_back(res);
          }
          if (!ok) continue;
          const FieldRef f{v[0], static_cast<uint32_t>(rng() % 2)};
          const uint64_t next = snaps[0][f.slot] + 1;
          const bool done = (rng() & 1) ? d.scx_o(pid, v, {}, f, next) : d.scx_dispatch(eng, pid, v, {}, f, next, 2);
          wins[t] += done;
        }
      });
    }
    for (auto& th : ts) th.join();
    successes += wins[0] + wins[1];
    for (int i = 0; i < kRecords; ++i) ASSERT_TRUE(check_info_freshness(*rs[i])) << "record " << i << " round " << round;
  }
  tm::debug::set_yield_injection(0);
  EXPECT_GT(successes, 1000u);
}
