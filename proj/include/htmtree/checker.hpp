#pragma once

// History recording and linearizability checking for ordered dictionaries.
//
// A Recorder wraps dictionary calls and stamps each with invocation and
// response times from one global counter, so an operation that responds
// before another is invoked precedes it in real time. check_linearizable()
// searches exhaustively for a sequential order that respects those
// precedences and reproduces every response on a std::map oracle.

#include <algorithm>
#include <atomic>
#include <barrier>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include "htmtree/types.hpp"

namespace htmtree::check {

enum class OpKind { Insert, Remove, Find, Range };

inline const char* to_string(OpKind k) {
  switch (k) {
    case OpKind::Insert: return "insert";
    case OpKind::Remove: return "remove";
    case OpKind::Find: return "find";
    case OpKind::Range: return "range";
  }
  return "?";
}

struct Response {
  // insert: key was absent; remove: key was present.
  bool flag = false;
  // find
  std::optional<Value> value;
  // range
  std::vector<KeyValue> items;

  bool operator==(const Response&) const = default;
};

struct Event {
  int tid = 0;
  OpKind op = OpKind::Find;
  // insert: (key, value); remove/find: key; range: [key, hi)
  Key key = 0;
  Value value = 0;
  Key hi = 0;
  Response resp;
  uint64_t inv = 0;
  uint64_t res = 0;
};

using History = std::vector<Event>;

// ---- Text format --------------------------------------------------------
//
// One event per line: `tid op args → resp @inv,res`, for example
//   0 insert 3 30 → true @1,4
//   1 find 3 → 30 @2,5
//   2 range 1 4 → [(3,30)] @3,6

inline std::string format_response(const Event& e) {
  std::ostringstream os;
  switch (e.op) {
    case OpKind::Insert:
    case OpKind::Remove: os << (e.resp.flag ? "true" : "false"); break;
    case OpKind::Find:
      if (e.resp.value) {
        os << *e.resp.value;
      } else {
        os << "absent";
      }
      break;
    case OpKind::Range:
      os << '[';
      for (std::size_t i = 0; i < e.resp.items.size(); ++i) {
        if (i) os << ',';
        os << '(' << e.resp.items[i].first << ',' << e.resp.items[i].second << ')';
      }
      os << ']';
      break;
  }
  return os.str();
}

inline std::string format_event(const Event& e) {
  std::ostringstream os;
  os << e.tid << ' ' << to_string(e.op) << ' ' << e.key;
  if (e.op == OpKind::Insert) os << ' ' << e.value;
  if (e.op == OpKind::Range) os << ' ' << e.hi;
  os << " → " << format_response(e) << " @" << e.inv << ',' << e.res;
  return os.str();
}

inline std::string format_history(const History& h) {
  std::string out;
  for (const Event& e : h) {
    out += format_event(e);
    out += '\n';
  }
  return out;
}

inline Event parse_event(const std::string& line) {
  const std::string arrow = " → ";
  const auto a = line.find(arrow);
  const auto at = line.rfind(" @");
  if (a == std::string::npos || at == std::string::npos || at < a) {
    throw std::invalid_argument("malformed history line: " + line);
  }
  Event e;
  std::istringstream lhs(line.substr(0, a));
  std::string op;
  lhs >> e.tid >> op >> e.key;
  if (op == "insert") {
    e.op = OpKind::Insert;
    lhs >> e.value;
  } else if (op == "remove") {
    e.op = OpKind::Remove;
  } else if (op == "find") {
    e.op = OpKind::Find;
  } else if (op == "range") {
    e.op = OpKind::Range;
    lhs >> e.hi;
  } else {
    throw std::invalid_argument("unknown operation in history line: " + line);
  }
  if (!lhs) throw std::invalid_argument("malformed arguments in history line: " + line);

  const std::string resp = line.substr(a + arrow.size(), at - a - arrow.size());
  switch (e.op) {
    case OpKind::Insert:
    case OpKind::Remove:
      if (resp != "true" && resp != "false") throw std::invalid_argument("bad response: " + resp);
      e.resp.flag = resp == "true";
      break;
    case OpKind::Find:
      if (resp != "absent") e.resp.value = std::stoull(resp);
      break;
    case OpKind::Range: {
      if (resp.size() < 2 || resp.front() != '[' || resp.back() != ']') {
        throw std::invalid_argument("bad range response: " + resp);
      }
      std::size_t i = 1;
      while (i + 1 < resp.size()) {
        if (resp[i] == ',') ++i;
        if (resp[i] != '(') throw std::invalid_argument("bad range response: " + resp);
        const auto comma = resp.find(',', i);
        const auto close = resp.find(')', i);
        if (comma == std::string::npos || close == std::string::npos || comma > close) {
          throw std::invalid_argument("bad range response: " + resp);
        }
        e.resp.items.emplace_back(std::stoull(resp.substr(i + 1, comma - i - 1)),
                                  std::stoull(resp.substr(comma + 1, close - comma - 1)));
        i = close + 1;
      }
      break;
    }
  }
  const std::string ts = line.substr(at + 2);
  const auto comma = ts.find(',');
  if (comma == std::string::npos) throw std::invalid_argument("bad timestamps: " + ts);
  e.inv = std::stoull(ts.substr(0, comma));
  e.res = std::stoull(ts.substr(comma + 1));
  return e;
}

inline History parse_history(const std::string& text) {
  History h;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) h.push_back(parse_event(line));
  }
  return h;
}

// ---- Recording ----------------------------------------------------------

// Per-thread event logs stamped from one global counter. Each thread must
// only use its own tid.
class Recorder {
 public:
  explicit Recorder(int threads) : logs_(threads) {}

  template <class Dict>
  bool insert(int tid, Dict& d, Key k, Value v) {
    Event e = begin(tid, OpKind::Insert, k);
    e.value = v;
    e.resp.flag = d.insert(k, v);
    return finish(e).resp.flag;
  }

  template <class Dict>
  bool remove(int tid, Dict& d, Key k) {
    Event e = begin(tid, OpKind::Remove, k);
    e.resp.flag = d.remove(k);
    return finish(e).resp.flag;
  }

  template <class Dict>
  std::optional<Value> find(int tid, Dict& d, Key k) {
    Event e = begin(tid, OpKind::Find, k);
    e.resp.value = d.find(k);
    return finish(e).resp.value;
  }

  template <class Dict>
  std::vector<KeyValue> range(int tid, Dict& d, Key lo, Key hi) {
    Event e = begin(tid, OpKind::Range, lo);
    e.hi = hi;
    e.resp.items = d.range_query(lo, hi);
    return finish(e).resp.items;
  }

  // All events, ordered by invocation time.
  History merged() const {
    History h;
    for (const auto& log : logs_) h.insert(h.end(), log.begin(), log.end());
    std::sort(h.begin(), h.end(), [](const Event& a, const Event& b) { return a.inv < b.inv; });
    return h;
  }

 private:
  Event begin(int tid, OpKind op, Key k) {
    Event e;
    e.tid = tid;
    e.op = op;
    e.key = k;
    e.inv = clock_.fetch_add(1, std::memory_order_seq_cst) + 1;
    return e;
  }

  const Event& finish(Event& e) {
    e.res = clock_.fetch_add(1, std::memory_order_seq_cst) + 1;
    logs_[e.tid].push_back(e);
    return logs_[e.tid].back();
  }

  std::atomic<uint64_t> clock_{0};
  std::vector<std::vector<Event>> logs_;
};

// ---- Checking -----------------------------------------------------------

inline constexpr std::size_t kMaxCheckThreads = 3;
inline constexpr std::size_t kMaxCheckOps = 36;

struct Verdict {
  enum class Kind { Ok, Violation, BudgetExceeded };
  Kind kind = Kind::Ok;
  // For a violation: the longest sequential prefix found that reproduces its
  // responses, as indices into the history.
  std::vector<std::size_t> witness;
  std::string message;

  bool ok() const noexcept { return kind == Kind::Ok; }
};

using Oracle = std::map<Key, Value>;

// Applies `e` to the oracle and reports whether the recorded response
// matches the sequential one.
inline bool apply(Oracle& m, const Event& e) {
  switch (e.op) {
    case OpKind::Insert: {
      const bool absent = m.find(e.key) == m.end();
      m[e.key] = e.value;
      return absent == e.resp.flag;
    }
    case OpKind::Remove: return (m.erase(e.key) == 1) == e.resp.flag;
    case OpKind::Find: {
      const auto it = m.find(e.key);
      const std::optional<Value> v = it == m.end() ? std::nullopt : std::optional<Value>(it->second);
      return v == e.resp.value;
    }
    case OpKind::Range: {
      if (e.key >= e.hi) return e.resp.items.empty();
      std::vector<KeyValue> items(m.lower_bound(e.key), m.lower_bound(e.hi));
      return items == e.resp.items;
    }
  }
  return false;
}

namespace detail {

class Search {
 public:
  Search(const History& h, const Oracle& initial) : h_(h), state_(initial) {
    for (std::size_t i = 0; i < h.size(); ++i) {
      const auto t = static_cast<std::size_t>(h[i].tid);
      if (t >= per_thread_.size()) per_thread_.resize(t + 1);
      per_thread_[t].push_back(i);
    }
    for (auto& q : per_thread_) {
      std::sort(q.begin(), q.end(), [&](std::size_t a, std::size_t b) { return h_[a].inv < h_[b].inv; });
    }
    next_.assign(per_thread_.size(), 0);
  }

  bool run() { return dfs(); }
  const std::vector<std::size_t>& best() const { return best_; }

 private:
  std::string memo_key() const {
    std::string k;
    for (std::size_t n : next_) k.push_back(static_cast<char>(n));
    k.push_back('|');
    for (const auto& [key, value] : state_) {
      k.append(reinterpret_cast<const char*>(&key), sizeof key);
      k.append(reinterpret_cast<const char*>(&value), sizeof value);
    }
    return k;
  }

  // Whether the next event of thread t may come next: no other pending
  // event responded before it was invoked.
  bool minimal(std::size_t t) const {
    const Event& e = h_[per_thread_[t][next_[t]]];
    for (std::size_t u = 0; u < per_thread_.size(); ++u) {
      if (u == t || next_[u] == per_thread_[u].size()) continue;
      if (h_[per_thread_[u][next_[u]]].res < e.inv) return false;
    }
    return true;
  }

  bool dfs() {
    if (order_.size() > best_.size()) best_ = order_;
    if (order_.size() == h_.size()) return true;
    if (!failed_.insert(memo_key()).second) return false;
    for (std::size_t t = 0; t < per_thread_.size(); ++t) {
      if (next_[t] == per_thread_[t].size() || !minimal(t)) continue;
      const std::size_t idx = per_thread_[t][next_[t]];
      const Oracle saved = state_;
      if (apply(state_, h_[idx])) {
        ++next_[t];
        order_.push_back(idx);
        if (dfs()) return true;
        order_.pop_back();
        --next_[t];
      }
      state_ = saved;
    }
    return false;
  }

  const History& h_;
  Oracle state_;
  std::vector<std::vector<std::size_t>> per_thread_;
  std::vector<std::size_t> next_;
  std::vector<std::size_t> order_;
  std::vector<std::size_t> best_;
  std::unordered_set<std::string> failed_;
};

}  // namespace detail

// Decides whether `h`, started from `initial` contents, is linearizable.
inline Verdict check_linearizable(const History& h, const Oracle& initial = {}) {
  Verdict v;
  std::vector<bool> seen(kMaxCheckThreads, false);
  for (const Event& e : h) {
    if (e.tid < 0 || static_cast<std::size_t>(e.tid) >= kMaxCheckThreads) {
      v.kind = Verdict::Kind::BudgetExceeded;
      v.message = "history uses more than " + std::to_string(kMaxCheckThreads) + " threads";
      return v;
    }
    if (e.res < e.inv) throw std::invalid_argument("event responds before it is invoked: " + format_event(e));
  }
  if (h.size() > kMaxCheckOps) {
    v.kind = Verdict::Kind::BudgetExceeded;
    v.message = "history has " + std::to_string(h.size()) + " operations, more than " +
                std::to_string(kMaxCheckOps);
    return v;
  }
  detail::Search s(h, initial);
  if (s.run()) return v;
  v.kind = Verdict::Kind::Violation;
  v.witness = s.best();
  std::ostringstream os;
  os << "no linearization; longest legal prefix has " << v.witness.size() << " of " << h.size()
     << " operations:\n";
  for (std::size_t i : v.witness) os << "  " << format_event(h[i]) << '\n';
  os << "history:\n" << format_history(h);
  v.message = os.str();
  return v;
}

// ---- Random histories -----------------------------------------------------

struct HistoryOptions {
  int threads = 3;
  int ops_per_thread = 12;
  Key key_range = 8;
  // Keys inserted single-threaded before recording starts.
  int prefill = 4;
  // Percentages of insert / remove / find; the rest are range queries.
  int insert_pct = 35;
  int remove_pct = 35;
  int find_pct = 20;
};

struct RecordedHistory {
  Oracle initial;
  History history;
};

// Runs one seeded random history on `d`, with all threads released together
// to maximise overlap.
template <class Dict>
RecordedHistory record_random_history(Dict& d, uint64_t seed, const HistoryOptions& opt = {}) {
  RecordedHistory out;
  std::mt19937_64 setup(seed);
  for (int i = 0; i < opt.prefill; ++i) {
    const Key k = setup() % opt.key_range;
    const Value v = setup() % 1000;
    d.insert(k, v);
    out.initial[k] = v;
  }
  Recorder rec(opt.threads);
  std::barrier start(opt.threads);
  std::vector<std::thread> threads;
  for (int t = 0; t < opt.threads; ++t) {
    threads.emplace_back([&, t] {
      std::mt19937_64 rng(seed * 1000003 + static_cast<uint64_t>(t) + 1);
      start.arrive_and_wait();
      for (int i = 0; i < opt.ops_per_thread; ++i) {
        const Key k = rng() % opt.key_range;
        const int roll = static_cast<int>(rng() % 100);
        if (roll < opt.insert_pct) {
          rec.insert(t, d, k, rng() % 1000);
        } else if (roll < opt.insert_pct + opt.remove_pct) {
          rec.remove(t, d, k);
        } else if (roll < opt.insert_pct + opt.remove_pct + opt.find_pct) {
          rec.find(t, d, k);
        } else {
          rec.range(t, d, k, k + 1 + rng() % opt.key_range);
        }
      }
    });
  }
  for (auto& th : threads) th.join();
  out.history = rec.merged();
  return out;
}

// ---- Dictionary-level checks ----------------------------------------------

// Structural violations of a quiescent dictionary.
template <class Dict>
std::vector<std::string> structural_validate(const Dict& d) {
  return d.validate();
}

// Completes pending rebalancing, then validates.
template <class Dict>
std::vector<std::string> drain_and_validate(Dict& d) {
  d.drain();
  return d.validate();
}

// Key-sum check: the per-thread sums of inserted minus deleted keys (mod
// 2^64) must add up to the sum of the keys in the dictionary.
template <class Dict>
bool keysum_verify(std::span<const uint64_t> per_thread_sums, const Dict& d) {
  uint64_t total = 0;
  for (uint64_t s : per_thread_sums) total += s;
  return total == d.key_sum();
}

}  // namespace htmtree::check
