// Command-line benchmark: runs timed trials and prints one CSV row per trial
// plus a summary row.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <map>

#include "htmtree/bench.hpp"

using namespace htmtree;

int main(int argc, char** argv) {
  CLI::App app{"Throughput benchmark for the HTM-accelerated LLX/SCX trees"};

  bench::WorkloadSpec spec;
  std::string tree = "bst";
  std::string policy = "3path";
  std::string workload = "light";
  std::string csv_path;

  const std::map<std::string, std::string> trees{{"bst", "bst"}, {"abtree", "abtree"}};
  const std::map<std::string, std::string> policies{
      {"nonhtm", "nonhtm"}, {"tle", "tle"}, {"2pc", "2pc"}, {"2pnc", "2pnc"}, {"3path", "3path"}};
  const std::map<std::string, std::string> workloads{{"light", "light"}, {"heavy", "heavy"}};

  app.add_option("--tree", tree, "Tree to benchmark")->transform(CLI::CheckedTransformer(trees));
  app.add_option("--policy", policy, "Execution path policy")->transform(CLI::CheckedTransformer(policies));
  app.add_option("--threads", spec.threads, "Worker threads")->check(CLI::Range(1, kMaxThreads - 1));
  app.add_option("--duration-ms", spec.duration_ms, "Length of each trial")->check(CLI::PositiveNumber);
  app.add_option("--keyrange", spec.key_range, "Keys are drawn uniformly from [0, K)")->check(CLI::Range(2ULL, 1ULL << 40));
  app.add_option("--workload", workload, "light: all threads update; heavy: one thread runs range queries")
      ->transform(CLI::CheckedTransformer(workloads));
  app.add_option("--range-max", spec.range_max, "Largest range query size (default 1000 for bst, 10000 for abtree)")
      ->check(CLI::PositiveNumber);
  app.add_option("--fast-limit", spec.budget.fast_limit, "Fast-path attempts (3path)")->check(CLI::PositiveNumber);
  app.add_option("--middle-limit", spec.budget.middle_limit, "Middle-path attempts (3path)")
      ->check(CLI::PositiveNumber);
  app.add_option("--attempt-limit", spec.budget.attempt_limit, "Transactional attempts (2-path policies and tle)")
      ->check(CLI::PositiveNumber);
  app.add_option("--cap-limit", spec.txn.capacity_limit, "Words a transaction may touch")->check(CLI::PositiveNumber);
  app.add_option("--spurious-prob", spec.txn.spurious_abort_prob, "Probability of a spurious abort per attempt")
      ->check(CLI::Range(0.0, 1.0));
  app.add_option("--seed", spec.seed, "Random seed");
  app.add_option("--trials", spec.trials, "Number of trials")->check(CLI::PositiveNumber);
  app.add_option("--csv", csv_path, "Write CSV to this file instead of standard output");
  app.add_flag("--search-outside-txn", spec.search_outside_txn,
               "Search before starting fast and middle path transactions");
  app.add_option("--ops-per-thread", spec.ops_per_thread,
                 "Run a fixed number of operations per thread instead of a timed trial");

  CLI11_PARSE(app, argc, argv);

  spec.tree = *bench::parse_tree(tree);
  spec.policy = *parse_policy(policy);
  spec.kind = *bench::parse_workload(workload);

  std::ofstream file;
  if (!csv_path.empty()) {
    file.open(csv_path);
    if (!file) {
      std::cerr << "cannot open " << csv_path << '\n';
      return 1;
    }
  }
  std::ostream& out = csv_path.empty() ? std::cout : file;

  try {
    spec.validate();
    std::vector<bench::TrialResult> results;
    for (int t = 0; t < spec.trials; ++t) results.push_back(bench::run_trial(spec, t));
    bench::report(out, spec, results);
  } catch (const bench::VerificationError& e) {
    std::cerr << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
