#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "doctest.h"
#include "nasfcos/orchestrator.hpp"
#include "nasfcos/report.hpp"
#include "test_support.hpp"

using namespace nasfcos;
namespace fs = std::filesystem;

namespace {

SearchConfig small_config(std::uint64_t seed = 1) {
  SearchConfig cfg;
  cfg.space = {.fpn_blocks = 3, .fpn_ops = 3, .fpn_aggs = 2};
  cfg.samples_fpn = 60;
  cfg.samples_head = 40;
  cfg.top_k_fpn = 5;
  cfg.top_k_head = 3;
  cfg.hidden_size = 16;
  cfg.embedding_size = 8;
  cfg.ppo.learning_rate = 3e-3;
  cfg.seed = seed;
  cfg.checkpoint_every = 2;
  return cfg;
}

SearchConfig external_config() {
  SearchConfig cfg = small_config(5);
  cfg.samples_fpn = 30;
  cfg.samples_head = 20;
  cfg.evaluator = "external";
  cfg.external.workers = {test_support::echo_worker(), test_support::echo_worker()};
  cfg.external.timeout_s = 10.0;
  return cfg;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double echo_reward(const DecoderGenome& g) {
  const std::uint64_t h = genome_hash(g);
  return -static_cast<double>((h % 1000) + ((h >> 10) % 1000) + ((h >> 20) % 1000)) / 1000.0;
}

HistoryEntry head_entry(std::int64_t step, int i, int j) {
  HistoryEntry e;
  e.step = step;
  e.stage = Stage::Head;
  e.genome.head = default_head();
  e.genome.head.share_start_i = i;
  e.genome.head.branch_split_j = j;
  return e;
}

struct CommandResult {
  int status = -1;
  std::string output;
};

CommandResult run_command(const std::string& cmd) {
  CommandResult r;
  FILE* pipe = popen((cmd + " 2>/dev/null").c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
  r.status = pclose(pipe);
  return r;
}

}  // namespace

TEST_CASE("config round trips through JSON") {
  SearchConfig cfg = small_config(77);
  cfg.plan = StagePlan::Fpn;
  cfg.ppo.entropy_coeff = 0.02;
  cfg.ppo.standardize_advantages = false;
  cfg.surrogate.noise_sigma = 0.05;
  cfg.surrogate.noise_seed = 9;
  cfg.external.workers = {"python3 worker.py --device cpu"};
  cfg.external.mode = RewardMode::Ap;
  cfg.cost.image_h = 640;
  cfg.fixed_fpn = FpnGenome{{{0, 1, UnaryOp::SepConv3x3, UnaryOp::Skip, AggOp::Sum}}};
  const auto j = to_json(cfg);
  const SearchConfig back = search_config_from_json(j);
  CHECK(to_json(back) == j);
  CHECK(back.plan == StagePlan::Fpn);
  CHECK(back.ppo.entropy_coeff == 0.02);
  CHECK(back.external.mode == RewardMode::Ap);
  CHECK(back.fixed_fpn == cfg.fixed_fpn);

  const SearchConfig defaults = search_config_from_json(nlohmann::json::object());
  CHECK(defaults.plan == StagePlan::Progressive);
  CHECK(defaults.samples_fpn == 2800);
  CHECK(defaults.samples_head == 600);
  CHECK(defaults.top_k_fpn == 20);
  CHECK(defaults.top_k_head == 10);
  CHECK(defaults.ppo.batch_size == 10);
  CHECK_NOTHROW(validate(defaults));
  CHECK_THROWS_AS(search_config_from_json({{"stage", "both"}}), std::invalid_argument);
  CHECK_THROWS_AS(search_config_from_json({{"samples", {{"fpn", "many"}}}}), std::invalid_argument);
}

TEST_CASE("config validation") {
  SearchConfig cfg = small_config();
  CHECK_NOTHROW(validate(cfg));
  auto bad = cfg;
  bad.top_k_fpn = bad.samples_fpn + 1;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad = cfg;
  bad.top_k_head = 0;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad = cfg;
  bad.samples_head = 0;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad = cfg;
  bad.plan = StagePlan::Head;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad.fixed_fpn = FpnGenome{{{0, 1, UnaryOp::Skip, UnaryOp::Skip, AggOp::Sum}}};
  CHECK_NOTHROW(validate(bad));
  bad = cfg;
  bad.evaluator = "oracle";
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad.evaluator = "external";
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad = cfg;
  bad.fixed_head.share_start_i = 4;
  bad.fixed_head.branch_split_j = 2;
  CHECK_THROWS(validate(bad));
  CHECK_THROWS(SearchRunner(bad));
}

TEST_CASE("leaderboard equals a full sort for every prefix") {
  Rng rng(3);
  SearchHistory h;
  for (std::int64_t step = 0; step < 120; ++step) {
    HistoryEntry e;
    e.step = step;
    e.stage = step % 3 == 0 ? Stage::Head : Stage::Fpn;
    e.genome = {random_fpn_genome({}, rng), random_head_genome(rng)};
    // Few distinct values so ties are common.
    e.reward = static_cast<double>(uniform_index(rng, 6)) * 0.25;
    h.append(e);

    for (Stage stage : {Stage::Fpn, Stage::Head}) {
      std::vector<HistoryEntry> oracle;
      for (const auto& x : h.entries()) {
        if (x.stage == stage) oracle.push_back(x);
      }
      std::sort(oracle.begin(), oracle.end(), [](const auto& a, const auto& b) {
        return a.reward != b.reward ? a.reward > b.reward : a.step < b.step;
      });
      for (std::size_t k : {std::size_t{1}, std::size_t{5}, std::size_t{20}, oracle.size() + 3}) {
        const auto board = h.leaderboard(stage, k);
        const std::size_t m = std::min(k, oracle.size());
        REQUIRE(board.size() == m);
        for (std::size_t r = 0; r < m; ++r) REQUIRE(board[r].step == oracle[r].step);
      }
      if (!oracle.empty()) CHECK(h.best(stage)->step == oracle.front().step);
    }
  }
  CHECK(SearchHistory::from_jsonl(h.to_jsonl()) == h);
  CHECK_FALSE(SearchHistory().best(Stage::Fpn).has_value());
}

TEST_CASE("progressive search plumbing") {
  SearchRunner runner(small_config());
  CHECK(runner.run());
  CHECK(runner.finished());
  const auto& entries = runner.history().entries();
  REQUIRE(entries.size() == 100);
  const auto winner = runner.stage1_winner();
  REQUIRE(winner.has_value());
  CHECK(*winner == runner.history().best(Stage::Fpn)->genome.fpn);
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const auto& e = entries[k];
    CHECK(e.step == static_cast<std::int64_t>(k));
    if (k < 60) {
      CHECK(e.stage == Stage::Fpn);
      CHECK(e.genome.head == runner.config().fixed_head);
      CHECK(e.genome.fpn.blocks.size() == 3);
    } else {
      CHECK(e.stage == Stage::Head);
      // Every stage-2 genome carries the stage-1 winner.
      CHECK(e.genome.fpn == *winner);
      CHECK(e.genome.head.branch_split_j >= e.genome.head.share_start_i);
    }
  }
  // With i, j uniform over 0..6 about 3 in 7 raw head samples have j < i.
  CHECK(runner.rejected_samples() > 0);
  const auto board = runner.leaderboard_json();
  CHECK(board["fpn"].size() == 5);
  CHECK(board["head"].size() == 3);
  CHECK(board["samples"] == 100);
  CHECK(board["rejected_samples"] == runner.rejected_samples());
  CHECK(board["fpn"][0]["step"] == runner.history().best(Stage::Fpn)->step);
}

TEST_CASE("same config and seed give the same history") {
  const auto dir_a = test_support::scratch_dir("det_a");
  const auto dir_b = test_support::scratch_dir("det_b");
  SearchRunner a(small_config(11), dir_a);
  SearchRunner b(small_config(11), dir_b);
  a.run();
  b.run();
  CHECK(a.history() == b.history());
  CHECK(read_text(dir_a / "history.jsonl") == read_text(dir_b / "history.jsonl"));
  CHECK(read_text(dir_a / "leaderboard.json") == read_text(dir_b / "leaderboard.json"));
  CHECK(SearchHistory::load(dir_a / "history.jsonl") == a.history());

  SearchRunner c(small_config(12));
  c.run();
  CHECK_FALSE(c.history() == a.history());
}

TEST_CASE("resume continues exactly where the run stopped") {
  const auto ref_dir = test_support::scratch_dir("resume_ref");
  SearchRunner reference(small_config(21), ref_dir);
  reference.run();
  const std::string expected = read_text(ref_dir / "history.jsonl");

  // Pause points inside stage 1, on the stage boundary and inside stage 2.
  for (int pause : {1, 3, 6, 7, 9}) {
    CAPTURE(pause);
    const auto dir = test_support::scratch_dir("resume_run");
    {
      SearchRunner first(small_config(21), dir);
      CHECK_FALSE(first.run(pause));
    }
    auto resumed = SearchRunner::resume(dir);
    CHECK(resumed->history().size() == static_cast<std::size_t>(pause) * 10);
    CHECK(resumed->run());
    CHECK(resumed->history() == reference.history());
    CHECK(resumed->rejected_samples() == reference.rejected_samples());
    CHECK(read_text(dir / "history.jsonl") == expected);
    CHECK(read_text(dir / "leaderboard.json") == read_text(ref_dir / "leaderboard.json"));
  }
}

TEST_CASE("samples after the last checkpoint are regenerated on resume") {
  SearchRunner reference(small_config(31));
  reference.run();

  const auto dir = test_support::scratch_dir("resume_crash");
  SearchRunner first(small_config(31), dir);
  first.run(4);
  const std::string state = read_text(dir / "state.json");
  const std::string policy = read_text(dir / "policy.json");
  // Two more batches reach the history file, then the process "dies" with
  // the older checkpoint on disk.
  first.run(2);
  CHECK(SearchHistory::load(dir / "history.jsonl").size() == 60);
  std::ofstream(dir / "state.json") << state;
  std::ofstream(dir / "policy.json") << policy;

  auto resumed = SearchRunner::resume(dir);
  CHECK(resumed->history().size() == 40);
  CHECK(SearchHistory::load(dir / "history.jsonl").size() == 40);
  resumed->run();
  CHECK(resumed->history() == reference.history());
}

TEST_CASE("resuming a finished run is a no-op") {
  const auto dir = test_support::scratch_dir("resume_done");
  SearchRunner first(small_config(41), dir);
  first.run();
  auto again = SearchRunner::resume(dir);
  CHECK(again->finished());
  CHECK(again->run());
  CHECK(again->history() == first.history());
  CHECK(again->stage1_winner() == first.stage1_winner());
}

TEST_CASE("head-only search uses the fixed FPN") {
  SearchConfig cfg = small_config(51);
  cfg.plan = StagePlan::Head;
  Rng rng(2);
  cfg.fixed_fpn = random_fpn_genome(cfg.space, rng);
  SearchRunner runner(cfg);
  runner.run();
  REQUIRE(runner.history().size() == 40);
  for (const auto& e : runner.history().entries()) {
    CHECK(e.stage == Stage::Head);
    CHECK(e.genome.fpn == *cfg.fixed_fpn);
  }
  CHECK_FALSE(runner.stage1_winner().has_value());
}

TEST_CASE("search through external workers") {
  const auto dir = test_support::scratch_dir("external");
  SearchRunner runner(external_config(), dir);
  CHECK(runner.run());
  REQUIRE(runner.history().size() == 50);
  for (const auto& e : runner.history().entries()) {
    CHECK(e.reward == doctest::Approx(echo_reward(e.genome)).epsilon(1e-12));
  }
  CHECK(fs::file_size(dir / "cache_fpn.jsonl") > 0);
  CHECK(fs::file_size(dir / "cache_head.jsonl") > 0);

  const auto dir2 = test_support::scratch_dir("external_resume");
  {
    SearchRunner first(external_config(), dir2);
    first.run(2);
  }
  auto resumed = SearchRunner::resume(dir2);
  resumed->run();
  CHECK(resumed->history() == runner.history());
}

TEST_CASE("evaluator failure aborts with the state persisted") {
  SearchRunner reference(external_config());
  reference.run();

  const auto dir = test_support::scratch_dir("external_fail");
  SearchConfig cfg = external_config();
  {
    SearchRunner healthy(cfg, dir);
    healthy.run(2);
  }
  // Break every worker, then resume: the third batch cannot be evaluated.
  auto j = nlohmann::json::parse(read_text(dir / "config.json"));
  j["external"]["workers"] = {test_support::echo_worker() + " --always-die"};
  std::ofstream(dir / "config.json") << j.dump(2);
  {
    auto broken = SearchRunner::resume(dir);
    CHECK_THROWS_AS(broken->run(), EvaluationError);
  }
  const auto state = nlohmann::json::parse(read_text(dir / "state.json"));
  CHECK(state["samples_done"] == 20);
  CHECK(SearchHistory::load(dir / "history.jsonl").size() == 20);

  // Repaired workers pick up exactly where the healthy run stopped.
  j["external"]["workers"] = cfg.external.workers;
  std::ofstream(dir / "config.json") << j.dump(2);
  auto repaired = SearchRunner::resume(dir);
  repaired->run();
  CHECK(repaired->history() == reference.history());
}

TEST_CASE("sharing trend fixtures") {
  SearchHistory all_zero;
  for (int k = 0; k < 100; ++k) all_zero.append(head_entry(k, 0, k % 7));
  auto trend = sharing_trend(all_zero);
  REQUIRE(trend.size() == 2);
  for (const auto& w : trend) CHECK(w.shared_fraction == 1.0);
  CHECK(trend[0].first_step == 0);
  CHECK(trend[0].last_step == 49);
  CHECK(trend[1].first_step == 50);

  SearchHistory diagonal;
  for (int k = 0; k < 150; ++k) diagonal.append(head_entry(k, k % 7, k % 7));
  for (const auto& w : sharing_trend(diagonal)) CHECK(w.cross_branch_fraction == 0.0);

  // Mixed fixture: 100 samples cycling through five (i, j) pairs.
  //   (0,0): shared 6/6, branch 0/6      (0,6): 6/6, 6/6
  //   (2,4): 4/6, 2/4                    (6,6): 0/6, 0/1
  //   (3,6): 3/6, 3/3
  // Per cycle: shared (6+6+4+0+3)/6/5 = 19/30,
  //            branch (0+1+0.5+0+1)/5 = 0.5.
  const std::array<std::pair<int, int>, 5> cycle{{{0, 0}, {0, 6}, {2, 4}, {6, 6}, {3, 6}}};
  SearchHistory mixed;
  for (int k = 0; k < 100; ++k) {
    HistoryEntry fpn = head_entry(2 * k, 0, 0);
    fpn.stage = Stage::Fpn;
    mixed.append(fpn);
    mixed.append(head_entry(2 * k + 1, cycle[k % 5].first, cycle[k % 5].second));
  }
  trend = sharing_trend(mixed);
  REQUIRE(trend.size() == 2);
  for (const auto& w : trend) {
    CHECK(w.shared_fraction == doctest::Approx(19.0 / 30.0));
    CHECK(w.cross_branch_fraction == doctest::Approx(0.5));
  }
  trend = sharing_trend(mixed, 100);
  REQUIRE(trend.size() == 1);
  CHECK(trend[0].first_step == 1);
  CHECK(trend[0].last_step == 199);
  CHECK(trend[0].shared_fraction == doctest::Approx(19.0 / 30.0));

  CHECK(sharing_trend(SearchHistory{}).empty());
  CHECK(sharing_trend(mixed, 101).empty());
  CHECK_THROWS_AS(sharing_trend(mixed, 0), std::invalid_argument);
  const std::string dat = to_dat(sharing_trend(mixed));
  CHECK(std::count(dat.begin(), dat.end(), '\n') == 3);
}

TEST_CASE("correlation fixtures") {
  const std::vector<double> x3{1, 2, 3};
  auto c = correlation(x3, std::vector<double>{10, 20, 30});
  CHECK(c.spearman == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(c.pearson == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(c.n == 3);
  c = correlation(x3, std::vector<double>{30, 20, 10});
  CHECK(c.spearman == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(c.pearson == doctest::Approx(-1.0).epsilon(1e-15));

  // Ranks equal the values: d = (0, 1, 1, 0), 1 - 6 * 2 / (4 * 15) = 0.8.
  // Pearson by hand: deviations (-1.5, -0.5, 0.5, 1.5) and
  // (-1.5, 0.5, -0.5, 1.5), covariance sum 4, both sums of squares 5.
  c = correlation(std::vector<double>{1, 2, 3, 4}, std::vector<double>{1, 3, 2, 4});
  CHECK(c.spearman == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(c.pearson == doctest::Approx(4.0 / 5.0).epsilon(1e-12));

  // Tied values; reference values from scipy.stats spearmanr / pearsonr.
  c = correlation(std::vector<double>{1, 2, 2, 3, 5, 8}, std::vector<double>{2, 1, 4, 4, 7, 6});
  CHECK(c.spearman == doctest::Approx(0.8088235294117647).epsilon(1e-12));
  CHECK(c.pearson == doctest::Approx(0.7793252697074519).epsilon(1e-12));

  CHECK_THROWS_AS(correlation(x3, std::vector<double>{1, 1, 1}), std::invalid_argument);
  CHECK_THROWS_AS(correlation(std::vector<double>{2, 2, 2}, x3), std::invalid_argument);
  CHECK_THROWS_AS(correlation(x3, std::vector<double>{1, 2}), std::invalid_argument);
  CHECK_THROWS_AS(correlation(std::vector<double>{1, 2}, std::vector<double>{1, 2}),
                  std::invalid_argument);
}

TEST_CASE("reward curve") {
  SearchHistory h;
  for (int k = 0; k < 25; ++k) {
    HistoryEntry e;
    e.step = k;
    e.reward = k;
    h.append(e);
  }
  CHECK(reward_curve(h, Stage::Fpn, 10) == std::vector<double>{4.5, 14.5});
  CHECK(reward_curve(h, Stage::Head, 10).empty());
  CHECK(to_dat({4.5, 14.5}, "mean_reward") == "# window mean_reward\n0 4.5\n1 14.5\n");
}

TEST_CASE("windowed reward rises while the controller learns") {
  // Full-size space and controller, stage-1 budget.
  SearchConfig cfg;
  cfg.plan = StagePlan::Fpn;
  cfg.seed = 1;
  cfg.checkpoint_every = 0;
  SearchRunner runner(cfg);
  runner.run();
  const auto curve = reward_curve(runner.history(), Stage::Fpn, 50);
  REQUIRE(curve.size() == 56);
  const double top = *std::max_element(curve.begin(), curve.end());
  CHECK(curve.back() > curve.front());

  // Learning phase: up to the first window within 1% of the best window.
  std::size_t end = 0;
  while (curve[end] < 0.99 * top) ++end;
  int up = 0;
  for (std::size_t k = 0; k < end; ++k) up += curve[k + 1] >= curve[k];
  MESSAGE(fmt::format("learning phase {} windows, {} of {} pairs non-decreasing", end + 1, up, end));
  REQUIRE(end >= 5);
  CHECK(up >= 0.8 * static_cast<double>(end));

  int up_all = 0;
  for (std::size_t k = 0; k + 1 < curve.size(); ++k) up_all += curve[k + 1] >= curve[k];
  MESSAGE(fmt::format("whole run: {} of {} pairs non-decreasing", up_all, curve.size() - 1));
}

TEST_CASE("command line") {
  const std::string cli = NASFCOS_CLI;
  const auto dir = test_support::scratch_dir("cli");
  std::ofstream(dir / "cfg.json") << to_json(small_config(61)).dump();

  auto r = run_command(fmt::format("{} search --config {} --out {} --max-batches 3", cli,
                                   (dir / "cfg.json").string(), (dir / "run").string()));
  CHECK(r.status == 0);
  r = run_command(fmt::format("{} search --resume --out {}", cli, (dir / "run").string()));
  REQUIRE(r.status == 0);
  const auto board = nlohmann::json::parse(r.output);
  CHECK(board["samples"] == 100);
  SearchRunner reference(small_config(61));
  reference.run();
  CHECK(SearchHistory::load(dir / "run" / "history.jsonl") == reference.history());
  CHECK(nlohmann::json::parse(read_text(dir / "run" / "leaderboard.json")) == board);

  r = run_command(fmt::format("{} report --history {} --sharing-trend --window 10 --dat-dir {}",
                              cli, (dir / "run" / "history.jsonl").string(),
                              (dir / "dat").string()));
  CHECK(r.status == 0);
  CHECK(fs::exists(dir / "dat" / "sharing_trend.dat"));
  CHECK(fs::exists(dir / "dat" / "reward_fpn.dat"));

  std::ofstream(dir / "genome.json") << nlohmann::json(to_json(reference.history().entries()[0].genome)).dump();
  r = run_command(fmt::format("{} cost --genome {}", cli, (dir / "genome.json").string()));
  CHECK(r.status == 0);
  CHECK(r.output.find("params") != std::string::npos);

  r = run_command(fmt::format("{} proxy-sample --input {} --seed 3", cli,
                              (test_support::data_dir() / "coco80_synthetic.csv").string()));
  CHECK(r.status == 0);
  CHECK(r.output.find("avg_ratio") != std::string::npos);

  CHECK(run_command(cli + " search --stage both").status != 0);
  CHECK(run_command(cli + " report").status != 0);
}
