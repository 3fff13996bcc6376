#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "nasfcos/cost_model.hpp"
#include "nasfcos/orchestrator.hpp"
#include "nasfcos/proxy_sampler.hpp"
#include "nasfcos/report.hpp"
#include "nasfcos/search_space.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot read {}", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  out << text;
}

struct SearchArgs {
  std::string config;
  std::string stage;
  std::string evaluator;
  std::vector<std::string> workers;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool resume = false;
  std::optional<int> max_batches;
};

int run_search(const SearchArgs& a) {
  std::unique_ptr<nasfcos::SearchRunner> runner;
  if (a.resume) {
    if (a.out.empty()) throw CLI::ValidationError("--resume needs --out");
    runner = nasfcos::SearchRunner::resume(a.out);
  } else {
    json j = a.config.empty() ? json::object() : json::parse(slurp(a.config));
    if (!a.stage.empty()) j["stage"] = a.stage;
    if (!a.evaluator.empty()) j["evaluator"] = a.evaluator;
    if (!a.workers.empty()) j["external"]["workers"] = a.workers;
    if (a.seed) j["seed"] = *a.seed;
    runner = std::make_unique<nasfcos::SearchRunner>(nasfcos::search_config_from_json(j),
                                                     a.out);
  }
  const bool done = runner->run(a.max_batches);
  const json board = runner->leaderboard_json();
  std::cout << board.dump(2) << "\n";
  if (!done) std::cerr << "search paused; continue with --resume\n";
  return 0;
}

struct ReportArgs {
  std::string history;
  bool sharing = false;
  int window = 50;
  std::string correlation;
  std::string dat_dir;
};

int run_report(const ReportArgs& a) {
  const auto history = nasfcos::SearchHistory::load(a.history);
  json out;
  out["samples"] = history.size();
  for (nasfcos::Stage stage : {nasfcos::Stage::Fpn, nasfcos::Stage::Head}) {
    const char* name = stage == nasfcos::Stage::Fpn ? "fpn" : "head";
    const auto curve = nasfcos::reward_curve(history, stage, a.window);
    out["reward_curve"][name] = curve;
    if (!a.dat_dir.empty()) {
      fs::create_directories(a.dat_dir);
      write_text(fs::path(a.dat_dir) / fmt::format("reward_{}.dat", name),
                 nasfcos::to_dat(curve, "mean_reward"));
    }
  }
  if (a.sharing) {
    const auto trend = nasfcos::sharing_trend(history, a.window);
    json rows = json::array();
    std::cout << fmt::format("{:>6} {:>8} {:>8} {:>10} {:>10}\n", "window", "first", "last",
                             "shared", "branch");
    for (std::size_t k = 0; k < trend.size(); ++k) {
      const auto& w = trend[k];
      rows.push_back({{"window", k},
                      {"first_step", w.first_step},
                      {"last_step", w.last_step},
                      {"shared_fraction", w.shared_fraction},
                      {"cross_branch_fraction", w.cross_branch_fraction}});
      std::cout << fmt::format("{:>6} {:>8} {:>8} {:>10.4f} {:>10.4f}\n", k, w.first_step,
                               w.last_step, w.shared_fraction, w.cross_branch_fraction);
    }
    out["sharing_trend"] = rows;
    if (!a.dat_dir.empty()) {
      write_text(fs::path(a.dat_dir) / "sharing_trend.dat", nasfcos::to_dat(trend));
    }
  }
  if (!a.correlation.empty()) {
    // Downstream file: [{"hash": "...", "metric": x}, ...]; the reward of the
    // first history entry with that hash is paired with the metric.
    std::map<std::string, double> reward_by_hash;
    for (const auto& e : history.entries()) {
      reward_by_hash.emplace(nasfcos::genome_hash_hex(e.genome), e.reward);
    }
    std::vector<double> xs, ys;
    for (const auto& row : json::parse(slurp(a.correlation))) {
      const auto it = reward_by_hash.find(row.at("hash").get<std::string>());
      if (it == reward_by_hash.end()) {
        std::cerr << fmt::format("warning: hash {} not in history\n",
                                 row.at("hash").get<std::string>());
        continue;
      }
      xs.push_back(it->second);
      ys.push_back(row.at("metric").get<double>());
    }
    const auto c = nasfcos::correlation(xs, ys);
    out["correlation"] = {{"n", c.n}, {"spearman", c.spearman}, {"pearson", c.pearson}};
    std::cout << fmt::format("correlation over {} pairs: spearman {:.4f}, pearson {:.4f}\n", c.n,
                             c.spearman, c.pearson);
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

struct CostArgs {
  std::string genome;
  int fpn_width = 256;
  int head_width = 256;
  std::string image_size = "1088x800";
  std::string backbone = "512,1024,2048";
};

int run_cost(const CostArgs& a) {
  nasfcos::CostConfig cfg;
  cfg.fpn_width = a.fpn_width;
  cfg.head_width = a.head_width;
  if (std::sscanf(a.image_size.c_str(), "%dx%d", &cfg.image_h, &cfg.image_w) != 2) {
    throw CLI::ValidationError("--image-size must look like HxW");
  }
  if (std::sscanf(a.backbone.c_str(), "%d,%d,%d", &cfg.backbone_channels[0],
                  &cfg.backbone_channels[1], &cfg.backbone_channels[2]) != 3) {
    throw CLI::ValidationError("--backbone-channels must look like a,b,c");
  }
  const auto genome = nasfcos::genome_from_json(json::parse(slurp(a.genome)));
  const auto report = nasfcos::count(nasfcos::build_graph(genome, cfg));
  std::cout << nasfcos::to_json(report, cfg).dump(2) << "\n";
  std::cout << nasfcos::format_table(report, cfg);
  return 0;
}

struct ProxyArgs {
  std::string input;
  std::string indicator = "ratio";
  int segments = 5;
  int per_segment = 4;
  std::uint64_t seed = 0;
};

int run_proxy(const ProxyArgs& a) {
  const auto stats = nasfcos::load_category_stats(a.input);
  const auto plan = nasfcos::build_segments(stats, nasfcos::indicator_from_name(a.indicator),
                                            a.segments, a.per_segment);
  nasfcos::Rng rng(nasfcos::mix_seed(a.seed));
  const auto selection = nasfcos::sample_categories(stats, plan, rng);
  for (const auto& w : selection.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << nasfcos::to_json(selection, plan).dump(2) << "\n";
  std::cout << nasfcos::format_summary(selection.categories);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decoder architecture search for FCOS detectors"};
  app.require_subcommand(1);

  SearchArgs search;
  auto* s = app.add_subcommand("search", "run or resume a search");
  s->add_option("--config", search.config, "JSON config file")->check(CLI::ExistingFile);
  s->add_option("--stage", search.stage, "fpn|head|progressive")
      ->check(CLI::IsMember({"fpn", "head", "progressive"}));
  s->add_option("--evaluator", search.evaluator, "surrogate|external")
      ->check(CLI::IsMember({"surrogate", "external"}));
  s->add_option("--workers", search.workers, "worker command, once per worker process");
  s->add_option("--seed", search.seed);
  s->add_option("--out", search.out, "output directory");
  s->add_flag("--resume", search.resume, "continue the run stored in --out");
  s->add_option("--max-batches", search.max_batches, "stop after this many batches");

  ReportArgs report;
  auto* r = app.add_subcommand("report", "summarize a search history");
  r->add_option("--history", report.history, "history.jsonl")->required();
  r->add_flag("--sharing-trend", report.sharing);
  r->add_option("--window", report.window, "samples per window")->capture_default_str();
  r->add_option("--correlation", report.correlation, "downstream metrics JSON");
  r->add_option("--dat-dir", report.dat_dir, "write gnuplot data files here");

  CostArgs cost;
  auto* c = app.add_subcommand("cost", "count params and FLOPs of a genome");
  c->add_option("--genome", cost.genome, "genome JSON")->required()->check(CLI::ExistingFile);
  c->add_option("--fpn-width", cost.fpn_width)->capture_default_str();
  c->add_option("--head-width", cost.head_width)->capture_default_str();
  c->add_option("--image-size", cost.image_size, "HxW")->capture_default_str();
  c->add_option("--backbone-channels", cost.backbone, "c3,c4,c5")->capture_default_str();

  ProxyArgs proxy;
  auto* p = app.add_subcommand("proxy-sample", "stratified category sampling");
  p->add_option("--input", proxy.input, "CSV or JSON-lines category stats")
      ->required()
      ->check(CLI::ExistingFile);
  p->add_option("--indicator", proxy.indicator, "ratio|area|instances")->capture_default_str();
  p->add_option("--segments", proxy.segments)->capture_default_str();
  p->add_option("--per-segment", proxy.per_segment)->capture_default_str();
  p->add_option("--seed", proxy.seed)->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  try {
    if (s->parsed()) return run_search(search);
    if (r->parsed()) return run_report(report);
    if (c->parsed()) return run_cost(cost);
    if (p->parsed()) return run_proxy(proxy);
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
