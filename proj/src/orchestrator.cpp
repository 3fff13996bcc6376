#include "nasfcos/orchestrator.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

namespace nasfcos {

namespace {

constexpr int kStateVersion = 1;
constexpr std::uint64_t kPlantedSalt = 0x706c616e746564ULL;

std::string plan_name(StagePlan p) {
  switch (p) {
    case StagePlan::Fpn:
      return "fpn";
    case StagePlan::Head:
      return "head";
    case StagePlan::Progressive:
      return "progressive";
  }
  return "progressive";
}

StagePlan plan_from_name(const std::string& s) {
  if (s == "fpn") return StagePlan::Fpn;
  if (s == "head") return StagePlan::Head;
  if (s == "progressive") return StagePlan::Progressive;
  throw std::invalid_argument(fmt::format("unknown stage plan \"{}\"", s));
}

EvalStage eval_stage(Stage s) { return s == Stage::Fpn ? EvalStage::Fpn : EvalStage::Head; }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot read {}", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Write-then-rename so a crash never leaves a half-written checkpoint.
void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", tmp));
    out << text;
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
void read_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key) && !j[key].is_null()) out = j[key].get<T>();
}

}  // namespace

void validate(const SearchConfig& cfg) {
  validate(cfg.space);
  validate(cfg.ppo);
  if (cfg.samples_fpn < 1 || cfg.samples_head < 1) {
    throw std::invalid_argument("sample budgets must be positive");
  }
  if (cfg.top_k_fpn < 1 || cfg.top_k_fpn > cfg.samples_fpn || cfg.top_k_head < 1 ||
      cfg.top_k_head > cfg.samples_head) {
    throw std::invalid_argument("top_k must lie in [1, samples]");
  }
  if (cfg.hidden_size < 1 || cfg.embedding_size < 1) {
    throw std::invalid_argument("controller sizes must be positive");
  }
  if (cfg.checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be >= 0");
  if (cfg.evaluator != "surrogate" && cfg.evaluator != "external") {
    throw std::invalid_argument(fmt::format("unknown evaluator \"{}\"", cfg.evaluator));
  }
  if (cfg.evaluator == "external" && cfg.external.workers.empty()) {
    throw std::invalid_argument("the external evaluator needs at least one worker command");
  }
  if (cfg.plan == StagePlan::Head && !cfg.fixed_fpn) {
    throw std::invalid_argument("a head-only search needs fixed_fpn");
  }
  validate(cfg.fixed_head);
  if (cfg.fixed_fpn) {
    validate(*cfg.fixed_fpn, SpaceConfig{.fpn_blocks = static_cast<int>(cfg.fixed_fpn->blocks.size())});
  }
  if (cfg.surrogate.planted && cfg.plan != StagePlan::Head) {
    validate(cfg.surrogate.planted->fpn, cfg.space);
  }
}

nlohmann::json to_json(const SearchConfig& cfg) {
  nlohmann::json j;
  j["stage"] = plan_name(cfg.plan);
  j["space"] = {{"fpn_blocks", cfg.space.fpn_blocks},
                {"fpn_ops", cfg.space.fpn_ops},
                {"fpn_aggs", cfg.space.fpn_aggs}};
  j["samples"] = {{"fpn", cfg.samples_fpn}, {"head", cfg.samples_head}};
  j["top_k"] = {{"fpn", cfg.top_k_fpn}, {"head", cfg.top_k_head}};
  j["controller"] = {{"hidden_size", cfg.hidden_size},
                     {"embedding_size", cfg.embedding_size},
                     {"init_scale", cfg.init_scale}};
  j["ppo"] = {{"clip_epsilon", cfg.ppo.clip_epsilon},
              {"learning_rate", cfg.ppo.learning_rate},
              {"update_epochs", cfg.ppo.update_epochs},
              {"batch_size", cfg.ppo.batch_size},
              {"entropy_coeff", cfg.ppo.entropy_coeff},
              {"baseline_decay", cfg.ppo.baseline_decay},
              {"standardize_advantages", cfg.ppo.standardize_advantages}};
  j["seed"] = cfg.seed;
  j["checkpoint_every"] = cfg.checkpoint_every;
  j["evaluator"] = cfg.evaluator;
  const SurrogateSettings& s = cfg.surrogate;
  j["surrogate"] = {
      {"planted", s.planted ? nlohmann::json(to_json(*s.planted)) : nlohmann::json(nullptr)},
      {"weights",
       {{"token_agreement", s.weights.token_agreement},
        {"dangling_jaccard", s.weights.dangling_jaccard},
        {"share_indices", s.weights.share_indices}}},
      {"noise_sigma", s.noise_sigma},
      {"noise_seed", s.noise_seed},
      {"cost_penalty", s.cost_penalty}};
  j["external"] = {{"workers", cfg.external.workers},
                   {"timeout_s", cfg.external.timeout_s},
                   {"iterations", cfg.external.iterations},
                   {"seed", cfg.external.seed},
                   {"mode", mode_name(cfg.external.mode)}};
  j["fixed_fpn"] = cfg.fixed_fpn ? nlohmann::json(to_json(*cfg.fixed_fpn)) : nlohmann::json(nullptr);
  j["fixed_head"] = nlohmann::json(to_json(cfg.fixed_head));
  j["cost"] = {{"backbone_channels", cfg.cost.backbone_channels},
               {"fpn_width", cfg.cost.fpn_width},
               {"head_width", cfg.cost.head_width},
               {"image", {cfg.cost.image_h, cfg.cost.image_w}},
               {"num_classes", cfg.cost.num_classes}};
  return j;
}

SearchConfig search_config_from_json(const nlohmann::json& j) {
  SearchConfig cfg;
  try {
    if (j.contains("stage")) cfg.plan = plan_from_name(j["stage"].get<std::string>());
    if (j.contains("space")) {
      const auto& s = j["space"];
      read_if(s, "fpn_blocks", cfg.space.fpn_blocks);
      read_if(s, "fpn_ops", cfg.space.fpn_ops);
      read_if(s, "fpn_aggs", cfg.space.fpn_aggs);
    }
    if (j.contains("samples")) {
      read_if(j["samples"], "fpn", cfg.samples_fpn);
      read_if(j["samples"], "head", cfg.samples_head);
    }
    if (j.contains("top_k")) {
      read_if(j["top_k"], "fpn", cfg.top_k_fpn);
      read_if(j["top_k"], "head", cfg.top_k_head);
    }
    if (j.contains("controller")) {
      const auto& c = j["controller"];
      read_if(c, "hidden_size", cfg.hidden_size);
      read_if(c, "embedding_size", cfg.embedding_size);
      read_if(c, "init_scale", cfg.init_scale);
    }
    if (j.contains("ppo")) {
      const auto& p = j["ppo"];
      read_if(p, "clip_epsilon", cfg.ppo.clip_epsilon);
      read_if(p, "learning_rate", cfg.ppo.learning_rate);
      read_if(p, "update_epochs", cfg.ppo.update_epochs);
      read_if(p, "batch_size", cfg.ppo.batch_size);
      read_if(p, "entropy_coeff", cfg.ppo.entropy_coeff);
      read_if(p, "baseline_decay", cfg.ppo.baseline_decay);
      read_if(p, "standardize_advantages", cfg.ppo.standardize_advantages);
    }
    read_if(j, "seed", cfg.seed);
    read_if(j, "checkpoint_every", cfg.checkpoint_every);
    read_if(j, "evaluator", cfg.evaluator);
    if (j.contains("surrogate")) {
      const auto& s = j["surrogate"];
      if (s.contains("planted") && !s["planted"].is_null()) {
        cfg.surrogate.planted = genome_from_json(s["planted"]);
      }
      if (s.contains("weights")) {
        const auto& w = s["weights"];
        read_if(w, "token_agreement", cfg.surrogate.weights.token_agreement);
        read_if(w, "dangling_jaccard", cfg.surrogate.weights.dangling_jaccard);
        read_if(w, "share_indices", cfg.surrogate.weights.share_indices);
      }
      read_if(s, "noise_sigma", cfg.surrogate.noise_sigma);
      read_if(s, "noise_seed", cfg.surrogate.noise_seed);
      read_if(s, "cost_penalty", cfg.surrogate.cost_penalty);
    }
    if (j.contains("external")) {
      const auto& e = j["external"];
      read_if(e, "workers", cfg.external.workers);
      read_if(e, "timeout_s", cfg.external.timeout_s);
      read_if(e, "iterations", cfg.external.iterations);
      read_if(e, "seed", cfg.external.seed);
      if (e.contains("mode")) cfg.external.mode = mode_from_name(e["mode"].get<std::string>());
    }
    if (j.contains("fixed_fpn") && !j["fixed_fpn"].is_null()) {
      cfg.fixed_fpn = fpn_from_json(j["fixed_fpn"]);
    }
    if (j.contains("fixed_head") && !j["fixed_head"].is_null()) {
      cfg.fixed_head = head_from_json(j["fixed_head"]);
    }
    if (j.contains("cost")) {
      const auto& c = j["cost"];
      read_if(c, "backbone_channels", cfg.cost.backbone_channels);
      read_if(c, "fpn_width", cfg.cost.fpn_width);
      read_if(c, "head_width", cfg.cost.head_width);
      if (c.contains("image")) {
        cfg.cost.image_h = c["image"].at(0).get<int>();
        cfg.cost.image_w = c["image"].at(1).get<int>();
      }
      read_if(c, "num_classes", cfg.cost.num_classes);
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(fmt::format("malformed search config: {}", e.what()));
  }
  return cfg;
}

nlohmann::json to_json(const HistoryEntry& e) {
  nlohmann::ordered_json j;
  j["step"] = e.step;
  j["stage"] = e.stage == Stage::Fpn ? "fpn" : "head";
  j["genome"] = to_json(e.genome);
  j["reward"] = e.reward;
  return j;
}

HistoryEntry history_entry_from_json(const nlohmann::json& j) {
  HistoryEntry e;
  e.step = j.at("step").get<std::int64_t>();
  e.stage = j.at("stage") == "fpn" ? Stage::Fpn : Stage::Head;
  e.genome = genome_from_json(j.at("genome"));
  e.reward = j.at("reward").get<double>();
  return e;
}

std::vector<HistoryEntry> SearchHistory::leaderboard(Stage stage, std::size_t k) const {
  std::vector<HistoryEntry> rows;
  for (const HistoryEntry& e : entries_) {
    if (e.stage == stage) rows.push_back(e);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const HistoryEntry& a, const HistoryEntry& b) {
    return a.reward > b.reward;
  });
  if (rows.size() > k) rows.resize(k);
  return rows;
}

std::optional<HistoryEntry> SearchHistory::best(Stage stage) const {
  auto top = leaderboard(stage, 1);
  if (top.empty()) return std::nullopt;
  return top.front();
}

std::string SearchHistory::to_jsonl() const {
  std::string out;
  for (const HistoryEntry& e : entries_) {
    out += to_json(e).dump();
    out += '\n';
  }
  return out;
}

SearchHistory SearchHistory::from_jsonl(const std::string& text) {
  SearchHistory h;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    h.append(history_entry_from_json(nlohmann::json::parse(line)));
  }
  return h;
}

SearchHistory SearchHistory::load(const std::filesystem::path& path) {
  return from_jsonl(read_file(path));
}

SearchRunner::SearchRunner(SearchConfig cfg, std::filesystem::path out_dir)
    : cfg_(std::move(cfg)), out_dir_(std::move(out_dir)) {
  validate(cfg_);
  if (cfg_.evaluator == "surrogate" && !cfg_.surrogate.planted) {
    Rng planted_rng(mix_seed(cfg_.seed ^ kPlantedSalt));
    DecoderGenome planted;
    planted.fpn = random_fpn_genome(cfg_.space, planted_rng);
    planted.head = random_head_genome(planted_rng);
    cfg_.surrogate.planted = planted;
  }
  rng_.seed(mix_seed(cfg_.seed));
  if (!out_dir_.empty()) {
    std::filesystem::create_directories(out_dir_);
    std::filesystem::remove(out_dir_ / "history.jsonl");
    std::filesystem::remove(out_dir_ / "cache_fpn.jsonl");
    std::filesystem::remove(out_dir_ / "cache_head.jsonl");
    write_file_atomic(out_dir_ / "config.json", to_json(cfg_).dump(2) + "\n");
  }
  init_common();
  begin_stage(0);
}

SearchRunner::SearchRunner(ResumeTag, const std::filesystem::path& out_dir) : out_dir_(out_dir) {
  cfg_ = search_config_from_json(nlohmann::json::parse(read_file(out_dir_ / "config.json")));
  validate(cfg_);
  const auto state = nlohmann::json::parse(read_file(out_dir_ / "state.json"));
  if (state.at("version").get<int>() != kStateVersion) {
    throw std::runtime_error("unsupported search state version");
  }
  init_common();
  stage_index_ = state.at("stage_index").get<int>();
  samples_done_ = state.at("samples_done").get<int>();
  next_step_ = state.at("next_step").get<std::int64_t>();
  rejected_ = state.at("rejected").get<std::int64_t>();
  finished_ = state.at("finished").get<bool>();
  batches_done_ = state.at("batches_done").get<std::int64_t>();
  if (!state.at("stage1_winner").is_null()) stage1_winner_ = fpn_from_json(state["stage1_winner"]);
  restore_rng_state(rng_, state.at("rng").get<std::string>());
  if (!finished_) {
    if (cfg_.evaluator == "surrogate") {
      evaluator_ = std::make_unique<SurrogateEvaluator>(surrogate_for(current_stage()));
    }
    policy_ = load_policy(nlohmann::json::parse(read_file(out_dir_ / "policy.json")));
    open_cache();
  }
  if (auto* ext = dynamic_cast<ExternalEvaluator*>(evaluator_.get())) {
    ext->set_next_request_id(state.at("next_request_id").get<std::int64_t>());
  }

  // Samples appended after the last checkpoint are dropped; they will be
  // regenerated identically.
  history_ = SearchHistory::load(out_dir_ / "history.jsonl");
  history_.truncate(state.at("history_length").get<std::size_t>());
  write_file_atomic(out_dir_ / "history.jsonl", history_.to_jsonl());
  history_written_ = history_.size();
}

SearchRunner::~SearchRunner() = default;

std::unique_ptr<SearchRunner> SearchRunner::resume(const std::filesystem::path& out_dir) {
  return std::unique_ptr<SearchRunner>(new SearchRunner(ResumeTag{}, out_dir));
}

void SearchRunner::init_common() {
  switch (cfg_.plan) {
    case StagePlan::Fpn:
      stages_ = {Stage::Fpn};
      break;
    case StagePlan::Head:
      stages_ = {Stage::Head};
      break;
    case StagePlan::Progressive:
      stages_ = {Stage::Fpn, Stage::Head};
      break;
  }
  if (cfg_.evaluator == "external") {
    ExternalConfig ext{
        .commands = cfg_.external.workers,
        .pool = PoolOptions{.timeout = std::chrono::milliseconds(
                                static_cast<std::int64_t>(cfg_.external.timeout_s * 1000.0))},
        .iterations = cfg_.external.iterations,
        .seed = cfg_.external.seed,
        .mode = cfg_.external.mode,
    };
    evaluator_ = std::make_unique<ExternalEvaluator>(std::move(ext));
  }
}

Stage SearchRunner::current_stage() const { return stages_.at(stage_index_); }

int SearchRunner::stage_budget() const {
  return current_stage() == Stage::Fpn ? cfg_.samples_fpn : cfg_.samples_head;
}

SurrogateSpec SearchRunner::surrogate_for(Stage stage) const {
  return SurrogateSpec{
      .stage = eval_stage(stage),
      .planted = *cfg_.surrogate.planted,
      .weights = cfg_.surrogate.weights,
      .noise_sigma = cfg_.surrogate.noise_sigma,
      .noise_seed = cfg_.surrogate.noise_seed,
      .cost_penalty = cfg_.surrogate.cost_penalty,
      .cost = cfg_.cost,
  };
}

const FpnGenome& SearchRunner::head_stage_fpn() const {
  return cfg_.plan == StagePlan::Head ? *cfg_.fixed_fpn : *stage1_winner_;
}

void SearchRunner::begin_stage(int stage_index) {
  stage_index_ = stage_index;
  samples_done_ = 0;
  const Stage stage = current_stage();
  ControllerConfig controller =
      make_controller_config(stage, cfg_.space, cfg_.hidden_size, cfg_.embedding_size);
  controller.init_scale = cfg_.init_scale;
  // A fresh controller per stage.
  policy_ = PolicyState::initialize(controller, mix_seed(cfg_.seed + 1 + stage_index));
  if (cfg_.evaluator == "surrogate") {
    evaluator_ = std::make_unique<SurrogateEvaluator>(surrogate_for(stage));
  }
  open_cache();
}

// Stage rewards may differ for the same genome (the surrogate scores only the
// searched part), so every stage keeps its own cache.
void SearchRunner::open_cache() {
  const char* name = current_stage() == Stage::Fpn ? "cache_fpn.jsonl" : "cache_head.jsonl";
  cache_ = out_dir_.empty() ? std::make_unique<EvalCache>()
                            : std::make_unique<EvalCache>(out_dir_ / name);
}

void SearchRunner::run_batch() {
  const Stage stage = current_stage();
  const int n = std::min(cfg_.ppo.batch_size, stage_budget() - samples_done_);
  std::vector<Trajectory> batch;
  std::vector<EvalRequest> requests;
  const Rng rng_before = rng_;
  const std::int64_t rejected_before = rejected_;
  while (static_cast<int>(batch.size()) < n) {
    Trajectory t = sample(*policy_, rng_);
    DecoderGenome genome;
    if (stage == Stage::Fpn) {
      genome.fpn = decode_fpn(t.tokens, cfg_.space);
      genome.head = cfg_.fixed_head;
    } else {
      try {
        genome.head = decode_head(t.tokens);
      } catch (const SearchSpaceError&) {
        ++rejected_;  // j < i: resampled without consuming a step
        continue;
      }
      genome.fpn = head_stage_fpn();
    }
    batch.push_back(std::move(t));
    requests.push_back(EvalRequest{std::move(genome), eval_stage(stage)});
  }

  std::vector<Reward> rewards;
  try {
    rewards = evaluate_batch(requests, *evaluator_, *cache_);
  } catch (const EvaluationError&) {
    // Persist the state before this batch so a resume retries it.
    rng_ = rng_before;
    rejected_ = rejected_before;
    checkpoint();
    throw;
  }
  for (std::size_t k = 0; k < batch.size(); ++k) {
    batch[k].reward = rewards[k].value;
    history_.append(HistoryEntry{next_step_++, stage, requests[k].genome, rewards[k].value});
  }
  ppo_update(*policy_, batch, cfg_.ppo);
  samples_done_ += n;
  ++batches_done_;
  write_history();
}

void SearchRunner::write_history() {
  if (out_dir_.empty() || history_written_ == history_.size()) return;
  std::ofstream out(out_dir_ / "history.jsonl", std::ios::app);
  const auto& entries = history_.entries();
  for (std::size_t k = history_written_; k < entries.size(); ++k) {
    out << to_json(entries[k]).dump() << '\n';
  }
  history_written_ = entries.size();
}

void SearchRunner::finish_stage() {
  if (current_stage() == Stage::Fpn) stage1_winner_ = history_.best(Stage::Fpn)->genome.fpn;
  if (stage_index_ + 1 < static_cast<int>(stages_.size())) {
    begin_stage(stage_index_ + 1);
    return;
  }
  finished_ = true;
  policy_.reset();
}

bool SearchRunner::run(std::optional<int> max_batches) {
  int batches = 0;
  while (!finished_) {
    if (samples_done_ >= stage_budget()) {
      finish_stage();
      continue;
    }
    if (max_batches && batches >= *max_batches) break;
    run_batch();
    ++batches;
    if (cfg_.checkpoint_every > 0 && batches_done_ % cfg_.checkpoint_every == 0) checkpoint();
  }
  checkpoint();
  return finished_;
}

void SearchRunner::checkpoint() const {
  if (out_dir_.empty()) return;
  nlohmann::json state;
  state["version"] = kStateVersion;
  state["stage_index"] = stage_index_;
  state["samples_done"] = samples_done_;
  state["next_step"] = next_step_;
  state["rejected"] = rejected_;
  state["finished"] = finished_;
  state["batches_done"] = batches_done_;
  state["history_length"] = history_.size();
  state["stage1_winner"] =
      stage1_winner_ ? nlohmann::json(to_json(*stage1_winner_)) : nlohmann::json(nullptr);
  state["rng"] = rng_state(rng_);
  const auto* ext = dynamic_cast<const ExternalEvaluator*>(evaluator_.get());
  state["next_request_id"] = ext ? ext->next_request_id() : 0;
  if (policy_) write_file_atomic(out_dir_ / "policy.json", save_policy(*policy_).dump() + "\n");
  write_file_atomic(out_dir_ / "state.json", state.dump(2) + "\n");
  if (finished_) write_file_atomic(out_dir_ / "leaderboard.json", leaderboard_json().dump(2) + "\n");
}

nlohmann::json SearchRunner::leaderboard_json() const {
  const auto board = [&](Stage stage, int k) {
    nlohmann::json rows = nlohmann::json::array();
    for (const HistoryEntry& e : history_.leaderboard(stage, static_cast<std::size_t>(k))) {
      rows.push_back({{"step", e.step},
                      {"reward", e.reward},
                      {"hash", genome_hash_hex(e.genome)},
                      {"genome", nlohmann::json(to_json(e.genome))}});
    }
    return rows;
  };
  nlohmann::json j;
  j["fpn"] = board(Stage::Fpn, cfg_.top_k_fpn);
  j["head"] = board(Stage::Head, cfg_.top_k_head);
  j["samples"] = history_.size();
  j["rejected_samples"] = rejected_;
  return j;
}

}  // namespace nasfcos
