#ifndef NASFCOS_ORCHESTRATOR_HPP_
#define NASFCOS_ORCHESTRATOR_HPP_

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "nasfcos/cost_model.hpp"
#include "nasfcos/evaluation.hpp"
#include "nasfcos/policy.hpp"
#include "nasfcos/search_space.hpp"

namespace nasfcos {

enum class StagePlan { Fpn, Head, Progressive };

struct SurrogateSettings {
  // Drawn from the search seed when absent.
  std::optional<DecoderGenome> planted;
  SurrogateWeights weights;
  double noise_sigma = 0.0;
  std::uint64_t noise_seed = 0;
  double cost_penalty = 0.0;
};

struct ExternalSettings {
  std::vector<std::string> workers;  // one shell command per worker process
  double timeout_s = 600.0;
  int iterations = 300;
  std::uint64_t seed = 0;
  RewardMode mode = RewardMode::NegLoss;
};

struct SearchConfig {
  StagePlan plan = StagePlan::Progressive;
  SpaceConfig space;
  int samples_fpn = 2800;
  int samples_head = 600;
  int top_k_fpn = 20;
  int top_k_head = 10;
  int hidden_size = 100;
  int embedding_size = 100;
  double init_scale = 0.1;
  PpoConfig ppo;
  std::uint64_t seed = 0;
  int checkpoint_every = 10;  // batches
  std::string evaluator = "surrogate";
  SurrogateSettings surrogate;
  ExternalSettings external;
  // FPN used by a head-only search.
  std::optional<FpnGenome> fixed_fpn;
  // Head attached to every FPN sample of the first stage.
  HeadGenome fixed_head = default_head();
  CostConfig cost;
};

void validate(const SearchConfig& cfg);
nlohmann::json to_json(const SearchConfig& cfg);
// Missing keys keep their defaults.
SearchConfig search_config_from_json(const nlohmann::json& j);

struct HistoryEntry {
  std::int64_t step = 0;
  Stage stage = Stage::Fpn;
  DecoderGenome genome;
  double reward = 0.0;

  friend bool operator==(const HistoryEntry&, const HistoryEntry&) = default;
};

nlohmann::json to_json(const HistoryEntry& e);
HistoryEntry history_entry_from_json(const nlohmann::json& j);

class SearchHistory {
 public:
  void append(HistoryEntry e) { entries_.push_back(std::move(e)); }
  const std::vector<HistoryEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  void truncate(std::size_t n) { entries_.resize(std::min(n, entries_.size())); }

  // Top k samples of `stage` by reward; equal rewards keep the earlier step
  // first.
  std::vector<HistoryEntry> leaderboard(Stage stage, std::size_t k) const;
  std::optional<HistoryEntry> best(Stage stage) const;

  std::string to_jsonl() const;
  static SearchHistory from_jsonl(const std::string& text);
  static SearchHistory load(const std::filesystem::path& path);

  friend bool operator==(const SearchHistory&, const SearchHistory&) = default;

 private:
  std::vector<HistoryEntry> entries_;
};

// Output directory layout:
//   config.json     config snapshot (planted genome resolved)
//   policy.json     controller checkpoint of the active stage
//   state.json      stage progress, rng state, rejected-sample count
//   history.jsonl   one line per evaluated sample
//   cache_fpn.jsonl, cache_head.jsonl
//                   append-only evaluation caches, one per stage
//   leaderboard.json
// An empty output path keeps everything in memory.
class SearchRunner {
 public:
  SearchRunner(SearchConfig cfg, std::filesystem::path out_dir = {});
  ~SearchRunner();

  // Reopens a run from its output directory; continuing produces exactly the
  // samples an uninterrupted run would have produced.
  static std::unique_ptr<SearchRunner> resume(const std::filesystem::path& out_dir);

  // Runs until the sample budget is spent, or for at most `max_batches`
  // batches. Returns true once the search is complete. A checkpoint is
  // written every cfg.checkpoint_every batches and whenever run returns.
  bool run(std::optional<int> max_batches = std::nullopt);

  const SearchConfig& config() const { return cfg_; }
  const SearchHistory& history() const { return history_; }
  std::int64_t rejected_samples() const { return rejected_; }
  std::optional<FpnGenome> stage1_winner() const { return stage1_winner_; }
  const PolicyState& policy() const { return *policy_; }
  const Evaluator& evaluator() const { return *evaluator_; }
  bool finished() const { return finished_; }

  void checkpoint() const;
  nlohmann::json leaderboard_json() const;

 private:
  struct ResumeTag {};
  SearchRunner(ResumeTag, const std::filesystem::path& out_dir);

  void init_common();
  void begin_stage(int stage_index);
  Stage current_stage() const;
  int stage_budget() const;
  void run_batch();
  void finish_stage();
  SurrogateSpec surrogate_for(Stage stage) const;
  const FpnGenome& head_stage_fpn() const;
  void write_history();
  void open_cache();

  SearchConfig cfg_;
  std::filesystem::path out_dir_;
  std::vector<Stage> stages_;
  int stage_index_ = 0;
  int samples_done_ = 0;
  std::int64_t next_step_ = 0;
  std::int64_t rejected_ = 0;
  bool finished_ = false;
  std::optional<FpnGenome> stage1_winner_;
  Rng rng_;
  std::optional<PolicyState> policy_;
  SearchHistory history_;
  std::unique_ptr<EvalCache> cache_;
  std::unique_ptr<Evaluator> evaluator_;
  std::int64_t batches_done_ = 0;
  std::size_t history_written_ = 0;
};

}  // namespace nasfcos

#endif  // NASFCOS_ORCHESTRATOR_HPP_
