#ifndef NASFCOS_EVALUATION_HPP_
#define NASFCOS_EVALUATION_HPP_

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "nasfcos/cost_model.hpp"
#include "nasfcos/search_space.hpp"
#include "nasfcos/wire.hpp"
#include "nasfcos/worker_pool.hpp"

namespace nasfcos {

enum class RewardMode : std::uint8_t { NegLoss, Ap };

std::string_view mode_name(RewardMode mode);
RewardMode mode_from_name(std::string_view name);

struct Reward {
  double value = 0.0;
  RewardMode mode = RewardMode::NegLoss;
  std::optional<LossComponents> components;

  // Negative sum of the classification, regression and centerness losses.
  static Reward from_losses(const LossComponents& losses);
  static Reward from_ap(double ap);

  friend bool operator==(const Reward&, const Reward&) = default;
};

class EvaluationError : public std::runtime_error {
 public:
  EvaluationError(std::int64_t request_id, const std::string& what);
  std::int64_t request_id() const { return request_id_; }

 private:
  std::int64_t request_id_;
};

struct SurrogateWeights {
  double token_agreement = 1.0;   // fraction of matching tokens
  double dangling_jaccard = 1.0;  // FPN stages only
  double share_indices = 1.0;     // head stages only; 1 - L1 distance of (i, j) / 12
};

// Deterministic reward with a known maximizer. Matches are measured against
// `planted` on the parts of the genome searched in `stage`.
struct SurrogateSpec {
  EvalStage stage = EvalStage::Fpn;
  DecoderGenome planted;
  SurrogateWeights weights;
  double noise_sigma = 0.0;
  std::uint64_t noise_seed = 0;
  double cost_penalty = 0.0;  // times MACs(genome) / MACs(planted)
  CostConfig cost;
};

Reward surrogate_reward(const SurrogateSpec& spec, const DecoderGenome& genome,
                        EvalStage stage);

// Reward of the planted genome with noise and penalty removed.
double surrogate_optimum(const SurrogateSpec& spec);

struct EvalRecord {
  std::string hash;
  Reward reward;
  std::string evaluator;
  std::int64_t timestamp = 0;  // seconds since epoch
};

nlohmann::json to_json(const EvalRecord& record);
EvalRecord record_from_json(const nlohmann::json& j);

// Genome-hash keyed reward store. Reads may run concurrently; inserts are
// exclusive. When attached to a file, every new record is appended to it as
// one JSON line.
class EvalCache {
 public:
  EvalCache() = default;
  // Loads existing records from `path` (if present) and appends new ones.
  explicit EvalCache(std::filesystem::path path);

  std::optional<EvalRecord> find(const std::string& hash) const;
  // Returns false (and keeps the stored record) when the hash is present.
  bool insert(const EvalRecord& record);
  std::size_t size() const;

 private:
  mutable std::shared_mutex mutex_;
  std::map<std::string, EvalRecord> records_;
  std::optional<std::filesystem::path> path_;
  std::ofstream log_;
};

struct EvalRequest {
  DecoderGenome genome;
  EvalStage stage = EvalStage::Full;
};

class Evaluator {
 public:
  virtual ~Evaluator() = default;
  virtual std::string id() const = 0;
  virtual RewardMode mode() const = 0;
  // Number of genomes sent to the underlying evaluation so far.
  std::size_t dispatch_count() const { return dispatches_; }
  std::vector<Reward> run(std::span<const EvalRequest> requests);

 protected:
  virtual std::vector<Reward> run_batch(std::span<const EvalRequest> requests) = 0;

 private:
  std::size_t dispatches_ = 0;
};

class SurrogateEvaluator final : public Evaluator {
 public:
  explicit SurrogateEvaluator(SurrogateSpec spec) : spec_(std::move(spec)) {}
  std::string id() const override { return "surrogate"; }
  RewardMode mode() const override { return RewardMode::NegLoss; }
  const SurrogateSpec& spec() const { return spec_; }

 protected:
  std::vector<Reward> run_batch(std::span<const EvalRequest> requests) override;

 private:
  SurrogateSpec spec_;
};

struct ExternalConfig {
  std::vector<std::string> commands;
  PoolOptions pool;
  int iterations = 300;
  std::uint64_t seed = 0;
  RewardMode mode = RewardMode::NegLoss;
};

// Evaluates through worker processes speaking the wire protocol.
class ExternalEvaluator final : public Evaluator {
 public:
  explicit ExternalEvaluator(ExternalConfig config);
  std::string id() const override { return "external"; }
  RewardMode mode() const override { return config_.mode; }
  const WorkerPool& pool() const { return pool_; }
  // Id assigned to the next request; persisted to keep resumed runs aligned.
  std::int64_t next_request_id() const { return next_id_; }
  void set_next_request_id(std::int64_t id) { next_id_ = id; }

 protected:
  std::vector<Reward> run_batch(std::span<const EvalRequest> requests) override;

 private:
  ExternalConfig config_;
  WorkerPool pool_;
  std::int64_t next_id_ = 0;
};

// Converts a worker response into a reward, checking the loss components
// against the reported value.
Reward reward_from_response(const WireResponse& response, RewardMode mode);

// Cache-aware evaluation: hits return the stored reward without dispatch,
// misses (deduplicated within the batch) are dispatched together and stored.
std::vector<Reward> evaluate_batch(std::span<const EvalRequest> requests,
                                   Evaluator& evaluator, EvalCache& cache);
Reward evaluate(const DecoderGenome& genome, EvalStage stage, Evaluator& evaluator,
                EvalCache& cache);

}  // namespace nasfcos

#endif  // NASFCOS_EVALUATION_HPP_
