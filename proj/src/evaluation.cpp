#include "nasfcos/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <mutex>
#include <set>
#include <unordered_map>

#include <fmt/format.h>

#include "nasfcos/random.hpp"

namespace nasfcos {

namespace {

bool searches_fpn(EvalStage s) { return s != EvalStage::Head; }
bool searches_head(EvalStage s) { return s != EvalStage::Fpn; }

double dangling_jaccard(const FpnGenome& a, const FpnGenome& b) {
  const auto da = find_dangling(a);
  const auto db = find_dangling(b);
  if (da.empty() && db.empty()) return 1.0;
  std::vector<int> inter;
  std::vector<int> uni;
  std::set_intersection(da.begin(), da.end(), db.begin(), db.end(), std::back_inserter(inter));
  std::set_union(da.begin(), da.end(), db.begin(), db.end(), std::back_inserter(uni));
  return static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

std::int64_t unix_seconds() {
  return std::chrono::duration_cast<std::chrono::seconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

}  // namespace

std::string_view mode_name(RewardMode mode) {
  return mode == RewardMode::NegLoss ? "neg_loss" : "ap";
}

RewardMode mode_from_name(std::string_view name) {
  if (name == "neg_loss") return RewardMode::NegLoss;
  if (name == "ap") return RewardMode::Ap;
  throw std::invalid_argument(fmt::format("unknown reward mode \"{}\"", name));
}

Reward Reward::from_losses(const LossComponents& losses) {
  return Reward{-(losses.cls + losses.reg + losses.ctr), RewardMode::NegLoss, losses};
}

Reward Reward::from_ap(double ap) {
  if (!(ap >= 0.0 && ap <= 1.0)) throw std::invalid_argument("AP reward must lie in [0, 1]");
  return Reward{ap, RewardMode::Ap, std::nullopt};
}

EvaluationError::EvaluationError(std::int64_t request_id, const std::string& what)
    : std::runtime_error(fmt::format("request {}: {}", request_id, what)),
      request_id_(request_id) {}

Reward surrogate_reward(const SurrogateSpec& spec, const DecoderGenome& genome,
                        EvalStage stage) {
  if (stage != spec.stage) {
    throw std::invalid_argument(fmt::format("surrogate planted for stage {} asked to score stage {}",
                                            stage_name(spec.stage), stage_name(stage)));
  }
  const SurrogateWeights& w = spec.weights;
  std::vector<int> mine;
  std::vector<int> planted;
  double value = 0.0;
  if (searches_fpn(stage)) {
    if (genome.fpn.blocks.size() != spec.planted.fpn.blocks.size()) {
      throw std::invalid_argument("genome and planted FPN differ in block count");
    }
    mine = encode_fpn(genome.fpn).tokens;
    planted = encode_fpn(spec.planted.fpn).tokens;
    value += w.dangling_jaccard * dangling_jaccard(genome.fpn, spec.planted.fpn);
  }
  if (searches_head(stage)) {
    for (int k = 0; k < kHeadLayers; ++k) {
      mine.push_back(static_cast<int>(genome.head.ops[k]));
      planted.push_back(static_cast<int>(spec.planted.head.ops[k]));
    }
    const int distance = std::abs(genome.head.share_start_i - spec.planted.head.share_start_i) +
                         std::abs(genome.head.branch_split_j - spec.planted.head.branch_split_j);
    value += w.share_indices * (1.0 - distance / (2.0 * kHeadLayers));
  }
  std::size_t agree = 0;
  for (std::size_t k = 0; k < mine.size(); ++k) agree += mine[k] == planted[k];
  value += w.token_agreement * static_cast<double>(agree) / static_cast<double>(mine.size());

  if (spec.cost_penalty != 0.0) {
    const double macs = static_cast<double>(count(build_graph(genome, spec.cost)).macs);
    const double ref = static_cast<double>(count(build_graph(spec.planted, spec.cost)).macs);
    value -= spec.cost_penalty * macs / ref;
  }
  if (spec.noise_sigma > 0.0) {
    Rng rng(mix_seed(spec.noise_seed ^ genome_hash(genome)));
    value += spec.noise_sigma * standard_normal(rng);
  }
  return Reward{value, RewardMode::NegLoss, std::nullopt};
}

double surrogate_optimum(const SurrogateSpec& spec) {
  double best = spec.weights.token_agreement;
  if (searches_fpn(spec.stage)) best += spec.weights.dangling_jaccard;
  if (searches_head(spec.stage)) best += spec.weights.share_indices;
  return best;
}

nlohmann::json to_json(const EvalRecord& record) {
  nlohmann::json j;
  j["hash"] = record.hash;
  j["reward"] = record.reward.value;
  j["mode"] = mode_name(record.reward.mode);
  if (record.reward.components) {
    const auto& c = *record.reward.components;
    j["components"] = {{"cls", c.cls}, {"reg", c.reg}, {"ctr", c.ctr}};
  }
  j["evaluator"] = record.evaluator;
  j["timestamp"] = record.timestamp;
  return j;
}

EvalRecord record_from_json(const nlohmann::json& j) {
  EvalRecord r;
  r.hash = j.at("hash").get<std::string>();
  r.reward.value = j.at("reward").get<double>();
  r.reward.mode = mode_from_name(j.at("mode").get<std::string>());
  if (j.contains("components")) {
    const auto& c = j["components"];
    r.reward.components = LossComponents{c.at("cls").get<double>(), c.at("reg").get<double>(),
                                         c.at("ctr").get<double>()};
  }
  r.evaluator = j.at("evaluator").get<std::string>();
  r.timestamp = j.at("timestamp").get<std::int64_t>();
  return r;
}

EvalCache::EvalCache(std::filesystem::path path) : path_(std::move(path)) {
  if (std::filesystem::exists(*path_)) {
    std::ifstream in(*path_);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      EvalRecord r = record_from_json(nlohmann::json::parse(line));
      records_.emplace(r.hash, std::move(r));
    }
  }
  log_.open(*path_, std::ios::app);
  if (!log_) throw std::runtime_error(fmt::format("cannot open cache file {}", path_->string()));
}

std::optional<EvalRecord> EvalCache::find(const std::string& hash) const {
  std::shared_lock lock(mutex_);
  const auto it = records_.find(hash);
  if (it == records_.end()) return std::nullopt;
  return it->second;
}

bool EvalCache::insert(const EvalRecord& record) {
  std::unique_lock lock(mutex_);
  if (!records_.emplace(record.hash, record).second) return false;
  if (log_.is_open()) {
    log_ << to_json(record).dump() << '\n';
    log_.flush();
  }
  return true;
}

std::size_t EvalCache::size() const {
  std::shared_lock lock(mutex_);
  return records_.size();
}

std::vector<Reward> Evaluator::run(std::span<const EvalRequest> requests) {
  dispatches_ += requests.size();
  return run_batch(requests);
}

std::vector<Reward> SurrogateEvaluator::run_batch(std::span<const EvalRequest> requests) {
  std::vector<Reward> out;
  out.reserve(requests.size());
  for (const EvalRequest& r : requests) out.push_back(surrogate_reward(spec_, r.genome, r.stage));
  return out;
}

ExternalEvaluator::ExternalEvaluator(ExternalConfig config)
    : config_(std::move(config)), pool_(config_.commands, config_.pool) {}

std::vector<Reward> ExternalEvaluator::run_batch(std::span<const EvalRequest> requests) {
  std::vector<WireRequest> wire;
  wire.reserve(requests.size());
  for (const EvalRequest& r : requests) {
    wire.push_back(WireRequest{.id = next_id_++,
                               .stage = r.stage,
                               .genome = r.genome,
                               .iterations = config_.iterations,
                               .seed = config_.seed});
  }
  const std::vector<WireResponse> responses = pool_.dispatch(wire);
  std::vector<Reward> out;
  out.reserve(responses.size());
  for (const WireResponse& resp : responses) {
    if (!resp.ok) throw EvaluationError(resp.id, resp.message.value_or("evaluation failed"));
    out.push_back(reward_from_response(resp, config_.mode));
  }
  return out;
}

Reward reward_from_response(const WireResponse& response, RewardMode mode) {
  if (!std::isfinite(response.reward)) {
    throw ProtocolError(fmt::format("response {} carries a non-finite reward", response.id));
  }
  if (mode == RewardMode::Ap) {
    if (response.reward < 0.0 || response.reward > 1.0) {
      throw ProtocolError(fmt::format("response {}: AP reward outside [0, 1]", response.id));
    }
    return Reward{response.reward, RewardMode::Ap, response.components};
  }
  if (response.components) {
    const Reward r = Reward::from_losses(*response.components);
    if (std::abs(r.value - response.reward) > 1e-6 * std::max(1.0, std::abs(r.value))) {
      throw ProtocolError(fmt::format(
          "response {}: reward {} disagrees with its loss components", response.id,
          response.reward));
    }
    return r;
  }
  return Reward{response.reward, RewardMode::NegLoss, std::nullopt};
}

std::vector<Reward> evaluate_batch(std::span<const EvalRequest> requests,
                                   Evaluator& evaluator, EvalCache& cache) {
  std::vector<std::optional<Reward>> results(requests.size());
  std::vector<std::string> hashes(requests.size());
  std::vector<EvalRequest> misses;
  std::unordered_map<std::string, std::size_t> miss_index;
  for (std::size_t k = 0; k < requests.size(); ++k) {
    hashes[k] = genome_hash_hex(requests[k].genome);
    if (auto hit = cache.find(hashes[k])) {
      if (hit->reward.mode != evaluator.mode()) {
        throw EvaluationError(-1, "reward mode mismatch between cache and evaluator");
      }
      results[k] = hit->reward;
    } else if (miss_index.emplace(hashes[k], misses.size()).second) {
      misses.push_back(requests[k]);
    }
  }
  if (!misses.empty()) {
    const std::vector<Reward> fresh = evaluator.run(misses);
    const std::int64_t now = unix_seconds();
    for (std::size_t m = 0; m < misses.size(); ++m) {
      if (fresh[m].mode != evaluator.mode()) {
        throw EvaluationError(-1, "evaluator returned a reward of the wrong mode");
      }
      cache.insert(EvalRecord{genome_hash_hex(misses[m].genome), fresh[m], evaluator.id(), now});
    }
    for (std::size_t k = 0; k < requests.size(); ++k) {
      if (!results[k]) results[k] = fresh[miss_index.at(hashes[k])];
    }
  }
  std::vector<Reward> out;
  out.reserve(results.size());
  for (auto& r : results) out.push_back(*r);
  return out;
}

Reward evaluate(const DecoderGenome& genome, EvalStage stage, Evaluator& evaluator,
                EvalCache& cache) {
  const EvalRequest request{genome, stage};
  return evaluate_batch(std::span(&request, 1), evaluator, cache).front();
}

}  // namespace nasfcos
