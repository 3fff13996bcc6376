#ifndef NASFCOS_POLICY_HPP_
#define NASFCOS_POLICY_HPP_

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "nasfcos/random.hpp"
#include "nasfcos/search_space.hpp"

namespace nasfcos {

class PolicyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ControllerConfig {
  Stage stage = Stage::Fpn;
  std::vector<int> vocab;  // cardinality of every token position
  int hidden_size = 100;
  int embedding_size = 100;
  double init_scale = 0.1;  // weights start uniform in [-init_scale, init_scale]
};

ControllerConfig make_controller_config(Stage stage, const SpaceConfig& space = {},
                                        int hidden_size = 100,
                                        int embedding_size = 100);

struct PpoConfig {
  double clip_epsilon = 0.2;
  double learning_rate = 3.5e-4;
  int update_epochs = 4;
  int batch_size = 10;
  double entropy_coeff = 1e-3;
  double baseline_decay = 0.95;
  bool standardize_advantages = true;
};

void validate(const PpoConfig& cfg);

// Named slice of the flat parameter vector; matrices are column-major.
struct TensorSlot {
  std::string name;
  int rows = 0;
  int cols = 0;
  Eigen::Index offset = 0;
};

// Parameter layout of the controller:
//   lstm.w_x (4H x E), lstm.w_h (4H x H), lstm.bias (4H), start (E),
//   embed.p (vocab[p] x E) for every position but the last (the embedding of
//   the token chosen at p is the LSTM input at p + 1),
//   out_w.p (vocab[p] x H), out_b.p (vocab[p]).
// Gate order inside the 4H blocks is input, forget, cell, output.
std::vector<TensorSlot> parameter_layout(const ControllerConfig& cfg);

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct PolicyState {
  ControllerConfig config;
  Eigen::VectorXd params;
  AdamState adam;
  std::optional<double> baseline;  // EMA of rewards, set by the first update

  static PolicyState initialize(const ControllerConfig& cfg, std::uint64_t seed);
  const TensorSlot& slot(const std::string& name) const;
  const std::vector<TensorSlot>& layout() const { return layout_; }

 private:
  std::vector<TensorSlot> layout_;
  friend PolicyState load_policy(const nlohmann::json&);
};

struct Trajectory {
  ActionSequence tokens;
  std::vector<double> log_probs;
  std::vector<double> entropy;
  std::optional<double> reward;
};

// Draws one token sequence autoregressively.
Trajectory sample(const PolicyState& state, Rng& rng);

// Per-token log-probabilities of `seq` under the current parameters.
std::vector<double> log_prob(const PolicyState& state, const ActionSequence& seq);

// Per-position categorical distributions along `seq` (teacher forced).
std::vector<Eigen::VectorXd> token_distributions(const PolicyState& state,
                                                 const ActionSequence& seq);

struct SurrogateValue {
  double objective = 0.0;
  double mean_entropy = 0.0;
  double clip_fraction = 0.0;
};

// Clipped surrogate averaged over every token of the batch plus the entropy
// bonus. Old log-probs come from the trajectories. Writes the gradient with
// respect to state.params into `grad` when non-null.
SurrogateValue clipped_surrogate(const PolicyState& state,
                                 std::span<const Trajectory> batch,
                                 std::span<const double> advantages,
                                 const PpoConfig& cfg, Eigen::VectorXd* grad);

std::vector<double> compute_advantages(std::span<const Trajectory> batch,
                                       double baseline, const PpoConfig& cfg);

struct UpdateStats {
  double objective = 0.0;
  double mean_entropy = 0.0;
  double clip_fraction = 0.0;
  double mean_reward = 0.0;
  double baseline = 0.0;  // after the update
  int steps_taken = 0;
};

UpdateStats ppo_update(PolicyState& state, std::span<const Trajectory> batch,
                       const PpoConfig& cfg);

// Versioned JSON checkpoint holding named tensors, optimizer moments and the
// baseline. Doubles round-trip exactly.
nlohmann::json save_policy(const PolicyState& state);
PolicyState load_policy(const nlohmann::json& j);

}  // namespace nasfcos

#endif  // NASFCOS_POLICY_HPP_
