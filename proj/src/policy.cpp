#include "nasfcos/policy.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace nasfcos {

namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using ConstMat = Eigen::Map<const MatrixXd>;
using ConstVec = Eigen::Map<const VectorXd>;
using Mat = Eigen::Map<MatrixXd>;
using Vec = Eigen::Map<VectorXd>;

constexpr int kCheckpointVersion = 1;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Offsets of every tensor in the flat vector, resolved once per call.
struct Offsets {
  Index w_x = 0, w_h = 0, bias = 0, start = 0;
  std::vector<Index> embed, out_w, out_b;
};

Offsets offsets_of(const std::vector<TensorSlot>& layout, std::size_t positions) {
  Offsets o;
  o.embed.resize(positions, -1);
  o.out_w.resize(positions);
  o.out_b.resize(positions);
  std::size_t k = 0;
  o.w_x = layout[k++].offset;
  o.w_h = layout[k++].offset;
  o.bias = layout[k++].offset;
  o.start = layout[k++].offset;
  for (std::size_t p = 0; p + 1 < positions; ++p) o.embed[p] = layout[k++].offset;
  for (std::size_t p = 0; p < positions; ++p) {
    o.out_w[p] = layout[k++].offset;
    o.out_b[p] = layout[k++].offset;
  }
  return o;
}

struct StepCache {
  VectorXd x, h_prev, c_prev;
  VectorXd gate_i, gate_f, gate_g, gate_o;
  VectorXd c, tanh_c, h;
  VectorXd probs, log_probs;
  int token = 0;
};

// Runs the controller over one sequence. `choose` picks the token at each
// position from the log-probabilities.
template <typename Choose>
std::vector<StepCache> rollout(const PolicyState& state, const Offsets& off,
                               Choose&& choose) {
  const ControllerConfig& cfg = state.config;
  const int hs = cfg.hidden_size;
  const int es = cfg.embedding_size;
  const double* theta = state.params.data();
  const ConstMat w_x(theta + off.w_x, 4 * hs, es);
  const ConstMat w_h(theta + off.w_h, 4 * hs, hs);
  const ConstVec bias(theta + off.bias, 4 * hs);

  const std::size_t n = cfg.vocab.size();
  std::vector<StepCache> steps(n);
  VectorXd h = VectorXd::Zero(hs);
  VectorXd c = VectorXd::Zero(hs);
  VectorXd x = ConstVec(theta + off.start, es);
  for (std::size_t p = 0; p < n; ++p) {
    StepCache& s = steps[p];
    s.x = x;
    s.h_prev = h;
    s.c_prev = c;
    const VectorXd z = w_x * x + w_h * h + bias;
    s.gate_i = z.segment(0, hs).unaryExpr(&sigmoid);
    s.gate_f = z.segment(hs, hs).unaryExpr(&sigmoid);
    s.gate_g = z.segment(2 * hs, hs).array().tanh();
    s.gate_o = z.segment(3 * hs, hs).unaryExpr(&sigmoid);
    s.c = s.gate_f.cwiseProduct(c) + s.gate_i.cwiseProduct(s.gate_g);
    s.tanh_c = s.c.array().tanh();
    s.h = s.gate_o.cwiseProduct(s.tanh_c);

    const int vocab = cfg.vocab[p];
    const ConstMat out_w(theta + off.out_w[p], vocab, hs);
    const ConstVec out_b(theta + off.out_b[p], vocab);
    const VectorXd logits = out_w * s.h + out_b;
    const double max_logit = logits.maxCoeff();
    const VectorXd shifted = logits.array() - max_logit;
    const double log_z = std::log(shifted.array().exp().sum());
    s.log_probs = shifted.array() - log_z;
    s.probs = s.log_probs.array().exp();

    s.token = choose(static_cast<int>(p), s);
    if (p + 1 < n) {
      const ConstMat embed(theta + off.embed[p], vocab, es);
      x = embed.row(s.token).transpose();
    }
    h = s.h;
    c = s.c;
  }
  return steps;
}

double entropy_of(const StepCache& s) {
  return -(s.probs.array() * s.log_probs.array()).sum();
}

void check_sequence(const ControllerConfig& cfg, const ActionSequence& seq) {
  if (seq.stage != cfg.stage || seq.tokens.size() != cfg.vocab.size()) {
    throw PolicyError("action sequence does not match the controller layout");
  }
  for (std::size_t p = 0; p < seq.tokens.size(); ++p) {
    if (seq.tokens[p] < 0 || seq.tokens[p] >= cfg.vocab[p]) {
      throw PolicyError(fmt::format("invalid token {} at position {}", seq.tokens[p], p));
    }
  }
}

// Accumulates d(objective)/d(params) for one sequence given the gradient of
// the objective with respect to each position's logits.
void backward(const PolicyState& state, const Offsets& off,
              const std::vector<StepCache>& steps,
              const std::vector<VectorXd>& dlogits, VectorXd& grad) {
  const ControllerConfig& cfg = state.config;
  const int hs = cfg.hidden_size;
  const int es = cfg.embedding_size;
  const double* theta = state.params.data();
  const ConstMat w_x(theta + off.w_x, 4 * hs, es);
  const ConstMat w_h(theta + off.w_h, 4 * hs, hs);
  Mat g_wx(grad.data() + off.w_x, 4 * hs, es);
  Mat g_wh(grad.data() + off.w_h, 4 * hs, hs);
  Vec g_bias(grad.data() + off.bias, 4 * hs);

  VectorXd dh_next = VectorXd::Zero(hs);
  VectorXd dc_next = VectorXd::Zero(hs);
  VectorXd dz(4 * hs);
  for (int p = static_cast<int>(steps.size()) - 1; p >= 0; --p) {
    const StepCache& s = steps[p];
    const int vocab = cfg.vocab[p];
    const ConstMat out_w(theta + off.out_w[p], vocab, hs);
    Mat(grad.data() + off.out_w[p], vocab, hs).noalias() += dlogits[p] * s.h.transpose();
    Vec(grad.data() + off.out_b[p], vocab) += dlogits[p];

    const VectorXd dh = out_w.transpose() * dlogits[p] + dh_next;
    const VectorXd dc =
        dh.cwiseProduct(s.gate_o).cwiseProduct((1.0 - s.tanh_c.array().square()).matrix()) +
        dc_next;
    const auto one = VectorXd::Ones(hs).array();
    dz.segment(0, hs) =
        (dc.array() * s.gate_g.array() * s.gate_i.array() * (one - s.gate_i.array())).matrix();
    dz.segment(hs, hs) =
        (dc.array() * s.c_prev.array() * s.gate_f.array() * (one - s.gate_f.array())).matrix();
    dz.segment(2 * hs, hs) =
        (dc.array() * s.gate_i.array() * (one - s.gate_g.array().square())).matrix();
    dz.segment(3 * hs, hs) =
        (dh.array() * s.tanh_c.array() * s.gate_o.array() * (one - s.gate_o.array())).matrix();

    g_wx.noalias() += dz * s.x.transpose();
    g_wh.noalias() += dz * s.h_prev.transpose();
    g_bias += dz;
    const VectorXd dx = w_x.transpose() * dz;
    if (p == 0) {
      Vec(grad.data() + off.start, es) += dx;
    } else {
      Mat g_embed(grad.data() + off.embed[p - 1], cfg.vocab[p - 1], es);
      g_embed.row(steps[p - 1].token) += dx.transpose();
    }
    dh_next = w_h.transpose() * dz;
    dc_next = dc.cwiseProduct(s.gate_f);
  }
}

}  // namespace

ControllerConfig make_controller_config(Stage stage, const SpaceConfig& space,
                                        int hidden_size, int embedding_size) {
  return ControllerConfig{
      .stage = stage,
      .vocab = action_space(stage, space),
      .hidden_size = hidden_size,
      .embedding_size = embedding_size,
  };
}

void validate(const PpoConfig& cfg) {
  if (!(cfg.clip_epsilon > 0.0 && cfg.clip_epsilon < 1.0)) {
    throw PolicyError("clip_epsilon must lie in (0, 1)");
  }
  if (cfg.batch_size < 1) throw PolicyError("batch_size must be at least 1");
  if (cfg.update_epochs < 1) throw PolicyError("update_epochs must be at least 1");
  if (!(cfg.learning_rate > 0.0)) throw PolicyError("learning_rate must be positive");
  if (!(cfg.baseline_decay >= 0.0 && cfg.baseline_decay < 1.0)) {
    throw PolicyError("baseline_decay must lie in [0, 1)");
  }
  if (!(cfg.entropy_coeff >= 0.0)) throw PolicyError("entropy_coeff must be non-negative");
}

std::vector<TensorSlot> parameter_layout(const ControllerConfig& cfg) {
  if (cfg.vocab.empty() || cfg.hidden_size < 1 || cfg.embedding_size < 1) {
    throw PolicyError("controller needs a non-empty vocabulary and positive sizes");
  }
  for (int v : cfg.vocab) {
    if (v < 1) throw PolicyError("every token position needs a vocabulary of at least 1");
  }
  const int hs = cfg.hidden_size;
  const int es = cfg.embedding_size;
  std::vector<TensorSlot> layout;
  Index offset = 0;
  const auto push = [&](std::string name, int rows, int cols) {
    layout.push_back({std::move(name), rows, cols, offset});
    offset += static_cast<Index>(rows) * cols;
  };
  push("lstm.w_x", 4 * hs, es);
  push("lstm.w_h", 4 * hs, hs);
  push("lstm.bias", 4 * hs, 1);
  push("start", es, 1);
  const std::size_t n = cfg.vocab.size();
  for (std::size_t p = 0; p + 1 < n; ++p) push(fmt::format("embed.{}", p), cfg.vocab[p], es);
  for (std::size_t p = 0; p < n; ++p) {
    push(fmt::format("out_w.{}", p), cfg.vocab[p], hs);
    push(fmt::format("out_b.{}", p), cfg.vocab[p], 1);
  }
  return layout;
}

PolicyState PolicyState::initialize(const ControllerConfig& cfg, std::uint64_t seed) {
  PolicyState state;
  state.config = cfg;
  state.layout_ = parameter_layout(cfg);
  const TensorSlot& last = state.layout_.back();
  const Index total = last.offset + static_cast<Index>(last.rows) * last.cols;
  state.params.resize(total);
  Rng rng(seed);
  for (Index k = 0; k < total; ++k) {
    state.params[k] = cfg.init_scale * (2.0 * uniform01(rng) - 1.0);
  }
  state.adam.m = VectorXd::Zero(total);
  state.adam.v = VectorXd::Zero(total);
  return state;
}

const TensorSlot& PolicyState::slot(const std::string& name) const {
  for (const TensorSlot& s : layout_) {
    if (s.name == name) return s;
  }
  throw PolicyError(fmt::format("no tensor named {}", name));
}

Trajectory sample(const PolicyState& state, Rng& rng) {
  const Offsets off = offsets_of(state.layout(), state.config.vocab.size());
  const auto steps = rollout(state, off, [&](int, const StepCache& s) {
    const double u = uniform01(rng);
    double cumulative = 0.0;
    const int vocab = static_cast<int>(s.probs.size());
    for (int k = 0; k < vocab; ++k) {
      cumulative += s.probs[k];
      if (u < cumulative) return k;
    }
    return vocab - 1;
  });
  Trajectory t;
  t.tokens.stage = state.config.stage;
  for (const StepCache& s : steps) {
    t.tokens.tokens.push_back(s.token);
    t.log_probs.push_back(s.log_probs[s.token]);
    t.entropy.push_back(entropy_of(s));
  }
  return t;
}

std::vector<Eigen::VectorXd> token_distributions(const PolicyState& state,
                                                 const ActionSequence& seq) {
  check_sequence(state.config, seq);
  const Offsets off = offsets_of(state.layout(), state.config.vocab.size());
  const auto steps =
      rollout(state, off, [&](int p, const StepCache&) { return seq.tokens[p]; });
  std::vector<VectorXd> out;
  for (const StepCache& s : steps) out.push_back(s.probs);
  return out;
}

std::vector<double> log_prob(const PolicyState& state, const ActionSequence& seq) {
  check_sequence(state.config, seq);
  const Offsets off = offsets_of(state.layout(), state.config.vocab.size());
  const auto steps =
      rollout(state, off, [&](int p, const StepCache&) { return seq.tokens[p]; });
  std::vector<double> out;
  for (const StepCache& s : steps) out.push_back(s.log_probs[s.token]);
  return out;
}

SurrogateValue clipped_surrogate(const PolicyState& state,
                                 std::span<const Trajectory> batch,
                                 std::span<const double> advantages,
                                 const PpoConfig& cfg, Eigen::VectorXd* grad) {
  if (batch.empty() || advantages.size() != batch.size()) {
    throw PolicyError("surrogate needs one advantage per trajectory");
  }
  const Offsets off = offsets_of(state.layout(), state.config.vocab.size());
  const double positions = static_cast<double>(state.config.vocab.size());
  const double scale = 1.0 / (positions * static_cast<double>(batch.size()));
  if (grad) *grad = VectorXd::Zero(state.params.size());

  SurrogateValue value;
  std::size_t clipped = 0;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const Trajectory& traj = batch[n];
    check_sequence(state.config, traj.tokens);
    if (traj.log_probs.size() != traj.tokens.tokens.size()) {
      throw PolicyError("trajectory log_probs do not match its tokens");
    }
    const auto steps = rollout(state, off, [&](int p, const StepCache&) {
      return traj.tokens.tokens[p];
    });
    const double adv = advantages[n];
    std::vector<VectorXd> dlogits(steps.size());
    for (std::size_t p = 0; p < steps.size(); ++p) {
      const StepCache& s = steps[p];
      const double ratio = std::exp(s.log_probs[s.token] - traj.log_probs[p]);
      const double clipped_ratio =
          std::clamp(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
      const double unclipped_term = ratio * adv;
      const double clipped_term = clipped_ratio * adv;
      // The unclipped branch is active whenever it attains the minimum.
      const bool unclipped_active = unclipped_term <= clipped_term;
      if (!unclipped_active) ++clipped;
      const double h = entropy_of(s);
      value.objective += scale * (std::min(unclipped_term, clipped_term) + cfg.entropy_coeff * h);
      value.mean_entropy += scale * h;
      if (!grad) continue;

      // d log pi(a) / d logits = onehot(a) - pi; d H / d logits = -pi (log pi + H).
      VectorXd d = VectorXd::Zero(s.probs.size());
      if (unclipped_active && adv != 0.0) {
        d = -s.probs;
        d[s.token] += 1.0;
        d *= unclipped_term;
      }
      if (cfg.entropy_coeff != 0.0) {
        d.array() -= cfg.entropy_coeff * s.probs.array() * (s.log_probs.array() + h);
      }
      dlogits[p] = d * scale;
    }
    if (grad) backward(state, off, steps, dlogits, *grad);
  }
  value.clip_fraction =
      static_cast<double>(clipped) / (positions * static_cast<double>(batch.size()));
  return value;
}

std::vector<double> compute_advantages(std::span<const Trajectory> batch,
                                       double baseline, const PpoConfig& cfg) {
  std::vector<double> adv;
  adv.reserve(batch.size());
  for (const Trajectory& t : batch) adv.push_back(*t.reward - baseline);
  if (cfg.standardize_advantages && adv.size() > 1) {
    double mean = 0.0;
    for (double a : adv) mean += a;
    mean /= static_cast<double>(adv.size());
    double var = 0.0;
    for (double a : adv) var += (a - mean) * (a - mean);
    const double stddev = std::sqrt(var / static_cast<double>(adv.size()));
    for (double& a : adv) {
      a -= mean;
      if (stddev > 1e-12) a /= stddev;
    }
  }
  return adv;
}

UpdateStats ppo_update(PolicyState& state, std::span<const Trajectory> batch,
                       const PpoConfig& cfg) {
  validate(cfg);
  if (batch.empty()) throw PolicyError("empty batch");
  double mean_reward = 0.0;
  for (const Trajectory& t : batch) {
    if (!t.reward || !std::isfinite(*t.reward)) throw PolicyError("invalid reward");
    mean_reward += *t.reward;
  }
  mean_reward /= static_cast<double>(batch.size());
  if (!state.baseline) state.baseline = *batch.front().reward;

  const std::vector<double> adv = compute_advantages(batch, *state.baseline, cfg);
  UpdateStats stats;
  stats.mean_reward = mean_reward;
  AdamState& adam = state.adam;
  // A batch without any advantage signal leaves the policy as it is; the
  // entropy bonus alone never moves it.
  const bool no_signal = std::all_of(adv.begin(), adv.end(), [](double a) { return a == 0.0; });
  VectorXd grad;
  for (int epoch = 0; epoch < cfg.update_epochs && !no_signal; ++epoch) {
    const SurrogateValue v = clipped_surrogate(state, batch, adv, cfg, &grad);
    if (epoch == 0) {
      stats.objective = v.objective;
      stats.mean_entropy = v.mean_entropy;
    }
    stats.clip_fraction = v.clip_fraction;
    // A vanishing gradient leaves parameters and moments untouched.
    if ((grad.array() == 0.0).all()) continue;
    ++adam.step;
    adam.m = adam.beta1 * adam.m + (1.0 - adam.beta1) * grad;
    adam.v = adam.beta2 * adam.v + (1.0 - adam.beta2) * grad.cwiseProduct(grad);
    const double bc1 = 1.0 - std::pow(adam.beta1, static_cast<double>(adam.step));
    const double bc2 = 1.0 - std::pow(adam.beta2, static_cast<double>(adam.step));
    state.params.array() += cfg.learning_rate * (adam.m.array() / bc1) /
                            ((adam.v.array() / bc2).sqrt() + adam.epsilon);
    ++stats.steps_taken;
  }
  state.baseline = cfg.baseline_decay * *state.baseline + (1.0 - cfg.baseline_decay) * mean_reward;
  stats.baseline = *state.baseline;
  return stats;
}

nlohmann::json save_policy(const PolicyState& state) {
  const ControllerConfig& cfg = state.config;
  nlohmann::json j;
  j["format"] = "nasfcos-policy";
  j["version"] = kCheckpointVersion;
  j["config"] = {{"stage", cfg.stage == Stage::Fpn ? "fpn" : "head"},
                 {"vocab", cfg.vocab},
                 {"hidden_size", cfg.hidden_size},
                 {"embedding_size", cfg.embedding_size},
                 {"init_scale", cfg.init_scale}};
  const auto slice = [](const VectorXd& v, const TensorSlot& s) {
    const auto n = static_cast<Index>(s.rows) * s.cols;
    return std::vector<double>(v.data() + s.offset, v.data() + s.offset + n);
  };
  nlohmann::json tensors = nlohmann::json::array();
  for (const TensorSlot& s : parameter_layout(cfg)) {
    tensors.push_back({{"name", s.name},
                       {"shape", {s.rows, s.cols}},
                       {"data", slice(state.params, s)},
                       {"adam_m", slice(state.adam.m, s)},
                       {"adam_v", slice(state.adam.v, s)}});
  }
  j["tensors"] = std::move(tensors);
  j["adam"] = {{"step", state.adam.step},
               {"beta1", state.adam.beta1},
               {"beta2", state.adam.beta2},
               {"epsilon", state.adam.epsilon}};
  j["baseline"] = state.baseline ? nlohmann::json(*state.baseline) : nlohmann::json(nullptr);
  return j;
}

PolicyState load_policy(const nlohmann::json& j) {
  try {
    if (j.at("format") != "nasfcos-policy") throw PolicyError("not a policy checkpoint");
    if (j.at("version").get<int>() != kCheckpointVersion) {
      throw PolicyError("unsupported policy checkpoint version");
    }
    const auto& jc = j.at("config");
    ControllerConfig cfg{
        .stage = jc.at("stage") == "fpn" ? Stage::Fpn : Stage::Head,
        .vocab = jc.at("vocab").get<std::vector<int>>(),
        .hidden_size = jc.at("hidden_size").get<int>(),
        .embedding_size = jc.at("embedding_size").get<int>(),
        .init_scale = jc.at("init_scale").get<double>(),
    };
    PolicyState state = PolicyState::initialize(cfg, 0);
    const auto& tensors = j.at("tensors");
    if (tensors.size() != state.layout_.size()) throw PolicyError("tensor count mismatch");
    for (std::size_t k = 0; k < tensors.size(); ++k) {
      const TensorSlot& s = state.layout_[k];
      const auto& jt = tensors[k];
      if (jt.at("name") != s.name ||
          jt.at("shape") != nlohmann::json::array({s.rows, s.cols})) {
        throw PolicyError(fmt::format("tensor {} does not match the layout", s.name));
      }
      const auto fill = [&](VectorXd& dst, const char* key) {
        const auto data = jt.at(key).get<std::vector<double>>();
        if (data.size() != static_cast<std::size_t>(s.rows) * s.cols) {
          throw PolicyError(fmt::format("tensor {} has the wrong size", s.name));
        }
        std::copy(data.begin(), data.end(), dst.data() + s.offset);
      };
      fill(state.params, "data");
      fill(state.adam.m, "adam_m");
      fill(state.adam.v, "adam_v");
    }
    const auto& ja = j.at("adam");
    state.adam.step = ja.at("step").get<std::int64_t>();
    state.adam.beta1 = ja.at("beta1").get<double>();
    state.adam.beta2 = ja.at("beta2").get<double>();
    state.adam.epsilon = ja.at("epsilon").get<double>();
    if (!j.at("baseline").is_null()) state.baseline = j["baseline"].get<double>();
    return state;
  } catch (const nlohmann::json::exception& e) {
    throw PolicyError(fmt::format("malformed policy checkpoint: {}", e.what()));
  }
}

}  // namespace nasfcos
