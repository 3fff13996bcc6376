#include <cmath>
#include <cstring>
#include <map>

#include <fmt/format.h>

#include "doctest.h"
#include "nasfcos/policy.hpp"

using namespace nasfcos;
using Eigen::VectorXd;

namespace {

ControllerConfig toy_config(std::vector<int> vocab, int hidden = 3, int embed = 2) {
  ControllerConfig cfg;
  cfg.vocab = std::move(vocab);
  cfg.hidden_size = hidden;
  cfg.embedding_size = embed;
  cfg.init_scale = 0.5;
  return cfg;
}

double total_log_prob(const PolicyState& s, const ActionSequence& seq) {
  double sum = 0.0;
  for (double lp : log_prob(s, seq)) sum += lp;
  return sum;
}

void set_slot(PolicyState& s, const std::string& name, double value) {
  const TensorSlot& slot = s.slot(name);
  s.params.segment(slot.offset, static_cast<Eigen::Index>(slot.rows) * slot.cols).setConstant(value);
}

}  // namespace

TEST_CASE("parameter layout") {
  const auto cfg = toy_config({3, 4, 2}, 5, 4);
  const auto layout = parameter_layout(cfg);
  std::map<std::string, std::pair<int, int>> shapes;
  Eigen::Index offset = 0;
  for (const auto& s : layout) {
    CHECK(s.offset == offset);
    offset += static_cast<Eigen::Index>(s.rows) * s.cols;
    shapes[s.name] = {s.rows, s.cols};
  }
  CHECK(shapes["lstm.w_x"] == std::pair{20, 4});
  CHECK(shapes["lstm.w_h"] == std::pair{20, 5});
  CHECK(shapes["lstm.bias"] == std::pair{20, 1});
  CHECK(shapes["start"] == std::pair{4, 1});
  CHECK(shapes["embed.0"] == std::pair{3, 4});
  CHECK(shapes["embed.1"] == std::pair{4, 4});
  CHECK(shapes.count("embed.2") == 0);
  CHECK(shapes["out_w.2"] == std::pair{2, 5});
  CHECK(shapes["out_b.1"] == std::pair{4, 1});
  const auto state = PolicyState::initialize(cfg, 1);
  CHECK(state.params.size() == offset);
  CHECK(state.params.cwiseAbs().maxCoeff() <= 0.5);
  CHECK_THROWS_AS(state.slot("nope"), PolicyError);
}

TEST_CASE("controller vocabularies follow the action space") {
  const auto fpn = make_controller_config(Stage::Fpn, {.fpn_blocks = 2, .fpn_ops = 3});
  CHECK(fpn.vocab == std::vector<int>{3, 3, 3, 3, 2, 4, 4, 3, 3, 2});
  const auto head = make_controller_config(Stage::Head);
  CHECK(head.vocab == std::vector<int>(8, 7));
}

TEST_CASE("sampling is deterministic and self-consistent") {
  const auto state = PolicyState::initialize(toy_config({3, 4, 2, 5}), 11);
  Rng a(4), b(4);
  for (int k = 0; k < 50; ++k) {
    const Trajectory ta = sample(state, a);
    const Trajectory tb = sample(state, b);
    CHECK(ta.tokens == tb.tokens);
    CHECK(ta.log_probs == tb.log_probs);
    const auto lp = log_prob(state, ta.tokens);
    REQUIRE(lp.size() == 4);
    for (int p = 0; p < 4; ++p) {
      CHECK(std::abs(lp[p] - ta.log_probs[p]) < 1e-12);
      CHECK(ta.log_probs[p] <= 0.0);
    }
  }
}

TEST_CASE("log_prob rejects invalid tokens") {
  const auto state = PolicyState::initialize(toy_config({3, 4}), 1);
  CHECK_THROWS(log_prob(state, {Stage::Fpn, {3, 0}}));
  CHECK_THROWS(log_prob(state, {Stage::Fpn, {0}}));
}

TEST_CASE("distributions are normalized") {
  const auto state = PolicyState::initialize(make_controller_config(Stage::Fpn, {}, 16, 8), 2);
  Rng rng(1);
  for (int k = 0; k < 20; ++k) {
    for (const auto& d : token_distributions(state, sample(state, rng).tokens)) {
      CHECK(std::abs(d.sum() - 1.0) < 1e-12);
      CHECK(d.minCoeff() >= 0.0);
    }
  }
}

TEST_CASE("sequence probabilities sum to one over a reduced space") {
  // 1 block, 2 ops, 1 agg: 3 * 3 * 2 * 2 * 1 = 36 genomes.
  const auto cfg = make_controller_config(Stage::Fpn, {.fpn_blocks = 1, .fpn_ops = 2, .fpn_aggs = 1}, 8, 4);
  auto state = PolicyState::initialize(cfg, 3);
  auto e = enumerate_space(1, 2, 1);
  double total = 0.0;
  int count = 0;
  while (auto g = e.next()) {
    total += std::exp(total_log_prob(state, encode_fpn(*g)));
    ++count;
  }
  CHECK(count == 36);
  CHECK(std::abs(total - 1.0) < 1e-6);
}

TEST_CASE("zero logits give uniform tokens") {
  auto cfg = make_controller_config(Stage::Fpn, {.fpn_blocks = 2}, 4, 3);
  auto state = PolicyState::initialize(cfg, 1);
  state.params.setZero();
  Rng rng(99);
  const int n = 100000;
  std::vector<std::vector<int>> counts;
  for (int v : cfg.vocab) counts.emplace_back(v, 0);
  for (int k = 0; k < n; ++k) {
    const Trajectory t = sample(state, rng);
    for (std::size_t p = 0; p < t.tokens.tokens.size(); ++p) ++counts[p][t.tokens.tokens[p]];
    if (k == 0) {
      CHECK(t.entropy[2] == doctest::Approx(std::log(5.0)));
      CHECK(t.entropy[4] == doctest::Approx(std::log(2.0)));
    }
  }
  for (std::size_t p = 0; p < counts.size(); ++p) {
    const double q = 1.0 / cfg.vocab[p];
    const double sigma = std::sqrt(n * q * (1.0 - q));
    for (int c : counts[p]) CHECK(std::abs(c - n * q) <= 3.0 * sigma);
  }
}

TEST_CASE("one-hot logits make the argmax sequence certain") {
  auto state = PolicyState::initialize(toy_config({3, 4, 2}), 5);
  // Large bias on token 1 of every position dominates the hidden state.
  for (int p = 0; p < 3; ++p) {
    set_slot(state, fmt::format("out_w.{}", p), 0.0);
    const TensorSlot& b = state.slot(fmt::format("out_b.{}", p));
    state.params.segment(b.offset, b.rows).setConstant(-50.0);
    state.params[b.offset + 1] = 50.0;
  }
  CHECK(std::abs(total_log_prob(state, {Stage::Fpn, {1, 1, 1}})) < 1e-12);
}

namespace {

struct GradFixture {
  PolicyState state;
  std::vector<Trajectory> batch;
  std::vector<double> adv;
  PpoConfig cfg;
};

// Old log-probs from one parameter vector, evaluation at a perturbed one, so
// ratios differ from 1.
GradFixture grad_fixture(std::uint64_t seed, double spread) {
  GradFixture f{PolicyState::initialize(toy_config({3, 4}), seed), {}, {}, {}};
  Rng rng(seed);
  for (int k = 0; k < 6; ++k) {
    f.batch.push_back(sample(f.state, rng));
    f.adv.push_back(standard_normal(rng));
  }
  for (Eigen::Index k = 0; k < f.state.params.size(); ++k) {
    f.state.params[k] += spread * standard_normal(rng);
  }
  f.cfg.entropy_coeff = 0.01;
  return f;
}

}  // namespace

TEST_CASE("surrogate gradient matches central differences") {
  int clipped_seen = 0;
  for (std::uint64_t seed : {1, 2, 3, 4}) {
    GradFixture f = grad_fixture(seed, seed <= 2 ? 0.05 : 0.4);
    // Keep every ratio away from the clip boundaries, where the surrogate
    // has a kink.
    for (const Trajectory& t : f.batch) {
      const auto lp = log_prob(f.state, t.tokens);
      for (std::size_t p = 0; p < lp.size(); ++p) {
        const double r = std::exp(lp[p] - t.log_probs[p]);
        REQUIRE(std::abs(r - 0.8) > 1e-3);
        REQUIRE(std::abs(r - 1.2) > 1e-3);
        clipped_seen += r < 0.8 || r > 1.2;
      }
    }
    VectorXd grad;
    clipped_surrogate(f.state, f.batch, f.adv, f.cfg, &grad);
    REQUIRE(grad.size() == f.state.params.size());
    const double h = 1e-5;
    double worst = 0.0;
    for (Eigen::Index k = 0; k < grad.size(); ++k) {
      PolicyState plus = f.state, minus = f.state;
      plus.params[k] += h;
      minus.params[k] -= h;
      const double numeric = (clipped_surrogate(plus, f.batch, f.adv, f.cfg, nullptr).objective -
                              clipped_surrogate(minus, f.batch, f.adv, f.cfg, nullptr).objective) /
                             (2 * h);
      const double scale = std::max({std::abs(numeric), std::abs(grad[k]), 1e-6});
      worst = std::max(worst, std::abs(numeric - grad[k]) / scale);
    }
    CHECK(worst < 1e-4);
  }
  // The fixture crosses into the clipped branch somewhere.
  CHECK(clipped_seen > 0);
}

TEST_CASE("first-epoch ratios are one") {
  auto state = PolicyState::initialize(toy_config({3, 4, 5}), 8);
  Rng rng(2);
  std::vector<Trajectory> batch;
  std::vector<double> adv;
  for (int k = 0; k < 8; ++k) {
    batch.push_back(sample(state, rng));
    adv.push_back(k % 2 ? 1.0 : -1.0);
  }
  PpoConfig cfg;
  const auto v = clipped_surrogate(state, batch, adv, cfg, nullptr);
  CHECK(v.clip_fraction == 0.0);
  // objective = mean_tokens(A) + c * mean entropy, with r = 1.
  CHECK(v.objective == doctest::Approx(0.0 + cfg.entropy_coeff * v.mean_entropy).epsilon(1e-12));
}

TEST_CASE("zero advantages leave parameters bitwise unchanged") {
  auto state = PolicyState::initialize(toy_config({3, 4, 2}), 8);
  Rng rng(2);
  std::vector<Trajectory> batch;
  for (int k = 0; k < 10; ++k) {
    batch.push_back(sample(state, rng));
    batch.back().reward = 0.75;
  }
  state.baseline = 0.75;
  const VectorXd before = state.params;
  const auto stats = ppo_update(state, batch, PpoConfig{});
  CHECK(stats.steps_taken == 0);
  CHECK(std::memcmp(before.data(), state.params.data(), sizeof(double) * before.size()) == 0);
  CHECK(state.adam.step == 0);
  CHECK(*state.baseline == 0.75);

  // Same without standardization and without entropy bonus.
  PpoConfig raw;
  raw.standardize_advantages = false;
  raw.entropy_coeff = 0.0;
  ppo_update(state, batch, raw);
  CHECK(std::memcmp(before.data(), state.params.data(), sizeof(double) * before.size()) == 0);
}

TEST_CASE("advantages and baseline") {
  std::vector<Trajectory> batch(4);
  const double rewards[] = {1.0, 2.0, 3.0, 6.0};
  for (int k = 0; k < 4; ++k) batch[k].reward = rewards[k];
  PpoConfig raw;
  raw.standardize_advantages = false;
  CHECK(compute_advantages(batch, 2.0, raw) == std::vector<double>{-1.0, 0.0, 1.0, 4.0});
  PpoConfig std_cfg;
  const auto a = compute_advantages(batch, 2.0, std_cfg);
  // mean 3, population std sqrt(3.5)
  CHECK(a[0] == doctest::Approx(-2.0 / std::sqrt(3.5)));
  CHECK(a[3] == doctest::Approx(3.0 / std::sqrt(3.5)));

  auto state = PolicyState::initialize(toy_config({3}), 1);
  Rng rng(1);
  for (auto& t : batch) {
    const double r = *t.reward;
    t = sample(state, rng);
    t.reward = r;
  }
  ppo_update(state, batch, PpoConfig{});
  // Baseline starts at the first reward, then one EMA step toward the mean 3.
  CHECK(*state.baseline == doctest::Approx(0.95 * 1.0 + 0.05 * 3.0));
}

TEST_CASE("ppo_update rejects bad batches") {
  auto state = PolicyState::initialize(toy_config({3}), 1);
  Rng rng(1);
  std::vector<Trajectory> batch{sample(state, rng)};
  CHECK_THROWS_WITH_AS(ppo_update(state, batch, PpoConfig{}), "invalid reward", PolicyError);
  batch[0].reward = std::nan("");
  CHECK_THROWS_WITH_AS(ppo_update(state, batch, PpoConfig{}), "invalid reward", PolicyError);
  CHECK_THROWS_WITH_AS(ppo_update(state, std::span<const Trajectory>{}, PpoConfig{}),
                       "empty batch", PolicyError);
  PpoConfig bad;
  bad.clip_epsilon = 1.0;
  CHECK_THROWS(validate(bad));
  bad = {};
  bad.batch_size = 0;
  CHECK_THROWS(validate(bad));
}

TEST_CASE("bandit converges to the rewarding token") {
  auto state = PolicyState::initialize(toy_config({5}, 8, 4), 21);
  PpoConfig cfg;
  cfg.learning_rate = 0.01;
  Rng rng(5);
  int updates = 0;
  double p_target = 0.0;
  for (; updates < 500; ++updates) {
    std::vector<Trajectory> batch;
    for (int k = 0; k < cfg.batch_size; ++k) {
      batch.push_back(sample(state, rng));
      batch.back().reward = batch.back().tokens.tokens[0] == 3 ? 1.0 : 0.0;
    }
    ppo_update(state, batch, cfg);
    p_target = std::exp(log_prob(state, {Stage::Fpn, {3}})[0]);
    if (p_target > 0.95) break;
  }
  MESSAGE("updates to converge: " << updates + 1);
  CHECK(p_target > 0.95);
  CHECK(updates < 500);
}

TEST_CASE("checkpoint round trip is exact") {
  auto state = PolicyState::initialize(toy_config({3, 4}), 7);
  Rng rng(3);
  std::vector<Trajectory> batch;
  for (int k = 0; k < 5; ++k) {
    batch.push_back(sample(state, rng));
    batch.back().reward = 0.1 * k;
  }
  ppo_update(state, batch, PpoConfig{});
  const auto text = save_policy(state).dump();
  const PolicyState back = load_policy(nlohmann::json::parse(text));
  CHECK(back.params == state.params);
  CHECK(back.adam.m == state.adam.m);
  CHECK(back.adam.v == state.adam.v);
  CHECK(back.adam.step == state.adam.step);
  CHECK(back.baseline == state.baseline);
  CHECK(back.config.vocab == state.config.vocab);
  CHECK(back.layout().size() == state.layout().size());

  auto j = nlohmann::json::parse(text);
  j["version"] = 99;
  CHECK_THROWS(load_policy(j));
  j = nlohmann::json::parse(text);
  j["tensors"][0]["data"].erase(0);
  CHECK_THROWS(load_policy(j));
}
