#include "nasfcos/search_space.hpp"

#include <limits>

#include <fmt/format.h>

namespace nasfcos {

namespace {

constexpr std::array<std::string_view, kHeadOpCount> kOpNames = {
    "sep3x3", "sep3x3d3", "sep5x5d6", "skip", "dconv3x3", "conv1x1", "conv3x3"};
constexpr std::array<std::string_view, kAggCount> kAggNames = {"sum", "cat"};

enum class Slot { Id, Op, Agg };

Slot fpn_slot(int position) {
  switch (position % kTokensPerBlock) {
    case 0:
    case 1:
      return Slot::Id;
    case 2:
    case 3:
      return Slot::Op;
    default:
      return Slot::Agg;
  }
}

// Pool size seen by block t (1-based).
int pool_size(int block) { return kBackboneLevels + block - 1; }

void check_stage(const ActionSequence& seq, Stage expected, int length) {
  if (seq.stage != expected) {
    throw SearchSpaceError("action sequence has the wrong stage");
  }
  if (static_cast<int>(seq.tokens.size()) != length) {
    throw SearchSpaceError(fmt::format("expected {} tokens, got {}", length,
                                       seq.tokens.size()));
  }
}

void check_token(int position, int token, int bound) {
  if (token < 0 || token >= bound) throw TokenOutOfRange(position, token, bound);
}

}  // namespace

TokenOutOfRange::TokenOutOfRange(int position, int token, int bound)
    : SearchSpaceError(fmt::format(
          "token {} at position {} is out of range (bound {})", token,
          position, bound)),
      position_(position),
      token_(token),
      bound_(bound) {}

void validate(const SpaceConfig& space) {
  if (space.fpn_blocks < 1 || space.fpn_blocks > kFpnBlocks) {
    throw SearchSpaceError("fpn_blocks must be in [1, 7]");
  }
  if (space.fpn_ops < 1 || space.fpn_ops > kFpnOpCount) {
    throw SearchSpaceError("fpn_ops must be in [1, 5]");
  }
  if (space.fpn_aggs < 1 || space.fpn_aggs > kAggCount) {
    throw SearchSpaceError("fpn_aggs must be in [1, 2]");
  }
}

int sequence_length(Stage stage, const SpaceConfig& space) {
  return stage == Stage::Fpn ? space.fpn_blocks * kTokensPerBlock
                             : kHeadTokens;
}

int action_space_at(Stage stage, int position, const SpaceConfig& space) {
  if (position < 0 || position >= sequence_length(stage, space)) {
    throw SearchSpaceError("invalid position");
  }
  if (stage == Stage::Head) {
    // Op slots choose among seven ops; i and j each take a value in [0, 6].
    return position < kHeadLayers ? kHeadOpCount : kHeadLayers + 1;
  }
  switch (fpn_slot(position)) {
    case Slot::Id:
      return pool_size(position / kTokensPerBlock + 1);
    case Slot::Op:
      return space.fpn_ops;
    case Slot::Agg:
      return space.fpn_aggs;
  }
  return 0;
}

std::vector<int> action_space(Stage stage, const SpaceConfig& space) {
  validate(space);
  const int n = sequence_length(stage, space);
  std::vector<int> out(n);
  for (int p = 0; p < n; ++p) out[p] = action_space_at(stage, p, space);
  return out;
}

std::uint64_t space_cardinality(Stage stage, const SpaceConfig& space) {
  std::uint64_t total = 1;
  for (int bound : action_space(stage, space)) {
    const auto b = static_cast<std::uint64_t>(bound);
    if (total > std::numeric_limits<std::uint64_t>::max() / b) {
      return std::numeric_limits<std::uint64_t>::max();
    }
    total *= b;
  }
  return total;
}

FpnGenome decode_fpn(const ActionSequence& seq, const SpaceConfig& space) {
  validate(space);
  check_stage(seq, Stage::Fpn, sequence_length(Stage::Fpn, space));
  FpnGenome genome;
  genome.blocks.reserve(space.fpn_blocks);
  for (int b = 0; b < space.fpn_blocks; ++b) {
    const int base = b * kTokensPerBlock;
    for (int k = 0; k < kTokensPerBlock; ++k) {
      check_token(base + k, seq.tokens[base + k],
                  action_space_at(Stage::Fpn, base + k, space));
    }
    genome.blocks.push_back(BasicBlock{
        .id1 = seq.tokens[base],
        .id2 = seq.tokens[base + 1],
        .op1 = static_cast<UnaryOp>(seq.tokens[base + 2]),
        .op2 = static_cast<UnaryOp>(seq.tokens[base + 3]),
        .agg = static_cast<AggOp>(seq.tokens[base + 4]),
    });
  }
  return genome;
}

HeadGenome decode_head(const ActionSequence& seq) {
  check_stage(seq, Stage::Head, kHeadTokens);
  for (int p = 0; p < kHeadTokens; ++p) {
    check_token(p, seq.tokens[p], action_space_at(Stage::Head, p));
  }
  HeadGenome genome;
  for (int k = 0; k < kHeadLayers; ++k) {
    genome.ops[k] = static_cast<UnaryOp>(seq.tokens[k]);
  }
  genome.share_start_i = seq.tokens[kHeadLayers];
  genome.branch_split_j = seq.tokens[kHeadLayers + 1];
  if (genome.branch_split_j < genome.share_start_i) {
    throw SearchSpaceError("invalid share indices");
  }
  return genome;
}

void validate(const FpnGenome& genome, const SpaceConfig& space) {
  validate(space);
  if (static_cast<int>(genome.blocks.size()) != space.fpn_blocks) {
    throw SearchSpaceError(fmt::format("expected {} blocks, got {}",
                                       space.fpn_blocks, genome.blocks.size()));
  }
  // Decoding the encoding checks every slot bound.
  (void)decode_fpn(encode_fpn(genome), space);
}

void validate(const HeadGenome& genome) { (void)decode_head(encode_head(genome)); }

ActionSequence encode_fpn(const FpnGenome& genome) {
  ActionSequence seq{.stage = Stage::Fpn, .tokens = {}};
  seq.tokens.reserve(genome.blocks.size() * kTokensPerBlock);
  for (const auto& block : genome.blocks) {
    seq.tokens.push_back(block.id1);
    seq.tokens.push_back(block.id2);
    seq.tokens.push_back(static_cast<int>(block.op1));
    seq.tokens.push_back(static_cast<int>(block.op2));
    seq.tokens.push_back(static_cast<int>(block.agg));
  }
  return seq;
}

ActionSequence encode_head(const HeadGenome& genome) {
  ActionSequence seq{.stage = Stage::Head, .tokens = {}};
  seq.tokens.reserve(kHeadTokens);
  for (UnaryOp op : genome.ops) seq.tokens.push_back(static_cast<int>(op));
  seq.tokens.push_back(genome.share_start_i);
  seq.tokens.push_back(genome.branch_split_j);
  return seq;
}

std::vector<int> find_dangling(const FpnGenome& genome) {
  const int n = static_cast<int>(genome.blocks.size());
  std::vector<bool> sampled(kBackboneLevels + n, false);
  for (const auto& block : genome.blocks) {
    sampled[block.id1] = true;
    sampled[block.id2] = true;
  }
  // Blocks only sample earlier pool entries, so a mark on x_t can only come
  // from a later block.
  std::vector<int> dangling;
  for (int t = 1; t <= n - 3; ++t) {
    if (!sampled[kBackboneLevels + t - 1]) dangling.push_back(t);
  }
  return dangling;
}

SpaceEnumerator::SpaceEnumerator(const SpaceConfig& space)
    : space_(space), bounds_(action_space(Stage::Fpn, space)),
      tokens_(bounds_.size(), 0) {}

std::uint64_t SpaceEnumerator::size() const {
  return space_cardinality(Stage::Fpn, space_);
}

std::optional<FpnGenome> SpaceEnumerator::next() {
  if (done_) return std::nullopt;
  FpnGenome genome = decode_fpn({Stage::Fpn, tokens_}, space_);
  // Odometer with the last position varying fastest.
  int p = static_cast<int>(tokens_.size()) - 1;
  while (p >= 0) {
    if (++tokens_[p] < bounds_[p]) break;
    tokens_[p] = 0;
    --p;
  }
  if (p < 0) done_ = true;
  return genome;
}

SpaceEnumerator enumerate_space(int n_blocks, int n_ops, int n_agg) {
  if (n_blocks > kMaxEnumerableBlocks) {
    throw SearchSpaceError("space too large to enumerate");
  }
  SpaceConfig space{.fpn_blocks = n_blocks, .fpn_ops = n_ops, .fpn_aggs = n_agg};
  validate(space);
  return SpaceEnumerator(space);
}

HeadGenome default_head() {
  return HeadGenome{
      .ops = {UnaryOp::Conv3x3, UnaryOp::Conv3x3, UnaryOp::Conv3x3,
              UnaryOp::Conv3x3, UnaryOp::Skip, UnaryOp::Skip},
      .share_start_i = 0,
      .branch_split_j = 0,
  };
}

FpnGenome random_fpn_genome(const SpaceConfig& space, Rng& rng) {
  ActionSequence seq{Stage::Fpn, {}};
  for (int bound : action_space(Stage::Fpn, space)) {
    seq.tokens.push_back(static_cast<int>(uniform_index(rng, bound)));
  }
  return decode_fpn(seq, space);
}

HeadGenome random_head_genome(Rng& rng) {
  HeadGenome head;
  for (auto& op : head.ops) op = static_cast<UnaryOp>(uniform_index(rng, kHeadOpCount));
  head.share_start_i = static_cast<int>(uniform_index(rng, kHeadLayers + 1));
  head.branch_split_j =
      head.share_start_i + static_cast<int>(uniform_index(rng, kHeadLayers + 1 - head.share_start_i));
  return head;
}

std::string_view op_name(UnaryOp op) {
  return kOpNames.at(static_cast<std::size_t>(op));
}

std::string_view agg_name(AggOp agg) {
  return kAggNames.at(static_cast<std::size_t>(agg));
}

UnaryOp op_from_name(std::string_view name) {
  for (std::size_t k = 0; k < kOpNames.size(); ++k) {
    if (kOpNames[k] == name) return static_cast<UnaryOp>(k);
  }
  throw SearchSpaceError(fmt::format("unknown op \"{}\"", name));
}

AggOp agg_from_name(std::string_view name) {
  for (std::size_t k = 0; k < kAggNames.size(); ++k) {
    if (kAggNames[k] == name) return static_cast<AggOp>(k);
  }
  throw SearchSpaceError(fmt::format("unknown agg \"{}\"", name));
}

nlohmann::ordered_json to_json(const FpnGenome& genome) {
  nlohmann::ordered_json blocks = nlohmann::ordered_json::array();
  for (const auto& b : genome.blocks) {
    nlohmann::ordered_json jb;
    jb["id1"] = b.id1;
    jb["id2"] = b.id2;
    jb["op1"] = op_name(b.op1);
    jb["op2"] = op_name(b.op2);
    jb["agg"] = agg_name(b.agg);
    blocks.push_back(std::move(jb));
  }
  nlohmann::ordered_json out;
  out["blocks"] = std::move(blocks);
  return out;
}

nlohmann::ordered_json to_json(const HeadGenome& genome) {
  nlohmann::ordered_json ops = nlohmann::ordered_json::array();
  for (UnaryOp op : genome.ops) ops.push_back(op_name(op));
  nlohmann::ordered_json out;
  out["ops"] = std::move(ops);
  out["i"] = genome.share_start_i;
  out["j"] = genome.branch_split_j;
  return out;
}

nlohmann::ordered_json to_json(const DecoderGenome& genome) {
  nlohmann::ordered_json out;
  out["fpn"] = to_json(genome.fpn);
  out["head"] = to_json(genome.head);
  return out;
}

FpnGenome fpn_from_json(const nlohmann::json& j) {
  try {
    const auto& blocks = j.at("blocks");
    if (!blocks.is_array() || blocks.empty() ||
        blocks.size() > static_cast<std::size_t>(kFpnBlocks)) {
      throw SearchSpaceError("fpn.blocks must hold 1 to 7 blocks");
    }
    FpnGenome genome;
    for (const auto& jb : blocks) {
      genome.blocks.push_back(BasicBlock{
          .id1 = jb.at("id1").get<int>(),
          .id2 = jb.at("id2").get<int>(),
          .op1 = op_from_name(jb.at("op1").get<std::string>()),
          .op2 = op_from_name(jb.at("op2").get<std::string>()),
          .agg = agg_from_name(jb.at("agg").get<std::string>()),
      });
    }
    validate(genome, SpaceConfig{.fpn_blocks = static_cast<int>(blocks.size())});
    return genome;
  } catch (const nlohmann::json::exception& e) {
    throw SearchSpaceError(fmt::format("malformed fpn genome: {}", e.what()));
  }
}

HeadGenome head_from_json(const nlohmann::json& j) {
  try {
    const auto& ops = j.at("ops");
    if (!ops.is_array() || ops.size() != kHeadLayers) {
      throw SearchSpaceError("head.ops must hold exactly 6 ops");
    }
    HeadGenome genome;
    for (int k = 0; k < kHeadLayers; ++k) {
      genome.ops[k] = op_from_name(ops[k].get<std::string>());
    }
    genome.share_start_i = j.at("i").get<int>();
    genome.branch_split_j = j.at("j").get<int>();
    validate(genome);
    return genome;
  } catch (const nlohmann::json::exception& e) {
    throw SearchSpaceError(fmt::format("malformed head genome: {}", e.what()));
  }
}

DecoderGenome genome_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("fpn") || !j.contains("head")) {
    throw SearchSpaceError("genome must have \"fpn\" and \"head\" members");
  }
  return DecoderGenome{fpn_from_json(j["fpn"]), head_from_json(j["head"])};
}

std::string canonical_json(const DecoderGenome& genome) {
  return to_json(genome).dump();
}

std::uint64_t genome_hash(const DecoderGenome& genome) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical_json(genome)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string genome_hash_hex(const DecoderGenome& genome) {
  return fmt::format("{:016x}", genome_hash(genome));
}

}  // namespace nasfcos
