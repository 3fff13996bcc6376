#ifndef NASFCOS_SEARCH_SPACE_HPP_
#define NASFCOS_SEARCH_SPACE_HPP_

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "nasfcos/random.hpp"

namespace nasfcos {

// Token values of the first five kinds are the FPN operation ids; the head
// pool appends the two standard convolutions.
enum class UnaryOp : std::uint8_t {
  SepConv3x3 = 0,
  SepConv3x3Dil3 = 1,
  SepConv5x5Dil6 = 2,
  Skip = 3,
  DeformConv3x3 = 4,
  Conv1x1 = 5,
  Conv3x3 = 6,
};

enum class AggOp : std::uint8_t { Sum = 0, ConcatProj = 1 };

enum class Stage : std::uint8_t { Fpn, Head };

inline constexpr int kFpnOpCount = 5;
inline constexpr int kHeadOpCount = 7;
inline constexpr int kAggCount = 2;
inline constexpr int kBackboneLevels = 3;  // c3, c4, c5
inline constexpr int kFpnBlocks = 7;
inline constexpr int kHeadLayers = 6;
inline constexpr int kTokensPerBlock = 5;  // id1, id2, op1, op2, agg
inline constexpr int kHeadTokens = kHeadLayers + 2;

// Pool indices are 0-based: 0..2 are c3..c5, 3 + (t - 1) is the output of
// block t (blocks are numbered from 1).
struct BasicBlock {
  int id1 = 0;
  int id2 = 0;
  UnaryOp op1 = UnaryOp::SepConv3x3;
  UnaryOp op2 = UnaryOp::SepConv3x3;
  AggOp agg = AggOp::Sum;

  friend bool operator==(const BasicBlock&, const BasicBlock&) = default;
};

struct FpnGenome {
  std::vector<BasicBlock> blocks;

  friend bool operator==(const FpnGenome&, const FpnGenome&) = default;
};

// Layers [0, i) are independent per pyramid level, [i, j) are shared across
// levels and both branches, [j, 6) are shared across levels but owned per
// branch.
struct HeadGenome {
  std::array<UnaryOp, kHeadLayers> ops{};
  int share_start_i = 0;
  int branch_split_j = 0;

  friend bool operator==(const HeadGenome&, const HeadGenome&) = default;
};

struct DecoderGenome {
  FpnGenome fpn;
  HeadGenome head;

  friend bool operator==(const DecoderGenome&, const DecoderGenome&) = default;
};

struct ActionSequence {
  Stage stage = Stage::Fpn;
  std::vector<int> tokens;

  friend bool operator==(const ActionSequence&, const ActionSequence&) = default;
};

// Shape of the FPN search space. The defaults are the full space; smaller
// values describe the reduced spaces used for exhaustive checks. Reduced op
// and agg pools keep the first n entries of the full pools.
struct SpaceConfig {
  int fpn_blocks = kFpnBlocks;
  int fpn_ops = kFpnOpCount;
  int fpn_aggs = kAggCount;

  friend bool operator==(const SpaceConfig&, const SpaceConfig&) = default;
};

class SearchSpaceError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised by the decoders when a token exceeds the cardinality of its slot.
class TokenOutOfRange : public SearchSpaceError {
 public:
  TokenOutOfRange(int position, int token, int bound);
  int position() const { return position_; }
  int token() const { return token_; }
  int bound() const { return bound_; }

 private:
  int position_;
  int token_;
  int bound_;
};

void validate(const SpaceConfig& space);

int sequence_length(Stage stage, const SpaceConfig& space = {});

// Number of legal token values at `position` of the stage's token layout.
int action_space_at(Stage stage, int position, const SpaceConfig& space = {});

// Per-position cardinalities for the whole layout.
std::vector<int> action_space(Stage stage, const SpaceConfig& space = {});

FpnGenome decode_fpn(const ActionSequence& seq, const SpaceConfig& space = {});
HeadGenome decode_head(const ActionSequence& seq);
ActionSequence encode_fpn(const FpnGenome& genome);
ActionSequence encode_head(const HeadGenome& genome);

void validate(const FpnGenome& genome, const SpaceConfig& space = {});
void validate(const HeadGenome& genome);

// 1-based indices of blocks whose output is never sampled by a later block
// and that are not one of the last three (pyramid) outputs. These are merged
// into every pyramid output.
std::vector<int> find_dangling(const FpnGenome& genome);

// Lazily walks every genome of a reduced FPN space in lexicographic token
// order.
class SpaceEnumerator {
 public:
  explicit SpaceEnumerator(const SpaceConfig& space);

  std::optional<FpnGenome> next();
  const SpaceConfig& space() const { return space_; }
  std::uint64_t size() const;

 private:
  SpaceConfig space_;
  std::vector<int> bounds_;
  std::vector<int> tokens_;
  bool done_ = false;
};

inline constexpr int kMaxEnumerableBlocks = 4;

SpaceEnumerator enumerate_space(int n_blocks, int n_ops, int n_agg);

// Product of per-position cardinalities; saturates at UINT64_MAX.
std::uint64_t space_cardinality(Stage stage, const SpaceConfig& space = {});

// The manually designed FCOS head: four 3x3 convolutions per branch, shared
// across levels, followed by two identities.
HeadGenome default_head();

// Uniform over the valid genomes of the space (heads: i uniform, then j
// uniform in [i, 6]).
FpnGenome random_fpn_genome(const SpaceConfig& space, Rng& rng);
HeadGenome random_head_genome(Rng& rng);

std::string_view op_name(UnaryOp op);
std::string_view agg_name(AggOp agg);
UnaryOp op_from_name(std::string_view name);
AggOp agg_from_name(std::string_view name);

nlohmann::ordered_json to_json(const FpnGenome& genome);
nlohmann::ordered_json to_json(const HeadGenome& genome);
nlohmann::ordered_json to_json(const DecoderGenome& genome);
FpnGenome fpn_from_json(const nlohmann::json& j);
HeadGenome head_from_json(const nlohmann::json& j);
DecoderGenome genome_from_json(const nlohmann::json& j);

// Compact serialization with the fixed key order of the genome schema. Two
// structurally equal genomes produce identical strings.
std::string canonical_json(const DecoderGenome& genome);

// 64-bit FNV-1a of canonical_json.
std::uint64_t genome_hash(const DecoderGenome& genome);
std::string genome_hash_hex(const DecoderGenome& genome);

}  // namespace nasfcos

#endif  // NASFCOS_SEARCH_SPACE_HPP_
