#ifndef NASFCOS_COST_MODEL_HPP_
#define NASFCOS_COST_MODEL_HPP_

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "nasfcos/search_space.hpp"

namespace nasfcos {

// FLOPs follow the 1 multiply-add = 2 FLOPs convention. Detection papers
// usually quote multiply-adds under the name "FLOPs", so reports carry both.
struct OpCost {
  std::int64_t macs = 0;
  std::int64_t params = 0;

  std::int64_t flops() const { return 2 * macs; }
  friend bool operator==(const OpCost&, const OpCost&) = default;
};

// Cost of one search-space op at spatial size h x w. Parametric ops carry a
// 2 * out_ch norm affine term; biases are not counted.
OpCost op_cost(UnaryOp kind, int in_ch, int out_ch, int h, int w);
OpCost op_cost(AggOp kind, int in_ch, int out_ch, int h, int w);

struct TensorShape {
  int channels = 0;
  int height = 0;
  int width = 0;
  int stride = 1;

  friend bool operator==(const TensorShape&, const TensorShape&) = default;
};

enum class NodeKind : std::uint8_t {
  Input,          // backbone feature c3..c5
  Unary,          // search-space unary op
  Aggregate,      // search-space aggregation
  Proj1x1,        // plain 1x1 channel projection
  StrideConv,     // 3x3 stride-2 conv producing p6, p7
  Resample,       // bilinear resize, free
  GlobalMerge,    // element-wise add of a dangling block into a pyramid level
  PredictorConv,  // final 3x3 output conv of a head branch
};

enum class Section : std::uint8_t { Fpn, Head, Predictors };

enum class Branch : std::uint8_t { Shared, Cls, Reg };

inline constexpr int kNoWeights = -1;

struct GraphNode {
  NodeKind kind = NodeKind::Input;
  UnaryOp unary = UnaryOp::Skip;  // valid when kind == Unary
  AggOp agg = AggOp::Sum;         // valid when kind == Aggregate
  std::vector<int> inputs{};
  int in_channels = 0;
  TensorShape out_shape;
  int weight_group = kNoWeights;
  Section section = Section::Fpn;
  int level = -1;  // pyramid level 3..7 for head and predictor nodes
  Branch branch = Branch::Shared;
  std::string label;
};

struct DecoderGraph {
  std::vector<GraphNode> nodes;
  std::array<int, 5> pyramid{};  // node ids of p3..p7
  int weight_groups = 0;

  // Macs and params of one node in isolation.
  OpCost node_cost(int id) const;
};

struct CostConfig {
  std::array<int, 3> backbone_channels{512, 1024, 2048};
  int fpn_width = 256;
  int head_width = 256;
  int image_h = 1088;
  int image_w = 800;
  int num_classes = 80;
};

class CostModelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Spatial size of a feature at `stride`, rounding up.
TensorShape level_shape(const CostConfig& cfg, int channels, int stride);

DecoderGraph build_graph(const DecoderGenome& genome, const CostConfig& cfg);

struct SectionCost {
  std::int64_t macs = 0;
  std::int64_t params = 0;
  std::int64_t flops() const { return 2 * macs; }
};

struct CostReport {
  std::int64_t macs = 0;
  std::int64_t params = 0;
  SectionCost fpn;
  SectionCost head;
  SectionCost predictors;

  std::int64_t flops() const { return 2 * macs; }
};

CostReport count(const DecoderGraph& graph);

// True when every input id precedes its consumer.
bool is_topologically_ordered(const DecoderGraph& graph);

// Throws CostModelError when members of a weight group disagree on op or
// channel counts.
void check_weight_groups(const DecoderGraph& graph);

nlohmann::ordered_json to_json(const CostReport& report, const CostConfig& cfg);
std::string format_table(const CostReport& report, const CostConfig& cfg);

}  // namespace nasfcos

#endif  // NASFCOS_COST_MODEL_HPP_
