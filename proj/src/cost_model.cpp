#include "nasfcos/cost_model.hpp"

#include <map>
#include <set>
#include <tuple>

#include <fmt/format.h>

namespace nasfcos {

namespace {

constexpr std::array<int, 3> kInputStrides = {8, 16, 32};
constexpr std::array<int, 5> kPyramidStrides = {8, 16, 32, 64, 128};
constexpr int kDeformOffsetChannels = 18;  // 2 * 3 * 3 sampling offsets

std::int64_t area(int h, int w) { return static_cast<std::int64_t>(h) * w; }

OpCost conv_cost(int k, int in_ch, int out_ch, int h, int w, bool norm) {
  const std::int64_t weights = static_cast<std::int64_t>(in_ch) * out_ch * k * k;
  return {weights * area(h, w), weights + (norm ? 2LL * out_ch : 0)};
}

OpCost sep_conv_cost(int k, int in_ch, int out_ch, int h, int w) {
  const std::int64_t weights = static_cast<std::int64_t>(in_ch) * k * k +
                               static_cast<std::int64_t>(in_ch) * out_ch;
  return {weights * area(h, w), weights + 2LL * out_ch};
}

class GraphBuilder {
 public:
  GraphBuilder(const DecoderGenome& genome, const CostConfig& cfg)
      : genome_(genome), cfg_(cfg) {}

  DecoderGraph build() {
    build_fpn();
    for (int level = 0; level < 5; ++level) build_head(level);
    return std::move(graph_);
  }

 private:
  int add(GraphNode node) {
    for (int in : node.inputs) {
      if (in < 0 || in >= static_cast<int>(graph_.nodes.size())) {
        throw CostModelError("graph node references a later node");
      }
    }
    graph_.nodes.push_back(std::move(node));
    return static_cast<int>(graph_.nodes.size()) - 1;
  }

  int new_group() { return graph_.weight_groups++; }

  const TensorShape& shape(int id) const { return graph_.nodes[id].out_shape; }

  int resample(int src, int stride, Section section, std::string label) {
    if (shape(src).stride == stride) return src;
    return add(GraphNode{
        .kind = NodeKind::Resample,
        .inputs = {src},
        .in_channels = shape(src).channels,
        .out_shape = level_shape(cfg_, shape(src).channels, stride),
        .section = section,
        .label = std::move(label),
    });
  }

  int unary(UnaryOp op, int src, int out_ch, int group, Section section,
            int level, Branch branch, std::string label) {
    const TensorShape& in = shape(src);
    return add(GraphNode{
        .kind = NodeKind::Unary,
        .unary = op,
        .inputs = {src},
        .in_channels = in.channels,
        .out_shape = {out_ch, in.height, in.width, in.stride},
        .weight_group = op == UnaryOp::Skip ? kNoWeights : group,
        .section = section,
        .level = level,
        .branch = branch,
        .label = std::move(label),
    });
  }

  void build_fpn() {
    const int width = cfg_.fpn_width;
    std::vector<int> pool;
    for (int k = 0; k < 3; ++k) {
      const int c = add(GraphNode{
          .kind = NodeKind::Input,
          .out_shape = level_shape(cfg_, cfg_.backbone_channels[k], kInputStrides[k]),
          .label = fmt::format("c{}", k + 3),
      });
      pool.push_back(add(GraphNode{
          .kind = NodeKind::Proj1x1,
          .inputs = {c},
          .in_channels = cfg_.backbone_channels[k],
          .out_shape = level_shape(cfg_, width, kInputStrides[k]),
          .weight_group = new_group(),
          .label = fmt::format("proj.c{}", k + 3),
      }));
    }

    const auto& blocks = genome_.fpn.blocks;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const BasicBlock& block = blocks[b];
      const std::string tag = fmt::format("bb{}", b + 1);
      const int u1 = unary(block.op1, pool.at(block.id1), width, new_group(),
                           Section::Fpn, -1, Branch::Shared, tag + ".op1");
      const int u2 = unary(block.op2, pool.at(block.id2), width, new_group(),
                           Section::Fpn, -1, Branch::Shared, tag + ".op2");
      // The coarser input is upsampled to the finer stride.
      const int stride = std::min(shape(u1).stride, shape(u2).stride);
      const int a = resample(u1, stride, Section::Fpn, tag + ".up1");
      const int c = resample(u2, stride, Section::Fpn, tag + ".up2");
      pool.push_back(add(GraphNode{
          .kind = NodeKind::Aggregate,
          .agg = block.agg,
          .inputs = {a, c},
          .in_channels = width,
          .out_shape = level_shape(cfg_, width, stride),
          .weight_group = block.agg == AggOp::ConcatProj ? new_group() : kNoWeights,
          .label = tag + ".agg",
      }));
    }

    const int n = static_cast<int>(blocks.size());
    std::array<int, 3> outs{};
    for (int k = 0; k < 3; ++k) {
      outs[k] = resample(pool[3 + n - 3 + k], kPyramidStrides[k], Section::Fpn,
                         fmt::format("p{}.resample", k + 3));
    }
    for (int t : find_dangling(genome_.fpn)) {
      for (int k = 0; k < 3; ++k) {
        const int x = resample(pool[3 + t - 1], kPyramidStrides[k], Section::Fpn,
                               fmt::format("global.x{}.p{}", t, k + 3));
        outs[k] = add(GraphNode{
            .kind = NodeKind::GlobalMerge,
            .inputs = {outs[k], x},
            .in_channels = width,
            .out_shape = shape(outs[k]),
            .label = fmt::format("global.x{}.p{}", t, k + 3),
        });
      }
    }
    for (int k = 0; k < 3; ++k) graph_.pyramid[k] = outs[k];
    for (int k = 3; k < 5; ++k) {
      graph_.pyramid[k] = add(GraphNode{
          .kind = NodeKind::StrideConv,
          .inputs = {graph_.pyramid[k - 1]},
          .in_channels = width,
          .out_shape = level_shape(cfg_, width, kPyramidStrides[k]),
          .weight_group = new_group(),
          .label = fmt::format("p{}", k + 3),
      });
    }
  }

  void build_head(int level) {
    const HeadGenome& head = genome_.head;
    const int width = cfg_.head_width;
    const int lv = level + 3;
    if (level == 0) allocate_head_groups();

    int trunk = graph_.pyramid[level];
    if (cfg_.fpn_width != width) {
      trunk = add(GraphNode{
          .kind = NodeKind::Proj1x1,
          .inputs = {trunk},
          .in_channels = cfg_.fpn_width,
          .out_shape = {width, shape(trunk).height, shape(trunk).width, shape(trunk).stride},
          .weight_group = head_proj_group_,
          .section = Section::Head,
          .level = lv,
          .label = fmt::format("head.l{}.proj", lv),
      });
    }

    int cls = -1;
    int reg = -1;
    for (int k = 0; k < kHeadLayers; ++k) {
      const UnaryOp op = head.ops[k];
      if (k < head.branch_split_j) {
        const int group = k < head.share_start_i ? level_groups_[k][level]
                                                 : shared_groups_[k];
        trunk = unary(op, trunk, width, group, Section::Head, lv, Branch::Shared,
                      fmt::format("head.l{}.k{}", lv, k));
        continue;
      }
      if (cls < 0) cls = reg = trunk;
      cls = unary(op, cls, width, branch_groups_[k][0], Section::Head, lv,
                  Branch::Cls, fmt::format("head.l{}.k{}.cls", lv, k));
      reg = unary(op, reg, width, branch_groups_[k][1], Section::Head, lv,
                  Branch::Reg, fmt::format("head.l{}.k{}.reg", lv, k));
    }
    if (cls < 0) cls = reg = trunk;

    const auto predictor = [&](int src, int out_ch, int group, Branch branch,
                               const char* name) {
      const TensorShape& in = shape(src);
      add(GraphNode{
          .kind = NodeKind::PredictorConv,
          .inputs = {src},
          .in_channels = in.channels,
          .out_shape = {out_ch, in.height, in.width, in.stride},
          .weight_group = group,
          .section = Section::Predictors,
          .level = lv,
          .branch = branch,
          .label = fmt::format("pred.l{}.{}", lv, name),
      });
    };
    predictor(cls, cfg_.num_classes, predictor_groups_[0], Branch::Cls, "cls");
    predictor(cls, 1, predictor_groups_[1], Branch::Cls, "ctr");
    predictor(reg, 4, predictor_groups_[2], Branch::Reg, "reg");
  }

  void allocate_head_groups() {
    if (cfg_.fpn_width != cfg_.head_width) head_proj_group_ = new_group();
    for (int k = 0; k < kHeadLayers; ++k) {
      for (int level = 0; level < 5; ++level) level_groups_[k][level] = new_group();
      shared_groups_[k] = new_group();
      branch_groups_[k] = {new_group(), new_group()};
    }
    for (int& g : predictor_groups_) g = new_group();
  }

  const DecoderGenome& genome_;
  const CostConfig& cfg_;
  DecoderGraph graph_;
  int head_proj_group_ = kNoWeights;
  std::array<std::array<int, 5>, kHeadLayers> level_groups_{};
  std::array<int, kHeadLayers> shared_groups_{};
  std::array<std::array<int, 2>, kHeadLayers> branch_groups_{};
  std::array<int, 3> predictor_groups_{};
};

void check_config(const CostConfig& cfg) {
  for (int c : cfg.backbone_channels) {
    if (c <= 0) throw CostModelError("backbone channels must be positive");
  }
  if (cfg.fpn_width <= 0 || cfg.head_width <= 0) {
    throw CostModelError("channel widths must be positive");
  }
  if (cfg.image_h <= 0 || cfg.image_w <= 0) {
    throw CostModelError("image size must be positive");
  }
  if (cfg.num_classes <= 0) throw CostModelError("num_classes must be positive");
}

}  // namespace

OpCost op_cost(UnaryOp kind, int in_ch, int out_ch, int h, int w) {
  switch (kind) {
    case UnaryOp::SepConv3x3:
    case UnaryOp::SepConv3x3Dil3:
      return sep_conv_cost(3, in_ch, out_ch, h, w);
    case UnaryOp::SepConv5x5Dil6:
      return sep_conv_cost(5, in_ch, out_ch, h, w);
    case UnaryOp::Skip:
      return {};
    case UnaryOp::DeformConv3x3: {
      // Standard 3x3 conv plus the conv predicting the sampling offsets.
      const OpCost main = conv_cost(3, in_ch, out_ch, h, w, true);
      const OpCost offsets = conv_cost(3, in_ch, kDeformOffsetChannels, h, w, false);
      return {main.macs + offsets.macs, main.params + offsets.params};
    }
    case UnaryOp::Conv1x1:
      return conv_cost(1, in_ch, out_ch, h, w, true);
    case UnaryOp::Conv3x3:
      return conv_cost(3, in_ch, out_ch, h, w, true);
  }
  throw CostModelError("unknown op kind");
}

OpCost op_cost(AggOp kind, int in_ch, int out_ch, int h, int w) {
  switch (kind) {
    case AggOp::Sum:
      return {};
    case AggOp::ConcatProj:
      return conv_cost(1, 2 * in_ch, out_ch, h, w, true);
  }
  throw CostModelError("unknown agg kind");
}

TensorShape level_shape(const CostConfig& cfg, int channels, int stride) {
  return {channels, (cfg.image_h + stride - 1) / stride,
          (cfg.image_w + stride - 1) / stride, stride};
}

OpCost DecoderGraph::node_cost(int id) const {
  const GraphNode& n = nodes.at(id);
  const TensorShape& out = n.out_shape;
  switch (n.kind) {
    case NodeKind::Unary:
      return op_cost(n.unary, n.in_channels, out.channels, out.height, out.width);
    case NodeKind::Aggregate:
      return op_cost(n.agg, n.in_channels, out.channels, out.height, out.width);
    case NodeKind::Proj1x1:
      return conv_cost(1, n.in_channels, out.channels, out.height, out.width, false);
    case NodeKind::StrideConv:
    case NodeKind::PredictorConv:
      return conv_cost(3, n.in_channels, out.channels, out.height, out.width, false);
    case NodeKind::Input:
    case NodeKind::Resample:
    case NodeKind::GlobalMerge:
      return {};
  }
  throw CostModelError("unknown node kind");
}

DecoderGraph build_graph(const DecoderGenome& genome, const CostConfig& cfg) {
  check_config(cfg);
  if (genome.fpn.blocks.size() < 3) {
    throw CostModelError("an FPN genome needs at least 3 blocks to form a pyramid");
  }
  validate(genome.fpn, SpaceConfig{.fpn_blocks = static_cast<int>(genome.fpn.blocks.size())});
  validate(genome.head);
  DecoderGraph graph = GraphBuilder(genome, cfg).build();
  check_weight_groups(graph);
  return graph;
}

CostReport count(const DecoderGraph& graph) {
  CostReport report;
  std::vector<bool> counted(graph.weight_groups, false);
  for (int id = 0; id < static_cast<int>(graph.nodes.size()); ++id) {
    const GraphNode& n = graph.nodes[id];
    const OpCost cost = graph.node_cost(id);
    std::int64_t params = 0;
    if (n.weight_group != kNoWeights && !counted[n.weight_group]) {
      counted[n.weight_group] = true;
      params = cost.params;
    }
    SectionCost& section = n.section == Section::Fpn    ? report.fpn
                           : n.section == Section::Head ? report.head
                                                        : report.predictors;
    section.macs += cost.macs;
    section.params += params;
  }
  report.macs = report.fpn.macs + report.head.macs + report.predictors.macs;
  report.params = report.fpn.params + report.head.params + report.predictors.params;
  return report;
}

bool is_topologically_ordered(const DecoderGraph& graph) {
  for (int id = 0; id < static_cast<int>(graph.nodes.size()); ++id) {
    for (int in : graph.nodes[id].inputs) {
      if (in < 0 || in >= id) return false;
    }
  }
  return true;
}

void check_weight_groups(const DecoderGraph& graph) {
  using Signature = std::tuple<NodeKind, UnaryOp, AggOp, int, int>;
  std::map<int, Signature> seen;
  for (const GraphNode& n : graph.nodes) {
    if (n.weight_group == kNoWeights) continue;
    const Signature sig{n.kind, n.unary, n.agg, n.in_channels, n.out_shape.channels};
    auto [it, inserted] = seen.emplace(n.weight_group, sig);
    if (!inserted && it->second != sig) {
      throw CostModelError(fmt::format("weight group {} mixes incompatible nodes ({})",
                                       n.weight_group, n.label));
    }
  }
}

nlohmann::ordered_json to_json(const CostReport& report, const CostConfig& cfg) {
  const auto section = [](const SectionCost& s) {
    nlohmann::ordered_json j;
    j["flops"] = s.flops();
    j["macs"] = s.macs;
    j["params"] = s.params;
    return j;
  };
  nlohmann::ordered_json j;
  j["convention"] = "flops = 2 * multiply-adds; params exclude biases";
  j["image"] = {cfg.image_h, cfg.image_w};
  j["fpn_width"] = cfg.fpn_width;
  j["head_width"] = cfg.head_width;
  j["flops"] = report.flops();
  j["macs"] = report.macs;
  j["params"] = report.params;
  j["gflops"] = static_cast<double>(report.flops()) / 1e9;
  j["gmacs"] = static_cast<double>(report.macs) / 1e9;
  j["mparams"] = static_cast<double>(report.params) / 1e6;
  j["per_section"] = {{"fpn", section(report.fpn)},
                      {"head", section(report.head)},
                      {"predictors", section(report.predictors)}};
  return j;
}

std::string format_table(const CostReport& report, const CostConfig& cfg) {
  std::string out = fmt::format(
      "# {}x{}, fpn width {}, head width {} (FLOPs = 2 x MACs)\n", cfg.image_h,
      cfg.image_w, cfg.fpn_width, cfg.head_width);
  out += fmt::format("{:<12}{:>12}{:>12}{:>12}\n", "section", "GFLOPs", "GMACs", "Mparams");
  const auto row = [&](const char* name, std::int64_t macs, std::int64_t params) {
    out += fmt::format("{:<12}{:>12.2f}{:>12.2f}{:>12.3f}\n", name, 2.0 * macs / 1e9,
                       macs / 1e9, params / 1e6);
  };
  row("fpn", report.fpn.macs, report.fpn.params);
  row("head", report.head.macs, report.head.params);
  row("predictors", report.predictors.macs, report.predictors.params);
  row("total", report.macs, report.params);
  return out;
}

}  // namespace nasfcos
