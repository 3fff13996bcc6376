#include "nasfcos/proxy_sampler.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>

namespace nasfcos {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

// Splits one CSV record; double quotes may wrap fields containing commas.
std::vector<std::string> split_csv(std::string_view line) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') {
      quoted = !quoted;
    } else if (ch == ',' && !quoted) {
      fields.push_back(trim(field));
      field.clear();
    } else {
      field += ch;
    }
  }
  fields.push_back(trim(field));
  return fields;
}

void check_stats(const CategoryStats& c) {
  if (c.instances < 0) {
    throw ProxySamplerError(fmt::format("category {} has negative instances", c.name));
  }
  if (!(c.avg_ratio >= 0.0 && c.avg_ratio <= 100.0)) {
    throw ProxySamplerError(fmt::format("category {} has avg_ratio outside [0, 100]", c.name));
  }
}

}  // namespace

Indicator indicator_from_name(std::string_view name) {
  if (name == "ratio" || name == "avg_ratio") return Indicator::AvgRatio;
  if (name == "area" || name == "avg_area") return Indicator::AvgArea;
  if (name == "instances") return Indicator::Instances;
  throw ProxySamplerError(fmt::format("unknown indicator \"{}\"", name));
}

double indicator_value(const CategoryStats& c, Indicator indicator) {
  switch (indicator) {
    case Indicator::Instances:
      return static_cast<double>(c.instances);
    case Indicator::AvgArea:
      return c.avg_area;
    case Indicator::AvgRatio:
      return c.avg_ratio;
  }
  return 0.0;
}

int SegmentPlan::segment_of(double value) const {
  const int n = segments();
  if (n < 1 || value < boundaries.front() || value > boundaries.back()) {
    throw ProxySamplerError(fmt::format("value {} lies outside the segment plan", value));
  }
  for (int k = 0; k + 1 < n; ++k) {
    if (value < boundaries[k + 1]) return k;
  }
  return n - 1;
}

SegmentPlan build_segments(std::span<const CategoryStats> stats, Indicator indicator,
                           int segments, int per_segment) {
  if (segments < 1 || per_segment < 1) {
    throw ProxySamplerError("segment count and per-segment count must be positive");
  }
  std::set<double> distinct;
  for (const CategoryStats& c : stats) distinct.insert(indicator_value(c, indicator));
  if (static_cast<int>(distinct.size()) < segments) {
    throw ProxySamplerError(fmt::format("need at least {} distinct indicator values, got {}",
                                        segments, distinct.size()));
  }
  const double lo = *distinct.begin();
  const double hi = *distinct.rbegin();
  SegmentPlan plan{indicator, {}, per_segment};
  for (int k = 0; k < segments; ++k) {
    plan.boundaries.push_back(lo + (hi - lo) * k / segments);
  }
  plan.boundaries.push_back(hi);
  return plan;
}

Selection sample_categories(std::span<const CategoryStats> stats, const SegmentPlan& plan,
                            Rng& rng) {
  std::vector<std::vector<std::size_t>> members(plan.segments());
  for (std::size_t k = 0; k < stats.size(); ++k) {
    members[plan.segment_of(indicator_value(stats[k], plan.indicator))].push_back(k);
  }
  Selection out;
  for (int s = 0; s < plan.segments(); ++s) {
    auto& pool = members[s];
    const std::size_t take = std::min<std::size_t>(pool.size(), plan.per_segment);
    if (take < static_cast<std::size_t>(plan.per_segment)) {
      out.warnings.push_back(fmt::format("segment {} holds {} categories, fewer than {}", s,
                                         pool.size(), plan.per_segment));
    }
    // Partial Fisher-Yates: the first `take` slots become the draw.
    for (std::size_t k = 0; k < take; ++k) {
      const std::size_t pick = k + uniform_index(rng, pool.size() - k);
      std::swap(pool[k], pool[pick]);
      out.categories.push_back(stats[pool[k]]);
      out.segment.push_back(s);
    }
  }
  return out;
}

std::vector<CategoryStats> summarize(std::span<const CategoryStats> selection) {
  std::vector<CategoryStats> rows(selection.begin(), selection.end());
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    return a.avg_ratio < b.avg_ratio;
  });
  return rows;
}

std::string format_row(const CategoryStats& c) {
  return fmt::format("{}, {}, {:.1f}, {:.1f}", c.name, c.instances, c.avg_area, c.avg_ratio);
}

std::string format_summary(std::span<const CategoryStats> selection) {
  std::string out = fmt::format("{:>4}  {:<16}{:>10}{:>12}{:>10}\n", "ID", "Name", "Instance",
                                "Avg Area", "Ratio(%)");
  int row = 0;
  for (const CategoryStats& c : summarize(selection)) {
    out += fmt::format("{:>4}  {:<16}{:>10}{:>12.1f}{:>10.1f}\n", ++row, c.name, c.instances,
                       c.avg_area, c.avg_ratio);
  }
  return out;
}

std::vector<CategoryStats> parse_category_csv(std::string_view text) {
  std::vector<CategoryStats> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::vector<std::string> header;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto fields = split_csv(line);
    if (header.empty()) {
      header = fields;
      const std::vector<std::string> want = {"id", "name", "instances", "avg_area", "avg_ratio"};
      if (header != want) {
        throw ProxySamplerError("CSV header must be id,name,instances,avg_area,avg_ratio");
      }
      continue;
    }
    if (fields.size() != 5) {
      throw ProxySamplerError(fmt::format("line {}: expected 5 fields", line_no));
    }
    try {
      CategoryStats c{std::stoi(fields[0]), fields[1], std::stoll(fields[2]),
                      std::stod(fields[3]), std::stod(fields[4])};
      check_stats(c);
      out.push_back(std::move(c));
    } catch (const std::logic_error&) {
      throw ProxySamplerError(fmt::format("line {}: malformed number", line_no));
    }
  }
  return out;
}

std::vector<CategoryStats> parse_category_jsonl(std::string_view text) {
  std::vector<CategoryStats> out;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      CategoryStats c{j.at("id").get<int>(), j.at("name").get<std::string>(),
                      j.at("instances").get<long long>(), j.at("avg_area").get<double>(),
                      j.at("avg_ratio").get<double>()};
      check_stats(c);
      out.push_back(std::move(c));
    } catch (const nlohmann::json::exception& e) {
      throw ProxySamplerError(fmt::format("line {}: {}", line_no, e.what()));
    }
  }
  return out;
}

std::vector<CategoryStats> load_category_stats(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ProxySamplerError(fmt::format("cannot read {}", path.string()));
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string ext = path.extension().string();
  if (ext == ".jsonl" || ext == ".json") return parse_category_jsonl(buffer.str());
  return parse_category_csv(buffer.str());
}

nlohmann::json to_json(const Selection& selection, const SegmentPlan& plan) {
  nlohmann::json cats = nlohmann::json::array();
  for (std::size_t k = 0; k < selection.categories.size(); ++k) {
    const CategoryStats& c = selection.categories[k];
    cats.push_back({{"id", c.id},
                    {"name", c.name},
                    {"instances", c.instances},
                    {"avg_area", c.avg_area},
                    {"avg_ratio", c.avg_ratio},
                    {"segment", selection.segment[k]}});
  }
  const char* indicator = plan.indicator == Indicator::AvgRatio  ? "avg_ratio"
                          : plan.indicator == Indicator::AvgArea ? "avg_area"
                                                                 : "instances";
  return {{"indicator", indicator},
          {"boundaries", plan.boundaries},
          {"per_segment", plan.per_segment},
          {"categories", std::move(cats)},
          {"warnings", selection.warnings}};
}

}  // namespace nasfcos
