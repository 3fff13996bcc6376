#ifndef NASFCOS_PROXY_SAMPLER_HPP_
#define NASFCOS_PROXY_SAMPLER_HPP_

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "nasfcos/random.hpp"

namespace nasfcos {

// Per-category detection statistics. avg_ratio is the mean bounding-box area
// over image area, in percent.
struct CategoryStats {
  int id = 0;
  std::string name;
  long long instances = 0;
  double avg_area = 0.0;
  double avg_ratio = 0.0;

  friend bool operator==(const CategoryStats&, const CategoryStats&) = default;
};

enum class Indicator { Instances, AvgArea, AvgRatio };

Indicator indicator_from_name(std::string_view name);
double indicator_value(const CategoryStats& c, Indicator indicator);

class ProxySamplerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Equal-width segments over [min, max] of the indicator. Segment k covers
// [boundaries[k], boundaries[k + 1]); the last one is closed on the right.
struct SegmentPlan {
  Indicator indicator = Indicator::AvgRatio;
  std::vector<double> boundaries;
  int per_segment = 4;

  int segments() const { return static_cast<int>(boundaries.size()) - 1; }
  // Index of the segment holding `value`; throws when outside [min, max].
  int segment_of(double value) const;
};

SegmentPlan build_segments(std::span<const CategoryStats> stats, Indicator indicator,
                           int segments = 5, int per_segment = 4);

struct Selection {
  std::vector<CategoryStats> categories;  // grouped by segment, draw order within
  std::vector<int> segment;               // source segment of each category
  std::vector<std::string> warnings;      // shortfall reports
};

// Draws plan.per_segment categories uniformly without replacement from every
// segment. A segment holding fewer contributes all of its categories and a
// warning.
Selection sample_categories(std::span<const CategoryStats> stats, const SegmentPlan& plan,
                            Rng& rng);

// Rows sorted by avg_ratio ascending (stable for ties).
std::vector<CategoryStats> summarize(std::span<const CategoryStats> selection);
// "name, instances, avg_area, avg_ratio" with one decimal on the reals.
std::string format_row(const CategoryStats& c);
std::string format_summary(std::span<const CategoryStats> selection);

// CSV with header id,name,instances,avg_area,avg_ratio, or JSON lines with
// the same keys. The format is chosen by extension (.csv / .jsonl).
std::vector<CategoryStats> load_category_stats(const std::filesystem::path& path);
std::vector<CategoryStats> parse_category_csv(std::string_view text);
std::vector<CategoryStats> parse_category_jsonl(std::string_view text);

nlohmann::json to_json(const Selection& selection, const SegmentPlan& plan);

}  // namespace nasfcos

#endif  // NASFCOS_PROXY_SAMPLER_HPP_
