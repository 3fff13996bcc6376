#ifndef NASFCOS_REPORT_HPP_
#define NASFCOS_REPORT_HPP_

#include <span>
#include <string>
#include <vector>

#include "nasfcos/orchestrator.hpp"

namespace nasfcos {

// Statistics of one window of head samples.
struct SharingWindow {
  std::int64_t first_step = 0;
  std::int64_t last_step = 0;
  // Mean of (6 - i) / 6: fraction of layers shared across levels.
  double shared_fraction = 0.0;
  // Mean of (j - i) / max(6 - i, 1): fraction of shared layers that are also
  // shared between the two branches.
  double cross_branch_fraction = 0.0;
};

// Consecutive, non-overlapping windows over the head samples of `history`.
// A trailing partial window is dropped.
std::vector<SharingWindow> sharing_trend(const SearchHistory& history, int window = 50);

struct Correlation {
  double spearman = 0.0;
  double pearson = 0.0;
  std::size_t n = 0;
};

// Ties get average ranks. Needs at least three points and non-constant data.
Correlation correlation(std::span<const double> xs, std::span<const double> ys);

// Mean reward of consecutive windows of one stage.
std::vector<double> reward_curve(const SearchHistory& history, Stage stage, int window);

// Two-column whitespace-separated file for gnuplot.
std::string to_dat(const std::vector<double>& ys, const std::string& header);
std::string to_dat(const std::vector<SharingWindow>& windows);

}  // namespace nasfcos

#endif  // NASFCOS_REPORT_HPP_
