#include "nasfcos/report.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>

namespace nasfcos {

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t k = 0; k < order.size();) {
    std::size_t end = k;
    while (end + 1 < order.size() && v[order[end + 1]] == v[order[k]]) ++end;
    const double rank = 0.5 * static_cast<double>(k + end) + 1.0;
    for (std::size_t m = k; m <= end; ++m) ranks[order[m]] = rank;
    k = end + 1;
  }
  return ranks;
}

double pearson(std::span<const double> xs, std::span<const double> ys) {
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    sxy += (xs[k] - mx) * (ys[k] - my);
    sxx += (xs[k] - mx) * (xs[k] - mx);
    syy += (ys[k] - my) * (ys[k] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("correlation of constant data");
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace

std::vector<SharingWindow> sharing_trend(const SearchHistory& history, int window) {
  if (window < 1) throw std::invalid_argument("window must be positive");
  std::vector<const HistoryEntry*> heads;
  for (const HistoryEntry& e : history.entries()) {
    if (e.stage == Stage::Head) heads.push_back(&e);
  }
  std::vector<SharingWindow> out;
  const std::size_t w = static_cast<std::size_t>(window);
  for (std::size_t start = 0; start + w <= heads.size(); start += w) {
    SharingWindow sw;
    sw.first_step = heads[start]->step;
    sw.last_step = heads[start + w - 1]->step;
    for (std::size_t k = start; k < start + w; ++k) {
      const int i = heads[k]->genome.head.share_start_i;
      const int j = heads[k]->genome.head.branch_split_j;
      sw.shared_fraction += (kHeadLayers - i) / static_cast<double>(kHeadLayers);
      sw.cross_branch_fraction += (j - i) / static_cast<double>(std::max(kHeadLayers - i, 1));
    }
    sw.shared_fraction /= static_cast<double>(w);
    sw.cross_branch_fraction /= static_cast<double>(w);
    out.push_back(sw);
  }
  return out;
}

Correlation correlation(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("correlation inputs differ in length");
  if (xs.size() < 3) throw std::invalid_argument("correlation needs at least three points");
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  return Correlation{pearson(rx, ry), pearson(xs, ys), xs.size()};
}

std::vector<double> reward_curve(const SearchHistory& history, Stage stage, int window) {
  if (window < 1) throw std::invalid_argument("window must be positive");
  std::vector<double> out;
  double sum = 0.0;
  int count = 0;
  for (const HistoryEntry& e : history.entries()) {
    if (e.stage != stage) continue;
    sum += e.reward;
    if (++count == window) {
      out.push_back(sum / window);
      sum = 0.0;
      count = 0;
    }
  }
  return out;
}

std::string to_dat(const std::vector<double>& ys, const std::string& header) {
  std::string out = fmt::format("# window {}\n", header);
  for (std::size_t k = 0; k < ys.size(); ++k) out += fmt::format("{} {:.6g}\n", k, ys[k]);
  return out;
}

std::string to_dat(const std::vector<SharingWindow>& windows) {
  std::string out = "# window first_step last_step shared_fraction cross_branch_fraction\n";
  for (std::size_t k = 0; k < windows.size(); ++k) {
    const auto& w = windows[k];
    out += fmt::format("{} {} {} {:.6f} {:.6f}\n", k, w.first_step, w.last_step,
                       w.shared_fraction, w.cross_branch_fraction);
  }
  return out;
}

}  // namespace nasfcos
