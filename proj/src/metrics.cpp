// SPDX-License-Identifier: Apache-2.0

#include "meds/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "meds/error.hpp"
#include "meds/selection.hpp"

namespace meds::metrics {

namespace {

void check_aligned(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw ContractError("scores and labels differ in length");
}

/// Indices sorted by descending score, ties in original order.
std::vector<std::size_t> descending_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&scores](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_aligned(scores, labels);
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
  const std::size_t negatives = labels.size() - positives;
  if (positives == 0 || negatives == 0) {
    throw UndefinedMetricError("AUROC needs both positive and negative samples");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&scores](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mann-Whitney U with mid-ranks; ranks are 1-based and doubled to stay integral.
  double doubled_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double doubled_mid = static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) doubled_rank_sum += doubled_mid;
    }
    i = j;
  }
  const double p = static_cast<double>(positives);
  const double u = 0.5 * doubled_rank_sum - 0.5 * p * (p + 1.0);
  return u / (p * static_cast<double>(negatives));
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_aligned(scores, labels);
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
  if (positives == 0) throw UndefinedMetricError("average precision needs at least one positive");
  const auto order = descending_order(scores);
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (labels[order[k]] != 1) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(k + 1);
  }
  return sum / static_cast<double>(positives);
}

std::vector<std::vector<std::size_t>> connected_regions(std::span<const std::uint8_t> mask,
                                                        std::uint32_t height, std::uint32_t width) {
  const std::size_t n = std::size_t{height} * width;
  if (mask.size() != n) throw ContractError("mask does not match the H x W grid");
  std::vector<std::uint8_t> visited(n, 0);
  std::vector<std::vector<std::size_t>> regions;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < n; ++start) {
    if (!mask[start] || visited[start]) continue;
    std::vector<std::size_t> region;
    visited[start] = 1;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      region.push_back(p);
      const std::size_t h = p / width;
      const std::size_t w = p % width;
      auto visit = [&](std::size_t q) {
        if (mask[q] && !visited[q]) {
          visited[q] = 1;
          stack.push_back(q);
        }
      };
      if (h > 0) visit(p - width);
      if (h + 1 < height) visit(p + width);
      if (w > 0) visit(p - 1);
      if (w + 1 < width) visit(p + 1);
    }
    std::sort(region.begin(), region.end());
    regions.push_back(std::move(region));
  }
  return regions;
}

std::vector<ProPoint> pro_curve(std::span<const ScoreMap> maps, std::span<const Mask> masks) {
  if (maps.size() != masks.size()) throw ContractError("score maps and masks differ in count");
  struct Pixel {
    double score;
    std::ptrdiff_t region;  // -1 for normal pixels
  };
  std::vector<Pixel> pixels;
  std::vector<std::size_t> region_size;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const ScoreMap& map = maps[i];
    if (masks[i].size() != map.size()) throw ContractError("mask does not match score map");
    std::vector<std::ptrdiff_t> owner(map.size(), -1);
    for (const auto& region : connected_regions(masks[i], map.height, map.width)) {
      for (std::size_t p : region) owner[p] = static_cast<std::ptrdiff_t>(region_size.size());
      region_size.push_back(region.size());
    }
    for (std::size_t p = 0; p < map.size(); ++p) pixels.push_back({map.values[p], owner[p]});
  }
  const auto normal_pixels = static_cast<std::size_t>(
      std::count_if(pixels.begin(), pixels.end(), [](const Pixel& px) { return px.region < 0; }));
  if (region_size.empty()) throw UndefinedMetricError("AUPRO needs at least one anomalous region");
  if (normal_pixels == 0) throw UndefinedMetricError("AUPRO needs at least one normal pixel");

  std::sort(pixels.begin(), pixels.end(), [](const Pixel& a, const Pixel& b) { return a.score > b.score; });
  std::vector<std::size_t> covered(region_size.size(), 0);
  std::size_t false_positives = 0;
  std::vector<ProPoint> curve{{0.0, 0.0}};
  std::size_t i = 0;
  while (i < pixels.size()) {
    std::size_t j = i;
    while (j < pixels.size() && pixels[j].score == pixels[i].score) {
      if (pixels[j].region < 0) {
        ++false_positives;
      } else {
        ++covered[static_cast<std::size_t>(pixels[j].region)];
      }
      ++j;
    }
    double overlap = 0.0;
    for (std::size_t r = 0; r < region_size.size(); ++r) {
      overlap += static_cast<double>(covered[r]) / static_cast<double>(region_size[r]);
    }
    curve.push_back({static_cast<double>(false_positives) / static_cast<double>(normal_pixels),
                     overlap / static_cast<double>(region_size.size())});
    i = j;
  }
  return curve;
}

double integrate_pro(std::span<const ProPoint> curve, double fpr_limit) {
  if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) throw ContractError("FPR limit must lie in (0, 1]");
  double area = 0.0;
  for (std::size_t k = 1; k < curve.size(); ++k) {
    const ProPoint a = curve[k - 1];
    const ProPoint b = curve[k];
    if (a.fpr >= fpr_limit) break;
    if (b.fpr <= fpr_limit) {
      area += 0.5 * (a.pro + b.pro) * (b.fpr - a.fpr);
    } else {
      const double t = (fpr_limit - a.fpr) / (b.fpr - a.fpr);
      const double pro_at_limit = a.pro + t * (b.pro - a.pro);
      area += 0.5 * (a.pro + pro_at_limit) * (fpr_limit - a.fpr);
    }
  }
  return area / fpr_limit;
}

double aupro(std::span<const ScoreMap> maps, std::span<const Mask> masks, double fpr_limit) {
  const auto curve = pro_curve(maps, masks);
  return integrate_pro(curve, fpr_limit);
}

double alc_auprc(std::span<const double> etas, std::span<const std::uint8_t> contaminated) {
  return average_precision(etas, contaminated);
}

double inspection_depth(std::span<const double> etas, std::span<const std::uint8_t> contaminated) {
  check_aligned(etas, contaminated);
  const auto order = descending_order(etas);
  std::size_t last = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (contaminated[order[k]] == 1) last = k + 1;
  }
  if (last == 0) throw UndefinedMetricError("inspection depth needs at least one contaminated sample");
  return static_cast<double>(last) / static_cast<double>(order.size());
}

EvaluationReport evaluate(const FeatureDataset& test, std::span<const ScoreMap> maps,
                          double top_percent, double fpr_limit) {
  if (!test.truth_labels) throw UndefinedMetricError("evaluation needs truth labels");
  if (maps.size() != test.size()) throw ContractError("one score map per test image is required");
  EvaluationReport report;
  std::vector<double> image_scores(maps.size());
  for (std::size_t i = 0; i < maps.size(); ++i) image_scores[i] = robust_max(maps[i], top_percent);
  report.image_auroc = auroc(image_scores, *test.truth_labels);
  report.image_ap = average_precision(image_scores, *test.truth_labels);
  if (test.pixel_masks) {
    std::vector<double> pixel_scores;
    std::vector<std::uint8_t> pixel_labels;
    for (std::size_t i = 0; i < maps.size(); ++i) {
      pixel_scores.insert(pixel_scores.end(), maps[i].values.begin(), maps[i].values.end());
      pixel_labels.insert(pixel_labels.end(), (*test.pixel_masks)[i].begin(), (*test.pixel_masks)[i].end());
    }
    report.pixel_ap = average_precision(pixel_scores, pixel_labels);
    report.pixel_aupro = aupro(maps, *test.pixel_masks, fpr_limit);
  } else {
    report.pixel_ap = std::numeric_limits<double>::quiet_NaN();
    report.pixel_aupro = std::numeric_limits<double>::quiet_NaN();
  }
  return report;
}

namespace {

std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void KeyValueReport::set(const std::string& key, double value) { set(key, format_number(value)); }

void KeyValueReport::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : entries_) {
    if (k == key) {
      v = value;
      return;
    }
  }
  entries_.emplace_back(key, value);
}

bool KeyValueReport::contains(const std::string& key) const {
  return std::any_of(entries_.begin(), entries_.end(), [&key](const auto& e) { return e.first == key; });
}

double KeyValueReport::number(const std::string& key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return std::stod(v);
  }
  throw LookupError("report has no key '" + key + "'");
}

std::string KeyValueReport::to_text() const {
  std::ostringstream out;
  for (const auto& [k, v] : entries_) out << k << " = " << v << '\n';
  return out.str();
}

std::string KeyValueReport::to_table() const {
  std::size_t width = 6;
  for (const auto& e : entries_) width = std::max(width, e.first.size());
  std::ostringstream out;
  char buf[64];
  for (const auto& [k, v] : entries_) {
    out << k << std::string(width - k.size() + 2, ' ');
    char* end = nullptr;
    const double d = std::strtod(v.c_str(), &end);
    if (end && *end == '\0' && !v.empty()) {
      std::snprintf(buf, sizeof(buf), "%.4f", d);
      out << buf << '\n';
    } else {
      out << v << '\n';
    }
  }
  return out.str();
}

KeyValueReport KeyValueReport::parse(const std::string& text) {
  KeyValueReport report;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw ParseError(ParseErrorCode::kMalformed, "report: bad line '" + line + "'");
    report.set(line.substr(0, eq), line.substr(eq + 3));
  }
  return report;
}

}  // namespace meds::metrics
