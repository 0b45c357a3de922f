// SPDX-License-Identifier: Apache-2.0

#pragma once

// Exact and Monte-Carlo evaluation of expected nearest-neighbour distances for
// a memory of m features drawn with replacement from a fixed finite pool, and
// the gap decomposition between a normal and an anomalous query.
//
// Every distribution here is a step function of the radius: the proportion
// pi(q, r) only changes at the query-to-pool distances. All integrals are
// therefore finite sums over the breakpoint grid and are evaluated exactly up
// to floating-point rounding (compensated summation).

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace meds::theory {

/// N >= 2 finite C-dimensional vectors.
class FinitePool {
 public:
  FinitePool(std::size_t dim, std::vector<double> vectors);

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return vectors_.size() / dim_; }
  std::span<const double> vector(std::size_t i) const { return {vectors_.data() + i * dim_, dim_}; }

  /// Distances from `q` to every pool vector, in pool order.
  std::vector<double> distances(std::span<const double> q) const;

 private:
  std::size_t dim_;
  std::vector<double> vectors_;
};

/// Fraction of the pool within (closed) distance r of q.
double spatial_proportion(std::span<const double> q, const FinitePool& pool, double r);

/// E[min distance] for m draws with replacement, via the probability mass of
/// each distinct distance.
double expected_nn_distance_exact(std::span<const double> q, const FinitePool& pool, std::size_t m);

/// Same quantity computed as the piecewise integral of the survival function
/// (1 - pi)^m. Independent route used to cross-check the mass form.
double expected_nn_distance_integral(std::span<const double> q, const FinitePool& pool,
                                     std::size_t m);

struct MonteCarloEstimate {
  double estimate = 0.0;
  double standard_error = 0.0;
};

/// Mean over trials of the nearest distance among m i.i.d. uniform draws.
MonteCarloEstimate expected_nn_distance_mc(std::span<const double> q, const FinitePool& pool,
                                           std::size_t m, std::size_t trials, std::uint64_t seed);

/// Without-replacement variant matching how the pipeline builds banks.
/// Empirical comparison only; the closed forms assume replacement. m <= N.
MonteCarloEstimate expected_nn_distance_mc_without_replacement(std::span<const double> q,
                                                               const FinitePool& pool, std::size_t m,
                                                               std::size_t trials,
                                                               std::uint64_t seed);

/// Step functions of the radius for one (anomalous, normal) query pair.
/// Interval j is [breakpoints[j], breakpoints[j+1]); past the last breakpoint
/// both proportions are 1.
struct GapAnalysis {
  std::size_t pool_size = 0;
  std::vector<double> breakpoints;       // 0 followed by sorted distinct distances
  std::vector<std::size_t> count_norm;   // #{d_norm <= breakpoints[j]}
  std::vector<std::size_t> count_anom;   // #{d_anom <= breakpoints[j]}
  std::vector<double> pi_norm;
  std::vector<double> pi_anom;
  std::vector<double> delta;             // pi_norm - pi_anom

  std::size_t intervals() const { return breakpoints.size() - 1; }
  double length(std::size_t j) const { return breakpoints[j + 1] - breakpoints[j]; }

  double gap(std::size_t m) const;
  double gap_first_order(std::size_t m) const;
  double remainder_upper_bound(std::size_t m) const;

  /// delta >= 0 everywhere and delta > 0 with pi_norm < 1 on an interval of
  /// positive length. Decided on the integer counts, so exact.
  bool strictly_separable() const;
};

GapAnalysis analyze_gap(std::span<const double> q_anom, std::span<const double> q_norm,
                        const FinitePool& pool);

/// E[D(q_anom)] - E[D(q_norm)] from the two exact expectations.
double gap(std::span<const double> q_anom, std::span<const double> q_norm, const FinitePool& pool,
           std::size_t m);

/// Integral of delta(r) * m (1 - pi_norm(r))^(m-1).
double gap_first_order(std::span<const double> q_anom, std::span<const double> q_norm,
                       const FinitePool& pool, std::size_t m);

/// m(m-1)/2 * integral of (1 - pi_anom)^(m-2) delta^2; dominates the remainder
/// whenever delta >= 0. Zero for m = 1.
double remainder_upper_bound(std::span<const double> q_anom, std::span<const double> q_norm,
                             const FinitePool& pool, std::size_t m);

/// m * (1 - pi)^(m - 1).
double first_order_weight(std::size_t m, double pi);

/// Continuous maximiser -1 / ln(1 - pi) of the weight. Throws DomainError
/// unless 0 < pi < 1.
double weight_unimodal_peak(double pi);

/// Integer argmax of the weight over m in [1, m_max] (first on ties).
std::size_t weight_integer_argmax(double pi, std::size_t m_max);

/// True when the weight over m = 1..m_max rises then falls and its argmax is
/// floor or ceil of the continuous peak.
bool weight_is_unimodal(double pi, std::size_t m_max);

struct QueryPair {
  std::vector<double> anomalous;
  std::vector<double> normal;
};

struct TheoryRow {
  std::size_t m = 0;
  double gap = 0.0;
  double first_order = 0.0;
  double remainder_bound = 0.0;
  bool gap_positive = false;
  bool first_order_le_gap = false;
  bool remainder_within_bound = false;
};

struct PairReport {
  std::size_t index = 0;
  bool separable = false;
  std::size_t breakpoints_checked = 0;  // breakpoints with pi_norm in (0, 1)
  bool unimodal = false;
  std::vector<TheoryRow> rows;

  bool all_pass() const;
};

struct TheoryReport {
  double tolerance = 1e-9;
  std::vector<PairReport> pairs;

  bool all_pass() const;

  /// `key = value` lines; doubles printed with 17 significant digits.
  std::string to_key_value() const;
  static TheoryReport from_key_value(const std::string& text);
  /// Fixed-width human-readable table.
  std::string to_table() const;

  bool operator==(const TheoryReport&) const;
};

/// Evaluates every pair at every m. Pairs failing the separability check are
/// still evaluated and flagged; the checks are reported, not asserted.
TheoryReport verify_theorem(const FinitePool& pool, std::span<const QueryPair> pairs,
                            std::span<const std::size_t> m_grid, double tolerance = 1e-9);

/// Random strictly separable pair: the normal query sits on a pool point, the
/// anomalous one is pushed along a random direction until the check passes.
QueryPair make_separable_pair(const FinitePool& pool, std::uint64_t seed);

}  // namespace meds::theory
