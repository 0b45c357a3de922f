// SPDX-License-Identifier: Apache-2.0

#include "meds/theory.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "meds/error.hpp"
#include "meds/random.hpp"

namespace meds::theory {

namespace {

/// Neumaier compensated summation.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

void require_m(std::size_t m) {
  if (m == 0) throw ContractError("memory size m must be >= 1");
}

void require_dim(std::span<const double> q, const FinitePool& pool) {
  if (q.size() != pool.dim()) throw ContractError("query dimension does not match the pool");
}

std::vector<double> sorted_distances(std::span<const double> q, const FinitePool& pool) {
  auto d = pool.distances(q);
  std::sort(d.begin(), d.end());
  return d;
}

double power(double base, std::size_t exponent) {
  return std::pow(base, static_cast<double>(exponent));
}

}  // namespace

FinitePool::FinitePool(std::size_t dim, std::vector<double> vectors)
    : dim_(dim), vectors_(std::move(vectors)) {
  if (dim_ == 0) throw ContractError("pool dimension must be positive");
  if (vectors_.size() % dim_ != 0) throw ContractError("pool storage is not a multiple of dim");
  if (size() < 2) throw ContractError("pool needs at least two vectors");
  for (double v : vectors_) {
    if (!std::isfinite(v)) throw ContractError("pool contains a non-finite value");
  }
}

std::vector<double> FinitePool::distances(std::span<const double> q) const {
  std::vector<double> out(size());
  for (std::size_t i = 0; i < size(); ++i) {
    const auto z = vector(i);
    double acc = 0.0;
    for (std::size_t c = 0; c < dim_; ++c) {
      const double d = z[c] - q[c];
      acc += d * d;
    }
    out[i] = std::sqrt(acc);
  }
  return out;
}

double spatial_proportion(std::span<const double> q, const FinitePool& pool, double r) {
  require_dim(q, pool);
  if (!(r >= 0.0)) throw ContractError("radius must be non-negative");
  const auto d = pool.distances(q);
  const auto inside = std::count_if(d.begin(), d.end(), [r](double x) { return x <= r; });
  return static_cast<double>(inside) / static_cast<double>(pool.size());
}

double expected_nn_distance_exact(std::span<const double> q, const FinitePool& pool, std::size_t m) {
  require_m(m);
  require_dim(q, pool);
  const auto d = sorted_distances(q, pool);
  const double n = static_cast<double>(d.size());
  CompensatedSum sum;
  std::size_t i = 0;
  while (i < d.size()) {
    std::size_t j = i;
    while (j < d.size() && d[j] == d[i]) ++j;
    // P(D = d[i]) = P(D >= d[i]) - P(D >= next distinct value)
    const double at_least = power(static_cast<double>(d.size() - i) / n, m);
    const double beyond = power(static_cast<double>(d.size() - j) / n, m);
    sum.add(d[i] * (at_least - beyond));
    i = j;
  }
  return sum.value();
}

double expected_nn_distance_integral(std::span<const double> q, const FinitePool& pool,
                                     std::size_t m) {
  require_m(m);
  require_dim(q, pool);
  const auto d = sorted_distances(q, pool);
  const double n = static_cast<double>(d.size());
  CompensatedSum sum;
  double previous = 0.0;
  std::size_t i = 0;
  while (i < d.size()) {
    // On [previous, d[i]) exactly d.size() - i distances exceed r.
    const double survival = power(static_cast<double>(d.size() - i) / n, m);
    sum.add(survival * (d[i] - previous));
    previous = d[i];
    while (i < d.size() && d[i] == previous) ++i;
  }
  return sum.value();
}

namespace {

MonteCarloEstimate summarize(const std::vector<double>& samples) {
  double mean = 0.0, m2 = 0.0;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const double delta = samples[k] - mean;
    mean += delta / static_cast<double>(k + 1);
    m2 += delta * (samples[k] - mean);
  }
  MonteCarloEstimate out;
  out.estimate = mean;
  if (samples.size() > 1) {
    const double var = m2 / static_cast<double>(samples.size() - 1);
    out.standard_error = std::sqrt(var / static_cast<double>(samples.size()));
  }
  return out;
}

}  // namespace

MonteCarloEstimate expected_nn_distance_mc(std::span<const double> q, const FinitePool& pool,
                                           std::size_t m, std::size_t trials, std::uint64_t seed) {
  require_m(m);
  require_dim(q, pool);
  if (trials < 1) throw ContractError("Monte-Carlo needs at least one trial");
  const auto d = pool.distances(q);
  Rng rng(seed);
  std::vector<double> samples(trials);
  for (auto& s : samples) {
    double best = d[rng.uniform_index(d.size())];
    for (std::size_t k = 1; k < m; ++k) best = std::min(best, d[rng.uniform_index(d.size())]);
    s = best;
  }
  return summarize(samples);
}

MonteCarloEstimate expected_nn_distance_mc_without_replacement(std::span<const double> q,
                                                               const FinitePool& pool, std::size_t m,
                                                               std::size_t trials,
                                                               std::uint64_t seed) {
  require_m(m);
  require_dim(q, pool);
  if (trials < 1) throw ContractError("Monte-Carlo needs at least one trial");
  if (m > pool.size()) throw ContractError("without replacement requires m <= N");
  auto d = pool.distances(q);
  Rng rng(seed);
  std::vector<double> samples(trials);
  for (auto& s : samples) {
    double best = d[0];
    for (std::size_t k = 0; k < m; ++k) {
      std::swap(d[k], d[k + rng.uniform_index(d.size() - k)]);
      best = k == 0 ? d[0] : std::min(best, d[k]);
    }
    s = best;
  }
  return summarize(samples);
}

GapAnalysis analyze_gap(std::span<const double> q_anom, std::span<const double> q_norm,
                        const FinitePool& pool) {
  require_dim(q_anom, pool);
  require_dim(q_norm, pool);
  const auto da = sorted_distances(q_anom, pool);
  const auto dn = sorted_distances(q_norm, pool);

  GapAnalysis g;
  g.pool_size = pool.size();
  g.breakpoints.reserve(da.size() + dn.size() + 1);
  g.breakpoints.push_back(0.0);
  g.breakpoints.insert(g.breakpoints.end(), da.begin(), da.end());
  g.breakpoints.insert(g.breakpoints.end(), dn.begin(), dn.end());
  std::sort(g.breakpoints.begin(), g.breakpoints.end());
  g.breakpoints.erase(std::unique(g.breakpoints.begin(), g.breakpoints.end()), g.breakpoints.end());

  const double n = static_cast<double>(pool.size());
  for (double b : g.breakpoints) {
    const auto cn = static_cast<std::size_t>(std::upper_bound(dn.begin(), dn.end(), b) - dn.begin());
    const auto ca = static_cast<std::size_t>(std::upper_bound(da.begin(), da.end(), b) - da.begin());
    g.count_norm.push_back(cn);
    g.count_anom.push_back(ca);
    g.pi_norm.push_back(static_cast<double>(cn) / n);
    g.pi_anom.push_back(static_cast<double>(ca) / n);
    g.delta.push_back((static_cast<double>(cn) - static_cast<double>(ca)) / n);
  }
  return g;
}

double GapAnalysis::gap(std::size_t m) const {
  require_m(m);
  const double n = static_cast<double>(pool_size);
  CompensatedSum sum;
  for (std::size_t j = 0; j < intervals(); ++j) {
    const double sa = power(static_cast<double>(pool_size - count_anom[j]) / n, m);
    const double sn = power(static_cast<double>(pool_size - count_norm[j]) / n, m);
    sum.add((sa - sn) * length(j));
  }
  return sum.value();
}

double GapAnalysis::gap_first_order(std::size_t m) const {
  require_m(m);
  const double n = static_cast<double>(pool_size);
  CompensatedSum sum;
  for (std::size_t j = 0; j < intervals(); ++j) {
    if (count_norm[j] == count_anom[j]) continue;
    const double weight =
        static_cast<double>(m) * power(static_cast<double>(pool_size - count_norm[j]) / n, m - 1);
    sum.add(delta[j] * weight * length(j));
  }
  return sum.value();
}

double GapAnalysis::remainder_upper_bound(std::size_t m) const {
  require_m(m);
  if (m < 2) return 0.0;
  const double n = static_cast<double>(pool_size);
  const double coeff = 0.5 * static_cast<double>(m) * static_cast<double>(m - 1);
  CompensatedSum sum;
  for (std::size_t j = 0; j < intervals(); ++j) {
    if (count_norm[j] == count_anom[j]) continue;
    const double weight = power(static_cast<double>(pool_size - count_anom[j]) / n, m - 2);
    sum.add(weight * delta[j] * delta[j] * length(j));
  }
  return coeff * sum.value();
}

bool GapAnalysis::strictly_separable() const {
  bool strict_interval = false;
  for (std::size_t j = 0; j < breakpoints.size(); ++j) {
    if (count_norm[j] < count_anom[j]) return false;
    if (j < intervals() && count_norm[j] > count_anom[j] && count_norm[j] < pool_size) {
      strict_interval = true;
    }
  }
  return strict_interval;
}

double gap(std::span<const double> q_anom, std::span<const double> q_norm, const FinitePool& pool,
           std::size_t m) {
  return expected_nn_distance_exact(q_anom, pool, m) - expected_nn_distance_exact(q_norm, pool, m);
}

double gap_first_order(std::span<const double> q_anom, std::span<const double> q_norm,
                       const FinitePool& pool, std::size_t m) {
  return analyze_gap(q_anom, q_norm, pool).gap_first_order(m);
}

double remainder_upper_bound(std::span<const double> q_anom, std::span<const double> q_norm,
                             const FinitePool& pool, std::size_t m) {
  return analyze_gap(q_anom, q_norm, pool).remainder_upper_bound(m);
}

double first_order_weight(std::size_t m, double pi) {
  return static_cast<double>(m) * power(1.0 - pi, m - 1);
}

double weight_unimodal_peak(double pi) {
  if (!(pi > 0.0 && pi < 1.0)) throw DomainError("weight peak requires 0 < pi < 1");
  return -1.0 / std::log1p(-pi);
}

namespace {

// log of m (1 - pi)^(m - 1); avoids underflow for large m.
double log_weight(std::size_t m, double log_p) {
  return std::log(static_cast<double>(m)) + static_cast<double>(m - 1) * log_p;
}

}  // namespace

std::size_t weight_integer_argmax(double pi, std::size_t m_max) {
  if (!(pi > 0.0 && pi < 1.0)) throw DomainError("weight argmax requires 0 < pi < 1");
  if (m_max < 1) throw ContractError("m_max must be >= 1");
  const double log_p = std::log1p(-pi);
  std::size_t best = 1;
  double best_value = log_weight(1, log_p);
  for (std::size_t m = 2; m <= m_max; ++m) {
    const double v = log_weight(m, log_p);
    if (v > best_value) {
      best_value = v;
      best = m;
    }
  }
  return best;
}

bool weight_is_unimodal(double pi, std::size_t m_max) {
  const double peak = weight_unimodal_peak(pi);
  const std::size_t argmax = weight_integer_argmax(pi, m_max);
  const double log_p = std::log1p(-pi);
  // Two neighbours may tie at the top when the peak falls exactly between them.
  constexpr double kTieSlack = 1e-12;
  for (std::size_t m = 1; m < m_max; ++m) {
    const double here = log_weight(m, log_p);
    const double next = log_weight(m + 1, log_p);
    const bool near_tie = std::abs(next - here) <= kTieSlack * std::max(1.0, std::abs(here));
    if (m < argmax && !(next > here || (m + 1 == argmax && near_tie))) return false;
    if (m >= argmax && !(next < here || (m == argmax && near_tie))) return false;
  }
  const auto lo = static_cast<std::size_t>(std::floor(peak));
  const auto hi = static_cast<std::size_t>(std::ceil(peak));
  if (hi > m_max) return argmax == m_max;
  return argmax == lo || argmax == hi;
}

bool PairReport::all_pass() const {
  if (!separable || !unimodal) return false;
  return std::all_of(rows.begin(), rows.end(), [](const TheoryRow& r) {
    return r.gap_positive && r.first_order_le_gap && r.remainder_within_bound;
  });
}

bool TheoryReport::all_pass() const {
  return std::all_of(pairs.begin(), pairs.end(), [](const PairReport& p) { return p.all_pass(); });
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string TheoryReport::to_key_value() const {
  std::ostringstream out;
  out << "theory.tolerance = " << fmt_double(tolerance) << '\n';
  out << "theory.pairs = " << pairs.size() << '\n';
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const PairReport& p = pairs[i];
    const std::string pre = "pair." + std::to_string(i) + ".";
    out << pre << "index = " << p.index << '\n';
    out << pre << "separable = " << (p.separable ? 1 : 0) << '\n';
    out << pre << "breakpoints_checked = " << p.breakpoints_checked << '\n';
    out << pre << "unimodal = " << (p.unimodal ? 1 : 0) << '\n';
    out << pre << "rows = " << p.rows.size() << '\n';
    for (std::size_t k = 0; k < p.rows.size(); ++k) {
      const TheoryRow& r = p.rows[k];
      const std::string rp = pre + "row." + std::to_string(k) + ".";
      out << rp << "m = " << r.m << '\n';
      out << rp << "gap = " << fmt_double(r.gap) << '\n';
      out << rp << "first_order = " << fmt_double(r.first_order) << '\n';
      out << rp << "remainder_bound = " << fmt_double(r.remainder_bound) << '\n';
      out << rp << "gap_positive = " << (r.gap_positive ? 1 : 0) << '\n';
      out << rp << "first_order_le_gap = " << (r.first_order_le_gap ? 1 : 0) << '\n';
      out << rp << "remainder_within_bound = " << (r.remainder_within_bound ? 1 : 0) << '\n';
    }
  }
  return out.str();
}

TheoryReport TheoryReport::from_key_value(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) {
      throw ParseError(ParseErrorCode::kMalformed, "theory report: bad line '" + line + "'");
    }
    kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  auto get = [&kv](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw ParseError(ParseErrorCode::kMalformed, "theory report: missing " + key);
    return it->second;
  };
  auto as_size = [&](const std::string& key) { return static_cast<std::size_t>(std::stoull(get(key))); };
  auto as_double = [&](const std::string& key) { return std::stod(get(key)); };
  auto as_bool = [&](const std::string& key) { return get(key) == "1"; };

  TheoryReport report;
  try {
    report.tolerance = as_double("theory.tolerance");
    const std::size_t count = as_size("theory.pairs");
    for (std::size_t i = 0; i < count; ++i) {
      const std::string pre = "pair." + std::to_string(i) + ".";
      PairReport p;
      p.index = as_size(pre + "index");
      p.separable = as_bool(pre + "separable");
      p.breakpoints_checked = as_size(pre + "breakpoints_checked");
      p.unimodal = as_bool(pre + "unimodal");
      const std::size_t rows = as_size(pre + "rows");
      for (std::size_t k = 0; k < rows; ++k) {
        const std::string rp = pre + "row." + std::to_string(k) + ".";
        TheoryRow r;
        r.m = as_size(rp + "m");
        r.gap = as_double(rp + "gap");
        r.first_order = as_double(rp + "first_order");
        r.remainder_bound = as_double(rp + "remainder_bound");
        r.gap_positive = as_bool(rp + "gap_positive");
        r.first_order_le_gap = as_bool(rp + "first_order_le_gap");
        r.remainder_within_bound = as_bool(rp + "remainder_within_bound");
        p.rows.push_back(r);
      }
      report.pairs.push_back(std::move(p));
    }
  } catch (const std::logic_error& e) {
    throw ParseError(ParseErrorCode::kMalformed, std::string("theory report: ") + e.what());
  }
  return report;
}

std::string TheoryReport::to_table() const {
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%5s %5s %14s %14s %14s %s\n", "pair", "m", "gap", "first_order",
                "rem_bound", "checks");
  out << buf;
  for (const PairReport& p : pairs) {
    std::snprintf(buf, sizeof(buf), "# pair %zu separable=%s unimodal=%s (%zu breakpoints)\n",
                  p.index, p.separable ? "yes" : "NO", p.unimodal ? "yes" : "NO",
                  p.breakpoints_checked);
    out << buf;
    for (const TheoryRow& r : p.rows) {
      std::snprintf(buf, sizeof(buf), "%5zu %5zu %14.6e %14.6e %14.6e %c%c%c\n", p.index, r.m, r.gap,
                    r.first_order, r.remainder_bound, r.gap_positive ? '+' : '-',
                    r.first_order_le_gap ? '+' : '-', r.remainder_within_bound ? '+' : '-');
      out << buf;
    }
  }
  out << (all_pass() ? "result: PASS\n" : "result: FAIL\n");
  return out.str();
}

bool TheoryReport::operator==(const TheoryReport& other) const {
  if (tolerance != other.tolerance || pairs.size() != other.pairs.size()) return false;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const PairReport& a = pairs[i];
    const PairReport& b = other.pairs[i];
    if (a.index != b.index || a.separable != b.separable || a.unimodal != b.unimodal ||
        a.breakpoints_checked != b.breakpoints_checked || a.rows.size() != b.rows.size()) {
      return false;
    }
    for (std::size_t k = 0; k < a.rows.size(); ++k) {
      const TheoryRow& x = a.rows[k];
      const TheoryRow& y = b.rows[k];
      if (x.m != y.m || x.gap != y.gap || x.first_order != y.first_order ||
          x.remainder_bound != y.remainder_bound || x.gap_positive != y.gap_positive ||
          x.first_order_le_gap != y.first_order_le_gap ||
          x.remainder_within_bound != y.remainder_within_bound) {
        return false;
      }
    }
  }
  return true;
}

TheoryReport verify_theorem(const FinitePool& pool, std::span<const QueryPair> pairs,
                            std::span<const std::size_t> m_grid, double tolerance) {
  TheoryReport report;
  report.tolerance = tolerance;
  const std::size_t grid_max = m_grid.empty() ? 1 : *std::max_element(m_grid.begin(), m_grid.end());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const QueryPair& pair = pairs[i];
    const GapAnalysis analysis = analyze_gap(pair.anomalous, pair.normal, pool);
    PairReport p;
    p.index = i;
    p.separable = analysis.strictly_separable();
    p.unimodal = true;
    for (std::size_t j = 0; j < analysis.breakpoints.size(); ++j) {
      const std::size_t c = analysis.count_norm[j];
      if (c == 0 || c == pool.size()) continue;
      const double pi = analysis.pi_norm[j];
      const auto m_max = std::max({10 * pool.size(), grid_max,
                                   static_cast<std::size_t>(std::ceil(weight_unimodal_peak(pi))) + 1});
      ++p.breakpoints_checked;
      if (!weight_is_unimodal(pi, m_max)) p.unimodal = false;
    }
    for (std::size_t m : m_grid) {
      TheoryRow r;
      r.m = m;
      r.gap = gap(pair.anomalous, pair.normal, pool, m);
      r.first_order = analysis.gap_first_order(m);
      r.remainder_bound = analysis.remainder_upper_bound(m);
      r.gap_positive = r.gap > 0.0;
      r.first_order_le_gap = r.first_order <= r.gap + tolerance;
      r.remainder_within_bound = r.gap - r.first_order <= r.remainder_bound + tolerance;
      p.rows.push_back(r);
    }
    report.pairs.push_back(std::move(p));
  }
  return report;
}

QueryPair make_separable_pair(const FinitePool& pool, std::uint64_t seed) {
  Rng rng(seed);
  QueryPair pair;
  const auto anchor = pool.vector(rng.uniform_index(pool.size()));
  pair.normal.assign(anchor.begin(), anchor.end());
  const auto d = pool.distances(pair.normal);
  const double radius = *std::max_element(d.begin(), d.end());

  std::vector<double> direction(pool.dim());
  double norm = 0.0;
  while (norm < 1e-9) {
    norm = 0.0;
    for (double& x : direction) {
      x = rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
  }
  for (double& x : direction) x /= norm;

  auto place = [&](double distance) {
    pair.anomalous.resize(pool.dim());
    for (std::size_t c = 0; c < pool.dim(); ++c) {
      pair.anomalous[c] = pair.normal[c] + distance * direction[c];
    }
  };
  constexpr int kAttempts = 200;
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    place(radius * (0.2 + 2.3 * rng.uniform()));
    if (analyze_gap(pair.anomalous, pair.normal, pool).strictly_separable()) return pair;
  }
  // Beyond twice the radius the anomalous ball only reaches the pool once the
  // normal ball already covers it.
  place(2.5 * radius);
  return pair;
}

}  // namespace meds::theory
