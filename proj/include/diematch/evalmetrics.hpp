#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "diematch/geom.hpp"

namespace diematch::eval {

using geom::RigidTransform;
using geom::Vec3;

struct SreResult {
  double value = 0.0;
  std::size_t used = 0;     // points contributing to the mean
  std::size_t skipped = 0;  // points whose image sits on the centroid image
};

/// Scaled registration error with the skipped-term count. The mean runs over
/// the contributing points.
inline SreResult sre_detail(const std::vector<Vec3>& points, const RigidTransform& gt, const RigidTransform& est) {
  if (points.empty()) throw Error(Errc::EmptyCloud, "sre needs a non-empty cloud");
  const Vec3 center = gt.apply(geom::centroid(points));
  SreResult r;
  double sum = 0.0;
  for (const Vec3& x : points) {
    const Vec3 g = gt.apply(x);
    const double denom = (g - center).norm();
    if (denom < 1e-12) {
      ++r.skipped;
      continue;
    }
    sum += (g - est.apply(x)).norm() / denom;
    ++r.used;
  }
  if (r.used == 0) throw Error(Errc::DegenerateCloud, "every point coincides with the centroid");
  r.value = sum / static_cast<double>(r.used);
  return r;
}

inline double sre(const std::vector<Vec3>& points, const RigidTransform& gt, const RigidTransform& est) {
  return sre_detail(points, gt, est).value;
}

inline double sre(const geom::PointCloud& cloud, const RigidTransform& gt, const RigidTransform& est) {
  return sre(cloud.points, gt, est);
}

/// Median with the midpoint convention for even counts.
inline double median(std::vector<double> v) {
  if (v.empty()) throw Error(Errc::InvalidArgument, "median of an empty list");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

struct DieBenchmarkReport {
  std::map<std::string, double> per_die_median;
  std::map<std::string, double> per_category_mean;
  double overall = 0.0;
};

/// Per-die medians; category and overall values are unweighted means of die
/// medians. `category_of` maps die ids to category names (dies without an
/// entry only count toward the overall mean).
inline DieBenchmarkReport aggregate_sre(const std::map<std::string, std::vector<double>>& per_pair,
                                        const std::map<std::string, std::string>& category_of = {}) {
  DieBenchmarkReport r;
  std::map<std::string, std::pair<double, std::size_t>> cat;
  double total = 0.0;
  for (const auto& [die, values] : per_pair) {
    if (values.empty()) throw Error(Errc::EmptyDie, "die '" + die + "' has no pairs");
    const double m = median(values);
    r.per_die_median.emplace(die, m);
    total += m;
    if (const auto it = category_of.find(die); it != category_of.end()) {
      cat[it->second].first += m;
      ++cat[it->second].second;
    }
  }
  for (const auto& [name, acc] : cat) r.per_category_mean.emplace(name, acc.first / static_cast<double>(acc.second));
  r.overall = r.per_die_median.empty() ? 0.0 : total / static_cast<double>(r.per_die_median.size());
  return r;
}

// ---------------------------------------------------------------------------
// pair-counting metrics

struct PairConfusion {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::uint64_t total() const noexcept { return tp + fp + fn + tn; }
  friend bool operator==(const PairConfusion&, const PairConfusion&) = default;
};

using Labeling = std::map<std::string, int>;

namespace detail {

inline std::uint64_t choose2(std::uint64_t n) { return n * (n - (n > 0)) / 2; }

struct Contingency {
  std::uint64_t n = 0;
  std::uint64_t sum_cells = 0;  // Σ C(n_ij, 2)
  std::uint64_t sum_pred = 0;   // Σ C(a_i, 2)
  std::uint64_t sum_truth = 0;  // Σ C(b_j, 2)
};

inline Contingency contingency(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (pred.size() != truth.size())
    throw Error(Errc::ItemSetMismatch, "labelings cover " + std::to_string(pred.size()) + " and " +
                                           std::to_string(truth.size()) + " items");
  std::map<std::pair<int, int>, std::uint64_t> cells;
  std::unordered_map<int, std::uint64_t> a, b;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    ++cells[{pred[i], truth[i]}];
    ++a[pred[i]];
    ++b[truth[i]];
  }
  Contingency c;
  c.n = pred.size();
  for (const auto& [k, v] : cells) c.sum_cells += choose2(v);
  for (const auto& [k, v] : a) c.sum_pred += choose2(v);
  for (const auto& [k, v] : b) c.sum_truth += choose2(v);
  return c;
}

inline std::pair<std::vector<int>, std::vector<int>> align(const Labeling& pred, const Labeling& truth) {
  if (pred.size() != truth.size()) throw Error(Errc::ItemSetMismatch, "labelings cover different item sets");
  std::vector<int> p, t;
  p.reserve(pred.size());
  t.reserve(truth.size());
  auto it = truth.begin();
  for (const auto& [id, label] : pred) {
    if (it->first != id) throw Error(Errc::ItemSetMismatch, "item '" + id + "' missing from one labeling");
    p.push_back(label);
    t.push_back(it->second);
    ++it;
  }
  return {std::move(p), std::move(t)};
}

}  // namespace detail

inline PairConfusion pair_confusion(const std::vector<int>& pred, const std::vector<int>& truth) {
  const auto c = detail::contingency(pred, truth);
  PairConfusion r;
  r.tp = c.sum_cells;
  r.fp = c.sum_pred - c.sum_cells;
  r.fn = c.sum_truth - c.sum_cells;
  r.tn = detail::choose2(c.n) - r.tp - r.fp - r.fn;
  return r;
}

inline PairConfusion pair_confusion(const Labeling& pred, const Labeling& truth) {
  const auto [p, t] = detail::align(pred, truth);
  return pair_confusion(p, t);
}

/// Fowlkes-Mallows index. When a factor of the denominator is zero the value
/// is 1 if neither labeling puts any pair together (identical all-singleton
/// partitions), else 0.
inline double fmi(const std::vector<int>& pred, const std::vector<int>& truth) {
  const PairConfusion c = pair_confusion(pred, truth);
  const std::uint64_t pp = c.tp + c.fp, tt = c.tp + c.fn;
  if (pp == 0 || tt == 0) return pp == 0 && tt == 0 ? 1.0 : 0.0;
  return static_cast<double>(c.tp) / std::sqrt(static_cast<double>(pp) * static_cast<double>(tt));
}

inline double fmi(const Labeling& pred, const Labeling& truth) {
  const auto [p, t] = detail::align(pred, truth);
  return fmi(p, t);
}

/// Adjusted Rand index, permutation-model (hypergeometric) form. Returns 1
/// when the denominator vanishes, which happens only for identical trivial
/// partitions.
inline double ari(const std::vector<int>& pred, const std::vector<int>& truth) {
  const auto c = detail::contingency(pred, truth);
  const double pairs = static_cast<double>(detail::choose2(c.n));
  if (pairs == 0.0) return 1.0;
  const double index = static_cast<double>(c.sum_cells);
  const double expected = static_cast<double>(c.sum_pred) * static_cast<double>(c.sum_truth) / pairs;
  const double max_index = 0.5 * (static_cast<double>(c.sum_pred) + static_cast<double>(c.sum_truth));
  const double denom = max_index - expected;
  if (denom == 0.0) return 1.0;
  return (index - expected) / denom;
}

inline double ari(const Labeling& pred, const Labeling& truth) {
  const auto [p, t] = detail::align(pred, truth);
  return ari(p, t);
}

/// Fraction of pairs where (p >= cut) agrees with the truth.
inline double pair_accuracy(const std::vector<double>& probabilities, const std::vector<bool>& same_die, double cut) {
  if (probabilities.size() != same_die.size())
    throw Error(Errc::LengthMismatch, std::to_string(probabilities.size()) + " probabilities vs " +
                                          std::to_string(same_die.size()) + " labels");
  if (probabilities.empty()) throw Error(Errc::InvalidArgument, "pair_accuracy of an empty list");
  std::size_t ok = 0;
  for (std::size_t i = 0; i < probabilities.size(); ++i) ok += (probabilities[i] >= cut) == same_die[i];
  return static_cast<double>(ok) / static_cast<double>(probabilities.size());
}

// ---------------------------------------------------------------------------
// benchmark report rendering

/// One method row: its die report, how many pairs failed, mean seconds per pair.
struct MethodRow {
  std::string method;
  DieBenchmarkReport report;
  std::size_t failures = 0;
  double seconds_per_pair = 0.0;
};

inline std::string format_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

/// Text table shaped like the paper's registration benchmark: one column per
/// die, then Average and Time; SRE values are shown in units of 1e-3.
inline std::string render_table(const std::vector<MethodRow>& rows) {
  std::vector<std::string> dies;
  for (const auto& r : rows)
    for (const auto& [die, m] : r.report.per_die_median)
      if (std::find(dies.begin(), dies.end(), die) == dies.end()) dies.push_back(die);
  std::sort(dies.begin(), dies.end());

  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header{"Method"};
  header.insert(header.end(), dies.begin(), dies.end());
  header.push_back("Average");
  header.push_back("Time (s)");
  cells.push_back(header);
  for (const auto& r : rows) {
    std::vector<std::string> line{r.method};
    for (const auto& d : dies) {
      const auto it = r.report.per_die_median.find(d);
      line.push_back(it == r.report.per_die_median.end() ? "-" : format_fixed(it->second * 1e3, 1));
    }
    line.push_back(format_fixed(r.report.overall * 1e3, 1));
    line.push_back(format_fixed(r.seconds_per_pair, 3));
    cells.push_back(std::move(line));
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells)
    for (std::size_t k = 0; k < line.size(); ++k) width[k] = std::max(width[k], line[k].size());

  std::string out = "SRE x 1e-3 (per-die median)\n";
  for (const auto& line : cells) {
    for (std::size_t k = 0; k < line.size(); ++k) {
      if (k) out += "  ";
      out += std::string(width[k] - line[k].size(), ' ') + line[k];
    }
    out += '\n';
  }
  return out;
}

inline std::string report_csv(const std::vector<MethodRow>& rows) {
  std::string out = "method,die,median_sre\n";
  char buf[64];
  for (const auto& r : rows) {
    for (const auto& [die, m] : r.report.per_die_median) {
      std::snprintf(buf, sizeof buf, "%.17g", m);
      out += r.method + "," + die + "," + buf + "\n";
    }
    for (const auto& [cat, m] : r.report.per_category_mean) {
      std::snprintf(buf, sizeof buf, "%.17g", m);
      out += r.method + ",category:" + cat + "," + buf + "\n";
    }
    std::snprintf(buf, sizeof buf, "%.17g", r.report.overall);
    out += r.method + ",overall," + buf + "\n";
  }
  return out;
}

inline nlohmann::ordered_json report_json(const std::vector<MethodRow>& rows, bool include_timing = true) {
  nlohmann::ordered_json doc = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json m;
    m["method"] = r.method;
    m["per_die_median"] = r.report.per_die_median;
    m["per_category_mean"] = r.report.per_category_mean;
    m["overall"] = r.report.overall;
    m["failures"] = r.failures;
    if (include_timing) m["seconds_per_pair"] = r.seconds_per_pair;
    doc.push_back(std::move(m));
  }
  return doc;
}

}  // namespace diematch::eval
