#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "diematch/pair_registration.hpp"

namespace diematch::sim {

using geom::PointCloud;
using geom::RigidTransform;
using geom::Vec3;
using reg::PointSet;
using reg::SpatialIndex;

inline constexpr int kBins = 70;
inline constexpr double kCutoff = 0.6;  // mm

/// Nearest-neighbor distances in both directions between an aligned pair.
struct DistanceSamples {
  std::vector<double> d_fwd;  // transformed source -> target
  std::vector<double> d_bwd;  // target -> transformed source
};

/// Distances from every transformed source point to `target` and back.
/// `target_index` indexes the target points.
inline DistanceSamples cloud_to_cloud(const std::vector<Vec3>& source, const SpatialIndex& target_index,
                                      const RigidTransform& t) {
  if (source.empty() || target_index.empty()) throw Error(Errc::EmptyCloud, "cloud_to_cloud needs two non-empty clouds");
  const SpatialIndex moved(geom::apply_transform(source, t));
  DistanceSamples out;
  out.d_fwd.reserve(source.size());
  for (const Vec3& p : moved.points()) out.d_fwd.push_back(target_index.nearest(p).distance());
  out.d_bwd.reserve(target_index.size());
  for (const Vec3& q : target_index.points()) out.d_bwd.push_back(moved.nearest(q).distance());
  return out;
}

inline DistanceSamples cloud_to_cloud(const PointCloud& source, const PointCloud& target, const RigidTransform& t) {
  if (source.empty() || target.empty()) throw Error(Errc::EmptyCloud, "cloud_to_cloud needs two non-empty clouds");
  return cloud_to_cloud(source.points, SpatialIndex(target.points), t);
}

/// Mean of the normalized forward and backward distance histograms over
/// [0, cutoff). `empty_fwd`/`empty_bwd` flag a side with no in-range sample.
struct DistanceHistogram {
  std::array<double, kBins> bins{};
  double cutoff = kCutoff;
  bool empty_fwd = false;
  bool empty_bwd = false;

  static constexpr double bin_width() { return kCutoff / kBins; }
  bool empty() const noexcept { return empty_fwd && empty_bwd; }
  Eigen::Map<const Eigen::VectorXd> vector() const { return {bins.data(), kBins}; }
};

/// Bin of `d`, or -1 when it falls outside [0, cutoff).
inline int bin_index(double d) {
  if (!(d >= 0.0) || !(d < kCutoff)) return -1;
  return std::min(static_cast<int>(d / DistanceHistogram::bin_width()), kBins - 1);
}

namespace detail {

// normalized frequencies of one side; false when nothing is in range
inline bool side_histogram(const std::vector<double>& d, std::array<double, kBins>& h) {
  std::array<std::size_t, kBins> counts{};
  std::size_t total = 0;
  for (double x : d) {
    const int b = bin_index(x);
    if (b < 0) continue;
    ++counts[static_cast<std::size_t>(b)];
    ++total;
  }
  h.fill(0.0);
  if (total == 0) return false;
  for (int b = 0; b < kBins; ++b)
    h[static_cast<std::size_t>(b)] = static_cast<double>(counts[static_cast<std::size_t>(b)]) / static_cast<double>(total);
  return true;
}

}  // namespace detail

inline DistanceHistogram histogram(const DistanceSamples& samples) {
  std::array<double, kBins> f{}, b{};
  DistanceHistogram h;
  h.empty_fwd = !detail::side_histogram(samples.d_fwd, f);
  h.empty_bwd = !detail::side_histogram(samples.d_bwd, b);
  for (std::size_t i = 0; i < h.bins.size(); ++i) h.bins[i] = 0.5 * (f[i] + b[i]);
  return h;
}

// ---------------------------------------------------------------------------
// logistic regression

struct TrainingConfig {
  double l2 = 1e-4;
  int max_iterations = 20000;
  double gradient_tolerance = 1e-6;
  double initial_step = 1.0;
};

struct TrainingMeta {
  std::size_t positives = 0;
  std::size_t negatives = 0;
  int iterations = 0;
  std::vector<double> loss_trace;
  double training_accuracy = 0.0;
  bool converged = false;
};

struct LogisticModel {
  Eigen::VectorXd weights = Eigen::VectorXd::Zero(kBins);
  double bias = 0.0;
  TrainingMeta meta;

  bool finite() const { return weights.allFinite() && std::isfinite(bias); }
};

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + exp(z)) without overflow
inline double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

/// Features stacked as columns of `x` (dimension x samples).
struct TrainingSet {
  Eigen::MatrixXd x;
  Eigen::VectorXd y;  // 1 same die, 0 different
};

inline TrainingSet make_training_set(const std::vector<DistanceHistogram>& features, const std::vector<bool>& same_die) {
  if (features.size() != same_die.size())
    throw Error(Errc::DimensionMismatch, std::to_string(features.size()) + " features but " +
                                             std::to_string(same_die.size()) + " labels");
  TrainingSet s;
  s.x.resize(kBins, static_cast<Eigen::Index>(features.size()));
  s.y.resize(static_cast<Eigen::Index>(features.size()));
  for (std::size_t i = 0; i < features.size(); ++i) {
    s.x.col(static_cast<Eigen::Index>(i)) = features[i].vector();
    s.y[static_cast<Eigen::Index>(i)] = same_die[i] ? 1.0 : 0.0;
  }
  return s;
}

/// Mean binary cross-entropy plus (l2/2)|w|^2; the bias is not penalized.
/// Writes the gradient (weights then bias) when `grad` is non-null.
inline double loss_and_gradient(const TrainingSet& s, const Eigen::VectorXd& w, double b, double l2,
                                Eigen::VectorXd* grad = nullptr) {
  const auto n = static_cast<double>(s.y.size());
  const Eigen::VectorXd z = (s.x.transpose() * w).array() + b;
  double loss = 0.0;
  Eigen::VectorXd residual(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    loss += softplus(z[i]) - s.y[i] * z[i];
    residual[i] = sigmoid(z[i]) - s.y[i];
  }
  loss = loss / n + 0.5 * l2 * w.squaredNorm();
  if (grad) {
    grad->resize(w.size() + 1);
    grad->head(w.size()) = s.x * residual / n + l2 * w;
    (*grad)[w.size()] = residual.sum() / n;
  }
  return loss;
}

inline double predict(const LogisticModel& model, const DistanceHistogram& h) {
  if (model.weights.size() != kBins)
    throw Error(Errc::DimensionMismatch, "model has " + std::to_string(model.weights.size()) + " weights, expected " +
                                             std::to_string(kBins));
  // large |w.h + b| saturates to exactly 0 or 1 in double; keep the interval open
  return std::clamp(sigmoid(model.weights.dot(h.vector()) + model.bias), std::numeric_limits<double>::min(),
                    std::nextafter(1.0, 0.0));
}

/// Full-batch gradient descent with Armijo backtracking, so every accepted
/// step lowers the loss. Deterministic: starts from zero parameters.
inline LogisticModel train_logistic(const std::vector<DistanceHistogram>& features, const std::vector<bool>& same_die,
                                    const TrainingConfig& config = {}) {
  const TrainingSet s = make_training_set(features, same_die);
  const auto positives = static_cast<std::size_t>(std::count(same_die.begin(), same_die.end(), true));
  if (positives == 0 || positives == same_die.size())
    throw Error(Errc::SingleClassTraining, "training needs at least one example of each class");
  if (!(config.l2 >= 0.0) || !(config.initial_step > 0.0) || config.max_iterations < 0)
    throw Error(Errc::InvalidArgument, "invalid training config");

  LogisticModel m;
  m.meta.positives = positives;
  m.meta.negatives = same_die.size() - positives;
  Eigen::VectorXd w = Eigen::VectorXd::Zero(kBins);
  double b = 0.0;
  Eigen::VectorXd g;
  double loss = loss_and_gradient(s, w, b, config.l2, &g);
  m.meta.loss_trace.push_back(loss);
  double step = config.initial_step;

  int it = 0;
  for (; it < config.max_iterations; ++it) {
    const double gnorm2 = g.squaredNorm();
    if (std::sqrt(gnorm2) < config.gradient_tolerance) {
      m.meta.converged = true;
      break;
    }
    bool accepted = false;
    for (int halvings = 0; halvings < 60; ++halvings) {
      const Eigen::VectorXd w_new = w - step * g.head(kBins);
      const double b_new = b - step * g[kBins];
      Eigen::VectorXd g_new;
      const double loss_new = loss_and_gradient(s, w_new, b_new, config.l2, &g_new);
      if (loss_new <= loss - 1e-4 * step * gnorm2 && loss_new < loss) {
        w = w_new;
        b = b_new;
        g = std::move(g_new);
        loss = loss_new;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      // no representable descent step left: at the optimum to machine precision
      m.meta.converged = true;
      break;
    }
    m.meta.loss_trace.push_back(loss);
    step *= 2.0;
  }
  m.meta.iterations = it;
  m.weights = w;
  m.bias = b;

  std::size_t correct = 0;
  for (std::size_t i = 0; i < features.size(); ++i) correct += (predict(m, features[i]) >= 0.5) == same_die[i];
  m.meta.training_accuracy = static_cast<double>(correct) / static_cast<double>(features.size());
  return m;
}

// ---------------------------------------------------------------------------
// model file

inline std::string format_double(double v) {
  char buf[40];
  const int n = std::snprintf(buf, sizeof buf, "%.17g", v);
  return std::string(buf, static_cast<std::size_t>(n));
}

inline double parse_double(std::string_view s, std::string_view what) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) throw Error(Errc::ParseError, "bad number for " + std::string(what) + ": '" + std::string(s) + "'");
  return v;
}

inline void write_model(std::ostream& os, const LogisticModel& m) {
  os << "diematch-logistic v1\n";
  os << "bias " << format_double(m.bias) << '\n';
  for (Eigen::Index i = 0; i < m.weights.size(); ++i) os << 'w' << i << ' ' << format_double(m.weights[i]) << '\n';
}

inline LogisticModel read_model(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "diematch-logistic v1")
    throw Error(Errc::ParseError, "model file must start with 'diematch-logistic v1'");
  LogisticModel m;
  std::vector<bool> seen(kBins, false);
  bool have_bias = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos) throw Error(Errc::ParseError, "malformed model line '" + line + "'");
    const std::string key = line.substr(0, sp);
    const std::string_view value = std::string_view(line).substr(sp + 1);
    if (key == "bias") {
      m.bias = parse_double(value, key);
      have_bias = true;
      continue;
    }
    int idx = -1;
    if (key.size() > 1 && key[0] == 'w') {
      const auto [p, ec] = std::from_chars(key.data() + 1, key.data() + key.size(), idx);
      if (ec != std::errc() || p != key.data() + key.size()) idx = -1;
    }
    if (idx < 0 || idx >= kBins) throw Error(Errc::ParseError, "unknown model key '" + key + "'");
    if (seen[static_cast<std::size_t>(idx)]) throw Error(Errc::ParseError, "duplicate weight " + key);
    seen[static_cast<std::size_t>(idx)] = true;
    m.weights[idx] = parse_double(value, key);
  }
  if (!have_bias || std::find(seen.begin(), seen.end(), false) != seen.end())
    throw Error(Errc::ParseError, "model file is missing the bias or a weight");
  if (!m.finite()) throw Error(Errc::NonFiniteValue, "model parameters must be finite");
  return m;
}

inline void save_model(const std::filesystem::path& path, const LogisticModel& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(Errc::IoError, "cannot write " + path.string());
  write_model(os, m);
  if (!os) throw Error(Errc::IoError, "write failed: " + path.string());
}

inline LogisticModel load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::IoError, "cannot open " + path.string());
  return read_model(is);
}

// ---------------------------------------------------------------------------
// pair scoring

struct PairScore {
  std::string id_a, id_b;  // id_a < id_b
  RigidTransform transform;  // maps scan a into the frame of scan b
  DistanceHistogram histogram;
  double probability = 0.0;
  double rmse = 0.0;
  std::vector<reg::StageTiming> timings;

  double seconds() const {
    double s = 0.0;
    for (const auto& t : timings) s += t.seconds;
    return s;
  }
};

/// Puts the ids in lexicographic order, inverting the transform on a swap.
inline void canonicalize(PairScore& s) {
  if (s.id_b < s.id_a) {
    std::swap(s.id_a, s.id_b);
    s.transform = geom::invert(s.transform);
  }
}

/// Scores an aligned pair of prepared scans: source grid of `src` against the
/// fine target grid of `dst`.
inline PairScore score_pair(const reg::PreparedScan& src, const reg::PreparedScan& dst,
                            const reg::RegistrationResult& registration, const LogisticModel& model) {
  reg::StageClock clock;
  PairScore s;
  s.id_a = src.id;
  s.id_b = dst.id;
  s.transform = registration.transform;
  s.rmse = registration.rmse;
  s.timings = registration.timings;
  DistanceSamples d;
  try {
    d = cloud_to_cloud(src.source_grid.points, *dst.target_index, registration.transform);
  } catch (const Error& e) {
    throw e.with_stage("c2c");
  }
  s.timings.push_back({"c2c", clock.lap()});
  s.histogram = histogram(d);
  s.probability = predict(model, s.histogram);
  s.timings.push_back({"classify", clock.lap()});
  canonicalize(s);
  return s;
}

/// Cloud-level variant: `source` is taken as the source grid and `target`
/// as the target grid, without further downsampling.
inline PairScore score_pair(const PointCloud& source, const PointCloud& target,
                            const reg::RegistrationResult& registration, const LogisticModel& model) {
  reg::PreparedScan a, b;
  a.id = source.id;
  a.source_grid = source;
  b.id = target.id;
  b.target_index.emplace(target.points);
  return score_pair(a, b, registration, model);
}

// ---------------------------------------------------------------------------
// scores CSV

struct ScoreRow {
  std::string id_a, id_b;
  double probability = 0.0;
  double rmse = 0.0;
  double seconds = 0.0;

  friend bool operator==(const ScoreRow&, const ScoreRow&) = default;
};

inline constexpr std::string_view kScoresHeader = "id_a,id_b,probability,rmse,seconds";

inline ScoreRow to_row(const PairScore& s) { return {s.id_a, s.id_b, s.probability, s.rmse, s.seconds()}; }

inline void write_scores_csv(std::ostream& os, const std::vector<ScoreRow>& rows) {
  os << kScoresHeader << '\n';
  for (const auto& r : rows)
    os << r.id_a << ',' << r.id_b << ',' << format_double(r.probability) << ',' << format_double(r.rmse) << ','
       << format_double(r.seconds) << '\n';
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::vector<ScoreRow> read_scores_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw Error(Errc::ParseError, "scores CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kScoresHeader) throw Error(Errc::ParseError, "scores CSV header must be '" + std::string(kScoresHeader) + "'");
  std::vector<ScoreRow> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 5) throw Error(Errc::ParseError, "scores CSV line " + std::to_string(lineno) + ": expected 5 fields");
    ScoreRow r{f[0], f[1], parse_double(f[2], "probability"), parse_double(f[3], "rmse"), parse_double(f[4], "seconds")};
    if (!(r.probability >= 0.0 && r.probability <= 1.0))
      throw Error(Errc::ParseError, "scores CSV line " + std::to_string(lineno) + ": probability outside [0,1]");
    rows.push_back(std::move(r));
  }
  return rows;
}

inline void save_scores_csv(const std::filesystem::path& path, const std::vector<ScoreRow>& rows) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(Errc::IoError, "cannot write " + path.string());
  write_scores_csv(os, rows);
}

inline std::vector<ScoreRow> load_scores_csv(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::IoError, "cannot open " + path.string());
  return read_scores_csv(is);
}

}  // namespace diematch::sim
