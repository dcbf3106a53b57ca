#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "diematch/registration.hpp"

namespace diematch::reg {

/// Per-point feature vectors. Column k of `descriptors` describes the parent
/// point `sample_indices[k]`; `positions`, when set, is the parent point set.
struct DescriptorField {
  Eigen::MatrixXd descriptors;  // dimension x count
  std::vector<std::uint32_t> sample_indices;
  std::vector<std::uint8_t> isolated;  // FPFH only: point had no usable neighbor
  PointSet positions;

  int dimension() const noexcept { return static_cast<int>(descriptors.rows()); }
  std::size_t size() const noexcept { return static_cast<std::size_t>(descriptors.cols()); }
  bool empty() const noexcept { return descriptors.cols() == 0; }
};

inline constexpr int kFpfhBins = 11;
inline constexpr int kFpfhDimension = 3 * kFpfhBins;

namespace detail {

struct PairFeatures {
  double theta = 0.0;  // in [-pi, pi]
  double alpha = 0.0;  // in [-1, 1]
  double phi = 0.0;    // in [-1, 1]
};

// Darboux-frame angular features of two oriented points. The source of the
// frame is the point whose normal is closer to the connecting line, which
// makes the result independent of argument order.
inline bool pair_features(const Vec3& p1, const Vec3& n1, const Vec3& p2, const Vec3& n2, PairFeatures& out) {
  Vec3 dp = p2 - p1;
  const double dist = dp.norm();
  if (dist == 0.0) return false;
  dp /= dist;
  const double a1 = n1.dot(dp);
  const double a2 = n2.dot(dp);
  Vec3 u = n1, other = n2;
  double phi = a1;
  if (std::abs(a1) < std::abs(a2)) {
    u = n2;
    other = n1;
    dp = -dp;
    phi = -a2;
  }
  Vec3 v = dp.cross(u);
  const double vn = v.norm();
  if (vn == 0.0) return false;
  v /= vn;
  const Vec3 w = u.cross(v);
  out.alpha = v.dot(other);
  out.phi = phi;
  out.theta = std::atan2(w.dot(other), u.dot(other));
  return true;
}

inline int bin_of(double value, double lo, double hi) {
  const int b = static_cast<int>(std::floor(kFpfhBins * (value - lo) / (hi - lo)));
  return std::clamp(b, 0, kFpfhBins - 1);
}

}  // namespace detail

/// Fast point feature histograms: 33 values per point (theta, alpha, phi,
/// 11 bins each). Each point's own simplified histogram is added to the
/// 1/distance-weighted mean of its neighbors' histograms, every sub-histogram
/// normalized to 100. Points without neighbors get a zero vector and are
/// flagged in `isolated`.
inline DescriptorField compute_fpfh(const PointCloud& cloud, double feature_radius, const SpatialIndex* index = nullptr) {
  if (!(feature_radius > 0.0)) throw Error(Errc::InvalidArgument, "feature radius must be positive");
  if (!cloud.has_normals()) throw Error(Errc::MissingNormals, "FPFH needs normals");
  const std::size_t n = cloud.size();

  std::optional<SpatialIndex> own;
  if (index == nullptr) {
    own.emplace(cloud.points);
    index = &*own;
  }

  using Hist = Eigen::Matrix<double, kFpfhDimension, 1>;
  std::vector<Hist> spfh(n, Hist::Zero());
  std::vector<std::vector<geom::Neighbor>> neighborhoods(n);
  std::vector<geom::Neighbor> found;
  for (std::size_t i = 0; i < n; ++i) {
    index->radius_search(cloud.points[i], feature_radius, found);
    auto& hood = neighborhoods[i];
    hood.clear();
    for (const auto& nb : found)
      if (nb.index != i && nb.sq_distance > 0.0) hood.push_back(nb);

    Hist& h = spfh[i];
    int valid = 0;
    detail::PairFeatures f;
    for (const auto& nb : hood) {
      if (!detail::pair_features(cloud.points[i], cloud.normals[i], cloud.points[nb.index], cloud.normals[nb.index], f))
        continue;
      h[detail::bin_of(f.theta, -std::numbers::pi, std::numbers::pi)] += 1.0;
      h[kFpfhBins + detail::bin_of(f.alpha, -1.0, 1.0)] += 1.0;
      h[2 * kFpfhBins + detail::bin_of(f.phi, -1.0, 1.0)] += 1.0;
      ++valid;
    }
    if (valid > 0) h *= 100.0 / valid;
  }

  DescriptorField field;
  field.descriptors.setZero(kFpfhDimension, static_cast<Eigen::Index>(n));
  field.sample_indices.resize(n);
  std::iota(field.sample_indices.begin(), field.sample_indices.end(), 0u);
  field.isolated.assign(n, 0);
  field.positions = index->point_set();

  for (std::size_t i = 0; i < n; ++i) {
    if (spfh[i].isZero()) {
      field.isolated[i] = 1;
      continue;
    }
    Hist weighted = Hist::Zero();
    for (const auto& nb : neighborhoods[i]) weighted += spfh[nb.index] / std::sqrt(nb.sq_distance);
    for (int s = 0; s < 3; ++s) {
      auto seg = weighted.segment<kFpfhBins>(s * kFpfhBins);
      const double sum = seg.sum();
      if (sum > 0.0) seg *= 100.0 / sum;
    }
    field.descriptors.col(static_cast<Eigen::Index>(i)) = spfh[i] + weighted;
  }
  return field;
}

/// Reads externally computed descriptors: a `dim=<d> count=<k>` header, then
/// k rows of `<point_index> <d values>`.
inline DescriptorField load_external_descriptors(const std::filesystem::path& path, const PointCloud& cloud,
                                                 int expected_dimension = 0) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoError, "cannot open descriptor file " + path.string());
  std::string line;
  int dim = -1;
  long long count = -1;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream hs(line);
    std::string tok;
    while (hs >> tok) {
      if (tok.rfind("dim=", 0) == 0) dim = std::atoi(tok.c_str() + 4);
      else if (tok.rfind("count=", 0) == 0) count = std::atoll(tok.c_str() + 6);
    }
    break;
  }
  if (dim <= 0 || count < 0) throw Error(Errc::ParseError, "descriptor header must read 'dim=<d> count=<k>'");
  if (expected_dimension > 0 && dim != expected_dimension)
    throw Error(Errc::DimensionMismatch,
                "expected dimension " + std::to_string(expected_dimension) + ", file declares " + std::to_string(dim));

  DescriptorField field;
  field.descriptors.resize(dim, static_cast<Eigen::Index>(count));
  field.sample_indices.reserve(static_cast<std::size_t>(count));
  field.positions = geom::make_point_set(cloud.points);
  std::vector<std::uint8_t> seen(cloud.size(), 0);

  long long row = 0;
  std::vector<double> values;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (row >= count) throw Error(Errc::DimensionMismatch, "more rows than declared count " + std::to_string(count));
    std::istringstream rs(line);
    std::string tok;
    if (!(rs >> tok)) continue;
    long long idx = -1;
    try {
      idx = std::stoll(tok);
    } catch (const std::exception&) {
      throw Error(Errc::ParseError, "bad point index '" + tok + "' on row " + std::to_string(row));
    }
    if (idx < 0 || static_cast<std::size_t>(idx) >= cloud.size())
      throw Error(Errc::IndexOutOfRange, "point index " + std::to_string(idx) + " outside cloud of " +
                                             std::to_string(cloud.size()));
    if (seen[static_cast<std::size_t>(idx)]) throw Error(Errc::InvalidArgument, "duplicate point index " + std::to_string(idx));
    seen[static_cast<std::size_t>(idx)] = 1;
    values.clear();
    while (rs >> tok) {
      char* end = nullptr;
      const double v = std::strtod(tok.c_str(), &end);
      if (end == tok.c_str()) throw Error(Errc::ParseError, "bad value '" + tok + "' on row " + std::to_string(row));
      values.push_back(v);
    }
    if (static_cast<int>(values.size()) != dim)
      throw Error(Errc::DimensionMismatch, "row " + std::to_string(row) + " has " + std::to_string(values.size()) +
                                               " values, expected " + std::to_string(dim));
    for (int k = 0; k < dim; ++k) {
      if (!std::isfinite(values[static_cast<std::size_t>(k)]))
        throw Error(Errc::NonFiniteValue, "non-finite value on row " + std::to_string(row));
      field.descriptors(k, row) = values[static_cast<std::size_t>(k)];
    }
    field.sample_indices.push_back(static_cast<std::uint32_t>(idx));
    ++row;
  }
  if (row != count)
    throw Error(Errc::DimensionMismatch, "declared " + std::to_string(count) + " rows, found " + std::to_string(row));
  field.isolated.assign(static_cast<std::size_t>(count), 0);
  return field;
}

inline void save_external_descriptors(const std::filesystem::path& path, const DescriptorField& field) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
  out << "dim=" << field.dimension() << " count=" << field.size() << "\n";
  out.precision(17);
  for (std::size_t k = 0; k < field.size(); ++k) {
    out << field.sample_indices[k];
    for (int d = 0; d < field.dimension(); ++d) out << ' ' << field.descriptors(d, static_cast<Eigen::Index>(k));
    out << '\n';
  }
}

/// Uniform sample of min(n, size) column positions without replacement,
/// sorted ascending. Depends only on (size, n, seed).
inline std::vector<std::uint32_t> sample_positions(std::size_t size, std::size_t n, std::uint64_t seed) {
  std::vector<std::uint32_t> all(size);
  std::iota(all.begin(), all.end(), 0u);
  if (n >= size) return all;
  std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * (size + 1)));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + std::uniform_int_distribution<std::size_t>(0, size - 1 - i)(rng);
    std::swap(all[i], all[j]);
  }
  all.resize(n);
  std::sort(all.begin(), all.end());
  return all;
}

namespace detail {

// Total order on fields, so distance products are always evaluated with the
// same operand orientation regardless of argument order.
inline bool field_precedes(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.cols() != b.cols()) return a.cols() < b.cols();
  return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
}

// Row-wise and column-wise nearest neighbors under squared Euclidean distance,
// ties to the lowest index.
inline void nearest_both_ways(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, std::vector<Eigen::Index>& nn_of_a,
                              std::vector<Eigen::Index>& nn_of_b) {
  const Eigen::Index na = a.cols(), nb = b.cols();
  const Eigen::VectorXd a2 = a.colwise().squaredNorm().transpose();
  const Eigen::RowVectorXd b2 = b.colwise().squaredNorm();
  nn_of_a.assign(static_cast<std::size_t>(na), -1);
  nn_of_b.assign(static_cast<std::size_t>(nb), -1);
  std::vector<double> best_a(static_cast<std::size_t>(na), std::numeric_limits<double>::infinity());
  std::vector<double> best_b(static_cast<std::size_t>(nb), std::numeric_limits<double>::infinity());

  constexpr Eigen::Index kBlock = 256;
  Eigen::MatrixXd dist;
  for (Eigen::Index r0 = 0; r0 < na; r0 += kBlock) {
    const Eigen::Index rows = std::min(kBlock, na - r0);
    dist.noalias() = -2.0 * a.middleCols(r0, rows).transpose() * b;
    dist.colwise() += a2.segment(r0, rows);
    dist.rowwise() += b2;
    for (Eigen::Index j = 0; j < nb; ++j) {
      for (Eigen::Index r = 0; r < rows; ++r) {
        const double d = dist(r, j);
        const auto i = static_cast<std::size_t>(r0 + r);
        if (d < best_a[i]) {
          best_a[i] = d;
          nn_of_a[i] = j;
        }
        if (d < best_b[static_cast<std::size_t>(j)]) {
          best_b[static_cast<std::size_t>(j)] = d;
          nn_of_b[static_cast<std::size_t>(j)] = r0 + r;
        }
      }
    }
  }
}

}  // namespace detail

/// Mutual nearest-neighbor matching on random descriptor subsets. Returned
/// pairs address the parent points (`sample_indices`) of each field.
inline CorrespondenceSet match_descriptors(const DescriptorField& fa, const DescriptorField& fb, int n,
                                           std::uint64_t seed) {
  if (fa.empty() || fb.empty()) throw Error(Errc::InvalidArgument, "match_descriptors: empty descriptor field");
  if (n < 1) throw Error(Errc::InvalidArgument, "match_descriptors: n must be >= 1");
  if (fa.dimension() != fb.dimension())
    throw Error(Errc::DimensionMismatch, "descriptor dimensions differ: " + std::to_string(fa.dimension()) + " vs " +
                                             std::to_string(fb.dimension()));

  const auto pick = [&](const DescriptorField& f, std::vector<std::uint32_t>& cols) {
    cols = sample_positions(f.size(), static_cast<std::size_t>(n), seed);
    Eigen::MatrixXd m(f.dimension(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) m.col(static_cast<Eigen::Index>(k)) = f.descriptors.col(cols[k]);
    return m;
  };
  std::vector<std::uint32_t> cols_a, cols_b;
  const Eigen::MatrixXd a = pick(fa, cols_a);
  const Eigen::MatrixXd b = pick(fb, cols_b);

  std::vector<Eigen::Index> nn_a, nn_b;
  if (detail::field_precedes(b, a)) detail::nearest_both_ways(b, a, nn_b, nn_a);
  else detail::nearest_both_ways(a, b, nn_a, nn_b);

  CorrespondenceSet out;
  out.source = fa.positions;
  out.target = fb.positions;
  for (std::size_t i = 0; i < nn_a.size(); ++i) {
    const Eigen::Index j = nn_a[i];
    if (j >= 0 && nn_b[static_cast<std::size_t>(j)] == static_cast<Eigen::Index>(i))
      out.pairs.push_back({fa.sample_indices[cols_a[i]], fb.sample_indices[cols_b[static_cast<std::size_t>(j)]]});
  }
  if (out.pairs.empty()) throw Error(Errc::NoMutualMatches, "no mutual nearest descriptors");
  return out;
}

}  // namespace diematch::reg
