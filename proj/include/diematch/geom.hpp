#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "diematch/error.hpp"

namespace diematch::geom {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// One scanned coin face. Coordinates are millimeters. `normals` is either
/// empty or has one unit vector per point.
struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;
  std::string id;

  std::size_t size() const noexcept { return points.size(); }
  bool empty() const noexcept { return points.empty(); }
  bool has_normals() const noexcept { return !normals.empty() && normals.size() == points.size(); }
};

/// Checks the PointCloud invariants; throws InvalidArgument on violation.
inline void validate(const PointCloud& cloud) {
  if (!cloud.normals.empty() && cloud.normals.size() != cloud.points.size())
    throw Error(Errc::InvalidArgument, "points and normals differ in length");
  for (const auto& p : cloud.points)
    if (!p.allFinite()) throw Error(Errc::NonFiniteValue, "non-finite coordinate");
  for (const auto& n : cloud.normals)
    if (std::abs(n.norm() - 1.0) > 1e-6) throw Error(Errc::InvalidArgument, "normal is not unit length");
}

inline Vec3 centroid(const std::vector<Vec3>& points) {
  Vec3 sum = Vec3::Zero();
  for (const auto& p : points) sum += p;
  return points.empty() ? sum : Vec3(sum / static_cast<double>(points.size()));
}

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  Vec3 rotate(const Vec3& n) const { return rotation * n; }

  bool is_valid(double tol = 1e-9) const {
    const Mat3 gram = rotation.transpose() * rotation;
    return (gram - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(rotation.determinant() - 1.0) <= tol && translation.allFinite();
  }
};

/// Returns the transform equivalent to applying `first` and then `second`.
inline RigidTransform compose(const RigidTransform& second, const RigidTransform& first) {
  return {second.rotation * first.rotation, second.rotation * first.translation + second.translation};
}

inline RigidTransform invert(const RigidTransform& t) {
  const Mat3 rt = t.rotation.transpose();
  return {rt, -(rt * t.translation)};
}

/// Rotation by `rotation` about `center` instead of the origin.
inline RigidTransform rotation_about(const Mat3& rotation, const Vec3& center) {
  return {rotation, center - rotation * center};
}

inline PointCloud apply_transform(const PointCloud& cloud, const RigidTransform& t) {
  PointCloud out;
  out.id = cloud.id;
  out.points.reserve(cloud.points.size());
  for (const auto& p : cloud.points) out.points.push_back(t.apply(p));
  out.normals.reserve(cloud.normals.size());
  for (const auto& n : cloud.normals) out.normals.push_back(t.rotate(n));
  return out;
}

inline std::vector<Vec3> apply_transform(const std::vector<Vec3>& points, const RigidTransform& t) {
  std::vector<Vec3> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(t.apply(p));
  return out;
}

/// One point per occupied cubic voxel: member centroid and the renormalized
/// mean of member normals. Output follows first-occupancy order.
inline PointCloud voxel_downsample(const PointCloud& cloud, double voxel) {
  if (!(voxel > 0.0)) throw Error(Errc::NonPositiveVoxel, "voxel size must be positive");
  if (cloud.empty()) throw Error(Errc::EmptyCloud, "cannot downsample an empty cloud");

  struct Key {
    std::int64_t x, y, z;
    bool operator==(const Key&) const = default;
  };
  struct KeyHash {
    std::size_t operator()(const Key& k) const noexcept {
      std::uint64_t h = static_cast<std::uint64_t>(k.x) * 0x9E3779B97F4A7C15ULL;
      h ^= static_cast<std::uint64_t>(k.y) + 0x7F4A7C159E3779B9ULL + (h << 6) + (h >> 2);
      h ^= static_cast<std::uint64_t>(k.z) + 0x94D049BB133111EBULL + (h << 6) + (h >> 2);
      return static_cast<std::size_t>(h);
    }
  };
  struct Cell {
    Vec3 point_sum = Vec3::Zero();
    Vec3 normal_sum = Vec3::Zero();
    Vec3 first_normal = Vec3::Zero();
    std::size_t count = 0;
  };

  const bool normals = cloud.has_normals();
  std::unordered_map<Key, std::size_t, KeyHash> index;
  index.reserve(cloud.size());
  std::vector<Cell> cells;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.points[i];
    const Key key{static_cast<std::int64_t>(std::floor(p.x() / voxel)),
                  static_cast<std::int64_t>(std::floor(p.y() / voxel)),
                  static_cast<std::int64_t>(std::floor(p.z() / voxel))};
    auto [it, inserted] = index.try_emplace(key, cells.size());
    if (inserted) cells.emplace_back();
    Cell& cell = cells[it->second];
    cell.point_sum += p;
    if (normals) {
      if (cell.count == 0) cell.first_normal = cloud.normals[i];
      cell.normal_sum += cloud.normals[i];
    }
    ++cell.count;
  }

  PointCloud out;
  out.id = cloud.id;
  out.points.reserve(cells.size());
  if (normals) out.normals.reserve(cells.size());
  for (const Cell& cell : cells) {
    out.points.push_back(cell.point_sum / static_cast<double>(cell.count));
    if (normals) {
      const double len = cell.normal_sum.norm();
      // opposing normals cancel; fall back to the first member
      out.normals.push_back(len > 1e-12 ? Vec3(cell.normal_sum / len) : cell.first_normal);
    }
  }
  return out;
}

struct AngleRange {
  double lo_deg = 0.0;
  double hi_deg = 0.0;
};

/// Benchmark perturbation ranges: +/-25 degrees about x and y, full turn about z.
struct RotationRanges {
  AngleRange x{-25.0, 25.0};
  AngleRange y{-25.0, 25.0};
  AngleRange z{-180.0, 180.0};
};

inline double deg2rad(double deg) { return deg * std::numbers::pi / 180.0; }
inline double rad2deg(double rad) { return rad * 180.0 / std::numbers::pi; }

/// Intrinsic X->Y->Z Euler angles (radians): R = Rx(ax) * Ry(ay) * Rz(az).
inline Mat3 rotation_from_euler(double ax, double ay, double az) {
  return (Eigen::AngleAxisd(ax, Vec3::UnitX()) * Eigen::AngleAxisd(ay, Vec3::UnitY()) *
          Eigen::AngleAxisd(az, Vec3::UnitZ()))
      .toRotationMatrix();
}

/// Inverse of rotation_from_euler for |ay| < 90 degrees.
inline Vec3 euler_from_rotation(const Mat3& r) {
  const double ay = std::asin(std::clamp(r(0, 2), -1.0, 1.0));
  const double ax = std::atan2(-r(1, 2), r(2, 2));
  const double az = std::atan2(-r(0, 1), r(0, 0));
  return {ax, ay, az};
}

/// Draws per-axis angles uniformly in degrees; deterministic for a given generator state.
template <class Rng>
Vec3 draw_euler_degrees(const RotationRanges& ranges, Rng& rng) {
  auto draw = [&rng](const AngleRange& r) {
    if (r.lo_deg == r.hi_deg) return r.lo_deg;
    return std::uniform_real_distribution<double>(r.lo_deg, r.hi_deg)(rng);
  };
  const double x = draw(ranges.x);
  const double y = draw(ranges.y);
  const double z = draw(ranges.z);
  return {x, y, z};
}

inline void check_ranges(const RotationRanges& ranges) {
  for (const AngleRange* r : {&ranges.x, &ranges.y, &ranges.z})
    if (!(r->lo_deg <= r->hi_deg) || !std::isfinite(r->lo_deg) || !std::isfinite(r->hi_deg))
      throw Error(Errc::InvalidRange, "angle range must satisfy lo <= hi");
}

template <class Rng>
RigidTransform random_rotation(const RotationRanges& ranges, Rng& rng) {
  check_ranges(ranges);
  const Vec3 deg = draw_euler_degrees(ranges, rng);
  return {rotation_from_euler(deg2rad(deg.x()), deg2rad(deg.y()), deg2rad(deg.z())), Vec3::Zero()};
}

/// Pure rotation (zero translation) with uniformly drawn Euler angles.
inline RigidTransform random_rotation(const RotationRanges& ranges, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_rotation(ranges, rng);
}

/// Angle of the relative rotation between two rotation matrices, radians.
inline double rotation_angle_between(const Mat3& a, const Mat3& b) {
  const double c = ((a.transpose() * b).trace() - 1.0) * 0.5;
  return std::acos(std::clamp(c, -1.0, 1.0));
}

}  // namespace diematch::geom
