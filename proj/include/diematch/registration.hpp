#pragma once

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "diematch/geom.hpp"
#include "diematch/spatial_index.hpp"

namespace diematch::reg {

using geom::Mat3;
using geom::PointCloud;
using geom::PointSet;
using geom::RigidTransform;
using geom::SpatialIndex;
using geom::Vec3;

struct Correspondence {
  std::uint32_t source = 0;
  std::uint32_t target = 0;

  auto operator<=>(const Correspondence&) const = default;
};

/// Index pairs into two point sets. The point sets are shared, not copied.
struct CorrespondenceSet {
  std::vector<Correspondence> pairs;
  PointSet source;
  PointSet target;

  std::size_t size() const noexcept { return pairs.size(); }
  bool empty() const noexcept { return pairs.empty(); }
  const Vec3& source_point(const Correspondence& c) const { return (*source)[c.source]; }
  const Vec3& target_point(const Correspondence& c) const { return (*target)[c.target]; }
};

enum class RobustMethod { Ransac, Clique };

struct RegistrationParams {
  int max_iterations = 100;
  double convergence_eps = 1e-4;     // mm
  double match_max_distance = 1.0;   // mm, ICP closest-point gate
  int n_descriptor_samples = 5000;
  int ransac_iterations = 10000;
  double inlier_threshold = 0.15;    // mm
  double refinement_radius = 1.0;    // mm around inlier match midpoints
  double refine_max_distance = 0.1;  // mm, ICP gate inside the refinement region
  int refine_max_iterations = 30;
  double feature_radius = 1.0;       // mm, FPFH neighborhood
  double source_voxel = 0.1;         // mm
  double target_voxel = 0.05;        // mm
  double restart_voxel = 0.25;       // mm, coarse grid for random-restart ICP
  int n_restarts = 32;
  double min_inlier_fraction = 0.1;  // random-restart acceptance, fraction of source points
  RobustMethod robust = RobustMethod::Clique;
  std::uint64_t seed = 0;
};

struct StageTiming {
  std::string stage;
  double seconds = 0.0;
};

struct RegistrationResult {
  RigidTransform transform;
  CorrespondenceSet inliers;
  double rmse = 0.0;  // mm over inlier matches
  bool converged = false;
  int iterations = 0;
  std::vector<double> rmse_trace;  // accepted ICP iterations
  std::size_t consensus = 0;       // robust estimators: best hypothesis support before refit
  std::vector<StageTiming> timings;
};

/// Least-squares rigid alignment of corresponding points (SVD with
/// reflection correction).
inline RigidTransform kabsch(const std::vector<Vec3>& src, const std::vector<Vec3>& dst) {
  if (src.size() != dst.size()) throw Error(Errc::InvalidArgument, "kabsch: point lists differ in length");
  if (src.size() < 3) throw Error(Errc::TooFewMatches, "kabsch needs at least 3 correspondences");
  const Vec3 cs = geom::centroid(src);
  const Vec3 cd = geom::centroid(dst);
  Mat3 cov = Mat3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) cov += (src[i] - cs) * (dst[i] - cd).transpose();

  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  if (!(sv(0) > 0.0) || sv(1) <= 1e-10 * sv(0))
    throw Error(Errc::DegenerateConfiguration, "correspondences are collinear or coincident");
  const Mat3& u = svd.matrixU();
  const Mat3& v = svd.matrixV();
  Mat3 d = Mat3::Identity();
  d(2, 2) = (v * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  RigidTransform t;
  t.rotation = v * d * u.transpose();
  t.translation = cd - t.rotation * cs;
  return t;
}

inline RigidTransform kabsch(const CorrespondenceSet& corr) {
  std::vector<Vec3> src, dst;
  src.reserve(corr.size());
  dst.reserve(corr.size());
  for (const auto& c : corr.pairs) {
    src.push_back(corr.source_point(c));
    dst.push_back(corr.target_point(c));
  }
  return kabsch(src, dst);
}

/// Sum of squared residuals of `t` over the correspondences.
inline double alignment_cost(const CorrespondenceSet& corr, const RigidTransform& t) {
  double sum = 0.0;
  for (const auto& c : corr.pairs) sum += (t.apply(corr.source_point(c)) - corr.target_point(c)).squaredNorm();
  return sum;
}

namespace detail {

// Largest displacement of the source bounding-box corners between two poses.
inline double pose_change(const Vec3& lo, const Vec3& hi, const RigidTransform& a, const RigidTransform& b) {
  double worst = 0.0;
  for (int k = 0; k < 8; ++k) {
    const Vec3 corner((k & 1) ? hi.x() : lo.x(), (k & 2) ? hi.y() : lo.y(), (k & 4) ? hi.z() : lo.z());
    worst = std::max(worst, (a.apply(corner) - b.apply(corner)).norm());
  }
  return worst;
}

struct MatchPass {
  std::vector<Correspondence> pairs;
  double rmse = 0.0;            // over gated matches
  double truncated_rmse = 0.0;  // every source point, distances capped at the gate
};

inline MatchPass closest_points(const std::vector<Vec3>& source, const SpatialIndex& target, const RigidTransform& t,
                                double gate) {
  MatchPass pass;
  pass.pairs.reserve(source.size());
  const double gate2 = gate * gate;
  double sum = 0.0;
  for (std::size_t i = 0; i < source.size(); ++i) {
    const auto nn = target.nearest(t.apply(source[i]));
    if (nn.sq_distance <= gate2) {
      pass.pairs.push_back({static_cast<std::uint32_t>(i), nn.index});
      sum += nn.sq_distance;
    }
  }
  pass.rmse = pass.pairs.empty() ? 0.0 : std::sqrt(sum / static_cast<double>(pass.pairs.size()));
  const double outside = static_cast<double>(source.size() - pass.pairs.size()) * gate2;
  pass.truncated_rmse = std::sqrt((sum + outside) / static_cast<double>(source.size()));
  return pass;
}

}  // namespace detail

/// Point-to-point ICP against a prebuilt target index. Matches farther than
/// `match_max_distance` are rejected. Iterations are accepted while the
/// gate-truncated RMSE (capped distances over all source points) does not
/// increase; `rmse_trace` records it and is non-increasing. `rmse` is the
/// RMSE over the gated matches of the returned pose.
inline RegistrationResult icp(const PointSet& source, const SpatialIndex& target, const RigidTransform& init,
                              const RegistrationParams& params) {
  if (!source || source->empty() || target.empty()) throw Error(Errc::EmptyCloud, "icp: empty input");
  const std::vector<Vec3>& src = *source;
  Vec3 lo = src.front(), hi = src.front();
  for (const auto& p : src) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }

  RegistrationResult result;
  result.inliers.source = source;
  result.inliers.target = target.point_set();

  RigidTransform current = init;
  detail::MatchPass accepted;
  RigidTransform accepted_pose = init;
  bool have_accepted = false;

  std::vector<Vec3> a, b;
  for (int it = 1; it <= params.max_iterations; ++it) {
    detail::MatchPass pass = detail::closest_points(src, target, current, params.match_max_distance);
    if (pass.pairs.size() < 3)
      throw Error(Errc::NoMatchesInRange,
                  std::to_string(pass.pairs.size()) + " matches within " + std::to_string(params.match_max_distance) +
                      " mm at iteration " + std::to_string(it));
    if (have_accepted && pass.truncated_rmse > accepted.truncated_rmse) {
      result.converged = true;  // no further improvement possible from here
      break;
    }
    accepted = std::move(pass);
    accepted_pose = current;
    have_accepted = true;
    result.rmse_trace.push_back(accepted.truncated_rmse);
    result.iterations = it;

    a.clear();
    b.clear();
    for (const auto& c : accepted.pairs) {
      a.push_back(src[c.source]);
      b.push_back(target.point(c.target));
    }
    const RigidTransform next = kabsch(a, b);
    const double change = detail::pose_change(lo, hi, current, next);
    current = next;
    if (change < params.convergence_eps) {
      detail::MatchPass last = detail::closest_points(src, target, current, params.match_max_distance);
      if (last.pairs.size() >= 3 && last.truncated_rmse <= accepted.truncated_rmse) {
        accepted = std::move(last);
        accepted_pose = current;
        result.rmse_trace.back() = accepted.truncated_rmse;
      }
      result.converged = true;
      break;
    }
  }

  result.transform = accepted_pose;
  result.rmse = accepted.rmse;
  result.inliers.pairs = std::move(accepted.pairs);
  return result;
}

inline RegistrationResult icp(const PointCloud& source, const PointCloud& target, const RigidTransform& init,
                              const RegistrationParams& params) {
  if (source.empty() || target.empty()) throw Error(Errc::EmptyCloud, "icp: empty input");
  const SpatialIndex index(target.points);
  return icp(geom::make_point_set(source.points), index, init, params);
}

/// Initial poses for random-restart ICP: identity first, then rotations drawn
/// from the benchmark ranges about the source centroid, moved onto the target
/// centroid.
inline std::vector<RigidTransform> restart_poses(const std::vector<Vec3>& source, const std::vector<Vec3>& target,
                                                 int n_restarts, std::uint64_t seed) {
  std::vector<RigidTransform> poses{RigidTransform::identity()};
  const Vec3 cs = geom::centroid(source);
  const Vec3 ct = geom::centroid(target);
  std::mt19937_64 rng(seed);
  for (int k = 0; k < n_restarts; ++k) {
    const Mat3 r = geom::random_rotation(geom::RotationRanges{}, rng).rotation;
    poses.push_back({r, ct - r * cs});
  }
  return poses;
}

/// ICP from the identity plus `n_restarts` random initial poses; keeps the
/// run with the lowest RMSE among runs with enough inliers.
inline RegistrationResult random_restart_icp(const PointSet& source, const SpatialIndex& target, int n_restarts,
                                             const RegistrationParams& params) {
  if (n_restarts < 1) throw Error(Errc::InvalidArgument, "random_restart_icp needs n_restarts >= 1");
  if (!source || source->empty() || target.empty()) throw Error(Errc::EmptyCloud, "random_restart_icp: empty input");
  const auto min_inliers = std::max<std::size_t>(
      3, static_cast<std::size_t>(std::ceil(params.min_inlier_fraction * static_cast<double>(source->size()))));

  std::optional<RegistrationResult> best;
  for (const RigidTransform& init : restart_poses(*source, target.points(), n_restarts, params.seed)) {
    try {
      RegistrationResult r = icp(source, target, init, params);
      if (r.inliers.size() < min_inliers) continue;
      if (!best || r.rmse < best->rmse) best = std::move(r);
    } catch (const Error&) {
      // a diverged start; others may still succeed
    }
  }
  if (!best) throw Error(Errc::AllRestartsFailed, "no restart reached the minimum inlier count");
  return std::move(*best);
}

inline RegistrationResult random_restart_icp(const PointCloud& source, const PointCloud& target, int n_restarts,
                                             const RegistrationParams& params) {
  if (source.empty() || target.empty()) throw Error(Errc::EmptyCloud, "random_restart_icp: empty input");
  const SpatialIndex index(target.points);
  return random_restart_icp(geom::make_point_set(source.points), index, n_restarts, params);
}

/// ICP restricted to the neighborhood of the coarse inlier matches. The
/// region is every point within `refinement_radius` of a match midpoint
/// (target frame); the closest-point gate tightens to `refine_max_distance`
/// so that the non-overlapping rims of two partial faces do not drag the
/// pose. Never returns a worse closest-point RMSE than the coarse pose
/// achieves on the same region.
inline RegistrationResult refine_icp(const PointSet& source, const PointSet& target, const RegistrationResult& coarse,
                                     const RegistrationParams& params) {
  if (coarse.inliers.size() < 3) throw Error(Errc::TooFewMatches, "refine_icp needs a coarse result with >= 3 inliers");
  if (!source || !target || source->empty() || target->empty()) throw Error(Errc::EmptyCloud, "refine_icp: empty input");
  const RigidTransform& pose = coarse.transform;

  std::vector<Vec3> midpoints;
  midpoints.reserve(coarse.inliers.size());
  for (const auto& c : coarse.inliers.pairs)
    midpoints.push_back(0.5 * (pose.apply(coarse.inliers.source_point(c)) + coarse.inliers.target_point(c)));
  const SpatialIndex mids(std::move(midpoints));
  const double r2 = params.refinement_radius * params.refinement_radius;

  std::vector<Vec3> src_region, dst_region;
  for (const auto& p : *source)
    if (mids.nearest(pose.apply(p)).sq_distance <= r2) src_region.push_back(p);
  for (const auto& p : *target)
    if (mids.nearest(p).sq_distance <= r2) dst_region.push_back(p);
  if (src_region.size() < 3 || dst_region.size() < 3)
    throw Error(Errc::NoMatchesInRange, "refinement region holds fewer than 3 points");

  const PointSet src_set = geom::make_point_set(std::move(src_region));
  const SpatialIndex dst_index(geom::make_point_set(std::move(dst_region)));
  RegistrationParams local = params;
  local.match_max_distance = std::min(params.match_max_distance, params.refine_max_distance);
  local.max_iterations = params.refine_max_iterations;
  RegistrationResult refined = icp(src_set, dst_index, pose, local);

  const detail::MatchPass at_coarse = detail::closest_points(*src_set, dst_index, pose, local.match_max_distance);
  if (refined.rmse > at_coarse.rmse && at_coarse.pairs.size() >= 3) {
    refined.transform = pose;
    refined.rmse = at_coarse.rmse;
    refined.inliers.pairs = at_coarse.pairs;
  }
  return refined;
}

}  // namespace diematch::reg
