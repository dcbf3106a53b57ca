#pragma once

#include <chrono>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "diematch/features.hpp"
#include "diematch/robust.hpp"

namespace diematch::reg {

enum class Method { IcpRand, Fpfh, External };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::IcpRand: return "icp_rand";
    case Method::Fpfh: return "fpfh";
    case Method::External: return "external";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  if (s == "icp_rand") return Method::IcpRand;
  if (s == "fpfh") return Method::Fpfh;
  if (s == "external") return Method::External;
  throw Error(Errc::InvalidArgument, "unknown registration method '" + std::string(s) + "'");
}

inline RobustMethod parse_robust(std::string_view s) {
  if (s == "ransac") return RobustMethod::Ransac;
  if (s == "clique" || s == "teaser") return RobustMethod::Clique;
  throw Error(Errc::InvalidArgument, "unknown robust estimator '" + std::string(s) + "'");
}

class StageClock {
 public:
  StageClock() : start_(std::chrono::steady_clock::now()) {}

  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - start_).count();
    start_ = now;
    return s;
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

/// Everything a scan contributes to any pair it takes part in, computed once:
/// source grid (registration, c2c source role), finer target grid (c2c
/// target role) with their indices, and descriptors.
struct PreparedScan {
  std::string id;
  PointCloud source_grid;
  PointCloud target_grid;
  PointSet source_points;
  std::optional<SpatialIndex> source_index;
  std::optional<SpatialIndex> target_index;
  std::optional<DescriptorField> fpfh;
  std::optional<DescriptorField> external;
  std::optional<PointCloud> restart_grid;
  std::vector<StageTiming> timings;
};

struct PrepareOptions {
  bool fpfh = true;
  bool restart_grid = false;
  std::optional<std::filesystem::path> external_descriptors;
};

inline PreparedScan prepare_scan(const PointCloud& cloud, const RegistrationParams& params,
                                 const PrepareOptions& options = {}) {
  PreparedScan scan;
  scan.id = cloud.id;
  StageClock clock;
  try {
    scan.source_grid = geom::voxel_downsample(cloud, params.source_voxel);
    scan.target_grid = geom::voxel_downsample(cloud, params.target_voxel);
    if (options.restart_grid) scan.restart_grid = geom::voxel_downsample(cloud, params.restart_voxel);
  } catch (const Error& e) {
    throw e.with_stage("downsample");
  }
  scan.source_points = geom::make_point_set(scan.source_grid.points);
  scan.source_index.emplace(scan.source_points);
  scan.target_index.emplace(geom::make_point_set(scan.target_grid.points));
  scan.timings.push_back({"downsample", clock.lap()});

  if (options.fpfh) {
    try {
      scan.fpfh = compute_fpfh(scan.source_grid, params.feature_radius, &*scan.source_index);
    } catch (const Error& e) {
      throw e.with_stage("descriptors");
    }
    scan.timings.push_back({"descriptors", clock.lap()});
  }
  if (options.external_descriptors) {
    try {
      scan.external = load_external_descriptors(*options.external_descriptors, cloud);
    } catch (const Error& e) {
      throw e.with_stage("descriptors");
    }
    scan.timings.push_back({"descriptors", clock.lap()});
  }
  return scan;
}

namespace detail {

inline RegistrationResult feature_registration(const PreparedScan& src, const PreparedScan& dst,
                                               const DescriptorField& fa, const DescriptorField& fb,
                                               const RegistrationParams& params, StageClock& clock,
                                               std::vector<StageTiming>& timings) {
  CorrespondenceSet matches;
  try {
    matches = match_descriptors(fa, fb, params.n_descriptor_samples, params.seed);
  } catch (const Error& e) {
    throw e.with_stage("match");
  }
  timings.push_back({"match", clock.lap()});

  RegistrationResult coarse;
  try {
    coarse = robust_estimate(matches, params.robust, params);
  } catch (const Error& e) {
    throw e.with_stage("robust");
  }
  timings.push_back({"robust", clock.lap()});

  RegistrationResult refined;
  try {
    refined = refine_icp(src.source_points, dst.target_index->point_set(), coarse, params);
  } catch (const Error&) {
    // a coarse pose too poor to refine around; report it unconverged
    refined = coarse;
    refined.converged = false;
  }
  refined.consensus = coarse.consensus;
  timings.push_back({"refine", clock.lap()});
  return refined;
}

}  // namespace detail

/// Registers `src` onto `dst`. The returned transform maps `src` coordinates
/// into the `dst` frame.
inline RegistrationResult register_prepared(const PreparedScan& src, const PreparedScan& dst, Method method,
                                            const RegistrationParams& params) {
  StageClock clock;
  std::vector<StageTiming> timings;
  RegistrationResult result;
  switch (method) {
    case Method::Fpfh:
      if (!src.fpfh || !dst.fpfh) throw Error(Errc::InvalidArgument, "scans prepared without FPFH", "descriptors");
      result = detail::feature_registration(src, dst, *src.fpfh, *dst.fpfh, params, clock, timings);
      break;
    case Method::External:
      if (!src.external || !dst.external)
        throw Error(Errc::IoError, "external descriptors missing for " + (src.external ? dst.id : src.id), "descriptors");
      result = detail::feature_registration(src, dst, *src.external, *dst.external, params, clock, timings);
      break;
    case Method::IcpRand: {
      try {
        const PointCloud& coarse_src = src.restart_grid ? *src.restart_grid : src.source_grid;
        const PointCloud& coarse_dst = dst.restart_grid ? *dst.restart_grid : dst.source_grid;
        const RegistrationResult coarse = random_restart_icp(coarse_src, coarse_dst, params.n_restarts, params);
        timings.push_back({"restarts", clock.lap()});
        result = icp(src.source_points, *dst.target_index, coarse.transform, params);
        timings.push_back({"refine", clock.lap()});
      } catch (const Error& e) {
        throw e.with_stage("icp");
      }
      break;
    }
  }
  result.timings = std::move(timings);
  return result;
}

struct PairInputs {
  std::optional<std::filesystem::path> source_descriptors;
  std::optional<std::filesystem::path> target_descriptors;
};

/// Full pipeline for one pair: downsample, describe, match, robust
/// estimation, refinement. Per-stage seconds land in `timings`.
inline RegistrationResult register_pair(const PointCloud& source, const PointCloud& target, Method method,
                                        const RegistrationParams& params, const PairInputs& inputs = {}) {
  PrepareOptions src_opt, dst_opt;
  src_opt.fpfh = dst_opt.fpfh = method == Method::Fpfh;
  src_opt.restart_grid = dst_opt.restart_grid = method == Method::IcpRand;
  if (method == Method::External) {
    if (!inputs.source_descriptors || !inputs.target_descriptors)
      throw Error(Errc::IoError, "external method needs descriptor files for both scans", "descriptors");
    src_opt.external_descriptors = inputs.source_descriptors;
    dst_opt.external_descriptors = inputs.target_descriptors;
  }
  const PreparedScan src = prepare_scan(source, params, src_opt);
  const PreparedScan dst = prepare_scan(target, params, dst_opt);
  RegistrationResult result = register_prepared(src, dst, method, params);

  std::vector<StageTiming> timings;
  auto merge = [&timings](const std::vector<StageTiming>& ts) {
    for (const auto& t : ts) {
      auto it = std::find_if(timings.begin(), timings.end(), [&](const StageTiming& x) { return x.stage == t.stage; });
      if (it == timings.end()) timings.push_back(t);
      else it->seconds += t.seconds;
    }
  };
  merge(src.timings);
  merge(dst.timings);
  merge(result.timings);
  result.timings = std::move(timings);
  return result;
}

}  // namespace diematch::reg
