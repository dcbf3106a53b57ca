#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "diematch/registration.hpp"

namespace diematch::reg {

namespace detail {

inline std::vector<Correspondence> inliers_under(const CorrespondenceSet& corr, const RigidTransform& t, double thr) {
  const double thr2 = thr * thr;
  std::vector<Correspondence> in;
  for (const auto& c : corr.pairs)
    if ((t.apply(corr.source_point(c)) - corr.target_point(c)).squaredNorm() <= thr2) in.push_back(c);
  return in;
}

inline std::size_t count_inliers(const CorrespondenceSet& corr, const RigidTransform& t, double thr) {
  const double thr2 = thr * thr;
  std::size_t n = 0;
  for (const auto& c : corr.pairs)
    n += (t.apply(corr.source_point(c)) - corr.target_point(c)).squaredNorm() <= thr2;
  return n;
}

inline double inlier_rmse(const CorrespondenceSet& corr, const std::vector<Correspondence>& in, const RigidTransform& t) {
  if (in.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& c : in) sum += (t.apply(corr.source_point(c)) - corr.target_point(c)).squaredNorm();
  return std::sqrt(sum / static_cast<double>(in.size()));
}

inline RigidTransform kabsch_subset(const CorrespondenceSet& corr, const std::vector<Correspondence>& subset) {
  CorrespondenceSet s{subset, corr.source, corr.target};
  return kabsch(s);
}

// Refit on the inliers of `pose` and keep the refit only if it does not lose support.
inline RegistrationResult finish(const CorrespondenceSet& corr, RigidTransform pose, std::size_t consensus,
                                 const RegistrationParams& params) {
  std::vector<Correspondence> in = inliers_under(corr, pose, params.inlier_threshold);
  if (in.size() < 3) throw Error(Errc::NoConsensus, "best consensus has " + std::to_string(in.size()) + " inliers");
  try {
    const RigidTransform refit = kabsch_subset(corr, in);
    std::vector<Correspondence> refit_in = inliers_under(corr, refit, params.inlier_threshold);
    if (refit_in.size() >= in.size()) {
      pose = refit;
      in = std::move(refit_in);
    }
  } catch (const Error&) {
    // degenerate inlier set; keep the hypothesis pose
  }
  RegistrationResult r;
  r.transform = pose;
  r.rmse = inlier_rmse(corr, in, pose);
  r.inliers = {std::move(in), corr.source, corr.target};
  r.converged = true;
  r.consensus = consensus;
  return r;
}

}  // namespace detail

/// RANSAC over 3-correspondence hypotheses. When every triple fits in the
/// iteration budget they are enumerated in lexicographic order instead of
/// sampled. `consensus` in the result is the best hypothesis support before
/// the final refit.
inline RegistrationResult ransac(const CorrespondenceSet& corr, const RegistrationParams& params) {
  const std::size_t n = corr.size();
  if (n < 3) throw Error(Errc::TooFewMatches, "robust estimation needs >= 3 correspondences");

  std::size_t best = 0;
  RigidTransform best_pose;
  std::vector<Vec3> a(3), b(3);
  auto consider = [&](std::size_t i, std::size_t j, std::size_t k) {
    const std::array<std::size_t, 3> idx{i, j, k};
    for (std::size_t s = 0; s < 3; ++s) {
      a[s] = corr.source_point(corr.pairs[idx[s]]);
      b[s] = corr.target_point(corr.pairs[idx[s]]);
    }
    RigidTransform pose;
    try {
      pose = kabsch(a, b);
    } catch (const Error&) {
      return;
    }
    const std::size_t support = detail::count_inliers(corr, pose, params.inlier_threshold);
    if (support > best) {
      best = support;
      best_pose = pose;
    }
  };

  const auto budget = static_cast<std::size_t>(std::max(params.ransac_iterations, 0));
  if (n < 4096 && n * (n - 1) * (n - 2) / 6 <= budget) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        for (std::size_t k = j + 1; k < n; ++k) consider(i, j, k);
  } else {
    std::mt19937_64 rng(params.seed);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (int it = 0; it < params.ransac_iterations; ++it) {
      const std::size_t i = pick(rng), j = pick(rng), k = pick(rng);
      if (i != j && j != k && i != k) consider(i, j, k);
    }
  }
  if (best < 3) throw Error(Errc::NoConsensus, "best hypothesis has " + std::to_string(best) + " inliers");
  return detail::finish(corr, best_pose, best, params);
}

/// Consistency-graph maximum-clique estimator. Two correspondences are
/// compatible when they preserve the source distance in the target within
/// 2 * inlier_threshold. A large clique is grown greedily from several
/// high-degree seeds and aligned with Kabsch.
inline RegistrationResult clique_estimate(const CorrespondenceSet& corr, const RegistrationParams& params) {
  const std::size_t n = corr.size();
  if (n < 3) throw Error(Errc::TooFewMatches, "robust estimation needs >= 3 correspondences");
  const std::size_t words = (n + 63) / 64;
  std::vector<std::uint64_t> adj(n * words, 0);
  auto row = [&](std::size_t i) { return adj.data() + i * words; };
  const double tol = 2.0 * params.inlier_threshold;

  std::vector<std::size_t> degree(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3& xi = corr.source_point(corr.pairs[i]);
    const Vec3& yi = corr.target_point(corr.pairs[i]);
    for (std::size_t k = i + 1; k < n; ++k) {
      const double ds = (xi - corr.source_point(corr.pairs[k])).norm();
      const double dt = (yi - corr.target_point(corr.pairs[k])).norm();
      if (std::abs(ds - dt) <= tol) {
        row(i)[k / 64] |= 1ULL << (k % 64);
        row(k)[i / 64] |= 1ULL << (i % 64);
        ++degree[i];
        ++degree[k];
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return degree[x] > degree[y]; });

  constexpr std::size_t kSeeds = 16;
  std::vector<std::size_t> best_clique;
  std::vector<std::uint64_t> candidates(words);
  for (std::size_t s = 0; s < std::min(kSeeds, n); ++s) {
    const std::size_t seed = order[s];
    if (degree[seed] + 1 <= best_clique.size()) break;  // cannot beat the current best
    std::vector<std::size_t> clique{seed};
    std::copy(row(seed), row(seed) + words, candidates.begin());
    for (std::size_t v : order) {
      if (!(candidates[v / 64] >> (v % 64) & 1ULL)) continue;
      clique.push_back(v);
      const std::uint64_t* rv = row(v);
      bool any = false;
      for (std::size_t w = 0; w < words; ++w) {
        candidates[w] &= rv[w];
        any |= candidates[w] != 0;
      }
      if (!any) break;
    }
    if (clique.size() > best_clique.size()) best_clique = std::move(clique);
  }
  if (best_clique.size() < 3)
    throw Error(Errc::NoConsensus, "largest consistent set has " + std::to_string(best_clique.size()) + " members");

  std::sort(best_clique.begin(), best_clique.end());
  std::vector<Correspondence> members;
  members.reserve(best_clique.size());
  for (std::size_t i : best_clique) members.push_back(corr.pairs[i]);
  RigidTransform pose;
  try {
    pose = detail::kabsch_subset(corr, members);
  } catch (const Error& e) {
    throw Error(Errc::NoConsensus, std::string("clique is degenerate: ") + e.what());
  }
  return detail::finish(corr, pose, best_clique.size(), params);
}

inline RegistrationResult robust_estimate(const CorrespondenceSet& corr, RobustMethod method,
                                          const RegistrationParams& params) {
  return method == RobustMethod::Ransac ? ransac(corr, params) : clique_estimate(corr, params);
}

}  // namespace diematch::reg
