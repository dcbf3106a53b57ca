#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "diematch/geom.hpp"

namespace diematch::pipeline {

using geom::PointCloud;
using geom::RigidTransform;
using geom::Vec3;
using Vec2 = Eigen::Vector2d;

/// Parameters of a synthetic die: a band-limited random relief (plane waves)
/// plus localized engraved bumps, defined over a disc larger than the coins
/// struck from it.
struct SyntheticDieSpec {
  std::uint64_t seed = 1;
  double relief_amplitude = 0.06;  // mm, standard deviation of the wave relief
  double min_wavelength = 0.8;     // mm
  double max_wavelength = 3.0;     // mm
  int waves = 48;
  int bumps = 24;
  double bump_height = 0.15;  // mm, peak magnitude
  double bump_min_width = 0.15;
  double bump_max_width = 0.45;
  double die_radius = 3.6;   // mm
  double coin_radius = 3.0;  // mm
};

/// Per-strike damage and scanning model.
struct Degradation {
  double wear = 0.0;        // [0,1], attenuates fine relief
  int cracks = 0;           // raised crack ridges
  double crack_height = 0.04;
  double crack_width = 0.03;
  double edge_jitter = 0.0;    // mm, irregular flan boundary
  double crop_fraction = 0.0;  // [0,1), fraction of the face cut off
  double noise_sigma = 0.0;    // mm, height noise
  double point_spacing = 0.04; // mm, mean sample spacing
  double max_center_shift = -1.0;  // mm; negative uses die_radius - coin_radius
};

inline void validate(const SyntheticDieSpec& s) {
  if (!(s.relief_amplitude >= 0.0) || !(s.bump_height >= 0.0) || !(s.coin_radius > 0.0) ||
      !(s.die_radius >= s.coin_radius) || !(s.min_wavelength > 0.0) || !(s.max_wavelength >= s.min_wavelength) ||
      s.waves < 0 || s.bumps < 0 || !(s.bump_min_width > 0.0) || !(s.bump_max_width >= s.bump_min_width))
    throw Error(Errc::InvalidArgument, "invalid synthetic die spec");
}

inline void validate(const Degradation& d) {
  if (!(d.wear >= 0.0 && d.wear <= 1.0) || d.cracks < 0 || !(d.edge_jitter >= 0.0) ||
      !(d.crop_fraction >= 0.0 && d.crop_fraction < 1.0) || !(d.noise_sigma >= 0.0) || !(d.point_spacing > 0.0) ||
      !(d.crack_height >= 0.0) || !(d.crack_width > 0.0))
    throw Error(Errc::InvalidArgument, "invalid degradation");
}

/// Heightfield of one die. Evaluation is analytic, including the gradient.
class DiePattern {
 public:
  struct Wave {
    Vec2 k;
    double amplitude;
    double phase;
  };
  struct Bump {
    Vec2 center;
    double height;
    double width;
  };

  DiePattern() = default;

  explicit DiePattern(const SyntheticDieSpec& spec) : spec_(spec) {
    validate(spec);
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double wave_amp = spec.waves > 0 ? spec.relief_amplitude * std::sqrt(2.0 / spec.waves) : 0.0;
    for (int i = 0; i < spec.waves; ++i) {
      const double dir = 2.0 * std::numbers::pi * unit(rng);
      const double lambda = spec.min_wavelength + (spec.max_wavelength - spec.min_wavelength) * unit(rng);
      const double freq = 2.0 * std::numbers::pi / lambda;
      waves_.push_back({Vec2(std::cos(dir), std::sin(dir)) * freq, wave_amp, 2.0 * std::numbers::pi * unit(rng)});
    }
    for (int i = 0; i < spec.bumps; ++i) {
      const double r = spec.die_radius * std::sqrt(unit(rng));
      const double a = 2.0 * std::numbers::pi * unit(rng);
      const double sign = unit(rng) < 0.5 ? -1.0 : 1.0;
      const double h = sign * spec.bump_height * (0.5 + 0.5 * unit(rng));
      const double w = spec.bump_min_width + (spec.bump_max_width - spec.bump_min_width) * unit(rng);
      bumps_.push_back({Vec2(r * std::cos(a), r * std::sin(a)), h, w});
    }
  }

  const SyntheticDieSpec& spec() const noexcept { return spec_; }
  const std::vector<Wave>& waves() const noexcept { return waves_; }
  const std::vector<Bump>& bumps() const noexcept { return bumps_; }

  /// Height and gradient at `p`; `wear` in [0,1] attenuates short wavelengths.
  double height(const Vec2& p, double wear, Vec2* gradient = nullptr) const {
    const double kmax = 2.0 * std::numbers::pi / spec_.min_wavelength;
    double h = 0.0;
    Vec2 g = Vec2::Zero();
    for (const Wave& w : waves_) {
      const double att = std::exp(-3.0 * wear * w.k.squaredNorm() / (kmax * kmax));
      const double arg = w.k.dot(p) + w.phase;
      h += att * w.amplitude * std::cos(arg);
      g -= att * w.amplitude * std::sin(arg) * w.k;
    }
    for (const Bump& b : bumps_) {
      const double width = b.width * (1.0 + 0.5 * wear);
      const double height = b.height * (1.0 - 0.4 * wear);
      const Vec2 d = p - b.center;
      const double e = height * std::exp(-d.squaredNorm() / (2.0 * width * width));
      h += e;
      g -= e * d / (width * width);
    }
    if (gradient) *gradient = g;
    return h;
  }

 private:
  SyntheticDieSpec spec_;
  std::vector<Wave> waves_;
  std::vector<Bump> bumps_;
};

inline DiePattern generate_synthetic_die(const SyntheticDieSpec& spec) { return DiePattern(spec); }

struct StruckCoin {
  PointCloud cloud;      // scan frame
  RigidTransform pose;   // die frame -> scan frame
  Vec2 center;           // coin center on the die, die frame
};

struct StrikeOptions {
  std::uint64_t seed = 1;
  bool random_pose = true;
  geom::RotationRanges ranges{};
};

namespace detail {

struct Crack {
  Vec2 a, b;
};

inline double segment_distance(const Vec2& p, const Crack& c, Vec2* closest) {
  const Vec2 ab = c.b - c.a;
  const double t = std::clamp((p - c.a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
  *closest = c.a + t * ab;
  return (p - *closest).norm();
}

}  // namespace detail

/// Samples one coin struck from `die`: a disc at a random position on the
/// die, worn, cracked, with an irregular rim, optionally cropped, with height
/// noise, then moved by a random rigid pose (rotation about the centroid).
inline StruckCoin strike_coin(const DiePattern& die, const Degradation& deg, const StrikeOptions& options) {
  validate(deg);
  const SyntheticDieSpec& spec = die.spec();
  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  StruckCoin coin;
  const double shift = deg.max_center_shift >= 0.0 ? deg.max_center_shift : spec.die_radius - spec.coin_radius;
  {
    const double r = shift * std::sqrt(unit(rng));
    const double a = 2.0 * std::numbers::pi * unit(rng);
    coin.center = Vec2(r * std::cos(a), r * std::sin(a));
  }

  // flan outline: radius modulated by a few low harmonics
  std::vector<std::pair<double, double>> harmonics;
  for (int m = 2; m <= 6; ++m) harmonics.emplace_back(gauss(rng) / std::sqrt(5.0), 2.0 * std::numbers::pi * unit(rng));
  auto outline = [&](double theta) {
    double r = spec.coin_radius;
    for (std::size_t i = 0; i < harmonics.size(); ++i)
      r += deg.edge_jitter * harmonics[i].first * std::cos(static_cast<double>(i + 2) * theta + harmonics[i].second);
    return r;
  };

  std::vector<detail::Crack> cracks;
  for (int i = 0; i < deg.cracks; ++i) {
    const double r = 0.8 * spec.coin_radius * std::sqrt(unit(rng));
    const double a = 2.0 * std::numbers::pi * unit(rng);
    const Vec2 start = coin.center + Vec2(r * std::cos(a), r * std::sin(a));
    const double dir = 2.0 * std::numbers::pi * unit(rng);
    const double len = 0.5 + 1.5 * unit(rng);
    cracks.push_back({start, start + len * Vec2(std::cos(dir), std::sin(dir))});
  }

  const double outer = spec.coin_radius + 3.0 * deg.edge_jitter;
  const auto candidates =
      static_cast<std::size_t>(std::numbers::pi * outer * outer / (deg.point_spacing * deg.point_spacing));
  std::vector<Vec2> samples;
  samples.reserve(candidates);
  for (std::size_t i = 0; i < candidates; ++i) {
    const double r = outer * std::sqrt(unit(rng));
    const double a = 2.0 * std::numbers::pi * unit(rng);
    if (r <= outline(a)) samples.push_back(coin.center + Vec2(r * std::cos(a), r * std::sin(a)));
  }

  if (deg.crop_fraction > 0.0 && !samples.empty()) {
    const double dir = 2.0 * std::numbers::pi * unit(rng);
    const Vec2 u(std::cos(dir), std::sin(dir));
    std::vector<double> proj;
    proj.reserve(samples.size());
    for (const auto& s : samples) proj.push_back((s - coin.center).dot(u));
    std::vector<double> sorted = proj;
    const auto keep = static_cast<std::size_t>(std::ceil((1.0 - deg.crop_fraction) * static_cast<double>(sorted.size())));
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(keep - 1), sorted.end());
    const double cut = sorted[keep - 1];
    std::vector<Vec2> kept;
    kept.reserve(keep);
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (proj[i] <= cut) kept.push_back(samples[i]);
    samples = std::move(kept);
  }

  PointCloud& cloud = coin.cloud;
  cloud.points.reserve(samples.size());
  cloud.normals.reserve(samples.size());
  for (const Vec2& p : samples) {
    Vec2 grad;
    double h = die.height(p, deg.wear, &grad);
    for (const auto& c : cracks) {
      Vec2 closest;
      const double d = detail::segment_distance(p, c, &closest);
      const double w2 = deg.crack_width * deg.crack_width;
      const double e = deg.crack_height * std::exp(-d * d / (2.0 * w2));
      h += e;
      if (d > 0.0) grad -= e * (p - closest) / w2;
    }
    const double noise = deg.noise_sigma > 0.0 ? deg.noise_sigma * gauss(rng) : 0.0;
    cloud.points.emplace_back(p.x(), p.y(), h + noise);
    cloud.normals.push_back(Vec3(-grad.x(), -grad.y(), 1.0).normalized());
  }

  if (options.random_pose && !cloud.empty()) {
    const RigidTransform rot = geom::random_rotation(options.ranges, rng);
    coin.pose = geom::rotation_about(rot.rotation, geom::centroid(cloud.points));
    cloud = geom::apply_transform(cloud, coin.pose);
  }
  return coin;
}

/// Ground-truth transform taking scan `a` onto scan `b` for two strikes of one die.
inline RigidTransform relative_pose(const RigidTransform& pose_a, const RigidTransform& pose_b) {
  return geom::compose(pose_b, geom::invert(pose_a));
}

}  // namespace diematch::pipeline
