#include <gtest/gtest.h>

#include <fstream>
#include <numbers>

#include "diematch/evalmetrics.hpp"
#include "diematch/pair_registration.hpp"
#include "diematch/synth.hpp"
#include "support.hpp"

using namespace diematch;
using namespace diematch::reg;
using diematch::eval::sre;
using geom::Mat3;
using geom::Vec3;
using testing_support::TempDir;

namespace {

template <class Fn>
Errc code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an exception";
  return Errc::InvalidArgument;
}

PointCloud coin(std::uint64_t die_seed, std::uint64_t strike_seed, const pipeline::Degradation& deg = {}) {
  pipeline::SyntheticDieSpec spec;
  spec.seed = die_seed;
  pipeline::StrikeOptions opt;
  opt.seed = strike_seed;
  opt.random_pose = false;
  return pipeline::strike_coin(pipeline::generate_synthetic_die(spec), deg, opt).cloud;
}

// the same coin moved by a benchmark-style rotation about its centroid
RigidTransform about_centroid(const PointCloud& c, const Mat3& r) {
  return geom::rotation_about(r, geom::centroid(c.points));
}

CorrespondenceSet identity_pairs(std::vector<Vec3> src, std::vector<Vec3> dst) {
  CorrespondenceSet c;
  for (std::uint32_t i = 0; i < src.size(); ++i) c.pairs.push_back({i, i});
  c.source = geom::make_point_set(std::move(src));
  c.target = geom::make_point_set(std::move(dst));
  return c;
}

// n true pairs under t plus n_out uniform outliers in a 20 mm cube
CorrespondenceSet with_outliers(std::size_t n, std::size_t n_out, const RigidTransform& t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-10.0, 10.0);
  std::vector<Vec3> src, dst;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 p(u(rng), u(rng), u(rng));
    src.push_back(p);
    dst.push_back(t.apply(p));
  }
  for (std::size_t i = 0; i < n_out; ++i) {
    src.emplace_back(u(rng), u(rng), u(rng));
    dst.emplace_back(u(rng), u(rng), u(rng));
  }
  return identity_pairs(std::move(src), std::move(dst));
}

double max_abs(const Mat3& m) { return m.cwiseAbs().maxCoeff(); }

}  // namespace

// --- Kabsch ----------------------------------------------------------------------

TEST(Kabsch, SelfCorrespondenceIsIdentity) {
  const auto pts = testing_support::random_points(40, 1);
  const RigidTransform t = kabsch(pts, pts);
  EXPECT_LE(max_abs(t.rotation - Mat3::Identity()), 1e-12);
  EXPECT_LE(t.translation.norm(), 1e-12);
}

TEST(Kabsch, RecoversQuarterTurnWithShift) {
  const RigidTransform truth{geom::rotation_from_euler(0, 0, std::numbers::pi / 2), Vec3(1, 2, 3)};
  const auto src = testing_support::random_points(10, 2);
  const RigidTransform t = kabsch(identity_pairs(src, geom::apply_transform(src, truth)));
  EXPECT_LE(max_abs(t.rotation - truth.rotation), 1e-9);
  EXPECT_LE((t.translation - truth.translation).norm(), 1e-9);
}

TEST(Kabsch, CollinearIsDegenerate) {
  const std::vector<Vec3> line{Vec3(0, 0, 0), Vec3(1, 1, 1), Vec3(2, 2, 2)};
  EXPECT_EQ(code_of([&] { kabsch(line, line); }), Errc::DegenerateConfiguration);
  const std::vector<Vec3> two{Vec3(0, 0, 0), Vec3(1, 0, 0)};
  EXPECT_EQ(code_of([&] { kabsch(two, two); }), Errc::TooFewMatches);
}

TEST(Kabsch, ReflectionNeverReturned) {
  // a mirrored target must still give a proper rotation
  auto src = testing_support::random_points(20, 4);
  std::vector<Vec3> dst;
  for (const auto& p : src) dst.emplace_back(p.x(), p.y(), -p.z());
  const RigidTransform t = kabsch(src, dst);
  EXPECT_NEAR(t.rotation.determinant(), 1.0, 1e-12);
}

TEST(Kabsch, SmallRotationPerturbationsNeverLowerCost) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> noise(0.0, 0.05);
  std::normal_distribution<double> axis(0.0, 1.0);
  std::uniform_real_distribution<double> angle(-geom::deg2rad(1.0), geom::deg2rad(1.0));
  for (int trial = 0; trial < 20; ++trial) {
    const auto truth = testing_support::random_transform(rng);
    const auto src = testing_support::random_points(30, 100 + trial);
    std::vector<Vec3> dst;
    for (const auto& p : src) dst.push_back(truth.apply(p) + Vec3(noise(rng), noise(rng), noise(rng)));
    const auto corr = identity_pairs(src, dst);
    const RigidTransform t = kabsch(corr);
    const double best = alignment_cost(corr, t);
    for (int k = 0; k < 100; ++k) {
      const Mat3 d = Eigen::AngleAxisd(angle(rng), Vec3(axis(rng), axis(rng), axis(rng)).normalized()).toRotationMatrix();
      const RigidTransform moved{d * t.rotation, t.translation};
      EXPECT_GE(alignment_cost(corr, moved), best - 1e-9 * (1.0 + best));
    }
  }
}

// --- ICP ----------------------------------------------------------------------------

TEST(Icp, IdenticalCloudsConvergeImmediately) {
  const PointCloud c = geom::voxel_downsample(coin(1, 1), 0.1);
  const RegistrationResult r = icp(c, c, RigidTransform::identity(), RegistrationParams{});
  EXPECT_LE(max_abs(r.transform.rotation - Mat3::Identity()), 1e-12);
  EXPECT_LE(r.transform.translation.norm(), 1e-12);
  EXPECT_EQ(r.rmse, 0.0);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.iterations, 1);
}

TEST(Icp, RecoversSmallPerturbation) {
  const PointCloud src = geom::voxel_downsample(coin(2, 1), 0.1);
  const RigidTransform truth = geom::compose(RigidTransform{Mat3::Identity(), Vec3(0.05, 0, 0)},
                                             about_centroid(src, geom::rotation_from_euler(0, 0, geom::deg2rad(2.0))));
  const PointCloud dst = geom::apply_transform(src, truth);
  const RegistrationResult r = icp(src, dst, RigidTransform::identity(), RegistrationParams{});
  EXPECT_LT(sre(src, truth, r.transform), 1e-3);
  for (std::size_t k = 1; k < r.rmse_trace.size(); ++k) EXPECT_LE(r.rmse_trace[k], r.rmse_trace[k - 1]);
}

TEST(Icp, GateRejectsFarInitialization) {
  const PointCloud c = geom::voxel_downsample(coin(3, 1), 0.1);
  const RigidTransform far{Mat3::Identity(), Vec3(50, 0, 0)};
  EXPECT_EQ(code_of([&] { icp(c, c, far, RegistrationParams{}); }), Errc::NoMatchesInRange);
}

TEST(Icp, AcceptedTraceIsNonIncreasing) {
  RegistrationParams p;
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    const PointCloud a = geom::voxel_downsample(coin(seed, 1, {.wear = 0.1, .noise_sigma = 0.005}), 0.1);
    const PointCloud b = geom::voxel_downsample(coin(seed, 2, {.wear = 0.0, .noise_sigma = 0.005}), 0.1);
    const Mat3 r = geom::rotation_from_euler(0.05, -0.03, 0.1 * static_cast<double>(seed));
    try {
      const RegistrationResult res = icp(a, geom::apply_transform(b, about_centroid(b, r)), RigidTransform::identity(), p);
      for (std::size_t k = 1; k < res.rmse_trace.size(); ++k) EXPECT_LE(res.rmse_trace[k], res.rmse_trace[k - 1]);
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::NoMatchesInRange);
    }
  }
}

TEST(RandomRestart, IdenticalCloudsKeepIdentity) {
  const PointCloud c = geom::voxel_downsample(coin(4, 1), 0.25);
  RegistrationParams p;
  const RegistrationResult r = random_restart_icp(c, c, 8, p);
  EXPECT_EQ(r.rmse, 0.0);
  EXPECT_LE(max_abs(r.transform.rotation - Mat3::Identity()), 1e-12);
}

TEST(RandomRestart, EscapesLargeZRotation) {
  const PointCloud src = geom::voxel_downsample(coin(5, 1), 0.1);
  const RigidTransform truth = about_centroid(src, geom::rotation_from_euler(0, 0, geom::deg2rad(150.0)));
  const PointCloud dst = geom::apply_transform(src, truth);
  RegistrationParams p;
  p.seed = 3;
  // plain ICP from the identity stalls in a local minimum
  double local = 1.0;
  try {
    local = sre(src, truth, icp(src, dst, RigidTransform::identity(), p).transform);
  } catch (const Error&) {
  }
  EXPECT_GT(local, 0.02);
  const RegistrationResult r = random_restart_icp(src, dst, 32, p);
  EXPECT_LT(sre(src, truth, r.transform), 0.02);
}

TEST(RandomRestart, NeedsAtLeastOneRestart) {
  const PointCloud c = geom::voxel_downsample(coin(6, 1), 0.25);
  EXPECT_EQ(code_of([&] { random_restart_icp(c, c, 0, RegistrationParams{}); }), Errc::InvalidArgument);
}

// --- FPFH -------------------------------------------------------------------------

TEST(Fpfh, FlatPatchGivesEqualDescriptors) {
  PointCloud c;
  for (int i = 0; i < 15; ++i)
    for (int j = 0; j < 15; ++j) {
      c.points.emplace_back(0.1 * i + 0.013 * (j % 3), 0.1 * j, 0.0);
      c.normals.push_back(Vec3::UnitZ());
    }
  const DescriptorField f = compute_fpfh(c, 0.35);
  ASSERT_EQ(f.dimension(), kFpfhDimension);
  for (std::size_t k = 1; k < f.size(); ++k)
    EXPECT_LE((f.descriptors.col(static_cast<Eigen::Index>(k)) - f.descriptors.col(0)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Fpfh, RigidMotionLeavesDescriptorsUnchanged) {
  const PointCloud c = geom::voxel_downsample(coin(7, 1), 0.1);
  std::mt19937_64 rng(8);
  const DescriptorField f = compute_fpfh(c, 1.0);
  for (int trial = 0; trial < 3; ++trial) {
    const PointCloud moved = geom::apply_transform(c, testing_support::random_transform(rng));
    const DescriptorField g = compute_fpfh(moved, 1.0);
    ASSERT_EQ(g.size(), f.size());
    EXPECT_LE((g.descriptors - f.descriptors).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_EQ(g.isolated, f.isolated);
  }
}

TEST(Fpfh, IsolatedPointIsZeroAndFlagged) {
  PointCloud c;
  c.points = {Vec3(0, 0, 0), Vec3(0.1, 0, 0), Vec3(0, 0.1, 0.01), Vec3(9, 9, 9)};
  c.normals = {Vec3::UnitZ(), Vec3(0.1, 0, 1).normalized(), Vec3::UnitZ(), Vec3::UnitZ()};
  const DescriptorField f = compute_fpfh(c, 0.5);
  EXPECT_EQ(f.isolated[3], 1);
  EXPECT_EQ(f.descriptors.col(3).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(f.isolated[0], 0);
}

TEST(Fpfh, RequiresNormals) {
  PointCloud c;
  c.points = {Vec3::Zero()};
  EXPECT_EQ(code_of([&] { compute_fpfh(c, 1.0); }), Errc::MissingNormals);
}

// --- external descriptors -------------------------------------------------------------

TEST(ExternalDescriptors, ParsesWellFormedFile) {
  TempDir dir("desc");
  PointCloud cloud;
  cloud.points = testing_support::random_points(400, 1);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  {
    std::ofstream os(dir / "a.desc");
    os << "dim=32 count=250\n";
    for (int k = 0; k < 250; ++k) {
      os << 399 - k;
      for (int d = 0; d < 32; ++d) os << ' ' << g(rng);
      os << '\n';
    }
  }
  const DescriptorField f = load_external_descriptors(dir / "a.desc", cloud);
  EXPECT_EQ(f.size(), 250u);
  EXPECT_EQ(f.dimension(), 32);
  EXPECT_EQ(f.sample_indices.front(), 399u);

  save_external_descriptors(dir / "b.desc", f);
  const DescriptorField back = load_external_descriptors(dir / "b.desc", cloud, 32);
  EXPECT_EQ(back.descriptors, f.descriptors);
  EXPECT_EQ(code_of([&] { load_external_descriptors(dir / "b.desc", cloud, 16); }), Errc::DimensionMismatch);
}

TEST(ExternalDescriptors, RejectsBadRows) {
  TempDir dir("desc");
  PointCloud cloud;
  cloud.points = testing_support::random_points(5, 1);
  auto write = [&](const std::string& body) {
    std::ofstream os(dir / "x.desc");
    os << body;
  };
  write("dim=2 count=1\n0 1.0 nan\n");
  EXPECT_EQ(code_of([&] { load_external_descriptors(dir / "x.desc", cloud); }), Errc::NonFiniteValue);
  write("dim=2 count=1\n5 1.0 2.0\n");
  EXPECT_EQ(code_of([&] { load_external_descriptors(dir / "x.desc", cloud); }), Errc::IndexOutOfRange);
  write("dim=2 count=2\n0 1.0 2.0\n");
  EXPECT_EQ(code_of([&] { load_external_descriptors(dir / "x.desc", cloud); }), Errc::DimensionMismatch);
  write("2 1.0\n");
  EXPECT_EQ(code_of([&] { load_external_descriptors(dir / "x.desc", cloud); }), Errc::ParseError);
  EXPECT_EQ(code_of([&] { load_external_descriptors(dir / "none.desc", cloud); }), Errc::IoError);
}

// --- matching --------------------------------------------------------------------------

namespace {

DescriptorField field_1d(std::vector<double> values) {
  DescriptorField f;
  f.descriptors.resize(1, static_cast<Eigen::Index>(values.size()));
  std::vector<Vec3> pos;
  for (std::size_t k = 0; k < values.size(); ++k) {
    f.descriptors(0, static_cast<Eigen::Index>(k)) = values[k];
    f.sample_indices.push_back(static_cast<std::uint32_t>(k));
    pos.emplace_back(static_cast<double>(k), 0, 0);
  }
  f.positions = geom::make_point_set(std::move(pos));
  return f;
}

std::vector<std::pair<std::uint32_t, std::uint32_t>> as_pairs(const CorrespondenceSet& c, bool swap = false) {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> out;
  for (const auto& x : c.pairs) out.emplace_back(swap ? x.target : x.source, swap ? x.source : x.target);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST(Matching, IdenticalFieldsMatchThemselves) {
  const PointCloud c = geom::voxel_downsample(coin(9, 1), 0.2);
  const DescriptorField f = compute_fpfh(c, 1.0);
  const CorrespondenceSet m = match_descriptors(f, f, static_cast<int>(f.size()), 1);
  // exact duplicate descriptors can only be matched once, to the lowest index
  std::size_t self = 0;
  for (const auto& p : m.pairs) self += p.source == p.target;
  EXPECT_EQ(self, m.size());
  EXPECT_GE(m.size(), f.size() * 9 / 10);
}

TEST(Matching, HandEnumeratedExamples) {
  auto m = match_descriptors(field_1d({0, 10}), field_1d({0.1, 9}), 2, 1);
  EXPECT_EQ(as_pairs(m), (std::vector<std::pair<std::uint32_t, std::uint32_t>>{{0, 0}, {1, 1}}));
  m = match_descriptors(field_1d({0, 1}), field_1d({0.4}), 2, 1);
  EXPECT_EQ(as_pairs(m), (std::vector<std::pair<std::uint32_t, std::uint32_t>>{{0, 0}}));
}

TEST(Matching, SwappingSidesMirrorsPairs) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const DescriptorField a = compute_fpfh(geom::voxel_downsample(coin(seed, 1, {.wear = 0.1}), 0.15), 1.0);
    const DescriptorField b = compute_fpfh(geom::voxel_downsample(coin(seed, 2), 0.15), 1.0);
    const auto ab = match_descriptors(a, b, 300, seed);
    const auto ba = match_descriptors(b, a, 300, seed);
    EXPECT_EQ(as_pairs(ab), as_pairs(ba, true));
  }
}

TEST(Matching, Contracts) {
  EXPECT_EQ(code_of([&] { match_descriptors(field_1d({}), field_1d({1}), 1, 1); }), Errc::InvalidArgument);
  EXPECT_EQ(code_of([&] { match_descriptors(field_1d({1}), field_1d({1}), 0, 1); }), Errc::InvalidArgument);
  DescriptorField two = field_1d({1, 2});
  two.descriptors.conservativeResize(2, 2);
  EXPECT_EQ(code_of([&] { match_descriptors(field_1d({1, 2}), two, 2, 1); }), Errc::DimensionMismatch);
}

TEST(Matching, SamplingIsUniqueSortedAndSeeded) {
  const auto a = sample_positions(1000, 100, 5);
  EXPECT_EQ(a.size(), 100u);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  EXPECT_EQ(std::adjacent_find(a.begin(), a.end()), a.end());
  EXPECT_EQ(a, sample_positions(1000, 100, 5));
  EXPECT_NE(a, sample_positions(1000, 100, 6));
  EXPECT_EQ(sample_positions(10, 50, 1).size(), 10u);
}

// --- robust estimation -----------------------------------------------------------------

TEST(Robust, AllInliersMatchPlainKabsch) {
  std::mt19937_64 rng(21);
  for (const auto method : {RobustMethod::Ransac, RobustMethod::Clique}) {
    const auto truth = testing_support::random_transform(rng);
    const auto corr = with_outliers(40, 0, truth, 3);
    const RigidTransform plain = kabsch(corr);
    const RegistrationResult r = robust_estimate(corr, method, RegistrationParams{});
    EXPECT_LE(max_abs(r.transform.rotation - plain.rotation), 1e-9);
    EXPECT_LE((r.transform.translation - plain.translation).norm(), 1e-9);
    EXPECT_EQ(r.inliers.size(), 40u);
  }
}

TEST(Robust, HalfOutliersRecovered) {
  std::mt19937_64 rng(22);
  for (const auto method : {RobustMethod::Ransac, RobustMethod::Clique}) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const auto truth = testing_support::random_transform(rng);
      const auto corr = with_outliers(50, 50, truth, seed);
      RegistrationParams p;
      p.seed = seed;
      const RegistrationResult r = robust_estimate(corr, method, p);
      EXPECT_LT(sre(*corr.source, truth, r.transform), 0.01);
      std::size_t recalled = 0;
      for (const auto& c : r.inliers.pairs) recalled += c.source < 50;
      EXPECT_GE(static_cast<double>(recalled) / 50.0, 0.9);
    }
  }
}

TEST(Robust, PureNoiseHasNoConsensus) {
  for (const auto method : {RobustMethod::Ransac, RobustMethod::Clique}) {
    int rejected = 0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      const auto corr = with_outliers(0, 20, RigidTransform::identity(), 1000 + seed);
      RegistrationParams p;
      p.seed = seed;
      try {
        robust_estimate(corr, method, p);
      } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::NoConsensus);
        ++rejected;
      }
    }
    EXPECT_GE(rejected, 19) << (method == RobustMethod::Ransac ? "ransac" : "clique");
  }
}

TEST(Robust, TooFewCorrespondences) {
  const auto corr = with_outliers(2, 0, RigidTransform::identity(), 1);
  EXPECT_EQ(code_of([&] { ransac(corr, RegistrationParams{}); }), Errc::TooFewMatches);
  EXPECT_EQ(code_of([&] { clique_estimate(corr, RegistrationParams{}); }), Errc::TooFewMatches);
}

TEST(Robust, RansacMatchesExhaustiveOnSmallSets) {
  std::mt19937_64 rng(30);
  std::normal_distribution<double> noise(0.0, 0.02);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t n = 6 + static_cast<std::size_t>(trial % 7);  // 6..12
    const std::size_t inl = n - n / 3;
    const auto truth = testing_support::random_transform(rng);
    auto corr = with_outliers(inl, n - inl, truth, 500 + trial);
    std::vector<Vec3> dst = *corr.target;
    for (std::size_t i = 0; i < inl; ++i) dst[i] += Vec3(noise(rng), noise(rng), noise(rng));
    corr.target = geom::make_point_set(std::move(dst));

    RegistrationParams p;
    p.seed = static_cast<std::uint64_t>(trial);
    std::size_t best = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        for (std::size_t k = j + 1; k < n; ++k) {
          std::vector<Vec3> a, b;
          for (auto s : {i, j, k}) {
            a.push_back((*corr.source)[s]);
            b.push_back((*corr.target)[s]);
          }
          try {
            const RigidTransform t = kabsch(a, b);
            std::size_t support = 0;
            for (std::size_t s = 0; s < n; ++s)
              support += (t.apply((*corr.source)[s]) - (*corr.target)[s]).norm() <= p.inlier_threshold;
            best = std::max(best, support);
          } catch (const Error&) {
          }
        }
    const RegistrationResult r = ransac(corr, p);
    EXPECT_EQ(r.consensus, best) << "n=" << n;
  }
}

// --- refinement ---------------------------------------------------------------------------

TEST(Refine, OptimalCoarseStaysPut) {
  const PointCloud c = geom::voxel_downsample(coin(10, 1), 0.1);
  const PointSet set = geom::make_point_set(c.points);
  RegistrationResult coarse;
  coarse.inliers = identity_pairs(c.points, c.points);
  coarse.inliers.pairs.resize(50);
  const RegistrationResult r = refine_icp(set, set, coarse, RegistrationParams{});
  EXPECT_LE(max_abs(r.transform.rotation - Mat3::Identity()), 1e-9);
  EXPECT_LE(r.transform.translation.norm(), 1e-9);
}

TEST(Refine, ShrinksResidualRotation) {
  const PointCloud src = geom::voxel_downsample(coin(11, 1), 0.1);
  const RigidTransform truth = about_centroid(src, geom::rotation_from_euler(0.2, -0.1, 1.3));
  const PointCloud dst = geom::apply_transform(src, truth);
  const RigidTransform off = geom::compose(about_centroid(dst, geom::rotation_from_euler(0, 0, geom::deg2rad(0.5))), truth);
  RegistrationResult coarse;
  coarse.transform = off;
  coarse.inliers = identity_pairs(src.points, dst.points);
  coarse.inliers.pairs.resize(200);
  const RegistrationResult r =
      refine_icp(geom::make_point_set(src.points), geom::make_point_set(dst.points), coarse, RegistrationParams{});
  EXPECT_LT(sre(src, truth, r.transform), sre(src, truth, off));
}

TEST(Refine, NeedsThreeInliers) {
  const PointCloud c = geom::voxel_downsample(coin(12, 1), 0.2);
  RegistrationResult coarse;
  coarse.inliers = identity_pairs(c.points, c.points);
  coarse.inliers.pairs.resize(2);
  const PointSet set = geom::make_point_set(c.points);
  EXPECT_EQ(code_of([&] { refine_icp(set, set, coarse, RegistrationParams{}); }), Errc::TooFewMatches);
}

// --- full pairs -------------------------------------------------------------------------------

TEST(RegisterPair, BenchmarkRotationOfCleanCoin) {
  RegistrationParams p;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const PointCloud src = coin(20 + seed, 1);
    const RigidTransform truth = about_centroid(src, geom::random_rotation(geom::RotationRanges{}, seed).rotation);
    const PointCloud dst = geom::apply_transform(src, truth);
    const RegistrationResult r = register_pair(src, dst, Method::Fpfh, p);
    EXPECT_LT(sre(geom::voxel_downsample(src, p.source_voxel), truth, r.transform), 0.05) << seed;
    std::vector<std::string> stages;
    for (const auto& t : r.timings) stages.push_back(t.stage);
    EXPECT_EQ(stages, (std::vector<std::string>{"downsample", "descriptors", "match", "robust", "refine"}));
  }
}

TEST(RegisterPair, RansacVariantAlsoRecovers) {
  RegistrationParams p;
  p.robust = RobustMethod::Ransac;
  const PointCloud src = coin(31, 1);
  const RigidTransform truth = about_centroid(src, geom::random_rotation(geom::RotationRanges{}, 9).rotation);
  const RegistrationResult r = register_pair(src, geom::apply_transform(src, truth), Method::Fpfh, p);
  EXPECT_LT(sre(geom::voxel_downsample(src, p.source_voxel), truth, r.transform), 0.05);
}

TEST(RegisterPair, UnrelatedDiesDoNotCrash) {
  RegistrationParams p;
  p.n_descriptor_samples = 1000;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const PointCloud a = coin(40 + seed, 1);
    const PointCloud b = coin(50 + seed, 2);
    try {
      const RegistrationResult r = register_pair(a, b, Method::Fpfh, p);
      EXPECT_TRUE(r.transform.is_valid(1e-6));
    } catch (const Error& e) {
      EXPECT_FALSE(e.stage().empty()) << e.what();
    }
  }
}

TEST(RegisterPair, ExternalWithoutFilesIsStageTagged) {
  const PointCloud a = coin(60, 1);
  try {
    register_pair(a, a, Method::External, RegistrationParams{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.stage(), "descriptors");
  }
  PairInputs in{std::filesystem::path("/nonexistent/a.desc"), std::filesystem::path("/nonexistent/b.desc")};
  try {
    register_pair(a, a, Method::External, RegistrationParams{}, in);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.stage(), "descriptors");
    EXPECT_EQ(e.code(), Errc::IoError);
  }
}

TEST(RegisterPair, ExternalDescriptorsDriveMatching) {
  // FPFH written out and read back through the external path gives the same answer
  TempDir dir("ext");
  RegistrationParams p;
  const PointCloud src = coin(61, 1);
  const RigidTransform truth = about_centroid(src, geom::random_rotation(geom::RotationRanges{}, 4).rotation);
  const PointCloud dst = geom::apply_transform(src, truth);
  const auto write = [&](const PointCloud& c, const std::string& name) {
    save_external_descriptors(dir / name, compute_fpfh(c, p.feature_radius));
    return dir / name;
  };
  const PointCloud s_small = geom::voxel_downsample(src, 0.1), d_small = geom::apply_transform(s_small, truth);
  PairInputs in{write(s_small, "a.desc"), write(d_small, "b.desc")};
  const RegistrationResult r = register_pair(s_small, d_small, Method::External, p, in);
  EXPECT_LT(sre(s_small, truth, r.transform), 0.05);
}

TEST(Methods, NamesRoundTrip) {
  for (const auto m : {Method::IcpRand, Method::Fpfh, Method::External}) EXPECT_EQ(parse_method(to_string(m)), m);
  EXPECT_EQ(parse_robust("ransac"), RobustMethod::Ransac);
  EXPECT_EQ(parse_robust("clique"), RobustMethod::Clique);
  EXPECT_THROW(parse_method("teaser++"), Error);
}
