#include <gtest/gtest.h>

#include <cstring>
#include <fstream>
#include <numbers>

#include "diematch/ply.hpp"
#include "diematch/spatial_index.hpp"
#include "support.hpp"

using namespace diematch;
using namespace diematch::geom;
using testing_support::TempDir;

namespace {

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  os << text;
}

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

}  // namespace

// --- PLY ---------------------------------------------------------------------

TEST(Ply, AsciiWithNormals) {
  TempDir dir("ply");
  write_text(dir / "L0001D.ply",
             "ply\nformat ascii 1.0\ncomment scanner\nelement vertex 3\n"
             "property float x\nproperty float y\nproperty float z\n"
             "property float nx\nproperty float ny\nproperty float nz\n"
             "element face 0\nproperty list uchar int vertex_indices\nend_header\n"
             "0 0 0 0 0 2\n1 0 0 0 3 0\n0 1 0 0.6 0 0.8\n");
  const PointCloud c = load_point_cloud(dir / "L0001D.ply", true);
  EXPECT_EQ(c.id, "L0001D");
  ASSERT_EQ(c.size(), 3u);
  ASSERT_TRUE(c.has_normals());
  for (const auto& n : c.normals) EXPECT_NEAR(n.norm(), 1.0, 1e-12);
  EXPECT_NEAR(c.normals[0].z(), 1.0, 1e-12);
  EXPECT_EQ(c.points[1], Vec3(1, 0, 0));
}

TEST(Ply, MissingNormalsRejectedWhenRequired) {
  TempDir dir("ply");
  write_text(dir / "a.ply",
             "ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nproperty double y\nproperty double z\n"
             "end_header\n1 2 3\n");
  EXPECT_EQ(code_of([&] { load_point_cloud(dir / "a.ply", true); }), Errc::MissingNormals);
  const PointCloud c = load_point_cloud(dir / "a.ply", false);
  EXPECT_EQ(c.size(), 1u);
  EXPECT_FALSE(c.has_normals());
}

TEST(Ply, BigEndianAndGarbageRejected) {
  TempDir dir("ply");
  write_text(dir / "be.ply",
             "ply\nformat binary_big_endian 1.0\nelement vertex 1\nproperty float x\nproperty float y\n"
             "property float z\nend_header\n");
  EXPECT_EQ(code_of([&] { load_point_cloud(dir / "be.ply", false); }), Errc::MalformedPly);
  write_text(dir / "junk.ply", "not a ply file");
  EXPECT_EQ(code_of([&] { load_point_cloud(dir / "junk.ply", false); }), Errc::MalformedPly);
  EXPECT_EQ(code_of([&] { load_point_cloud(dir / "absent.ply", false); }), Errc::IoError);
}

TEST(Ply, TruncatedBinaryPayload) {
  TempDir dir("ply");
  std::string text =
      "ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
      "property float z\nend_header\n";
  const float xyz[3] = {1.f, 2.f, 3.f};
  text.append(reinterpret_cast<const char*>(xyz), sizeof xyz);  // one vertex of two
  write_text(dir / "t.ply", text);
  EXPECT_EQ(code_of([&] { load_point_cloud(dir / "t.ply", false); }), Errc::MalformedPly);
}

TEST(Ply, FloatBinaryWithExtraProperties) {
  TempDir dir("ply");
  std::string text =
      "ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nproperty uchar red\n"
      "property float y\nproperty float z\nproperty float nx\nproperty float ny\nproperty float nz\nend_header\n";
  auto put = [&](float v) { text.append(reinterpret_cast<const char*>(&v), sizeof v); };
  for (int i = 0; i < 2; ++i) {
    put(0.5f * static_cast<float>(i));
    text.push_back(static_cast<char>(200));
    put(1.5f);
    put(-2.0f);
    put(0.f);
    put(0.f);
    put(1.f);
  }
  write_text(dir / "f.ply", text);
  const PointCloud c = load_point_cloud(dir / "f.ply", true);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c.points[1], Vec3(0.5, 1.5, -2.0));
}

TEST(Ply, RoundTripIsBitExact) {
  TempDir dir("ply");
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g(0.0, 3.0);
  PointCloud c;
  for (int i = 0; i < 1000; ++i) {
    c.points.emplace_back(g(rng), g(rng), g(rng));
    c.normals.push_back(Vec3(g(rng), g(rng), g(rng)).normalized());
  }
  for (const auto enc : {PlyEncoding::BinaryLittleEndian, PlyEncoding::Ascii}) {
    save_point_cloud(dir / "r.ply", c, enc);
    const PointCloud back = load_point_cloud(dir / "r.ply", true);
    ASSERT_EQ(back.size(), c.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
      EXPECT_EQ(std::memcmp(back.points[i].data(), c.points[i].data(), 3 * sizeof(double)), 0) << i;
      EXPECT_NEAR((back.normals[i] - c.normals[i]).norm(), 0.0, 1e-15);
    }
  }
}

// --- voxel grid ----------------------------------------------------------------

TEST(Voxel, SingletonUnchanged) {
  PointCloud c;
  c.points = {Vec3(0.3, -1.2, 7.0)};
  for (double v : {0.01, 0.1, 5.0}) {
    const PointCloud d = voxel_downsample(c, v);
    ASSERT_EQ(d.size(), 1u);
    EXPECT_EQ(d.points[0], c.points[0]);
  }
}

TEST(Voxel, ShareOrSplitCells) {
  PointCloud c;
  c.points = {Vec3(0, 0, 0), Vec3(0.04, 0, 0)};
  PointCloud d = voxel_downsample(c, 0.1);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_NEAR((d.points[0] - Vec3(0.02, 0, 0)).norm(), 0.0, 1e-15);

  c.points = {Vec3(0, 0, 0), Vec3(0.2, 0, 0)};
  d = voxel_downsample(c, 0.1);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.points[0], c.points[0]);
  EXPECT_EQ(d.points[1], c.points[1]);
}

TEST(Voxel, NormalsAveragedAndRenormalized) {
  PointCloud c;
  c.points = {Vec3(0, 0, 0), Vec3(0.01, 0, 0)};
  c.normals = {Vec3(1, 0, 0), Vec3(0, 1, 0)};
  const PointCloud d = voxel_downsample(c, 0.1);
  ASSERT_TRUE(d.has_normals());
  EXPECT_NEAR((d.normals[0] - Vec3(1, 1, 0).normalized()).norm(), 0.0, 1e-12);
}

TEST(Voxel, Contracts) {
  PointCloud c;
  EXPECT_EQ(code_of([&] { voxel_downsample(c, 0.1); }), Errc::EmptyCloud);
  c.points = {Vec3::Zero()};
  EXPECT_EQ(code_of([&] { voxel_downsample(c, 0.0); }), Errc::NonPositiveVoxel);
  EXPECT_EQ(code_of([&] { voxel_downsample(c, -1.0); }), Errc::NonPositiveVoxel);
}

TEST(Voxel, SecondPassIsIdempotent) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    PointCloud c;
    c.points = testing_support::random_points(3000, seed, 2.0);
    const double v = 0.1 + 0.05 * static_cast<double>(seed % 4);
    const PointCloud once = voxel_downsample(c, v);
    const PointCloud twice = voxel_downsample(once, v);
    // a centroid stays inside its own cell, so each cell keeps one point
    ASSERT_EQ(twice.size(), once.size());
    for (std::size_t i = 0; i < once.size(); ++i) EXPECT_LE((twice.points[i] - once.points[i]).norm(), v * std::sqrt(3.0) / 2);
  }
}

TEST(Voxel, PointsAlreadyOnCellCentersAreFixed) {
  // cell-centered input is a fixed point of the grid, so size is preserved exactly
  PointCloud c;
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 10; ++j) c.points.emplace_back(0.1 * i + 0.05, 0.1 * j + 0.05, 0.05);
  const PointCloud once = voxel_downsample(c, 0.1);
  EXPECT_EQ(once.size(), c.size());
  EXPECT_EQ(voxel_downsample(once, 0.1).size(), once.size());
}

// --- transforms ------------------------------------------------------------------

TEST(Transform, IdentityAndQuarterTurn) {
  PointCloud c;
  c.points = testing_support::random_points(20, 3);
  const PointCloud same = apply_transform(c, RigidTransform::identity());
  EXPECT_EQ(same.points, c.points);

  RigidTransform r{rotation_from_euler(0, 0, std::numbers::pi / 2), Vec3::Zero()};
  EXPECT_NEAR((r.apply(Vec3(1, 0, 0)) - Vec3(0, 1, 0)).norm(), 0.0, 1e-15);
}

TEST(Transform, GroupLaws) {
  std::mt19937_64 rng(11);
  const auto pts = testing_support::random_points(50, 12);
  for (int k = 0; k < 200; ++k) {
    const auto a = testing_support::random_transform(rng);
    const auto b = testing_support::random_transform(rng);
    const auto c = testing_support::random_transform(rng);
    const auto left = compose(compose(c, b), a);
    const auto right = compose(c, compose(b, a));
    EXPECT_LE((left.rotation - right.rotation).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((left.translation - right.translation).cwiseAbs().maxCoeff(), 1e-12);

    const auto round = compose(invert(a), a);
    for (const auto& p : pts) EXPECT_LE((round.apply(p) - p).norm(), 1e-12);
    const auto inv_ab = invert(compose(b, a));
    const auto ab_inv = compose(invert(a), invert(b));
    EXPECT_LE((inv_ab.rotation - ab_inv.rotation).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((inv_ab.translation - ab_inv.translation).cwiseAbs().maxCoeff(), 1e-12);

    const auto with_id = compose(RigidTransform::identity(), a);
    EXPECT_EQ(with_id.rotation, a.rotation);
    EXPECT_EQ(with_id.translation, a.translation);
    EXPECT_TRUE(a.is_valid());
  }
  const auto id = invert(RigidTransform::identity());
  EXPECT_EQ(id.rotation, Mat3::Identity());
  EXPECT_EQ(id.translation, Vec3::Zero());
}

TEST(Transform, EulerRoundTrip) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.2, 1.2), z(-3.0, 3.0);
  for (int k = 0; k < 100; ++k) {
    const double ax = u(rng), ay = u(rng), az = z(rng);
    const Vec3 e = euler_from_rotation(rotation_from_euler(ax, ay, az));
    EXPECT_NEAR(e.x(), ax, 1e-12);
    EXPECT_NEAR(e.y(), ay, 1e-12);
    EXPECT_NEAR(e.z(), az, 1e-12);
  }
}

TEST(RandomRotation, ZeroRangesGiveIdentity) {
  RotationRanges r{{0, 0}, {0, 0}, {0, 0}};
  const auto t = random_rotation(r, 77);
  EXPECT_LE((t.rotation - Mat3::Identity()).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(t.translation, Vec3::Zero());
}

TEST(RandomRotation, SeedDeterminesDraw) {
  const auto a = random_rotation(RotationRanges{}, 1234);
  const auto b = random_rotation(RotationRanges{}, 1234);
  const auto c = random_rotation(RotationRanges{}, 1235);
  EXPECT_EQ(a.rotation, b.rotation);
  EXPECT_NE(a.rotation, c.rotation);
}

TEST(RandomRotation, EmpiricalSpanMatchesRanges) {
  std::mt19937_64 rng(2024);
  Vec3 lo = Vec3::Constant(1e9), hi = Vec3::Constant(-1e9);
  for (int k = 0; k < 10000; ++k) {
    const Vec3 deg = euler_from_rotation(random_rotation(RotationRanges{}, rng).rotation) * 180.0 / std::numbers::pi;
    lo = lo.cwiseMin(deg);
    hi = hi.cwiseMax(deg);
  }
  EXPECT_NEAR(lo.x(), -25.0, 2.0);
  EXPECT_NEAR(hi.x(), 25.0, 2.0);
  EXPECT_NEAR(lo.y(), -25.0, 2.0);
  EXPECT_NEAR(hi.y(), 25.0, 2.0);
  EXPECT_NEAR(lo.z(), -180.0, 2.0);
  EXPECT_NEAR(hi.z(), 180.0, 2.0);
}

TEST(RandomRotation, InvertedRangeRejected) {
  RotationRanges r;
  r.x = {10, -10};
  EXPECT_EQ(code_of([&] { random_rotation(r, 1); }), Errc::InvalidRange);
}

// --- spatial index -------------------------------------------------------------------

TEST(SpatialIndex, MatchesLinearScanExactly) {
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    const std::size_t n = 1 + seed * 16;
    auto pts = testing_support::random_points(n, seed, 1.0);
    // snapped duplicates make ties common
    if (seed % 3 == 0)
      for (auto& p : pts) p = (p * 4.0).array().round() / 4.0;
    const SpatialIndex idx(pts);
    const auto queries = testing_support::random_points(200, seed + 100, 1.2);
    for (const auto& q : queries) {
      std::uint32_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::uint32_t i = 0; i < n; ++i) {
        const double d = (pts[i] - q).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = i;
        }
      }
      const Neighbor nb = idx.nearest(q);
      EXPECT_EQ(nb.index, best);
      EXPECT_EQ(nb.sq_distance, best_d);

      const double r = 0.3;
      std::vector<std::uint32_t> expect;
      for (std::uint32_t i = 0; i < n; ++i)
        if ((pts[i] - q).squaredNorm() <= r * r) expect.push_back(i);
      std::vector<std::uint32_t> got;
      for (const auto& x : idx.radius_search(q, r)) got.push_back(x.index);
      EXPECT_EQ(got, expect);
    }
  }
}

TEST(SpatialIndex, EmptyIndex) {
  const SpatialIndex idx;
  EXPECT_TRUE(idx.empty());
  EXPECT_TRUE(std::isinf(idx.nearest(Vec3::Zero()).sq_distance));
  EXPECT_TRUE(idx.radius_search(Vec3::Zero(), 1.0).empty());
}

TEST(PointCloud, ValidateCatchesBrokenInvariants) {
  PointCloud c;
  c.points = {Vec3::Zero(), Vec3::Ones()};
  c.normals = {Vec3::UnitZ()};
  EXPECT_EQ(code_of([&] { validate(c); }), Errc::InvalidArgument);
  c.normals = {Vec3::UnitZ(), Vec3(0, 0, 2)};
  EXPECT_EQ(code_of([&] { validate(c); }), Errc::InvalidArgument);
  c.normals = {Vec3::UnitZ(), Vec3::UnitX()};
  EXPECT_NO_THROW(validate(c));
}
