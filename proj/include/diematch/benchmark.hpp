#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "diematch/corpus.hpp"
#include "diematch/evalmetrics.hpp"
#include "diematch/pairwise.hpp"

namespace diematch::pipeline {

/// A scan with the ground truth the benchmark needs.
struct BenchmarkScan {
  std::string id;
  std::string die_id;
  Face face = Face::ObverseNoBeard;
  geom::PointCloud cloud;
  geom::RigidTransform pose;  // die frame -> scan frame
  std::optional<std::filesystem::path> descriptors;
};

inline std::vector<BenchmarkScan> benchmark_scans(const SyntheticCorpus& corpus) {
  std::vector<BenchmarkScan> out;
  for (const auto& s : corpus.scans) out.push_back({s.id, s.die_id, s.face, s.cloud, s.pose, std::nullopt});
  return out;
}

/// Scans of a manifest; every entry must carry a die id and a pose.
inline std::vector<BenchmarkScan> benchmark_scans(const CorpusManifest& m,
                                                  const std::optional<std::filesystem::path>& descriptor_dir = {}) {
  std::vector<BenchmarkScan> out;
  for (const auto& e : m.entries()) {
    if (!e.die_id || !e.pose)
      throw Error(Errc::InvalidArgument, "benchmark needs die id and pose for scan '" + e.scan_id + "'", "manifest");
    BenchmarkScan s{e.scan_id, *e.die_id, e.face, geom::load_point_cloud(e.path, true), *e.pose, std::nullopt};
    s.cloud.id = e.scan_id;
    if (descriptor_dir) s.descriptors = *descriptor_dir / (e.scan_id + ".desc");
    out.push_back(std::move(s));
  }
  return out;
}

struct BenchmarkOptions {
  std::vector<std::string> methods{"fpfh"};  // gt, icp_rand, fpfh, external
  RegistrationParams params{};
  unsigned workers = 0;
};

struct BenchmarkPair {
  std::string method;
  std::string die_id;
  std::string id_a, id_b;
  double sre = 0.0;
  double rotation_deg = 0.0;  // magnitude of the ground-truth relative rotation
  bool failed = false;
  std::string error;
  double seconds = 0.0;
};

struct BenchmarkResult {
  std::vector<eval::MethodRow> rows;
  std::vector<BenchmarkPair> pairs;
};

/// Registers every intra-die pair (smaller id as source) with each method
/// and scores it by SRE on the source grid. A failed registration is scored
/// as the identity estimate and flagged.
inline BenchmarkResult run_registration_benchmark(const std::vector<BenchmarkScan>& scans,
                                                  const BenchmarkOptions& options) {
  const unsigned workers = options.workers ? options.workers : default_workers();
  std::vector<std::size_t> order(scans.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scans[a].id < scans[b].id; });

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t x = 0; x < order.size(); ++x)
    for (std::size_t y = x + 1; y < order.size(); ++y)
      if (scans[order[x]].die_id == scans[order[y]].die_id) pairs.emplace_back(order[x], order[y]);

  std::map<std::string, std::string> category_of;
  for (const auto& s : scans) category_of.emplace(s.die_id, std::string(category(s.face)));

  BenchmarkResult result;
  for (const auto& name : options.methods) {
    const bool gt = name == "gt";
    const Method method = gt ? Method::Fpfh : reg::parse_method(name);

    // per-scan preparation, timed so each pair can be charged its two scans
    std::vector<PreparedSlot> prepared(scans.size());
    std::vector<double> prep_seconds(scans.size(), 0.0);
    {
      reg::PrepareOptions opt;
      opt.fpfh = !gt && method == Method::Fpfh;
      opt.restart_grid = !gt && method == Method::IcpRand;
      parallel_for(scans.size(), workers, [&](std::size_t i) {
        reg::StageClock clock;
        reg::PrepareOptions o = opt;
        if (!gt && method == Method::External) o.external_descriptors = scans[i].descriptors;
        try {
          if (!gt && method == Method::External && !o.external_descriptors)
            throw Error(Errc::IoError, "no descriptor file for " + scans[i].id, "descriptors");
          prepared[i].scan = reg::prepare_scan(scans[i].cloud, options.params, o);
        } catch (const std::exception& e) {
          prepared[i].message = e.what();
        }
        prep_seconds[i] = clock.lap();
      });
    }

    std::vector<BenchmarkPair> rows(pairs.size());
    parallel_for(pairs.size(), workers, [&](std::size_t k) {
      const auto [i, j] = pairs[k];
      BenchmarkPair& out = rows[k];
      out.method = name;
      out.die_id = scans[i].die_id;
      out.id_a = scans[i].id;
      out.id_b = scans[j].id;
      const geom::RigidTransform truth = relative_pose(scans[i].pose, scans[j].pose);
      out.rotation_deg = geom::rad2deg(geom::rotation_angle_between(truth.rotation, geom::Mat3::Identity()));
      const std::vector<geom::Vec3>& grid =
          prepared[i].scan ? prepared[i].scan->source_grid.points : scans[i].cloud.points;
      geom::RigidTransform estimate;
      reg::StageClock clock;
      try {
        if (!prepared[i].scan) throw Error(Errc::InvalidArgument, prepared[i].message);
        if (!prepared[j].scan) throw Error(Errc::InvalidArgument, prepared[j].message);
        estimate = gt ? truth : reg::register_prepared(*prepared[i].scan, *prepared[j].scan, method, options.params).transform;
      } catch (const std::exception& e) {
        out.failed = true;
        out.error = e.what();
        estimate = geom::RigidTransform{};
      }
      out.seconds = clock.lap() + prep_seconds[i] + prep_seconds[j];
      out.sre = eval::sre(grid, truth, estimate);
    });

    std::map<std::string, std::vector<double>> per_die;
    eval::MethodRow row;
    row.method = name;
    double seconds = 0.0;
    for (const auto& p : rows) {
      per_die[p.die_id].push_back(p.sre);
      row.failures += p.failed;
      seconds += p.seconds;
    }
    row.report = eval::aggregate_sre(per_die, category_of);
    row.seconds_per_pair = rows.empty() ? 0.0 : seconds / static_cast<double>(rows.size());
    result.rows.push_back(std::move(row));
    result.pairs.insert(result.pairs.end(), rows.begin(), rows.end());
  }
  return result;
}

}  // namespace diematch::pipeline
