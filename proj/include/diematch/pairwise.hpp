#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "diematch/manifest.hpp"
#include "diematch/pair_registration.hpp"
#include "diematch/ply.hpp"
#include "diematch/simscore.hpp"

namespace diematch::pipeline {

using reg::Method;
using reg::PreparedScan;
using reg::RegistrationParams;

// ---------------------------------------------------------------------------
// configuration

/// Registration defaults for all-pairs runs: 1000 sampled descriptors per
/// scan keeps a pair near 40 ms on one core.
inline RegistrationParams pipeline_params() {
  RegistrationParams p;
  p.n_descriptor_samples = 1000;
  return p;
}

struct PipelineConfig {
  RegistrationParams params = pipeline_params();
  Method method = Method::Fpfh;
  std::optional<std::filesystem::path> descriptor_dir;  // external: <dir>/<scan_id>.desc
};

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Hash of every parameter that can change a pair's score, plus the model.
inline std::string fingerprint(const PipelineConfig& c, const sim::LogisticModel& model) {
  using sim::format_double;
  const RegistrationParams& p = c.params;
  std::ostringstream os;
  os << "method=" << reg::to_string(c.method) << ";robust=" << static_cast<int>(p.robust) << ";seed=" << p.seed
     << ";max_iterations=" << p.max_iterations << ";convergence_eps=" << format_double(p.convergence_eps)
     << ";match_max_distance=" << format_double(p.match_max_distance) << ";samples=" << p.n_descriptor_samples
     << ";ransac_iterations=" << p.ransac_iterations << ";inlier_threshold=" << format_double(p.inlier_threshold)
     << ";refinement_radius=" << format_double(p.refinement_radius)
     << ";refine_max_distance=" << format_double(p.refine_max_distance)
     << ";refine_max_iterations=" << p.refine_max_iterations << ";feature_radius=" << format_double(p.feature_radius)
     << ";source_voxel=" << format_double(p.source_voxel) << ";target_voxel=" << format_double(p.target_voxel)
     << ";restart_voxel=" << format_double(p.restart_voxel) << ";n_restarts=" << p.n_restarts
     << ";min_inlier_fraction=" << format_double(p.min_inlier_fraction) << ";bins=" << sim::kBins
     << ";cutoff=" << format_double(sim::kCutoff) << ";descriptors=" << (c.descriptor_dir ? c.descriptor_dir->string() : "")
     << ";model=";
  sim::write_model(os, model);
  return hex64(fnv1a(os.str()));
}

// ---------------------------------------------------------------------------
// scan sources

/// The scans of a run, addressed by position; loading is deferred so only
/// scans taking part in uncached pairs are ever read.
struct ScanSet {
  std::vector<std::string> ids;
  std::function<geom::PointCloud(std::size_t)> load;
  std::function<std::optional<std::filesystem::path>(std::size_t)> descriptors;

  std::size_t size() const noexcept { return ids.size(); }
};

inline ScanSet scans_from_manifest(const CorpusManifest& m, std::optional<std::filesystem::path> descriptor_dir = {}) {
  ScanSet s;
  s.ids = m.ids();
  s.load = [entries = m.entries()](std::size_t i) {
    geom::PointCloud c = geom::load_point_cloud(entries[i].path, true);
    c.id = entries[i].scan_id;
    return c;
  };
  s.descriptors = [ids = s.ids, descriptor_dir](std::size_t i) -> std::optional<std::filesystem::path> {
    if (!descriptor_dir) return std::nullopt;
    return *descriptor_dir / (ids[i] + ".desc");
  };
  return s;
}

inline ScanSet scans_from_clouds(std::vector<geom::PointCloud> clouds) {
  ScanSet s;
  for (const auto& c : clouds) s.ids.push_back(c.id);
  s.load = [shared = std::make_shared<const std::vector<geom::PointCloud>>(std::move(clouds))](std::size_t i) {
    return (*shared)[i];
  };
  s.descriptors = [](std::size_t) { return std::optional<std::filesystem::path>{}; };
  return s;
}

// ---------------------------------------------------------------------------
// scheduling and the worker pool

using PairIndex = std::pair<std::uint32_t, std::uint32_t>;

/// Every unordered pair of `n` scans as (i, j), i < j, in lexicographic order.
inline std::vector<PairIndex> schedule_pairs(std::size_t n) {
  std::vector<PairIndex> out;
  out.reserve(n * (n - (n > 0)) / 2);
  for (std::uint32_t i = 0; i < n; ++i)
    for (std::uint32_t j = i + 1; j < n; ++j) out.emplace_back(i, j);
  return out;
}

/// Positions of `ids` in ascending id order: pairs are always formed between
/// sorted positions so the smaller id is the registration source.
inline std::vector<std::uint32_t> sorted_order(const std::vector<std::string>& ids) {
  std::vector<std::uint32_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return ids[a] < ids[b]; });
  for (std::size_t k = 1; k < order.size(); ++k)
    if (ids[order[k]] == ids[order[k - 1]]) throw Error(Errc::InvalidArgument, "duplicate scan id '" + ids[order[k]] + "'");
  return order;
}

inline unsigned default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

/// Runs fn(i) for i in [0, n) on `workers` threads pulling from a shared
/// counter. `fn` must not throw.
template <class Fn>
void parallel_for(std::size_t n, unsigned workers, Fn&& fn) {
  workers = std::max(1u, workers);
  if (workers == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
}

// ---------------------------------------------------------------------------
// records and the cache

struct PairRecord {
  std::string id_a, id_b;
  bool ok = false;
  double probability = 0.0;
  double rmse = 0.0;
  double seconds = 0.0;
  geom::RigidTransform transform;
  std::string stage;    // failures only
  std::string message;  // failures only

  /// Equality of everything except timing.
  bool same_result(const PairRecord& o) const {
    return id_a == o.id_a && id_b == o.id_b && ok == o.ok && probability == o.probability && rmse == o.rmse &&
           transform.rotation == o.transform.rotation && transform.translation == o.transform.translation &&
           stage == o.stage && message == o.message;
  }
};

inline nlohmann::json to_json(const PairRecord& r) {
  nlohmann::json j;
  j["a"] = r.id_a;
  j["b"] = r.id_b;
  j["ok"] = r.ok;
  if (r.ok) {
    j["p"] = r.probability;
    j["rmse"] = r.rmse;
    std::vector<double> t;
    for (int row = 0; row < 3; ++row)
      for (int col = 0; col < 3; ++col) t.push_back(r.transform.rotation(row, col));
    for (int k = 0; k < 3; ++k) t.push_back(r.transform.translation[k]);
    j["T"] = t;
  } else {
    j["stage"] = r.stage;
    j["msg"] = r.message;
  }
  j["s"] = r.seconds;
  return j;
}

inline PairRecord record_from_json(const nlohmann::json& j) {
  PairRecord r;
  r.id_a = j.at("a").get<std::string>();
  r.id_b = j.at("b").get<std::string>();
  r.ok = j.at("ok").get<bool>();
  r.seconds = j.at("s").get<double>();
  if (r.ok) {
    r.probability = j.at("p").get<double>();
    r.rmse = j.at("rmse").get<double>();
    const auto t = j.at("T").get<std::vector<double>>();
    if (t.size() != 12) throw Error(Errc::ParseError, "cached transform needs 12 numbers");
    for (int row = 0; row < 3; ++row)
      for (int col = 0; col < 3; ++col) r.transform.rotation(row, col) = t[static_cast<std::size_t>(3 * row + col)];
    r.transform.translation = geom::Vec3(t[9], t[10], t[11]);
  } else {
    r.stage = j.at("stage").get<std::string>();
    r.message = j.at("msg").get<std::string>();
  }
  return r;
}

/// Append-only JSON-lines cache of pair records. The first line carries the
/// config fingerprint; a file written under another fingerprint is discarded
/// on open. An unparseable line (typically a torn last write) is skipped.
class PairCache {
 public:
  PairCache(std::filesystem::path path, std::string fingerprint) : path_(std::move(path)), fingerprint_(std::move(fingerprint)) {
    load();
    out_.open(path_, std::ios::binary | std::ios::app);
    if (!out_) throw Error(Errc::IoError, "cannot open cache " + path_.string());
  }

  PairCache(const PairCache&) = delete;
  PairCache& operator=(const PairCache&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }
  const std::string& fingerprint() const noexcept { return fingerprint_; }
  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t discarded() const noexcept { return discarded_; }
  std::size_t skipped_lines() const noexcept { return skipped_lines_; }

  std::optional<PairRecord> lookup(const std::string& a, const std::string& b) const {
    std::lock_guard lock(mutex_);
    const auto it = entries_.find(key(a, b));
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  void put(const PairRecord& r) {
    const std::string line = to_json(r).dump() + "\n";
    std::lock_guard lock(mutex_);
    out_ << line;
    out_.flush();
    entries_.insert_or_assign(key(r.id_a, r.id_b), r);
  }

 private:
  static std::string key(const std::string& a, const std::string& b) { return a + '\n' + b; }

  std::string header() const { return nlohmann::json{{"diematch_cache", 1}, {"fingerprint", fingerprint_}}.dump(); }

  void load() {
    bool valid = false;
    bool needs_newline = false;
    if (std::ifstream is{path_, std::ios::binary}) {
      std::string line;
      if (std::getline(is, line)) {
        try {
          const auto h = nlohmann::json::parse(line);
          valid = h.value("fingerprint", std::string{}) == fingerprint_;
        } catch (const nlohmann::json::exception&) {
          valid = false;
        }
        while (valid && std::getline(is, line)) {
          needs_newline = is.eof();
          if (line.empty()) continue;
          try {
            PairRecord r = record_from_json(nlohmann::json::parse(line));
            entries_.insert_or_assign(key(r.id_a, r.id_b), std::move(r));
          } catch (const std::exception&) {
            ++skipped_lines_;
          }
        }
        if (!valid) ++discarded_;
      }
    }
    if (!valid) {
      entries_.clear();
      std::ofstream os(path_, std::ios::binary | std::ios::trunc);
      if (!os) throw Error(Errc::IoError, "cannot create cache " + path_.string());
      os << header() << '\n';
    } else if (needs_newline) {
      std::ofstream(path_, std::ios::binary | std::ios::app) << '\n';
    }
  }

  std::filesystem::path path_;
  std::string fingerprint_;
  std::unordered_map<std::string, PairRecord> entries_;
  std::size_t discarded_ = 0;
  std::size_t skipped_lines_ = 0;
  mutable std::mutex mutex_;
  std::ofstream out_;
};

// ---------------------------------------------------------------------------
// pair evaluation

/// Per-scan preparation outcome: the prepared scan or the error that stopped it.
struct PreparedSlot {
  std::optional<PreparedScan> scan;
  std::string stage;
  std::string message;
};

inline PreparedSlot prepare_slot(const ScanSet& scans, std::size_t i, const PipelineConfig& config) {
  PreparedSlot slot;
  try {
    geom::PointCloud cloud;
    try {
      cloud = scans.load(i);
    } catch (const Error& e) {
      throw e.with_stage("load");
    }
    cloud.id = scans.ids[i];
    reg::PrepareOptions opt;
    opt.fpfh = config.method == Method::Fpfh;
    opt.restart_grid = config.method == Method::IcpRand;
    if (config.method == Method::External) {
      opt.external_descriptors = scans.descriptors ? scans.descriptors(i) : std::nullopt;
      if (!opt.external_descriptors)
        throw Error(Errc::IoError, "no descriptor file configured for " + scans.ids[i], "descriptors");
    }
    slot.scan = reg::prepare_scan(cloud, config.params, opt);
  } catch (const Error& e) {
    slot.stage = e.stage().empty() ? "prepare" : e.stage();
    slot.message = e.what();
  } catch (const std::exception& e) {
    slot.stage = "prepare";
    slot.message = e.what();
  }
  return slot;
}

/// Registers `a` onto `b` and scores the result. Never throws: failures come
/// back as records with a stage tag.
inline PairRecord evaluate_pair(const PreparedSlot& a, const PreparedSlot& b, const std::string& id_a,
                                const std::string& id_b, const PipelineConfig& config, const sim::LogisticModel& model,
                                sim::PairScore* detail = nullptr) {
  PairRecord r;
  r.id_a = id_a;
  r.id_b = id_b;
  reg::StageClock clock;
  const PreparedSlot* bad = !a.scan ? &a : !b.scan ? &b : nullptr;
  if (bad) {
    r.stage = bad->stage;
    r.message = bad->message;
    return r;
  }
  try {
    const reg::RegistrationResult res = reg::register_prepared(*a.scan, *b.scan, config.method, config.params);
    sim::PairScore s = sim::score_pair(*a.scan, *b.scan, res, model);
    r.ok = true;
    r.probability = s.probability;
    r.rmse = s.rmse;
    r.transform = s.transform;
    if (detail) *detail = std::move(s);
  } catch (const Error& e) {
    r.stage = e.stage().empty() ? "score" : e.stage();
    r.message = e.what();
  } catch (const std::exception& e) {
    r.stage = "internal";
    r.message = e.what();
  }
  r.seconds = clock.lap();
  return r;
}

struct PairwiseOptions {
  unsigned workers = 0;  // 0: one per hardware thread
  PairCache* cache = nullptr;
  double spot_check_fraction = 0.01;
  std::uint64_t spot_check_seed = 0;
  std::optional<std::vector<PairIndex>> pairs;  // positions in the ScanSet; default all pairs
};

struct PairwiseReport {
  std::vector<PairRecord> records;  // canonical order
  std::size_t computed = 0;
  std::size_t cache_hits = 0;
  std::size_t failures = 0;
  std::size_t spot_checked = 0;
  std::size_t spot_mismatches = 0;
  double wall_seconds = 0.0;
};

/// Scores every scheduled pair. Scans are prepared once each, pairs are
/// evaluated share-nothing on the pool, and results land in preassigned slots
/// so output order never depends on completion order.
inline PairwiseReport run_pairwise(const ScanSet& scans, const sim::LogisticModel& model, const PipelineConfig& config,
                                   const PairwiseOptions& options = {}) {
  reg::StageClock wall;
  const unsigned workers = options.workers ? options.workers : default_workers();
  const auto order = sorted_order(scans.ids);

  // pairs as (source, target) ScanSet positions, smaller id first, sorted canonically
  std::vector<PairIndex> pairs;
  if (options.pairs) {
    for (auto [i, j] : *options.pairs) {
      if (i >= scans.size() || j >= scans.size() || i == j) throw Error(Errc::IndexOutOfRange, "bad pair index");
      if (scans.ids[j] < scans.ids[i]) std::swap(i, j);
      pairs.emplace_back(i, j);
    }
    std::sort(pairs.begin(), pairs.end(), [&](const PairIndex& x, const PairIndex& y) {
      return std::tie(scans.ids[x.first], scans.ids[x.second]) < std::tie(scans.ids[y.first], scans.ids[y.second]);
    });
    if (std::adjacent_find(pairs.begin(), pairs.end()) != pairs.end()) throw Error(Errc::DuplicatePair, "pair listed twice");
  } else {
    for (const auto& [i, j] : schedule_pairs(scans.size())) pairs.emplace_back(order[i], order[j]);
  }

  PairwiseReport report;
  report.records.resize(pairs.size());
  std::vector<char> hit(pairs.size(), 0);
  if (options.cache) {
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      if (auto r = options.cache->lookup(scans.ids[pairs[k].first], scans.ids[pairs[k].second])) {
        report.records[k] = std::move(*r);
        hit[k] = 1;
        ++report.cache_hits;
      }
    }
  }

  // a deterministic sample of cache hits is recomputed to catch stale entries
  std::vector<char> spot(pairs.size(), 0);
  if (report.cache_hits > 0 && options.spot_check_fraction > 0.0) {
    std::vector<std::size_t> hits;
    for (std::size_t k = 0; k < pairs.size(); ++k)
      if (hit[k]) hits.push_back(k);
    const auto want = std::min(hits.size(), static_cast<std::size_t>(std::ceil(options.spot_check_fraction * static_cast<double>(hits.size()))));
    std::mt19937_64 rng(options.spot_check_seed);
    std::shuffle(hits.begin(), hits.end(), rng);
    for (std::size_t k = 0; k < want; ++k) spot[hits[k]] = 1;
  }

  std::vector<char> needed(scans.size(), 0);
  for (std::size_t k = 0; k < pairs.size(); ++k)
    if (!hit[k] || spot[k]) needed[pairs[k].first] = needed[pairs[k].second] = 1;
  std::vector<std::size_t> to_prepare;
  for (std::size_t i = 0; i < scans.size(); ++i)
    if (needed[i]) to_prepare.push_back(i);
  std::vector<PreparedSlot> prepared(scans.size());
  parallel_for(to_prepare.size(), workers, [&](std::size_t k) {
    prepared[to_prepare[k]] = prepare_slot(scans, to_prepare[k], config);
  });

  std::vector<std::size_t> work;
  for (std::size_t k = 0; k < pairs.size(); ++k)
    if (!hit[k] || spot[k]) work.push_back(k);
  std::atomic<std::size_t> mismatches{0};
  parallel_for(work.size(), workers, [&](std::size_t w) {
    const std::size_t k = work[w];
    const auto [i, j] = pairs[k];
    PairRecord r = evaluate_pair(prepared[i], prepared[j], scans.ids[i], scans.ids[j], config, model);
    if (hit[k]) {
      if (!r.same_result(report.records[k])) {
        ++mismatches;
        report.records[k] = std::move(r);
        if (options.cache) options.cache->put(report.records[k]);
      }
      return;
    }
    if (options.cache) options.cache->put(r);
    report.records[k] = std::move(r);
  });

  report.spot_checked = static_cast<std::size_t>(std::count(spot.begin(), spot.end(), 1));
  report.spot_mismatches = mismatches;
  report.computed = pairs.size() - report.cache_hits;
  for (const auto& r : report.records) report.failures += !r.ok;
  report.wall_seconds = wall.lap();
  return report;
}

// ---------------------------------------------------------------------------
// outputs

/// Successful pairs as score rows. `reproducible` zeroes the timing column,
/// the only field that varies between identical runs.
inline std::vector<sim::ScoreRow> score_rows(const std::vector<PairRecord>& records, bool reproducible = false) {
  std::vector<sim::ScoreRow> rows;
  for (const auto& r : records)
    if (r.ok) rows.push_back({r.id_a, r.id_b, r.probability, r.rmse, reproducible ? 0.0 : r.seconds});
  return rows;
}

inline std::string csv_field(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

inline void write_failures_csv(std::ostream& os, const std::vector<PairRecord>& records) {
  os << "id_a,id_b,stage,error\n";
  for (const auto& r : records)
    if (!r.ok) os << r.id_a << ',' << r.id_b << ',' << csv_field(r.stage) << ',' << csv_field(r.message) << '\n';
}

// ---------------------------------------------------------------------------
// training data

/// Histograms for labeled pairs (positions in `scans`); pairs whose
/// registration fails come back empty.
inline std::vector<std::optional<sim::DistanceHistogram>> pair_histograms(const ScanSet& scans,
                                                                          const std::vector<PairIndex>& pairs,
                                                                          const PipelineConfig& config,
                                                                          unsigned workers = 0) {
  if (!workers) workers = default_workers();
  std::vector<char> needed(scans.size(), 0);
  for (const auto& [i, j] : pairs) {
    if (i >= scans.size() || j >= scans.size() || i == j) throw Error(Errc::IndexOutOfRange, "bad pair index");
    needed[i] = needed[j] = 1;
  }
  std::vector<std::size_t> to_prepare;
  for (std::size_t i = 0; i < scans.size(); ++i)
    if (needed[i]) to_prepare.push_back(i);
  std::vector<PreparedSlot> prepared(scans.size());
  parallel_for(to_prepare.size(), workers, [&](std::size_t k) {
    prepared[to_prepare[k]] = prepare_slot(scans, to_prepare[k], config);
  });
  const sim::LogisticModel unused;
  std::vector<std::optional<sim::DistanceHistogram>> out(pairs.size());
  parallel_for(pairs.size(), workers, [&](std::size_t k) {
    auto [i, j] = pairs[k];
    if (scans.ids[j] < scans.ids[i]) std::swap(i, j);
    sim::PairScore s;
    if (evaluate_pair(prepared[i], prepared[j], scans.ids[i], scans.ids[j], config, unused, &s).ok) out[k] = s.histogram;
  });
  return out;
}

}  // namespace diematch::pipeline
