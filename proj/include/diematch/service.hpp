#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "httplib.h"
#include "json.hpp"

#include "diematch/diegraph.hpp"
#include "diematch/pairwise.hpp"

namespace diematch::service {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

struct ServiceConfig {
  fs::path graph_path;
  std::optional<fs::path> manifest_path;  // enables pair detail, preview and point endpoints
  std::optional<fs::path> model_path;
  std::optional<fs::path> cache_path;     // pair cache with stored transforms
  std::optional<fs::path> ui_dir;         // static bundle served under /ui
  std::string token;                      // empty: the service is read-only
  pipeline::PipelineConfig pipeline{};
  std::size_t max_points = 20000;         // per cloud returned for display
};

/// Resolves unset paths from DIEMATCH_DATA_DIR (graph.json, manifest.csv,
/// model.txt) and DIEMATCH_CACHE_DIR (pairs.jsonl).
inline void apply_environment(ServiceConfig& c) {
  if (const char* data = std::getenv("DIEMATCH_DATA_DIR"); data && *data) {
    const fs::path dir(data);
    if (c.graph_path.empty()) c.graph_path = dir / "graph.json";
    if (!c.manifest_path && fs::exists(dir / "manifest.csv")) c.manifest_path = dir / "manifest.csv";
    if (!c.model_path && fs::exists(dir / "model.txt")) c.model_path = dir / "model.txt";
  }
  if (const char* cache = std::getenv("DIEMATCH_CACHE_DIR"); cache && *cache) {
    const fs::path p = fs::path(cache) / "pairs.jsonl";
    if (!c.cache_path && fs::exists(p)) c.cache_path = p;
  }
}

/// HTTP front end over a persisted similarity graph. Reads take an immutable
/// snapshot; edits are serialized through one writer, persisted and
/// journaled before the new snapshot is published.
class DieService {
 public:
  explicit DieService(ServiceConfig config) : config_(std::move(config)) {
    snapshot_ = std::make_shared<const graph::SimilarityGraph>(graph::load_graph(config_.graph_path));
    if (config_.manifest_path) manifest_ = pipeline::CorpusManifest::load(*config_.manifest_path, false);
    if (config_.model_path) model_ = sim::load_model(*config_.model_path);
    if (config_.cache_path) load_cache_records();
    routes();
  }

  DieService(const DieService&) = delete;
  DieService& operator=(const DieService&) = delete;

  ~DieService() { stop(); }

  /// Binds and serves on a background thread; returns the bound port
  /// (`port` 0 picks a free one).
  int start(const std::string& host, int port) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw Error(Errc::IoError, "cannot bind " + host + ":" + std::to_string(port), "serve");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return bound;
  }

  /// Blocks serving on the calling thread.
  void run(const std::string& host, int port) {
    if (!server_.listen(host, port)) throw Error(Errc::IoError, "cannot listen on " + host + ":" + std::to_string(port), "serve");
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  std::shared_ptr<const graph::SimilarityGraph> snapshot() const {
    std::lock_guard lock(snapshot_mutex_);
    return snapshot_;
  }

 private:
  // -- helpers --------------------------------------------------------------

  static void send_json(httplib::Response& res, const json& body, int status = 200) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, int status, std::string_view code, const std::string& message) {
    send_json(res, json{{"error", {{"code", code}, {"message", message}}}}, status);
  }

  static int status_for(Errc e) {
    switch (e) {
      case Errc::UnknownNode: return 404;
      case Errc::IoError: return 500;
      default: return 400;
    }
  }

  template <class Fn>
  httplib::Server::Handler guarded(Fn fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const Error& e) {
        send_error(res, status_for(e.code()), to_string(e.code()), e.what());
      } catch (const json::exception& e) {
        send_error(res, 400, "ParseError", e.what());
      } catch (const std::exception& e) {
        send_error(res, 500, "Internal", e.what());
      }
    };
  }

  bool authorized(const httplib::Request& req, httplib::Response& res) const {
    if (config_.token.empty()) {
      send_error(res, 403, "ReadOnly", "service started without a token; edits are disabled");
      return false;
    }
    if (req.get_header_value("Authorization") != "Bearer " + config_.token) {
      res.set_header("WWW-Authenticate", "Bearer");
      send_error(res, 401, "Unauthorized", "missing or wrong bearer token");
      return false;
    }
    return true;
  }

  static double tau_param(const httplib::Request& req) {
    if (!req.has_param("tau")) return 0.95;
    const std::string s = req.get_param_value("tau");
    const double tau = sim::parse_double(s, "tau");
    if (!(tau >= 0.0 && tau <= 1.0)) throw Error(Errc::InvalidArgument, "tau must lie in [0,1]");
    return tau;
  }

  const pipeline::ManifestEntry& entry(const std::string& id) const {
    if (!manifest_) throw Error(Errc::InvalidArgument, "service started without a manifest");
    return manifest_->find(id);
  }

  geom::PointCloud load_scan(const std::string& id) const {
    geom::PointCloud c = geom::load_point_cloud(entry(id).path, true);
    c.id = id;
    return c;
  }

  static json points_json(const std::vector<geom::Vec3>& pts) {
    json a = json::array();
    for (const auto& p : pts) a.push_back({p.x(), p.y(), p.z()});
    return a;
  }

  geom::PointCloud display_cloud(const geom::PointCloud& c, double voxel) const {
    geom::PointCloud d = geom::voxel_downsample(c, voxel);
    while (d.size() > config_.max_points) {
      voxel *= 1.5;
      d = geom::voxel_downsample(c, voxel);
    }
    return d;
  }

  void load_cache_records() {
    std::ifstream is(*config_.cache_path, std::ios::binary);
    std::string line;
    std::getline(is, line);  // fingerprint header
    while (std::getline(is, line)) {
      try {
        pipeline::PairRecord r = pipeline::record_from_json(nlohmann::json::parse(line));
        records_.insert_or_assign(r.id_a + '\n' + r.id_b, std::move(r));
      } catch (const std::exception&) {
        // torn line
      }
    }
  }

  void publish_edit(const std::string& a, const std::string& b, graph::Edit edit, const std::string& author,
                    std::optional<std::uint64_t> expected_version, httplib::Response& res) {
    std::lock_guard writer(writer_mutex_);
    auto current = snapshot();
    if (expected_version && *expected_version != current->version()) {
      send_json(res,
                json{{"error", {{"code", "Conflict"}, {"message", "graph version changed"}}},
                     {"version", current->version()}},
                409);
      return;
    }
    graph::SimilarityGraph next = graph::apply_edit(*current, a, b, edit, author);
    graph::save_graph(config_.graph_path, next);
    const graph::JournalEntry j = next.journal().back();
    {
      std::ofstream journal(config_.graph_path.string() + ".journal.jsonl", std::ios::binary | std::ios::app);
      journal << json{{"version", j.version}, {"a", j.pair.a}, {"b", j.pair.b}, {"edit", graph::to_string(j.edit)},
                      {"author", j.author}, {"ts", j.ts}}.dump()
              << '\n';
    }
    auto published = std::make_shared<const graph::SimilarityGraph>(std::move(next));
    {
      std::lock_guard lock(snapshot_mutex_);
      snapshot_ = published;
    }
    send_json(res, json{{"version", j.version}, {"a", j.pair.a}, {"b", j.pair.b}, {"edit", graph::to_string(j.edit)},
                        {"author", j.author}, {"ts", j.ts}});
  }

  // -- routes ---------------------------------------------------------------

  void routes() {
    server_.Get("/api/graph", guarded([this](const httplib::Request&, httplib::Response& res) {
      send_json(res, graph::to_json(*snapshot()));
    }));

    server_.Get("/api/clusters", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto g = snapshot();
      const graph::Clustering c = graph::cluster(*g, tau_param(req));
      json clusters = json::array();
      const auto groups = c.members();
      for (std::size_t k = 0; k < groups.size(); ++k) clusters.push_back({{"id", k}, {"members", groups[k]}});
      send_json(res, json{{"version", g->version()}, {"tau", c.tau}, {"cluster_count", groups.size()},
                          {"clusters", std::move(clusters)}});
    }));

    server_.Get("/api/clusters/export", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto format = graph::parse_format(req.has_param("format") ? req.get_param_value("format") : "csv");
      const auto g = snapshot();
      res.set_header("X-Graph-Version", std::to_string(g->version()));
      res.set_header("Content-Disposition", std::string("attachment; filename=\"clusters.") +
                                                (format == graph::ExportFormat::Csv ? "csv" : "json") + "\"");
      res.set_content(graph::export_clusters(graph::cluster(*g, tau_param(req)), format),
                      format == graph::ExportFormat::Csv ? "text/csv" : "application/json");
    }));

    server_.Post("/api/edits", guarded([this](const httplib::Request& req, httplib::Response& res) {
      if (!authorized(req, res)) return;
      const json body = json::parse(req.body);
      std::optional<std::uint64_t> version;
      if (body.contains("version")) version = body.at("version").get<std::uint64_t>();
      publish_edit(body.at("a").get<std::string>(), body.at("b").get<std::string>(),
                   graph::parse_edit(body.at("edit").get<std::string>()), body.value("author", std::string{}), version,
                   res);
    }));

    server_.Delete("/api/edits/:a/:b", guarded([this](const httplib::Request& req, httplib::Response& res) {
      if (!authorized(req, res)) return;
      publish_edit(req.path_params.at("a"), req.path_params.at("b"), graph::Edit::Clear,
                   req.has_param("author") ? req.get_param_value("author") : std::string{}, std::nullopt, res);
    }));

    server_.Get("/api/pairs/:a/:b", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto g = snapshot();
      const auto key = graph::make_key(req.path_params.at("a"), req.path_params.at("b"));
      json out{{"a", key.a}, {"b", key.b}, {"version", g->version()}};
      const auto p = g->probability(key.a, key.b);
      out["probability"] = p ? json(*p) : json(nullptr);
      const auto o = g->overlay(key.a, key.b);
      out["overlay"] = o ? json{{"edit", graph::to_string(o->edit)}, {"author", o->author}, {"ts", o->ts}} : json(nullptr);
      if (const auto it = records_.find(key.a + '\n' + key.b); it != records_.end()) {
        const pipeline::PairRecord& r = it->second;
        out["ok"] = r.ok;
        if (r.ok) {
          out["rmse"] = r.rmse;
          out["transform"] = transform_json(r.transform);
          if (manifest_) {
            // histogram recomputed from the stored transform
            const auto& params = config_.pipeline.params;
            const geom::PointCloud src = geom::voxel_downsample(load_scan(key.a), params.source_voxel);
            const geom::PointCloud dst = geom::voxel_downsample(load_scan(key.b), params.target_voxel);
            const auto h = sim::histogram(sim::cloud_to_cloud(src, dst, r.transform));
            out["histogram"] = {{"bin_width", sim::DistanceHistogram::bin_width()}, {"bins", h.bins}};
          }
        } else {
          out["stage"] = r.stage;
          out["error"] = r.message;
        }
      }
      if (!p && !o && !out.contains("ok")) {
        send_error(res, 404, "UnknownPair", "no score for pair " + key.a + "," + key.b);
        return;
      }
      send_json(res, out);
    }));

    server_.Post("/api/pairs/:a/:b/preview", guarded([this](const httplib::Request& req, httplib::Response& res) {
      if (!authorized(req, res)) return;
      bool expected = false;
      if (!preview_busy_.compare_exchange_strong(expected, true)) {
        res.set_header("Retry-After", "1");
        send_error(res, 429, "Busy", "a preview registration is already running");
        return;
      }
      struct Release {
        std::atomic<bool>& flag;
        ~Release() { flag = false; }
      } release{preview_busy_};

      const auto key = graph::make_key(req.path_params.at("a"), req.path_params.at("b"));
      const pipeline::PipelineConfig& pc = config_.pipeline;
      const geom::PointCloud a = load_scan(key.a), b = load_scan(key.b);
      reg::PrepareOptions opt;
      opt.fpfh = pc.method == reg::Method::Fpfh;
      opt.restart_grid = pc.method == reg::Method::IcpRand;
      reg::PreparedScan pa = reg::prepare_scan(a, pc.params, opt);
      reg::PreparedScan pb = reg::prepare_scan(b, pc.params, opt);
      const reg::RegistrationResult r = reg::register_prepared(pa, pb, pc.method, pc.params);
      const sim::PairScore s = sim::score_pair(pa, pb, r, model_ ? *model_ : sim::LogisticModel{});
      const double voxel = req.has_param("voxel") ? sim::parse_double(req.get_param_value("voxel"), "voxel") : 0.1;
      json out{{"a", key.a},
               {"b", key.b},
               {"transform", transform_json(s.transform)},
               {"rmse", r.rmse},
               {"converged", r.converged},
               {"histogram", {{"bin_width", sim::DistanceHistogram::bin_width()}, {"bins", s.histogram.bins}}}};
      out["probability"] = model_ ? json(s.probability) : json(nullptr);
      // a is shown moved into b's frame
      out["points_a"] = points_json(geom::apply_transform(display_cloud(a, voxel), s.transform).points);
      out["points_b"] = points_json(display_cloud(b, voxel).points);
      send_json(res, out);
    }));

    server_.Get("/api/scans/:id/points", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const double voxel = req.has_param("voxel") ? sim::parse_double(req.get_param_value("voxel"), "voxel") : 0.1;
      if (!(voxel > 0.0)) throw Error(Errc::NonPositiveVoxel, "voxel must be positive");
      const geom::PointCloud d = display_cloud(load_scan(req.path_params.at("id")), voxel);
      send_json(res, json{{"id", req.path_params.at("id")}, {"count", d.size()}, {"points", points_json(d.points)}});
    }));

    if (config_.ui_dir && fs::is_directory(*config_.ui_dir)) server_.set_mount_point("/ui", config_.ui_dir->string());
  }

  static json transform_json(const geom::RigidTransform& t) {
    json rot = json::array();
    for (int r = 0; r < 3; ++r) rot.push_back({t.rotation(r, 0), t.rotation(r, 1), t.rotation(r, 2)});
    return json{{"rotation", rot}, {"translation", {t.translation.x(), t.translation.y(), t.translation.z()}}};
  }

  ServiceConfig config_;
  httplib::Server server_;
  std::thread thread_;
  mutable std::mutex snapshot_mutex_;
  std::mutex writer_mutex_;
  std::shared_ptr<const graph::SimilarityGraph> snapshot_;
  std::optional<pipeline::CorpusManifest> manifest_;
  std::optional<sim::LogisticModel> model_;
  std::unordered_map<std::string, pipeline::PairRecord> records_;
  std::atomic<bool> preview_busy_{false};
};

}  // namespace diematch::service
