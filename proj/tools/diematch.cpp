// Command-line front end: corpus ingestion, training, all-pairs scoring,
// clustering, registration benchmark, synthetic data, metrics and the service.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"

#include "diematch/benchmark.hpp"
#include "diematch/corpus.hpp"
#include "diematch/diegraph.hpp"
#include "diematch/evalmetrics.hpp"
#include "diematch/manifest.hpp"
#include "diematch/pairwise.hpp"
#include "diematch/service.hpp"

namespace fs = std::filesystem;
using namespace diematch;

namespace {

std::string env_or(const char* name, std::string fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(Errc::IoError, "cannot write " + path);
  os << text;
}

std::string read_text(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::IoError, "cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct RegFlags {
  int samples = pipeline::pipeline_params().n_descriptor_samples;
  std::string robust = "clique";
  std::uint64_t seed = 0;
  std::string method = "fpfh";
  std::string descriptors;

  void add(CLI::App* app) {
    app->add_option("--samples", samples, "descriptors sampled per scan for matching")->check(CLI::PositiveNumber);
    app->add_option("--robust", robust, "robust estimator: ransac or clique")->check(CLI::IsMember({"ransac", "clique", "teaser"}));
    app->add_option("--seed", seed, "registration seed");
    app->add_option("--method", method, "registration method")->check(CLI::IsMember({"fpfh", "icp_rand", "external"}));
    app->add_option("--descriptors", descriptors, "directory of <scan_id>.desc files for the external method");
  }

  pipeline::PipelineConfig config() const {
    pipeline::PipelineConfig c;
    c.params.n_descriptor_samples = samples;
    c.params.robust = reg::parse_robust(robust);
    c.params.seed = seed;
    c.method = reg::parse_method(method);
    if (!descriptors.empty()) c.descriptor_dir = fs::absolute(descriptors);
    return c;
  }
};

eval::Labeling labels_from_file(const std::string& path) {
  const std::string text = read_text(path);
  if (text.rfind(pipeline::kManifestHeader, 0) == 0) {
    std::istringstream is(text);
    const auto m = pipeline::CorpusManifest::read(is);
    std::map<std::string, int> die_number;
    eval::Labeling out;
    for (const auto& e : m.entries()) {
      if (!e.die_id) throw Error(Errc::InvalidArgument, "manifest entry " + e.scan_id + " has no die id");
      const auto [it, fresh] = die_number.emplace(*e.die_id, static_cast<int>(die_number.size()));
      out.emplace(e.scan_id, it->second);
    }
    return out;
  }
  const bool json_doc = text.find_first_not_of(" \t\r\n") != std::string::npos && text[text.find_first_not_of(" \t\r\n")] == '{';
  return (json_doc ? graph::import_json(text) : graph::import_csv(text)).assignment();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"diematch: die-study pipeline for 3D coin scans"};
  app.require_subcommand(1);

  // ingest
  std::string ingest_dir, ingest_out = "manifest.csv", ingest_face;
  auto* ingest = app.add_subcommand("ingest", "build a manifest from a directory of PLY files");
  ingest->add_option("--dir", ingest_dir, "directory of .ply scans")->required();
  ingest->add_option("--out", ingest_out, "manifest CSV to write");
  ingest->add_option("--face", ingest_face, "face for every scan (default: from the id suffix)");

  // synth
  pipeline::CorpusSpec synth_spec;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus with ground truth");
  synth->add_option("--dies", synth_spec.dies, "number of dies")->check(CLI::PositiveNumber);
  synth->add_option("--coins-per-die", synth_spec.max_coins, "most coins struck from one die")->check(CLI::PositiveNumber);
  synth->add_option("--min-coins", synth_spec.min_coins, "fewest coins struck from one die")->check(CLI::PositiveNumber);
  synth->add_option("--seed", synth_spec.seed, "corpus seed");
  synth->add_option("--max-wear", synth_spec.max_wear, "upper bound of per-coin wear in [0,1]");
  synth->add_option("--max-crop", synth_spec.max_crop, "upper bound of the cropped fraction");
  synth->add_option("--out", synth_out, "output directory")->required();

  // train
  std::string train_manifest, train_out = "model.txt", train_pairs;
  std::size_t train_pos = 20, train_neg = 20;
  std::uint64_t train_seed = 1;
  double train_l2 = sim::TrainingConfig{}.l2;
  unsigned train_workers = 0;
  RegFlags train_reg;
  auto* train = app.add_subcommand("train", "fit the same-die logistic model from labeled pairs");
  train->add_option("--manifest", train_manifest, "corpus manifest")->required();
  train->add_option("--pairs", train_pairs, "labeled pairs CSV id_a,id_b,same_die (default: sampled from die ids)");
  train->add_option("--positives", train_pos, "same-die pairs to sample");
  train->add_option("--negatives", train_neg, "different-die pairs to sample");
  train->add_option("--pair-seed", train_seed, "seed for pair sampling");
  train->add_option("--l2", train_l2, "L2 regularization strength");
  train->add_option("--workers", train_workers, "worker threads (0: all cores)");
  train->add_option("--out", train_out, "model file to write");
  train_reg.add(train);

  // score
  std::string score_manifest, score_model, score_cache, score_out = "scores.csv", score_failures;
  unsigned score_workers = 0;
  bool score_reproducible = false, score_no_cache = false;
  RegFlags score_reg;
  auto* score = app.add_subcommand("score", "score every pair of scans in a manifest");
  score->add_option("--manifest", score_manifest, "corpus manifest")->required();
  score->add_option("--model", score_model, "logistic model file")->required();
  score->add_option("--workers", score_workers, "worker threads (0: all cores)");
  score->add_option("--cache", score_cache, "pair cache file (default: $DIEMATCH_CACHE_DIR/pairs.jsonl)");
  score->add_flag("--no-cache", score_no_cache, "do not read or write a pair cache");
  score->add_option("--out", score_out, "scores CSV to write");
  score->add_option("--failures", score_failures, "CSV of failed pairs (default: <out>.failures.csv)");
  score->add_flag("--reproducible", score_reproducible, "write 0 in the seconds column");
  score_reg.add(score);

  // cluster
  std::string cluster_scores, cluster_graph, cluster_manifest, cluster_out, cluster_format = "csv", cluster_graph_out;
  double cluster_tau = 0.95;
  std::vector<double> sweep;
  auto* clus = app.add_subcommand("cluster", "threshold the similarity graph and export connected components");
  clus->add_option("--scores", cluster_scores, "scores CSV");
  clus->add_option("--graph", cluster_graph, "graph JSON (with edits) instead of scores");
  clus->add_option("--manifest", cluster_manifest, "roster of scans (default: ids seen in the scores)");
  clus->add_option("--tau", cluster_tau, "link threshold")->check(CLI::Range(0.0, 1.0));
  clus->add_option("--format", cluster_format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
  clus->add_option("--out", cluster_out, "export file (default: stdout)");
  clus->add_option("--graph-out", cluster_graph_out, "also write the graph JSON");
  clus->add_option("--sweep", sweep, "print cluster counts for these thresholds instead");

  // bench-reg
  std::string bench_manifest, bench_methods = "icp_rand,fpfh", bench_report, bench_csv, bench_json, bench_desc;
  unsigned bench_workers = 0;
  RegFlags bench_reg;
  bench_reg.samples = reg::RegistrationParams{}.n_descriptor_samples;
  auto* bench = app.add_subcommand("bench-reg", "registration benchmark over intra-die pairs");
  bench->add_option("--manifest", bench_manifest, "manifest with die ids and poses")->required();
  bench->add_option("--methods", bench_methods, "comma-separated: gt,icp_rand,fpfh,external");
  bench->add_option("--report", bench_report, "text table (default: stdout)");
  bench->add_option("--csv", bench_csv, "per-die medians as CSV");
  bench->add_option("--json", bench_json, "report as JSON");
  bench->add_option("--workers", bench_workers, "worker threads (0: all cores)");
  bench_reg.add(bench);

  // metrics
  std::string metrics_pred, metrics_truth;
  auto* metrics = app.add_subcommand("metrics", "compare a clustering to the truth: FMI, ARI, pair confusion");
  metrics->add_option("--pred", metrics_pred, "predicted clusters (CSV or JSON export)")->required();
  metrics->add_option("--truth", metrics_truth, "true clusters, or a manifest with die ids")->required();

  // serve
  service::ServiceConfig serve_cfg;
  std::string serve_graph, serve_manifest, serve_model, serve_cache, serve_ui, serve_host = "127.0.0.1";
  int serve_port = 8080;
  RegFlags serve_reg;
  auto* serve = app.add_subcommand("serve", "HTTP API for the graph editor");
  serve->add_option("--graph", serve_graph, "graph JSON (default: $DIEMATCH_DATA_DIR/graph.json)");
  serve->add_option("--manifest", serve_manifest, "manifest for pair detail and previews");
  serve->add_option("--model", serve_model, "model for preview probabilities");
  serve->add_option("--cache", serve_cache, "pair cache with stored transforms");
  serve->add_option("--ui", serve_ui, "static UI bundle served under /ui");
  serve->add_option("--host", serve_host, "bind address");
  serve->add_option("--port", serve_port, "port")->check(CLI::Range(0, 65535));
  serve->add_option("--token", serve_cfg.token, "bearer token for edits (default: $DIEMATCH_TOKEN)");
  serve_reg.add(serve);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest) {
      std::optional<pipeline::Face> face;
      if (!ingest_face.empty()) face = pipeline::parse_face(ingest_face);
      const auto m = pipeline::ingest_directory(ingest_dir, face);
      m.save(ingest_out);
      std::cout << "ingested " << m.size() << " scans into " << ingest_out << "\n";
    } else if (*synth) {
      if (synth_spec.min_coins > synth_spec.max_coins) synth_spec.min_coins = synth_spec.max_coins;
      const auto corpus = pipeline::generate_corpus(synth_spec);
      pipeline::write_corpus(corpus, synth_out);
      std::cout << "wrote " << corpus.scans.size() << " scans of " << corpus.die_count() << " dies to " << synth_out
                << "\n";
    } else if (*train) {
      const auto m = pipeline::CorpusManifest::load(train_manifest);
      const auto config = train_reg.config();
      const auto scans = pipeline::scans_from_manifest(m, config.descriptor_dir);
      std::vector<pipeline::PairIndex> pairs;
      std::vector<bool> labels;
      if (!train_pairs.empty()) {
        std::ifstream is(train_pairs);
        if (!is) throw Error(Errc::IoError, "cannot open " + train_pairs);
        std::map<std::string, std::uint32_t> pos;
        for (std::uint32_t i = 0; i < scans.size(); ++i) pos.emplace(scans.ids[i], i);
        std::string line;
        std::getline(is, line);
        while (std::getline(is, line)) {
          if (!line.empty() && line.back() == '\r') line.pop_back();
          if (line.empty()) continue;
          const auto f = sim::split_csv_line(line);
          if (f.size() != 3) throw Error(Errc::ParseError, "labeled pair line must be id_a,id_b,same_die: " + line);
          if (!pos.contains(f[0]) || !pos.contains(f[1])) throw Error(Errc::UnknownNode, "pair not in manifest: " + line);
          pairs.emplace_back(pos[f[0]], pos[f[1]]);
          labels.push_back(f[2] == "1" || f[2] == "true" || f[2] == "same");
        }
      } else {
        // sample from the train split when there is one, else from the whole manifest
        std::vector<std::string> die_of;
        std::vector<std::uint32_t> index;
        const bool has_split = std::any_of(m.entries().begin(), m.entries().end(), [](const auto& e) { return e.split.has_value(); });
        for (std::uint32_t i = 0; i < m.size(); ++i) {
          if (!m[i].die_id) continue;
          if (has_split && m[i].split != pipeline::Split::Train) continue;
          die_of.push_back(*m[i].die_id);
          index.push_back(i);
        }
        for (const auto& lp : pipeline::sample_labeled_pairs(die_of, train_pos, train_neg, train_seed)) {
          pairs.emplace_back(index[lp.a], index[lp.b]);
          labels.push_back(lp.same_die);
        }
      }
      const auto hist = pipeline::pair_histograms(scans, pairs, config, train_workers);
      std::vector<sim::DistanceHistogram> features;
      std::vector<bool> kept;
      for (std::size_t k = 0; k < hist.size(); ++k)
        if (hist[k]) {
          features.push_back(*hist[k]);
          kept.push_back(labels[k]);
        }
      sim::TrainingConfig tc;
      tc.l2 = train_l2;
      const auto model = sim::train_logistic(features, kept, tc);
      sim::save_model(train_out, model);
      std::cout << "trained on " << features.size() << " pairs (" << hist.size() - features.size()
                << " failed to register); training accuracy " << model.meta.training_accuracy << "; model written to "
                << train_out << "\n";
    } else if (*score) {
      const auto m = pipeline::CorpusManifest::load(score_manifest);
      const auto model = sim::load_model(score_model);
      const auto config = score_reg.config();
      const auto scans = pipeline::scans_from_manifest(m, config.descriptor_dir);
      std::unique_ptr<pipeline::PairCache> cache;
      if (!score_no_cache) {
        std::string path = score_cache;
        if (path.empty()) {
          const std::string dir = env_or("DIEMATCH_CACHE_DIR", "");
          if (!dir.empty()) {
            fs::create_directories(dir);
            path = (fs::path(dir) / "pairs.jsonl").string();
          }
        }
        if (!path.empty()) cache = std::make_unique<pipeline::PairCache>(path, pipeline::fingerprint(config, model));
      }
      pipeline::PairwiseOptions opt;
      opt.workers = score_workers;
      opt.cache = cache.get();
      const auto report = pipeline::run_pairwise(scans, model, config, opt);
      sim::save_scores_csv(score_out, pipeline::score_rows(report.records, score_reproducible));
      const std::string fail_path = score_failures.empty() ? score_out + ".failures.csv" : score_failures;
      {
        std::ofstream fs_out(fail_path, std::ios::binary);
        pipeline::write_failures_csv(fs_out, report.records);
      }
      std::cout << report.records.size() << " pairs: " << report.computed << " computed, " << report.cache_hits
                << " from cache, " << report.failures << " failed (" << fail_path << "); spot-checked "
                << report.spot_checked << ", mismatches " << report.spot_mismatches << "; " << report.wall_seconds
                << " s\n";
    } else if (*clus) {
      graph::SimilarityGraph g;
      if (!cluster_graph.empty()) {
        g = graph::load_graph(cluster_graph);
      } else {
        if (cluster_scores.empty()) throw Error(Errc::InvalidArgument, "cluster needs --scores or --graph");
        const auto rows = sim::load_scores_csv(cluster_scores);
        std::vector<std::string> roster;
        if (!cluster_manifest.empty()) {
          roster = pipeline::CorpusManifest::load(cluster_manifest, false).ids();
        } else {
          std::set<std::string> seen;
          for (const auto& r : rows) seen.insert({r.id_a, r.id_b});
          roster.assign(seen.begin(), seen.end());
        }
        g = graph::build_graph(rows, roster);
      }
      if (!cluster_graph_out.empty()) graph::save_graph(cluster_graph_out, g);
      if (!sweep.empty()) {
        std::sort(sweep.begin(), sweep.end());
        std::cout << "tau,clusters,largest\n";
        for (const auto& s : graph::sweep_tau(g, sweep)) std::cout << s.tau << ',' << s.clusters << ',' << s.largest << '\n';
      } else {
        write_text(cluster_out, graph::export_clusters(graph::cluster(g, cluster_tau), graph::parse_format(cluster_format)));
      }
    } else if (*bench) {
      const auto m = pipeline::CorpusManifest::load(bench_manifest);
      pipeline::BenchmarkOptions opt;
      opt.methods.clear();
      std::stringstream ss(bench_methods);
      for (std::string tok; std::getline(ss, tok, ',');)
        if (!tok.empty()) opt.methods.push_back(tok);
      const auto cfg = bench_reg.config();
      opt.params = cfg.params;
      opt.workers = bench_workers;
      const auto result = pipeline::run_registration_benchmark(pipeline::benchmark_scans(m, cfg.descriptor_dir), opt);
      write_text(bench_report, eval::render_table(result.rows));
      if (!bench_csv.empty()) write_text(bench_csv, eval::report_csv(result.rows));
      if (!bench_json.empty()) write_text(bench_json, eval::report_json(result.rows).dump(2) + "\n");
    } else if (*metrics) {
      const auto pred = labels_from_file(metrics_pred);
      const auto truth = labels_from_file(metrics_truth);
      const auto c = eval::pair_confusion(pred, truth);
      std::cout << "fmi " << eval::fmi(pred, truth) << "\nari " << eval::ari(pred, truth) << "\ntp " << c.tp << "\nfp "
                << c.fp << "\nfn " << c.fn << "\ntn " << c.tn << "\n";
    } else if (*serve) {
      serve_cfg.graph_path = serve_graph;
      if (!serve_manifest.empty()) serve_cfg.manifest_path = serve_manifest;
      if (!serve_model.empty()) serve_cfg.model_path = serve_model;
      if (!serve_cache.empty()) serve_cfg.cache_path = serve_cache;
      if (!serve_ui.empty()) serve_cfg.ui_dir = serve_ui;
      if (serve_cfg.token.empty()) serve_cfg.token = env_or("DIEMATCH_TOKEN", "");
      serve_cfg.pipeline = serve_reg.config();
      service::apply_environment(serve_cfg);
      if (serve_cfg.graph_path.empty()) throw Error(Errc::InvalidArgument, "serve needs --graph or DIEMATCH_DATA_DIR");
      service::DieService svc(serve_cfg);
      std::cout << "serving " << serve_cfg.graph_path << " on http://" << serve_host << ":" << serve_port
                << (serve_cfg.token.empty() ? " (read-only)" : "") << std::endl;
      svc.run(serve_host, serve_port);
    }
  } catch (const std::exception& e) {
    std::cerr << "diematch: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
