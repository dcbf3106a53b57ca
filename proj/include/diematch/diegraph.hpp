#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "diematch/simscore.hpp"

namespace diematch::graph {

using json = nlohmann::ordered_json;

/// Unordered pair of scan ids stored as (smaller, larger).
struct PairKey {
  std::string a, b;

  friend auto operator<=>(const PairKey&, const PairKey&) = default;
};

inline PairKey make_key(std::string x, std::string y) {
  if (x == y) throw Error(Errc::InvalidArgument, "a pair needs two distinct scans, got '" + x + "' twice");
  if (y < x) std::swap(x, y);
  return {std::move(x), std::move(y)};
}

enum class Edit { ForcedLink, ForcedCut, Clear };

inline std::string_view to_string(Edit e) {
  switch (e) {
    case Edit::ForcedLink: return "forced_link";
    case Edit::ForcedCut: return "forced_cut";
    case Edit::Clear: return "clear";
  }
  return "?";
}

inline Edit parse_edit(std::string_view s) {
  if (s == "forced_link" || s == "link" || s == "add") return Edit::ForcedLink;
  if (s == "forced_cut" || s == "cut") return Edit::ForcedCut;
  if (s == "clear") return Edit::Clear;
  throw Error(Errc::InvalidArgument, "unknown edit '" + std::string(s) + "'");
}

struct OverlayEntry {
  Edit edit = Edit::ForcedLink;
  std::string author;
  std::string ts;

  friend bool operator==(const OverlayEntry&, const OverlayEntry&) = default;
};

struct JournalEntry {
  std::uint64_t version = 0;
  PairKey pair;
  Edit edit = Edit::ForcedLink;
  std::string author;
  std::string ts;
};

/// ISO-8601 UTC, second resolution.
inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Weighted similarity graph over scans with a manual-edit overlay. The node
/// roster is fixed at construction; probabilities stay untouched beneath the
/// overlay so clearing an edit restores the computed behavior.
class SimilarityGraph {
 public:
  using Edge = std::pair<std::uint32_t, std::uint32_t>;

  SimilarityGraph() = default;

  explicit SimilarityGraph(std::vector<std::string> roster) : nodes_(std::move(roster)) {
    std::sort(nodes_.begin(), nodes_.end());
    if (std::adjacent_find(nodes_.begin(), nodes_.end()) != nodes_.end())
      throw Error(Errc::InvalidArgument, "duplicate scan id in roster");
    for (std::uint32_t i = 0; i < nodes_.size(); ++i) index_.emplace(nodes_[i], i);
  }

  const std::vector<std::string>& nodes() const noexcept { return nodes_; }
  std::size_t node_count() const noexcept { return nodes_.size(); }
  std::size_t edge_count() const noexcept { return edges_.size(); }
  std::uint64_t version() const noexcept { return version_; }
  void set_version(std::uint64_t v) noexcept { version_ = v; }
  bool has_node(const std::string& id) const { return index_.contains(id); }

  std::uint32_t index_of(const std::string& id) const {
    const auto it = index_.find(id);
    if (it == index_.end()) throw Error(Errc::UnknownNode, "unknown scan '" + id + "'");
    return it->second;
  }

  void add_edge(const std::string& x, const std::string& y, double p) {
    if (!(p >= 0.0 && p <= 1.0)) throw Error(Errc::InvalidArgument, "probability outside [0,1] for " + x + "," + y);
    const Edge e = edge_of(x, y);
    if (!edges_.emplace(e, p).second) throw Error(Errc::DuplicatePair, "duplicate score for pair " + x + "," + y);
  }

  std::optional<double> probability(const std::string& x, const std::string& y) const {
    const auto it = edges_.find(edge_of(x, y));
    if (it == edges_.end()) return std::nullopt;
    return it->second;
  }

  std::optional<OverlayEntry> overlay(const std::string& x, const std::string& y) const {
    const auto it = overlay_.find(edge_of(x, y));
    if (it == overlay_.end()) return std::nullopt;
    return it->second;
  }

  const std::map<Edge, double>& edges() const noexcept { return edges_; }
  const std::map<Edge, OverlayEntry>& overlay_entries() const noexcept { return overlay_; }
  const std::vector<JournalEntry>& journal() const noexcept { return journal_; }

  /// Applies one manual edit in place; every call bumps the version and is
  /// journaled, including ones that leave the overlay unchanged.
  void edit(const std::string& x, const std::string& y, Edit e, std::string author = {}, std::string ts = {}) {
    const Edge key = edge_of(x, y);
    if (ts.empty()) ts = utc_timestamp();
    if (e == Edit::Clear) overlay_.erase(key);
    else overlay_[key] = {e, author, ts};
    ++version_;
    journal_.push_back({version_, make_key(x, y), e, std::move(author), std::move(ts)});
  }

  // restores an overlay entry read from disk, without journaling
  void restore_overlay(const std::string& x, const std::string& y, OverlayEntry entry) {
    if (entry.edit == Edit::Clear) throw Error(Errc::InvalidArgument, "overlay cannot hold a clear edit");
    if (!overlay_.emplace(edge_of(x, y), std::move(entry)).second)
      throw Error(Errc::DuplicatePair, "two overlay entries for pair " + x + "," + y);
  }

 private:
  Edge edge_of(const std::string& x, const std::string& y) const {
    std::uint32_t i = index_of(x), j = index_of(y);
    if (i == j) throw Error(Errc::InvalidArgument, "a pair needs two distinct scans, got '" + x + "' twice");
    if (j < i) std::swap(i, j);
    return {i, j};
  }

  std::vector<std::string> nodes_;
  std::unordered_map<std::string, std::uint32_t> index_;
  std::map<Edge, double> edges_;
  std::map<Edge, OverlayEntry> overlay_;
  std::vector<JournalEntry> journal_;
  std::uint64_t version_ = 0;
};

inline SimilarityGraph build_graph(const std::vector<sim::ScoreRow>& scores, std::vector<std::string> roster) {
  SimilarityGraph g(std::move(roster));
  for (const auto& s : scores) g.add_edge(s.id_a, s.id_b, s.probability);
  return g;
}

/// Value-semantics form: returns the edited copy.
inline SimilarityGraph apply_edit(SimilarityGraph g, const std::string& x, const std::string& y, Edit e,
                                  std::string author = {}, std::string ts = {}) {
  g.edit(x, y, e, std::move(author), std::move(ts));
  return g;
}

// ---------------------------------------------------------------------------
// clustering

class UnionFind {
 public:
  explicit UnionFind(std::size_t n) : parent_(n), size_(n, 1), sets_(n) { std::iota(parent_.begin(), parent_.end(), 0u); }

  std::uint32_t find(std::uint32_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  bool unite(std::uint32_t a, std::uint32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    if (size_[a] < size_[b]) std::swap(a, b);
    parent_[b] = a;
    size_[a] += size_[b];
    largest_ = std::max(largest_, size_[a]);
    --sets_;
    return true;
  }

  std::size_t sets() const noexcept { return sets_; }
  std::size_t largest() const noexcept { return parent_.empty() ? 0 : largest_; }

 private:
  std::vector<std::uint32_t> parent_;
  std::vector<std::size_t> size_;
  std::size_t sets_;
  std::size_t largest_ = 1;
};

struct Clustering {
  std::vector<std::string> ids;  // sorted
  std::vector<int> labels;       // parallel to ids, dense from 0
  double tau = 0.0;

  std::size_t size() const noexcept { return ids.size(); }
  int cluster_count() const { return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1; }

  std::map<std::string, int> assignment() const {
    std::map<std::string, int> m;
    for (std::size_t i = 0; i < ids.size(); ++i) m.emplace(ids[i], labels[i]);
    return m;
  }

  std::vector<std::vector<std::string>> members() const {
    std::vector<std::vector<std::string>> out(static_cast<std::size_t>(cluster_count()));
    for (std::size_t i = 0; i < ids.size(); ++i) out[static_cast<std::size_t>(labels[i])].push_back(ids[i]);
    return out;
  }

  friend bool operator==(const Clustering&, const Clustering&) = default;
};

namespace detail {

inline bool retained(double p, const OverlayEntry* o, double tau) {
  if (o) return o->edit == Edit::ForcedLink;
  return p >= tau;
}

// ids numbered by first appearance in sorted-id order, i.e. by minimum member
inline std::vector<int> dense_labels(UnionFind& uf, std::size_t n) {
  std::vector<int> root_label(n, -1), labels(n);
  int next = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint32_t r = uf.find(i);
    if (root_label[r] < 0) root_label[r] = next++;
    labels[i] = root_label[r];
  }
  return labels;
}

}  // namespace detail

/// Connected components over edges with p >= tau or a forced link; forced
/// cuts remove an edge whatever its probability.
inline Clustering cluster(const SimilarityGraph& g, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw Error(Errc::InvalidArgument, "tau must lie in [0,1]");
  const std::size_t n = g.node_count();
  UnionFind uf(n);
  const auto& overlay = g.overlay_entries();
  for (const auto& [e, p] : g.edges()) {
    const auto it = overlay.find(e);
    if (detail::retained(p, it == overlay.end() ? nullptr : &it->second, tau)) uf.unite(e.first, e.second);
  }
  for (const auto& [e, o] : overlay)
    if (o.edit == Edit::ForcedLink) uf.unite(e.first, e.second);
  return {g.nodes(), detail::dense_labels(uf, n), tau};
}

struct SweepPoint {
  double tau = 0.0;
  std::size_t clusters = 0;
  std::size_t largest = 0;
};

/// Cluster count and largest cluster size at each tau. Edges are added once
/// in descending probability while tau decreases, so the whole sweep costs a
/// single sort plus near-linear union-find work.
inline std::vector<SweepPoint> sweep_tau(const SimilarityGraph& g, const std::vector<double>& taus) {
  if (!std::is_sorted(taus.begin(), taus.end())) throw Error(Errc::InvalidArgument, "taus must be sorted ascending");
  const std::size_t n = g.node_count();
  UnionFind uf(n);
  const auto& overlay = g.overlay_entries();
  for (const auto& [e, o] : overlay)
    if (o.edit == Edit::ForcedLink) uf.unite(e.first, e.second);

  std::vector<std::pair<double, SimilarityGraph::Edge>> free_edges;
  for (const auto& [e, p] : g.edges())
    if (!overlay.contains(e)) free_edges.emplace_back(p, e);
  std::sort(free_edges.begin(), free_edges.end(), [](const auto& x, const auto& y) { return x.first > y.first; });

  std::vector<SweepPoint> out(taus.size());
  std::size_t next = 0;
  for (std::size_t k = taus.size(); k-- > 0;) {
    while (next < free_edges.size() && free_edges[next].first >= taus[k]) {
      uf.unite(free_edges[next].second.first, free_edges[next].second.second);
      ++next;
    }
    out[k] = {taus[k], uf.sets(), n == 0 ? 0 : uf.largest()};
  }
  return out;
}

// ---------------------------------------------------------------------------
// export / import

enum class ExportFormat { Csv, Json };

inline ExportFormat parse_format(std::string_view s) {
  if (s == "csv") return ExportFormat::Csv;
  if (s == "json") return ExportFormat::Json;
  throw Error(Errc::InvalidArgument, "unknown export format '" + std::string(s) + "'");
}

inline std::string export_csv(const Clustering& c) {
  std::string out = "scan_id,cluster_id\n";
  const auto groups = c.members();
  for (std::size_t k = 0; k < groups.size(); ++k)
    for (const auto& id : groups[k]) out += id + "," + std::to_string(k) + "\n";
  return out;
}

inline std::string export_json(const Clustering& c) {
  json doc;
  doc["tau"] = c.tau;
  doc["clusters"] = json::array();
  const auto groups = c.members();
  for (std::size_t k = 0; k < groups.size(); ++k) doc["clusters"].push_back({{"id", k}, {"members", groups[k]}});
  return doc.dump(2) + "\n";
}

inline std::string export_clusters(const Clustering& c, ExportFormat f) {
  return f == ExportFormat::Csv ? export_csv(c) : export_json(c);
}

namespace detail {

inline Clustering from_groups(std::map<std::string, int> assignment, double tau) {
  Clustering c;
  c.tau = tau;
  // renumber by minimum member so imports normalize to the canonical form
  std::map<int, int> renumber;
  for (const auto& [id, label] : assignment) {
    const auto [it, fresh] = renumber.emplace(label, static_cast<int>(renumber.size()));
    c.ids.push_back(id);
    c.labels.push_back(it->second);
  }
  return c;
}

}  // namespace detail

inline Clustering import_csv(std::string_view text) {
  std::istringstream is{std::string(text)};
  std::string line;
  if (!std::getline(is, line)) throw Error(Errc::ParseError, "cluster CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "scan_id,cluster_id") throw Error(Errc::ParseError, "cluster CSV header must be 'scan_id,cluster_id'");
  std::map<std::string, int> assignment;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos || line.find(',', comma + 1) != std::string::npos)
      throw Error(Errc::ParseError, "malformed cluster CSV line '" + line + "'");
    int label = 0;
    const std::string_view lv = std::string_view(line).substr(comma + 1);
    const auto [p, ec] = std::from_chars(lv.data(), lv.data() + lv.size(), label);
    if (ec != std::errc() || p != lv.data() + lv.size() || label < 0)
      throw Error(Errc::ParseError, "bad cluster id in line '" + line + "'");
    if (!assignment.emplace(line.substr(0, comma), label).second)
      throw Error(Errc::ParseError, "scan listed twice: " + line.substr(0, comma));
  }
  return detail::from_groups(std::move(assignment), 0.0);
}

inline Clustering import_json(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
    std::map<std::string, int> assignment;
    for (const auto& c : doc.at("clusters"))
      for (const auto& m : c.at("members"))
        if (!assignment.emplace(m.get<std::string>(), c.at("id").get<int>()).second)
          throw Error(Errc::ParseError, "scan listed twice: " + m.get<std::string>());
    return detail::from_groups(std::move(assignment), doc.at("tau").get<double>());
  } catch (const json::exception& e) {
    throw Error(Errc::ParseError, std::string("cluster JSON: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// graph persistence

inline json to_json(const SimilarityGraph& g) {
  json doc;
  doc["version"] = g.version();
  doc["nodes"] = g.nodes();
  json edges = json::array();
  for (const auto& [e, p] : g.edges()) edges.push_back({{"a", g.nodes()[e.first]}, {"b", g.nodes()[e.second]}, {"p", p}});
  doc["edges"] = std::move(edges);
  json overlay = json::array();
  for (const auto& [e, o] : g.overlay_entries())
    overlay.push_back({{"a", g.nodes()[e.first]},
                       {"b", g.nodes()[e.second]},
                       {"edit", to_string(o.edit)},
                       {"author", o.author},
                       {"ts", o.ts}});
  doc["overlay"] = std::move(overlay);
  return doc;
}

inline SimilarityGraph graph_from_json(const json& doc) {
  try {
    SimilarityGraph g(doc.at("nodes").get<std::vector<std::string>>());
    for (const auto& e : doc.at("edges")) g.add_edge(e.at("a").get<std::string>(), e.at("b").get<std::string>(), e.at("p").get<double>());
    if (doc.contains("overlay"))
      for (const auto& o : doc.at("overlay"))
        g.restore_overlay(o.at("a").get<std::string>(), o.at("b").get<std::string>(),
                          {parse_edit(o.at("edit").get<std::string>()), o.value("author", std::string{}),
                           o.value("ts", std::string{})});
    g.set_version(doc.value("version", std::uint64_t{0}));
    return g;
  } catch (const json::exception& e) {
    throw Error(Errc::ParseError, std::string("graph JSON: ") + e.what());
  }
}

inline void save_graph(const std::filesystem::path& path, const SimilarityGraph& g) {
  // write-then-rename keeps the previous snapshot intact on a crash
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw Error(Errc::IoError, "cannot write " + tmp.string());
    os << to_json(g).dump(1) << '\n';
    if (!os) throw Error(Errc::IoError, "write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline SimilarityGraph load_graph(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::IoError, "cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(is);
  } catch (const json::exception& e) {
    throw Error(Errc::ParseError, path.string() + ": " + e.what());
  }
  return graph_from_json(doc);
}

}  // namespace diematch::graph
