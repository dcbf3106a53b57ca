#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "diematch/geom.hpp"
#include "diematch/simscore.hpp"

namespace diematch::pipeline {

namespace fs = std::filesystem;

enum class Face { ObverseBeard, ObverseNoBeard, Reverse };

inline std::string_view to_string(Face f) {
  switch (f) {
    case Face::ObverseBeard: return "obverse_beard";
    case Face::ObverseNoBeard: return "obverse_no_beard";
    case Face::Reverse: return "reverse";
  }
  return "?";
}

inline Face parse_face(std::string_view s) {
  if (s == "obverse_beard") return Face::ObverseBeard;
  if (s == "obverse_no_beard" || s == "obverse") return Face::ObverseNoBeard;
  if (s == "reverse") return Face::Reverse;
  throw Error(Errc::ParseError, "unknown face '" + std::string(s) + "'");
}

/// Category names used when aggregating registration results by face.
inline std::string_view category(Face f) {
  switch (f) {
    case Face::ObverseBeard: return "obverses_beard";
    case Face::ObverseNoBeard: return "obverses_no_beard";
    case Face::Reverse: return "reverses";
  }
  return "?";
}

enum class Split { Train, Validation, Test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "validation" || s == "val") return Split::Validation;
  if (s == "test") return Split::Test;
  throw Error(Errc::ParseError, "unknown split '" + std::string(s) + "'");
}

struct ManifestEntry {
  std::string scan_id;
  fs::path path;
  Face face = Face::ObverseNoBeard;
  std::optional<std::string> die_id;
  std::optional<Split> split;
  std::optional<geom::RigidTransform> pose;  // ground truth, die frame -> scan frame
};

/// Pose as 12 space-separated numbers: rotation row-major, then translation.
inline std::string format_pose(const geom::RigidTransform& t) {
  std::string out;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out += sim::format_double(t.rotation(r, c)) + ' ';
  for (int k = 0; k < 3; ++k) out += sim::format_double(t.translation[k]) + (k < 2 ? " " : "");
  return out;
}

inline geom::RigidTransform parse_pose(std::string_view s) {
  std::istringstream is{std::string(s)};
  std::vector<double> v;
  std::string tok;
  while (is >> tok) v.push_back(sim::parse_double(tok, "pose"));
  if (v.size() != 12) throw Error(Errc::ParseError, "pose needs 12 numbers, got " + std::to_string(v.size()));
  geom::RigidTransform t;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) t.rotation(r, c) = v[static_cast<std::size_t>(3 * r + c)];
  t.translation = geom::Vec3(v[9], v[10], v[11]);
  if (!t.is_valid(1e-6)) throw Error(Errc::ParseError, "pose rotation is not orthonormal");
  return t;
}

inline constexpr std::string_view kManifestHeader = "scan_id,path,face,die_id,split,pose";

/// CSV corpus manifest. Relative paths resolve against the manifest's own
/// directory.
class CorpusManifest {
 public:
  CorpusManifest() = default;

  explicit CorpusManifest(std::vector<ManifestEntry> entries) : entries_(std::move(entries)) { check_unique(); }

  const std::vector<ManifestEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const ManifestEntry& operator[](std::size_t i) const { return entries_[i]; }

  void add(ManifestEntry e) {
    entries_.push_back(std::move(e));
    check_unique();
  }

  const ManifestEntry& find(const std::string& id) const {
    for (const auto& e : entries_)
      if (e.scan_id == id) return e;
    throw Error(Errc::UnknownNode, "scan '" + id + "' is not in the manifest");
  }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.scan_id);
    return out;
  }

  /// Entries restricted to one split.
  CorpusManifest filter(Split s) const {
    CorpusManifest m;
    for (const auto& e : entries_)
      if (e.split == s) m.entries_.push_back(e);
    return m;
  }

  void check_files() const {
    for (const auto& e : entries_)
      if (!fs::exists(e.path)) throw Error(Errc::IoError, "scan file missing: " + e.path.string(), "manifest");
  }

  void write(std::ostream& os, const fs::path& relative_to = {}) const {
    os << kManifestHeader << '\n';
    for (const auto& e : entries_) {
      fs::path p = e.path;
      if (!relative_to.empty() && p.is_absolute()) p = p.lexically_relative(relative_to);
      os << e.scan_id << ',' << p.generic_string() << ',' << to_string(e.face) << ',' << e.die_id.value_or("") << ','
         << (e.split ? to_string(*e.split) : "") << ',' << (e.pose ? format_pose(*e.pose) : "") << '\n';
    }
  }

  void save(const fs::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error(Errc::IoError, "cannot write " + path.string());
    write(os, fs::absolute(path).parent_path());
  }

  static CorpusManifest read(std::istream& is, const fs::path& base = {}) {
    std::string line;
    if (!std::getline(is, line)) throw Error(Errc::ParseError, "manifest is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kManifestHeader)
      throw Error(Errc::ParseError, "manifest header must be '" + std::string(kManifestHeader) + "'");
    CorpusManifest m;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const auto f = sim::split_csv_line(line);
      if (f.size() != 6)
        throw Error(Errc::ParseError, "manifest line " + std::to_string(lineno) + ": expected 6 fields, got " +
                                          std::to_string(f.size()));
      if (f[0].empty()) throw Error(Errc::ParseError, "manifest line " + std::to_string(lineno) + ": empty scan id");
      ManifestEntry e;
      e.scan_id = f[0];
      e.path = f[1];
      if (e.path.is_relative() && !base.empty()) e.path = base / e.path;
      e.face = parse_face(f[2]);
      if (!f[3].empty()) e.die_id = f[3];
      if (!f[4].empty()) e.split = parse_split(f[4]);
      if (!f[5].empty()) e.pose = parse_pose(f[5]);
      m.entries_.push_back(std::move(e));
    }
    m.check_unique();
    return m;
  }

  static CorpusManifest load(const fs::path& path, bool require_files = true) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(Errc::IoError, "cannot open " + path.string());
    CorpusManifest m = read(is, fs::absolute(path).parent_path());
    if (require_files) m.check_files();
    return m;
  }

 private:
  void check_unique() const {
    std::set<std::string_view> seen;
    for (const auto& e : entries_) {
      // ids travel through CSV columns unquoted
      if (e.scan_id.empty() || e.scan_id.find_first_of(",\n\r") != std::string::npos)
        throw Error(Errc::InvalidArgument, "scan id '" + e.scan_id + "' is empty or holds a comma or line break");
      if (!seen.insert(e.scan_id).second) throw Error(Errc::InvalidArgument, "duplicate scan id '" + e.scan_id + "'");
    }
  }

  std::vector<ManifestEntry> entries_;
};

/// Face from the dataset's id convention: a trailing 'R' is a reverse, a
/// trailing 'D' an obverse.
inline Face face_from_id(std::string_view id, Face obverse_default = Face::ObverseNoBeard) {
  if (!id.empty() && (id.back() == 'R' || id.back() == 'r')) return Face::Reverse;
  return obverse_default;
}

/// Manifest over every .ply file in `dir` (non-recursive), ids from file
/// stems, sorted by id.
inline CorpusManifest ingest_directory(const fs::path& dir, std::optional<Face> face = std::nullopt) {
  if (!fs::is_directory(dir)) throw Error(Errc::IoError, "not a directory: " + dir.string(), "ingest");
  std::vector<ManifestEntry> entries;
  for (const auto& de : fs::directory_iterator(dir)) {
    if (!de.is_regular_file()) continue;
    std::string ext = de.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (ext != ".ply") continue;
    ManifestEntry e;
    e.scan_id = de.path().stem().string();
    e.path = fs::absolute(de.path());
    e.face = face ? *face : face_from_id(e.scan_id);
    entries.push_back(std::move(e));
  }
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.scan_id < b.scan_id; });
  return CorpusManifest(std::move(entries));
}

}  // namespace diematch::pipeline
