#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "diematch/geom.hpp"

namespace diematch::geom {

static_assert(std::endian::native == std::endian::little, "PLY reader assumes a little-endian host");

namespace detail {

enum class PlyType { Int8, UInt8, Int16, UInt16, Int32, UInt32, Float32, Float64 };

inline std::optional<PlyType> parse_ply_type(const std::string& name) {
  if (name == "char" || name == "int8") return PlyType::Int8;
  if (name == "uchar" || name == "uint8") return PlyType::UInt8;
  if (name == "short" || name == "int16") return PlyType::Int16;
  if (name == "ushort" || name == "uint16") return PlyType::UInt16;
  if (name == "int" || name == "int32") return PlyType::Int32;
  if (name == "uint" || name == "uint32") return PlyType::UInt32;
  if (name == "float" || name == "float32") return PlyType::Float32;
  if (name == "double" || name == "float64") return PlyType::Float64;
  return std::nullopt;
}

inline std::size_t ply_type_size(PlyType t) {
  switch (t) {
    case PlyType::Int8:
    case PlyType::UInt8: return 1;
    case PlyType::Int16:
    case PlyType::UInt16: return 2;
    case PlyType::Int32:
    case PlyType::UInt32:
    case PlyType::Float32: return 4;
    case PlyType::Float64: return 8;
  }
  return 0;
}

struct PlyProperty {
  std::string name;
  PlyType type = PlyType::Float32;
  bool is_list = false;
  PlyType count_type = PlyType::UInt8;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> properties;
};

template <class T>
T read_raw(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

inline double decode_binary(PlyType t, const char* p) {
  switch (t) {
    case PlyType::Int8: return read_raw<std::int8_t>(p);
    case PlyType::UInt8: return read_raw<std::uint8_t>(p);
    case PlyType::Int16: return read_raw<std::int16_t>(p);
    case PlyType::UInt16: return read_raw<std::uint16_t>(p);
    case PlyType::Int32: return read_raw<std::int32_t>(p);
    case PlyType::UInt32: return read_raw<std::uint32_t>(p);
    case PlyType::Float32: return read_raw<float>(p);
    case PlyType::Float64: return read_raw<double>(p);
  }
  return 0.0;
}

/// Cursor over the binary payload; every read is bounds-checked.
class ByteCursor {
 public:
  ByteCursor(const std::string& data, std::size_t pos) : data_(data), pos_(pos) {}

  const char* take(std::size_t n) {
    if (pos_ + n > data_.size()) throw Error(Errc::MalformedPly, "payload shorter than header declares");
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }

 private:
  const std::string& data_;
  std::size_t pos_;
};

}  // namespace detail

inline std::string scan_id_from_path(const std::filesystem::path& path) { return path.stem().string(); }

/// Reads a PLY file (ASCII or binary little-endian). Vertex x,y,z are
/// required; nx,ny,nz are loaded when present and renormalized.
inline PointCloud load_point_cloud(const std::filesystem::path& path, bool require_normals) {
  using namespace detail;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  std::size_t header_end = data.find("end_header");
  if (data.rfind("ply", 0) != 0 || header_end == std::string::npos)
    throw Error(Errc::MalformedPly, "missing ply magic or end_header");
  std::size_t payload = data.find('\n', header_end);
  if (payload == std::string::npos) throw Error(Errc::MalformedPly, "truncated header");
  ++payload;

  std::istringstream header(data.substr(0, header_end));
  std::string line;
  std::string format;
  std::vector<PlyElement> elements;
  std::getline(header, line);  // "ply"
  while (std::getline(header, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string keyword;
    ls >> keyword;
    if (keyword.empty() || keyword == "comment" || keyword == "obj_info") continue;
    if (keyword == "format") {
      ls >> format;
    } else if (keyword == "element") {
      PlyElement e;
      long long count = -1;
      ls >> e.name >> count;
      if (count < 0) throw Error(Errc::MalformedPly, "bad element line: " + line);
      e.count = static_cast<std::size_t>(count);
      elements.push_back(std::move(e));
    } else if (keyword == "property") {
      if (elements.empty()) throw Error(Errc::MalformedPly, "property before element");
      PlyProperty prop;
      std::string type;
      ls >> type;
      if (type == "list") {
        std::string count_type, item_type;
        ls >> count_type >> item_type >> prop.name;
        auto ct = parse_ply_type(count_type);
        auto it = parse_ply_type(item_type);
        if (!ct || !it) throw Error(Errc::MalformedPly, "unknown list type: " + line);
        prop.is_list = true;
        prop.count_type = *ct;
        prop.type = *it;
      } else {
        auto t = parse_ply_type(type);
        if (!t) throw Error(Errc::MalformedPly, "unknown property type: " + type);
        prop.type = *t;
        ls >> prop.name;
      }
      elements.back().properties.push_back(prop);
    } else {
      throw Error(Errc::MalformedPly, "unexpected header line: " + line);
    }
  }

  const bool ascii = format == "ascii";
  if (!ascii && format != "binary_little_endian")
    throw Error(Errc::MalformedPly, "unsupported format '" + format + "'");

  auto vertex_it = std::find_if(elements.begin(), elements.end(), [](const PlyElement& e) { return e.name == "vertex"; });
  if (vertex_it == elements.end()) throw Error(Errc::MalformedPly, "no vertex element");

  auto find_prop = [&](const std::string& name) -> int {
    for (std::size_t i = 0; i < vertex_it->properties.size(); ++i)
      if (vertex_it->properties[i].name == name && !vertex_it->properties[i].is_list) return static_cast<int>(i);
    return -1;
  };
  const int ix = find_prop("x"), iy = find_prop("y"), iz = find_prop("z");
  if (ix < 0 || iy < 0 || iz < 0) throw Error(Errc::MalformedPly, "vertex lacks x/y/z");
  for (int i : {ix, iy, iz}) {
    const PlyType t = vertex_it->properties[static_cast<std::size_t>(i)].type;
    if (t != PlyType::Float32 && t != PlyType::Float64) throw Error(Errc::MalformedPly, "x/y/z must be float or double");
  }
  const int inx = find_prop("nx"), iny = find_prop("ny"), inz = find_prop("nz");
  const bool has_normals = inx >= 0 && iny >= 0 && inz >= 0;
  if (require_normals && !has_normals) throw Error(Errc::MissingNormals, path.string() + " has no nx/ny/nz");
  if (vertex_it->count == 0) throw Error(Errc::EmptyCloud, path.string() + " has no vertices");

  PointCloud cloud;
  cloud.id = scan_id_from_path(path);
  cloud.points.reserve(vertex_it->count);
  if (has_normals) cloud.normals.reserve(vertex_it->count);

  std::vector<double> row;
  auto store_vertex = [&](const std::vector<double>& v) {
    cloud.points.emplace_back(v[static_cast<std::size_t>(ix)], v[static_cast<std::size_t>(iy)],
                              v[static_cast<std::size_t>(iz)]);
    if (!cloud.points.back().allFinite()) throw Error(Errc::MalformedPly, "non-finite vertex coordinate");
    if (has_normals) {
      Vec3 n(v[static_cast<std::size_t>(inx)], v[static_cast<std::size_t>(iny)], v[static_cast<std::size_t>(inz)]);
      const double len = n.norm();
      cloud.normals.push_back(len > 0.0 && std::isfinite(len) ? Vec3(n / len) : Vec3::UnitZ());
    }
  };

  if (ascii) {
    std::istringstream body(data.substr(payload));
    for (const PlyElement& e : elements) {
      const bool is_vertex = &e == &*vertex_it;
      for (std::size_t r = 0; r < e.count; ++r) {
        row.clear();
        for (const PlyProperty& p : e.properties) {
          if (p.is_list) {
            double n = 0;
            if (!(body >> n) || n < 0) throw Error(Errc::MalformedPly, "bad list count");
            for (std::size_t k = 0; k < static_cast<std::size_t>(n); ++k) {
              double skip;
              if (!(body >> skip)) throw Error(Errc::MalformedPly, "truncated list");
            }
            row.push_back(0.0);
          } else {
            std::string tok;
            if (!(body >> tok)) throw Error(Errc::MalformedPly, "payload shorter than header declares");
            try {
              row.push_back(std::stod(tok));
            } catch (const std::exception&) {
              throw Error(Errc::MalformedPly, "bad number '" + tok + "'");
            }
          }
        }
        if (is_vertex) store_vertex(row);
      }
      if (is_vertex) break;
    }
  } else {
    ByteCursor cursor(data, payload);
    for (const PlyElement& e : elements) {
      const bool is_vertex = &e == &*vertex_it;
      for (std::size_t r = 0; r < e.count; ++r) {
        row.clear();
        for (const PlyProperty& p : e.properties) {
          if (p.is_list) {
            const double n = decode_binary(p.count_type, cursor.take(ply_type_size(p.count_type)));
            if (n < 0) throw Error(Errc::MalformedPly, "negative list count");
            cursor.take(ply_type_size(p.type) * static_cast<std::size_t>(n));
            row.push_back(0.0);
          } else {
            row.push_back(decode_binary(p.type, cursor.take(ply_type_size(p.type))));
          }
        }
        if (is_vertex) store_vertex(row);
      }
      if (is_vertex) break;
    }
  }
  return cloud;
}

enum class PlyEncoding { BinaryLittleEndian, Ascii };

/// Writes vertices (and normals when present) as float64 properties, so a
/// load after save reproduces coordinates bit-for-bit.
inline void save_point_cloud(const std::filesystem::path& path, const PointCloud& cloud,
                             PlyEncoding encoding = PlyEncoding::BinaryLittleEndian) {
  const bool normals = cloud.has_normals();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
  out << "ply\nformat " << (encoding == PlyEncoding::Ascii ? "ascii" : "binary_little_endian") << " 1.0\n";
  out << "element vertex " << cloud.size() << "\n";
  out << "property double x\nproperty double y\nproperty double z\n";
  if (normals) out << "property double nx\nproperty double ny\nproperty double nz\n";
  out << "end_header\n";
  if (encoding == PlyEncoding::Ascii) {
    out.precision(17);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      const Vec3& p = cloud.points[i];
      out << p.x() << ' ' << p.y() << ' ' << p.z();
      if (normals) out << ' ' << cloud.normals[i].x() << ' ' << cloud.normals[i].y() << ' ' << cloud.normals[i].z();
      out << '\n';
    }
  } else {
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      out.write(reinterpret_cast<const char*>(cloud.points[i].data()), 3 * sizeof(double));
      if (normals) out.write(reinterpret_cast<const char*>(cloud.normals[i].data()), 3 * sizeof(double));
    }
  }
  if (!out) throw Error(Errc::IoError, "write failed for " + path.string());
}

}  // namespace diematch::geom
