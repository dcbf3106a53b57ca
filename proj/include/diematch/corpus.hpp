#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "diematch/evalmetrics.hpp"
#include "diematch/manifest.hpp"
#include "diematch/ply.hpp"
#include "diematch/synth.hpp"

namespace diematch::pipeline {

/// A seeded synthetic collection: several dies, an unbalanced number of coins
/// struck from each, every coin individually worn, cracked, cropped and posed.
struct CorpusSpec {
  std::uint64_t seed = 1;
  int dies = 8;
  int min_coins = 3;
  int max_coins = 10;
  double max_wear = 0.2;
  int max_cracks = 2;
  double edge_jitter = 0.1;
  double max_crop = 0.15;
  double noise_sigma = 0.005;
  SyntheticDieSpec die{};  // template; each die gets its own seed
  geom::RotationRanges ranges{};
};

inline void validate(const CorpusSpec& s) {
  if (s.dies < 1 || s.min_coins < 1 || s.max_coins < s.min_coins || !(s.max_wear >= 0.0 && s.max_wear <= 1.0) ||
      s.max_cracks < 0 || !(s.edge_jitter >= 0.0) || !(s.max_crop >= 0.0 && s.max_crop < 1.0) || !(s.noise_sigma >= 0.0))
    throw Error(Errc::InvalidArgument, "invalid corpus spec");
  geom::check_ranges(s.ranges);
}

struct SyntheticScan {
  std::string id;
  std::string die_id;
  Face face = Face::ObverseNoBeard;
  geom::PointCloud cloud;
  geom::RigidTransform pose;  // die frame -> scan frame
};

struct SyntheticCorpus {
  std::vector<SyntheticScan> scans;

  std::vector<geom::PointCloud> clouds() const {
    std::vector<geom::PointCloud> out;
    out.reserve(scans.size());
    for (const auto& s : scans) out.push_back(s.cloud);
    return out;
  }

  eval::Labeling truth() const {
    std::map<std::string, int> die_number;
    eval::Labeling out;
    for (const auto& s : scans) {
      const auto [it, fresh] = die_number.emplace(s.die_id, static_cast<int>(die_number.size()));
      out.emplace(s.id, it->second);
    }
    return out;
  }

  std::size_t die_count() const {
    std::vector<std::string> d;
    for (const auto& s : scans) d.push_back(s.die_id);
    std::sort(d.begin(), d.end());
    return static_cast<std::size_t>(std::unique(d.begin(), d.end()) - d.begin());
  }
};

inline Face face_for_die(int die) {
  static constexpr Face kFaces[] = {Face::Reverse, Face::ObverseNoBeard, Face::ObverseBeard};
  return kFaces[die % 3];
}

/// Coin counts skew toward few coins per die; ids are numbered in shuffled
/// order so they carry no hint of the die.
inline SyntheticCorpus generate_corpus(const CorpusSpec& spec) {
  validate(spec);
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<int> counts;
  for (int d = 0; d < spec.dies; ++d) {
    const double u = unit(rng);
    const int span = spec.max_coins - spec.min_coins + 1;
    counts.push_back(spec.min_coins + std::min(span - 1, static_cast<int>(span * u * u)));
  }
  // the largest die always reaches the maximum, as one prolific die does in real hoards
  if (!counts.empty()) *std::max_element(counts.begin(), counts.end()) = spec.max_coins;

  const int total = std::accumulate(counts.begin(), counts.end(), 0);
  std::vector<int> numbers(static_cast<std::size_t>(total));
  std::iota(numbers.begin(), numbers.end(), 1);
  std::shuffle(numbers.begin(), numbers.end(), rng);

  SyntheticCorpus corpus;
  std::size_t next = 0;
  for (int d = 0; d < spec.dies; ++d) {
    SyntheticDieSpec ds = spec.die;
    ds.seed = rng();
    const DiePattern die = generate_synthetic_die(ds);
    const Face face = face_for_die(d);
    char die_id[16];
    std::snprintf(die_id, sizeof die_id, "%c%02d", face == Face::Reverse ? 'R' : 'D', d + 1);
    for (int c = 0; c < counts[static_cast<std::size_t>(d)]; ++c) {
      Degradation deg;
      deg.wear = spec.max_wear * unit(rng);
      deg.cracks = spec.max_cracks > 0 ? static_cast<int>(rng() % static_cast<std::uint64_t>(spec.max_cracks + 1)) : 0;
      deg.edge_jitter = spec.edge_jitter;
      deg.crop_fraction = spec.max_crop * unit(rng);
      deg.noise_sigma = spec.noise_sigma;
      StrikeOptions opt;
      opt.seed = rng();
      opt.ranges = spec.ranges;
      StruckCoin coin = strike_coin(die, deg, opt);
      char id[16];
      std::snprintf(id, sizeof id, "L%04d%c", numbers[next++], face == Face::Reverse ? 'R' : 'D');
      coin.cloud.id = id;
      corpus.scans.push_back({id, die_id, face, std::move(coin.cloud), coin.pose});
    }
  }
  std::sort(corpus.scans.begin(), corpus.scans.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return corpus;
}

/// Writes one binary PLY per scan plus `manifest.csv` (with die ids and
/// ground-truth poses) into `dir`.
inline CorpusManifest write_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  CorpusManifest m;
  for (const auto& s : corpus.scans) {
    const auto path = std::filesystem::absolute(dir / (s.id + ".ply"));
    geom::save_point_cloud(path, s.cloud);
    ManifestEntry e;
    e.scan_id = s.id;
    e.path = path;
    e.face = s.face;
    e.die_id = s.die_id;
    e.pose = s.pose;
    m.add(std::move(e));
  }
  m.save(dir / "manifest.csv");
  return m;
}

/// Labeled pairs drawn without replacement: `positives` same-die and
/// `negatives` different-die pairs (fewer if the corpus has fewer).
struct LabeledPair {
  std::uint32_t a = 0, b = 0;
  bool same_die = false;
};

inline std::vector<LabeledPair> sample_labeled_pairs(const std::vector<std::string>& die_of, std::size_t positives,
                                                     std::size_t negatives, std::uint64_t seed) {
  std::vector<LabeledPair> pos, neg;
  for (std::uint32_t i = 0; i < die_of.size(); ++i)
    for (std::uint32_t j = i + 1; j < die_of.size(); ++j) (die_of[i] == die_of[j] ? pos : neg).push_back({i, j, die_of[i] == die_of[j]});
  std::mt19937_64 rng(seed);
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  pos.resize(std::min(pos.size(), positives));
  neg.resize(std::min(neg.size(), negatives));
  std::vector<LabeledPair> out;
  out.reserve(pos.size() + neg.size());
  // interleave so any prefix stays roughly balanced
  for (std::size_t k = 0; k < std::max(pos.size(), neg.size()); ++k) {
    if (k < pos.size()) out.push_back(pos[k]);
    if (k < neg.size()) out.push_back(neg[k]);
  }
  return out;
}

}  // namespace diematch::pipeline
