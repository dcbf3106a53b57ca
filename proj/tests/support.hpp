#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>
#include <vector>

#include "diematch/corpus.hpp"
#include "diematch/pairwise.hpp"

namespace testing_support {

using namespace diematch;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& name) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("diematch_" + name + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

 private:
  std::filesystem::path path_;
};

inline std::vector<geom::Vec3> random_points(std::size_t n, std::uint64_t seed, double extent = 10.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-extent, extent);
  std::vector<geom::Vec3> out;
  for (std::size_t i = 0; i < n; ++i) out.emplace_back(u(rng), u(rng), u(rng));
  return out;
}

inline geom::RigidTransform random_transform(std::mt19937_64& rng, double shift = 5.0) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::Quaterniond q(g(rng), g(rng), g(rng), g(rng));
  q.normalize();
  std::uniform_real_distribution<double> u(-shift, shift);
  return {q.toRotationMatrix(), geom::Vec3(u(rng), u(rng), u(rng))};
}

/// Trains a model on labeled pairs sampled from `corpus`; failed
/// registrations are dropped from the training set.
inline sim::LogisticModel train_on(const pipeline::SyntheticCorpus& corpus, const pipeline::PipelineConfig& config,
                                   std::size_t positives, std::size_t negatives, std::uint64_t seed, double l2) {
  std::vector<std::string> die_of;
  for (const auto& s : corpus.scans) die_of.push_back(s.die_id);
  std::vector<pipeline::PairIndex> pairs;
  std::vector<bool> labels;
  for (const auto& lp : pipeline::sample_labeled_pairs(die_of, positives, negatives, seed)) {
    pairs.emplace_back(lp.a, lp.b);
    labels.push_back(lp.same_die);
  }
  const auto hist = pipeline::pair_histograms(pipeline::scans_from_clouds(corpus.clouds()), pairs, config);
  std::vector<sim::DistanceHistogram> features;
  std::vector<bool> kept;
  for (std::size_t k = 0; k < hist.size(); ++k)
    if (hist[k]) {
      features.push_back(*hist[k]);
      kept.push_back(labels[k]);
    }
  sim::TrainingConfig tc;
  tc.l2 = l2;
  return sim::train_logistic(features, kept, tc);
}

}  // namespace testing_support
