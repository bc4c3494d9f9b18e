#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <span>
#include <string_view>
#include <vector>

#include "patchvlm/prompt/prompt.hpp"
#include "patchvlm/toyvlm/scene.hpp"

namespace patchvlm::world {

using prompt::Detection;
using toyvlm::Scene;

struct PairWeight {
  int a = 0;
  int b = 0;
  double weight = 1.0;
};

struct CorpusConfig {
  int categories = 40;
  int scenes = 300;
  int min_objects = 3;  // distinct categories per scene
  int max_objects = 6;  // total objects per scene, duplicates included
  // Categories are split into theme groups; members of a group attract each
  // other with `theme_affinity`, everything else with 1.
  int theme_groups = 8;
  double theme_affinity = 4.0;
  double duplicate_prob = 0.15;
  std::vector<PairWeight> pair_weights;  // explicit overrides, symmetric
  std::uint64_t seed = 7;
};

void validate(const CorpusConfig& cfg);

// Symmetric categories x categories attraction used when drawing a scene.
std::vector<std::vector<double>> affinity_matrix(const CorpusConfig& cfg);

// Scenes are drawn one category at a time: the first uniformly, each next one
// (without replacement) with probability proportional to its mean affinity to
// the categories already present. Some objects then get a second instance.
std::vector<Scene> generate_corpus(const CorpusConfig& cfg);

// Number of scenes in which both categories appear (diagonal: scenes with the
// category at all).
class Cooccurrence {
 public:
  Cooccurrence(std::span<const Scene> corpus, int num_categories);
  int count(int a, int b) const {
    return counts_[static_cast<std::size_t>(a) * n_ + static_cast<std::size_t>(b)];
  }
  int num_categories() const { return static_cast<int>(n_); }

 private:
  std::size_t n_;
  std::vector<int> counts_;
};

struct OracleConfig {
  double p_miss = 0.0;
  double p_false = 0.0;  // per true object, chance of adding a spurious detection
  double p_swap = 0.0;   // per kept object, chance its category is replaced
  double jitter_sigma = 0.0;

  bool perfect() const { return p_miss == 0 && p_false == 0 && p_swap == 0 && jitter_sigma == 0; }
};

void validate(const OracleConfig& cfg);

struct DetectStats {
  std::size_t true_objects = 0;
  std::size_t missed = 0;
  std::size_t swapped = 0;
  std::size_t spurious = 0;

  DetectStats& operator+=(const DetectStats& o);
  double miss_rate() const;
  double swap_rate() const;   // over objects that were not missed
  double false_rate() const;  // spurious detections per true object
};

struct DetectionSet {
  int scene_id = 0;
  std::vector<Detection> detections;  // sorted, quantized
  DetectStats stats;
};

// Stand-in for a pretrained detection head. Seeded per (seed, scene id), so a
// scene's detections do not depend on which other scenes are processed.
// Spurious categories are drawn among absent categories, weighted by
// co-occurrence with what is present when `cooc` is given.
DetectionSet detect(const Scene& scene, const OracleConfig& cfg, std::uint64_t seed,
                    int num_categories, int coord_bins, const Cooccurrence* cooc = nullptr);

std::vector<DetectionSet> detect_all(std::span<const Scene> corpus, const OracleConfig& cfg,
                                     std::uint64_t seed, int num_categories, int coord_bins,
                                     const Cooccurrence* cooc = nullptr);

// Detection is correct for a question when it reports the queried category
// exactly as many times as the scene contains it.
bool detection_correct(std::span<const Detection> dets, const Scene& scene, int category);

enum class Split { kTrain, kTest };
std::string_view split_name(Split s);

struct QASample {
  int id = 0;
  int scene_id = 0;
  int category = 0;  // queried category
  bool label = false;
  Split split = Split::kTrain;
  friend bool operator==(const QASample&, const QASample&) = default;
};

struct QASet {
  std::vector<QASample> samples;
  std::vector<int> skipped_scenes;
};

struct QAConfig {
  int k_per_scene = 3;
  double train_fraction = 0.5;
  std::uint64_t seed = 11;
};

void validate(const QAConfig& cfg);

// Per usable scene: k present categories as positives, and for each positive
// the absent category that co-occurs with it most often (ties to the lower
// id, no repeats within a scene) as its negative. Scenes split into train and
// test as whole units.
QASet make_pope_qa(std::span<const Scene> corpus, int num_categories, const QAConfig& cfg);

// ---- persistence -------------------------------------------------------------
// One JSON object per line after a header line naming the format and
// version. Readers reject other formats and versions.

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kFormatVersion = 1;

void write_scenes(std::ostream& out, std::span<const Scene> corpus, int num_categories);
std::vector<Scene> read_scenes(std::istream& in);

void write_qa(std::ostream& out, const QASet& qa);
QASet read_qa(std::istream& in);

// The header carries the oracle config and seed that produced the sets.
void write_detections(std::ostream& out, std::span<const DetectionSet> sets,
                      const OracleConfig& cfg, std::uint64_t seed);
struct DetectionFile {
  OracleConfig config;
  std::uint64_t seed = 0;
  std::vector<DetectionSet> sets;
};
DetectionFile read_detections(std::istream& in);

}  // namespace patchvlm::world
