#include "patchvlm/world/world.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

namespace patchvlm::world {
namespace {

std::mt19937_64 scene_rng(std::uint64_t seed, int scene_id, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(scene_id), static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

int draw_weighted(std::span<const double> weights, std::mt19937_64& rng) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(total > 0.0)) return -1;
  std::uniform_real_distribution<double> u(0.0, total);
  double r = u(rng);
  int last_positive = -1;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    last_positive = static_cast<int>(i);
    if (r < weights[i]) return static_cast<int>(i);
    r -= weights[i];
  }
  return last_positive;
}

toyvlm::BBox random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> size(0.1, 0.45);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double w = size(rng);
  const double h = size(rng);
  const double x1 = unit(rng) * (1.0 - w);
  const double y1 = unit(rng) * (1.0 - h);
  return {x1, y1, x1 + w, y1 + h};
}

}  // namespace

void validate(const CorpusConfig& cfg) {
  if (cfg.categories < 1) throw std::invalid_argument("corpus: need at least one category");
  if (cfg.scenes < 0) throw std::invalid_argument("corpus: negative scene count");
  if (cfg.min_objects < 1 || cfg.max_objects < cfg.min_objects) {
    throw std::invalid_argument("corpus: need 1 <= min_objects <= max_objects");
  }
  if (cfg.theme_groups < 1) throw std::invalid_argument("corpus: theme_groups must be >= 1");
  if (!(cfg.theme_affinity >= 0.0)) throw std::invalid_argument("corpus: negative theme affinity");
  if (!(cfg.duplicate_prob >= 0.0 && cfg.duplicate_prob <= 1.0)) {
    throw std::invalid_argument("corpus: duplicate_prob outside [0,1]");
  }
  for (const auto& pw : cfg.pair_weights) {
    if (pw.a < 0 || pw.b < 0 || pw.a >= cfg.categories || pw.b >= cfg.categories) {
      throw std::invalid_argument("corpus: pair weight category out of range");
    }
    if (!(pw.weight >= 0.0)) throw std::invalid_argument("corpus: negative pair weight");
  }
}

std::vector<std::vector<double>> affinity_matrix(const CorpusConfig& cfg) {
  const auto n = static_cast<std::size_t>(cfg.categories);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg.seed ^ 0x5eedULL);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> group(n);
  for (std::size_t i = 0; i < n; ++i) {
    group[static_cast<std::size_t>(order[i])] = static_cast<int>(i % static_cast<std::size_t>(cfg.theme_groups));
  }
  std::vector<std::vector<double>> a(n, std::vector<double>(n, 1.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j && group[i] == group[j]) a[i][j] = cfg.theme_affinity;
    }
  }
  for (const auto& pw : cfg.pair_weights) {
    a[static_cast<std::size_t>(pw.a)][static_cast<std::size_t>(pw.b)] = pw.weight;
    a[static_cast<std::size_t>(pw.b)][static_cast<std::size_t>(pw.a)] = pw.weight;
  }
  return a;
}

std::vector<Scene> generate_corpus(const CorpusConfig& cfg) {
  validate(cfg);
  const auto affinity = affinity_matrix(cfg);
  const auto n = static_cast<std::size_t>(cfg.categories);
  std::mt19937_64 rng(cfg.seed);
  std::vector<Scene> corpus;
  corpus.reserve(static_cast<std::size_t>(cfg.scenes));
  for (int s = 0; s < cfg.scenes; ++s) {
    std::uniform_int_distribution<int> distinct_dist(cfg.min_objects, cfg.max_objects);
    const int distinct = std::min(distinct_dist(rng), cfg.categories);
    std::vector<int> present;
    std::vector<double> weights(n);
    for (int k = 0; k < distinct; ++k) {
      for (std::size_t c = 0; c < n; ++c) {
        const bool taken = std::find(present.begin(), present.end(), static_cast<int>(c)) != present.end();
        if (taken) {
          weights[c] = 0.0;
        } else if (present.empty()) {
          weights[c] = 1.0;
        } else {
          double sum = 0.0;
          for (int p : present) sum += affinity[static_cast<std::size_t>(p)][c];
          weights[c] = sum / static_cast<double>(present.size());
        }
      }
      int c = draw_weighted(weights, rng);
      if (c < 0) {
        // Every remaining category has zero affinity; fall back to uniform.
        for (std::size_t i = 0; i < n; ++i) {
          const bool taken = std::find(present.begin(), present.end(), static_cast<int>(i)) != present.end();
          weights[i] = taken ? 0.0 : 1.0;
        }
        c = draw_weighted(weights, rng);
      }
      present.push_back(c);
    }

    Scene scene;
    scene.id = s;
    for (int c : present) scene.objects.push_back({c, random_box(rng)});
    std::bernoulli_distribution dup(cfg.duplicate_prob);
    for (int c : present) {
      if (static_cast<int>(scene.objects.size()) >= cfg.max_objects) break;
      if (dup(rng)) scene.objects.push_back({c, random_box(rng)});
    }
    corpus.push_back(std::move(scene));
  }
  return corpus;
}

Cooccurrence::Cooccurrence(std::span<const Scene> corpus, int num_categories)
    : n_(static_cast<std::size_t>(num_categories)), counts_(n_ * n_, 0) {
  for (const auto& scene : corpus) {
    const auto cats = scene.categories();
    for (int a : cats) {
      for (int b : cats) {
        counts_[static_cast<std::size_t>(a) * n_ + static_cast<std::size_t>(b)] += 1;
      }
    }
  }
}

void validate(const OracleConfig& cfg) {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) {
      throw std::invalid_argument(std::string("oracle: ") + name + " outside [0,1]");
    }
  };
  prob(cfg.p_miss, "p_miss");
  prob(cfg.p_false, "p_false");
  prob(cfg.p_swap, "p_swap");
  if (!(cfg.jitter_sigma >= 0.0)) throw std::invalid_argument("oracle: negative jitter sigma");
}

DetectStats& DetectStats::operator+=(const DetectStats& o) {
  true_objects += o.true_objects;
  missed += o.missed;
  swapped += o.swapped;
  spurious += o.spurious;
  return *this;
}

double DetectStats::miss_rate() const {
  return true_objects == 0 ? 0.0 : static_cast<double>(missed) / static_cast<double>(true_objects);
}

double DetectStats::swap_rate() const {
  const std::size_t kept = true_objects - missed;
  return kept == 0 ? 0.0 : static_cast<double>(swapped) / static_cast<double>(kept);
}

double DetectStats::false_rate() const {
  return true_objects == 0 ? 0.0
                           : static_cast<double>(spurious) / static_cast<double>(true_objects);
}

DetectionSet detect(const Scene& scene, const OracleConfig& cfg, std::uint64_t seed,
                    int num_categories, int coord_bins, const Cooccurrence* cooc) {
  validate(cfg);
  auto rng = scene_rng(seed, scene.id, 0xde7ec7ULL);
  std::bernoulli_distribution miss(cfg.p_miss);
  std::bernoulli_distribution swap(cfg.p_swap);
  std::bernoulli_distribution spurious(cfg.p_false);
  std::normal_distribution<double> jitter(0.0, 1.0);
  const auto present = scene.categories();

  auto jittered = [&](toyvlm::BBox b) {
    if (cfg.jitter_sigma == 0.0) return b;
    auto clamp01 = [](double v) { return std::clamp(v, 0.0, 1.0); };
    double x1 = clamp01(b.x1 + cfg.jitter_sigma * jitter(rng));
    double y1 = clamp01(b.y1 + cfg.jitter_sigma * jitter(rng));
    double x2 = clamp01(b.x2 + cfg.jitter_sigma * jitter(rng));
    double y2 = clamp01(b.y2 + cfg.jitter_sigma * jitter(rng));
    if (x1 > x2) std::swap(x1, x2);
    if (y1 > y2) std::swap(y1, y2);
    return toyvlm::BBox{x1, y1, x2, y2};
  };

  auto spurious_category = [&]() {
    std::vector<double> w(static_cast<std::size_t>(num_categories), 0.0);
    for (int c = 0; c < num_categories; ++c) {
      if (std::binary_search(present.begin(), present.end(), c)) continue;
      double score = 1.0;
      if (cooc != nullptr) {
        for (int p : present) score += cooc->count(p, c);
      }
      w[static_cast<std::size_t>(c)] = score;
    }
    return draw_weighted(w, rng);
  };

  DetectionSet out;
  out.scene_id = scene.id;
  for (const auto& obj : scene.objects) {
    ++out.stats.true_objects;
    const bool missed = miss(rng);
    if (missed) {
      ++out.stats.missed;
    } else {
      int category = obj.category;
      if (swap(rng) && num_categories > 1) {
        std::uniform_int_distribution<int> other(0, num_categories - 2);
        const int c = other(rng);
        category = c >= obj.category ? c + 1 : c;
        ++out.stats.swapped;
      }
      out.detections.push_back(prompt::quantize_detection(category, jittered(obj.box), coord_bins));
    }
    if (spurious(rng)) {
      const int c = spurious_category();
      if (c >= 0) {
        std::uniform_real_distribution<double> size(0.1, 0.45);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        const double w = size(rng);
        const double h = size(rng);
        const double x1 = unit(rng) * (1.0 - w);
        const double y1 = unit(rng) * (1.0 - h);
        out.detections.push_back(
            prompt::quantize_detection(c, {x1, y1, x1 + w, y1 + h}, coord_bins));
        ++out.stats.spurious;
      }
    }
  }
  prompt::sort_detections(out.detections);
  return out;
}

std::vector<DetectionSet> detect_all(std::span<const Scene> corpus, const OracleConfig& cfg,
                                     std::uint64_t seed, int num_categories, int coord_bins,
                                     const Cooccurrence* cooc) {
  std::vector<DetectionSet> out;
  out.reserve(corpus.size());
  for (const auto& s : corpus) out.push_back(detect(s, cfg, seed, num_categories, coord_bins, cooc));
  return out;
}

bool detection_correct(std::span<const Detection> dets, const Scene& scene, int category) {
  const auto reported = std::count_if(dets.begin(), dets.end(),
                                      [&](const Detection& d) { return d.category == category; });
  return reported == scene.count(category);
}

std::string_view split_name(Split s) { return s == Split::kTrain ? "train" : "test"; }

void validate(const QAConfig& cfg) {
  if (cfg.k_per_scene < 1) throw std::invalid_argument("qa: k_per_scene must be >= 1");
  if (!(cfg.train_fraction >= 0.0 && cfg.train_fraction <= 1.0)) {
    throw std::invalid_argument("qa: train_fraction outside [0,1]");
  }
}

QASet make_pope_qa(std::span<const Scene> corpus, int num_categories, const QAConfig& cfg) {
  validate(cfg);
  const Cooccurrence cooc(corpus, num_categories);
  const auto k = static_cast<std::size_t>(cfg.k_per_scene);

  struct Pending {
    int scene_id;
    std::vector<std::pair<int, bool>> questions;
  };
  std::vector<Pending> usable;
  QASet out;
  for (const auto& scene : corpus) {
    auto present = scene.categories();
    const std::size_t absent = static_cast<std::size_t>(num_categories) - present.size();
    if (present.size() < k || absent < k) {
      out.skipped_scenes.push_back(scene.id);
      continue;
    }
    auto rng = scene_rng(cfg.seed, scene.id, 0x9a9aULL);
    std::shuffle(present.begin(), present.end(), rng);
    Pending p{scene.id, {}};
    std::vector<int> used;
    for (std::size_t i = 0; i < k; ++i) {
      const int pos = present[i];
      int best = -1;
      for (int c = 0; c < num_categories; ++c) {
        if (scene.contains(c) || std::find(used.begin(), used.end(), c) != used.end()) continue;
        if (best < 0 || cooc.count(pos, c) > cooc.count(pos, best)) best = c;
      }
      used.push_back(best);
      p.questions.emplace_back(pos, true);
      p.questions.emplace_back(best, false);
    }
    usable.push_back(std::move(p));
  }
  if (!out.skipped_scenes.empty()) {
    std::cerr << "warning: skipped " << out.skipped_scenes.size()
              << " scene(s) without enough present/absent categories for k="
              << cfg.k_per_scene << "\n";
  }

  std::vector<std::size_t> order(usable.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 split_rng(cfg.seed);
  std::shuffle(order.begin(), order.end(), split_rng);
  const auto n_train = static_cast<std::size_t>(
      std::llround(cfg.train_fraction * static_cast<double>(usable.size())));
  std::vector<Split> split(usable.size(), Split::kTest);
  for (std::size_t i = 0; i < n_train; ++i) split[order[i]] = Split::kTrain;

  int next_id = 0;
  for (std::size_t u = 0; u < usable.size(); ++u) {
    for (const auto& [category, label] : usable[u].questions) {
      out.samples.push_back({next_id++, usable[u].scene_id, category, label, split[u]});
    }
  }
  return out;
}

}  // namespace patchvlm::world
