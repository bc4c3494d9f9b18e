#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "patchvlm/world/world.hpp"
#include "support.hpp"

using namespace patchvlm;
using namespace patchvlm::world;

namespace {

int cat(const char* name) {
  const auto& v = testing_support::default_vocab();
  return *v.category_of(v.id(name));
}

Scene scene_of(int id, std::vector<int> cats) {
  Scene s;
  s.id = id;
  double x = 0.0;
  for (int c : cats) {
    s.objects.push_back({c, {x, 0.1, x + 0.1, 0.3}});
    x += 0.12;
  }
  return s;
}

}  // namespace

TEST(Corpus, DeterministicForASeed) {
  CorpusConfig c;
  EXPECT_EQ(generate_corpus(c), generate_corpus(c));
  auto other = c;
  other.seed += 1;
  EXPECT_NE(generate_corpus(c), generate_corpus(other));
}

TEST(Corpus, ScenesAreValid) {
  CorpusConfig c;
  const auto corpus = generate_corpus(c);
  ASSERT_EQ(corpus.size(), 300u);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    EXPECT_EQ(corpus[i].id, static_cast<int>(i));
    EXPECT_NO_THROW(toyvlm::validate(corpus[i], c.categories, c.max_objects));
    EXPECT_GE(corpus[i].categories().size(), static_cast<std::size_t>(c.min_objects));
  }
}

TEST(Corpus, SingleCategoryConfig) {
  CorpusConfig c;
  c.categories = 1;
  c.min_objects = 1;
  c.max_objects = 3;
  c.theme_groups = 1;
  for (const auto& s : generate_corpus(c))
    for (const auto& o : s.objects) EXPECT_EQ(o.category, 0);
}

TEST(Corpus, InvalidConfigRejected) {
  CorpusConfig c;
  c.min_objects = 7;
  EXPECT_THROW(validate(c), std::invalid_argument);
  c = {};
  c.pair_weights.push_back({0, 99, 2.0});
  EXPECT_THROW(validate(c), std::invalid_argument);
}

// 2x2 presence table for (dog, leash) over 1,000 scenes against independence.
TEST(Corpus, PairWeightRaisesCooccurrenceChiSquared) {
  CorpusConfig c;
  c.scenes = 1000;
  c.theme_affinity = 1.0;  // every pair at baseline except the override
  c.pair_weights.push_back({cat("dog"), cat("leash"), 5.0});
  const auto corpus = generate_corpus(c);
  double n11 = 0, n10 = 0, n01 = 0, n00 = 0;
  for (const auto& s : corpus) {
    const bool a = s.contains(cat("dog")), b = s.contains(cat("leash"));
    (a ? (b ? n11 : n10) : (b ? n01 : n00)) += 1;
  }
  const double n = corpus.size();
  const double row[2] = {n11 + n10, n01 + n00}, col[2] = {n11 + n01, n10 + n00};
  const double obs[2][2] = {{n11, n10}, {n01, n00}};
  double chi2 = 0;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      const double e = row[i] * col[j] / n;
      chi2 += (obs[i][j] - e) * (obs[i][j] - e) / e;
    }
  EXPECT_GT(n11, row[0] * col[0] / n);
  EXPECT_GT(chi2, 10.83);  // p < 0.001 at one degree of freedom

  const Cooccurrence cooc(corpus, c.categories);
  EXPECT_EQ(cooc.count(cat("dog"), cat("leash")), static_cast<int>(n11));
  EXPECT_EQ(cooc.count(cat("leash"), cat("dog")), static_cast<int>(n11));
  EXPECT_EQ(cooc.count(cat("dog"), cat("dog")), static_cast<int>(n11 + n10));
}

TEST(Oracle, PerfectDetectorReproducesGroundTruth) {
  const auto corpus = generate_corpus({});
  for (const auto& s : corpus) {
    const auto d = detect(s, {}, 3, 40, 100);
    std::vector<prompt::Detection> truth;
    for (const auto& o : s.objects) truth.push_back(prompt::quantize_detection(o.category, o.box, 100));
    prompt::sort_detections(truth);
    EXPECT_EQ(d.detections, truth);
    for (int c : s.categories()) EXPECT_TRUE(detection_correct(d.detections, s, c));
  }
}

TEST(Oracle, MissEverythingGivesNothing) {
  OracleConfig o;
  o.p_miss = 1.0;
  for (const auto& s : generate_corpus({})) EXPECT_TRUE(detect(s, o, 3, 40, 100).detections.empty());
}

TEST(Oracle, MonteCarloRates) {
  CorpusConfig c;
  c.scenes = 2500;  // about 11,000 objects
  const auto corpus = generate_corpus(c);
  OracleConfig o{0.1, 0.05, 0.08, 0.0};
  const auto sets = detect_all(corpus, o, 17, 40, 100);
  DetectStats total;
  for (const auto& s : sets) total += s.stats;
  ASSERT_GE(total.true_objects, 10000u);
  EXPECT_NEAR(total.miss_rate(), 0.1, 0.01);
  EXPECT_NEAR(total.false_rate(), 0.05, 0.01);
  EXPECT_NEAR(total.swap_rate(), 0.08, 0.01);
}

TEST(Oracle, PerSceneSeedingIsIndependentOfBatch) {
  const auto corpus = generate_corpus({});
  OracleConfig o{0.3, 0.3, 0.1, 0.02};
  const auto all = detect_all(corpus, o, 9, 40, 100);
  EXPECT_EQ(detect(corpus[17], o, 9, 40, 100).detections, all[17].detections);
}

TEST(Oracle, DetectionCorrectCountsInstances) {
  const auto s = scene_of(0, {1, 1, 2});
  const auto one = prompt::quantize_detection(1, s.objects[0].box, 100);
  const auto two = prompt::quantize_detection(2, s.objects[2].box, 100);
  EXPECT_FALSE(detection_correct(std::vector{one, two}, s, 1));
  EXPECT_TRUE(detection_correct(std::vector{one, one, two}, s, 1));
  EXPECT_TRUE(detection_correct(std::vector{one, one}, s, 5));
  EXPECT_FALSE(detection_correct(std::vector{one, one, two}, s, 3) &&
               detection_correct(std::vector{one, one}, s, 2));
}

TEST(QA, AdversarialNegativeIsTheStrongestCooccurrer) {
  const int dog = cat("dog"), leash = cat("leash"), cup = cat("cup");
  std::vector<Scene> corpus{scene_of(0, {dog})};
  for (int i = 1; i <= 5; ++i) corpus.push_back(scene_of(i, {dog, leash}));
  for (int i = 6; i <= 8; ++i) corpus.push_back(scene_of(i, {dog, cup}));
  const auto qa = make_pope_qa(corpus, 40, {1, 0.5, 3});
  std::vector<QASample> first;
  for (const auto& q : qa.samples)
    if (q.scene_id == 0) first.push_back(q);
  ASSERT_EQ(first.size(), 2u);
  const auto& neg = first[0].label ? first[1] : first[0];
  EXPECT_FALSE(neg.label);
  EXPECT_EQ(neg.category, leash);
}

TEST(QA, SixQuestionsPerSceneHalfYes) {
  const auto corpus = generate_corpus({});
  const auto qa = make_pope_qa(corpus, 40, {});
  EXPECT_EQ(qa.samples.size(), 6 * (corpus.size() - qa.skipped_scenes.size()));
  EXPECT_EQ(qa.samples.size(), 1800u);
  std::size_t yes = 0;
  std::map<int, std::set<Split>> split_of_scene;
  std::map<int, int> per_scene;
  for (std::size_t i = 0; i < qa.samples.size(); ++i) {
    const auto& q = qa.samples[i];
    EXPECT_EQ(q.id, static_cast<int>(i));
    yes += q.label;
    EXPECT_EQ(q.label, corpus[q.scene_id].contains(q.category));
    split_of_scene[q.scene_id].insert(q.split);
    ++per_scene[q.scene_id];
  }
  EXPECT_EQ(2 * yes, qa.samples.size());
  for (const auto& [scene, splits] : split_of_scene) EXPECT_EQ(splits.size(), 1u) << scene;
  for (const auto& [scene, n] : per_scene) EXPECT_EQ(n, 6);
}

TEST(QA, SceneWithTooFewCategoriesIsSkipped) {
  std::vector<Scene> corpus{scene_of(0, {1, 2}), scene_of(1, {1, 2, 3})};
  const auto qa = make_pope_qa(corpus, 40, {});
  EXPECT_EQ(qa.skipped_scenes, std::vector<int>{0});
  EXPECT_EQ(qa.samples.size(), 6u);
}

TEST(Persistence, RoundTrips) {
  const auto corpus = generate_corpus({});
  const auto qa = make_pope_qa(corpus, 40, {});
  const OracleConfig o{0.2, 0.1, 0.05, 0.01};
  const auto dets = detect_all(corpus, o, 4, 40, 100);

  std::stringstream s1, s2, s3;
  write_scenes(s1, corpus, 40);
  write_qa(s2, qa);
  write_detections(s3, dets, o, 4);
  EXPECT_EQ(read_scenes(s1), corpus);
  const auto qa2 = read_qa(s2);
  EXPECT_EQ(qa2.samples, qa.samples);
  EXPECT_EQ(qa2.skipped_scenes, qa.skipped_scenes);
  const auto d2 = read_detections(s3);
  EXPECT_EQ(d2.seed, 4u);
  EXPECT_EQ(d2.config.p_false, 0.1);
  ASSERT_EQ(d2.sets.size(), dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    EXPECT_EQ(d2.sets[i].detections, dets[i].detections);
    EXPECT_EQ(d2.sets[i].stats.missed, dets[i].stats.missed);
  }
}

TEST(Persistence, RejectsWrongFormatVersionAndCount) {
  std::stringstream wrong("{\"format\":\"patchvlm-qa\",\"version\":1,\"count\":0,\"skipped_scenes\":[]}\n");
  EXPECT_THROW(read_scenes(wrong), FormatError);
  std::stringstream future("{\"format\":\"patchvlm-scenes\",\"version\":2,\"count\":0}\n");
  EXPECT_THROW(read_scenes(future), FormatError);
  std::stringstream short_file("{\"format\":\"patchvlm-scenes\",\"version\":1,\"count\":2}\n"
                               "{\"id\":0,\"objects\":[]}\n");
  EXPECT_THROW(read_scenes(short_file), FormatError);
  std::stringstream garbage("{\"format\":\"patchvlm-scenes\",\"version\":1,\"count\":1}\nnot json\n");
  EXPECT_THROW(read_scenes(garbage), FormatError);
}
