#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "patchvlm/eval/eval.hpp"
#include "patchvlm/numcore/kernels.hpp"
#include "reference_values.hpp"
#include "support.hpp"

using namespace patchvlm;
using namespace patchvlm::eval;
using testing_support::default_vocab;

namespace {

ContingencyTable table_of(const reference::Counts& c) { return {c.cd_ci, c.cd_wi, c.wd_ci, c.wd_wi}; }

// Records realizing a contingency table, with detection flags on the records.
std::vector<EvalRecord> records_for(const reference::Counts& c) {
  std::vector<EvalRecord> out;
  auto add = [&](std::size_t count, bool det_ok, bool inf_ok) {
    for (std::size_t i = 0; i < count; ++i) {
      EvalRecord r;
      r.sample_id = static_cast<int>(out.size());
      r.label = out.size() % 2 == 0;
      r.predicted = inf_ok ? r.label : !r.label;
      r.detection_correct = det_ok;
      out.push_back(r);
    }
  };
  add(c.cd_ci, true, true);
  add(c.cd_wi, true, false);
  add(c.wd_ci, false, true);
  add(c.wd_wi, false, false);
  return out;
}

const toyvlm::ModelParams& random_model() {
  static const auto p = toyvlm::ModelParams::init({}, default_vocab());
  return p;
}

const Benchmark& small_bench() {
  static const Benchmark b = [] {
    world::CorpusConfig cc;
    cc.scenes = 24;
    auto corpus = world::generate_corpus(cc);
    auto qa = world::make_pope_qa(corpus, cc.categories, {});
    auto dets = world::detect_all(corpus, {0.3, 0.3, 0.1, 0.01}, 2, cc.categories, 100);
    return make_benchmark(default_vocab(), random_model(), std::move(corpus), std::move(qa),
                          std::move(dets));
  }();
  return b;
}

std::size_t test_count(const Benchmark& b) {
  std::size_t n = 0;
  for (const auto& q : b.qa.samples) n += q.split == world::Split::kTest;
  return n;
}

}  // namespace

// ---- metrics -------------------------------------------------------------------

TEST(Metrics, F1MatchesEveryPublishedRow) {
  for (const auto& row : reference::kPopeRows) {
    EXPECT_NEAR(f1_score(row.precision, row.recall), row.f1, 0.02) << row.model;
  }
  EXPECT_EQ(f1_score(0, 0), 0.0);
}

TEST(Metrics, ConfusionAgainstRecount) {
  std::mt19937_64 rng(11);
  std::bernoulli_distribution coin(0.5);
  Confusion c;
  std::size_t correct = 0, pred_yes = 0, true_yes = 0, hit = 0;
  for (int i = 0; i < 997; ++i) {
    const bool label = coin(rng), pred = coin(rng);
    c.add(label, pred);
    correct += label == pred;
    pred_yes += pred;
    true_yes += label;
    hit += label && pred;
  }
  const auto m = metrics(c, "x");
  EXPECT_EQ(m.samples, 997u);
  EXPECT_DOUBLE_EQ(m.accuracy, correct / 997.0);
  EXPECT_DOUBLE_EQ(m.precision, static_cast<double>(hit) / pred_yes);
  EXPECT_DOUBLE_EQ(m.recall, static_cast<double>(hit) / true_yes);
}

TEST(Metrics, OracleAndDegenerateAnswerers) {
  Confusion oracle, always_yes, always_no;
  for (int i = 0; i < 100; ++i) {
    const bool label = i % 2 == 0;
    oracle.add(label, label);
    always_yes.add(label, true);
    always_no.add(label, false);
  }
  const auto o = metrics(oracle);
  EXPECT_EQ(o.accuracy, 1.0);
  EXPECT_EQ(o.f1, 1.0);
  const auto y = metrics(always_yes);
  EXPECT_EQ(y.precision, 0.5);
  EXPECT_EQ(y.recall, 1.0);
  const auto n = metrics(always_no);
  EXPECT_EQ(n.precision, 0.0);
  EXPECT_EQ(n.f1, 0.0);
  EXPECT_EQ(n.accuracy, 0.5);
}

TEST(Metrics, PercentRoundsHalfUp) {
  EXPECT_EQ(percent(0.13765), "13.77");
  EXPECT_EQ(percent(0.137649), "13.76");
  EXPECT_EQ(percent(1.0), "100.00");
  EXPECT_EQ(percent(0.0), "0.00");
  EXPECT_EQ(round_half_up(82.175, 2), 82.18);
}

// ---- contingency -----------------------------------------------------------------

TEST(Contingency, PublishedCountsReproduceStatedAccounting) {
  const auto s = summarize(table_of(reference::kPrompt1));
  EXPECT_EQ(s.hallucinations, reference::kPrompt1Hallucinations);
  EXPECT_NEAR(100 * s.share, reference::kPrompt1SharePercent, 0.01);
  EXPECT_NEAR(100 * s.dominant_fraction, reference::kPrompt1DominantPercent, 0.01);
  EXPECT_EQ(percent(s.share), "13.77");
  EXPECT_EQ(percent(s.dominant_fraction), "74.58");
  EXPECT_EQ(s.strict_hallucinations, 308u + 191u);
}

TEST(Contingency, SecondTableThroughTheSamePath) {
  const auto& c = reference::kPrompt2;
  const auto records = records_for(c);
  const auto t = contingency(records);
  EXPECT_EQ(t.cd_ci, c.cd_ci);
  EXPECT_EQ(t.cd_wi, c.cd_wi);
  EXPECT_EQ(t.wd_ci, c.wd_ci);
  EXPECT_EQ(t.wd_wi, c.wd_wi);
  const auto s = summarize(t);
  const double total = c.cd_ci + c.cd_wi + c.wd_ci + c.wd_wi;
  EXPECT_EQ(s.hallucinations, c.cd_wi + c.wd_ci);
  EXPECT_DOUBLE_EQ(s.share, (c.cd_wi + c.wd_ci) / total);
  EXPECT_DOUBLE_EQ(s.dominant_fraction, static_cast<double>(c.cd_wi) / (c.cd_wi + c.wd_ci));
  EXPECT_DOUBLE_EQ(s.strict_share, (c.cd_wi + c.wd_wi) / total);
}

TEST(Contingency, ExternalFlagsMustAlign) {
  auto records = records_for({3, 1, 1, 1});
  std::vector<DetectionFlag> flags;
  for (const auto& r : records) flags.push_back({r.sample_id, r.detection_correct});
  const auto t = contingency(records, flags);
  EXPECT_EQ(t.cd_ci, 3u);
  EXPECT_EQ(t.total(), 6u);
  flags.pop_back();
  EXPECT_THROW(contingency(records, flags), AlignmentError);
  flags.push_back({99, true});
  EXPECT_THROW(contingency(records, flags), AlignmentError);
}

TEST(Contingency, EmptyTableSummarizesToZero) {
  const auto s = summarize({});
  EXPECT_EQ(s.hallucinations, 0u);
  EXPECT_EQ(s.share, 0.0);
  EXPECT_EQ(s.dominant_fraction, 0.0);
}

// ---- evaluation ----------------------------------------------------------------------

TEST(Evaluate, RecordsMatchRecountAndDetections) {
  const auto& b = small_bench();
  EvalSpec spec;
  spec.templ = PromptTemplate::kP2Hard;
  spec.mode = DetectionMode::kCategory;
  const auto r = evaluate(b, spec);
  ASSERT_TRUE(r.errors.empty());
  ASSERT_EQ(r.records.size(), test_count(b));
  Confusion c;
  for (std::size_t i = 0; i < r.records.size(); ++i) {
    const auto& rec = r.records[i];
    if (i > 0) EXPECT_LT(r.records[i - 1].sample_id, rec.sample_id);
    const auto& q = b.qa.samples[static_cast<std::size_t>(rec.sample_id)];
    EXPECT_EQ(rec.label, q.label);
    EXPECT_EQ(rec.predicted, rec.logit_yes > rec.logit_no);
    EXPECT_EQ(rec.detection_correct,
              world::detection_correct(b.detections[q.scene_id].detections, b.corpus[q.scene_id],
                                       q.category));
    c.add(rec.label, rec.predicted);
  }
  const auto m = metrics(c);
  EXPECT_EQ(r.report.accuracy, m.accuracy);
  EXPECT_EQ(r.report.f1, m.f1);
}

TEST(Evaluate, CachedPrefixMatchesFullForward) {
  const auto& b = small_bench();
  EvalSpec spec;
  spec.templ = PromptTemplate::kPatchStandard;
  spec.mode = DetectionMode::kCategory;
  const auto block = testing_support::random_tensor(5, 32, 3, 0.2);
  spec.block = &block;
  const auto r = evaluate(b, spec);
  for (std::size_t i = 0; i < r.records.size(); i += 7) {
    const auto& rec = r.records[i];
    const auto& q = b.qa.samples[static_cast<std::size_t>(rec.sample_id)];
    const auto prompt = build_prompt(b, q, spec.templ, spec.mode, 5);
    const auto logits = toyvlm::forward(b.features[q.scene_id], prompt, &block, random_model()).logits;
    const auto last = logits.row(prompt.size() - 1);
    EXPECT_NEAR(rec.logit_yes, last[default_vocab().yes()], 1e-12);
    EXPECT_NEAR(rec.logit_no, last[default_vocab().no()], 1e-12);
  }
}

TEST(Evaluate, WorkerCountDoesNotChangeResults) {
  const auto& b = small_bench();
  EvalSpec spec;
  spec.templ = PromptTemplate::kP2Hard;
  spec.mode = DetectionMode::kPlaceholder;
  const auto one = evaluate(b, spec);
  spec.workers = 3;
  const auto three = evaluate(b, spec);
  ASSERT_EQ(one.records.size(), three.records.size());
  for (std::size_t i = 0; i < one.records.size(); ++i) {
    EXPECT_EQ(one.records[i].logit_yes, three.records[i].logit_yes);
    EXPECT_EQ(one.records[i].logit_no, three.records[i].logit_no);
  }
}

TEST(Evaluate, TemplateMisuseIsRejected) {
  const auto& b = small_bench();
  EvalSpec spec;
  const auto block = testing_support::random_tensor(2, 32, 1);
  spec.block = &block;
  EXPECT_THROW(evaluate(b, spec), prompt::TemplateError);
  spec.block = nullptr;
  spec.mode = DetectionMode::kCategory;  // P1 ignores detections entirely
  EXPECT_NO_THROW(evaluate(b, spec));
}

// ---- ablations -----------------------------------------------------------------------

TEST(Ablations, ZeroVirtualTokensReduceToTheBaselines) {
  const auto& b = small_bench();
  auto cell = [](std::string name, DetectionMode mode) {
    CellSpec c;
    c.name = std::move(name);
    c.mode = mode;
    c.train.n = 0;
    return c;
  };
  const std::vector<CellSpec> cells{cell("n0-none", DetectionMode::kNone),
                                    cell("n0-category", DetectionMode::kCategory)};
  const auto grid = run_ablations(b, cells);
  ASSERT_TRUE(grid[0].ok && grid[1].ok);
  EXPECT_TRUE(grid[0].epoch_loss.empty());

  EvalSpec p1;
  EvalSpec p2;
  p2.templ = PromptTemplate::kP2Hard;
  p2.mode = DetectionMode::kCategory;
  for (auto [spec, row] : {std::pair{p1, 0}, std::pair{p2, 1}}) {
    const auto base = evaluate(b, spec).report;
    const auto& got = grid[static_cast<std::size_t>(row)].report;
    EXPECT_EQ(got.accuracy, base.accuracy);
    EXPECT_EQ(got.precision, base.precision);
    EXPECT_EQ(got.recall, base.recall);
  }
}

TEST(Ablations, FailingCellDoesNotStopTheGrid) {
  const auto& b = small_bench();
  CellSpec bad;
  bad.name = "too many";
  bad.train.n = default_vocab().reserved_refs() + 1;
  CellSpec good;
  good.name = "hard";
  good.templ = PromptTemplate::kP2Hard;
  const std::vector<CellSpec> cells{bad, good};
  const auto grid = run_ablations(b, cells);
  ASSERT_EQ(grid.size(), 2u);
  EXPECT_FALSE(grid[0].ok);
  EXPECT_FALSE(grid[0].error.empty());
  EXPECT_EQ(grid[0].report.tag, "too many");
  EXPECT_TRUE(grid[1].ok);
  EXPECT_EQ(grid[1].report.samples, test_count(b));
}

TEST(Ablations, TrainedCellKeepsTheModelFrozen) {
  const auto& b = small_bench();
  CellSpec c;
  c.name = "patch";
  c.train.n = 4;
  c.train.epochs = 1;
  const auto before = random_model().hash();
  const auto grid = run_ablations(b, std::vector{c});
  ASSERT_TRUE(grid[0].ok) << grid[0].error;
  EXPECT_EQ(grid[0].epoch_loss.size(), 1u);
  EXPECT_TRUE(grid[0].block.trained);
  EXPECT_EQ(random_model().hash(), before);
}

// ---- attention --------------------------------------------------------------------------

TEST(Attention, RowsAreDistributionsOverThePrompt) {
  const auto& b = small_bench();
  const auto& q = b.qa.samples[3];
  const auto block = testing_support::random_tensor(6, 32, 8, 0.2);
  const auto prompt = build_prompt(b, q, PromptTemplate::kPatchStandard, DetectionMode::kCategory, 6);
  const auto a = export_attention(b, prompt, q.scene_id, &block);
  ASSERT_EQ(a.rows.size(), static_cast<std::size_t>(random_model().config.layers));
  ASSERT_EQ(a.tokens.size(), prompt.size());
  for (const auto& row : a.rows) {
    ASSERT_EQ(row.size(), prompt.size());
    EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-12);
    for (double w : row) EXPECT_GE(w, 0.0);
  }

  // Focus oracle: the queried category is the last token of the question.
  const auto focus = attention_focus(a, default_vocab());
  const std::size_t query = prompt.size() - 1;
  ASSERT_EQ(prompt.tokens[query], default_vocab().category_token(q.category));
  for (std::size_t l = 0; l < a.rows.size(); ++l) {
    double sum = 0;
    int count = 0;
    for (std::size_t i = 0; i < prompt.size(); ++i) {
      if (prompt.segments[i] == toyvlm::Segment::kDetection) {
        sum += a.rows[l][i];
        ++count;
      }
    }
    EXPECT_EQ(focus[l].query_token, a.rows[l][query]);
    EXPECT_NEAR(focus[l].detection_mean, count ? sum / count : 0.0, 1e-15);
  }

  std::ostringstream out;
  write_attention(out, a);
  EXPECT_EQ(out.str().substr(0, 6), "layer\t");
  EXPECT_NE(out.str().find(":VIRTUAL:[ref1]"), std::string::npos);
}

// ---- rendering ----------------------------------------------------------------------------

TEST(Render, RecordsRoundTripExactly) {
  const auto& b = small_bench();
  EvalSpec spec;
  const auto r = evaluate(b, spec);
  std::stringstream s;
  write_records(s, r.records);
  const auto back = read_records(s);
  ASSERT_EQ(back.size(), r.records.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].sample_id, r.records[i].sample_id);
    EXPECT_EQ(back[i].logit_yes, r.records[i].logit_yes);
    EXPECT_EQ(back[i].logit_no, r.records[i].logit_no);
    EXPECT_EQ(back[i].detection_correct, r.records[i].detection_correct);
  }
  std::stringstream truncated("{\"format\":\"patchvlm-records\",\"version\":1,\"count\":2}\n");
  EXPECT_THROW(read_records(truncated), std::runtime_error);
}

TEST(Render, TablesShowRoundedPercentAndRawRatios) {
  MetricReport m;
  m.tag = "PATCH";
  m.samples = 900;
  m.accuracy = 0.13765;
  m.precision = 0.5;
  m.recall = 1.0;
  m.f1 = 2.0 / 3.0;
  std::ostringstream text, tsv;
  write_results_text(text, std::vector{m});
  write_results_tsv(tsv, std::vector{m});
  EXPECT_NE(text.str().find("13.77"), std::string::npos);
  EXPECT_NE(text.str().find("66.67"), std::string::npos);
  EXPECT_NE(tsv.str().find("PATCH\t900\t0\t0.13764999999999999"), std::string::npos);
}
