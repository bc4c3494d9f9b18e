#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "patchvlm/numcore/tensor.hpp"
#include "patchvlm/patch/patch.hpp"
#include "patchvlm/prompt/prompt.hpp"
#include "patchvlm/toyvlm/model.hpp"
#include "patchvlm/toyvlm/vocab.hpp"
#include "patchvlm/world/world.hpp"

namespace patchvlm::eval {

using numcore::Tensor2;
using prompt::DetectionMode;
using prompt::PromptTemplate;
using toyvlm::ModelParams;
using toyvlm::Vocab;

class AlignmentError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// ---- metrics ---------------------------------------------------------------

// Positive class is "yes".
struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::size_t total() const { return tp + fp + fn + tn; }
  void add(bool label, bool predicted);
};

// Raw ratios in [0, 1]. Percentages are produced only when rendering.
struct MetricReport {
  std::string tag;
  std::size_t samples = 0;
  std::size_t excluded = 0;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

MetricReport metrics(const Confusion& c, std::string tag = {});
// 2PR/(P+R), 0 when P+R = 0. Units are whatever P and R are in.
double f1_score(double precision, double recall);
// Half-up rounding to `decimals` places.
double round_half_up(double value, int decimals);
// ratio -> "xx.xx" percent string.
std::string percent(double ratio);

// ---- evaluation --------------------------------------------------------------

struct EvalRecord {
  int sample_id = 0;
  int scene_id = 0;
  int category = 0;
  bool label = false;
  bool predicted = false;
  double logit_yes = 0.0;
  double logit_no = 0.0;
  bool detection_correct = false;
};

// Everything a run evaluates against. Features are encode_scene() of each
// corpus scene under `params`.
struct Benchmark {
  const Vocab* vocab = nullptr;
  const ModelParams* params = nullptr;
  std::vector<toyvlm::Scene> corpus;
  std::vector<Tensor2> features;
  world::QASet qa;
  std::vector<world::DetectionSet> detections;
};

// Encodes the corpus under `params`.
Benchmark make_benchmark(const Vocab& vocab, const ModelParams& params,
                         std::vector<toyvlm::Scene> corpus, world::QASet qa,
                         std::vector<world::DetectionSet> detections);

struct EvalSpec {
  PromptTemplate templ = PromptTemplate::kP1Baseline;
  DetectionMode mode = DetectionMode::kNone;
  const Tensor2* block = nullptr;  // virtual rows; required iff the template uses them
  world::Split split = world::Split::kTest;
  int workers = 1;
  std::string tag;
};

struct EvalResult {
  MetricReport report;
  std::vector<EvalRecord> records;  // in sample-id order
  std::vector<std::string> errors;  // one per excluded sample
};

// The prompt for one sample: the template's segments plus the question,
// without the answer. P1 never sees detections.
toyvlm::TokenSequence build_prompt(const Benchmark& bench, const world::QASample& q,
                                   PromptTemplate templ, DetectionMode mode, int n);

// Supervised examples from the train split, for patch::train.
std::vector<patch::TrainingExample> training_set(const Benchmark& bench, PromptTemplate templ,
                                                 DetectionMode mode, int n);

EvalResult evaluate(const Benchmark& bench, const EvalSpec& spec);

// ---- contingency -------------------------------------------------------------

struct ContingencyTable {
  std::size_t cd_ci = 0;  // correct detection, correct inference
  std::size_t cd_wi = 0;
  std::size_t wd_ci = 0;
  std::size_t wd_wi = 0;
  std::size_t total() const { return cd_ci + cd_wi + wd_ci + wd_wi; }
};

struct DetectionFlag {
  int sample_id = 0;
  bool correct = false;
};

// Records and flags must list the same sample ids in the same order.
ContingencyTable contingency(std::span<const EvalRecord> records,
                             std::span<const DetectionFlag> flags);
// Uses each record's own detection_correct field.
ContingencyTable contingency(std::span<const EvalRecord> records);

struct HallucinationSummary {
  // Headline accounting: wrong inferences under correct detection plus the
  // correct-inference cases under wrong detection.
  std::size_t hallucinations = 0;
  double share = 0.0;
  double dominant_fraction = 0.0;  // cd_wi / hallucinations
  // Strict accounting: every wrong inference, nothing else.
  std::size_t strict_hallucinations = 0;
  double strict_share = 0.0;
  double strict_dominant_fraction = 0.0;
};

HallucinationSummary summarize(const ContingencyTable& t);

// ---- ablations ---------------------------------------------------------------

struct CellSpec {
  std::string name;
  PromptTemplate templ = PromptTemplate::kPatchStandard;
  DetectionMode mode = DetectionMode::kCategory;
  patch::TrainConfig train;  // n and init live here; ignored for P1/P2
};

struct CellResult {
  CellSpec spec;
  bool ok = false;
  std::string error;
  MetricReport report;
  std::vector<double> epoch_loss;
  patch::VirtualTokenBlock block;
};

// Trains (when the template has virtual tokens) and evaluates every cell. A
// failing cell is recorded and the grid continues.
std::vector<CellResult> run_ablations(const Benchmark& bench, std::span<const CellSpec> cells,
                                      int workers = 1);

// ---- attention export ----------------------------------------------------------

struct AttentionExport {
  std::vector<std::string> tokens;
  std::vector<toyvlm::Segment> segments;
  std::vector<std::vector<double>> rows;  // layers x sequence length
};

AttentionExport export_attention(const Benchmark& bench, const toyvlm::TokenSequence& prompt,
                                 int scene_id, const Tensor2* block);

// Header: "layer" then one "index:SEGMENT:token" column per position.
void write_attention(std::ostream& out, const AttentionExport& a, char delim = '\t');

struct AttentionFocus {
  double query_token = 0.0;     // weight on the question's category token
  double detection_mean = 0.0;  // mean weight over DETECTION positions (0 if none)
};
// Per layer; the queried category token is the last category token of the
// QUESTION segment.
std::vector<AttentionFocus> attention_focus(const AttentionExport& a, const Vocab& vocab);

// ---- rendering -----------------------------------------------------------------

// Tab-separated: name, samples, excluded, then raw accuracy/precision/recall/F1.
void write_results_tsv(std::ostream& out, std::span<const MetricReport> rows);
// Aligned text with percentages rounded half-up to two decimals.
void write_results_text(std::ostream& out, std::span<const MetricReport> rows);
// One JSON object per line, with a versioned header line.
void write_records(std::ostream& out, std::span<const EvalRecord> records);
std::vector<EvalRecord> read_records(std::istream& in);

}  // namespace patchvlm::eval
