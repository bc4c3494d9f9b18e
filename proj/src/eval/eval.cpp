#include "patchvlm/eval/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "patchvlm/numcore/tape.hpp"

namespace patchvlm::eval {

using json = nlohmann::json;
using numcore::GradTape;
using numcore::Var;

void Confusion::add(bool label, bool predicted) {
  if (label && predicted) ++tp;
  else if (!label && predicted) ++fp;
  else if (label && !predicted) ++fn;
  else ++tn;
}

double f1_score(double precision, double recall) {
  const double s = precision + recall;
  return s > 0.0 ? 2.0 * precision * recall / s : 0.0;
}

MetricReport metrics(const Confusion& c, std::string tag) {
  MetricReport r;
  r.tag = std::move(tag);
  r.samples = c.total();
  const auto ratio = [](std::size_t num, std::size_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  r.accuracy = ratio(c.tp + c.tn, c.total());
  r.precision = ratio(c.tp, c.tp + c.fp);
  r.recall = ratio(c.tp, c.tp + c.fn);
  r.f1 = f1_score(r.precision, r.recall);
  return r;
}

double round_half_up(double value, int decimals) {
  const double scale = std::pow(10.0, decimals);
  // The nudge keeps values like 13.765 (stored as 13.76499...) rounding up.
  return std::floor(value * scale + 0.5 + 1e-9) / scale;
}

std::string percent(double ratio) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", round_half_up(100.0 * ratio, 2));
  return buf;
}

// ---- evaluation --------------------------------------------------------------

Benchmark make_benchmark(const Vocab& vocab, const ModelParams& params,
                         std::vector<toyvlm::Scene> corpus, world::QASet qa,
                         std::vector<world::DetectionSet> detections) {
  if (detections.size() != corpus.size()) {
    throw AlignmentError("benchmark: " + std::to_string(detections.size()) +
                         " detection sets for " + std::to_string(corpus.size()) + " scenes");
  }
  Benchmark b;
  b.vocab = &vocab;
  b.params = &params;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus[i].id != static_cast<int>(i) || detections[i].scene_id != static_cast<int>(i)) {
      throw AlignmentError("benchmark: scene ids must equal their corpus index");
    }
    b.features.push_back(toyvlm::encode_scene(corpus[i], params));
  }
  b.corpus = std::move(corpus);
  b.qa = std::move(qa);
  b.detections = std::move(detections);
  return b;
}

toyvlm::TokenSequence build_prompt(const Benchmark& bench, const world::QASample& q,
                                   PromptTemplate templ, DetectionMode mode, int n) {
  const auto& params = *bench.params;
  const auto image_rows = static_cast<std::size_t>(params.config.grid * params.config.grid);
  std::span<const prompt::Detection> dets;
  if (templ != PromptTemplate::kP1Baseline) {
    dets = bench.detections.at(static_cast<std::size_t>(q.scene_id)).detections;
  }
  return prompt::assemble(templ, image_rows, dets, mode,
                          prompt::question_tokens(q.category, *bench.vocab),
                          prompt::uses_virtual_tokens(templ) ? n : 0, *bench.vocab);
}

std::vector<patch::TrainingExample> training_set(const Benchmark& bench, PromptTemplate templ,
                                                 DetectionMode mode, int n) {
  std::vector<patch::TrainingExample> out;
  for (const auto& q : bench.qa.samples) {
    if (q.split != world::Split::kTrain) continue;
    patch::TrainingExample ex;
    ex.sequence = build_prompt(bench, q, templ, mode, n);
    prompt::append_answer(ex.sequence, q.label, *bench.vocab);
    ex.features = &bench.features.at(static_cast<std::size_t>(q.scene_id));
    ex.cache_key = q.scene_id;
    out.push_back(std::move(ex));
  }
  return out;
}

namespace {

std::size_t image_block_length(const toyvlm::TokenSequence& seq) {
  std::size_t i = 0;
  while (i < seq.size() && seq.segments[i] == toyvlm::Segment::kImage) ++i;
  return i;
}

toyvlm::PrefixState image_prefix(const Benchmark& bench, std::size_t scene,
                                 const toyvlm::TokenSequence& seq, std::size_t length) {
  GradTape tape;
  auto pv = toyvlm::bind_params(tape, *bench.params);
  Var feats = tape.constant_ref(bench.features[scene], "features");
  Var x = toyvlm::embed_block(tape, pv, *bench.params, feats, seq, 0, length, Var{});
  toyvlm::PrefixState state;
  toyvlm::decode_block(tape, pv, *bench.params, x, nullptr, &state);
  return state;
}

// Final-position logits of `seq`, continuing from the scene's image prefix.
std::vector<double> final_logits(const Benchmark& bench, std::size_t scene,
                                 const toyvlm::TokenSequence& seq,
                                 const toyvlm::PrefixState& prefix, const Tensor2* block) {
  const auto& params = *bench.params;
  GradTape tape;
  auto pv = toyvlm::bind_params(tape, params);
  Var feats = tape.constant_ref(bench.features[scene], "features");
  Var virt = block != nullptr && block->rows() > 0 ? tape.constant_ref(*block, "virtual") : Var{};
  Var x = toyvlm::embed_block(tape, pv, params, feats, seq, prefix.length, seq.size(), virt);
  Var h = toyvlm::decode_block(tape, pv, params, x, &prefix);
  const int last = static_cast<int>(tape.value(h).rows()) - 1;
  Var logits = toyvlm::project_logits(tape, pv, tape.gather_rows(h, {last}));
  const auto row = tape.value(logits).row(0);
  return {row.begin(), row.end()};
}

}  // namespace

EvalResult evaluate(const Benchmark& bench, const EvalSpec& spec) {
  if (bench.vocab == nullptr || bench.params == nullptr) {
    throw numcore::ContractError("evaluate: benchmark without model");
  }
  const bool needs_block = prompt::uses_virtual_tokens(spec.templ);
  if (!needs_block && spec.block != nullptr && spec.block->rows() > 0) {
    throw prompt::TemplateError(std::string(prompt::template_name(spec.templ)) +
                                " takes no virtual tokens");
  }
  const int n = needs_block && spec.block != nullptr ? static_cast<int>(spec.block->rows()) : 0;

  std::vector<const world::QASample*> samples;
  for (const auto& q : bench.qa.samples) {
    if (q.split == spec.split) samples.push_back(&q);
  }
  std::sort(samples.begin(), samples.end(),
            [](const auto* a, const auto* b) { return a->id < b->id; });

  std::vector<toyvlm::TokenSequence> prompts(samples.size());
  std::vector<std::string> errors(samples.size());
  std::vector<char> ok(samples.size(), 0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    try {
      prompts[i] = build_prompt(bench, *samples[i], spec.templ, spec.mode, n);
      ok[i] = 1;
    } catch (const std::exception& e) {
      errors[i] = "sample " + std::to_string(samples[i]->id) + ": " + e.what();
    }
  }

  // Image prefixes, one per scene that has a usable prompt.
  std::vector<int> scene_first(bench.corpus.size(), -1);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto s = static_cast<std::size_t>(samples[i]->scene_id);
    if (ok[i] && scene_first[s] < 0) scene_first[s] = static_cast<int>(i);
  }
  std::vector<toyvlm::PrefixState> prefixes(bench.corpus.size());
  const int workers = std::max(1, spec.workers);
  const auto scenes = static_cast<std::ptrdiff_t>(bench.corpus.size());
#pragma omp parallel for schedule(dynamic) num_threads(workers)
  for (std::ptrdiff_t s = 0; s < scenes; ++s) {
    const int i = scene_first[static_cast<std::size_t>(s)];
    if (i < 0) continue;
    const auto& seq = prompts[static_cast<std::size_t>(i)];
    prefixes[static_cast<std::size_t>(s)] =
        image_prefix(bench, static_cast<std::size_t>(s), seq, image_block_length(seq));
  }

  std::vector<EvalRecord> records(samples.size());
  const auto count = static_cast<std::ptrdiff_t>(samples.size());
#pragma omp parallel for schedule(dynamic) num_threads(workers)
  for (std::ptrdiff_t ii = 0; ii < count; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    if (!ok[i]) continue;
    const auto& q = *samples[i];
    const auto scene = static_cast<std::size_t>(q.scene_id);
    try {
      const auto logits = final_logits(bench, scene, prompts[i], prefixes[scene], spec.block);
      const auto yn = toyvlm::answer_yes_no(logits, *bench.vocab);
      EvalRecord& r = records[i];
      r.sample_id = q.id;
      r.scene_id = q.scene_id;
      r.category = q.category;
      r.label = q.label;
      r.predicted = yn.yes;
      r.logit_yes = yn.logit_yes;
      r.logit_no = yn.logit_no;
      r.detection_correct = world::detection_correct(bench.detections[scene].detections,
                                                     bench.corpus[scene], q.category);
    } catch (const std::exception& e) {
      ok[i] = 0;
      errors[i] = "sample " + std::to_string(q.id) + ": " + e.what();
    }
  }

  EvalResult result;
  Confusion conf;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (ok[i]) {
      conf.add(records[i].label, records[i].predicted);
      result.records.push_back(records[i]);
    } else {
      result.errors.push_back(errors[i]);
    }
  }
  result.report = metrics(conf, spec.tag);
  result.report.excluded = result.errors.size();
  return result;
}

// ---- contingency -------------------------------------------------------------

namespace {

void tally(ContingencyTable& t, bool det_ok, bool inf_ok) {
  if (det_ok) (inf_ok ? t.cd_ci : t.cd_wi) += 1;
  else (inf_ok ? t.wd_ci : t.wd_wi) += 1;
}

}  // namespace

ContingencyTable contingency(std::span<const EvalRecord> records,
                             std::span<const DetectionFlag> flags) {
  if (records.size() != flags.size()) {
    throw AlignmentError("contingency: " + std::to_string(records.size()) + " records but " +
                         std::to_string(flags.size()) + " detection flags");
  }
  ContingencyTable t;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].sample_id != flags[i].sample_id) {
      throw AlignmentError("contingency: record " + std::to_string(records[i].sample_id) +
                           " aligned with flag " + std::to_string(flags[i].sample_id));
    }
    tally(t, flags[i].correct, records[i].predicted == records[i].label);
  }
  return t;
}

ContingencyTable contingency(std::span<const EvalRecord> records) {
  ContingencyTable t;
  for (const auto& r : records) tally(t, r.detection_correct, r.predicted == r.label);
  return t;
}

HallucinationSummary summarize(const ContingencyTable& t) {
  HallucinationSummary s;
  const auto n = static_cast<double>(t.total());
  s.hallucinations = t.cd_wi + t.wd_ci;
  s.strict_hallucinations = t.cd_wi + t.wd_wi;
  if (n > 0) {
    s.share = static_cast<double>(s.hallucinations) / n;
    s.strict_share = static_cast<double>(s.strict_hallucinations) / n;
  }
  if (s.hallucinations > 0) {
    s.dominant_fraction = static_cast<double>(t.cd_wi) / static_cast<double>(s.hallucinations);
  }
  if (s.strict_hallucinations > 0) {
    s.strict_dominant_fraction =
        static_cast<double>(t.cd_wi) / static_cast<double>(s.strict_hallucinations);
  }
  return s;
}

// ---- ablations ---------------------------------------------------------------

std::vector<CellResult> run_ablations(const Benchmark& bench, std::span<const CellSpec> cells,
                                      int workers) {
  std::vector<CellResult> out;
  for (const auto& cell : cells) {
    CellResult r;
    r.spec = cell;
    try {
      EvalSpec es;
      es.templ = cell.templ;
      es.mode = cell.mode;
      es.workers = workers;
      es.tag = cell.name;
      if (prompt::uses_virtual_tokens(cell.templ)) {
        patch::validate(cell.train);
        auto block = patch::init_virtual(cell.train.init, cell.train.n, *bench.vocab,
                                         *bench.params, cell.train.seed);
        if (cell.train.n > 0) {
          auto trained = patch::train(std::move(block), *bench.params,
                                      training_set(bench, cell.templ, cell.mode, cell.train.n),
                                      cell.train);
          r.epoch_loss = std::move(trained.epoch_loss);
          r.block = std::move(trained.block);
        } else {
          // Nothing to optimize.
          block.trained = true;
          r.block = std::move(block);
        }
        es.block = &r.block.matrix;
      }
      r.report = evaluate(bench, es).report;
      r.ok = true;
    } catch (const std::exception& e) {
      r.error = e.what();
      r.report.tag = cell.name;
    }
    out.push_back(std::move(r));
  }
  return out;
}

// ---- attention export ----------------------------------------------------------

AttentionExport export_attention(const Benchmark& bench, const toyvlm::TokenSequence& prompt,
                                 int scene_id, const Tensor2* block) {
  const auto& feats = bench.features.at(static_cast<std::size_t>(scene_id));
  auto fr = toyvlm::forward(feats, prompt, block, *bench.params, true);
  AttentionExport a;
  a.rows = std::move(fr.attention.final_row);
  a.segments = prompt.segments;
  std::size_t patch = 0;
  for (int t : prompt.tokens) {
    a.tokens.push_back(t == toyvlm::kImageFeature ? "<patch_" + std::to_string(patch++) + ">"
                                                  : bench.vocab->token(t));
  }
  return a;
}

void write_attention(std::ostream& out, const AttentionExport& a, char delim) {
  out << "layer";
  for (std::size_t i = 0; i < a.tokens.size(); ++i) {
    out << delim << i << ':' << toyvlm::segment_name(a.segments[i]) << ':' << a.tokens[i];
  }
  out << '\n';
  out << std::setprecision(17);
  for (std::size_t l = 0; l < a.rows.size(); ++l) {
    out << l;
    for (double w : a.rows[l]) out << delim << w;
    out << '\n';
  }
}

std::vector<AttentionFocus> attention_focus(const AttentionExport& a, const Vocab& vocab) {
  std::ptrdiff_t query = -1;
  for (std::size_t i = 0; i < a.tokens.size(); ++i) {
    if (a.segments[i] != toyvlm::Segment::kQuestion) continue;
    const int id = vocab.find(a.tokens[i]).value_or(-1);
    if (id >= 0 && vocab.category_of(id)) query = static_cast<std::ptrdiff_t>(i);
  }
  std::vector<AttentionFocus> out;
  for (const auto& row : a.rows) {
    AttentionFocus f;
    if (query >= 0) f.query_token = row[static_cast<std::size_t>(query)];
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (a.segments[i] == toyvlm::Segment::kDetection) {
        sum += row[i];
        ++count;
      }
    }
    f.detection_mean = count > 0 ? sum / static_cast<double>(count) : 0.0;
    out.push_back(f);
  }
  return out;
}

// ---- rendering -----------------------------------------------------------------

void write_results_tsv(std::ostream& out, std::span<const MetricReport> rows) {
  out << "name\tsamples\texcluded\taccuracy\tprecision\trecall\tf1\n";
  out << std::setprecision(17);
  for (const auto& r : rows) {
    out << r.tag << '\t' << r.samples << '\t' << r.excluded << '\t' << r.accuracy << '\t'
        << r.precision << '\t' << r.recall << '\t' << r.f1 << '\n';
  }
}

void write_results_text(std::ostream& out, std::span<const MetricReport> rows) {
  std::size_t width = 6;
  for (const auto& r : rows) width = std::max(width, r.tag.size());
  out << std::left << std::setw(static_cast<int>(width)) << "Method" << std::right;
  for (const char* h : {"Accuracy", "Precision", "Recall", "F1"}) out << "  " << std::setw(9) << h;
  out << '\n';
  for (const auto& r : rows) {
    out << std::left << std::setw(static_cast<int>(width)) << r.tag << std::right;
    for (double v : {r.accuracy, r.precision, r.recall, r.f1}) {
      out << "  " << std::setw(9) << percent(v);
    }
    out << '\n';
  }
}

void write_records(std::ostream& out, std::span<const EvalRecord> records) {
  out << json{{"format", "patchvlm-records"}, {"version", 1}, {"count", records.size()}}.dump()
      << '\n';
  for (const auto& r : records) {
    out << json{{"sample_id", r.sample_id},   {"scene_id", r.scene_id},
                {"category", r.category},     {"label", r.label},
                {"predicted", r.predicted},   {"logit_yes", r.logit_yes},
                {"logit_no", r.logit_no},     {"detection_correct", r.detection_correct}}
               .dump()
        << '\n';
  }
}

std::vector<EvalRecord> read_records(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("records: empty stream");
  const auto header = json::parse(line);
  if (header.value("format", "") != "patchvlm-records" || header.value("version", 0) != 1) {
    throw std::runtime_error("records: unrecognized header");
  }
  std::vector<EvalRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    EvalRecord r;
    r.sample_id = j.at("sample_id").get<int>();
    r.scene_id = j.at("scene_id").get<int>();
    r.category = j.at("category").get<int>();
    r.label = j.at("label").get<bool>();
    r.predicted = j.at("predicted").get<bool>();
    r.logit_yes = j.at("logit_yes").get<double>();
    r.logit_no = j.at("logit_no").get<double>();
    r.detection_correct = j.at("detection_correct").get<bool>();
    out.push_back(r);
  }
  if (out.size() != header.value("count", std::size_t{0})) {
    throw std::runtime_error("records: header count " + header["count"].dump() + " but " +
                             std::to_string(out.size()) + " records");
  }
  return out;
}

}  // namespace patchvlm::eval
