#include "patchvlm/cli/commands.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <optional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "patchvlm/backbone/backbone.hpp"
#include "patchvlm/numcore/hash.hpp"

namespace patchvlm::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kManifestFormat = "patchvlm-manifest";

std::ofstream open_out(const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::ifstream open_in(const fs::path& path, const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact(what + " not found: " + path.string());
  return in;
}

void echo_config(const RunConfig& cfg, const std::string& command) {
  open_out(cfg.output_dir / ("config." + command + ".json")) << to_json(cfg).dump(2) << '\n';
}

std::string g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string row_tag(prompt::PromptTemplate t, prompt::DetectionMode m) {
  return std::string(prompt::template_name(t)) + "/" + std::string(prompt::mode_name(m));
}

// Only the keys that shape the generated data.
std::string gen_config_hash(const RunConfig& cfg) {
  const json j = to_json(cfg);
  json g{{"corpus", j["corpus"]},
         {"qa", j["qa"]},
         {"oracle", j["oracle"]},
         {"oracle_seed", j["oracle_seed"]},
         {"coord_bins", j["coord_bins"]}};
  return numcore::Fnv1a().update(g.dump()).hex();
}

patch::PatchCheckpoint load_block(const Workspace& ws, const fs::path& path) {
  if (!fs::exists(path)) {
    throw MissingArtifact("checkpoint not found: " + path.string() + " (run train first)");
  }
  return patch::load_checkpoint(path, ws.params.hash(), ws.vocab.hash());
}

void write_contingency_header(std::ostream& out) {
  out << "method\tcd_ci\tcd_wi\twd_ci\twd_wi\thallucinations\tshare\tdominant_fraction"
         "\tstrict_hallucinations\tstrict_share\n";
}

void write_contingency_row(std::ostream& out, const std::string& tag,
                           const eval::ContingencyTable& t) {
  const auto s = eval::summarize(t);
  out << tag << '\t' << t.cd_ci << '\t' << t.cd_wi << '\t' << t.wd_ci << '\t' << t.wd_wi << '\t'
      << s.hallucinations << '\t' << g17(s.share) << '\t' << g17(s.dominant_fraction) << '\t'
      << s.strict_hallucinations << '\t' << g17(s.strict_share) << '\n';
}

}  // namespace

std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("file not found: " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return numcore::Fnv1a().update(std::string_view(bytes)).hex();
}

toyvlm::Vocab make_vocab(const RunConfig& cfg) {
  toyvlm::VocabSpec spec;
  spec.categories = toyvlm::default_category_names(cfg.corpus.categories);
  spec.coord_bins = cfg.coord_bins;
  spec.reserved_refs = cfg.reserved_refs;
  return toyvlm::Vocab::build(spec);
}

std::unique_ptr<Workspace> load_workspace(const RunConfig& cfg) {
  const Layout lay{cfg.output_dir};
  auto in = open_in(lay.manifest(), "generated data manifest");
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("corrupt manifest " + lay.manifest().string() + ": " + e.what());
  }
  if (manifest.value("format", "") != kManifestFormat) {
    throw std::runtime_error(lay.manifest().string() + " is not a manifest");
  }
  if (manifest.at("config_hash") != gen_config_hash(cfg)) {
    throw std::runtime_error("generated data in " + lay.data().string() +
                             " was made with a different world config; rerun gen");
  }
  for (const auto& [name, entry] : manifest.at("files").items()) {
    const auto path = lay.data() / name;
    if (file_hash(path) != entry.at("fnv1a").get<std::string>()) {
      throw std::runtime_error(path.string() + " does not match its manifest hash");
    }
  }

  auto ws = std::make_unique<Workspace>();
  ws->vocab = make_vocab(cfg);
  ws->params = backbone::cached_backbone(cfg.backbone_dir(), cfg.model, ws->vocab, cfg.pretrain);
  auto scenes_in = open_in(lay.scenes(), "scenes");
  auto qa_in = open_in(lay.qa(), "QA samples");
  auto det_in = open_in(lay.detections(), "detections");
  auto scenes = world::read_scenes(scenes_in);
  auto qa = world::read_qa(qa_in);
  auto dets = world::read_detections(det_in);
  ws->bench = eval::make_benchmark(ws->vocab, ws->params, std::move(scenes), std::move(qa),
                                   std::move(dets.sets));
  return ws;
}

// ---- gen -----------------------------------------------------------------------

int cmd_gen(const RunConfig& cfg, std::ostream& log) {
  echo_config(cfg, "gen");
  const Layout lay{cfg.output_dir};
  const auto corpus = world::generate_corpus(cfg.corpus);
  const auto qa = world::make_pope_qa(corpus, cfg.corpus.categories, cfg.qa);
  const world::Cooccurrence cooc(corpus, cfg.corpus.categories);
  const auto dets = world::detect_all(corpus, cfg.oracle, cfg.oracle_seed, cfg.corpus.categories,
                                      cfg.coord_bins, &cooc);

  // Written next to the final location and swapped in whole.
  fs::path tmp = lay.data();
  tmp += ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  {
    auto out = open_out(tmp / "scenes.jsonl");
    world::write_scenes(out, corpus, cfg.corpus.categories);
  }
  {
    auto out = open_out(tmp / "qa.jsonl");
    world::write_qa(out, qa);
  }
  {
    auto out = open_out(tmp / "detections.jsonl");
    world::write_detections(out, dets, cfg.oracle, cfg.oracle_seed);
  }
  std::size_t train = 0;
  for (const auto& q : qa.samples) train += q.split == world::Split::kTrain;
  json manifest{{"format", kManifestFormat},
                {"version", 1},
                {"config_hash", gen_config_hash(cfg)},
                {"counts",
                 {{"scenes", corpus.size()},
                  {"qa", qa.samples.size()},
                  {"train", train},
                  {"test", qa.samples.size() - train},
                  {"skipped_scenes", qa.skipped_scenes.size()}}},
                {"files", json::object()}};
  for (const char* name : {"scenes.jsonl", "qa.jsonl", "detections.jsonl"}) {
    manifest["files"][name] = {{"fnv1a", file_hash(tmp / name)},
                               {"bytes", fs::file_size(tmp / name)}};
  }
  open_out(tmp / "manifest.json") << manifest.dump(2) << '\n';
  fs::remove_all(lay.data());
  fs::rename(tmp, lay.data());

  log << "gen: " << corpus.size() << " scenes, " << qa.samples.size() << " QA samples (" << train
      << " train), written to " << lay.data().string() << '\n';
  return 0;
}

// ---- train ---------------------------------------------------------------------

int cmd_train(const RunConfig& cfg, std::ostream& log) {
  echo_config(cfg, "train");
  const Layout lay{cfg.output_dir};
  auto ws = load_workspace(cfg);
  const auto& t = cfg.train;

  patch::VirtualTokenBlock block;
  std::vector<double> prior_loss;
  if (!cfg.resume.empty()) {
    auto ck = load_block(*ws, cfg.resume);
    if (ck.block.n() != t.n) {
      throw ConfigError("resume checkpoint has n=" + std::to_string(ck.block.n()) +
                        " but train.n=" + std::to_string(t.n));
    }
    block = std::move(ck.block);
    prior_loss = std::move(ck.epoch_loss);
  } else {
    block = patch::init_virtual(t.init, t.n, ws->vocab, ws->params, t.seed);
  }

  std::vector<double> loss = prior_loss;
  if (t.epochs > 0) {
    const auto data = eval::training_set(ws->bench, t.templ, t.mode, t.n);
    log << "train: " << data.size() << " examples, " << t.epochs << " epochs\n";
    try {
      auto r = patch::train(std::move(block), ws->params, data, t);
      block = std::move(r.block);
      loss.insert(loss.end(), r.epoch_loss.begin(), r.epoch_loss.end());
    } catch (const patch::TrainingDiverged& e) {
      open_out(lay.train() / "diverged.json")
          << json{{"error", e.what()}, {"train", to_json(cfg)["train"]}, {"seed", cfg.seed},
                  {"loss_so_far", loss}}
                 .dump(2)
          << '\n';
      throw;
    }
  }

  patch::PatchCheckpoint ck;
  ck.block = block;
  ck.vocab_hash = ws->vocab.hash();
  ck.model_hash = ws->params.hash();
  ck.config = t;
  ck.epoch_loss = loss;
  if (!loss.empty()) ck.metrics["final_loss"] = loss.back();
  fs::create_directories(lay.train());
  patch::save_checkpoint(lay.checkpoint(), ck);
  {
    auto out = open_out(lay.loss_curve());
    out << "epoch\tloss\n";
    for (std::size_t e = 0; e < loss.size(); ++e) out << e + 1 << '\t' << g17(loss[e]) << '\n';
  }
  const auto count = patch::count_trainable(block, ws->params);
  open_out(lay.train() / "summary.json")
      << json{{"n", block.n()},
              {"d", block.d()},
              {"trainable", count.trainable},
              {"total", count.total},
              {"ratio", count.ratio},
              {"model_hash", ck.model_hash},
              {"vocab_hash", ck.vocab_hash},
              {"epochs_run", t.epochs}}
             .dump(2)
      << '\n';
  log << "train: trainable parameters " << count.trainable << " (n=" << block.n()
      << " x d=" << block.d() << ") of " << count.total << '\n';
  if (!loss.empty()) log << "train: final epoch loss " << g17(loss.back()) << '\n';
  return 0;
}

// ---- eval ----------------------------------------------------------------------

int cmd_eval(const RunConfig& cfg, std::ostream& log) {
  echo_config(cfg, "eval");
  const Layout lay{cfg.output_dir};
  auto ws = load_workspace(cfg);

  std::optional<patch::PatchCheckpoint> ck;
  for (const auto& row : cfg.eval) {
    if (prompt::uses_virtual_tokens(row.templ) && !ck) {
      ck = load_block(*ws, lay.checkpoint());
    }
  }

  std::vector<eval::MetricReport> reports;
  json index = json::array();
  std::ostringstream cont;
  write_contingency_header(cont);
  bool all_ok = true;
  for (std::size_t i = 0; i < cfg.eval.size(); ++i) {
    const auto& row = cfg.eval[i];
    eval::EvalSpec spec;
    spec.templ = row.templ;
    spec.mode = row.mode;
    spec.workers = cfg.workers;
    spec.tag = row_tag(row.templ, row.mode);
    if (prompt::uses_virtual_tokens(row.templ)) spec.block = &ck->block.matrix;
    auto r = eval::evaluate(ws->bench, spec);
    for (const auto& e : r.errors) log << "eval: " << spec.tag << ": excluded: " << e << '\n';
    all_ok = all_ok && r.errors.empty();
    const std::string file = "records-" + std::to_string(i) + ".jsonl";
    {
      auto out = open_out(lay.eval() / file);
      eval::write_records(out, r.records);
    }
    index.push_back({{"tag", spec.tag}, {"records", file}, {"excluded", r.report.excluded}});
    write_contingency_row(cont, spec.tag, eval::contingency(r.records));
    reports.push_back(std::move(r.report));
  }
  {
    auto out = open_out(lay.eval() / "results.tsv");
    eval::write_results_tsv(out, reports);
  }
  std::ostringstream text;
  eval::write_results_text(text, reports);
  open_out(lay.eval() / "results.txt") << text.str();
  open_out(lay.eval() / "contingency.tsv") << cont.str();
  open_out(lay.eval() / "rows.json") << index.dump(2) << '\n';
  log << text.str();
  return all_ok ? 0 : 1;
}

// ---- ablate --------------------------------------------------------------------

int cmd_ablate(const RunConfig& cfg, std::ostream& log) {
  echo_config(cfg, "ablate");
  const Layout lay{cfg.output_dir};
  auto ws = load_workspace(cfg);
  std::vector<eval::CellSpec> cells;
  for (const auto& c : cfg.ablate) {
    eval::CellSpec s;
    s.name = c.name;
    s.templ = c.templ;
    s.mode = c.mode;
    s.train = cfg.train;
    s.train.templ = c.templ;
    s.train.mode = c.mode;
    s.train.n = c.n;
    s.train.init = c.init;
    cells.push_back(std::move(s));
  }
  const auto results = eval::run_ablations(ws->bench, cells, cfg.workers);
  std::vector<eval::MetricReport> reports;
  std::ostringstream errors;
  bool all_ok = true;
  for (const auto& r : results) {
    if (!r.ok) {
      all_ok = false;
      errors << r.spec.name << '\t' << r.error << '\n';
      log << "ablate: cell '" << r.spec.name << "' failed: " << r.error << '\n';
      continue;
    }
    reports.push_back(r.report);
  }
  {
    auto out = open_out(lay.ablate() / "ablation.tsv");
    eval::write_results_tsv(out, reports);
  }
  std::ostringstream text;
  eval::write_results_text(text, reports);
  open_out(lay.ablate() / "ablation.txt") << text.str();
  open_out(lay.ablate() / "errors.tsv") << errors.str();
  log << text.str();
  return all_ok ? 0 : 1;
}

// ---- attn ----------------------------------------------------------------------

int cmd_attn(const RunConfig& cfg, std::ostream& log) {
  echo_config(cfg, "attn");
  const Layout lay{cfg.output_dir};
  auto ws = load_workspace(cfg);
  const auto& bench = ws->bench;

  const world::QASample* sample = nullptr;
  for (const auto& q : bench.qa.samples) {
    if (cfg.attn.sample_id >= 0) {
      if (q.id == cfg.attn.sample_id) sample = &q;
    } else if (q.split == world::Split::kTest && q.label) {
      const auto& scene = bench.corpus.at(static_cast<std::size_t>(q.scene_id));
      const auto& dets = bench.detections.at(static_cast<std::size_t>(q.scene_id)).detections;
      if (world::detection_correct(dets, scene, q.category)) sample = &q;
    }
    if (sample != nullptr) break;
  }
  if (sample == nullptr) {
    throw std::runtime_error(cfg.attn.sample_id >= 0
                                 ? "attn: no sample with id " + std::to_string(cfg.attn.sample_id)
                                 : std::string("attn: no test sample with a detected object"));
  }

  std::optional<patch::PatchCheckpoint> ck;
  const numcore::Tensor2* block = nullptr;
  int n = 0;
  if (prompt::uses_virtual_tokens(cfg.attn.templ)) {
    ck = load_block(*ws, lay.checkpoint());
    block = &ck->block.matrix;
    n = ck->block.n();
  }
  const auto seq = eval::build_prompt(bench, *sample, cfg.attn.templ, cfg.attn.mode, n);
  const auto a = eval::export_attention(bench, seq, sample->scene_id, block);
  {
    auto out = open_out(lay.attn() / "attention.tsv");
    out << std::setprecision(17);
    eval::write_attention(out, a);
  }
  {
    auto out = open_out(lay.attn() / "prompt.tsv");
    prompt::write_debug_dump(out, seq, ws->vocab);
  }
  const auto focus = eval::attention_focus(a, ws->vocab);
  std::ostringstream f;
  f << "layer\tquery_token\tdetection_mean\n";
  for (std::size_t l = 0; l < focus.size(); ++l) {
    f << l << '\t' << g17(focus[l].query_token) << '\t' << g17(focus[l].detection_mean) << '\n';
  }
  open_out(lay.attn() / "focus.tsv") << f.str();
  log << "attn: sample " << sample->id << " (scene " << sample->scene_id << ", "
      << ws->vocab.token(ws->vocab.category_token(sample->category)) << ", label "
      << (sample->label ? "yes" : "no") << ")\n"
      << f.str();
  return 0;
}

// ---- report --------------------------------------------------------------------

int cmd_report(const RunConfig& cfg, std::ostream& log) {
  echo_config(cfg, "report");
  const Layout lay{cfg.output_dir};
  auto idx_in = open_in(lay.eval() / "rows.json", "eval output");
  const json index = json::parse(idx_in);

  std::vector<eval::MetricReport> reports;
  std::ostringstream cont;
  write_contingency_header(cont);
  for (const auto& row : index) {
    const auto tag = row.at("tag").get<std::string>();
    auto in = open_in(lay.eval() / row.at("records").get<std::string>(), "records");
    const auto records = eval::read_records(in);
    eval::Confusion c;
    for (const auto& r : records) c.add(r.label, r.predicted);
    auto m = eval::metrics(c, tag);
    m.excluded = row.at("excluded").get<std::size_t>();
    reports.push_back(std::move(m));
    write_contingency_row(cont, tag, eval::contingency(records));
  }

  std::ostringstream out;
  out << "Results\n";
  eval::write_results_text(out, reports);
  out << "\nDetection x inference\n" << cont.str();
  if (fs::exists(lay.ablate() / "ablation.txt")) {
    auto in = open_in(lay.ablate() / "ablation.txt", "ablation table");
    out << "\nAblation\n" << in.rdbuf();
  }
  open_out(lay.report() / "report.txt") << out.str();
  log << out.str();
  return 0;
}

}  // namespace patchvlm::cli
