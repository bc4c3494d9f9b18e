#pragma once

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string>

#include "patchvlm/cli/run_config.hpp"
#include "patchvlm/eval/eval.hpp"

namespace patchvlm::cli {

// A required input (generated data, checkpoint) is absent. Exit code 1.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Where each subcommand reads and writes, relative to the output dir.
struct Layout {
  std::filesystem::path dir;
  std::filesystem::path data() const { return dir / "data"; }
  std::filesystem::path scenes() const { return data() / "scenes.jsonl"; }
  std::filesystem::path qa() const { return data() / "qa.jsonl"; }
  std::filesystem::path detections() const { return data() / "detections.jsonl"; }
  std::filesystem::path manifest() const { return data() / "manifest.json"; }
  std::filesystem::path train() const { return dir / "train"; }
  std::filesystem::path checkpoint() const { return train() / "checkpoint.json"; }
  std::filesystem::path loss_curve() const { return train() / "loss.tsv"; }
  std::filesystem::path eval() const { return dir / "eval"; }
  std::filesystem::path ablate() const { return dir / "ablate"; }
  std::filesystem::path attn() const { return dir / "attn"; }
  std::filesystem::path report() const { return dir / "report"; }
};

// FNV-1a over a file's bytes, hex.
std::string file_hash(const std::filesystem::path& path);

// The frozen model and the generated benchmark, loaded together. Not movable:
// the benchmark points into the vocab and params.
struct Workspace {
  toyvlm::Vocab vocab;
  toyvlm::ModelParams params;
  eval::Benchmark bench;
  Workspace() = default;
  Workspace(const Workspace&) = delete;
  Workspace& operator=(const Workspace&) = delete;
};

toyvlm::Vocab make_vocab(const RunConfig& cfg);
// Requires gen output; checks the manifest hashes.
std::unique_ptr<Workspace> load_workspace(const RunConfig& cfg);

// Each writes <output_dir>/config.<name>.json first and returns an exit code.
// `log` receives progress and summaries.
int cmd_gen(const RunConfig& cfg, std::ostream& log);
int cmd_train(const RunConfig& cfg, std::ostream& log);
int cmd_eval(const RunConfig& cfg, std::ostream& log);
int cmd_ablate(const RunConfig& cfg, std::ostream& log);
int cmd_attn(const RunConfig& cfg, std::ostream& log);
int cmd_report(const RunConfig& cfg, std::ostream& log);

}  // namespace patchvlm::cli
