#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "patchvlm/backbone/backbone.hpp"
#include "patchvlm/eval/eval.hpp"
#include "patchvlm/patch/patch.hpp"
#include "patchvlm/toyvlm/model.hpp"
#include "patchvlm/world/world.hpp"

namespace patchvlm::cli {

// Bad config file, unknown key, wrong type or invalid value. Exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kOutputRootEnv = "PATCHVLM_OUTPUT_ROOT";

struct EvalRow {
  prompt::PromptTemplate templ = prompt::PromptTemplate::kP1Baseline;
  prompt::DetectionMode mode = prompt::DetectionMode::kNone;
};

struct AblationCell {
  std::string name;
  prompt::PromptTemplate templ = prompt::PromptTemplate::kPatchStandard;
  prompt::DetectionMode mode = prompt::DetectionMode::kCategory;
  int n = 20;
  patch::InitStrategy init = patch::InitStrategy::kTextT2;
};

struct AttnConfig {
  int sample_id = -1;  // -1: first test sample whose queried object is present and detected
  prompt::PromptTemplate templ = prompt::PromptTemplate::kPatchStandard;
  prompt::DetectionMode mode = prompt::DetectionMode::kCategory;
};

// Everything a run depends on. `seed` drives PATCH init and training order;
// the world generators keep their own seeds.
struct RunConfig {
  std::filesystem::path output_dir = "runs/default";
  std::filesystem::path cache_dir;  // empty: <output_dir>/cache
  std::uint64_t seed = 1;
  int workers = 1;

  int coord_bins = 100;
  int reserved_refs = 128;
  toyvlm::ModelConfig model;
  backbone::PretrainConfig pretrain;

  world::CorpusConfig corpus;
  world::QAConfig qa;
  world::OracleConfig oracle;
  std::uint64_t oracle_seed = 5;

  patch::TrainConfig train;       // train.seed mirrors `seed`
  std::filesystem::path resume;   // checkpoint to continue from; epochs may then be 0

  std::vector<EvalRow> eval = {
      {prompt::PromptTemplate::kP1Baseline, prompt::DetectionMode::kNone},
      {prompt::PromptTemplate::kP2Hard, prompt::DetectionMode::kCategory},
      {prompt::PromptTemplate::kPatchStandard, prompt::DetectionMode::kCategory}};
  std::vector<AblationCell> ablate = {
      {"PATCH", prompt::PromptTemplate::kPatchStandard, prompt::DetectionMode::kCategory},
      {"w/o bbox", prompt::PromptTemplate::kPatchStandard, prompt::DetectionMode::kCategoryNoBbox},
      {"w/o bbox & categ.", prompt::PromptTemplate::kPatchStandard, prompt::DetectionMode::kNone},
      {"w/ Late", prompt::PromptTemplate::kPatchLate, prompt::DetectionMode::kCategory}};
  AttnConfig attn;

  std::filesystem::path backbone_dir() const {
    return cache_dir.empty() ? output_dir / "cache" : cache_dir;
  }
};

nlohmann::json to_json(const RunConfig& cfg);
// Keys missing from `j` keep their defaults; unknown keys are errors.
RunConfig from_json(const nlohmann::json& j);

// Checks every value without touching the filesystem.
void validate(const RunConfig& cfg);

// "a.b.c=value": sets a config key. The value is parsed as JSON, falling back
// to a plain string.
void apply_override(nlohmann::json& j, const std::string& assignment);

// Reads the file (if any), applies overrides, resolves a relative output dir
// under $PATCHVLM_OUTPUT_ROOT when set, and validates.
RunConfig resolve(const std::filesystem::path& config_path,
                  const std::vector<std::string>& overrides);

}  // namespace patchvlm::cli
