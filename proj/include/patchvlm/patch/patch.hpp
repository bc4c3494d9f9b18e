#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "patchvlm/numcore/tensor.hpp"
#include "patchvlm/prompt/prompt.hpp"
#include "patchvlm/toyvlm/model.hpp"
#include "patchvlm/toyvlm/vocab.hpp"

namespace patchvlm::patch {

using numcore::Tensor2;
using toyvlm::ModelParams;
using toyvlm::TokenSequence;
using toyvlm::Vocab;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Instruction texts used to seed virtual tokens from existing embeddings.
inline constexpr std::string_view kInitTextT1 =
    "According to the previous object detection results, please answer the following question";
inline constexpr std::string_view kInitTextT2 =
    "According to the previous object detection results, please answer the following question "
    "with 'yes' or 'no'";

enum class InitStrategy { kRandom, kTextT1, kTextT2 };
std::string_view init_name(InitStrategy s);
std::optional<InitStrategy> parse_init(std::string_view name);

// The trainable n x d block; row k is the embedding of [ref(k+1)].
struct VirtualTokenBlock {
  Tensor2 matrix;
  InitStrategy init = InitStrategy::kRandom;
  bool trained = false;

  int n() const { return static_cast<int>(matrix.rows()); }
  int d() const { return static_cast<int>(matrix.cols()); }
};

// random: i.i.d. Gaussian with the token table's standard deviation.
// text:   embedding rows of the tokenized text, truncated to n or zero-padded.
VirtualTokenBlock init_virtual(InitStrategy strategy, int n, const Vocab& vocab,
                               const ModelParams& params, std::uint64_t seed);
// Same as the text strategies, for arbitrary text.
VirtualTokenBlock init_virtual_from_text(std::string_view text, int n, const Vocab& vocab,
                                         const ModelParams& params);

enum class Optimizer { kSgd, kAdamW };
std::string_view optimizer_name(Optimizer o);
std::optional<Optimizer> parse_optimizer(std::string_view name);

struct TrainConfig {
  double lr_initial = 1e-2;
  double lr_floor = 5e-6;
  double weight_decay = 0.05;
  int epochs = 30;
  int batch_size = 1;
  std::uint64_t seed = 1;
  Optimizer optimizer = Optimizer::kAdamW;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int n = 20;
  prompt::PromptTemplate templ = prompt::PromptTemplate::kPatchStandard;
  prompt::DetectionMode mode = prompt::DetectionMode::kCategory;
  InitStrategy init = InitStrategy::kTextT2;
};

void validate(const TrainConfig& cfg);

// Half-cosine from lr_initial at step 0 to lr_floor at step total_steps - 1.
double cosine_lr(std::size_t step, std::size_t total_steps, double lr_initial, double lr_floor);

// One supervised prompt: the assembled sequence including its ANSWER
// segment, plus the image features it reads. `cache_key` identifies the
// scene so the frozen image prefix can be computed once and reused.
struct TrainingExample {
  TokenSequence sequence;
  const Tensor2* features = nullptr;
  int cache_key = -1;
};

// (row whose logits predict the token, target token) for each ANSWER position.
std::vector<std::pair<std::size_t, int>> answer_targets(const TokenSequence& seq);

struct LossAndGrad {
  double loss = 0.0;
  Tensor2 grad;  // n x d; empty when the block has no rows
};

// Answer-only cross entropy for one example and its gradient with respect to
// the virtual block. Positions before the first [ref] token never depend on
// the block; their decoder state comes from `prefix_cache` when supplied.
class PatchObjective {
 public:
  explicit PatchObjective(const ModelParams& params) : params_(params) {}
  LossAndGrad evaluate(const TrainingExample& ex, const Tensor2& block, bool with_grad = true);
  void clear_cache() { cache_.clear(); }
  std::size_t cached_prefixes() const { return cache_.size(); }

 private:
  const toyvlm::PrefixState& prefix_for(const TrainingExample& ex, std::size_t length);

  const ModelParams& params_;
  std::unordered_map<std::uint64_t, toyvlm::PrefixState> cache_;
};

struct TrainResult {
  VirtualTokenBlock block;
  std::vector<double> epoch_loss;  // mean loss per epoch
  std::size_t steps = 0;
  std::string model_hash_before;
  std::string model_hash_after;
};

// Trains only the virtual block; `params` is read through const references
// and its hash is checked before and after.
TrainResult train(VirtualTokenBlock block, const ModelParams& params,
                  const std::vector<TrainingExample>& dataset, const TrainConfig& cfg);

// Vocabulary extension: [ref1..refn] become ordinary tokens whose embedding
// rows are the trained block. Base rows are untouched.
struct PlugExtension {
  std::string vocab_hash;
  std::vector<int> token_ids;
  std::vector<std::string> tokens;
  Tensor2 embeddings;
};

PlugExtension export_plug(const VirtualTokenBlock& block, const Vocab& vocab);

struct TrainableCount {
  std::size_t trainable = 0;
  std::size_t total = 0;  // frozen + trainable
  double ratio = 0.0;
};

TrainableCount count_trainable(std::size_t n, std::size_t d, std::size_t frozen_total);
TrainableCount count_trainable(const VirtualTokenBlock& block, const ModelParams& params);

struct PatchCheckpoint {
  VirtualTokenBlock block;
  std::string vocab_hash;
  std::string model_hash;
  TrainConfig config;
  std::vector<double> epoch_loss;
  std::map<std::string, double> metrics;
};

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const PatchCheckpoint& ckpt);
// Throws CheckpointError when the file is malformed or either hash differs
// from the expected one.
PatchCheckpoint load_checkpoint(const std::filesystem::path& path,
                                const std::string& expected_model_hash,
                                const std::string& expected_vocab_hash);

}  // namespace patchvlm::patch
