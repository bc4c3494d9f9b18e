#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "patchvlm/numcore/tape.hpp"
#include "patchvlm/numcore/tensor.hpp"
#include "patchvlm/toyvlm/scene.hpp"
#include "patchvlm/toyvlm/sequence.hpp"
#include "patchvlm/toyvlm/vocab.hpp"

namespace patchvlm::toyvlm {

using numcore::GradTape;
using numcore::Tensor2;
using numcore::Var;

class ContextOverflow : public std::length_error {
 public:
  using std::length_error::length_error;
};

struct ModelConfig {
  int d_model = 32;
  int layers = 2;
  int heads = 2;
  int mlp_hidden = 128;
  int grid = 8;
  int patch_dim = 16;  // width of the frozen visual encoder output
  int context = 256;
  // Attention score penalty per token of distance: head 0 uses this slope,
  // each later head a quarter of the previous, the last head none.
  double position_bias = 0.5;
  // Learned absolute position table. Off by default: positions then enter
  // only through the distance penalty, so inserting tokens does not move
  // the rest of the prompt to positions the model never saw.
  bool absolute_positions = false;
  std::uint64_t seed = 20240601;
};

void validate(const ModelConfig& config);

struct LayerParams {
  Tensor2 ln1_gamma, ln1_beta;
  Tensor2 wq, wk, wv, wo;
  Tensor2 ln2_gamma, ln2_beta;
  Tensor2 w_fc, b_fc, w_out, b_out;
};

// All weights of the toy vision-language model (the frozen theta).
//
// The output head is tied to `token_embedding`, which covers only the base
// vocabulary. Reserved [ref] ids have no row here: they are embedded from a
// virtual-token block supplied at forward time and are never predicted.
struct ModelParams {
  ModelConfig config;
  int base_vocab = 0;
  int num_categories = 0;

  Tensor2 token_embedding;     // base_vocab x d
  Tensor2 position_embedding;  // context x d, or empty
  Tensor2 segment_embedding;   // one row per Segment value
  Tensor2 patch_projection;    // categories x patch_dim, frozen random visual encoder
  Tensor2 visual_proj;         // patch_dim x d
  Tensor2 visual_bias;         // 1 x d
  std::vector<LayerParams> layers;
  Tensor2 final_gamma, final_beta;

  static ModelParams init(const ModelConfig& config, const Vocab& vocab);

  void for_each(const std::function<void(const std::string&, const Tensor2&)>& fn) const;
  void for_each(const std::function<void(const std::string&, Tensor2&)>& fn);
  std::size_t parameter_count() const;
  // Fingerprint over every parameter's bytes and the architecture.
  std::string hash() const;
};

// G*G x categories; cell (r, c) covers [c/G, (c+1)/G) x [r/G, (r+1)/G) and
// counts each object whose box overlaps it with positive area.
Tensor2 rasterize(const Scene& scene, int grid, int num_categories);

// Frozen visual encoder output: rasterize(...) * patch_projection.
Tensor2 patch_vectors(const Scene& scene, const ModelParams& params);

// Image features in the LM embedding space, one row per grid cell.
Tensor2 encode_scene(const Scene& scene, const ModelParams& params);

// Tape handles for every parameter. Frozen binds reference the tensors as
// constants; `mark` turns them into gradient leaves (used only when the
// backbone itself is being fitted).
struct ParamVars {
  Var token_embedding, position_embedding, segment_embedding, visual_proj, visual_bias;
  struct Layer {
    Var ln1_gamma, ln1_beta, wq, wk, wv, wo, ln2_gamma, ln2_beta, w_fc, b_fc, w_out, b_out;
  };
  std::vector<Layer> layers;
  Var final_gamma, final_beta;
};

ParamVars bind_params(GradTape& tape, const ModelParams& params, bool mark = false);

// Decoder state for a run of leading positions, enough to continue the
// sequence without recomputing it.
struct PrefixState {
  std::size_t length = 0;
  std::vector<Tensor2> keys;    // per layer, length x d
  std::vector<Tensor2> values;  // per layer, length x d
};

// The same, as tape variables, so gradients flow into the prefix.
struct PrefixVars {
  std::size_t length = 0;
  std::vector<Var> keys;
  std::vector<Var> values;
};

// Head-averaged post-softmax attention of the last row of a block, per layer.
struct AttentionTrace {
  std::vector<std::vector<double>> final_row;
};

// patch vectors -> LM space, on the tape.
Var project_patches(GradTape& tape, const ParamVars& pv, const Tensor2& patches);

// Input rows for positions [begin, end) of `seq`: image rows from `features`,
// [ref] ids from `virtual_rows`, everything else from the token table, plus
// position embeddings.
Var embed_block(GradTape& tape, const ParamVars& pv, const ModelParams& params, Var features,
                const TokenSequence& seq, std::size_t begin, std::size_t end, Var virtual_rows);

double position_bias_slope(const ModelConfig& config, int head);

// Runs the decoder over block rows that follow `prefix` (or start at 0).
// Returns final-layer-normed hidden rows for the block.
Var decode_block(GradTape& tape, const ParamVars& pv, const ModelParams& params, Var x,
                 const PrefixState* prefix, PrefixState* capture = nullptr,
                 AttentionTrace* trace = nullptr);

Var decode_block_vars(GradTape& tape, const ParamVars& pv, const ModelParams& params, Var x,
                      const PrefixVars* prefix, PrefixVars* capture = nullptr,
                      AttentionTrace* trace = nullptr);
Var project_logits(GradTape& tape, const ParamVars& pv, Var hidden);

struct ForwardResult {
  Tensor2 logits;  // sequence length x base vocab
  AttentionTrace attention;
};

// Full forward pass. `virtual_rows` (may be null) supplies embeddings for
// [ref] ids in the sequence; it is unused when no [ref] id appears.
ForwardResult forward(const Tensor2& features, const TokenSequence& seq,
                      const Tensor2* virtual_rows, const ModelParams& params,
                      bool trace_attention = false);

struct YesNo {
  bool yes = false;
  double logit_yes = 0.0;
  double logit_no = 0.0;
};

// Compares only the two answer logits; an exact tie answers "no".
YesNo answer_yes_no(std::span<const double> logits, const Vocab& vocab);

}  // namespace patchvlm::toyvlm
