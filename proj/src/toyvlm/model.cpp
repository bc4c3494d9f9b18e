#include "patchvlm/toyvlm/model.hpp"

#include <cmath>
#include <random>

#include "patchvlm/numcore/hash.hpp"
#include "patchvlm/numcore/kernels.hpp"

namespace patchvlm::toyvlm {
namespace {

Tensor2 gaussian(std::size_t rows, std::size_t cols, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std);
  Tensor2 t(rows, cols);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace

void validate(const ModelConfig& c) {
  if (c.d_model < 1 || c.layers < 1 || c.heads < 1 || c.mlp_hidden < 1 || c.grid < 1 ||
      c.patch_dim < 1 || c.context < 1) {
    throw std::invalid_argument("ModelConfig: all sizes must be positive");
  }
  if (c.d_model % c.heads != 0) {
    throw std::invalid_argument("ModelConfig: d_model must be divisible by heads");
  }
  if (!(c.position_bias >= 0.0)) {
    throw std::invalid_argument("ModelConfig: position_bias must be >= 0");
  }
  if (c.grid * c.grid >= c.context) {
    throw std::invalid_argument("ModelConfig: context too small for the image grid");
  }
}

ModelParams ModelParams::init(const ModelConfig& config, const Vocab& vocab) {
  validate(config);
  std::mt19937_64 rng(config.seed);
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto hidden = static_cast<std::size_t>(config.mlp_hidden);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double resid_scale = 1.0 / std::sqrt(2.0 * config.layers);

  ModelParams p;
  p.config = config;
  p.base_vocab = static_cast<int>(vocab.base_size());
  p.num_categories = vocab.num_categories();
  p.token_embedding = gaussian(vocab.base_size(), d, inv_sqrt_d, rng);
  p.position_embedding = config.absolute_positions
                             ? gaussian(static_cast<std::size_t>(config.context), d, 0.1, rng)
                             : Tensor2(0, d);
  p.segment_embedding = gaussian(kSegmentCount, d, 0.1, rng);
  p.patch_projection = gaussian(static_cast<std::size_t>(p.num_categories),
                                static_cast<std::size_t>(config.patch_dim), 1.0, rng);
  p.visual_proj = gaussian(static_cast<std::size_t>(config.patch_dim), d,
                           1.0 / std::sqrt(static_cast<double>(config.patch_dim)), rng);
  p.visual_bias = Tensor2(1, d);
  for (int l = 0; l < config.layers; ++l) {
    LayerParams layer;
    layer.ln1_gamma = Tensor2(1, d, 1.0);
    layer.ln1_beta = Tensor2(1, d);
    layer.wq = gaussian(d, d, inv_sqrt_d, rng);
    layer.wk = layer.wq;  // starts as a token-matches-itself attention
    layer.wv = gaussian(d, d, inv_sqrt_d, rng);
    layer.wo = gaussian(d, d, inv_sqrt_d * resid_scale, rng);
    layer.ln2_gamma = Tensor2(1, d, 1.0);
    layer.ln2_beta = Tensor2(1, d);
    layer.w_fc = gaussian(d, hidden, inv_sqrt_d, rng);
    layer.b_fc = Tensor2(1, hidden);
    layer.w_out = gaussian(hidden, d, resid_scale / std::sqrt(static_cast<double>(hidden)), rng);
    layer.b_out = Tensor2(1, d);
    p.layers.push_back(std::move(layer));
  }
  p.final_gamma = Tensor2(1, d, 1.0);
  p.final_beta = Tensor2(1, d);
  return p;
}

void ModelParams::for_each(
    const std::function<void(const std::string&, const Tensor2&)>& fn) const {
  fn("token_embedding", token_embedding);
  fn("position_embedding", position_embedding);
  fn("segment_embedding", segment_embedding);
  fn("patch_projection", patch_projection);
  fn("visual_proj", visual_proj);
  fn("visual_bias", visual_bias);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    const LayerParams& L = layers[l];
    fn(pre + "ln1_gamma", L.ln1_gamma);
    fn(pre + "ln1_beta", L.ln1_beta);
    fn(pre + "wq", L.wq);
    fn(pre + "wk", L.wk);
    fn(pre + "wv", L.wv);
    fn(pre + "wo", L.wo);
    fn(pre + "ln2_gamma", L.ln2_gamma);
    fn(pre + "ln2_beta", L.ln2_beta);
    fn(pre + "w_fc", L.w_fc);
    fn(pre + "b_fc", L.b_fc);
    fn(pre + "w_out", L.w_out);
    fn(pre + "b_out", L.b_out);
  }
  fn("final_gamma", final_gamma);
  fn("final_beta", final_beta);
}

void ModelParams::for_each(const std::function<void(const std::string&, Tensor2&)>& fn) {
  const auto& self = *this;
  self.for_each([&](const std::string& name, const Tensor2& t) {
    fn(name, const_cast<Tensor2&>(t));
  });
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Tensor2& t) { n += t.size(); });
  return n;
}

std::string ModelParams::hash() const {
  numcore::Fnv1a h;
  h.update(static_cast<std::uint64_t>(config.d_model))
      .update(static_cast<std::uint64_t>(config.layers))
      .update(static_cast<std::uint64_t>(config.heads))
      .update(static_cast<std::uint64_t>(config.mlp_hidden))
      .update(static_cast<std::uint64_t>(config.grid))
      .update(static_cast<std::uint64_t>(config.patch_dim))
      .update(static_cast<std::uint64_t>(config.context));
  h.update(std::span<const double>(&config.position_bias, 1));
  h.update(static_cast<std::uint64_t>(config.absolute_positions));
  for_each([&](const std::string& name, const Tensor2& t) {
    h.update(name);
    h.update(static_cast<std::uint64_t>(t.rows())).update(static_cast<std::uint64_t>(t.cols()));
    h.update(t.data());
  });
  return h.hex();
}

Tensor2 rasterize(const Scene& scene, int grid, int num_categories) {
  const auto g = static_cast<std::size_t>(grid);
  Tensor2 hist(g * g, static_cast<std::size_t>(num_categories));
  const double cell = 1.0 / grid;
  for (const auto& o : scene.objects) {
    if (o.category < 0 || o.category >= num_categories) {
      throw SceneError("rasterize: category " + std::to_string(o.category) + " out of range");
    }
    for (std::size_t r = 0; r < g; ++r) {
      const double top = static_cast<double>(r) * cell;
      const double bottom = static_cast<double>(r + 1) * cell;
      if (!(o.box.y1 < bottom && o.box.y2 > top)) continue;
      for (std::size_t c = 0; c < g; ++c) {
        const double left = static_cast<double>(c) * cell;
        const double right = static_cast<double>(c + 1) * cell;
        if (o.box.x1 < right && o.box.x2 > left) {
          hist(r * g + c, static_cast<std::size_t>(o.category)) += 1.0;
        }
      }
    }
  }
  return hist;
}

Tensor2 patch_vectors(const Scene& scene, const ModelParams& params) {
  return numcore::kernels::matmul(rasterize(scene, params.config.grid, params.num_categories),
                                  params.patch_projection);
}

Tensor2 encode_scene(const Scene& scene, const ModelParams& params) {
  GradTape tape;
  ParamVars pv = bind_params(tape, params);
  return tape.value(project_patches(tape, pv, patch_vectors(scene, params)));
}

ParamVars bind_params(GradTape& tape, const ModelParams& params, bool mark) {
  auto bind = [&](const Tensor2& t, const std::string& name) {
    return mark ? tape.marked(t, name) : tape.constant_ref(t, name);
  };
  ParamVars pv;
  pv.token_embedding = bind(params.token_embedding, "token_embedding");
  pv.position_embedding = bind(params.position_embedding, "position_embedding");
  pv.segment_embedding = bind(params.segment_embedding, "segment_embedding");
  pv.visual_proj = bind(params.visual_proj, "visual_proj");
  pv.visual_bias = bind(params.visual_bias, "visual_bias");
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const LayerParams& L = params.layers[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    pv.layers.push_back({bind(L.ln1_gamma, pre + "ln1_gamma"), bind(L.ln1_beta, pre + "ln1_beta"),
                         bind(L.wq, pre + "wq"), bind(L.wk, pre + "wk"), bind(L.wv, pre + "wv"),
                         bind(L.wo, pre + "wo"), bind(L.ln2_gamma, pre + "ln2_gamma"),
                         bind(L.ln2_beta, pre + "ln2_beta"), bind(L.w_fc, pre + "w_fc"),
                         bind(L.b_fc, pre + "b_fc"), bind(L.w_out, pre + "w_out"),
                         bind(L.b_out, pre + "b_out")});
  }
  pv.final_gamma = bind(params.final_gamma, "final_gamma");
  pv.final_beta = bind(params.final_beta, "final_beta");
  return pv;
}

Var project_patches(GradTape& tape, const ParamVars& pv, const Tensor2& patches) {
  Var x = tape.constant(patches, "patches");
  return tape.add_row(tape.matmul(x, pv.visual_proj), pv.visual_bias);
}

Var embed_block(GradTape& tape, const ParamVars& pv, const ModelParams& params, Var features,
                const TokenSequence& seq, std::size_t begin, std::size_t end, Var virtual_rows) {
  if (end > seq.size() || begin >= end) {
    throw std::out_of_range("embed_block: bad range");
  }
  if (end > static_cast<std::size_t>(params.config.context)) {
    throw ContextOverflow("sequence length " + std::to_string(end) + " exceeds context " +
                          std::to_string(params.config.context));
  }

  // Image rows before `begin` shift the feature index of later image rows.
  int image_index = 0;
  for (std::size_t i = 0; i < begin; ++i) {
    if (seq.tokens[i] == kImageFeature) ++image_index;
  }

  enum class Source { kImage, kToken, kVirtual };
  auto source_of = [&](int token) {
    if (token == kImageFeature) return Source::kImage;
    if (token >= params.base_vocab) return Source::kVirtual;
    return Source::kToken;
  };

  std::vector<Var> parts;
  std::size_t i = begin;
  while (i < end) {
    const Source src = source_of(seq.tokens[i]);
    std::vector<int> rows;
    std::size_t j = i;
    for (; j < end && source_of(seq.tokens[j]) == src; ++j) {
      const int t = seq.tokens[j];
      switch (src) {
        case Source::kImage: rows.push_back(image_index++); break;
        case Source::kToken:
          if (t < 0) throw std::out_of_range("embed_block: negative token id");
          rows.push_back(t);
          break;
        case Source::kVirtual: rows.push_back(t - params.base_vocab); break;
      }
    }
    switch (src) {
      case Source::kImage:
        if (!features.valid()) throw numcore::ContractError("embed_block: image rows without features");
        parts.push_back(tape.gather_rows(features, std::move(rows)));
        break;
      case Source::kToken:
        parts.push_back(tape.gather_rows(pv.token_embedding, std::move(rows)));
        break;
      case Source::kVirtual: {
        if (!virtual_rows.valid()) {
          throw numcore::ContractError("embed_block: [ref] token without virtual-token rows");
        }
        const std::size_t available = tape.value(virtual_rows).rows();
        for (int r : rows) {
          if (static_cast<std::size_t>(r) >= available) {
            throw numcore::ContractError("embed_block: [ref" + std::to_string(r + 1) +
                                         "] beyond virtual block of " + std::to_string(available));
          }
        }
        parts.push_back(tape.gather_rows(virtual_rows, std::move(rows)));
        break;
      }
    }
    i = j;
  }
  Var x = parts.size() == 1 ? parts.front() : tape.concat_rows(parts);
  if (params.config.absolute_positions) {
    std::vector<int> positions;
    for (std::size_t p = begin; p < end; ++p) positions.push_back(static_cast<int>(p));
    x = tape.add(x, tape.gather_rows(pv.position_embedding, std::move(positions)));
  }
  std::vector<int> segments;
  for (std::size_t p = begin; p < end; ++p) segments.push_back(static_cast<int>(seq.segments[p]));
  return tape.add(x, tape.gather_rows(pv.segment_embedding, std::move(segments)));
}

double position_bias_slope(const ModelConfig& config, int head) {
  if (head == config.heads - 1) return 0.0;
  return std::ldexp(config.position_bias, -2 * head);
}

Var decode_block(GradTape& tape, const ParamVars& pv, const ModelParams& params, Var x,
                 const PrefixState* prefix, PrefixState* capture, AttentionTrace* trace) {
  PrefixVars pvars;
  if (prefix != nullptr && prefix->length > 0) {
    pvars.length = prefix->length;
    for (std::size_t l = 0; l < prefix->keys.size(); ++l) {
      pvars.keys.push_back(tape.constant_ref(prefix->keys[l], "prefix_keys"));
      pvars.values.push_back(tape.constant_ref(prefix->values[l], "prefix_values"));
    }
  }
  PrefixVars captured;
  Var out = decode_block_vars(tape, pv, params, x, pvars.length > 0 ? &pvars : nullptr,
                              capture != nullptr ? &captured : nullptr, trace);
  if (capture != nullptr) {
    capture->length = captured.length;
    capture->keys.clear();
    capture->values.clear();
    for (std::size_t l = 0; l < captured.keys.size(); ++l) {
      capture->keys.push_back(tape.value(captured.keys[l]));
      capture->values.push_back(tape.value(captured.values[l]));
    }
  }
  return out;
}

Var decode_block_vars(GradTape& tape, const ParamVars& pv, const ModelParams& params, Var x,
                      const PrefixVars* prefix, PrefixVars* capture, AttentionTrace* trace) {
  const std::size_t offset = prefix != nullptr ? prefix->length : 0;
  const auto d = static_cast<std::size_t>(params.config.d_model);
  const auto heads = static_cast<std::size_t>(params.config.heads);
  const std::size_t dh = d / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t block_rows = tape.value(x).rows();
  if (offset + block_rows > static_cast<std::size_t>(params.config.context)) {
    throw ContextOverflow("sequence length " + std::to_string(offset + block_rows) +
                          " exceeds context " + std::to_string(params.config.context));
  }

  if (capture != nullptr) {
    capture->length = offset + block_rows;
    capture->keys.clear();
    capture->values.clear();
  }
  if (trace != nullptr) trace->final_row.clear();

  // Per-head distance penalty on the scores, shared by all layers.
  std::vector<Var> bias(heads);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    const double slope = position_bias_slope(params.config, static_cast<int>(hd));
    if (slope == 0.0) continue;
    Tensor2 b(block_rows, offset + block_rows);
    for (std::size_t r = 0; r < block_rows; ++r) {
      for (std::size_t c = 0; c <= offset + r; ++c) {
        b(r, c) = -slope * static_cast<double>(offset + r - c);
      }
    }
    bias[hd] = tape.constant(std::move(b), "position_bias");
  }

  for (std::size_t l = 0; l < pv.layers.size(); ++l) {
    const auto& L = pv.layers[l];
    Var h = tape.layernorm(x, L.ln1_gamma, L.ln1_beta);
    Var q = tape.matmul(h, L.wq);
    Var k = tape.matmul(h, L.wk);
    Var v = tape.matmul(h, L.wv);
    if (prefix != nullptr && prefix->length > 0) {
      const std::vector<Var> ks{prefix->keys[l], k};
      const std::vector<Var> vs{prefix->values[l], v};
      k = tape.concat_rows(ks);
      v = tape.concat_rows(vs);
    }
    if (capture != nullptr) {
      capture->keys.push_back(k);
      capture->values.push_back(v);
    }

    std::vector<Var> head_out;
    std::vector<double> averaged;
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t c0 = hd * dh;
      Var qh = tape.slice_cols(q, c0, c0 + dh);
      Var kh = tape.slice_cols(k, c0, c0 + dh);
      Var vh = tape.slice_cols(v, c0, c0 + dh);
      Var scores = tape.scale(tape.matmul_bt(qh, kh), inv_sqrt_dh);
      if (bias[hd].valid()) scores = tape.add(scores, bias[hd]);
      Var probs = tape.softmax(scores, offset);
      if (trace != nullptr) {
        const auto last = tape.value(probs).row(block_rows - 1);
        if (averaged.empty()) averaged.assign(last.size(), 0.0);
        for (std::size_t c = 0; c < last.size(); ++c) averaged[c] += last[c];
      }
      head_out.push_back(tape.matmul(probs, vh));
    }
    if (trace != nullptr) {
      for (double& a : averaged) a /= static_cast<double>(heads);
      trace->final_row.push_back(std::move(averaged));
    }
    Var attn = head_out.size() == 1 ? head_out.front() : tape.concat_cols(head_out);
    x = tape.add(x, tape.matmul(attn, L.wo));

    Var h2 = tape.layernorm(x, L.ln2_gamma, L.ln2_beta);
    Var fc = tape.gelu(tape.add_row(tape.matmul(h2, L.w_fc), L.b_fc));
    x = tape.add(x, tape.add_row(tape.matmul(fc, L.w_out), L.b_out));
  }
  return tape.layernorm(x, pv.final_gamma, pv.final_beta);
}

Var project_logits(GradTape& tape, const ParamVars& pv, Var hidden) {
  return tape.matmul_bt(hidden, pv.token_embedding);
}

ForwardResult forward(const Tensor2& features, const TokenSequence& seq,
                      const Tensor2* virtual_rows, const ModelParams& params,
                      bool trace_attention) {
  if (seq.empty()) throw std::invalid_argument("forward: empty sequence");
  if (seq.size() > static_cast<std::size_t>(params.config.context)) {
    throw ContextOverflow("sequence length " + std::to_string(seq.size()) +
                          " exceeds context " + std::to_string(params.config.context));
  }
  GradTape tape;
  ParamVars pv = bind_params(tape, params);
  Var feats = tape.constant_ref(features, "features");
  Var virt = virtual_rows != nullptr && virtual_rows->rows() > 0
                 ? tape.constant_ref(*virtual_rows, "virtual")
                 : Var{};
  Var x = embed_block(tape, pv, params, feats, seq, 0, seq.size(), virt);
  ForwardResult out;
  Var h = decode_block(tape, pv, params, x, nullptr, nullptr,
                       trace_attention ? &out.attention : nullptr);
  out.logits = tape.value(project_logits(tape, pv, h));
  return out;
}

YesNo answer_yes_no(std::span<const double> logits, const Vocab& vocab) {
  const auto y = static_cast<std::size_t>(vocab.yes());
  const auto n = static_cast<std::size_t>(vocab.no());
  if (y >= logits.size() || n >= logits.size()) {
    throw std::out_of_range("answer_yes_no: logits row lacks yes/no entries");
  }
  YesNo r;
  r.logit_yes = logits[y];
  r.logit_no = logits[n];
  r.yes = r.logit_yes > r.logit_no;
  return r;
}

}  // namespace patchvlm::toyvlm
