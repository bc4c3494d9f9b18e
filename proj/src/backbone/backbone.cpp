#include "patchvlm/backbone/backbone.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include <unistd.h>

#include "patchvlm/numcore/hash.hpp"
#include "patchvlm/numcore/tape.hpp"
#include "patchvlm/patch/patch.hpp"
#include "patchvlm/prompt/prompt.hpp"

namespace patchvlm::backbone {
using numcore::Tensor2;
using numcore::Var;

namespace {

// All prompts about one scene. They share the image block, which is
// decoded once per step and continued by every prompt.
struct SceneBatch {
  std::size_t scene = 0;
  std::vector<toyvlm::TokenSequence> prompts;
};

struct AdamSlot {
  Tensor2* param = nullptr;
  Tensor2 m, v;
};

}  // namespace

PretrainResult pretrain(ModelParams& params, const Vocab& vocab, const PretrainConfig& cfg) {
  const int K = vocab.num_categories();
  const int bins = vocab.coord_bins();
  world::CorpusConfig ccfg = cfg.corpus;
  ccfg.categories = K;
  const auto corpus = world::generate_corpus(ccfg);
  const world::Cooccurrence cooc(corpus, K);
  const auto qa = world::make_pope_qa(corpus, K, cfg.qa);
  const auto dets = world::detect_all(corpus, cfg.detector, cfg.detector_seed, K, bins, &cooc);
  const std::size_t image_rows =
      static_cast<std::size_t>(params.config.grid) * static_cast<std::size_t>(params.config.grid);

  std::vector<numcore::Tensor2> patches;
  for (const auto& s : corpus) patches.push_back(toyvlm::patch_vectors(s, params));

  // Each question appears twice: image only, and image plus detection text.
  std::vector<SceneBatch> data(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) data[i].scene = i;
  std::size_t prompt_count = 0;
  for (const auto& q : qa.samples) {
    const auto scene = static_cast<std::size_t>(q.scene_id);
    const auto question = prompt::question_tokens(q.category, vocab);
    for (auto tmpl : {prompt::PromptTemplate::kP1Baseline, prompt::PromptTemplate::kP2Hard}) {
      std::span<const prompt::Detection> d;
      if (tmpl == prompt::PromptTemplate::kP2Hard) d = dets[scene].detections;
      auto seq = prompt::assemble(tmpl, image_rows, d, prompt::DetectionMode::kCategory, question,
                                  0, vocab);
      prompt::append_answer(seq, q.label, vocab);
      data[scene].prompts.push_back(std::move(seq));
      ++prompt_count;
    }
  }
  std::erase_if(data, [](const SceneBatch& b) { return b.prompts.empty(); });
  const std::size_t image_block = image_rows + 2;

  std::map<std::string, Tensor2*> by_name;
  params.for_each([&](const std::string& name, Tensor2& t) { by_name[name] = &t; });

  std::vector<AdamSlot> slots;
  PretrainResult result;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg.seed);
  const std::size_t batch = static_cast<std::size_t>(std::max(1, cfg.batch_size));
  const std::size_t total = static_cast<std::size_t>(cfg.epochs) * ((data.size() + batch - 1) / batch);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += batch) {
      const std::size_t bend = std::min(order.size(), b0 + batch);
      std::vector<numcore::Tensor2> grads;
      for (std::size_t b = b0; b < bend; ++b) {
        const SceneBatch& sb = data[order[b]];
        numcore::GradTape tape;
        auto pv = toyvlm::bind_params(tape, params, true);
        Var feats = toyvlm::project_patches(tape, pv, patches[sb.scene]);
        const auto& first = sb.prompts.front();
        Var img = toyvlm::embed_block(tape, pv, params, feats, first, 0, image_block, Var{});
        toyvlm::PrefixVars prefix;
        toyvlm::decode_block_vars(tape, pv, params, img, nullptr, &prefix);
        std::vector<Var> answers;
        std::vector<int> toks;
        for (const auto& seq : sb.prompts) {
          const auto targets = patch::answer_targets(seq);
          const std::size_t end = targets.back().first + 1;
          Var x = toyvlm::embed_block(tape, pv, params, feats, seq, image_block, end, Var{});
          Var h = toyvlm::decode_block_vars(tape, pv, params, x, &prefix);
          std::vector<int> rows;
          for (const auto& [r, t] : targets) {
            rows.push_back(static_cast<int>(r - image_block));
            toks.push_back(t);
          }
          answers.push_back(tape.gather_rows(h, std::move(rows)));
        }
        Var loss = tape.cross_entropy(
            toyvlm::project_logits(tape, pv, tape.concat_rows(answers)), toks);
        sum += tape.value(loss)(0, 0) * static_cast<double>(toks.size());
        auto g = numcore::backward(tape, loss);
        if (slots.empty()) {
          for (const auto& e : g.entries()) {
            slots.push_back({by_name.at(e.name), Tensor2(e.grad.rows(), e.grad.cols()),
                             Tensor2(e.grad.rows(), e.grad.cols())});
          }
        }
        if (grads.empty()) {
          for (const auto& e : g.entries()) grads.push_back(e.grad);
        } else {
          for (std::size_t i = 0; i < grads.size(); ++i) {
            auto dst = grads[i].data();
            const auto src = g.entries()[i].grad.data();
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
          }
        }
      }
      const double lr = patch::cosine_lr(result.steps, total, cfg.lr, cfg.lr_floor);
      const double t = static_cast<double>(result.steps + 1);
      const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
      const double inv = 1.0 / static_cast<double>(bend - b0);
      for (std::size_t i = 0; i < slots.size(); ++i) {
        auto w = slots[i].param->data();
        auto m = slots[i].m.data();
        auto v = slots[i].v.data();
        const auto g = grads[i].data();
        for (std::size_t j = 0; j < w.size(); ++j) {
          const double gj = g[j] * inv;
          m[j] = b1 * m[j] + (1.0 - b1) * gj;
          v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
          w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
        }
      }
      ++result.steps;
    }
    result.epoch_loss.push_back(sum / static_cast<double>(prompt_count));
  }
  return result;
}

ModelParams build_backbone(const toyvlm::ModelConfig& mcfg, const Vocab& vocab,
                           const PretrainConfig& cfg, PretrainResult* result) {
  ModelParams params = ModelParams::init(mcfg, vocab);
  auto r = pretrain(params, vocab, cfg);
  if (result != nullptr) *result = std::move(r);
  return params;
}

namespace {

constexpr std::string_view kMagic = "patchvlm-params v1\n";

void hash_double(numcore::Fnv1a& h, double v) { h.update(std::bit_cast<std::uint64_t>(v)); }

}  // namespace

std::string build_key(const toyvlm::ModelConfig& m, const Vocab& vocab, const PretrainConfig& c) {
  numcore::Fnv1a h;
  h.update(vocab.hash());
  for (int v : {m.d_model, m.layers, m.heads, m.mlp_hidden, m.grid, m.patch_dim, m.context}) {
    h.update(static_cast<std::uint64_t>(v));
  }
  hash_double(h, m.position_bias);
  h.update(static_cast<std::uint64_t>(m.absolute_positions));
  h.update(m.seed);
  const auto& k = c.corpus;
  for (int v : {k.categories, k.scenes, k.min_objects, k.max_objects, k.theme_groups}) {
    h.update(static_cast<std::uint64_t>(v));
  }
  hash_double(h, k.theme_affinity);
  hash_double(h, k.duplicate_prob);
  for (const auto& p : k.pair_weights) {
    h.update(static_cast<std::uint64_t>(p.a)).update(static_cast<std::uint64_t>(p.b));
    hash_double(h, p.weight);
  }
  h.update(k.seed);
  h.update(static_cast<std::uint64_t>(c.qa.k_per_scene));
  hash_double(h, c.qa.train_fraction);
  h.update(c.qa.seed);
  for (double v : {c.detector.p_miss, c.detector.p_false, c.detector.p_swap,
                   c.detector.jitter_sigma, c.lr, c.lr_floor}) {
    hash_double(h, v);
  }
  h.update(c.detector_seed);
  h.update(static_cast<std::uint64_t>(c.epochs)).update(static_cast<std::uint64_t>(c.batch_size));
  h.update(c.seed);
  return h.hex();
}

void save_params(const std::filesystem::path& path, const ModelParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CacheError("cannot write " + path.string());
  const std::string hash = params.hash();
  out << kMagic << hash << '\n';
  params.for_each([&](const std::string&, const Tensor2& t) {
    const auto d = t.data();
    out.write(reinterpret_cast<const char*>(d.data()),
              static_cast<std::streamsize>(d.size() * sizeof(double)));
  });
  if (!out) throw CacheError("write failed: " + path.string());
}

ModelParams load_params(const std::filesystem::path& path, const toyvlm::ModelConfig& mcfg,
                        const Vocab& vocab) {
  static_assert(std::endian::native == std::endian::little);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CacheError("cannot read " + path.string());
  std::string magic(kMagic.size(), '\0'), hash;
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (magic != kMagic || !std::getline(in, hash)) {
    throw CacheError(path.string() + ": not a params file");
  }
  ModelParams params = ModelParams::init(mcfg, vocab);
  params.for_each([&](const std::string&, Tensor2& t) {
    auto d = t.data();
    in.read(reinterpret_cast<char*>(d.data()),
            static_cast<std::streamsize>(d.size() * sizeof(double)));
  });
  if (!in || in.peek() != std::char_traits<char>::eof()) {
    throw CacheError(path.string() + ": size does not match the model config");
  }
  if (params.hash() != hash) throw CacheError(path.string() + ": params hash mismatch");
  return params;
}

ModelParams cached_backbone(const std::filesystem::path& dir, const toyvlm::ModelConfig& mcfg,
                            const Vocab& vocab, const PretrainConfig& cfg) {
  const auto path = dir / ("backbone-" + build_key(mcfg, vocab, cfg) + ".bin");
  if (std::filesystem::exists(path)) return load_params(path, mcfg, vocab);
  ModelParams params = build_backbone(mcfg, vocab, cfg);
  std::filesystem::create_directories(dir);
  auto tmp = path;
  tmp += ".tmp" + std::to_string(::getpid());
  save_params(tmp, params);
  std::filesystem::rename(tmp, path);
  return params;
}

}  // namespace patchvlm::backbone
