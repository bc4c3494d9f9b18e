#include "patchvlm/patch/patch.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "patchvlm/numcore/hash.hpp"
#include "patchvlm/numcore/tape.hpp"

namespace patchvlm::patch {

using json = nlohmann::json;
using numcore::GradTape;
using numcore::Var;

std::string_view init_name(InitStrategy s) {
  switch (s) {
    case InitStrategy::kRandom: return "random";
    case InitStrategy::kTextT1: return "text_t1";
    case InitStrategy::kTextT2: return "text_t2";
  }
  return "?";
}

std::optional<InitStrategy> parse_init(std::string_view name) {
  for (auto s : {InitStrategy::kRandom, InitStrategy::kTextT1, InitStrategy::kTextT2}) {
    if (init_name(s) == name) return s;
  }
  return std::nullopt;
}

std::string_view optimizer_name(Optimizer o) { return o == Optimizer::kSgd ? "sgd" : "adamw"; }

std::optional<Optimizer> parse_optimizer(std::string_view name) {
  if (name == "sgd") return Optimizer::kSgd;
  if (name == "adamw") return Optimizer::kAdamW;
  return std::nullopt;
}

namespace {

double table_std(const Tensor2& t) {
  const auto data = t.data();
  const double mean = std::accumulate(data.begin(), data.end(), 0.0) / static_cast<double>(data.size());
  double var = 0.0;
  for (double v : data) var += (v - mean) * (v - mean);
  return std::sqrt(var / static_cast<double>(data.size()));
}

void check_n(int n, const Vocab& vocab) {
  if (n < 0) throw ConfigError("virtual token count must be >= 0");
  if (n > vocab.reserved_refs()) {
    throw ConfigError("virtual token count " + std::to_string(n) + " exceeds reserved [ref] range " +
                      std::to_string(vocab.reserved_refs()));
  }
}

}  // namespace

VirtualTokenBlock init_virtual_from_text(std::string_view text, int n, const Vocab& vocab,
                                         const ModelParams& params) {
  check_n(n, vocab);
  const auto d = static_cast<std::size_t>(params.config.d_model);
  VirtualTokenBlock block;
  block.matrix = Tensor2(static_cast<std::size_t>(n), d);
  const auto ids = vocab.tokenize(text);
  const std::size_t copy = std::min(ids.size(), static_cast<std::size_t>(n));
  for (std::size_t r = 0; r < copy; ++r) {
    const auto src = params.token_embedding.row(static_cast<std::size_t>(ids[r]));
    std::copy(src.begin(), src.end(), block.matrix.row(r).begin());
  }
  return block;
}

VirtualTokenBlock init_virtual(InitStrategy strategy, int n, const Vocab& vocab,
                               const ModelParams& params, std::uint64_t seed) {
  check_n(n, vocab);
  VirtualTokenBlock block;
  switch (strategy) {
    case InitStrategy::kRandom: {
      const auto d = static_cast<std::size_t>(params.config.d_model);
      block.matrix = Tensor2(static_cast<std::size_t>(n), d);
      std::mt19937_64 rng(seed);
      std::normal_distribution<double> dist(0.0, table_std(params.token_embedding));
      for (double& v : block.matrix.data()) v = dist(rng);
      break;
    }
    case InitStrategy::kTextT1:
      block = init_virtual_from_text(kInitTextT1, n, vocab, params);
      break;
    case InitStrategy::kTextT2:
      block = init_virtual_from_text(kInitTextT2, n, vocab, params);
      break;
  }
  block.init = strategy;
  return block;
}

void validate(const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(cfg.lr_initial >= 0.0) || !(cfg.lr_floor >= 0.0)) {
    throw ConfigError("learning rates must be >= 0");
  }
  if (cfg.lr_floor > cfg.lr_initial) throw ConfigError("lr_floor exceeds lr_initial");
  if (!(cfg.weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (cfg.n < 0) throw ConfigError("n must be >= 0");
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr_initial, double lr_floor) {
  if (total_steps <= 1) return lr_initial;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps - 1));
  return lr_floor + 0.5 * (lr_initial - lr_floor) * (1.0 + std::cos(M_PI * t));
}

std::vector<std::pair<std::size_t, int>> answer_targets(const TokenSequence& seq) {
  std::vector<std::pair<std::size_t, int>> out;
  for (std::size_t i = 1; i < seq.size(); ++i) {
    if (seq.segments[i] == toyvlm::Segment::kAnswer) out.emplace_back(i - 1, seq.tokens[i]);
  }
  return out;
}

const toyvlm::PrefixState& PatchObjective::prefix_for(const TrainingExample& ex,
                                                      std::size_t length) {
  numcore::Fnv1a h;
  h.update(static_cast<std::uint64_t>(static_cast<std::int64_t>(ex.cache_key)));
  h.update(static_cast<std::uint64_t>(length));
  for (std::size_t i = 0; i < length; ++i) {
    h.update(static_cast<std::uint64_t>(static_cast<std::int64_t>(ex.sequence.tokens[i])));
  }
  const std::uint64_t key = ex.cache_key >= 0 ? h.digest() : 0;
  if (ex.cache_key >= 0) {
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
  }
  GradTape tape;
  auto pv = toyvlm::bind_params(tape, params_);
  Var feats = tape.constant_ref(*ex.features, "features");
  Var x = toyvlm::embed_block(tape, pv, params_, feats, ex.sequence, 0, length, Var{});
  toyvlm::PrefixState state;
  toyvlm::decode_block(tape, pv, params_, x, nullptr, &state);
  if (ex.cache_key < 0) {
    cache_.erase(0);
    return cache_.emplace(0, std::move(state)).first->second;
  }
  return cache_.emplace(key, std::move(state)).first->second;
}

LossAndGrad PatchObjective::evaluate(const TrainingExample& ex, const Tensor2& block,
                                     bool with_grad) {
  if (ex.features == nullptr) throw numcore::ContractError("training example without features");
  const auto targets = answer_targets(ex.sequence);
  if (targets.empty()) throw numcore::ContractError("training example without ANSWER segment");
  const std::size_t end = targets.back().first + 1;  // rows needed for the logits

  std::size_t first_ref = end;
  for (std::size_t i = 0; i < end; ++i) {
    if (ex.sequence.tokens[i] >= params_.base_vocab) {
      first_ref = i;
      break;
    }
  }
  // With no [ref] token before the answer the block cannot matter; run the
  // whole prompt as one block.
  const bool differentiable = with_grad && block.rows() > 0 && first_ref < end;
  const std::size_t split = first_ref < end ? first_ref : 0;

  GradTape tape;
  auto pv = toyvlm::bind_params(tape, params_);
  Var feats = tape.constant_ref(*ex.features, "features");
  Var delta = block.rows() > 0 ? (differentiable ? tape.marked(block, "delta")
                                                 : tape.constant_ref(block, "delta"))
                               : Var{};
  const toyvlm::PrefixState* prefix = split > 0 ? &prefix_for(ex, split) : nullptr;
  Var x = toyvlm::embed_block(tape, pv, params_, feats, ex.sequence, split, end, delta);
  Var h = toyvlm::decode_block(tape, pv, params_, x, prefix);

  std::vector<int> rows;
  std::vector<int> tokens;
  for (const auto& [row, token] : targets) {
    rows.push_back(static_cast<int>(row - split));
    tokens.push_back(token);
  }
  Var logits = toyvlm::project_logits(tape, pv, tape.gather_rows(h, rows));
  Var loss = tape.cross_entropy(logits, tokens);

  LossAndGrad out;
  out.loss = tape.value(loss)(0, 0);
  if (differentiable) {
    const Var wrt[] = {delta};
    out.grad = numcore::backward(tape, loss, wrt).at(delta);
  } else {
    out.grad = Tensor2(block.rows(), block.cols());
  }
  return out;
}

TrainResult train(VirtualTokenBlock block, const ModelParams& params,
                  const std::vector<TrainingExample>& dataset, const TrainConfig& cfg) {
  validate(cfg);
  if (dataset.empty()) throw ConfigError("training dataset is empty");
  if (block.n() > 0 && block.d() != params.config.d_model) {
    throw ConfigError("virtual block width " + std::to_string(block.d()) +
                      " does not match model width " + std::to_string(params.config.d_model));
  }

  TrainResult result;
  result.model_hash_before = params.hash();

  const std::size_t batches_per_epoch =
      (dataset.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
      static_cast<std::size_t>(cfg.batch_size);
  const std::size_t total_steps = batches_per_epoch * static_cast<std::size_t>(cfg.epochs);

  PatchObjective objective(params);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg.seed);

  Tensor2 m(block.matrix.rows(), block.matrix.cols());
  Tensor2 v(block.matrix.rows(), block.matrix.cols());

  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
      Tensor2 grad(block.matrix.rows(), block.matrix.cols());
      for (std::size_t b = b0; b < b1; ++b) {
        LossAndGrad r;
        try {
          r = objective.evaluate(dataset[order[b]], block.matrix);
        } catch (const numcore::NumericError& e) {
          throw TrainingDiverged("non-finite value at epoch " + std::to_string(epoch) + ", step " +
                                 std::to_string(step) + ", example " + std::to_string(order[b]) +
                                 ": " + e.what());
        }
        if (!std::isfinite(r.loss)) {
          throw TrainingDiverged("loss is not finite at epoch " + std::to_string(epoch) +
                                 ", step " + std::to_string(step));
        }
        epoch_sum += r.loss;
        auto g = grad.data();
        const auto src = r.grad.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
      }
      const double inv = 1.0 / static_cast<double>(b1 - b0);
      for (double& gv : grad.data()) gv *= inv;

      const double lr = cosine_lr(step, total_steps, cfg.lr_initial, cfg.lr_floor);
      auto w = block.matrix.data();
      const auto g = grad.data();
      if (cfg.optimizer == Optimizer::kSgd) {
        for (std::size_t i = 0; i < w.size(); ++i) {
          w[i] = w[i] - lr * cfg.weight_decay * w[i] - lr * g[i];
        }
      } else {
        const double t = static_cast<double>(step + 1);
        const double c1 = 1.0 - std::pow(cfg.adam_beta1, t);
        const double c2 = 1.0 - std::pow(cfg.adam_beta2, t);
        auto md = m.data();
        auto vd = v.data();
        for (std::size_t i = 0; i < w.size(); ++i) {
          md[i] = cfg.adam_beta1 * md[i] + (1.0 - cfg.adam_beta1) * g[i];
          vd[i] = cfg.adam_beta2 * vd[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
          const double update = (md[i] / c1) / (std::sqrt(vd[i] / c2) + cfg.adam_eps);
          w[i] = w[i] - lr * cfg.weight_decay * w[i] - lr * update;
        }
      }
      if (!block.matrix.all_finite()) {
        throw TrainingDiverged("virtual block became non-finite at step " + std::to_string(step));
      }
      ++step;
    }
    result.epoch_loss.push_back(epoch_sum / static_cast<double>(dataset.size()));
  }

  result.steps = step;
  result.model_hash_after = params.hash();
  if (result.model_hash_after != result.model_hash_before) {
    throw numcore::ContractError("model parameters changed during virtual-token training");
  }
  block.trained = true;
  result.block = std::move(block);
  return result;
}

PlugExtension export_plug(const VirtualTokenBlock& block, const Vocab& vocab) {
  if (!block.trained) throw numcore::ContractError("export_plug: block has not been trained");
  if (block.n() > vocab.reserved_refs()) {
    throw ConfigError("export_plug: " + std::to_string(block.n()) +
                      " virtual tokens exceed reserved [ref] range " +
                      std::to_string(vocab.reserved_refs()));
  }
  PlugExtension ext;
  ext.vocab_hash = vocab.hash();
  for (int k = 1; k <= block.n(); ++k) {
    ext.token_ids.push_back(vocab.ref_token(k));
    ext.tokens.push_back(vocab.token(vocab.ref_token(k)));
  }
  ext.embeddings = block.matrix;
  return ext;
}

TrainableCount count_trainable(std::size_t n, std::size_t d, std::size_t frozen_total) {
  TrainableCount c;
  c.trainable = n * d;
  c.total = frozen_total + c.trainable;
  c.ratio = c.total == 0 ? 0.0 : static_cast<double>(c.trainable) / static_cast<double>(c.total);
  return c;
}

TrainableCount count_trainable(const VirtualTokenBlock& block, const ModelParams& params) {
  return count_trainable(static_cast<std::size_t>(block.n()),
                         static_cast<std::size_t>(params.config.d_model), params.parameter_count());
}

namespace {

json config_to_json(const TrainConfig& c) {
  return json{{"lr_initial", c.lr_initial},
              {"lr_floor", c.lr_floor},
              {"weight_decay", c.weight_decay},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"seed", c.seed},
              {"optimizer", optimizer_name(c.optimizer)},
              {"n", c.n},
              {"template", prompt::template_name(c.templ)},
              {"mode", prompt::mode_name(c.mode)},
              {"init", init_name(c.init)}};
}

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  c.lr_initial = j.at("lr_initial").get<double>();
  c.lr_floor = j.at("lr_floor").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  auto opt = parse_optimizer(j.at("optimizer").get<std::string>());
  auto tmpl = prompt::parse_template(j.at("template").get<std::string>());
  auto mode = prompt::parse_mode(j.at("mode").get<std::string>());
  auto init = parse_init(j.at("init").get<std::string>());
  if (!opt || !tmpl || !mode || !init) throw CheckpointError("checkpoint: bad train config enum");
  c.optimizer = *opt;
  c.templ = *tmpl;
  c.mode = *mode;
  c.init = *init;
  c.n = j.at("n").get<int>();
  return c;
}

std::string matrix_hash(const Tensor2& t) {
  numcore::Fnv1a h;
  h.update(static_cast<std::uint64_t>(t.rows())).update(static_cast<std::uint64_t>(t.cols()));
  h.update(t.data());
  return h.hex();
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const PatchCheckpoint& ckpt) {
  json j;
  j["format"] = "patchvlm-checkpoint";
  j["version"] = kCheckpointVersion;
  j["n"] = ckpt.block.n();
  j["d"] = ckpt.block.matrix.cols();
  j["init"] = init_name(ckpt.block.init);
  j["trained"] = ckpt.block.trained;
  j["vocab_hash"] = ckpt.vocab_hash;
  j["model_hash"] = ckpt.model_hash;
  j["train_config"] = config_to_json(ckpt.config);
  j["epoch_loss"] = ckpt.epoch_loss;
  j["metrics"] = ckpt.metrics;
  j["delta_hash"] = matrix_hash(ckpt.block.matrix);
  j["delta"] = ckpt.block.matrix.storage();
  std::ofstream out(path);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out << j.dump(1) << '\n';
}

PatchCheckpoint load_checkpoint(const std::filesystem::path& path,
                                const std::string& expected_model_hash,
                                const std::string& expected_vocab_hash) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("checkpoint not found: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw CheckpointError("malformed checkpoint " + path.string() + ": " + e.what());
  }
  try {
    if (j.at("format") != "patchvlm-checkpoint") throw CheckpointError("not a checkpoint file");
    if (j.at("version").get<int>() != kCheckpointVersion) {
      throw CheckpointError("unsupported checkpoint version " + j.at("version").dump());
    }
    PatchCheckpoint c;
    c.model_hash = j.at("model_hash").get<std::string>();
    c.vocab_hash = j.at("vocab_hash").get<std::string>();
    if (c.model_hash != expected_model_hash) {
      throw CheckpointError("checkpoint model hash " + c.model_hash +
                            " does not match model " + expected_model_hash);
    }
    if (c.vocab_hash != expected_vocab_hash) {
      throw CheckpointError("checkpoint vocab hash " + c.vocab_hash +
                            " does not match vocab " + expected_vocab_hash);
    }
    const auto n = j.at("n").get<std::size_t>();
    const auto d = j.at("d").get<std::size_t>();
    auto data = j.at("delta").get<std::vector<double>>();
    if (data.size() != n * d) throw CheckpointError("checkpoint delta has wrong length");
    c.block.matrix = Tensor2(n, d, std::move(data));
    if (matrix_hash(c.block.matrix) != j.at("delta_hash").get<std::string>()) {
      throw CheckpointError("checkpoint delta does not match its hash");
    }
    auto init = parse_init(j.at("init").get<std::string>());
    if (!init) throw CheckpointError("checkpoint: unknown init strategy");
    c.block.init = *init;
    c.block.trained = j.at("trained").get<bool>();
    c.config = config_from_json(j.at("train_config"));
    c.epoch_loss = j.at("epoch_loss").get<std::vector<double>>();
    c.metrics = j.at("metrics").get<std::map<std::string, double>>();
    return c;
  } catch (const json::exception& e) {
    throw CheckpointError("malformed checkpoint " + path.string() + ": " + e.what());
  }
}

}  // namespace patchvlm::patch
