#include "patchvlm/cli/run_config.hpp"

#include <cstdlib>
#include <fstream>

namespace patchvlm::cli {

using json = nlohmann::json;

namespace {

json model_json(const toyvlm::ModelConfig& m) {
  return {{"d_model", m.d_model},     {"layers", m.layers},
          {"heads", m.heads},         {"mlp_hidden", m.mlp_hidden},
          {"grid", m.grid},           {"patch_dim", m.patch_dim},
          {"context", m.context},     {"position_bias", m.position_bias},
          {"absolute_positions", m.absolute_positions}, {"seed", m.seed}};
}

json corpus_json(const world::CorpusConfig& c) {
  json pairs = json::array();
  for (const auto& p : c.pair_weights) pairs.push_back({{"a", p.a}, {"b", p.b}, {"weight", p.weight}});
  return {{"categories", c.categories},   {"scenes", c.scenes},
          {"min_objects", c.min_objects}, {"max_objects", c.max_objects},
          {"theme_groups", c.theme_groups}, {"theme_affinity", c.theme_affinity},
          {"duplicate_prob", c.duplicate_prob}, {"pair_weights", pairs},
          {"seed", c.seed}};
}

json qa_json(const world::QAConfig& q) {
  return {{"k_per_scene", q.k_per_scene}, {"train_fraction", q.train_fraction}, {"seed", q.seed}};
}

json oracle_json(const world::OracleConfig& o) {
  return {{"p_miss", o.p_miss},
          {"p_false", o.p_false},
          {"p_swap", o.p_swap},
          {"jitter_sigma", o.jitter_sigma}};
}

json pretrain_json(const backbone::PretrainConfig& p) {
  return {{"corpus", corpus_json(p.corpus)},
          {"qa", qa_json(p.qa)},
          {"detector", oracle_json(p.detector)},
          {"detector_seed", p.detector_seed},
          {"epochs", p.epochs},
          {"batch_size", p.batch_size},
          {"lr", p.lr},
          {"lr_floor", p.lr_floor},
          {"seed", p.seed}};
}

json train_json(const patch::TrainConfig& t) {
  return {{"lr_initial", t.lr_initial},
          {"lr_floor", t.lr_floor},
          {"weight_decay", t.weight_decay},
          {"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"optimizer", patch::optimizer_name(t.optimizer)},
          {"adam_beta1", t.adam_beta1},
          {"adam_beta2", t.adam_beta2},
          {"adam_eps", t.adam_eps},
          {"n", t.n},
          {"template", prompt::template_name(t.templ)},
          {"mode", prompt::mode_name(t.mode)},
          {"init", patch::init_name(t.init)}};
}

json cell_json(const AblationCell& c) {
  return {{"name", c.name},
          {"template", prompt::template_name(c.templ)},
          {"mode", prompt::mode_name(c.mode)},
          {"n", c.n},
          {"init", patch::init_name(c.init)}};
}

json eval_row_json(const EvalRow& r) {
  return {{"template", prompt::template_name(r.templ)}, {"mode", prompt::mode_name(r.mode)}};
}

// Every key in `user` must exist in `defaults`. Arrays are replaced wholesale;
// their object elements are checked against the first default element.
void check_keys(const json& user, const json& defaults, const std::string& path) {
  if (defaults.is_object()) {
    if (!user.is_object()) throw ConfigError(path + ": expected an object");
    for (const auto& [key, value] : user.items()) {
      const auto it = defaults.find(key);
      const std::string sub = path.empty() ? key : path + "." + key;
      if (it == defaults.end()) throw ConfigError("unknown config key: " + sub);
      check_keys(value, *it, sub);
    }
  } else if (defaults.is_array()) {
    if (!user.is_array()) throw ConfigError(path + ": expected an array");
  }
}

template <typename T>
T get(const json& j, const char* key, const std::string& section) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(section + "." + key + ": " + e.what());
  }
}

template <typename T, typename Parse>
T get_enum(const json& j, const char* key, const std::string& section, Parse parse) {
  const auto name = get<std::string>(j, key, section);
  const auto v = parse(name);
  if (!v) throw ConfigError(section + "." + key + ": unknown value '" + name + "'");
  return *v;
}

toyvlm::ModelConfig model_from(const json& j) {
  toyvlm::ModelConfig m;
  const std::string s = "model";
  m.d_model = get<int>(j, "d_model", s);
  m.layers = get<int>(j, "layers", s);
  m.heads = get<int>(j, "heads", s);
  m.mlp_hidden = get<int>(j, "mlp_hidden", s);
  m.grid = get<int>(j, "grid", s);
  m.patch_dim = get<int>(j, "patch_dim", s);
  m.context = get<int>(j, "context", s);
  m.position_bias = get<double>(j, "position_bias", s);
  m.absolute_positions = get<bool>(j, "absolute_positions", s);
  m.seed = get<std::uint64_t>(j, "seed", s);
  return m;
}

world::CorpusConfig corpus_from(const json& j, const std::string& s) {
  world::CorpusConfig c;
  c.categories = get<int>(j, "categories", s);
  c.scenes = get<int>(j, "scenes", s);
  c.min_objects = get<int>(j, "min_objects", s);
  c.max_objects = get<int>(j, "max_objects", s);
  c.theme_groups = get<int>(j, "theme_groups", s);
  c.theme_affinity = get<double>(j, "theme_affinity", s);
  c.duplicate_prob = get<double>(j, "duplicate_prob", s);
  for (const auto& p : j.at("pair_weights")) {
    c.pair_weights.push_back({get<int>(p, "a", s + ".pair_weights"), get<int>(p, "b", s + ".pair_weights"),
                              get<double>(p, "weight", s + ".pair_weights")});
  }
  c.seed = get<std::uint64_t>(j, "seed", s);
  return c;
}

world::QAConfig qa_from(const json& j, const std::string& s) {
  return {get<int>(j, "k_per_scene", s), get<double>(j, "train_fraction", s),
          get<std::uint64_t>(j, "seed", s)};
}

world::OracleConfig oracle_from(const json& j, const std::string& s) {
  return {get<double>(j, "p_miss", s), get<double>(j, "p_false", s), get<double>(j, "p_swap", s),
          get<double>(j, "jitter_sigma", s)};
}

backbone::PretrainConfig pretrain_from(const json& j) {
  backbone::PretrainConfig p;
  const std::string s = "pretrain";
  p.corpus = corpus_from(j.at("corpus"), s + ".corpus");
  p.qa = qa_from(j.at("qa"), s + ".qa");
  p.detector = oracle_from(j.at("detector"), s + ".detector");
  p.detector_seed = get<std::uint64_t>(j, "detector_seed", s);
  p.epochs = get<int>(j, "epochs", s);
  p.batch_size = get<int>(j, "batch_size", s);
  p.lr = get<double>(j, "lr", s);
  p.lr_floor = get<double>(j, "lr_floor", s);
  p.seed = get<std::uint64_t>(j, "seed", s);
  return p;
}

patch::TrainConfig train_from(const json& j) {
  patch::TrainConfig t;
  const std::string s = "train";
  t.lr_initial = get<double>(j, "lr_initial", s);
  t.lr_floor = get<double>(j, "lr_floor", s);
  t.weight_decay = get<double>(j, "weight_decay", s);
  t.epochs = get<int>(j, "epochs", s);
  t.batch_size = get<int>(j, "batch_size", s);
  t.optimizer = get_enum<patch::Optimizer>(j, "optimizer", s, patch::parse_optimizer);
  t.adam_beta1 = get<double>(j, "adam_beta1", s);
  t.adam_beta2 = get<double>(j, "adam_beta2", s);
  t.adam_eps = get<double>(j, "adam_eps", s);
  t.n = get<int>(j, "n", s);
  t.templ = get_enum<prompt::PromptTemplate>(j, "template", s, prompt::parse_template);
  t.mode = get_enum<prompt::DetectionMode>(j, "mode", s, prompt::parse_mode);
  t.init = get_enum<patch::InitStrategy>(j, "init", s, patch::parse_init);
  return t;
}

json merge(const json& defaults, const json& user) {
  if (!defaults.is_object() || !user.is_object()) return user;
  json out = defaults;
  for (const auto& [key, value] : user.items()) out[key] = merge(defaults.at(key), value);
  return out;
}

}  // namespace

json to_json(const RunConfig& c) {
  json eval = json::array();
  for (const auto& r : c.eval) eval.push_back(eval_row_json(r));
  json cells = json::array();
  for (const auto& cell : c.ablate) cells.push_back(cell_json(cell));
  return {{"output_dir", c.output_dir.string()},
          {"cache_dir", c.cache_dir.string()},
          {"seed", c.seed},
          {"workers", c.workers},
          {"coord_bins", c.coord_bins},
          {"reserved_refs", c.reserved_refs},
          {"model", model_json(c.model)},
          {"pretrain", pretrain_json(c.pretrain)},
          {"corpus", corpus_json(c.corpus)},
          {"qa", qa_json(c.qa)},
          {"oracle", oracle_json(c.oracle)},
          {"oracle_seed", c.oracle_seed},
          {"train", train_json(c.train)},
          {"resume", c.resume.string()},
          {"eval", eval},
          {"ablate", cells},
          {"attn",
           {{"sample_id", c.attn.sample_id},
            {"template", prompt::template_name(c.attn.templ)},
            {"mode", prompt::mode_name(c.attn.mode)}}}};
}

RunConfig from_json(const json& user) {
  const json defaults = to_json(RunConfig{});
  // Element templates for arrays whose defaults might be empty.
  json shapes = defaults;
  shapes["corpus"]["pair_weights"] = json::array({{{"a", 0}, {"b", 0}, {"weight", 1.0}}});
  shapes["pretrain"]["corpus"]["pair_weights"] = shapes["corpus"]["pair_weights"];
  check_keys(user, shapes, "");
  for (const char* arr : {"eval", "ablate"}) {
    if (!user.contains(arr)) continue;
    for (const auto& el : user[arr]) check_keys(el, shapes[arr][0], arr);
  }
  for (const auto* section : {&user, user.contains("pretrain") ? &user["pretrain"] : nullptr}) {
    if (section == nullptr || !section->contains("corpus") ||
        !(*section)["corpus"].contains("pair_weights")) {
      continue;
    }
    for (const auto& el : (*section)["corpus"]["pair_weights"]) {
      check_keys(el, shapes["corpus"]["pair_weights"][0], "pair_weights");
    }
  }

  const json j = merge(defaults, user);
  RunConfig c;
  c.output_dir = get<std::string>(j, "output_dir", "");
  c.cache_dir = get<std::string>(j, "cache_dir", "");
  c.seed = get<std::uint64_t>(j, "seed", "");
  c.workers = get<int>(j, "workers", "");
  c.coord_bins = get<int>(j, "coord_bins", "");
  c.reserved_refs = get<int>(j, "reserved_refs", "");
  c.model = model_from(j.at("model"));
  c.pretrain = pretrain_from(j.at("pretrain"));
  c.corpus = corpus_from(j.at("corpus"), "corpus");
  c.qa = qa_from(j.at("qa"), "qa");
  c.oracle = oracle_from(j.at("oracle"), "oracle");
  c.oracle_seed = get<std::uint64_t>(j, "oracle_seed", "");
  c.train = train_from(j.at("train"));
  c.train.seed = c.seed;
  c.resume = get<std::string>(j, "resume", "");
  c.eval.clear();
  for (const auto& r : j.at("eval")) {
    c.eval.push_back(
        {get_enum<prompt::PromptTemplate>(merge(defaults["eval"][0], r), "template", "eval",
                                          prompt::parse_template),
         get_enum<prompt::DetectionMode>(merge(defaults["eval"][0], r), "mode", "eval",
                                         prompt::parse_mode)});
  }
  c.ablate.clear();
  for (const auto& raw : j.at("ablate")) {
    const json r = merge(defaults["ablate"][0], raw);
    AblationCell cell;
    cell.name = get<std::string>(r, "name", "ablate");
    cell.templ = get_enum<prompt::PromptTemplate>(r, "template", "ablate", prompt::parse_template);
    cell.mode = get_enum<prompt::DetectionMode>(r, "mode", "ablate", prompt::parse_mode);
    cell.n = get<int>(r, "n", "ablate");
    cell.init = get_enum<patch::InitStrategy>(r, "init", "ablate", patch::parse_init);
    c.ablate.push_back(std::move(cell));
  }
  const auto& a = j.at("attn");
  c.attn.sample_id = get<int>(a, "sample_id", "attn");
  c.attn.templ = get_enum<prompt::PromptTemplate>(a, "template", "attn", prompt::parse_template);
  c.attn.mode = get_enum<prompt::DetectionMode>(a, "mode", "attn", prompt::parse_mode);
  return c;
}

void validate(const RunConfig& c) {
  try {
    if (c.output_dir.empty()) throw ConfigError("output_dir is empty");
    if (c.workers < 1) throw ConfigError("workers must be >= 1");
    if (c.coord_bins < 2) throw ConfigError("coord_bins must be >= 2");
    if (c.reserved_refs < 0) throw ConfigError("reserved_refs must be >= 0");
    toyvlm::validate(c.model);
    world::validate(c.corpus);
    world::validate(c.qa);
    world::validate(c.oracle);
    world::validate(c.pretrain.corpus);
    world::validate(c.pretrain.qa);
    world::validate(c.pretrain.detector);
    if (c.pretrain.corpus.categories != c.corpus.categories) {
      throw ConfigError("pretrain.corpus.categories must equal corpus.categories");
    }
    if (c.pretrain.epochs < 0 || c.pretrain.batch_size < 1) {
      throw ConfigError("pretrain: epochs must be >= 0 and batch_size >= 1");
    }
    // A resumed run may ask for zero further epochs.
    auto t = c.train;
    if (!c.resume.empty() && t.epochs == 0) t.epochs = 1;
    patch::validate(t);
    if (!prompt::uses_virtual_tokens(t.templ)) {
      throw ConfigError("train.template " + std::string(prompt::template_name(t.templ)) +
                        " has no virtual tokens");
    }
    if (t.n > c.reserved_refs) throw ConfigError("train.n exceeds reserved_refs");
    for (const auto& cell : c.ablate) {
      if (cell.name.empty()) throw ConfigError("ablate: cell without a name");
      if (cell.n < 0 || cell.n > c.reserved_refs) {
        throw ConfigError("ablate." + cell.name + ": n outside [0, reserved_refs]");
      }
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot - start);
    if (part.empty()) throw ConfigError("override '" + assignment + "' has an empty key part");
    if (dot == std::string::npos) {
      (*node)[part] = std::move(value);
      return;
    }
    if (!node->contains(part)) (*node)[part] = json::object();
    node = &(*node)[part];
    if (!node->is_object()) throw ConfigError("override '" + key + "' descends into a non-object");
    start = dot + 1;
  }
}

RunConfig resolve(const std::filesystem::path& config_path,
                  const std::vector<std::string>& overrides) {
  json j = json::object();
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("cannot read config " + config_path.string());
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("config " + config_path.string() + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config " + config_path.string() + " is not an object");
  }
  for (const auto& o : overrides) apply_override(j, o);
  RunConfig c = from_json(j);
  if (const char* root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0') {
    if (c.output_dir.is_relative()) c.output_dir = std::filesystem::path(root) / c.output_dir;
    if (!c.cache_dir.empty() && c.cache_dir.is_relative()) {
      c.cache_dir = std::filesystem::path(root) / c.cache_dir;
    }
  }
  validate(c);
  return c;
}

}  // namespace patchvlm::cli
