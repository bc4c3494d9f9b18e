#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchvlm/toyvlm/model.hpp"
#include "patchvlm/toyvlm/vocab.hpp"
#include "patchvlm/world/world.hpp"

namespace patchvlm::backbone {

using toyvlm::ModelParams;
using toyvlm::Vocab;

// Stands in for the vision-language pretraining of a real backbone. The
// random init is fitted once, on its own scene corpus, to answer existence
// questions from the image alone and from the image plus detection text
// produced by a deliberately unreliable detector. The result is frozen.
struct PretrainConfig {
  world::CorpusConfig corpus = [] {
    world::CorpusConfig c;
    c.scenes = 1500;
    c.seed = 90001;
    return c;
  }();
  world::QAConfig qa{3, 1.0, 90002};
  world::OracleConfig detector{0.3, 0.3, 0.0, 0.01};
  std::uint64_t detector_seed = 90003;
  int epochs = 1;
  int batch_size = 1;  // scenes per step; each scene contributes all its prompts
  double lr = 3e-3;
  double lr_floor = 3e-4;
  std::uint64_t seed = 90004;
};

struct PretrainResult {
  std::vector<double> epoch_loss;
  std::size_t steps = 0;
};

// Deterministic in (params, cfg). Updates every parameter except the frozen
// patch projection.
PretrainResult pretrain(ModelParams& params, const Vocab& vocab, const PretrainConfig& cfg);

// Random init followed by pretrain(); the frozen model every run starts from.
ModelParams build_backbone(const toyvlm::ModelConfig& mcfg, const Vocab& vocab,
                           const PretrainConfig& cfg, PretrainResult* result = nullptr);

class CacheError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Fingerprint of everything build_backbone depends on.
std::string build_key(const toyvlm::ModelConfig& mcfg, const Vocab& vocab,
                      const PretrainConfig& cfg);

// Raw little-endian doubles in for_each order, framed by a magic line and the
// params hash. load_params rebuilds the layout from `mcfg` and checks the hash.
void save_params(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_params(const std::filesystem::path& path, const toyvlm::ModelConfig& mcfg,
                        const Vocab& vocab);

// build_backbone, memoized as <dir>/backbone-<build_key>.bin.
ModelParams cached_backbone(const std::filesystem::path& dir, const toyvlm::ModelConfig& mcfg,
                            const Vocab& vocab, const PretrainConfig& cfg);

}  // namespace patchvlm::backbone
