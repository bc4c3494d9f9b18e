#pragma once

#include <cstdint>
#include <random>

#include "patchvlm/backbone/backbone.hpp"
#include "patchvlm/numcore/tensor.hpp"
#include "patchvlm/toyvlm/model.hpp"
#include "patchvlm/toyvlm/vocab.hpp"

namespace testing_support {

using patchvlm::numcore::Tensor2;

inline Tensor2 random_tensor(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  Tensor2 t(r, c);
  for (double& v : t.data()) v = nd(rng);
  return t;
}

inline const patchvlm::toyvlm::Vocab& default_vocab() {
  static const auto v =
      patchvlm::toyvlm::Vocab::build({patchvlm::toyvlm::default_category_names(40)});
  return v;
}

// The pretrained default backbone, shared through an on-disk cache so only
// the first test process pays for it.
inline const patchvlm::toyvlm::ModelParams& default_backbone() {
  static const auto p = patchvlm::backbone::cached_backbone(
      PATCHVLM_TEST_CACHE, patchvlm::toyvlm::ModelConfig{}, default_vocab(),
      patchvlm::backbone::PretrainConfig{});
  return p;
}

}  // namespace testing_support
