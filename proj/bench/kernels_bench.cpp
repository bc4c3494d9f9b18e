// Serial reference kernels against the OpenMP versions, at the toy model's
// shapes and at larger ones where threading has room to pay off.

#include <random>

#include <benchmark/benchmark.h>

#include "patchvlm/numcore/kernels.hpp"
#include "patchvlm/toyvlm/model.hpp"
#include "patchvlm/toyvlm/vocab.hpp"

namespace k = patchvlm::numcore::kernels;
using patchvlm::numcore::Tensor2;

namespace {

Tensor2 random(std::size_t r, std::size_t c, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Tensor2 t(r, c);
  for (double& v : t.data()) v = nd(rng);
  return t;
}

// range(0) = rows, range(1) = inner, range(2) = cols
template <Tensor2 (*F)(const Tensor2&, const Tensor2&)>
void BM_matmul(benchmark::State& st) {
  const auto m = static_cast<std::size_t>(st.range(0)), n = static_cast<std::size_t>(st.range(1)),
             p = static_cast<std::size_t>(st.range(2));
  const auto a = random(m, n, 1), b = random(n, p, 2);
  for (auto _ : st) benchmark::DoNotOptimize(F(a, b));
  st.SetItemsProcessed(static_cast<std::int64_t>(st.iterations() * m * n * p));
}

template <Tensor2 (*F)(const Tensor2&, std::size_t)>
void BM_softmax(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto x = random(n, n, 3);
  for (auto _ : st) benchmark::DoNotOptimize(F(x, 0));
}

template <Tensor2 (*F)(const Tensor2&, const Tensor2&, const Tensor2&, k::LayerNormStats*)>
void BM_layernorm(benchmark::State& st) {
  const auto r = static_cast<std::size_t>(st.range(0)), c = static_cast<std::size_t>(st.range(1));
  const auto x = random(r, c, 4), g = random(1, c, 5), b = random(1, c, 6);
  for (auto _ : st) benchmark::DoNotOptimize(F(x, g, b, nullptr));
}

template <Tensor2 (*F)(const Tensor2&)>
void BM_gelu(benchmark::State& st) {
  const auto x = random(static_cast<std::size_t>(st.range(0)), static_cast<std::size_t>(st.range(1)), 7);
  for (auto _ : st) benchmark::DoNotOptimize(F(x));
}

void matmul_shapes(benchmark::internal::Benchmark* b) {
  b->Args({256, 32, 32})->Args({256, 32, 128})->Args({256, 128, 32})->Args({512, 512, 512});
}

// One forward pass of the default toy model over a full-context prompt.
void BM_forward(benchmark::State& st) {
  using namespace patchvlm::toyvlm;
  const auto vocab = Vocab::build({default_category_names(40)});
  const auto params = ModelParams::init({}, vocab);
  Scene scene;
  scene.objects.push_back({3, {0.1, 0.1, 0.6, 0.5}});
  const auto feats = encode_scene(scene, params);
  TokenSequence seq;
  seq.push(vocab.id(tok::kImgOpen), Segment::kImage);
  for (std::size_t i = 0; i < feats.rows(); ++i) seq.push(kImageFeature, Segment::kImage);
  seq.push(vocab.id(tok::kImgClose), Segment::kImage);
  while (seq.size() < static_cast<std::size_t>(st.range(0))) seq.push(vocab.id("is"), Segment::kQuestion);
  for (auto _ : st) benchmark::DoNotOptimize(forward(feats, seq, nullptr, params).logits);
}

}  // namespace

BENCHMARK(BM_matmul<k::serial::matmul>)->Name("matmul/serial")->Apply(matmul_shapes);
BENCHMARK(BM_matmul<k::omp::matmul>)->Name("matmul/omp")->Apply(matmul_shapes);
BENCHMARK(BM_softmax<k::serial::softmax_rows>)->Name("softmax_causal/serial")->Arg(128)->Arg(256)->Arg(1024);
BENCHMARK(BM_softmax<k::omp::softmax_rows>)->Name("softmax_causal/omp")->Arg(128)->Arg(256)->Arg(1024);
BENCHMARK(BM_layernorm<k::serial::layernorm_rows>)->Name("layernorm/serial")->Args({256, 32})->Args({2048, 512});
BENCHMARK(BM_layernorm<k::omp::layernorm_rows>)->Name("layernorm/omp")->Args({256, 32})->Args({2048, 512});
BENCHMARK(BM_gelu<k::serial::gelu>)->Name("gelu/serial")->Args({256, 128})->Args({2048, 512});
BENCHMARK(BM_gelu<k::omp::gelu>)->Name("gelu/omp")->Args({256, 128})->Args({2048, 512});
BENCHMARK(BM_forward)->Name("forward/toy")->Arg(96)->Arg(256);

BENCHMARK_MAIN();
