#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "patchvlm/numcore/kernels.hpp"
#include "patchvlm/toyvlm/model.hpp"
#include "patchvlm/toyvlm/vocab.hpp"
#include "support.hpp"

using namespace patchvlm;
using namespace patchvlm::toyvlm;
using numcore::bit_equal;
using testing_support::random_tensor;

namespace {

using LD = long double;
using Mat = std::vector<std::vector<LD>>;

Mat to_mat(const Tensor2& t) {
  Mat m(t.rows(), std::vector<LD>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t(i, j);
  return m;
}

Mat mul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<LD>(b[0].size(), 0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

Mat layer_norm(const Mat& x, const Tensor2& g, const Tensor2& b) {
  Mat y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    LD mean = 0, var = 0;
    for (LD v : x[i]) mean += v;
    mean /= x[i].size();
    for (LD v : x[i]) var += (v - mean) * (v - mean);
    var /= x[i].size();
    for (std::size_t j = 0; j < x[i].size(); ++j) {
      y[i][j] = (x[i][j] - mean) / std::sqrt(var + 1e-5L) * g(0, j) + b(0, j);
    }
  }
  return y;
}

struct OracleOut {
  Mat logits;
  std::vector<std::vector<LD>> last_row_attention;  // per layer, head-averaged
};

// Written from the architecture description, not from the library code:
// pre-LN decoder, causal multi-head attention with a per-head linear
// distance penalty, tanh-GELU MLP, tied output head.
OracleOut oracle_forward(const ModelParams& p, const Tensor2& features, const TokenSequence& seq,
                         const Tensor2* block) {
  const auto& cfg = p.config;
  const std::size_t S = seq.size(), d = cfg.d_model, H = cfg.heads, dh = d / H;
  Mat x(S, std::vector<LD>(d));
  std::size_t img = 0;
  for (std::size_t i = 0; i < S; ++i) {
    const int t = seq.tokens[i];
    for (std::size_t j = 0; j < d; ++j) {
      LD v;
      if (t == kImageFeature) v = features(img, j);
      else if (t >= p.base_vocab) v = (*block)(static_cast<std::size_t>(t - p.base_vocab), j);
      else v = p.token_embedding(static_cast<std::size_t>(t), j);
      if (cfg.absolute_positions) v += p.position_embedding(i, j);
      v += p.segment_embedding(static_cast<std::size_t>(seq.segments[i]), j);
      x[i][j] = v;
    }
    if (t == kImageFeature) ++img;
  }
  OracleOut out;
  for (const auto& L : p.layers) {
    const Mat h = layer_norm(x, L.ln1_gamma, L.ln1_beta);
    const Mat q = mul(h, to_mat(L.wq)), k = mul(h, to_mat(L.wk)), v = mul(h, to_mat(L.wv));
    Mat attn(S, std::vector<LD>(d, 0));
    std::vector<LD> avg(S, 0);
    for (std::size_t hd = 0; hd < H; ++hd) {
      const LD slope = hd + 1 == H ? 0.0L : cfg.position_bias / std::pow(4.0L, hd);
      for (std::size_t i = 0; i < S; ++i) {
        std::vector<LD> s(i + 1);
        LD mx = -1e300L;
        for (std::size_t j = 0; j <= i; ++j) {
          LD dot = 0;
          for (std::size_t c = 0; c < dh; ++c) dot += q[i][hd * dh + c] * k[j][hd * dh + c];
          s[j] = dot / std::sqrt(static_cast<LD>(dh)) - slope * static_cast<LD>(i - j);
          mx = std::max(mx, s[j]);
        }
        LD z = 0;
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j <= i; ++j) {
          s[j] /= z;
          if (i + 1 == S) avg[j] += s[j] / H;
          for (std::size_t c = 0; c < dh; ++c) attn[i][hd * dh + c] += s[j] * v[j][hd * dh + c];
        }
      }
    }
    out.last_row_attention.push_back(avg);
    const Mat o = mul(attn, to_mat(L.wo));
    for (std::size_t i = 0; i < S; ++i)
      for (std::size_t j = 0; j < d; ++j) x[i][j] += o[i][j];
    const Mat h2 = layer_norm(x, L.ln2_gamma, L.ln2_beta);
    Mat fc = mul(h2, to_mat(L.w_fc));
    for (auto& row : fc)
      for (std::size_t j = 0; j < row.size(); ++j) {
        const LD u = row[j] + L.b_fc(0, j);
        row[j] = 0.5L * u * (1 + std::tanh(std::sqrt(2.0L / 3.14159265358979323846L) *
                                           (u + 0.044715L * u * u * u)));
      }
    const Mat mo = mul(fc, to_mat(L.w_out));
    for (std::size_t i = 0; i < S; ++i)
      for (std::size_t j = 0; j < d; ++j) x[i][j] += mo[i][j] + L.b_out(0, j);
  }
  const Mat hf = layer_norm(x, p.final_gamma, p.final_beta);
  out.logits.assign(S, std::vector<LD>(p.base_vocab, 0));
  for (std::size_t i = 0; i < S; ++i)
    for (int t = 0; t < p.base_vocab; ++t)
      for (std::size_t j = 0; j < d; ++j) out.logits[i][t] += hf[i][j] * p.token_embedding(t, j);
  return out;
}

Vocab small_vocab(int refs = 8) {
  return Vocab::build({default_category_names(6), 10, refs});
}

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.layers = 2;
  c.heads = 2;
  c.mlp_hidden = 32;
  c.grid = 4;
  c.patch_dim = 8;
  c.context = 64;
  c.seed = 99;
  return c;
}

// Moves every parameter off its structured init so the oracle comparison
// covers the general case (untied Q/K, non-unit gammas, nonzero biases).
void perturb(ModelParams& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 0.05);
  p.for_each([&](const std::string&, Tensor2& t) {
    for (double& v : t.data()) v += nd(rng);
  });
}

Scene one_object_scene(int category, BBox box) {
  Scene s;
  s.objects.push_back({category, box});
  return s;
}

TokenSequence random_prompt(const Vocab& vocab, std::size_t image_rows, int n_refs,
                            std::mt19937_64& rng, std::size_t text = 10) {
  TokenSequence seq;
  for (std::size_t i = 0; i < image_rows; ++i) seq.push(kImageFeature, Segment::kImage);
  for (int k = 1; k <= n_refs; ++k) seq.push(vocab.ref_token(k), Segment::kVirtual);
  std::uniform_int_distribution<int> tok(0, static_cast<int>(vocab.base_size()) - 1);
  for (std::size_t i = 0; i < text; ++i) {
    seq.push(tok(rng), i < text / 2 ? Segment::kDetection : Segment::kQuestion);
  }
  return seq;
}

}  // namespace

// ---- vocabulary --------------------------------------------------------------

TEST(Vocab, LayoutPutsRefsAtTheTail) {
  const auto v = small_vocab(5);
  EXPECT_EQ(v.size(), v.base_size() + 5);
  EXPECT_EQ(v.ref_token(1), static_cast<int>(v.base_size()));
  EXPECT_EQ(v.ref_index(v.ref_token(5)), 4);
  EXPECT_TRUE(v.is_ref(v.ref_token(1)));
  EXPECT_FALSE(v.is_ref(v.yes()));
  EXPECT_EQ(v.category_of(v.category_token(3)), 3);
  EXPECT_EQ(v.bin_of(v.coord_token(9)), 9);
  EXPECT_EQ(v.token(v.coord_token(2)), "<x_2>");
  EXPECT_THROW(v.id("no-such-token"), VocabError);
}

TEST(Vocab, SaveLoadRoundTrip) {
  const auto v = small_vocab();
  const auto path = std::filesystem::temp_directory_path() / "patchvlm_vocab_test.json";
  v.save(path);
  const auto w = Vocab::load(path);
  EXPECT_EQ(w.tokens(), v.tokens());
  EXPECT_EQ(w.hash(), v.hash());
  EXPECT_EQ(w.base_size(), v.base_size());
  std::filesystem::remove(path);
}

TEST(Vocab, TokenizeSplitsPunctuation) {
  const auto& v = testing_support::default_vocab();
  const auto ids = v.tokenize("with 'yes' or 'no'");
  ASSERT_EQ(ids.size(), 8u);
  EXPECT_EQ(ids[2], v.yes());
  EXPECT_EQ(v.token(ids[1]), "'");
}

// ---- visual encoder ------------------------------------------------------------

TEST(Rasterize, ObjectCoversExactlyItsCells) {
  // x, y in [2/8, 4/8): cells (2,2), (2,3), (3,2), (3,3).
  const auto s = one_object_scene(1, {0.25, 0.25, 0.5, 0.5});
  const auto h = rasterize(s, 8, 3);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) {
      const bool inside = r >= 2 && r <= 3 && c >= 2 && c <= 3;
      EXPECT_EQ(h(r * 8 + c, 1), inside ? 1.0 : 0.0) << r << "," << c;
      EXPECT_EQ(h(r * 8 + c, 0), 0.0);
    }
}

TEST(Rasterize, MatchesOverlapAreaOracle) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    Scene s;
    for (int k = 0; k < 4; ++k) {
      double a = u(rng), b = u(rng), c = u(rng), d = u(rng);
      if (a == b || c == d) continue;
      s.objects.push_back({k % 3, {std::min(a, b), std::min(c, d), std::max(a, b), std::max(c, d)}});
    }
    const int G = 8;
    const auto h = rasterize(s, G, 3);
    for (int r = 0; r < G; ++r)
      for (int c = 0; c < G; ++c) {
        std::vector<double> expect(3, 0.0);
        for (const auto& o : s.objects) {
          const double w = std::min(o.box.x2, (c + 1.0) / G) - std::max(o.box.x1, c / double(G));
          const double hh = std::min(o.box.y2, (r + 1.0) / G) - std::max(o.box.y1, r / double(G));
          if (w > 0 && hh > 0) expect[o.category] += 1;
        }
        for (int k = 0; k < 3; ++k) EXPECT_EQ(h(r * G + c, k), expect[k]);
      }
  }
}

TEST(Encoder, EmptyCellsShareOneFeatureAndEncodingIsDeterministic) {
  const auto vocab = small_vocab();
  const auto p = ModelParams::init(small_config(), vocab);
  const auto s = one_object_scene(2, {0.0, 0.0, 0.2, 0.2});
  const auto f = encode_scene(s, p);
  EXPECT_TRUE(bit_equal(f, encode_scene(s, p)));
  const auto empty = patch_vectors(Scene{}, p);
  for (std::size_t r = 0; r < empty.rows(); ++r)
    for (double v : empty.row(r)) EXPECT_EQ(v, 0.0);
  // Cell 0 holds the object; every other cell is empty.
  for (std::size_t r = 2; r < f.rows(); ++r) {
    for (std::size_t c = 0; c < f.cols(); ++c) EXPECT_EQ(f(r, c), f(1, c));
  }
}

// ---- initialization -----------------------------------------------------------

TEST(Init, KeysStartTiedToQueriesAndPositionsAreOffByDefault) {
  const auto vocab = small_vocab();
  const auto p = ModelParams::init(small_config(), vocab);
  for (const auto& L : p.layers) EXPECT_TRUE(bit_equal(L.wq, L.wk));
  EXPECT_EQ(p.position_embedding.rows(), 0u);
  EXPECT_EQ(p.segment_embedding.rows(), kSegmentCount);
  EXPECT_EQ(p.token_embedding.rows(), vocab.base_size());
  EXPECT_EQ(p.hash(), ModelParams::init(small_config(), vocab).hash());
}

TEST(Init, SlopesQuarterPerHeadAndLastHeadIsFree) {
  ModelConfig c;
  c.heads = 4;
  c.position_bias = 0.5;
  EXPECT_EQ(position_bias_slope(c, 0), 0.5);
  EXPECT_EQ(position_bias_slope(c, 1), 0.125);
  EXPECT_EQ(position_bias_slope(c, 2), 0.03125);
  EXPECT_EQ(position_bias_slope(c, 3), 0.0);
}

TEST(Init, InvalidConfigRejected) {
  auto c = small_config();
  c.heads = 3;
  EXPECT_THROW(ModelParams::init(c, small_vocab()), std::invalid_argument);
  c = small_config();
  c.context = 10;
  EXPECT_THROW(ModelParams::init(c, small_vocab()), std::invalid_argument);
}

// ---- forward ---------------------------------------------------------------------

class ForwardOracle : public ::testing::TestWithParam<bool> {};

TEST_P(ForwardOracle, MatchesIndependentImplementation) {
  const auto vocab = small_vocab();
  auto cfg = small_config();
  cfg.absolute_positions = GetParam();
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 6; ++trial) {
    auto p = ModelParams::init(cfg, vocab);
    if (trial % 2 == 1) perturb(p, 100 + trial);
    const auto feats = random_tensor(16, 16, 200 + trial, 0.5);
    const auto block = random_tensor(3, 16, 300 + trial, 0.3);
    const auto seq = random_prompt(vocab, 16, 3, rng, 9 + trial);
    const auto fr = forward(feats, seq, &block, p, true);
    const auto oracle = oracle_forward(p, feats, seq, &block);
    for (std::size_t i = 0; i < seq.size(); ++i) {
      std::size_t best = 0, obest = 0;
      for (std::size_t t = 0; t < fr.logits.cols(); ++t) {
        EXPECT_NEAR(fr.logits(i, t), static_cast<double>(oracle.logits[i][t]), 1e-9);
        if (fr.logits(i, t) > fr.logits(i, best)) best = t;
        if (oracle.logits[i][t] > oracle.logits[i][obest]) obest = t;
      }
      EXPECT_EQ(best, obest) << "greedy token differs at position " << i;
    }
    ASSERT_EQ(fr.attention.final_row.size(), 2u);
    for (std::size_t l = 0; l < 2; ++l) {
      double sum = 0;
      for (std::size_t j = 0; j < seq.size(); ++j) {
        EXPECT_NEAR(fr.attention.final_row[l][j],
                    static_cast<double>(oracle.last_row_attention[l][j]), 1e-12);
        sum += fr.attention.final_row[l][j];
      }
      EXPECT_NEAR(sum, 1.0, 1e-9);
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Positions, ForwardOracle, ::testing::Values(false, true));

TEST(Forward, IsCausal) {
  const auto vocab = small_vocab();
  const auto p = ModelParams::init(small_config(), vocab);
  std::mt19937_64 rng(12);
  const auto feats = random_tensor(16, 16, 13);
  auto seq = random_prompt(vocab, 16, 0, rng);
  const auto a = forward(feats, seq, nullptr, p).logits;
  const std::size_t changed = seq.size() - 3;
  seq.tokens[changed] = (seq.tokens[changed] + 1) % static_cast<int>(vocab.base_size());
  const auto b = forward(feats, seq, nullptr, p).logits;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const bool same = std::equal(a.row(i).begin(), a.row(i).end(), b.row(i).begin());
    EXPECT_EQ(same, i < changed) << i;
  }
}

TEST(Forward, PrefixContinuationIsBitIdentical) {
  const auto vocab = small_vocab();
  auto p = ModelParams::init(small_config(), vocab);
  perturb(p, 7);
  std::mt19937_64 rng(14);
  const auto feats = random_tensor(16, 16, 15);
  const auto block = random_tensor(4, 16, 16);
  const auto seq = random_prompt(vocab, 16, 4, rng, 12);
  const auto full = forward(feats, seq, &block, p).logits;
  for (std::size_t split : {1u, 16u, 17u, 25u}) {
    GradTape t;
    const auto pv = bind_params(t, p);
    const Var f = t.constant_ref(feats), v = t.constant_ref(block);
    PrefixState state;
    const Var h1 = decode_block(t, pv, p, embed_block(t, pv, p, f, seq, 0, split, v), nullptr, &state);
    const Var h2 = decode_block(t, pv, p, embed_block(t, pv, p, f, seq, split, seq.size(), v), &state);
    const auto l1 = t.value(project_logits(t, pv, h1));
    const auto l2 = t.value(project_logits(t, pv, h2));
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const auto row = i < split ? l1.row(i) : l2.row(i - split);
      EXPECT_TRUE(std::equal(row.begin(), row.end(), full.row(i).begin())) << split << ":" << i;
    }
  }
}

TEST(Forward, AbsentAndEmptyBlocksMatchAModelWithoutReservedTokens) {
  const auto with_refs = small_vocab(8);
  const auto without = small_vocab(0);
  const auto p = ModelParams::init(small_config(), with_refs);
  const auto q = ModelParams::init(small_config(), without);
  ASSERT_EQ(p.hash(), q.hash());
  std::mt19937_64 rng(17);
  const auto feats = random_tensor(16, 16, 18);
  for (int i = 0; i < 10; ++i) {
    auto seq = random_prompt(with_refs, 16, 0, rng);
    for (auto& s : seq.segments)
      if (s == Segment::kDetection) s = Segment::kQuestion;
    const auto base = forward(feats, seq, nullptr, q).logits;
    const Tensor2 empty(0, 16);
    EXPECT_TRUE(bit_equal(forward(feats, seq, nullptr, p).logits, base));
    EXPECT_TRUE(bit_equal(forward(feats, seq, &empty, p).logits, base));
  }
}

TEST(Forward, ContractViolations) {
  const auto vocab = small_vocab();
  const auto p = ModelParams::init(small_config(), vocab);
  std::mt19937_64 rng(19);
  const auto feats = random_tensor(16, 16, 20);
  const auto with_ref = random_prompt(vocab, 16, 2, rng);
  EXPECT_THROW(forward(feats, with_ref, nullptr, p), numcore::ContractError);
  const auto too_long = random_prompt(vocab, 16, 0, rng, 60);
  EXPECT_THROW(forward(feats, too_long, nullptr, p), ContextOverflow);
}

// ---- answer extraction -----------------------------------------------------------

TEST(Answer, ComparesYesAndNoOnly) {
  const auto& v = testing_support::default_vocab();
  std::vector<double> logits(v.base_size(), 0.0);
  logits[v.yes()] = 2.0;
  logits[v.no()] = 1.0;
  EXPECT_TRUE(answer_yes_no(logits, v).yes);
  logits[v.no()] = 2.0;
  EXPECT_FALSE(answer_yes_no(logits, v).yes);
}

TEST(Answer, AgreesWithArgmaxWhenArgmaxIsAnAnswer) {
  const auto& v = testing_support::default_vocab();
  std::mt19937_64 rng(21);
  std::normal_distribution<double> nd(0.0, 1.0);
  int checked = 0;
  for (int trial = 0; trial < 5000; ++trial) {
    std::vector<double> logits(v.base_size());
    for (double& x : logits) x = nd(rng);
    logits[v.yes()] += 2.5;
    logits[v.no()] += 2.5;
    const auto best = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    if (best != v.yes() && best != v.no()) continue;
    ++checked;
    EXPECT_EQ(answer_yes_no(logits, v).yes, best == v.yes());
  }
  EXPECT_GT(checked, 1000);
}
