#include "patchvlm/numcore/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace patchvlm::numcore::kernels {
namespace {

constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

// Per-row bodies shared by both drivers. Only the outer loop differs between
// serial and omp, which is what keeps the results bit-identical.

inline void matmul_row(const Tensor2& a, const Tensor2& b, Tensor2& out, std::size_t i) {
  double* __restrict o = out.row(i).data();
  const double* ar = a.row(i).data();
  const std::size_t m = b.cols();
  for (std::size_t p = 0; p < a.cols(); ++p) {
    const double av = ar[p];
    const double* __restrict br = b.row(p).data();
    for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
  }
}

// Four output columns at a time; each one still accumulates over p in order.
inline void matmul_bt_row(const Tensor2& a, const Tensor2& b, Tensor2& out, std::size_t i) {
  const double* ar = a.row(i).data();
  double* o = out.row(i).data();
  const std::size_t n = a.cols();
  std::size_t j = 0;
  for (; j + 4 <= b.rows(); j += 4) {
    const double* b0 = b.row(j).data();
    const double* b1 = b0 + n;
    const double* b2 = b1 + n;
    const double* b3 = b2 + n;
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      const double av = ar[p];
      s0 += av * b0[p];
      s1 += av * b1[p];
      s2 += av * b2[p];
      s3 += av * b3[p];
    }
    o[j] = s0;
    o[j + 1] = s1;
    o[j + 2] = s2;
    o[j + 3] = s3;
  }
  for (; j < b.rows(); ++j) {
    const double* br = b.row(j).data();
    double acc = 0.0;
    for (std::size_t p = 0; p < n; ++p) acc += ar[p] * br[p];
    o[j] = acc;
  }
}

inline void matmul_at_row(const Tensor2& a, const Tensor2& b, Tensor2& out, std::size_t i) {
  double* __restrict o = out.row(i).data();
  const std::size_t m = b.cols();
  for (std::size_t p = 0; p < a.rows(); ++p) {
    const double av = a(p, i);
    if (av == 0.0) continue;
    const double* __restrict br = b.row(p).data();
    for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
  }
}

inline void softmax_row(const Tensor2& x, Tensor2& out, std::size_t r, std::size_t offset) {
  const std::size_t n = x.cols();
  const std::size_t visible =
      offset == kNoMask ? n : std::min(n, r + offset + 1);
  const auto in = x.row(r);
  auto o = out.row(r);
  double mx = in[0];
  for (std::size_t c = 1; c < visible; ++c) mx = std::max(mx, in[c]);
  double sum = 0.0;
  for (std::size_t c = 0; c < visible; ++c) {
    o[c] = std::exp(in[c] - mx);
    sum += o[c];
  }
  const double inv = 1.0 / sum;
  for (std::size_t c = 0; c < visible; ++c) o[c] *= inv;
  for (std::size_t c = visible; c < n; ++c) o[c] = 0.0;
}

inline void layernorm_row(const Tensor2& x, const Tensor2& gamma, const Tensor2& beta,
                          Tensor2& out, std::size_t r, LayerNormStats* stats) {
  const std::size_t n = x.cols();
  const auto in = x.row(r);
  double mean = 0.0;
  for (std::size_t c = 0; c < n; ++c) mean += in[c];
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    const double d = in[c] - mean;
    var += d * d;
  }
  var /= static_cast<double>(n);
  const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
  auto o = out.row(r);
  for (std::size_t c = 0; c < n; ++c) o[c] = (in[c] - mean) * rstd * gamma(0, c) + beta(0, c);
  if (stats != nullptr) {
    stats->mean(r, 0) = mean;
    stats->rstd(r, 0) = rstd;
  }
}

inline double gelu_value(double x) {
  const double inner = kGeluScale * (x + kGeluCubic * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(inner));
}

inline double gelu_derivative(double x) {
  const double inner = kGeluScale * (x + kGeluCubic * x * x * x);
  const double t = std::tanh(inner);
  const double dinner = kGeluScale * (1.0 + 3.0 * kGeluCubic * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
}

void check_matmul(const Tensor2& a, const Tensor2& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + a.shape_str() + " x " + b.shape_str());
  }
}

void check_matmul_bt(const Tensor2& a, const Tensor2& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_bt: " + a.shape_str() + " x " + b.shape_str() + "^T");
  }
}

void check_matmul_at(const Tensor2& a, const Tensor2& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_at: " + a.shape_str() + "^T x " + b.shape_str());
  }
}

void check_layernorm(const Tensor2& x, const Tensor2& gamma, const Tensor2& beta) {
  if (gamma.rows() != 1 || beta.rows() != 1 || gamma.cols() != x.cols() ||
      beta.cols() != x.cols()) {
    throw DimensionError("layernorm: affine params " + gamma.shape_str() + "/" +
                         beta.shape_str() + " for input " + x.shape_str());
  }
}

LayerNormStats make_stats(std::size_t rows) { return {Tensor2(rows, 1), Tensor2(rows, 1)}; }

}  // namespace

namespace serial {

Tensor2 matmul(const Tensor2& a, const Tensor2& b) {
  check_matmul(a, b);
  Tensor2 out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) matmul_row(a, b, out, i);
  return out;
}

Tensor2 matmul_bt(const Tensor2& a, const Tensor2& b) {
  check_matmul_bt(a, b);
  Tensor2 out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) matmul_bt_row(a, b, out, i);
  return out;
}

Tensor2 matmul_at(const Tensor2& a, const Tensor2& b) {
  check_matmul_at(a, b);
  Tensor2 out(a.cols(), b.cols());
  for (std::size_t i = 0; i < a.cols(); ++i) matmul_at_row(a, b, out, i);
  return out;
}

Tensor2 softmax_rows(const Tensor2& x, std::size_t causal_offset) {
  Tensor2 out(x.rows(), x.cols());
  if (x.cols() == 0) return out;
  for (std::size_t r = 0; r < x.rows(); ++r) softmax_row(x, out, r, causal_offset);
  return out;
}

Tensor2 layernorm_rows(const Tensor2& x, const Tensor2& gamma, const Tensor2& beta,
                       LayerNormStats* stats) {
  check_layernorm(x, gamma, beta);
  if (stats != nullptr) *stats = make_stats(x.rows());
  Tensor2 out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) layernorm_row(x, gamma, beta, out, r, stats);
  return out;
}

Tensor2 gelu(const Tensor2& x) {
  Tensor2 out(x.rows(), x.cols());
  const auto in = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = gelu_value(in[i]);
  return out;
}

Tensor2 gelu_backward(const Tensor2& x, const Tensor2& grad_out) {
  require_same_shape(x, grad_out, "gelu_backward");
  Tensor2 out(x.rows(), x.cols());
  const auto in = x.data();
  const auto g = grad_out.data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = g[i] * gelu_derivative(in[i]);
  return out;
}

}  // namespace serial

namespace omp {

// Signed loop counters keep older OpenMP runtimes happy.
using Index = std::ptrdiff_t;

Tensor2 matmul(const Tensor2& a, const Tensor2& b) {
  check_matmul(a, b);
  Tensor2 out(a.rows(), b.cols());
  const auto rows = static_cast<Index>(a.rows());
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < rows; ++i) matmul_row(a, b, out, static_cast<std::size_t>(i));
  return out;
}

Tensor2 matmul_bt(const Tensor2& a, const Tensor2& b) {
  check_matmul_bt(a, b);
  Tensor2 out(a.rows(), b.rows());
  const auto rows = static_cast<Index>(a.rows());
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < rows; ++i) matmul_bt_row(a, b, out, static_cast<std::size_t>(i));
  return out;
}

Tensor2 matmul_at(const Tensor2& a, const Tensor2& b) {
  check_matmul_at(a, b);
  Tensor2 out(a.cols(), b.cols());
  const auto rows = static_cast<Index>(a.cols());
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < rows; ++i) matmul_at_row(a, b, out, static_cast<std::size_t>(i));
  return out;
}

Tensor2 softmax_rows(const Tensor2& x, std::size_t causal_offset) {
  Tensor2 out(x.rows(), x.cols());
  if (x.cols() == 0) return out;
  const auto rows = static_cast<Index>(x.rows());
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < rows; ++r) softmax_row(x, out, static_cast<std::size_t>(r), causal_offset);
  return out;
}

Tensor2 layernorm_rows(const Tensor2& x, const Tensor2& gamma, const Tensor2& beta,
                       LayerNormStats* stats) {
  check_layernorm(x, gamma, beta);
  if (stats != nullptr) *stats = make_stats(x.rows());
  Tensor2 out(x.rows(), x.cols());
  const auto rows = static_cast<Index>(x.rows());
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < rows; ++r) {
    layernorm_row(x, gamma, beta, out, static_cast<std::size_t>(r), stats);
  }
  return out;
}

Tensor2 gelu(const Tensor2& x) {
  Tensor2 out(x.rows(), x.cols());
  const auto in = x.data();
  auto o = out.data();
  const auto n = static_cast<Index>(in.size());
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < n; ++i) o[i] = gelu_value(in[i]);
  return out;
}

Tensor2 gelu_backward(const Tensor2& x, const Tensor2& grad_out) {
  require_same_shape(x, grad_out, "gelu_backward");
  Tensor2 out(x.rows(), x.cols());
  const auto in = x.data();
  const auto g = grad_out.data();
  auto o = out.data();
  const auto n = static_cast<Index>(in.size());
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < n; ++i) o[i] = g[i] * gelu_derivative(in[i]);
  return out;
}

}  // namespace omp

#ifdef _OPENMP
namespace active = omp;
#else
namespace active = serial;
#endif

Tensor2 matmul(const Tensor2& a, const Tensor2& b) { return active::matmul(a, b); }
Tensor2 matmul_bt(const Tensor2& a, const Tensor2& b) { return active::matmul_bt(a, b); }
Tensor2 matmul_at(const Tensor2& a, const Tensor2& b) { return active::matmul_at(a, b); }
Tensor2 softmax_rows(const Tensor2& x, std::size_t causal_offset) {
  return active::softmax_rows(x, causal_offset);
}
Tensor2 layernorm_rows(const Tensor2& x, const Tensor2& gamma, const Tensor2& beta,
                       LayerNormStats* stats) {
  return active::layernorm_rows(x, gamma, beta, stats);
}
Tensor2 gelu(const Tensor2& x) { return active::gelu(x); }
Tensor2 gelu_backward(const Tensor2& x, const Tensor2& grad_out) {
  return active::gelu_backward(x, grad_out);
}

bool using_openmp() {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

}  // namespace patchvlm::numcore::kernels
