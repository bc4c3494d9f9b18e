#pragma once

#include <cstddef>
#include <limits>

#include "patchvlm/numcore/tensor.hpp"

// Dense kernels used by the toy model and its gradient path.
//
// Two implementations are kept side by side: `serial` is the reference, `omp`
// splits the outer row loop across OpenMP threads. Every output entry is
// accumulated in the same fixed order (ascending inner index) in both, so the
// two agree bit-for-bit regardless of thread count. The unqualified entry
// points dispatch to `omp` when the library is built with OpenMP.
namespace patchvlm::numcore::kernels {

inline constexpr std::size_t kNoMask = std::numeric_limits<std::size_t>::max();
inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormStats {
  Tensor2 mean;  // rows x 1
  Tensor2 rstd;  // rows x 1
};

#define PATCHVLM_KERNEL_DECLS                                                        \
  Tensor2 matmul(const Tensor2& a, const Tensor2& b);                                \
  Tensor2 matmul_bt(const Tensor2& a, const Tensor2& b);                             \
  Tensor2 matmul_at(const Tensor2& a, const Tensor2& b);                             \
  Tensor2 softmax_rows(const Tensor2& x, std::size_t causal_offset = kNoMask);       \
  Tensor2 layernorm_rows(const Tensor2& x, const Tensor2& gamma, const Tensor2& beta, \
                         LayerNormStats* stats = nullptr);                           \
  Tensor2 gelu(const Tensor2& x);                                                    \
  Tensor2 gelu_backward(const Tensor2& x, const Tensor2& grad_out);

namespace serial {
PATCHVLM_KERNEL_DECLS
}  // namespace serial

namespace omp {
PATCHVLM_KERNEL_DECLS
}  // namespace omp

#undef PATCHVLM_KERNEL_DECLS

// a (m x k) * b (k x n). Entry (i, j) sums a(i,p) b(p,j) for p = 0..k-1 in order.
Tensor2 matmul(const Tensor2& a, const Tensor2& b);
// a (m x k) * b^T, b is (n x k).
Tensor2 matmul_bt(const Tensor2& a, const Tensor2& b);
// a^T * b, a is (k x m), b is (k x n).
Tensor2 matmul_at(const Tensor2& a, const Tensor2& b);

// Row-wise softmax with max subtraction. With a causal offset, row r only
// sees columns c <= r + causal_offset; masked entries come out exactly 0.
Tensor2 softmax_rows(const Tensor2& x, std::size_t causal_offset = kNoMask);

// Row-wise layer norm; gamma and beta are 1 x cols.
Tensor2 layernorm_rows(const Tensor2& x, const Tensor2& gamma, const Tensor2& beta,
                       LayerNormStats* stats = nullptr);

// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor2 gelu(const Tensor2& x);
Tensor2 gelu_backward(const Tensor2& x, const Tensor2& grad_out);

bool using_openmp();

}  // namespace patchvlm::numcore::kernels
