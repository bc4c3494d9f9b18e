#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "patchvlm/numcore/kernels.hpp"
#include "patchvlm/numcore/tensor.hpp"

namespace patchvlm::numcore {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Op {
  kLeaf,
  kMatmul,
  kMatmulBt,
  kAdd,
  kAddRow,
  kScale,
  kGelu,
  kLayerNorm,
  kSoftmax,
  kGather,
  kConcatRows,
  kConcatCols,
  kSliceRows,
  kSliceCols,
  kCrossEntropy,
};

std::string_view op_name(Op op);

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Records a forward computation as a flat list of primitive ops so it can be
// differentiated in reverse. Leaves are either constants or "marked" tensors
// that gradients are requested for. Marked and borrowed leaves are held by
// pointer: the caller keeps them alive for the lifetime of the tape, and the
// tape never writes through them.
//
// Every op result is checked for NaN/Inf; a non-finite value throws
// NumericError naming the op.
class GradTape {
 public:
  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;
  GradTape(GradTape&&) = default;
  GradTape& operator=(GradTape&&) = default;

  Var constant(Tensor2 value, std::string name = {});
  Var constant_ref(const Tensor2& value, std::string name = {});
  Var marked(const Tensor2& value, std::string name);

  Var matmul(Var a, Var b);
  Var matmul_bt(Var a, Var b);
  Var add(Var a, Var b);
  Var add_row(Var a, Var bias);
  Var scale(Var a, double s);
  Var gelu(Var a);
  Var layernorm(Var x, Var gamma, Var beta);
  Var softmax(Var x, std::size_t causal_offset = kernels::kNoMask);
  Var gather_rows(Var table, std::vector<int> ids);
  Var concat_rows(std::span<const Var> parts);
  Var concat_cols(std::span<const Var> parts);
  Var slice_rows(Var a, std::size_t begin, std::size_t end);
  Var slice_cols(Var a, std::size_t begin, std::size_t end);
  // Mean negative log-likelihood of targets[r] under softmax(logits row r).
  Var cross_entropy(Var logits, std::vector<int> targets);

  const Tensor2& value(Var v) const;
  bool requires_grad(Var v) const;
  bool is_marked(Var v) const;
  Op op(Var v) const;
  const std::string& name(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  // Recomputes every op from its recorded inputs. Results are bit-identical
  // to the recorded values since both go through the same code.
  std::vector<Tensor2> replay() const;

 private:
  friend class Backward;

  struct Node {
    Op op = Op::kLeaf;
    std::vector<int> inputs;
    Tensor2 value;
    const Tensor2* borrowed = nullptr;
    bool requires_grad = false;
    bool marked = false;
    std::string name;
    std::vector<int> ids;  // gather rows, cross-entropy targets
    std::size_t begin = 0;
    std::size_t end = 0;
    double scalar = 0.0;
    kernels::LayerNormStats stats;
  };

  Var push(Node node);
  Var record(Node node);
  const Node& node(Var v) const;
  Tensor2 compute(const Node& n, const std::vector<const Tensor2*>& in,
                  kernels::LayerNormStats* stats) const;

  std::vector<Node> nodes_;
};

// Gradients for marked leaves only. Nothing else on the tape gets an entry.
class Gradients {
 public:
  bool contains(Var leaf) const;
  const Tensor2& at(Var leaf) const;
  std::size_t size() const { return entries_.size(); }

  struct Entry {
    Var leaf;
    std::string name;
    Tensor2 grad;
  };
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  friend class Backward;
  std::vector<Entry> entries_;
};

// Reverse pass from a 1x1 loss. `wrt` selects marked leaves; empty means all
// marked leaves on the tape. Asking for a leaf that is not marked on this tape
// is a ContractError.
Gradients backward(const GradTape& tape, Var loss, std::span<const Var> wrt = {});

}  // namespace patchvlm::numcore
