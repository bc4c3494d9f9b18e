#include "patchvlm/numcore/tape.hpp"

#include <algorithm>
#include <cmath>

namespace patchvlm::numcore {

std::string_view op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kMatmul: return "matmul";
    case Op::kMatmulBt: return "matmul_bt";
    case Op::kAdd: return "add";
    case Op::kAddRow: return "add_row";
    case Op::kScale: return "scale";
    case Op::kGelu: return "gelu";
    case Op::kLayerNorm: return "layernorm";
    case Op::kSoftmax: return "softmax";
    case Op::kGather: return "gather_rows";
    case Op::kConcatRows: return "concat_rows";
    case Op::kConcatCols: return "concat_cols";
    case Op::kSliceRows: return "slice_rows";
    case Op::kSliceCols: return "slice_cols";
    case Op::kCrossEntropy: return "cross_entropy";
  }
  return "unknown";
}

namespace {

void add_into(Tensor2& dst, const Tensor2& src) {
  auto d = dst.data();
  const auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

Tensor2 column_sums(const Tensor2& x) {
  Tensor2 out(1, x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    for (std::size_t c = 0; c < x.cols(); ++c) out(0, c) += row[c];
  }
  return out;
}

}  // namespace

Var GradTape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

const GradTape::Node& GradTape::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw ContractError("GradTape: variable " + std::to_string(v.id) + " is not on this tape");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

Var GradTape::constant(Tensor2 value, std::string name) {
  Node n;
  n.value = std::move(value);
  n.name = std::move(name);
  return push(std::move(n));
}

Var GradTape::constant_ref(const Tensor2& value, std::string name) {
  Node n;
  n.borrowed = &value;
  n.name = std::move(name);
  return push(std::move(n));
}

Var GradTape::marked(const Tensor2& value, std::string name) {
  Node n;
  n.borrowed = &value;
  n.name = std::move(name);
  n.marked = true;
  n.requires_grad = true;
  return push(std::move(n));
}

const Tensor2& GradTape::value(Var v) const {
  const Node& n = node(v);
  return n.borrowed != nullptr ? *n.borrowed : n.value;
}

bool GradTape::requires_grad(Var v) const { return node(v).requires_grad; }
bool GradTape::is_marked(Var v) const { return node(v).marked; }
Op GradTape::op(Var v) const { return node(v).op; }
const std::string& GradTape::name(Var v) const { return node(v).name; }

Tensor2 GradTape::compute(const Node& n, const std::vector<const Tensor2*>& in,
                          kernels::LayerNormStats* stats) const {
  switch (n.op) {
    case Op::kLeaf:
      throw ContractError("GradTape: leaves are not computed");
    case Op::kMatmul:
      return kernels::matmul(*in[0], *in[1]);
    case Op::kMatmulBt:
      return kernels::matmul_bt(*in[0], *in[1]);
    case Op::kAdd: {
      require_same_shape(*in[0], *in[1], "add");
      Tensor2 out = *in[0];
      add_into(out, *in[1]);
      return out;
    }
    case Op::kAddRow: {
      const Tensor2& a = *in[0];
      const Tensor2& bias = *in[1];
      if (bias.rows() != 1 || bias.cols() != a.cols()) {
        throw DimensionError("add_row: bias " + bias.shape_str() + " for " + a.shape_str());
      }
      Tensor2 out = a;
      for (std::size_t r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        for (std::size_t c = 0; c < out.cols(); ++c) row[c] += bias(0, c);
      }
      return out;
    }
    case Op::kScale: {
      Tensor2 out = *in[0];
      for (double& v : out.data()) v *= n.scalar;
      return out;
    }
    case Op::kGelu:
      return kernels::gelu(*in[0]);
    case Op::kLayerNorm:
      return kernels::layernorm_rows(*in[0], *in[1], *in[2], stats);
    case Op::kSoftmax:
      return kernels::softmax_rows(*in[0], n.begin);
    case Op::kGather: {
      const Tensor2& table = *in[0];
      Tensor2 out(n.ids.size(), table.cols());
      for (std::size_t r = 0; r < n.ids.size(); ++r) {
        const int id = n.ids[r];
        if (id < 0 || static_cast<std::size_t>(id) >= table.rows()) {
          throw DimensionError("gather_rows: row " + std::to_string(id) + " outside table " +
                               table.shape_str());
        }
        std::copy_n(table.row(static_cast<std::size_t>(id)).begin(), table.cols(),
                    out.row(r).begin());
      }
      return out;
    }
    case Op::kConcatRows: {
      const std::size_t cols = in.empty() ? 0 : in[0]->cols();
      std::size_t rows = 0;
      for (const Tensor2* t : in) {
        if (t->cols() != cols) throw DimensionError("concat_rows: column mismatch");
        rows += t->rows();
      }
      std::vector<double> data;
      data.reserve(rows * cols);
      for (const Tensor2* t : in) data.insert(data.end(), t->data().begin(), t->data().end());
      return Tensor2(rows, cols, std::move(data));
    }
    case Op::kConcatCols: {
      const std::size_t rows = in.empty() ? 0 : in[0]->rows();
      std::size_t cols = 0;
      for (const Tensor2* t : in) {
        if (t->rows() != rows) throw DimensionError("concat_cols: row mismatch");
        cols += t->cols();
      }
      Tensor2 out(rows, cols);
      std::size_t c0 = 0;
      for (const Tensor2* t : in) {
        for (std::size_t r = 0; r < rows; ++r) {
          std::copy_n(t->row(r).begin(), t->cols(), out.row(r).begin() + static_cast<std::ptrdiff_t>(c0));
        }
        c0 += t->cols();
      }
      return out;
    }
    case Op::kSliceRows: {
      const Tensor2& a = *in[0];
      if (n.begin > n.end || n.end > a.rows()) {
        throw DimensionError("slice_rows: [" + std::to_string(n.begin) + "," +
                             std::to_string(n.end) + ") of " + a.shape_str());
      }
      std::vector<double> data(a.data().begin() + static_cast<std::ptrdiff_t>(n.begin * a.cols()),
                               a.data().begin() + static_cast<std::ptrdiff_t>(n.end * a.cols()));
      return Tensor2(n.end - n.begin, a.cols(), std::move(data));
    }
    case Op::kSliceCols: {
      const Tensor2& a = *in[0];
      if (n.begin > n.end || n.end > a.cols()) {
        throw DimensionError("slice_cols: [" + std::to_string(n.begin) + "," +
                             std::to_string(n.end) + ") of " + a.shape_str());
      }
      Tensor2 out(a.rows(), n.end - n.begin);
      for (std::size_t r = 0; r < a.rows(); ++r) {
        std::copy_n(a.row(r).begin() + static_cast<std::ptrdiff_t>(n.begin), n.end - n.begin,
                    out.row(r).begin());
      }
      return out;
    }
    case Op::kCrossEntropy: {
      const Tensor2& logits = *in[0];
      if (n.ids.size() != logits.rows() || logits.rows() == 0) {
        throw DimensionError("cross_entropy: " + std::to_string(n.ids.size()) +
                             " targets for logits " + logits.shape_str());
      }
      double total = 0.0;
      for (std::size_t r = 0; r < logits.rows(); ++r) {
        const int t = n.ids[r];
        if (t < 0 || static_cast<std::size_t>(t) >= logits.cols()) {
          throw DimensionError("cross_entropy: target " + std::to_string(t) + " out of range");
        }
        const auto row = logits.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (double v : row) sum += std::exp(v - mx);
        total += (std::log(sum) + mx) - row[static_cast<std::size_t>(t)];
      }
      return Tensor2(1, 1, total / static_cast<double>(logits.rows()));
    }
  }
  throw ContractError("GradTape: unhandled op");
}

Var GradTape::record(Node n) {
  std::vector<const Tensor2*> in;
  in.reserve(n.inputs.size());
  for (int id : n.inputs) {
    const Node& src = node(Var{id});
    in.push_back(src.borrowed != nullptr ? src.borrowed : &src.value);
    n.requires_grad = n.requires_grad || src.requires_grad;
  }
  n.value = compute(n, in, n.op == Op::kLayerNorm ? &n.stats : nullptr);
  if (!n.value.all_finite()) {
    throw NumericError("non-finite value produced by " + std::string(op_name(n.op)) + " " +
                       n.value.shape_str());
  }
  return push(std::move(n));
}

Var GradTape::matmul(Var a, Var b) {
  Node n;
  n.op = Op::kMatmul;
  n.inputs = {a.id, b.id};
  return record(std::move(n));
}

Var GradTape::matmul_bt(Var a, Var b) {
  Node n;
  n.op = Op::kMatmulBt;
  n.inputs = {a.id, b.id};
  return record(std::move(n));
}

Var GradTape::add(Var a, Var b) {
  Node n;
  n.op = Op::kAdd;
  n.inputs = {a.id, b.id};
  return record(std::move(n));
}

Var GradTape::add_row(Var a, Var bias) {
  Node n;
  n.op = Op::kAddRow;
  n.inputs = {a.id, bias.id};
  return record(std::move(n));
}

Var GradTape::scale(Var a, double s) {
  Node n;
  n.op = Op::kScale;
  n.inputs = {a.id};
  n.scalar = s;
  return record(std::move(n));
}

Var GradTape::gelu(Var a) {
  Node n;
  n.op = Op::kGelu;
  n.inputs = {a.id};
  return record(std::move(n));
}

Var GradTape::layernorm(Var x, Var gamma, Var beta) {
  Node n;
  n.op = Op::kLayerNorm;
  n.inputs = {x.id, gamma.id, beta.id};
  return record(std::move(n));
}

Var GradTape::softmax(Var x, std::size_t causal_offset) {
  Node n;
  n.op = Op::kSoftmax;
  n.inputs = {x.id};
  n.begin = causal_offset;
  return record(std::move(n));
}

Var GradTape::gather_rows(Var table, std::vector<int> ids) {
  Node n;
  n.op = Op::kGather;
  n.inputs = {table.id};
  n.ids = std::move(ids);
  return record(std::move(n));
}

Var GradTape::concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  Node n;
  n.op = Op::kConcatRows;
  for (Var p : parts) n.inputs.push_back(p.id);
  return record(std::move(n));
}

Var GradTape::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  Node n;
  n.op = Op::kConcatCols;
  for (Var p : parts) n.inputs.push_back(p.id);
  return record(std::move(n));
}

Var GradTape::slice_rows(Var a, std::size_t begin, std::size_t end) {
  Node n;
  n.op = Op::kSliceRows;
  n.inputs = {a.id};
  n.begin = begin;
  n.end = end;
  return record(std::move(n));
}

Var GradTape::slice_cols(Var a, std::size_t begin, std::size_t end) {
  Node n;
  n.op = Op::kSliceCols;
  n.inputs = {a.id};
  n.begin = begin;
  n.end = end;
  return record(std::move(n));
}

Var GradTape::cross_entropy(Var logits, std::vector<int> targets) {
  Node n;
  n.op = Op::kCrossEntropy;
  n.inputs = {logits.id};
  n.ids = std::move(targets);
  return record(std::move(n));
}

std::vector<Tensor2> GradTape::replay() const {
  std::vector<Tensor2> values(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.op == Op::kLeaf) {
      values[i] = n.borrowed != nullptr ? *n.borrowed : n.value;
      continue;
    }
    std::vector<const Tensor2*> in;
    for (int id : n.inputs) in.push_back(&values[static_cast<std::size_t>(id)]);
    kernels::LayerNormStats stats;
    values[i] = compute(n, in, n.op == Op::kLayerNorm ? &stats : nullptr);
  }
  return values;
}

bool Gradients::contains(Var leaf) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return e.leaf.id == leaf.id; });
}

const Tensor2& Gradients::at(Var leaf) const {
  for (const Entry& e : entries_) {
    if (e.leaf.id == leaf.id) return e.grad;
  }
  throw ContractError("Gradients: no gradient for variable " + std::to_string(leaf.id));
}

class Backward {
 public:
  static Gradients run(const GradTape& tape, Var loss, std::span<const Var> wrt) {
    const auto& nodes = tape.nodes_;
    const GradTape::Node& loss_node = tape.node(loss);
    if (loss_node.value.rows() != 1 || loss_node.value.cols() != 1) {
      throw ContractError("backward: loss must be 1x1, got " + loss_node.value.shape_str());
    }

    std::vector<Var> targets;
    if (wrt.empty()) {
      for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (nodes[i].marked) targets.push_back(Var{static_cast<int>(i)});
      }
    } else {
      for (Var v : wrt) {
        if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes.size() ||
            !nodes[static_cast<std::size_t>(v.id)].marked) {
          throw ContractError("backward: variable " + std::to_string(v.id) +
                              " is not a marked leaf on this tape");
        }
        targets.push_back(v);
      }
    }

    std::vector<Tensor2> grads(nodes.size());
    std::vector<bool> has(nodes.size(), false);
    auto accumulate = [&](int id, Tensor2 g) {
      const auto i = static_cast<std::size_t>(id);
      if (!nodes[i].requires_grad) return;
      if (!has[i]) {
        grads[i] = std::move(g);
        has[i] = true;
      } else {
        add_into(grads[i], g);
      }
    };

    const auto loss_index = static_cast<std::size_t>(loss.id);
    if (loss_node.requires_grad) {
      grads[loss_index] = Tensor2(1, 1, 1.0);
      has[loss_index] = true;
    }

    for (std::size_t k = loss_index + 1; k-- > 0;) {
      if (!has[k]) continue;
      const GradTape::Node& n = nodes[k];
      if (n.op == Op::kLeaf) continue;
      const Tensor2& g = grads[k];
      auto in = [&](std::size_t j) -> const Tensor2& {
        return tape.value(Var{n.inputs[j]});
      };
      auto wants = [&](std::size_t j) {
        return nodes[static_cast<std::size_t>(n.inputs[j])].requires_grad;
      };
      propagate(n, g, in, wants, accumulate);
      // Intermediate gradients are no longer needed once propagated.
      if (!n.marked) grads[k] = Tensor2();
    }

    Gradients out;
    for (Var t : targets) {
      const auto i = static_cast<std::size_t>(t.id);
      const Tensor2& v = tape.value(t);
      out.entries_.push_back(
          {t, nodes[i].name, has[i] ? grads[i] : Tensor2(v.rows(), v.cols())});
    }
    return out;
  }

 private:
  template <typename In, typename Wants, typename Acc>
  static void propagate(const GradTape::Node& n, const Tensor2& g, In in, Wants wants,
                        Acc accumulate) {
    switch (n.op) {
      case Op::kMatmul:
        if (wants(0)) accumulate(n.inputs[0], kernels::matmul_bt(g, in(1)));
        if (wants(1)) accumulate(n.inputs[1], kernels::matmul_at(in(0), g));
        return;
      case Op::kMatmulBt:
        if (wants(0)) accumulate(n.inputs[0], kernels::matmul(g, in(1)));
        if (wants(1)) accumulate(n.inputs[1], kernels::matmul_at(g, in(0)));
        return;
      case Op::kAdd:
        if (wants(0)) accumulate(n.inputs[0], g);
        if (wants(1)) accumulate(n.inputs[1], g);
        return;
      case Op::kAddRow:
        if (wants(0)) accumulate(n.inputs[0], g);
        if (wants(1)) accumulate(n.inputs[1], column_sums(g));
        return;
      case Op::kScale: {
        Tensor2 out = g;
        for (double& v : out.data()) v *= n.scalar;
        accumulate(n.inputs[0], std::move(out));
        return;
      }
      case Op::kGelu:
        accumulate(n.inputs[0], kernels::gelu_backward(in(0), g));
        return;
      case Op::kLayerNorm: {
        const Tensor2& x = in(0);
        const Tensor2& gamma = in(1);
        const std::size_t cols = x.cols();
        const double inv_n = 1.0 / static_cast<double>(cols);
        Tensor2 dx(x.rows(), cols);
        Tensor2 dgamma(1, cols);
        Tensor2 dbeta(1, cols);
        std::vector<double> xhat(cols);
        std::vector<double> dxhat(cols);
        for (std::size_t r = 0; r < x.rows(); ++r) {
          const double mean = n.stats.mean(r, 0);
          const double rstd = n.stats.rstd(r, 0);
          double sum_dxhat = 0.0;
          double sum_dxhat_xhat = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            xhat[c] = (x(r, c) - mean) * rstd;
            dxhat[c] = g(r, c) * gamma(0, c);
            sum_dxhat += dxhat[c];
            sum_dxhat_xhat += dxhat[c] * xhat[c];
            dgamma(0, c) += g(r, c) * xhat[c];
            dbeta(0, c) += g(r, c);
          }
          for (std::size_t c = 0; c < cols; ++c) {
            dx(r, c) = rstd * (dxhat[c] - inv_n * sum_dxhat - xhat[c] * inv_n * sum_dxhat_xhat);
          }
        }
        if (wants(0)) accumulate(n.inputs[0], std::move(dx));
        if (wants(1)) accumulate(n.inputs[1], std::move(dgamma));
        if (wants(2)) accumulate(n.inputs[2], std::move(dbeta));
        return;
      }
      case Op::kSoftmax: {
        const Tensor2& p = n.value;
        Tensor2 dx(p.rows(), p.cols());
        for (std::size_t r = 0; r < p.rows(); ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < p.cols(); ++c) dot += p(r, c) * g(r, c);
          for (std::size_t c = 0; c < p.cols(); ++c) dx(r, c) = p(r, c) * (g(r, c) - dot);
        }
        accumulate(n.inputs[0], std::move(dx));
        return;
      }
      case Op::kGather: {
        const Tensor2& table = in(0);
        Tensor2 dt(table.rows(), table.cols());
        for (std::size_t r = 0; r < n.ids.size(); ++r) {
          auto dst = dt.row(static_cast<std::size_t>(n.ids[r]));
          const auto src = g.row(r);
          for (std::size_t c = 0; c < dt.cols(); ++c) dst[c] += src[c];
        }
        accumulate(n.inputs[0], std::move(dt));
        return;
      }
      case Op::kConcatRows: {
        std::size_t r0 = 0;
        for (std::size_t j = 0; j < n.inputs.size(); ++j) {
          const Tensor2& part = in(j);
          if (wants(j)) {
            std::vector<double> data(
                g.data().begin() + static_cast<std::ptrdiff_t>(r0 * g.cols()),
                g.data().begin() + static_cast<std::ptrdiff_t>((r0 + part.rows()) * g.cols()));
            accumulate(n.inputs[j], Tensor2(part.rows(), part.cols(), std::move(data)));
          }
          r0 += part.rows();
        }
        return;
      }
      case Op::kConcatCols: {
        std::size_t c0 = 0;
        for (std::size_t j = 0; j < n.inputs.size(); ++j) {
          const Tensor2& part = in(j);
          if (wants(j)) {
            Tensor2 d(part.rows(), part.cols());
            for (std::size_t r = 0; r < part.rows(); ++r) {
              for (std::size_t c = 0; c < part.cols(); ++c) d(r, c) = g(r, c0 + c);
            }
            accumulate(n.inputs[j], std::move(d));
          }
          c0 += part.cols();
        }
        return;
      }
      case Op::kSliceRows: {
        const Tensor2& a = in(0);
        Tensor2 d(a.rows(), a.cols());
        std::copy(g.data().begin(), g.data().end(),
                  d.data().begin() + static_cast<std::ptrdiff_t>(n.begin * a.cols()));
        accumulate(n.inputs[0], std::move(d));
        return;
      }
      case Op::kSliceCols: {
        const Tensor2& a = in(0);
        Tensor2 d(a.rows(), a.cols());
        for (std::size_t r = 0; r < a.rows(); ++r) {
          for (std::size_t c = n.begin; c < n.end; ++c) d(r, c) = g(r, c - n.begin);
        }
        accumulate(n.inputs[0], std::move(d));
        return;
      }
      case Op::kCrossEntropy: {
        const Tensor2& logits = in(0);
        const double upstream = g(0, 0) / static_cast<double>(logits.rows());
        Tensor2 d = kernels::softmax_rows(logits);
        for (std::size_t r = 0; r < logits.rows(); ++r) {
          d(r, static_cast<std::size_t>(n.ids[r])) -= 1.0;
          for (double& v : d.row(r)) v *= upstream;
        }
        accumulate(n.inputs[0], std::move(d));
        return;
      }
      case Op::kLeaf:
        return;
    }
    throw ContractError("backward: no gradient rule for " + std::string(op_name(n.op)));
  }
};

Gradients backward(const GradTape& tape, Var loss, std::span<const Var> wrt) {
  return Backward::run(tape, loss, wrt);
}

}  // namespace patchvlm::numcore
