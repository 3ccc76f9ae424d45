#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ssam/tensor.hpp"

namespace ssam {

using NodeId = std::uint32_t;
inline constexpr NodeId kNoNode = 0xffffffffu;

enum class OpKind : std::uint8_t {
  Leaf,
  MatMul,       // a @ b, optionally a @ b^T
  Conv2d,       // stride 1, zero padding keeping spatial dims, odd kernels
  Relu,
  BiasAdd,      // [B,N]+[N] or [B,C,H,W]+[C]
  SoftmaxXent,  // logits [B,C] + int labels -> per-example loss [B]
  Mean,         // mean over all entries -> scalar [1]
  Add,          // elementwise, same shape
  Mul,          // elementwise, same shape
  Flatten,      // [B,...] -> [B,F], identity on data
};

/// Recorded operations in topological order; every node's inputs precede it.
/// Gradients for all nodes are retained after backward, so any intermediate
/// (needed e.g. to inspect masked layer-output gradients) can be read back.
class Tape {
 public:
  struct Node {
    OpKind op = OpKind::Leaf;
    std::array<NodeId, 2> in{kNoNode, kNoNode};
    Tensor value;
    std::vector<double> grad;    // sized lazily in backward()
    std::vector<int> labels;     // SoftmaxXent
    std::vector<double> gate;    // per-output-unit gate applied before propagation
    bool trans_b = false;        // MatMul
  };

  bool empty() const { return nodes_.empty(); }
  std::size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

  const Tensor& value(NodeId id) const { return node(id).value; }

  /// Gradient of the loss w.r.t. node `id`; valid after backward().
  std::span<const double> grad(NodeId id) const {
    const Node& n = node(id);
    if (!backward_done_)
      throw NumericError("Tape::grad: backward has not been run on this tape");
    return n.grad;
  }

  NodeId leaf(Tensor t) { return push(OpKind::Leaf, kNoNode, kNoNode, std::move(t)); }

  NodeId matmul(NodeId a, NodeId b, bool trans_b = false) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.rank() != 2 || tb.rank() != 2)
      throw ShapeError("matmul: expected rank-2 operands, got " + shape_str(ta.shape) + " and " +
                       shape_str(tb.shape));
    const std::size_t m = ta.shape[0], k = ta.shape[1];
    const std::size_t bk = trans_b ? tb.shape[1] : tb.shape[0];
    const std::size_t n = trans_b ? tb.shape[0] : tb.shape[1];
    if (k != bk)
      throw ShapeError("matmul: inner dimensions disagree, " + shape_str(ta.shape) +
                       (trans_b ? " @ T" : " @ ") + shape_str(tb.shape));
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        if (trans_b) {
          for (std::size_t p = 0; p < k; ++p) s += ta.data[i * k + p] * tb.data[j * k + p];
        } else {
          for (std::size_t p = 0; p < k; ++p) s += ta.data[i * k + p] * tb.data[p * n + j];
        }
        out.data[i * n + j] = s;
      }
    NodeId id = push(OpKind::MatMul, a, b, std::move(out));
    nodes_[id].trans_b = trans_b;
    return id;
  }

  /// 2-D convolution: x [B,Cin,H,W], kernel [Cout,Cin,kh,kw], stride 1,
  /// zero padding (kh/2, kw/2) so spatial dims are preserved. Odd kernels only.
  NodeId conv2d(NodeId x, NodeId kernel) {
    const Tensor& tx = value(x);
    const Tensor& tk = value(kernel);
    if (tx.rank() != 4 || tk.rank() != 4)
      throw ShapeError("conv2d: expected rank-4 operands, got " + shape_str(tx.shape) + " and " +
                       shape_str(tk.shape));
    if (tk.shape[2] % 2 == 0 || tk.shape[3] % 2 == 0)
      throw ShapeError("conv2d: kernel dims must be odd, got " + shape_str(tk.shape));
    if (tx.shape[1] != tk.shape[1])
      throw ShapeError("conv2d: channel mismatch, input " + shape_str(tx.shape) + " kernel " +
                       shape_str(tk.shape));
    const std::size_t B = tx.shape[0], C = tx.shape[1], H = tx.shape[2], W = tx.shape[3];
    const std::size_t O = tk.shape[0], kh = tk.shape[2], kw = tk.shape[3];
    const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2);
    const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(kw / 2);
    Tensor out = Tensor::zeros({B, O, H, W});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t i = 0; i < H; ++i)
          for (std::size_t j = 0; j < W; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t u = 0; u < kh; ++u) {
                const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i + u) - ph;
                if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::size_t v = 0; v < kw; ++v) {
                  const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j + v) - pw;
                  if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
                  s += tk.data[((o * C + c) * kh + u) * kw + v] *
                       tx.data[tx.idx4(b, c, static_cast<std::size_t>(ii),
                                       static_cast<std::size_t>(jj))];
                }
              }
            out.data[out.idx4(b, o, i, j)] = s;
          }
    return push(OpKind::Conv2d, x, kernel, std::move(out));
  }

  NodeId relu(NodeId x) {
    Tensor out = value(x);
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return push(OpKind::Relu, x, kNoNode, std::move(out));
  }

  NodeId bias_add(NodeId x, NodeId bias) {
    const Tensor& tx = value(x);
    const Tensor& tb = value(bias);
    if (tb.rank() != 1)
      throw ShapeError("bias_add: bias must be rank-1, got " + shape_str(tb.shape));
    Tensor out = tx;
    if (tx.rank() == 2) {
      if (tb.shape[0] != tx.shape[1])
        throw ShapeError("bias_add: bias " + shape_str(tb.shape) + " does not match " +
                         shape_str(tx.shape));
      for (std::size_t i = 0; i < tx.shape[0]; ++i)
        for (std::size_t j = 0; j < tx.shape[1]; ++j) out.data[i * tx.shape[1] + j] += tb.data[j];
    } else if (tx.rank() == 4) {
      if (tb.shape[0] != tx.shape[1])
        throw ShapeError("bias_add: bias " + shape_str(tb.shape) + " does not match " +
                         shape_str(tx.shape));
      const std::size_t spatial = tx.shape[2] * tx.shape[3];
      for (std::size_t b = 0; b < tx.shape[0]; ++b)
        for (std::size_t c = 0; c < tx.shape[1]; ++c) {
          const std::size_t base = (b * tx.shape[1] + c) * spatial;
          for (std::size_t s = 0; s < spatial; ++s) out.data[base + s] += tb.data[c];
        }
    } else {
      throw ShapeError("bias_add: expected rank-2 or rank-4 input, got " + shape_str(tx.shape));
    }
    return push(OpKind::BiasAdd, x, bias, std::move(out));
  }

  /// Per-example cross-entropy of softmax(logits) against integer labels.
  NodeId softmax_cross_entropy(NodeId logits, std::vector<int> labels) {
    const Tensor& tl = value(logits);
    if (tl.rank() != 2)
      throw ShapeError("softmax_cross_entropy: logits must be rank-2, got " + shape_str(tl.shape));
    const std::size_t B = tl.shape[0], C = tl.shape[1];
    if (labels.size() != B)
      throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                       " labels for batch " + std::to_string(B));
    Tensor out = Tensor::zeros({B});
    for (std::size_t b = 0; b < B; ++b) {
      const int y = labels[b];
      if (y < 0 || static_cast<std::size_t>(y) >= C)
        throw ConfigError("softmax_cross_entropy: label " + std::to_string(y) +
                          " out of range for " + std::to_string(C) + " classes");
      double mx = tl.data[b * C];
      for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, tl.data[b * C + c]);
      double sum = 0.0;
      for (std::size_t c = 0; c < C; ++c) sum += std::exp(tl.data[b * C + c] - mx);
      out.data[b] = std::log(sum) - (tl.data[b * C + static_cast<std::size_t>(y)] - mx);
    }
    NodeId id = push(OpKind::SoftmaxXent, logits, kNoNode, std::move(out));
    nodes_[id].labels = std::move(labels);
    return id;
  }

  NodeId mean(NodeId x) {
    const Tensor& tx = value(x);
    if (tx.numel() == 0) throw ShapeError("mean: empty tensor");
    double s = 0.0;
    for (double v : tx.data) s += v;
    return push(OpKind::Mean, x, kNoNode, Tensor::scalar(s / static_cast<double>(tx.numel())));
  }

  NodeId add(NodeId a, NodeId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!same_shape(ta, tb))
      throw ShapeError("add: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Tensor out = ta;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += tb.data[i];
    return push(OpKind::Add, a, b, std::move(out));
  }

  NodeId mul(NodeId a, NodeId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!same_shape(ta, tb))
      throw ShapeError("mul: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Tensor out = ta;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= tb.data[i];
    return push(OpKind::Mul, a, b, std::move(out));
  }

  NodeId flatten(NodeId x) {
    const Tensor& tx = value(x);
    if (tx.rank() < 2) throw ShapeError("flatten: expected rank >= 2, got " + shape_str(tx.shape));
    Tensor out = tx;
    out.shape = {tx.shape[0], tx.numel() / tx.shape[0]};
    return push(OpKind::Flatten, x, kNoNode, std::move(out));
  }

  /// Attach a per-output-unit gate to a node: length shape[1] for rank-2
  /// values (per column) or rank-4 values (per channel). During backward the
  /// node's fully accumulated gradient is multiplied by the gate before being
  /// propagated to its inputs.
  void set_gate(NodeId id, std::vector<double> gate) {
    Node& n = node(id);
    if (n.value.rank() != 2 && n.value.rank() != 4)
      throw ShapeError("set_gate: node value must be rank-2 or rank-4, got " +
                       shape_str(n.value.shape));
    if (gate.size() != n.value.shape[1])
      throw ShapeError("set_gate: gate length " + std::to_string(gate.size()) +
                       " does not match unit count " + std::to_string(n.value.shape[1]));
    n.gate = std::move(gate);
  }

  /// Reverse sweep from a scalar loss node. Replays each node exactly once.
  void backward(NodeId loss) {
    if (nodes_.empty()) throw NumericError("backward: tape is empty (run forward first)");
    Node& ln = node(loss);
    if (ln.value.numel() != 1)
      throw ShapeError("backward: loss must be scalar, got " + shape_str(ln.value.shape));
    for (Node& n : nodes_) n.grad.assign(n.value.numel(), 0.0);
    ln.grad[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.gate.empty()) apply_gate(n);
      propagate(n);
    }
    backward_done_ = true;
  }

 private:
  std::vector<Node> nodes_;
  bool backward_done_ = false;

  Node& node(NodeId id) {
    if (id >= nodes_.size()) throw ConfigError("Tape: invalid node id");
    return nodes_[id];
  }
  const Node& node(NodeId id) const {
    if (id >= nodes_.size()) throw ConfigError("Tape: invalid node id");
    return nodes_[id];
  }

  NodeId push(OpKind op, NodeId a, NodeId b, Tensor value) {
    Node n;
    n.op = op;
    n.in = {a, b};
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  void apply_gate(Node& n) {
    const std::size_t units = n.value.shape[1];
    if (n.value.rank() == 2) {
      for (std::size_t b = 0; b < n.value.shape[0]; ++b)
        for (std::size_t j = 0; j < units; ++j) n.grad[b * units + j] *= n.gate[j];
    } else {
      const std::size_t spatial = n.value.shape[2] * n.value.shape[3];
      for (std::size_t b = 0; b < n.value.shape[0]; ++b)
        for (std::size_t c = 0; c < units; ++c) {
          const std::size_t base = (b * units + c) * spatial;
          for (std::size_t s = 0; s < spatial; ++s) n.grad[base + s] *= n.gate[c];
        }
    }
  }

  void propagate(Node& n) {
    switch (n.op) {
      case OpKind::Leaf:
        break;
      case OpKind::MatMul: {
        Node& a = node(n.in[0]);
        Node& b = node(n.in[1]);
        const std::size_t m = a.value.shape[0], k = a.value.shape[1], nn = n.value.shape[1];
        if (n.trans_b) {
          // y = a @ b^T, b is [n,k]: da += dy @ b; db += dy^T @ a
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < nn; ++j) s += n.grad[i * nn + j] * b.value.data[j * k + p];
              a.grad[i * k + p] += s;
            }
          for (std::size_t j = 0; j < nn; ++j)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t i = 0; i < m; ++i) s += n.grad[i * nn + j] * a.value.data[i * k + p];
              b.grad[j * k + p] += s;
            }
        } else {
          // y = a @ b, b is [k,n]: da += dy @ b^T; db += a^T @ dy
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < nn; ++j) s += n.grad[i * nn + j] * b.value.data[p * nn + j];
              a.grad[i * k + p] += s;
            }
          for (std::size_t p = 0; p < k; ++p)
            for (std::size_t j = 0; j < nn; ++j) {
              double s = 0.0;
              for (std::size_t i = 0; i < m; ++i) s += a.value.data[i * k + p] * n.grad[i * nn + j];
              b.grad[p * nn + j] += s;
            }
        }
        break;
      }
      case OpKind::Conv2d: {
        Node& x = node(n.in[0]);
        Node& kn = node(n.in[1]);
        const std::size_t B = x.value.shape[0], C = x.value.shape[1], H = x.value.shape[2],
                          W = x.value.shape[3];
        const std::size_t O = kn.value.shape[0], kh = kn.value.shape[2], kw = kn.value.shape[3];
        const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2);
        const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(kw / 2);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t o = 0; o < O; ++o)
            for (std::size_t i = 0; i < H; ++i)
              for (std::size_t j = 0; j < W; ++j) {
                const double g = n.grad[n.value.idx4(b, o, i, j)];
                if (g == 0.0) continue;
                for (std::size_t c = 0; c < C; ++c)
                  for (std::size_t u = 0; u < kh; ++u) {
                    const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i + u) - ph;
                    if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::size_t v = 0; v < kw; ++v) {
                      const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j + v) - pw;
                      if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
                      const std::size_t xi = x.value.idx4(b, c, static_cast<std::size_t>(ii),
                                                          static_cast<std::size_t>(jj));
                      const std::size_t ki = ((o * C + c) * kh + u) * kw + v;
                      x.grad[xi] += g * kn.value.data[ki];
                      kn.grad[ki] += g * x.value.data[xi];
                    }
                  }
              }
        break;
      }
      case OpKind::Relu: {
        Node& x = node(n.in[0]);
        // subgradient at 0 is 0
        for (std::size_t i = 0; i < x.value.numel(); ++i)
          if (x.value.data[i] > 0.0) x.grad[i] += n.grad[i];
        break;
      }
      case OpKind::BiasAdd: {
        Node& x = node(n.in[0]);
        Node& b = node(n.in[1]);
        for (std::size_t i = 0; i < x.value.numel(); ++i) x.grad[i] += n.grad[i];
        if (x.value.rank() == 2) {
          const std::size_t N = x.value.shape[1];
          for (std::size_t r = 0; r < x.value.shape[0]; ++r)
            for (std::size_t j = 0; j < N; ++j) b.grad[j] += n.grad[r * N + j];
        } else {
          const std::size_t spatial = x.value.shape[2] * x.value.shape[3];
          for (std::size_t r = 0; r < x.value.shape[0]; ++r)
            for (std::size_t c = 0; c < x.value.shape[1]; ++c) {
              const std::size_t base = (r * x.value.shape[1] + c) * spatial;
              double s = 0.0;
              for (std::size_t sp = 0; sp < spatial; ++sp) s += n.grad[base + sp];
              b.grad[c] += s;
            }
        }
        break;
      }
      case OpKind::SoftmaxXent: {
        Node& l = node(n.in[0]);
        const std::size_t B = l.value.shape[0], C = l.value.shape[1];
        for (std::size_t b = 0; b < B; ++b) {
          const double g = n.grad[b];
          if (g == 0.0) continue;
          double mx = l.value.data[b * C];
          for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, l.value.data[b * C + c]);
          double sum = 0.0;
          for (std::size_t c = 0; c < C; ++c) sum += std::exp(l.value.data[b * C + c] - mx);
          for (std::size_t c = 0; c < C; ++c) {
            const double p = std::exp(l.value.data[b * C + c] - mx) / sum;
            const double ind = (static_cast<int>(c) == n.labels[b]) ? 1.0 : 0.0;
            l.grad[b * C + c] += g * (p - ind);
          }
        }
        break;
      }
      case OpKind::Mean: {
        Node& x = node(n.in[0]);
        const double g = n.grad[0] / static_cast<double>(x.value.numel());
        for (std::size_t i = 0; i < x.value.numel(); ++i) x.grad[i] += g;
        break;
      }
      case OpKind::Add: {
        Node& a = node(n.in[0]);
        Node& b = node(n.in[1]);
        for (std::size_t i = 0; i < n.value.numel(); ++i) {
          a.grad[i] += n.grad[i];
          b.grad[i] += n.grad[i];
        }
        break;
      }
      case OpKind::Mul: {
        Node& a = node(n.in[0]);
        Node& b = node(n.in[1]);
        for (std::size_t i = 0; i < n.value.numel(); ++i) {
          a.grad[i] += n.grad[i] * b.value.data[i];
          b.grad[i] += n.grad[i] * a.value.data[i];
        }
        break;
      }
      case OpKind::Flatten: {
        Node& x = node(n.in[0]);
        for (std::size_t i = 0; i < n.value.numel(); ++i) x.grad[i] += n.grad[i];
        break;
      }
    }
  }
};

}  // namespace ssam
