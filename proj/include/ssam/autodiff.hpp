#pragma once

#include <functional>
#include <span>
#include <vector>

#include "ssam/params.hpp"
#include "ssam/tape.hpp"

namespace ssam {

/// A model is a graph builder: given a tape, leaf nodes for the parameters
/// (aligned with ParameterSet entries) and an input leaf, it returns the
/// logits node. When `layer_outputs` is non-null, the node id of each
/// maskable layer's output (post bias) is appended in layer order.
using GraphFn = std::function<NodeId(Tape&, std::span<const NodeId>, NodeId,
                                     std::vector<NodeId>*)>;

/// Gradient oracle over flat parameter vectors; backs hvp and Lanczos.
using GradOracle = std::function<std::vector<double>(std::span<const double>)>;

struct ForwardPass {
  Tape tape;
  std::vector<NodeId> param_nodes;
  NodeId input_node = kNoNode;
  NodeId output_node = kNoNode;
  std::vector<NodeId> layer_outputs;
};

/// Runs a model forward on a fresh tape. The tape must be empty.
inline ForwardPass forward(Tape tape, const GraphFn& fn, const ParameterSet& params,
                           const Tensor& input) {
  if (!tape.empty()) throw ConfigError("forward: tape must be empty");
  ForwardPass fp;
  fp.tape = std::move(tape);
  fp.param_nodes.reserve(params.entries.size());
  for (const auto& e : params.entries) fp.param_nodes.push_back(fp.tape.leaf(e.value));
  fp.input_node = fp.tape.leaf(input);
  fp.output_node = fn(fp.tape, fp.param_nodes, fp.input_node, &fp.layer_outputs);
  if (!all_finite(fp.tape.value(fp.output_node).data))
    throw NumericError("forward: non-finite values in model output");
  return fp;
}

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;  // flat, aligned with ParameterSet
};

/// Per-layer gates over output units applied to the intermediate gradients
/// during backward (implicit sparse perturbation). Entry i gates layer i's
/// output node; an empty inner vector leaves that layer ungated.
using LayerGates = std::vector<std::vector<double>>;

/// Mean softmax cross-entropy loss and flat parameter gradient in one pass.
inline LossGrad loss_and_grad(const GraphFn& fn, const ParameterSet& params, const Tensor& inputs,
                              const std::vector<int>& labels, const LayerGates* gates = nullptr) {
  ForwardPass fp = forward(Tape{}, fn, params, inputs);
  NodeId per_example = fp.tape.softmax_cross_entropy(fp.output_node, labels);
  NodeId loss = fp.tape.mean(per_example);
  if (gates) {
    if (gates->size() != fp.layer_outputs.size())
      throw ConfigError("loss_and_grad: " + std::to_string(gates->size()) + " gates for " +
                        std::to_string(fp.layer_outputs.size()) + " maskable layers");
    for (std::size_t i = 0; i < gates->size(); ++i)
      if (!(*gates)[i].empty()) fp.tape.set_gate(fp.layer_outputs[i], (*gates)[i]);
  }
  fp.tape.backward(loss);
  LossGrad out;
  out.loss = fp.tape.value(loss).data[0];
  out.grad.reserve(params.flat_len());
  for (NodeId id : fp.param_nodes) {
    auto g = fp.tape.grad(id);
    out.grad.insert(out.grad.end(), g.begin(), g.end());
  }
  if (!all_finite(out.grad)) throw NumericError("loss_and_grad: non-finite gradient");
  return out;
}

/// Mean loss only (no backward).
inline double loss_value(const GraphFn& fn, const ParameterSet& params, const Tensor& inputs,
                         const std::vector<int>& labels) {
  ForwardPass fp = forward(Tape{}, fn, params, inputs);
  NodeId loss = fp.tape.mean(fp.tape.softmax_cross_entropy(fp.output_node, labels));
  return fp.tape.value(loss).data[0];
}

/// Grad oracle bound to a dataset slice; evaluates the flat gradient at any w.
inline GradOracle make_grad_oracle(GraphFn fn, ParameterSet params, Tensor inputs,
                                   std::vector<int> labels) {
  return [fn = std::move(fn), params = std::move(params), inputs = std::move(inputs),
          labels = std::move(labels)](std::span<const double> w) mutable {
    params.load_flat(w);
    return loss_and_grad(fn, params, inputs, labels).grad;
  };
}

/// Hessian-vector product by central finite differences of gradients:
/// Hv ~ (grad(w + h v) - grad(w - h v)) / (2h), h = 1e-4 * (1 + max|w_i|).
inline std::vector<double> hvp(const GradOracle& grad_fn, std::span<const double> w,
                               std::span<const double> v) {
  if (w.size() != v.size())
    throw ShapeError("hvp: w has " + std::to_string(w.size()) + " entries, v has " +
                     std::to_string(v.size()));
  double w_inf = 0.0;
  for (double x : w) w_inf = std::max(w_inf, std::abs(x));
  const double h = 1e-4 * (1.0 + w_inf);
  std::vector<double> wp(w.begin(), w.end()), wm(w.begin(), w.end());
  for (std::size_t i = 0; i < w.size(); ++i) {
    wp[i] += h * v[i];
    wm[i] -= h * v[i];
  }
  std::vector<double> gp = grad_fn(wp);
  std::vector<double> gm = grad_fn(wm);
  if (gp.size() != w.size() || gm.size() != w.size())
    throw ShapeError("hvp: gradient oracle returned wrong dimension");
  std::vector<double> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = (gp[i] - gm[i]) / (2.0 * h);
  return out;
}

}  // namespace ssam
