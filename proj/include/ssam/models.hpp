#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ssam/autodiff.hpp"
#include "ssam/params.hpp"
#include "ssam/rng.hpp"

namespace ssam {

/// Small deterministic model constructors: MLPs and tiny CNNs, sized for
/// desk-scale experiments.
struct ModelSpec {
  enum class Kind { mlp, cnn };

  Kind kind = Kind::mlp;
  // mlp: full size chain [input, hidden..., output]; output == num_classes.
  std::vector<int> layer_sizes;
  // cnn: stacked (out_channels, odd kernel) conv+relu blocks, then a linear head.
  int in_channels = 1;
  int in_side = 8;
  std::vector<std::pair<int, int>> conv_layers;
  int num_classes = 2;
  std::uint64_t init_seed = 0;

  static ModelSpec mlp(std::vector<int> sizes, std::uint64_t seed) {
    ModelSpec s;
    s.kind = Kind::mlp;
    s.num_classes = sizes.empty() ? 0 : sizes.back();
    s.layer_sizes = std::move(sizes);
    s.init_seed = seed;
    return s;
  }

  static ModelSpec cnn(int in_channels, int in_side, std::vector<std::pair<int, int>> convs,
                       int num_classes, std::uint64_t seed) {
    ModelSpec s;
    s.kind = Kind::cnn;
    s.in_channels = in_channels;
    s.in_side = in_side;
    s.conv_layers = std::move(convs);
    s.num_classes = num_classes;
    s.init_seed = seed;
    return s;
  }

  void validate() const {
    if (num_classes <= 0) throw ConfigError("ModelSpec: num_classes must be positive");
    if (kind == Kind::mlp) {
      if (layer_sizes.size() < 3)
        throw ConfigError("ModelSpec: mlp needs at least one hidden layer (>=3 sizes)");
      for (int s : layer_sizes)
        if (s <= 0) throw ConfigError("ModelSpec: all layer sizes must be positive");
      if (layer_sizes.back() != num_classes)
        throw ConfigError("ModelSpec: mlp output size must equal num_classes");
    } else {
      if (conv_layers.empty()) throw ConfigError("ModelSpec: cnn needs at least one conv layer");
      if (in_channels <= 0 || in_side <= 0)
        throw ConfigError("ModelSpec: cnn input dims must be positive");
      for (auto [c, k] : conv_layers) {
        if (c <= 0 || k <= 0) throw ConfigError("ModelSpec: conv channels/kernel must be positive");
        if (k % 2 == 0) throw ConfigError("ModelSpec: conv kernels must be odd");
      }
    }
  }
};

/// Metadata for one maskable layer (linear or conv) of a built model.
struct LayerInfo {
  enum class Kind { linear, conv };
  Kind kind = Kind::linear;
  int weight_entry = 0;  // index into ParameterSet entries
  int bias_entry = 0;
  int out_units = 0;  // rows (linear) or output channels (conv)
  int unit_size = 0;  // flat indices per weight unit
};

/// A built model: parameters, the graph function, and layer metadata.
struct Model {
  ModelSpec spec;
  ParameterSet params;
  std::vector<LayerInfo> layers;

  /// Expected input shape for one batch of size B.
  std::vector<std::size_t> input_shape(std::size_t batch) const {
    if (spec.kind == ModelSpec::Kind::mlp)
      return {batch, static_cast<std::size_t>(spec.layer_sizes.front())};
    return {batch, static_cast<std::size_t>(spec.in_channels),
            static_cast<std::size_t>(spec.in_side), static_cast<std::size_t>(spec.in_side)};
  }

  GraphFn graph_fn() const {
    const ModelSpec s = spec;
    return [s](Tape& tape, std::span<const NodeId> p, NodeId input,
               std::vector<NodeId>* layer_outputs) {
      NodeId h = input;
      std::size_t pi = 0;
      if (s.kind == ModelSpec::Kind::mlp) {
        const std::size_t n_layers = s.layer_sizes.size() - 1;
        for (std::size_t l = 0; l < n_layers; ++l) {
          NodeId y = tape.bias_add(tape.matmul(h, p[pi], /*trans_b=*/true), p[pi + 1]);
          pi += 2;
          if (layer_outputs) layer_outputs->push_back(y);
          h = (l + 1 < n_layers) ? tape.relu(y) : y;
        }
      } else {
        for (std::size_t l = 0; l < s.conv_layers.size(); ++l) {
          NodeId y = tape.bias_add(tape.conv2d(h, p[pi]), p[pi + 1]);
          pi += 2;
          if (layer_outputs) layer_outputs->push_back(y);
          h = tape.relu(y);
        }
        NodeId y = tape.bias_add(tape.matmul(tape.flatten(h), p[pi], /*trans_b=*/true), p[pi + 1]);
        if (layer_outputs) layer_outputs->push_back(y);
        h = y;
      }
      return h;
    };
  }
};

namespace detail {

inline Tensor he_uniform(std::vector<std::size_t> shape, int fan_in, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (double& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace detail

/// Builds a model from a spec: seeded He-uniform init, pure in (spec, seed).
inline Model build(const ModelSpec& spec) {
  spec.validate();
  Model m;
  m.spec = spec;
  Rng rng(spec.init_seed);
  if (spec.kind == ModelSpec::Kind::mlp) {
    for (std::size_t l = 0; l + 1 < spec.layer_sizes.size(); ++l) {
      const int in = spec.layer_sizes[l];
      const int out = spec.layer_sizes[l + 1];
      LayerInfo li;
      li.kind = LayerInfo::Kind::linear;
      li.weight_entry = static_cast<int>(m.params.entries.size());
      m.params.entries.push_back(
          {"w" + std::to_string(l),
           detail::he_uniform({static_cast<std::size_t>(out), static_cast<std::size_t>(in)}, in,
                              rng)});
      li.bias_entry = static_cast<int>(m.params.entries.size());
      m.params.entries.push_back(
          {"b" + std::to_string(l),
           detail::he_uniform({static_cast<std::size_t>(out)}, in, rng)});
      li.out_units = out;
      li.unit_size = in;
      m.layers.push_back(li);
    }
  } else {
    int c_in = spec.in_channels;
    for (std::size_t l = 0; l < spec.conv_layers.size(); ++l) {
      const auto [c_out, k] = spec.conv_layers[l];
      const int fan_in = c_in * k * k;
      LayerInfo li;
      li.kind = LayerInfo::Kind::conv;
      li.weight_entry = static_cast<int>(m.params.entries.size());
      m.params.entries.push_back(
          {"conv" + std::to_string(l),
           detail::he_uniform({static_cast<std::size_t>(c_out), static_cast<std::size_t>(c_in),
                               static_cast<std::size_t>(k), static_cast<std::size_t>(k)},
                              fan_in, rng)});
      li.bias_entry = static_cast<int>(m.params.entries.size());
      m.params.entries.push_back(
          {"conv_b" + std::to_string(l),
           detail::he_uniform({static_cast<std::size_t>(c_out)}, fan_in, rng)});
      li.out_units = c_out;
      li.unit_size = fan_in;
      m.layers.push_back(li);
      c_in = c_out;
    }
    const int head_in = c_in * spec.in_side * spec.in_side;
    LayerInfo li;
    li.kind = LayerInfo::Kind::linear;
    li.weight_entry = static_cast<int>(m.params.entries.size());
    m.params.entries.push_back(
        {"head_w",
         detail::he_uniform({static_cast<std::size_t>(spec.num_classes),
                             static_cast<std::size_t>(head_in)},
                            head_in, rng)});
    li.bias_entry = static_cast<int>(m.params.entries.size());
    m.params.entries.push_back(
        {"head_b", detail::he_uniform({static_cast<std::size_t>(spec.num_classes)}, head_in, rng)});
    li.out_units = spec.num_classes;
    li.unit_size = head_in;
    m.layers.push_back(li);
  }
  return m;
}

/// Partition of the flat parameter indices into structural units: each conv
/// output channel's kernel is one unit, each linear row (output neuron) is one
/// unit, and every bias element is its own unit. Units are contiguous ranges.
inline std::vector<std::vector<std::size_t>> kernel_units(const Model& model) {
  std::vector<std::vector<std::size_t>> units;
  auto segs = model.params.segments();
  std::vector<bool> is_weight(model.params.entries.size(), false);
  std::vector<std::size_t> unit_size(model.params.entries.size(), 0);
  for (const LayerInfo& li : model.layers) {
    is_weight[static_cast<std::size_t>(li.weight_entry)] = true;
    unit_size[static_cast<std::size_t>(li.weight_entry)] = static_cast<std::size_t>(li.unit_size);
  }
  for (std::size_t e = 0; e < segs.size(); ++e) {
    const auto [off, len] = segs[e];
    if (is_weight[e]) {
      const std::size_t us = unit_size[e];
      for (std::size_t u = 0; u < len / us; ++u) {
        std::vector<std::size_t> unit(us);
        for (std::size_t i = 0; i < us; ++i) unit[i] = off + u * us + i;
        units.push_back(std::move(unit));
      }
    } else {
      for (std::size_t i = 0; i < len; ++i) units.push_back({off + i});
    }
  }
  return units;
}

}  // namespace ssam
