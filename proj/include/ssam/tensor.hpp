#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <vector>

#include "ssam/common.hpp"

namespace ssam {

/// Dense n-dimensional array of doubles with an optional gradient slot.
/// An empty `grad` means "no gradient attached"; when present it has the
/// same length as `data`.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::vector<double> grad;

  Tensor() = default;

  Tensor(std::vector<std::size_t> shape_in, std::vector<double> data_in)
      : shape(std::move(shape_in)), data(std::move(data_in)) {
    if (numel_of(shape) != data.size())
      throw ShapeError("Tensor: shape " + shape_str(shape) + " does not match data length " +
                       std::to_string(data.size()));
  }

  static std::size_t numel_of(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }

  static Tensor zeros(std::vector<std::size_t> shape) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  bool has_grad() const { return !grad.empty(); }
  void alloc_grad() { grad.assign(data.size(), 0.0); }

  double& at2(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  double at2(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

  /// 4-D indexing for [batch, channel, height, width] tensors.
  std::size_t idx4(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
    return ((b * shape[1] + c) * shape[2] + h) * shape[3] + w;
  }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

}  // namespace ssam
