#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ssam/tensor.hpp"

namespace ssam {

/// Ordered collection of named parameter tensors with a flat-index view.
/// Flattening then unflattening is the identity.
struct ParameterSet {
  struct Entry {
    std::string name;
    Tensor value;
  };

  std::vector<Entry> entries;

  std::size_t flat_len() const {
    std::size_t n = 0;
    for (const Entry& e : entries) n += e.value.numel();
    return n;
  }

  /// (offset, length) of each entry in the flat layout, in entry order.
  std::vector<std::pair<std::size_t, std::size_t>> segments() const {
    std::vector<std::pair<std::size_t, std::size_t>> seg;
    seg.reserve(entries.size());
    std::size_t off = 0;
    for (const Entry& e : entries) {
      seg.emplace_back(off, e.value.numel());
      off += e.value.numel();
    }
    return seg;
  }

  std::vector<double> flatten() const {
    std::vector<double> flat;
    flat.reserve(flat_len());
    for (const Entry& e : entries) flat.insert(flat.end(), e.value.data.begin(), e.value.data.end());
    return flat;
  }

  void load_flat(std::span<const double> flat) {
    if (flat.size() != flat_len())
      throw ShapeError("ParameterSet::load_flat: expected " + std::to_string(flat_len()) +
                       " values, got " + std::to_string(flat.size()));
    std::size_t off = 0;
    for (Entry& e : entries) {
      std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                flat.begin() + static_cast<std::ptrdiff_t>(off + e.value.numel()),
                e.value.data.begin());
      off += e.value.numel();
    }
  }

  /// Writes a flat gradient into each entry's grad slot.
  void store_grad(std::span<const double> flat) {
    if (flat.size() != flat_len())
      throw ShapeError("ParameterSet::store_grad: expected " + std::to_string(flat_len()) +
                       " values, got " + std::to_string(flat.size()));
    std::size_t off = 0;
    for (Entry& e : entries) {
      e.value.grad.assign(flat.begin() + static_cast<std::ptrdiff_t>(off),
                          flat.begin() + static_cast<std::ptrdiff_t>(off + e.value.numel()));
      off += e.value.numel();
    }
  }
};

}  // namespace ssam
