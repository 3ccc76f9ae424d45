#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "ssam/models.hpp"
#include "ssam/rng.hpp"

using namespace ssam;

TEST(Build, MlpParameterCount) {
  Model m = build(ModelSpec::mlp({2, 8, 2}, 7));
  EXPECT_EQ(m.params.flat_len(), 2u * 8 + 8 + 8 * 2 + 2);  // 42
}

TEST(Build, SameSpecSameSeedIsBitIdentical) {
  Model a = build(ModelSpec::mlp({3, 16, 4}, 123));
  Model b = build(ModelSpec::mlp({3, 16, 4}, 123));
  auto fa = a.params.flatten();
  auto fb = b.params.flatten();
  ASSERT_EQ(fa.size(), fb.size());
  for (std::size_t i = 0; i < fa.size(); ++i) EXPECT_EQ(fa[i], fb[i]);

  Model c = build(ModelSpec::mlp({3, 16, 4}, 124));
  EXPECT_NE(c.params.flatten(), fa);
}

TEST(Build, CnnParameterCount) {
  const int C = 3;
  Model m = build(ModelSpec::cnn(1, 8, {{4, 3}}, C, 1));
  EXPECT_EQ(m.params.flat_len(),
            static_cast<std::size_t>(4 * 1 * 3 * 3 + 4 + 4 * 8 * 8 * C + C));
}

TEST(Build, InvalidSpecsError) {
  EXPECT_THROW(build(ModelSpec::mlp({4, 2}, 0)), ConfigError);       // no hidden layer
  EXPECT_THROW(build(ModelSpec::mlp({4, 0, 2}, 0)), ConfigError);    // zero size
  EXPECT_THROW(build(ModelSpec::cnn(1, 8, {}, 2, 0)), ConfigError);  // no conv layer
  EXPECT_THROW(build(ModelSpec::cnn(1, 8, {{4, 2}}, 2, 0)), ConfigError);  // even kernel
}

TEST(Build, ForwardShapes) {
  Model m = build(ModelSpec::cnn(1, 8, {{4, 3}}, 3, 9));
  Tensor x = Tensor::zeros(m.input_shape(2));
  ForwardPass fp = forward(Tape{}, m.graph_fn(), m.params, x);
  EXPECT_EQ(fp.tape.value(fp.output_node).shape, (std::vector<std::size_t>{2, 3}));
  EXPECT_EQ(fp.layer_outputs.size(), 2u);  // conv block + head
}

TEST(KernelUnits, ConvKernelsFormUnits) {
  Model m = build(ModelSpec::cnn(1, 8, {{4, 3}}, 3, 2));
  auto units = kernel_units(m);
  // First 4 units are the conv kernels, 9 indices each.
  for (std::size_t u = 0; u < 4; ++u) {
    EXPECT_EQ(units[u].size(), 9u);
    for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(units[u][i], u * 9 + i);
  }
  // Conv biases follow as singleton units.
  for (std::size_t u = 4; u < 8; ++u) EXPECT_EQ(units[u].size(), 1u);
}

TEST(KernelUnits, MlpRowsFormUnits) {
  Model m = build(ModelSpec::mlp({2, 8, 2}, 0));
  auto units = kernel_units(m);
  // Layer w0 [8,2]: 8 row units of 2 indices each (one per output neuron).
  for (std::size_t u = 0; u < 8; ++u) {
    EXPECT_EQ(units[u].size(), 2u);
    EXPECT_EQ(units[u][0], u * 2);
    EXPECT_EQ(units[u][1], u * 2 + 1);
  }
}

TEST(KernelUnits, PartitionPropertyOverRandomSpecs) {
  Rng rng(404);
  for (int trial = 0; trial < 30; ++trial) {
    Model m;
    if (trial % 2 == 0) {
      std::vector<int> sizes;
      const int depth = 1 + static_cast<int>(rng.below(3));
      sizes.push_back(1 + static_cast<int>(rng.below(6)));
      for (int l = 0; l < depth; ++l) sizes.push_back(1 + static_cast<int>(rng.below(8)));
      sizes.push_back(2 + static_cast<int>(rng.below(4)));
      m = build(ModelSpec::mlp(sizes, rng.next_u64()));
    } else {
      std::vector<std::pair<int, int>> convs;
      const int depth = 1 + static_cast<int>(rng.below(2));
      for (int l = 0; l < depth; ++l)
        convs.emplace_back(1 + static_cast<int>(rng.below(4)), rng.below(2) == 0 ? 1 : 3);
      m = build(ModelSpec::cnn(1 + static_cast<int>(rng.below(2)),
                               8 + static_cast<int>(rng.below(3)), convs,
                               2 + static_cast<int>(rng.below(3)), rng.next_u64()));
    }
    auto units = kernel_units(m);
    std::set<std::size_t> seen;
    std::size_t total = 0;
    for (const auto& u : units) {
      EXPECT_FALSE(u.empty());
      for (std::size_t idx : u) {
        EXPECT_TRUE(seen.insert(idx).second) << "index " << idx << " in two units";
      }
      total += u.size();
    }
    EXPECT_EQ(total, m.params.flat_len());
    EXPECT_EQ(*seen.rbegin(), m.params.flat_len() - 1);
  }
}
