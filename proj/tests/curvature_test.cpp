#include <gtest/gtest.h>

#include <cmath>

#include "ssam/curvature.hpp"
#include "ssam/models.hpp"
#include "test_util.hpp"

using namespace ssam;
using namespace ssam::test;

namespace {

GraphFn linear_softmax_graph() {
  // logits = x @ W^T with W [C, F]
  return [](Tape& t, std::span<const NodeId> p, NodeId input, std::vector<NodeId>*) {
    return t.matmul(input, p[0], /*trans_b=*/true);
  };
}

}  // namespace

TEST(EmpiricalFisher, FrozenModelHasZeroFisher) {
  // Logits come straight from the input; parameters never touch the output.
  GraphFn frozen = [](Tape&, std::span<const NodeId>, NodeId input, std::vector<NodeId>*) {
    return input;
  };
  ParameterSet ps;
  ps.entries.push_back({"w", Tensor({3}, {1.0, 2.0, 3.0})});
  Tensor x({4, 2}, {0.3, -0.1, 0.7, 0.2, -0.5, 0.9, 0.1, 0.1});
  FisherDiagonal f = empirical_fisher(frozen, ps, x, {0, 1, 1, 0});
  for (double v : f.values) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(EmpiricalFisher, LogisticClosedForm) {
  // Two-logit model on scalar input: logits = [w0 x, w1 x].
  // grad_w log p(y=1) = (-p0 x, (1-p1) x); Fisher is the squares.
  ParameterSet ps;
  ps.entries.push_back({"w", Tensor({2, 1}, {0.4, -0.3})});
  const double x = 1.7;
  Tensor xi({1, 1}, {x});
  FisherDiagonal f = empirical_fisher(linear_softmax_graph(), ps, xi, {1});
  const double l0 = 0.4 * x, l1 = -0.3 * x;
  const double p0 = std::exp(l0) / (std::exp(l0) + std::exp(l1));
  const double p1 = 1.0 - p0;
  EXPECT_NEAR(f.values[0], (p0 * x) * (p0 * x), 1e-14);
  EXPECT_NEAR(f.values[1], ((1.0 - p1) * x) * ((1.0 - p1) * x), 1e-14);
}

TEST(EmpiricalFisher, RepeatedExampleEqualsSingle) {
  Model m = build(ModelSpec::mlp({2, 4, 2}, 3));
  Tensor one({1, 2}, {0.5, -1.0});
  FisherDiagonal single = empirical_fisher(m.graph_fn(), m.params, one, {1});
  const int copies = 7;
  Tensor rep = Tensor::zeros({static_cast<std::size_t>(copies), 2});
  std::vector<int> labels(static_cast<std::size_t>(copies), 1);
  for (int i = 0; i < copies; ++i) {
    rep.data[2 * static_cast<std::size_t>(i)] = 0.5;
    rep.data[2 * static_cast<std::size_t>(i) + 1] = -1.0;
  }
  FisherDiagonal f = empirical_fisher(m.graph_fn(), m.params, rep, labels);
  for (std::size_t j = 0; j < f.values.size(); ++j)
    EXPECT_DOUBLE_EQ(f.values[j], single.values[j]);
}

TEST(EmpiricalFisher, EmptySampleSetErrors) {
  Model m = build(ModelSpec::mlp({2, 4, 2}, 3));
  Tensor empty({0, 2}, {});
  EXPECT_THROW(empirical_fisher(m.graph_fn(), m.params, empty, {}), ConfigError);
}

TEST(EmpiricalFisher, MatchesBruteForcePerExampleOracle) {
  Model m = build(ModelSpec::mlp({3, 8, 3}, 11));  // 59 params, well under 500
  Rng rng(13);
  const std::size_t n = 16;
  Tensor x = Tensor::zeros({n, 3});
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < 3; ++j) x.data[i * 3 + j] = rng.uniform(-1, 1);
    labels[i] = static_cast<int>(rng.below(3));
  }
  FisherDiagonal f = empirical_fisher(m.graph_fn(), m.params, x, labels);

  // Brute force: per-example gradient, square, average.
  std::vector<double> oracle(m.params.flat_len(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor xi({1, 3}, {x.data[i * 3], x.data[i * 3 + 1], x.data[i * 3 + 2]});
    LossGrad lg = loss_and_grad(m.graph_fn(), m.params, xi, {labels[i]});
    for (std::size_t j = 0; j < oracle.size(); ++j) oracle[j] += lg.grad[j] * lg.grad[j];
  }
  for (std::size_t j = 0; j < oracle.size(); ++j) {
    oracle[j] /= static_cast<double>(n);
    EXPECT_GE(f.values[j], 0.0);
    EXPECT_NEAR(f.values[j], oracle[j], 1e-12);
  }
}

TEST(TopEigenvalues, KnownDiagonalSpectrum) {
  // f(w) = 1/2 w^T diag(5,2,1) w; exact gradient oracle.
  GradOracle grad = [](std::span<const double> w) {
    return std::vector<double>{5.0 * w[0], 2.0 * w[1], 1.0 * w[2]};
  };
  std::vector<double> w{0.0, 0.0, 0.0};
  SpectrumEstimate est = top_eigenvalues(grad, w, 3, 10, 1e-10);
  ASSERT_EQ(est.eigenvalues.size(), 3u);
  EXPECT_NEAR(est.eigenvalues[0], 5.0, 1e-8);
  EXPECT_NEAR(est.eigenvalues[1], 2.0, 1e-8);
  EXPECT_NEAR(est.eigenvalues[2], 1.0, 1e-8);
}

TEST(TopEigenvalues, SortedDescendingAndResidualsReported) {
  Rng rng(17);
  const std::size_t d = 12;
  std::vector<std::vector<double>> A(d, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j <= i; ++j) A[i][j] = A[j][i] = rng.uniform(-1, 1);
  GradOracle grad = [&](std::span<const double> w) {
    std::vector<double> g(d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) g[i] += A[i][j] * w[j];
    return g;
  };
  std::vector<double> w(d, 0.1);
  SpectrumEstimate est = top_eigenvalues(grad, w, 5, 40, 1e-8);
  ASSERT_EQ(est.eigenvalues.size(), 5u);
  ASSERT_EQ(est.residuals.size(), 5u);
  for (std::size_t i = 1; i < est.eigenvalues.size(); ++i)
    EXPECT_GE(est.eigenvalues[i - 1], est.eigenvalues[i]);
}

TEST(TopEigenvalues, TinyMlpMatchesDenseOracle) {
  Model m = build(ModelSpec::mlp({4, 8, 4}, 21));  // 76 params <= 200
  Rng rng(23);
  const std::size_t n = 12;
  Tensor x = Tensor::zeros({n, 4});
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < 4; ++j) x.data[i * 4 + j] = rng.uniform(-2, 2);
    labels[i] = static_cast<int>(rng.below(4));
  }
  GradOracle grad = make_grad_oracle(m.graph_fn(), m.params, x, labels);
  std::vector<double> w = m.params.flatten();

  SpectrumEstimate est = top_eigenvalues(grad, w, 5, 76, 1e-9);
  auto H = fd_hessian_from_grad(grad, w, 1e-5);
  std::vector<double> dense = jacobi_eigenvalues(H);
  ASSERT_GE(est.eigenvalues.size(), 5u);
  for (std::size_t j = 0; j < 5; ++j) {
    const double a = est.eigenvalues[j];
    const double b = dense[j];
    EXPECT_LT(std::abs(a - b) / std::max(std::abs(b), 1e-6), 1e-3) << "eigenvalue " << j;
  }
}

TEST(TopEigenvalues, MatchesPowerIteration) {
  // PSD operator so power iteration converges to lambda1.
  Rng rng(29);
  const std::size_t d = 10;
  std::vector<std::vector<double>> B(d, std::vector<double>(d));
  for (auto& row : B)
    for (double& v : row) v = rng.uniform(-1, 1);
  std::vector<std::vector<double>> A(d, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < d; ++k) A[i][j] += B[k][i] * B[k][j];
  GradOracle grad = [&](std::span<const double> w) {
    std::vector<double> g(d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) g[i] += A[i][j] * w[j];
    return g;
  };
  std::vector<double> v(d, 1.0);
  double lambda_pi = 0.0;
  for (int it = 0; it < 500; ++it) {
    std::vector<double> av(d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) av[i] += A[i][j] * v[j];
    const double nrm = norm2(av);
    for (std::size_t i = 0; i < d; ++i) v[i] = av[i] / nrm;
    lambda_pi = nrm;
  }
  std::vector<double> w(d, 0.0);
  SpectrumEstimate est = top_eigenvalues(grad, w, 1, 40, 1e-10);
  EXPECT_NEAR(est.eigenvalues[0], lambda_pi, 1e-6 * std::max(1.0, lambda_pi));
}

TEST(TopEigenvalues, RejectsBadK) {
  GradOracle grad = [](std::span<const double> w) {
    return std::vector<double>(w.begin(), w.end());
  };
  std::vector<double> w{1.0};
  EXPECT_THROW(top_eigenvalues(grad, w, 0, 5, 1e-8), ConfigError);
  EXPECT_THROW(top_eigenvalues(grad, w, 21, 5, 1e-8), ConfigError);
}

TEST(Landscape, CenterEqualsUnperturbedLoss) {
  Model m = build(ModelSpec::mlp({2, 6, 2}, 31));
  Rng rng(37);
  Tensor x = Tensor::zeros({8, 2});
  std::vector<int> labels(8);
  for (std::size_t i = 0; i < 8; ++i) {
    x.data[2 * i] = rng.uniform(-1, 1);
    x.data[2 * i + 1] = rng.uniform(-1, 1);
    labels[i] = static_cast<int>(rng.below(2));
  }
  auto units = kernel_units(m);
  LandscapeGrid grid = landscape_slice(m.graph_fn(), m.params, x, labels, units, 5, 99);
  const double center = grid.losses[2 * 5 + 2];
  EXPECT_NEAR(center, loss_value(m.graph_fn(), m.params, x, labels), 1e-10);

  LandscapeGrid again = landscape_slice(m.graph_fn(), m.params, x, labels, units, 5, 99);
  EXPECT_EQ(grid.losses, again.losses);  // deterministic per seed
  EXPECT_THROW(landscape_slice(m.graph_fn(), m.params, x, labels, units, 4, 99), ConfigError);

  const std::string csv = landscape_to_csv(grid);
  EXPECT_EQ(static_cast<int>(std::count(csv.begin(), csv.end(), '\n')), 5 * 5 + 1);
}

TEST(Landscape, FilterNormalizationMatchesUnitNorms) {
  Model m = build(ModelSpec::mlp({3, 5, 2}, 41));
  Rng rng(43);
  Tensor x = Tensor::zeros({4, 3});
  std::vector<int> labels{0, 1, 0, 1};
  for (double& v : x.data) v = rng.uniform(-1, 1);
  auto units = kernel_units(m);
  LandscapeGrid grid = landscape_slice(m.graph_fn(), m.params, x, labels, units, 3, 7);
  std::vector<double> w = m.params.flatten();
  for (const auto& u : units) {
    double wn = 0.0, dn = 0.0;
    for (std::size_t i : u) {
      wn += w[i] * w[i];
      dn += grid.dir1[i] * grid.dir1[i];
    }
    EXPECT_NEAR(std::sqrt(dn), std::sqrt(wn), 1e-12 * (1.0 + std::sqrt(wn)));
  }
  // Scaling w by c scales each normalized direction's unit norm by c, so the
  // ratio ||dir_u|| / ||w_u|| is invariant.
  const double c = 3.0;
  ParameterSet scaled = m.params;
  for (auto& e : scaled.entries)
    for (double& v : e.value.data) v *= c;
  LandscapeGrid g2 = landscape_slice(m.graph_fn(), scaled, x, labels, units, 3, 7);
  for (const auto& u : units) {
    double d1 = 0.0, d2 = 0.0;
    for (std::size_t i : u) {
      d1 += grid.dir1[i] * grid.dir1[i];
      d2 += g2.dir1[i] * g2.dir1[i];
    }
    EXPECT_NEAR(std::sqrt(d2), c * std::sqrt(d1), 1e-10 * (1.0 + std::sqrt(d2)));
  }
}

TEST(Landscape, ConvexQuadraticHasMinimumAtCenter) {
  // Mean xent of logits [w0, w1] over two opposite labels is log(2 cosh((w1-w0)/2)),
  // minimized exactly where w0 == w1; the origin is an optimum.
  ParameterSet ps;
  ps.entries.push_back({"w", Tensor({2, 1}, {0.0, 0.0})});
  Tensor x({2, 1}, {1.0, 1.0});
  std::vector<int> labels{0, 1};
  std::vector<std::vector<std::size_t>> units{{0}, {1}};
  LandscapeGrid grid = landscape_slice(linear_softmax_graph(), ps, x, labels, units, 7, 5);
  const double center = grid.losses[3 * 7 + 3];
  for (double v : grid.losses) EXPECT_GE(v, center - 1e-12);
}

TEST(GradDiff, ClosedFormCases) {
  std::vector<double> g{0.5, -2.0, 1.0, 3.0};

  std::vector<double> same = g;
  GradDiffResult eq = grad_diff_ratio(same, g);
  EXPECT_EQ(eq.excluded_zero_difference, g.size());
  EXPECT_TRUE(eq.r.empty());

  std::vector<double> twice(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) twice[i] = 2.0 * g[i];
  GradDiffResult r2 = grad_diff_ratio(twice, g);
  ASSERT_EQ(r2.r.size(), g.size());
  for (double r : r2.r) EXPECT_NEAR(r, 0.0, 1e-12);

  std::vector<double> tenth(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) tenth[i] = 1.1 * g[i];
  GradDiffResult r01 = grad_diff_ratio(tenth, g);
  for (double r : r01.r) EXPECT_NEAR(r, -1.0, 1e-10);
  EXPECT_DOUBLE_EQ(r01.fraction_below_zero, 1.0);
}

TEST(GradDiff, ExcludesTinyDenominators) {
  std::vector<double> g_sgd{1.0, 1e-13, 0.5};
  std::vector<double> g_sam{1.5, 42.0, 0.5};
  GradDiffResult res = grad_diff_ratio(g_sam, g_sgd);
  EXPECT_EQ(res.excluded_small_denominator, 1u);
  EXPECT_EQ(res.excluded_zero_difference, 1u);
  ASSERT_EQ(res.r.size(), 1u);
  std::size_t total = 0;
  for (std::size_t c : res.bin_counts) total += c;
  EXPECT_EQ(total, res.r.size());
}
