#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <json.hpp>

#include "ssam/autodiff.hpp"
#include "ssam/linalg.hpp"
#include "ssam/rng.hpp"

namespace ssam {

// ---------------------------------------------------------------------------
// Empirical Fisher.
// ---------------------------------------------------------------------------

/// Diagonal empirical Fisher estimate: per-coordinate mean of squared
/// per-example log-likelihood gradients.
struct FisherDiagonal {
  std::vector<double> values;
  std::size_t n_samples = 0;
};

/// F_hat = (1/N_F) sum_i (grad_w log p_w(y_i|x_i))^2, one backward per example
/// (squares of per-example gradients, then averaged; never batched).
inline FisherDiagonal empirical_fisher(const GraphFn& fn, const ParameterSet& params,
                                       const Tensor& inputs, const std::vector<int>& labels) {
  if (labels.empty()) throw ConfigError("empirical_fisher: empty sample set");
  const std::size_t n = labels.size();
  if (inputs.shape.empty() || inputs.shape[0] != n)
    throw ShapeError("empirical_fisher: " + std::to_string(n) + " labels for inputs " +
                     shape_str(inputs.shape));
  const std::size_t per = inputs.numel() / n;
  std::vector<std::size_t> one_shape = inputs.shape;
  one_shape[0] = 1;

  FisherDiagonal fisher;
  fisher.n_samples = n;
  fisher.values.assign(params.flat_len(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor xi(one_shape, std::vector<double>(inputs.data.begin() + static_cast<std::ptrdiff_t>(i * per),
                                             inputs.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * per)));
    // loss = -log p(y_i | x_i); grad log p = -grad loss, squares coincide.
    LossGrad lg = loss_and_grad(fn, params, xi, {labels[i]});
    for (std::size_t j = 0; j < fisher.values.size(); ++j)
      fisher.values[j] += lg.grad[j] * lg.grad[j];
  }
  for (double& v : fisher.values) v /= static_cast<double>(n);
  return fisher;
}

// ---------------------------------------------------------------------------
// Hessian spectrum via Lanczos on the hvp operator.
// ---------------------------------------------------------------------------

struct SpectrumEstimate {
  std::vector<double> eigenvalues;  // descending Ritz values
  std::vector<double> residuals;    // |beta_m * s_last| per Ritz pair
  double ratio_1_5 = 0.0;           // lambda1/lambda5 when k >= 5
  int iterations = 0;
  bool breakdown = false;  // beta hit zero before k values were available
};

/// Lanczos with full reorthogonalization against all previous basis vectors.
/// The operator is the finite-difference hvp of `grad_fn` at `w`.
inline SpectrumEstimate top_eigenvalues(const GradOracle& grad_fn, std::span<const double> w,
                                        int k, int max_iter, double tol) {
  if (k < 1 || k > 20) throw ConfigError("top_eigenvalues: k must be in [1,20]");
  const std::size_t d = w.size();
  const int m_max = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(max_iter), d));

  std::vector<std::vector<double>> basis;
  std::vector<double> alphas, betas;
  std::vector<double> v(d, 0.0);
  {
    Rng rng(0x5eed);  // fixed start vector seed; results are deterministic
    for (double& x : v) x = rng.gaussian();
    scale(v, 1.0 / norm2(v));
  }
  basis.push_back(v);

  SpectrumEstimate est;
  auto ritz = [&](int m) {
    std::vector<std::vector<double>> t(static_cast<std::size_t>(m),
                                       std::vector<double>(static_cast<std::size_t>(m), 0.0));
    for (int i = 0; i < m; ++i) {
      t[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] = alphas[static_cast<std::size_t>(i)];
      if (i + 1 < m) {
        t[static_cast<std::size_t>(i)][static_cast<std::size_t>(i + 1)] = betas[static_cast<std::size_t>(i)];
        t[static_cast<std::size_t>(i + 1)][static_cast<std::size_t>(i)] = betas[static_cast<std::size_t>(i)];
      }
    }
    return jacobi_eigh(std::move(t));
  };

  for (int it = 0; it < m_max; ++it) {
    std::vector<double> av = hvp(grad_fn, w, basis.back());
    const double alpha = dot(av, basis.back());
    alphas.push_back(alpha);
    axpy(-alpha, basis.back(), av);
    if (basis.size() > 1) axpy(-betas.back(), basis[basis.size() - 2], av);
    // Full reorthogonalization, two passes of modified Gram-Schmidt.
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& q : basis) axpy(-dot(av, q), q, av);
    const double beta = norm2(av);
    est.iterations = it + 1;

    const int m = static_cast<int>(alphas.size());
    if (beta < 1e-12 || m == m_max) {
      est.breakdown = beta < 1e-12 && m < k;
      SymmetricEig eig = ritz(m);
      const int keep = std::min(k, m);
      for (int j = 0; j < keep; ++j) {
        est.eigenvalues.push_back(eig.values[static_cast<std::size_t>(j)]);
        est.residuals.push_back(std::abs(beta * eig.vectors[static_cast<std::size_t>(j)]
                                                           [static_cast<std::size_t>(m - 1)]));
      }
      break;
    }
    // Early exit when the wanted Ritz pairs have converged.
    if (m >= k + 2) {
      SymmetricEig eig = ritz(m);
      bool done = true;
      for (int j = 0; j < k; ++j)
        if (std::abs(beta * eig.vectors[static_cast<std::size_t>(j)][static_cast<std::size_t>(m - 1)]) >
            tol) {
          done = false;
          break;
        }
      if (done) {
        est.iterations = m;
        for (int j = 0; j < k; ++j) {
          est.eigenvalues.push_back(eig.values[static_cast<std::size_t>(j)]);
          est.residuals.push_back(std::abs(
              beta * eig.vectors[static_cast<std::size_t>(j)][static_cast<std::size_t>(m - 1)]));
        }
        break;
      }
    }
    scale(av, 1.0 / beta);
    betas.push_back(beta);
    basis.push_back(std::move(av));
  }
  if (est.eigenvalues.size() >= 5 && est.eigenvalues[4] != 0.0)
    est.ratio_1_5 = est.eigenvalues[0] / est.eigenvalues[4];
  return est;
}

inline nlohmann::json spectrum_to_json(const SpectrumEstimate& est) {
  nlohmann::json j;
  j["eigenvalues"] = est.eigenvalues;
  j["residuals"] = est.residuals;
  j["ratio_1_5"] = est.ratio_1_5;
  j["iterations"] = est.iterations;
  j["breakdown"] = est.breakdown;
  return j;
}

// ---------------------------------------------------------------------------
// Filter-normalized landscape slices.
// ---------------------------------------------------------------------------

struct LandscapeGrid {
  int grid_size = 0;
  std::vector<double> losses;  // row-major [grid_size x grid_size], y rows
  std::vector<double> dir1, dir2;
};

/// Loss over a [-1,1]^2 slice spanned by two seeded Gaussian directions, each
/// rescaled per unit to match that unit's parameter norm ("filter
/// normalization"). Odd grid so the exact center is the unperturbed point.
inline LandscapeGrid landscape_slice(
    const GraphFn& fn, const ParameterSet& params, const Tensor& inputs,
    const std::vector<int>& labels, const std::vector<std::vector<std::size_t>>& units,
    int grid_size, std::uint64_t seed) {
  if (grid_size < 3 || grid_size % 2 == 0)
    throw ConfigError("landscape_slice: grid_size must be odd and >= 3");
  const std::size_t d = params.flat_len();
  std::vector<double> w = params.flatten();

  Rng rng(seed);
  auto make_dir = [&] {
    std::vector<double> dir(d);
    for (double& x : dir) x = rng.gaussian();
    for (const auto& u : units) {
      double wn = 0.0, dn = 0.0;
      for (std::size_t i : u) {
        wn += w[i] * w[i];
        dn += dir[i] * dir[i];
      }
      wn = std::sqrt(wn);
      dn = std::sqrt(dn);
      const double s = dn > 0.0 ? wn / dn : 0.0;
      for (std::size_t i : u) dir[i] *= s;
    }
    return dir;
  };

  LandscapeGrid grid;
  grid.grid_size = grid_size;
  grid.dir1 = make_dir();
  grid.dir2 = make_dir();
  grid.losses.assign(static_cast<std::size_t>(grid_size) * static_cast<std::size_t>(grid_size),
                     0.0);
  ParameterSet probe = params;
  std::vector<double> shifted(d);
  const int half = grid_size / 2;
  for (int yi = 0; yi < grid_size; ++yi) {
    const double y = static_cast<double>(yi - half) / static_cast<double>(half);
    for (int xi = 0; xi < grid_size; ++xi) {
      const double x = static_cast<double>(xi - half) / static_cast<double>(half);
      if (xi == half && yi == half) {
        shifted = w;  // exact center: no arithmetic on the weights
      } else {
        for (std::size_t i = 0; i < d; ++i)
          shifted[i] = w[i] + x * grid.dir1[i] + y * grid.dir2[i];
      }
      probe.load_flat(shifted);
      grid.losses[static_cast<std::size_t>(yi) * static_cast<std::size_t>(grid_size) +
                  static_cast<std::size_t>(xi)] = loss_value(fn, probe, inputs, labels);
    }
  }
  return grid;
}

/// CSV rows "x,y,loss" over the slice, with a fixed header.
inline std::string landscape_to_csv(const LandscapeGrid& grid) {
  std::string out = "x,y,loss\n";
  const int half = grid.grid_size / 2;
  char buf[96];
  for (int yi = 0; yi < grid.grid_size; ++yi)
    for (int xi = 0; xi < grid.grid_size; ++xi) {
      const double x = static_cast<double>(xi - half) / static_cast<double>(half);
      const double y = static_cast<double>(yi - half) / static_cast<double>(half);
      std::snprintf(buf, sizeof buf, "%.10g,%.10g,%.17g\n", x, y,
                    grid.losses[static_cast<std::size_t>(yi) *
                                    static_cast<std::size_t>(grid.grid_size) +
                                static_cast<std::size_t>(xi)]);
      out += buf;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient-difference ratio r = log10 |(g_sam - g_sgd) / g_sgd|.
// ---------------------------------------------------------------------------

struct GradDiffResult {
  std::vector<double> r;                  // per included coordinate
  std::size_t excluded_small_denominator = 0;  // |g_sgd| < 1e-12
  std::size_t excluded_zero_difference = 0;    // g_sam == g_sgd (r = -inf)
  std::vector<double> bin_edges;          // fixed histogram edges
  std::vector<std::size_t> bin_counts;    // bin_edges.size()-1 bins; under/overflow clamped
  double fraction_below_zero = 0.0;       // share of included r with r < 0
};

inline GradDiffResult grad_diff_ratio(std::span<const double> g_sam,
                                      std::span<const double> g_sgd) {
  if (g_sam.size() != g_sgd.size())
    throw ShapeError("grad_diff_ratio: length mismatch " + std::to_string(g_sam.size()) + " vs " +
                     std::to_string(g_sgd.size()));
  GradDiffResult res;
  for (double e = -10.0; e <= 4.0 + 1e-9; e += 0.5) res.bin_edges.push_back(e);
  res.bin_counts.assign(res.bin_edges.size() - 1, 0);
  std::size_t below = 0;
  for (std::size_t i = 0; i < g_sam.size(); ++i) {
    if (std::abs(g_sgd[i]) < 1e-12) {
      ++res.excluded_small_denominator;
      continue;
    }
    const double num = g_sam[i] - g_sgd[i];
    if (num == 0.0) {
      ++res.excluded_zero_difference;
      continue;
    }
    const double r = std::log10(std::abs(num / g_sgd[i]));
    res.r.push_back(r);
    if (r < 0.0) ++below;
    const double clamped = std::min(std::max(r, res.bin_edges.front()),
                                    res.bin_edges.back() - 1e-12);
    const auto bin = static_cast<std::size_t>((clamped - res.bin_edges.front()) / 0.5);
    ++res.bin_counts[std::min(bin, res.bin_counts.size() - 1)];
  }
  if (!res.r.empty())
    res.fraction_below_zero = static_cast<double>(below) / static_cast<double>(res.r.size());
  return res;
}

inline nlohmann::json grad_diff_to_json(const GradDiffResult& res) {
  nlohmann::json j;
  j["bin_edges"] = res.bin_edges;
  j["bin_counts"] = res.bin_counts;
  j["included"] = res.r.size();
  j["excluded_small_denominator"] = res.excluded_small_denominator;
  j["excluded_zero_difference"] = res.excluded_zero_difference;
  j["fraction_below_zero"] = res.fraction_below_zero;
  return j;
}

}  // namespace ssam
