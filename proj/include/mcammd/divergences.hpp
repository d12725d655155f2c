#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mcammd/autodiff.hpp"
#include "mcammd/errors.hpp"
#include "mcammd/model.hpp"
#include "mcammd/ops.hpp"

namespace mcammd {

inline constexpr double kMinBandwidth = 1e-6;

// Gaussian (RBF) kernel. An empty bandwidth selects the median heuristic,
// evaluated on the pooled samples each time the kernel is used.
struct KernelConfig {
  std::optional<double> bandwidth;

  static KernelConfig median() { return {}; }

  static KernelConfig fixed(double sigma) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) {
      throw ConfigError("kernel bandwidth must be finite and positive");
    }
    return {sigma};
  }

  bool operator==(const KernelConfig&) const = default;
};

enum class MmdEstimator { biased, unbiased };

// exp(-|a - b|^2 / (2 sigma^2))
inline double rbf_kernel(std::span<const double> a, std::span<const double> b, double sigma) {
  if (!(sigma > 0.0)) throw DomainError("rbf_kernel: bandwidth must be positive");
  if (a.size() != b.size()) throw ShapeError("rbf_kernel: vectors of different length");
  double d2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
  return std::exp(-d2 / (2.0 * sigma * sigma));
}

// Median of all pairwise Euclidean distances among the rows of X and Y
// pooled together, floored at 1e-6. Even pair counts average the two middle
// values.
inline double median_heuristic(const Tensor& X, const Tensor& Y) {
  if (X.cols() != Y.cols()) throw ShapeError("median_heuristic: sample dimensions differ");
  const std::size_t d = X.cols();
  std::vector<const double*> rows;
  for (std::size_t i = 0; i < X.rows(); ++i) rows.push_back(X.data().data() + i * d);
  for (std::size_t i = 0; i < Y.rows(); ++i) rows.push_back(Y.data().data() + i * d);
  if (rows.size() < 2) throw ContractError("median_heuristic: need at least two pooled samples");

  std::vector<double> dist;
  dist.reserve(rows.size() * (rows.size() - 1) / 2);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = rows[i][k] - rows[j][k];
        s += diff * diff;
      }
      dist.push_back(std::sqrt(s));
    }
  }
  const std::size_t mid = dist.size() / 2;
  std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid), dist.end());
  double med = dist[mid];
  if (dist.size() % 2 == 0) {
    const double lower = *std::max_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid));
    med = 0.5 * (lower + med);
  }
  return std::max(med, kMinBandwidth);
}

// Kernel matrix (n x m) between the rows of A and B, differentiable in both.
// Squared distances are summed from explicit differences, so they are never
// negative and the diagonal of kernel_matrix(A, A) is exactly 1.
inline Tensor kernel_matrix(const Tensor& A, const Tensor& B, double sigma) {
  if (!(sigma > 0.0)) throw DomainError("kernel_matrix: bandwidth must be positive");
  if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.cols()) {
    throw ShapeError("kernel_matrix: incompatible samples " + shape_string(A.shape()) + " and " +
                     shape_string(B.shape()));
  }
  const std::size_t n = A.rows(), m = B.rows(), d = A.cols();
  std::vector<std::size_t> ia(n * m), ib(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      ia[i * m + j] = i;
      ib[i * m + j] = j;
    }
  }
  Tensor diff = sub(gather_rows(A, std::move(ia)), gather_rows(B, std::move(ib)));
  Tensor d2 = matmul(mul(diff, diff), Tensor::filled({d, 1}, 1.0));
  return reshape(exp(scale(d2, -1.0 / (2.0 * sigma * sigma))), {n, m});
}

namespace detail {

// Mean of a square kernel matrix with its diagonal excluded.
inline Tensor off_diagonal_mean(const Tensor& K) {
  const std::size_t n = K.rows();
  std::vector<double> mask(n * n, 1.0);
  for (std::size_t i = 0; i < n; ++i) mask[i * n + i] = 0.0;
  return scale(sum(mul(K, Tensor({n, n}, std::move(mask)))), 1.0 / static_cast<double>(n * (n - 1)));
}

}  // namespace detail

// Squared MMD between the empirical distributions of the rows of X and Y at
// a fixed bandwidth. Biased: V-statistic over all pairs (never negative).
// Unbiased: U-statistic without the within-sample diagonals (may be negative).
inline Tensor mmd2_at(const Tensor& X, const Tensor& Y, double sigma, MmdEstimator kind) {
  const std::size_t min_rows = kind == MmdEstimator::unbiased ? 2 : 1;
  if (X.rows() < min_rows || Y.rows() < min_rows) {
    throw ContractError(std::string("mmd2: ") + (kind == MmdEstimator::unbiased ? "unbiased" : "biased") +
                        " estimator needs at least " + std::to_string(min_rows) + " samples per side");
  }
  const Tensor kxy = mean(kernel_matrix(X, Y, sigma));
  if (kind == MmdEstimator::biased) {
    return sub(add(mean(kernel_matrix(X, X, sigma)), mean(kernel_matrix(Y, Y, sigma))), scale(kxy, 2.0));
  }
  return sub(add(detail::off_diagonal_mean(kernel_matrix(X, X, sigma)),
                 detail::off_diagonal_mean(kernel_matrix(Y, Y, sigma))),
             scale(kxy, 2.0));
}

inline double resolve_bandwidth(const KernelConfig& kernel, const Tensor& X, const Tensor& Y) {
  return kernel.bandwidth ? *kernel.bandwidth : median_heuristic(X, Y);
}

// The median-heuristic bandwidth is a constant of the graph: no gradient
// flows through it.
inline Tensor mmd2(const Tensor& X, const Tensor& Y, const KernelConfig& kernel = {},
                   MmdEstimator kind = MmdEstimator::biased) {
  return mmd2_at(X, Y, resolve_bandwidth(kernel, X, Y), kind);
}

// KL(q1 || q2) for diagonal Gaussians, summed over classes and dimensions.
inline Tensor gaussian_kl(const GaussianPosterior& q1, const GaussianPosterior& q2) {
  if (q1.mu.shape() != q2.mu.shape() || q1.sigma2.shape() != q2.sigma2.shape() ||
      q1.mu.shape() != q1.sigma2.shape()) {
    throw ShapeError("gaussian_kl: posterior shapes " + shape_string(q1.mu.shape()) + " and " +
                     shape_string(q2.mu.shape()) + " differ");
  }
  const Tensor log_s1 = log(q1.sigma2);
  const Tensor log_s2 = log(q2.sigma2);
  const Tensor diff = sub(q1.mu, q2.mu);
  const Tensor ratio = mul(add(q1.sigma2, mul(diff, diff)), exp(scale(log_s2, -1.0)));
  const Tensor ones = Tensor::filled(q1.mu.shape(), 1.0);
  return scale(sum(sub(add(sub(log_s2, log_s1), ratio), ones)), 0.5);
}

}  // namespace mcammd
