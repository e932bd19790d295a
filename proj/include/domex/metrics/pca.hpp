#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "domex/error.hpp"

namespace domex {

/// Row-major n x d matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

struct PcaResult {
  Matrix projection;                    ///< n x k'
  Matrix components;                    ///< k' x d, unit rows
  std::vector<double> explained;        ///< variance fraction per component
  bool rank_deficient = false;          ///< fewer than k components returned
};

namespace detail {

// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Returns
// eigenvalues; `vectors` receives eigenvectors as columns.
inline std::vector<double> jacobi_eigen(Matrix a, Matrix& vectors) {
  const std::size_t d = a.rows;
  vectors = Matrix(d, d);
  for (std::size_t i = 0; i < d; ++i) vectors(i, i) = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = i + 1; j < d; ++j) off += a(i, j) * a(i, j);
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < d; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double vkp = vectors(k, p), vkq = vectors(k, q);
          vectors(k, p) = c * vkp - s * vkq;
          vectors(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<double> values(d);
  for (std::size_t i = 0; i < d; ++i) values[i] = a(i, i);
  return values;
}

}  // namespace detail

/// Projects centred rows onto the top-k covariance eigenvectors, ordered by
/// descending eigenvalue. Each component's largest-magnitude loading is made
/// positive. Components with negligible variance are dropped and flagged.
inline PcaResult pca_project(const Matrix& x, std::size_t k = 2) {
  if (x.rows < 2) throw InputError("pca_project: need at least 2 rows");
  if (x.cols < k) throw InputError("pca_project: fewer columns than components");
  const std::size_t n = x.rows, d = x.cols;
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += x(i, j);
  for (auto& m : mean) m /= static_cast<double>(n);
  Matrix centred(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) centred(i, j) = x(i, j) - mean[j];
  Matrix cov(d, d);
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = a; b < d; ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += centred(i, a) * centred(i, b);
      cov(a, b) = cov(b, a) = s / static_cast<double>(n - 1);
    }
  }
  Matrix vecs;
  const std::vector<double> vals = detail::jacobi_eigen(cov, vecs);
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return vals[a] > vals[b]; });

  double trace = 0.0;
  for (double v : vals) trace += std::max(v, 0.0);
  const double top = std::max(vals[order[0]], 0.0);

  PcaResult out;
  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < k; ++c) {
    const double v = vals[order[c]];
    if (top <= 0.0 || v <= 1e-12 * top) break;
    keep.push_back(order[c]);
  }
  out.rank_deficient = keep.size() < k;
  out.components = Matrix(keep.size(), d);
  for (std::size_t c = 0; c < keep.size(); ++c) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < d; ++j) {
      if (std::abs(vecs(j, keep[c])) > std::abs(vecs(arg, keep[c]))) arg = j;
    }
    const double sign = vecs(arg, keep[c]) < 0 ? -1.0 : 1.0;
    for (std::size_t j = 0; j < d; ++j) out.components(c, j) = sign * vecs(j, keep[c]);
    out.explained.push_back(trace > 0 ? vals[keep[c]] / trace : 0.0);
  }
  out.projection = Matrix(n, keep.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < keep.size(); ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += centred(i, j) * out.components(c, j);
      out.projection(i, c) = s;
    }
  }
  return out;
}

}  // namespace domex
