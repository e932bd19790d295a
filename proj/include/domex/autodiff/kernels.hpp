#pragma once

#include <cstddef>
#include <cstring>
#include <vector>

// Row-major float kernels behind matmul, conv2d and batch norm. The GEMMs
// accumulate into C. Reductions use eight fixed partial sums so they
// vectorise without reassociation; results are reproducible for a given
// build.
namespace domex::detail {

inline constexpr std::size_t kLanes = 8;

// Eight float lanes; loads go through memcpy so inputs need no alignment.
typedef float Lanes __attribute__((vector_size(kLanes * sizeof(float))));

inline Lanes load_lanes(const float* p) {
  Lanes v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline double reduce_lanes(Lanes acc) {
  double s = 0.0;
  for (std::size_t l = 0; l < kLanes; ++l) s += acc[l];
  return s;
}

inline double sum_lanes(const float* x, std::size_t n) {
  Lanes acc = {};
  const std::size_t nv = n - n % kLanes;
  for (std::size_t i = 0; i < nv; i += kLanes) acc += load_lanes(x + i);
  double s = reduce_lanes(acc);
  for (std::size_t i = nv; i < n; ++i) s += x[i];
  return s;
}

inline double dot_lanes(const float* x, const float* y, std::size_t n) {
  Lanes acc = {};
  const std::size_t nv = n - n % kLanes;
  for (std::size_t i = 0; i < nv; i += kLanes) acc += load_lanes(x + i) * load_lanes(y + i);
  double s = reduce_lanes(acc);
  for (std::size_t i = nv; i < n; ++i) s += static_cast<double>(x[i]) * y[i];
  return s;
}

// sum (x - mu)^2
inline double centered_square_lanes(const float* x, float mu, std::size_t n) {
  Lanes acc = {};
  const std::size_t nv = n - n % kLanes;
  for (std::size_t i = 0; i < nv; i += kLanes) {
    const Lanes d = load_lanes(x + i) - mu;
    acc += d * d;
  }
  double s = reduce_lanes(acc);
  for (std::size_t i = nv; i < n; ++i) {
    const double d = static_cast<double>(x[i]) - mu;
    s += d * d;
  }
  return s;
}

// C[m,n] += A[m,k] * B[k,n]; four rows of C per pass over B.
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const float* __restrict a,
                    const float* __restrict b, float* __restrict c) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    float* __restrict c0 = c + i * n;
    float* __restrict c1 = c0 + n;
    float* __restrict c2 = c1 + n;
    float* __restrict c3 = c2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const float a0 = a[i * k + p], a1 = a[(i + 1) * k + p];
      const float a2 = a[(i + 2) * k + p], a3 = a[(i + 3) * k + p];
      const float* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const float bv = brow[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (i = m - m % 4; i < m; ++i) {
    float* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = a[i * k + p];
      const float* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const float* __restrict a,
                    const float* __restrict b, float* __restrict c) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    float* __restrict c0 = c + i * n;
    float* __restrict c1 = c0 + n;
    float* __restrict c2 = c1 + n;
    float* __restrict c3 = c2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const float* arow = a + p * m + i;
      const float a0 = arow[0], a1 = arow[1], a2 = arow[2], a3 = arow[3];
      const float* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const float bv = brow[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (i = m - m % 4; i < m; ++i) {
    float* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = a[p * m + i];
      const float* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T. Narrow outputs use row dot products; wider
// ones go through a transposed copy of B and gemm_nn.
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const float* __restrict a,
                    const float* __restrict b, float* __restrict c) {
  if (n < 16) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += static_cast<float>(dot_lanes(a + i * k, b + j * k, k));
    return;
  }
  std::vector<float> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(m, n, k, a, bt.data(), c);
}

}  // namespace domex::detail
