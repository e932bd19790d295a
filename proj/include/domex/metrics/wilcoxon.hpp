#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string_view>
#include <vector>

#include "domex/error.hpp"

namespace domex {

struct WilcoxonResult {
  enum class Method : std::uint8_t { Exact, NormalApprox };

  double statistic = 0.0;  ///< min(positive rank sum, negative rank sum)
  double rank_sum_positive = 0.0;
  double rank_sum_negative = 0.0;
  double p = 1.0;  ///< two-sided
  std::size_t n_effective = 0;
  Method method = Method::Exact;
};

inline std::string_view to_string(WilcoxonResult::Method m) {
  return m == WilcoxonResult::Method::Exact ? "exact" : "normal";
}

inline constexpr std::size_t kWilcoxonExactMax = 20;

namespace detail {

// Nonzero differences and their doubled midranks (integers), plus the tie
// group sizes. Magnitudes within a relative 1e-9 count as tied so that
// differences of agreement scores like 2/3-1/3 and 1-2/3 rank together.
struct SignedRanks {
  std::vector<double> diffs;
  std::vector<std::uint32_t> doubled_ranks;
  std::vector<std::size_t> tie_sizes;
};

inline bool same_magnitude(double x, double y) {
  return std::abs(x - y) <= 1e-9 * std::max({1.0, std::abs(x), std::abs(y)});
}

inline SignedRanks signed_ranks(std::span<const double> d) {
  SignedRanks r;
  for (double v : d) {
    if (std::abs(v) > 1e-12) r.diffs.push_back(v);
  }
  const std::size_t n = r.diffs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(r.diffs[a]) < std::abs(r.diffs[b]);
  });
  r.doubled_ranks.assign(n, 0);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i + 1;
    while (j < n && same_magnitude(std::abs(r.diffs[order[j]]), std::abs(r.diffs[order[i]]))) ++j;
    // positions i+1..j (1-based) share rank (i+1+j)/2
    const auto doubled = static_cast<std::uint32_t>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) r.doubled_ranks[order[k]] = doubled;
    r.tie_sizes.push_back(j - i);
    i = j;
  }
  return r;
}

}  // namespace detail

/// Exact two-sided p-value: the null distribution of the doubled positive
/// rank sum is built by counting sign assignments, then p = 2 P(T <= W).
inline double signed_rank_exact_p(std::span<const double> diffs) {
  const auto r = detail::signed_ranks(diffs);
  const std::size_t n = r.diffs.size();
  if (n == 0) return 1.0;
  if (n > 62) throw InputError("exact signed-rank test limited to 62 nonzero differences");
  std::uint64_t total = 0, w_pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total += r.doubled_ranks[i];
    if (r.diffs[i] > 0) w_pos += r.doubled_ranks[i];
  }
  const std::uint64_t w = std::min(w_pos, total - w_pos);
  std::vector<std::uint64_t> count(total + 1, 0);
  count[0] = 1;
  std::uint64_t reach = 0;
  for (std::uint32_t rk : r.doubled_ranks) {
    reach += rk;
    for (std::uint64_t s = reach; s >= rk; --s) count[s] += count[s - rk];
  }
  std::uint64_t tail = 0;
  for (std::uint64_t s = 0; s <= w; ++s) tail += count[s];
  const double p = static_cast<double>(2 * tail) / std::ldexp(1.0, static_cast<int>(n));
  return std::min(1.0, p);
}

/// Normal approximation with tie-corrected variance and continuity correction.
inline double signed_rank_normal_p(std::span<const double> diffs) {
  const auto r = detail::signed_ranks(diffs);
  const double n = static_cast<double>(r.diffs.size());
  if (r.diffs.empty()) return 1.0;
  double w_pos = 0.0, total = 0.0;
  for (std::size_t i = 0; i < r.diffs.size(); ++i) {
    const double rank = r.doubled_ranks[i] / 2.0;
    total += rank;
    if (r.diffs[i] > 0) w_pos += rank;
  }
  const double w = std::min(w_pos, total - w_pos);
  const double mean = n * (n + 1.0) / 4.0;
  double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
  for (std::size_t t : r.tie_sizes) {
    const double td = static_cast<double>(t);
    var -= (td * td * td - td) / 48.0;
  }
  if (var <= 0.0) return 1.0;
  const double z = (w - mean + 0.5) / std::sqrt(var);
  return std::min(1.0, std::erfc(-z / std::sqrt(2.0)));
}

/// Paired two-sided test on a - b. Exact for up to 20 nonzero differences,
/// normal approximation beyond.
inline WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InputError("wilcoxon_signed_rank: length mismatch");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const auto r = detail::signed_ranks(d);
  WilcoxonResult out;
  out.n_effective = r.diffs.size();
  for (std::size_t i = 0; i < r.diffs.size(); ++i) {
    const double rank = r.doubled_ranks[i] / 2.0;
    (r.diffs[i] > 0 ? out.rank_sum_positive : out.rank_sum_negative) += rank;
  }
  out.statistic = std::min(out.rank_sum_positive, out.rank_sum_negative);
  if (out.n_effective <= kWilcoxonExactMax) {
    out.method = WilcoxonResult::Method::Exact;
    out.p = signed_rank_exact_p(d);
  } else {
    out.method = WilcoxonResult::Method::NormalApprox;
    out.p = signed_rank_normal_p(d);
  }
  return out;
}

}  // namespace domex
