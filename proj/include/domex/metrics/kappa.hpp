#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <span>
#include <string>
#include <vector>

#include "domex/error.hpp"

namespace domex {

inline constexpr int kOrdinalClasses = 4;

/// counts[true][predicted]
struct ConfusionMatrix {
  std::array<std::array<std::uint64_t, kOrdinalClasses>, kOrdinalClasses> counts{};

  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (const auto& row : counts)
      for (auto c : row) n += c;
    return n;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

struct KappaResult {
  double kappa = 0.0;
  std::uint64_t n = 0;
};

namespace detail {
inline void check_label(int v, const char* what) {
  if (v < 0 || v >= kOrdinalClasses) {
    throw InputError(std::string(what) + " label " + std::to_string(v) + " outside [0,3]");
  }
}
}  // namespace detail

inline ConfusionMatrix confusion_matrix(std::span<const int> y_true, std::span<const int> y_pred) {
  if (y_true.size() != y_pred.size()) {
    throw InputError("confusion_matrix: " + std::to_string(y_true.size()) + " true vs " +
                     std::to_string(y_pred.size()) + " predicted labels");
  }
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    detail::check_label(y_true[i], "true");
    detail::check_label(y_pred[i], "predicted");
    ++cm.counts[static_cast<std::size_t>(y_true[i])][static_cast<std::size_t>(y_pred[i])];
  }
  return cm;
}

/// Cohen's kappa with disagreement weights |i-j|/3. Throws InputError when
/// the expected disagreement is zero (kappa undefined).
inline KappaResult linear_weighted_kappa(const ConfusionMatrix& cm) {
  const std::uint64_t n = cm.total();
  if (n == 0) throw InputError("kappa undefined: empty confusion matrix");
  const double nd = static_cast<double>(n);
  std::array<double, kOrdinalClasses> row{}, col{};
  for (int i = 0; i < kOrdinalClasses; ++i) {
    for (int j = 0; j < kOrdinalClasses; ++j) {
      const double c = static_cast<double>(cm.counts[i][j]) / nd;
      row[i] += c;
      col[j] += c;
    }
  }
  double observed = 0.0, expected = 0.0;
  for (int i = 0; i < kOrdinalClasses; ++i) {
    for (int j = 0; j < kOrdinalClasses; ++j) {
      const double w = std::abs(i - j) / static_cast<double>(kOrdinalClasses - 1);
      observed += w * static_cast<double>(cm.counts[i][j]) / nd;
      expected += w * row[i] * col[j];
    }
  }
  if (expected <= 0.0) throw InputError("kappa undefined: zero expected disagreement");
  return {1.0 - observed / expected, n};
}

inline KappaResult linear_weighted_kappa(std::span<const int> y_true, std::span<const int> y_pred) {
  return linear_weighted_kappa(confusion_matrix(y_true, y_pred));
}

/// Per-sample agreement 1 - |pred - true|/3, the paired unit for Wilcoxon.
inline std::vector<double> per_sample_agreement(std::span<const int> y_true, std::span<const int> y_pred) {
  if (y_true.size() != y_pred.size()) {
    throw InputError("per_sample_agreement: length mismatch");
  }
  std::vector<double> out(y_true.size());
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    detail::check_label(y_true[i], "true");
    detail::check_label(y_pred[i], "predicted");
    out[i] = 1.0 - std::abs(y_pred[i] - y_true[i]) / static_cast<double>(kOrdinalClasses - 1);
  }
  return out;
}

}  // namespace domex
