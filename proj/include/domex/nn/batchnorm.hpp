#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "domex/autodiff/ops.hpp"
#include "domex/autodiff/tape.hpp"
#include "domex/error.hpp"

namespace domex {

/// Running-statistics slot. `Joint` is the single shared slot used when O and
/// T are trained together.
enum class Domain : std::uint8_t { O = 0, T = 1, Joint = 2 };

inline std::string_view to_string(Domain d) {
  switch (d) {
    case Domain::O: return "O";
    case Domain::T: return "T";
    case Domain::Joint: return "OT";
  }
  return "?";
}

inline Domain parse_domain(std::string_view s) {
  if (s == "O") return Domain::O;
  if (s == "T") return Domain::T;
  if (s == "OT" || s == "joint") return Domain::Joint;
  throw InputError("unknown domain '" + std::string(s) + "' (expected O, T or OT)");
}

/// Where a BN layer takes its normalisation statistics from.
///  - CurrentBatch(d): batch statistics while training (and the running
///    statistics of slot d are updated), slot d's running statistics at
///    inference.
///  - FrozenGlobal(d): slot d's stored statistics in training and inference;
///    nothing is updated.
struct StatSource {
  enum class Mode : std::uint8_t { CurrentBatch, FrozenGlobal };

  Mode mode = Mode::CurrentBatch;
  Domain domain = Domain::O;

  static constexpr StatSource current_batch(Domain d) { return {Mode::CurrentBatch, d}; }
  static constexpr StatSource frozen_global(Domain d) { return {Mode::FrozenGlobal, d}; }

  bool frozen() const { return mode == Mode::FrozenGlobal; }

  friend bool operator==(const StatSource&, const StatSource&) = default;
};

inline std::string to_string(const StatSource& s) {
  return std::string(s.frozen() ? "frozen:" : "batch:") + std::string(to_string(s.domain));
}

/// Parses "batch:O", "frozen:T", etc.
inline StatSource parse_stat_source(std::string_view s) {
  const auto colon = s.find(':');
  if (colon == std::string_view::npos) {
    throw InputError("bad BN source '" + std::string(s) + "' (expected batch:<D> or frozen:<D>)");
  }
  const auto mode = s.substr(0, colon);
  const Domain d = parse_domain(s.substr(colon + 1));
  if (mode == "batch") return StatSource::current_batch(d);
  if (mode == "frozen") return StatSource::frozen_global(d);
  throw InputError("bad BN source mode '" + std::string(mode) + "'");
}

struct RunningStats {
  std::vector<float> mean;
  std::vector<float> var;

  friend bool operator==(const RunningStats&, const RunningStats&) = default;
};

/// Exponential moving average of batch statistics into `slot`. An empty slot
/// is initialised with the batch statistics.
inline void update_running_stats(std::optional<RunningStats>& slot, const std::vector<float>& batch_mean,
                                 const std::vector<float>& batch_var, float momentum) {
  if (!slot) {
    slot = RunningStats{batch_mean, batch_var};
    return;
  }
  for (std::size_t c = 0; c < batch_mean.size(); ++c) {
    slot->mean[c] = (1.0f - momentum) * slot->mean[c] + momentum * batch_mean[c];
    slot->var[c] = (1.0f - momentum) * slot->var[c] + momentum * batch_var[c];
  }
}

class BatchNormLayer {
 public:
  BatchNormLayer() = default;

  BatchNormLayer(const std::string& name, std::size_t channels, float eps = 1e-5f,
                 float momentum = 0.1f)
      : gamma(name + ".gamma", Tensor({channels}, 1.0f)),
        beta(name + ".beta", Tensor({channels}, 0.0f)),
        eps(eps),
        momentum(momentum),
        name_(name),
        channels_(channels) {}

  Parameter gamma;
  Parameter beta;
  float eps = 1e-5f;
  float momentum = 0.1f;

  const std::string& name() const { return name_; }
  std::size_t channels() const { return channels_; }

  bool has_stats(Domain d) const { return stats_.contains(d); }

  const RunningStats& stats(Domain d) const {
    auto it = stats_.find(d);
    if (it == stats_.end()) {
      throw StateError("BN layer '" + name_ + "' has no running statistics for domain " +
                       std::string(to_string(d)));
    }
    return it->second;
  }

  void set_stats(Domain d, RunningStats s) {
    if (s.mean.size() != channels_ || s.var.size() != channels_) {
      throw ShapeError("BN layer '" + name_ + "': statistics length mismatch");
    }
    stats_[d] = std::move(s);
  }

  const std::map<Domain, RunningStats>& all_stats() const { return stats_; }

  /// Normalises x[n,C,H,W] per channel as selected by `source`, then applies
  /// gamma and beta.
  Var forward(Tape& tape, Var x, const StatSource& source, bool training) {
    const Tensor& xv = x.value();
    if (xv.rank() != 4 || xv.dim(1) != channels_) {
      throw ShapeError("BN layer '" + name_ + "': expected [n," + std::to_string(channels_) +
                       ",H,W], got " + to_string(xv.shape()));
    }
    const std::size_t n = xv.dim(0), hw = xv.dim(2) * xv.dim(3);
    const bool use_batch = training && !source.frozen();

    std::vector<float> mean(channels_), var(channels_);
    if (use_batch) {
      if (n * hw < 2) {
        throw InputError("BN layer '" + name_ + "': batch statistics need at least 2 values per channel");
      }
      const double count = static_cast<double>(n * hw);
      for (std::size_t c = 0; c < channels_; ++c) {
        double s = 0.0;
        for (std::size_t b = 0; b < n; ++b) s += detail::sum_lanes(xv.ptr() + (b * channels_ + c) * hw, hw);
        const double mu = s / count;
        double q = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
          q += detail::centered_square_lanes(xv.ptr() + (b * channels_ + c) * hw, static_cast<float>(mu), hw);
        }
        mean[c] = static_cast<float>(mu);
        var[c] = static_cast<float>(q / count);
      }
      std::optional<RunningStats> slot;
      if (auto it = stats_.find(source.domain); it != stats_.end()) slot = it->second;
      update_running_stats(slot, mean, var, momentum);
      stats_[source.domain] = std::move(*slot);
    } else {
      const RunningStats& rs = stats(source.domain);
      mean = rs.mean;
      var = rs.var;
    }

    auto inv_std = std::make_shared<std::vector<float>>(channels_);
    for (std::size_t c = 0; c < channels_; ++c) {
      (*inv_std)[c] = static_cast<float>(1.0 / std::sqrt(static_cast<double>(var[c]) + eps));
    }
    // Normalised input is kept for the backward pass.
    auto xhat = std::make_shared<std::vector<float>>(xv.size());
    Var g = tape.parameter(gamma);
    Var bt = tape.parameter(beta);
    const Tensor& gv = g.value();
    const Tensor& bv = bt.value();
    Tensor out(xv.shape());
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t c = 0; c < channels_; ++c) {
        const std::size_t base = (b * channels_ + c) * hw;
        const float mu = mean[c], is = (*inv_std)[c], gc = gv[c], bc = bv[c];
        const float* __restrict xp = xv.ptr() + base;
        float* __restrict hp = xhat->data() + base;
        float* __restrict op = out.ptr() + base;
        for (std::size_t j = 0; j < hw; ++j) {
          const float h = (xp[j] - mu) * is;
          hp[j] = h;
          op[j] = gc * h + bc;
        }
      }
    }
    const std::size_t ch = channels_;
    return tape.record(
        std::move(out), {x, g, bt}, "batch_norm",
        [n, hw, ch, use_batch, inv_std, xhat](Tape& t, std::size_t self) {
          const auto& node = t.node(self);
          const std::size_t ix = node.parents[0], ig = node.parents[1], ib = node.parents[2];
          const Tensor& dy = node.grad;
          const Tensor& gv = t.value(ig);
          std::vector<double> sum_dy(ch, 0.0), sum_dy_xhat(ch, 0.0);
          for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t c = 0; c < ch; ++c) {
              const std::size_t base = (b * ch + c) * hw;
              sum_dy[c] += detail::sum_lanes(dy.ptr() + base, hw);
              sum_dy_xhat[c] += detail::dot_lanes(dy.ptr() + base, xhat->data() + base, hw);
            }
          }
          if (t.requires_grad(ig)) {
            Tensor& dg = t.grad_mut(ig);
            for (std::size_t c = 0; c < ch; ++c) dg[c] += static_cast<float>(sum_dy_xhat[c]);
          }
          if (t.requires_grad(ib)) {
            Tensor& db = t.grad_mut(ib);
            for (std::size_t c = 0; c < ch; ++c) db[c] += static_cast<float>(sum_dy[c]);
          }
          if (!t.requires_grad(ix)) return;
          Tensor& dx = t.grad_mut(ix);
          const double count = static_cast<double>(n * hw);
          for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t c = 0; c < ch; ++c) {
              const std::size_t base = (b * ch + c) * hw;
              const float k = gv[c] * (*inv_std)[c];
              const float* __restrict gp = dy.ptr() + base;
              const float* __restrict hp = xhat->data() + base;
              float* __restrict dp = dx.ptr() + base;
              if (use_batch) {
                // Gradient through the batch mean and variance.
                const float m1 = static_cast<float>(sum_dy[c] / count);
                const float m2 = static_cast<float>(sum_dy_xhat[c] / count);
                for (std::size_t j = 0; j < hw; ++j) dp[j] += k * (gp[j] - m1 - hp[j] * m2);
              } else {
                for (std::size_t j = 0; j < hw; ++j) dp[j] += k * gp[j];
              }
            }
          }
        });
  }

 private:
  std::string name_;
  std::size_t channels_ = 0;
  std::map<Domain, RunningStats> stats_;
};

}  // namespace domex
