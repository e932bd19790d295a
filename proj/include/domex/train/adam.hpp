#pragma once

#include <cmath>
#include <map>
#include <span>
#include <string>

#include "domex/autodiff/tape.hpp"
#include "domex/error.hpp"
#include "domex/nn/network.hpp"

namespace domex {

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

struct AdamState {
  struct Moments {
    Tensor m;
    Tensor v;
  };
  std::map<std::string, Moments> moments;
  std::uint64_t t = 0;
};

/// One bias-corrected Adam update of the parameters named in `mask`; the
/// others are left untouched (their moments are not even created).
inline void adam_step(std::span<Parameter* const> params, const ParameterMask& mask, AdamState& state,
                      const AdamConfig& cfg) {
  ++state.t;
  const double t = static_cast<double>(state.t);
  const float c1 = static_cast<float>(1.0 - std::pow(static_cast<double>(cfg.beta1), t));
  const float c2 = static_cast<float>(1.0 - std::pow(static_cast<double>(cfg.beta2), t));
  for (Parameter* p : params) {
    if (!mask.contains(p->name)) continue;
    if (p->grad.shape() != p->value.shape()) {
      throw StateError("adam_step: gradient shape mismatch for '" + p->name + "'");
    }
    auto [it, inserted] = state.moments.try_emplace(p->name);
    auto& mo = it->second;
    if (inserted) {
      mo.m = Tensor::zeros_like(p->value);
      mo.v = Tensor::zeros_like(p->value);
    } else if (mo.m.shape() != p->value.shape()) {
      throw StateError("adam_step: moment shape mismatch for '" + p->name + "'");
    }
    float* w = p->value.ptr();
    const float* g = p->grad.ptr();
    float* m = mo.m.ptr();
    float* v = mo.v.ptr();
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0f - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0f - cfg.beta2) * g[i] * g[i];
      const float mhat = m[i] / c1;
      const float vhat = v[i] / c2;
      w[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

}  // namespace domex
