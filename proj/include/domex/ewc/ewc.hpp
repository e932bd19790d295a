#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "domex/autodiff/ops.hpp"
#include "domex/autodiff/tape.hpp"
#include "domex/error.hpp"
#include "domex/nn/network.hpp"

namespace domex {

/// Tensors keyed by parameter name. std::map keeps iteration sorted, which
/// fixes the summation order of the penalty.
using TensorMap = std::map<std::string, Tensor>;

/// Parameters at the end of training on the original domain.
struct AnchorSnapshot {
  TensorMap params;
};

/// Diagonal empirical Fisher, same keys and shapes as the anchor.
struct FisherDiagonal {
  TensorMap values;
};

struct EwcState {
  AnchorSnapshot anchor;
  FisherDiagonal fisher;
  std::size_t fisher_samples = 0;
};

inline AnchorSnapshot snapshot_parameters(const Network& net) {
  AnchorSnapshot a;
  for (const Parameter* p : net.parameters()) a.params.emplace(p->name, p->value);
  return a;
}

/// F_i = mean over examples of (d loss_e / d theta_i)^2. `loss_of(tape, e)`
/// must build the per-example negative log-likelihood of example e.
template <class LossFn>
FisherDiagonal accumulate_fisher(std::span<Parameter* const> params, std::span<const std::size_t> examples,
                                 LossFn&& loss_of) {
  if (examples.empty()) throw InputError("estimate_fisher: need at least one sample");
  std::map<std::string, std::vector<double>> acc;
  for (const Parameter* p : params) acc[p->name].assign(p->value.size(), 0.0);
  for (std::size_t e : examples) {
    for (Parameter* p : params) p->zero_grad();
    Tape tape;
    Var loss = loss_of(tape, e);
    tape.backward(loss);
    for (const Parameter* p : params) {
      auto& a = acc[p->name];
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double g = p->grad[i];
        a[i] += g * g;
      }
    }
  }
  for (Parameter* p : params) p->zero_grad();
  FisherDiagonal f;
  const double inv = 1.0 / static_cast<double>(examples.size());
  for (const Parameter* p : params) {
    Tensor t(p->value.shape());
    const auto& a = acc[p->name];
    for (std::size_t i = 0; i < a.size(); ++i) t[i] = static_cast<float>(a[i] * inv);
    f.values.emplace(p->name, std::move(t));
  }
  return f;
}

/// Empirical Fisher of `net` on labelled images [n,1,28,28], one example at a
/// time with inference-mode BN under the network's current source. Uses
/// min(n_samples, n) examples chosen by a seeded shuffle.
inline FisherDiagonal estimate_fisher(Network& net, const Tensor& images, std::span<const int> labels,
                                      std::size_t n_samples, std::uint64_t seed) {
  if (n_samples < 1) throw InputError("estimate_fisher: n_samples must be >= 1");
  const std::size_t n = labels.size();
  if (n == 0 || images.rank() != 4 || images.dim(0) != n) {
    throw InputError("estimate_fisher: images/labels mismatch or empty subset");
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(n_samples, n));
  std::sort(idx.begin(), idx.end());

  const std::size_t per = images.size() / n;
  auto params = net.parameters();
  return accumulate_fisher(params, idx, [&](Tape& tape, std::size_t e) {
    Tensor one({1, 1, kImageSide, kImageSide},
               std::vector<float>(images.ptr() + e * per, images.ptr() + (e + 1) * per));
    Var logits = net.forward(tape, one, false);
    const int y = labels[e];
    return softmax_cross_entropy(logits, std::span<const int>(&y, 1));
  });
}

/// (lambda/2) sum_i F_i (theta_i - theta*_i)^2 over the parameters named in
/// `mask`, summed in sorted-name order.
inline Var ewc_penalty(Tape& tape, std::span<Parameter* const> params, const AnchorSnapshot& anchor,
                       const FisherDiagonal& fisher, float lambda, const ParameterMask& mask) {
  if (lambda < 0.0f) throw InputError("ewc_penalty: lambda must be >= 0");
  std::map<std::string, Parameter*> by_name;
  for (Parameter* p : params) by_name.emplace(p->name, p);
  Var total = tape.constant(Tensor::scalar(0.0f));
  for (const std::string& name : mask) {
    auto pit = by_name.find(name);
    auto ait = anchor.params.find(name);
    auto fit = fisher.values.find(name);
    if (pit == by_name.end() || ait == anchor.params.end() || fit == fisher.values.end()) {
      throw StateError("ewc_penalty: parameter '" + name + "' missing from network, anchor or Fisher");
    }
    const Shape& s = pit->second->value.shape();
    if (ait->second.shape() != s || fit->second.shape() != s) {
      throw StateError("ewc_penalty: shape mismatch for '" + name + "'");
    }
    Var d = sub(tape.parameter(*pit->second), tape.constant(ait->second));
    Var term = sum(mul(mul(d, d), tape.constant(fit->second)));
    total = add(total, term);
  }
  return scale(total, 0.5f * lambda);
}

inline Var total_loss(Var task_loss, Var penalty) { return add(task_loss, penalty); }

}  // namespace domex
