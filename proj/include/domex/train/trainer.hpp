#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "domex/autodiff/ops.hpp"
#include "domex/data/synth.hpp"
#include "domex/error.hpp"
#include "domex/ewc/ewc.hpp"
#include "domex/metrics/kappa.hpp"
#include "domex/metrics/wilcoxon.hpp"
#include "domex/nn/network.hpp"
#include "domex/train/adam.hpp"

namespace domex {

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t max_epochs = 60;
  std::size_t patience = 20;
  std::uint64_t seed = 0;
  double lambda = 0.0;
  Regime regime = Regime::AllLayers;
  StatSource bn_source = StatSource::current_batch(Domain::T);
  std::size_t eval_every = 1;
  float lr = 1e-3f;
  std::size_t fisher_samples = 2000;

  void validate() const {
    if (batch_size < 2) throw InputError("batch_size must be >= 2");
    if (patience < 1) throw InputError("patience must be >= 1");
    if (max_epochs < 1) throw InputError("max_epochs must be >= 1");
    if (eval_every < 1) throw InputError("eval_every must be >= 1");
    if (!(lambda >= 0.0)) throw InputError("lambda must be >= 0");
    if (!(lr >= 0.0f)) throw InputError("lr must be >= 0");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_kappa = 0.0;
};

/// Tracks the best validation score; improvement means strictly greater.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

  /// Returns true when `metric` is a new best.
  bool observe(std::size_t epoch, double metric) {
    if (metric > best_) {
      best_ = metric;
      best_epoch_ = epoch;
      since_best_ = 0;
      return true;
    }
    ++since_best_;
    return false;
  }

  bool should_stop() const { return since_best_ >= patience_; }
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }
  std::size_t since_best() const { return since_best_; }

 private:
  std::size_t patience_;
  double best_ = -std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;
  std::size_t since_best_ = 0;
};

struct FitResult {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_kappa = 0.0;
};

/// Extra loss term added to every training step (the EWC penalty).
using Regularizer = std::function<Var(Tape&, Network&)>;

struct Evaluation {
  std::vector<int> predictions;
  double kappa = 0.0;
};

/// Inference-mode evaluation under `source`; the network's own source is
/// restored afterwards.
inline Evaluation evaluate(Network& net, const LabeledSet& set, const StatSource& source) {
  const StatSource saved = net.bn_source();
  net.set_bn_source(source);
  Evaluation e;
  try {
    if (!source.frozen()) {
      for (const BatchNormLayer* bn : net.batch_norms()) bn->stats(source.domain);
    }
    e.predictions = net.predict(set.images);
  } catch (...) {
    net.set_bn_source(saved);
    throw;
  }
  net.set_bn_source(saved);
  e.kappa = linear_weighted_kappa(set.labels, e.predictions).kappa;
  return e;
}

namespace detail {
inline Tensor gather_images(const Tensor& images, std::span<const std::size_t> idx) {
  const std::size_t per = kImageSide * kImageSide;
  Tensor out({idx.size(), 1, kImageSide, kImageSide});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(images.ptr() + idx[i] * per, per, out.ptr() + i * per);
  }
  return out;
}
}  // namespace detail

/// Mini-batch Adam on `train` with the network's current BN source, early
/// stopping on validation kappa. On return the network holds the best
/// checkpoint (maximum validation kappa), not the last one.
inline FitResult fit(Network& net, const LabeledSet& train, const LabeledSet& val, const TrainConfig& cfg,
                     const ParameterMask& mask, const Regularizer& regularizer = {}) {
  cfg.validate();
  if (train.size() == 0 || val.size() == 0) throw InputError("fit: empty train or validation split");
  std::mt19937_64 rng(cfg.seed);
  AdamState adam;
  const AdamConfig adam_cfg{cfg.lr};
  EarlyStopper stopper(cfg.patience);
  Network best = net;
  FitResult result;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto params = net.parameters();

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t m = std::min(cfg.batch_size, order.size() - start);
      if (m < 2) break;  // batch statistics need two samples
      std::span<const std::size_t> idx(order.data() + start, m);
      std::vector<int> labels(m);
      for (std::size_t i = 0; i < m; ++i) labels[i] = train.labels[idx[i]];
      Tape tape;
      Var logits = net.forward(tape, detail::gather_images(train.images, idx), true);
      Var loss = softmax_cross_entropy(logits, labels);
      if (regularizer) loss = total_loss(loss, regularizer(tape, net));
      net.zero_grads();
      tape.backward(loss);
      adam_step(params, mask, adam, adam_cfg);
      loss_sum += loss.value().item();
      ++steps;
    }
    if (epoch % cfg.eval_every != 0 && epoch != cfg.max_epochs) continue;
    EpochRecord rec{epoch, steps ? loss_sum / static_cast<double>(steps) : 0.0,
                    evaluate(net, val, net.bn_source()).kappa};
    result.epochs.push_back(rec);
    if (stopper.observe(epoch, rec.val_kappa)) best = net;
    if (stopper.should_stop()) break;
  }
  net = std::move(best);
  result.best_epoch = stopper.best_epoch();
  result.best_val_kappa = stopper.best();
  return result;
}

enum class Construct : std::uint8_t { OOnly, OThenTNaive, JointOT, Finetune };

inline std::string_view to_string(Construct c) {
  switch (c) {
    case Construct::OOnly: return "O_only";
    case Construct::OThenTNaive: return "O_then_T_naive";
    case Construct::JointOT: return "joint_OT";
    case Construct::Finetune: return "finetune";
  }
  return "?";
}

inline Construct parse_construct(std::string_view s) {
  if (s == "O_only") return Construct::OOnly;
  if (s == "O_then_T_naive") return Construct::OThenTNaive;
  if (s == "joint_OT") return Construct::JointOT;
  throw InputError("unknown construct '" + std::string(s) + "'");
}

/// Outcome of one training or fine-tuning run.
struct RunReport {
  Construct construct = Construct::OOnly;
  Regime regime = Regime::AllLayers;
  StatSource bn_source = StatSource::current_batch(Domain::O);
  double lambda = 0.0;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double kappa_o = 0.0;  ///< O test split
  double kappa_t = 0.0;  ///< T test split
  std::optional<double> pre_kappa_o;
  std::optional<double> pre_kappa_t;
  std::optional<double> p_o_vs_pre;  ///< Wilcoxon on per-sample agreement, O test
  std::optional<double> p_t_vs_pre;
  double seconds = 0.0;  ///< wall time, not part of the serialised report

  std::size_t epochs_ran() const { return epochs.empty() ? 0 : epochs.back().epoch; }
};

/// The six splits of a domain pair.
struct SplitSets {
  LabeledSet o_train, o_val, o_test;
  LabeledSet t_train, t_val, t_test;

  static SplitSets from(const DomainPair& pair) {
    return {labeled_set(pair.o, Split::Train), labeled_set(pair.o, Split::Val), labeled_set(pair.o, Split::Test),
            labeled_set(pair.t, Split::Train), labeled_set(pair.t, Split::Val), labeled_set(pair.t, Split::Test)};
  }
};

struct TrainedModel {
  RunReport report;
  Network network;
};

/// Trains a fresh network on O with batch statistics (slot O).
inline TrainedModel train_original(const SplitSets& data, const TrainConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainedModel out{RunReport{}, Network(cfg.seed)};
  Network& net = out.network;
  const StatSource src = StatSource::current_batch(Domain::O);
  net.set_bn_source(src);
  FitResult fr = fit(net, data.o_train, data.o_val, cfg, trainable_parameters(net, Regime::AllLayers));
  RunReport& r = out.report;
  r.construct = Construct::OOnly;
  r.regime = Regime::AllLayers;
  r.bn_source = src;
  r.seed = cfg.seed;
  r.epochs = std::move(fr.epochs);
  r.best_epoch = fr.best_epoch;
  r.kappa_o = evaluate(net, data.o_test, src).kappa;
  r.kappa_t = evaluate(net, data.t_test, src).kappa;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

/// Fine-tunes a network trained on O on the T splits.
///
/// The trainable set follows `regime`, BN follows `source` during training
/// and for the final evaluation of both test sets. With lambda > 0 the EWC
/// penalty over the trainable parameters is added to the T loss. The report
/// also carries the pre-fine-tune kappas (O running statistics) and Wilcoxon
/// p-values of the post- vs pre-fine-tune per-sample agreement.
inline TrainedModel finetune(const Network& from_o, const SplitSets& data, Regime regime, const StatSource& source,
                             double lambda, const TrainConfig& cfg, const EwcState* ewc = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  if (lambda < 0.0) throw InputError("lambda must be >= 0");
  if (lambda > 0.0 && ewc == nullptr) {
    throw StateError("lambda > 0 requires a Fisher diagonal and anchor computed on O");
  }
  TrainedModel out{RunReport{}, from_o};
  Network& net = out.network;
  const StatSource pre_src = StatSource::current_batch(Domain::O);
  const Evaluation pre_o = evaluate(net, data.o_test, pre_src);
  const Evaluation pre_t = evaluate(net, data.t_test, pre_src);

  net.set_bn_source(source);
  const ParameterMask mask = trainable_parameters(net, regime);
  Regularizer reg;
  if (lambda > 0.0) {
    const auto lam = static_cast<float>(lambda);
    reg = [ewc, lam, &mask](Tape& tape, Network& n) {
      auto params = n.parameters();
      return ewc_penalty(tape, params, ewc->anchor, ewc->fisher, lam, mask);
    };
  }
  FitResult fr = fit(net, data.t_train, data.t_val, cfg, mask, reg);

  const Evaluation post_o = evaluate(net, data.o_test, source);
  const Evaluation post_t = evaluate(net, data.t_test, source);
  RunReport& r = out.report;
  r.construct = Construct::Finetune;
  r.regime = regime;
  r.bn_source = source;
  r.lambda = lambda;
  r.seed = cfg.seed;
  r.epochs = std::move(fr.epochs);
  r.best_epoch = fr.best_epoch;
  r.kappa_o = post_o.kappa;
  r.kappa_t = post_t.kappa;
  r.pre_kappa_o = pre_o.kappa;
  r.pre_kappa_t = pre_t.kappa;
  const auto agree = [](const LabeledSet& s, const Evaluation& e) {
    return per_sample_agreement(s.labels, e.predictions);
  };
  r.p_o_vs_pre = wilcoxon_signed_rank(agree(data.o_test, post_o), agree(data.o_test, pre_o)).p;
  r.p_t_vs_pre = wilcoxon_signed_rank(agree(data.t_test, post_t), agree(data.t_test, pre_t)).p;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

/// Trains one fresh network on the union of O and T with a single shared
/// running-statistics slot.
inline TrainedModel train_joint(const SplitSets& data, const TrainConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainedModel out{RunReport{}, Network(cfg.seed)};
  Network& net = out.network;
  const StatSource src = StatSource::current_batch(Domain::Joint);
  net.set_bn_source(src);
  FitResult fr = fit(net, concat(data.o_train, data.t_train), concat(data.o_val, data.t_val), cfg,
                     trainable_parameters(net, Regime::AllLayers));
  RunReport& r = out.report;
  r.construct = Construct::JointOT;
  r.regime = Regime::AllLayers;
  r.bn_source = src;
  r.seed = cfg.seed;
  r.epochs = std::move(fr.epochs);
  r.best_epoch = fr.best_epoch;
  r.kappa_o = evaluate(net, data.o_test, src).kappa;
  r.kappa_t = evaluate(net, data.t_test, src).kappa;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

/// The three baseline constructs. O_then_T_naive returns the report of its
/// fine-tuning phase (AllLayers, batch statistics on T, lambda 0).
inline TrainedModel run_baseline(Construct construct, const SplitSets& data, const TrainConfig& cfg) {
  switch (construct) {
    case Construct::OOnly: return train_original(data, cfg);
    case Construct::JointOT: return train_joint(data, cfg);
    case Construct::OThenTNaive: {
      const auto t0 = std::chrono::steady_clock::now();
      TrainedModel base = train_original(data, cfg);
      TrainedModel ft =
          finetune(base.network, data, Regime::AllLayers, StatSource::current_batch(Domain::T), 0.0, cfg);
      ft.report.construct = Construct::OThenTNaive;
      ft.report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      return ft;
    }
    case Construct::Finetune: break;
  }
  throw InputError("run_baseline: not a baseline construct");
}

}  // namespace domex
