#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "domex/autodiff/ops.hpp"
#include "domex/autodiff/tape.hpp"
#include "domex/error.hpp"
#include "domex/nn/batchnorm.hpp"

namespace domex {

inline constexpr std::size_t kImageSide = 28;
inline constexpr std::size_t kNumClasses = 4;

/// Which parameters fine-tuning may move.
enum class Regime : std::uint8_t { AllLayers, BNOnly };

inline std::string_view to_string(Regime r) { return r == Regime::BNOnly ? "bn_only" : "all_layers"; }

inline Regime parse_regime(std::string_view s) {
  if (s == "bn_only" || s == "BNOnly") return Regime::BNOnly;
  if (s == "all_layers" || s == "AllLayers") return Regime::AllLayers;
  throw InputError("unknown regime '" + std::string(s) + "' (expected bn_only or all_layers)");
}

using ParameterMask = std::set<std::string>;

/// conv(8,3x3,s1,p1) -> BN -> relu -> conv(16,3x3,s2,p1) -> BN -> relu ->
/// global average pool -> dense(16->4). Convolutions carry no bias; the
/// following BN shift plays that role.
class Network {
 public:
  static constexpr std::size_t kC1 = 8;
  static constexpr std::size_t kC2 = 16;

  Network() : Network(0) {}

  explicit Network(std::uint64_t seed)
      : conv1_("conv1.weight", Tensor({kC1, 1, 3, 3})),
        bn1_("bn1", kC1),
        conv2_("conv2.weight", Tensor({kC2, kC1, 3, 3})),
        bn2_("bn2", kC2),
        dense_w_("dense.weight", Tensor({kC2, kNumClasses})),
        dense_b_("dense.bias", Tensor({kNumClasses})) {
    std::mt19937_64 rng(seed);
    he_normal(conv1_.value, 9, rng);
    he_normal(conv2_.value, kC1 * 9, rng);
    std::normal_distribution<float> dense(0.0f, 1.0f / std::sqrt(static_cast<float>(kC2)));
    for (auto& v : dense_w_.value.data()) v = dense(rng);
  }

  static std::string_view fingerprint() {
    return "domex-cnn/v1:conv8x1x3x3s1p1,bn8,relu,conv16x8x3x3s2p1,bn16,relu,gap,dense16x4";
  }

  /// All parameters in a fixed order.
  std::vector<Parameter*> parameters() {
    return {&conv1_, &bn1_.gamma, &bn1_.beta, &conv2_, &bn2_.gamma, &bn2_.beta, &dense_w_, &dense_b_};
  }
  std::vector<const Parameter*> parameters() const {
    return {&conv1_, &bn1_.gamma, &bn1_.beta, &conv2_, &bn2_.gamma, &bn2_.beta, &dense_w_, &dense_b_};
  }

  Parameter& parameter(std::string_view name) {
    for (Parameter* p : parameters()) {
      if (p->name == name) return *p;
    }
    throw StateError("network has no parameter '" + std::string(name) + "'");
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Parameter* p : parameters()) n += p->value.size();
    return n;
  }

  std::vector<BatchNormLayer*> batch_norms() { return {&bn1_, &bn2_}; }
  std::vector<const BatchNormLayer*> batch_norms() const { return {&bn1_, &bn2_}; }

  const StatSource& bn_source() const { return source_; }

  /// Switches every BN layer to `source`. A frozen source must have stored
  /// statistics in every layer; nothing changes if validation fails.
  void set_bn_source(const StatSource& source) {
    if (source.frozen()) {
      for (const BatchNormLayer* bn : batch_norms()) {
        if (!bn->has_stats(source.domain)) {
          throw StateError("cannot freeze BN statistics: layer '" + bn->name() +
                           "' has no running statistics for domain " +
                           std::string(to_string(source.domain)));
        }
      }
    }
    source_ = source;
  }

  void zero_grads() {
    for (Parameter* p : parameters()) p->zero_grad();
  }

  /// Pooled penultimate features [n,16].
  Var features(Tape& tape, const Tensor& images, bool training) {
    check_input(images);
    Var x = tape.constant(images);
    Var h = conv2d(x, tape.parameter(conv1_), 1, 1);
    h = relu(bn1_.forward(tape, h, source_, training));
    // 28 + 2 - 3 is odd, so the stride-2 conv drops its last window (14x14).
    h = conv2d(h, tape.parameter(conv2_), 2, 1, ConvRounding::Floor);
    h = relu(bn2_.forward(tape, h, source_, training));
    return global_avg_pool(h);
  }

  /// Logits [n,4].
  Var forward(Tape& tape, const Tensor& images, bool training) {
    Var f = features(tape, images, training);
    return add_bias(matmul(f, tape.parameter(dense_w_)), tape.parameter(dense_b_));
  }

  /// Inference-mode logits, evaluated in chunks.
  Tensor logits(const Tensor& images) {
    return chunked(images, [this](Tape& t, const Tensor& chunk) { return forward(t, chunk, false); },
                   kNumClasses);
  }

  Tensor pooled_features(const Tensor& images) {
    return chunked(images, [this](Tape& t, const Tensor& chunk) { return features(t, chunk, false); },
                   kC2);
  }

  /// Argmax class per row; ties go to the lower index.
  std::vector<int> predict(const Tensor& images) { return argmax_rows(logits(images)); }

  static std::vector<int> argmax_rows(const Tensor& logits) {
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    std::vector<int> out(n);
    for (std::size_t r = 0; r < n; ++r) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j) {
        if (logits[r * k + j] > logits[r * k + best]) best = j;
      }
      out[r] = static_cast<int>(best);
    }
    return out;
  }

 private:
  static void he_normal(Tensor& t, std::size_t fan_in, std::mt19937_64& rng) {
    std::normal_distribution<float> d(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
    for (auto& v : t.data()) v = d(rng);
  }

  static void check_input(const Tensor& images) {
    if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != kImageSide ||
        images.dim(3) != kImageSide) {
      throw ShapeError("network input must be [n,1,28,28], got " + to_string(images.shape()));
    }
  }

  template <class F>
  Tensor chunked(const Tensor& images, F&& f, std::size_t width) {
    check_input(images);
    constexpr std::size_t kChunk = 256;
    const std::size_t n = images.dim(0);
    const std::size_t per = kImageSide * kImageSide;
    Tensor out({n, width});
    for (std::size_t start = 0; start < n; start += kChunk) {
      const std::size_t m = std::min(kChunk, n - start);
      Tensor chunk({m, 1, kImageSide, kImageSide},
                   std::vector<float>(images.ptr() + start * per, images.ptr() + (start + m) * per));
      Tape tape;
      Var v = f(tape, chunk);
      std::copy(v.value().data().begin(), v.value().data().end(), out.ptr() + start * width);
    }
    return out;
  }

  Parameter conv1_;
  BatchNormLayer bn1_;
  Parameter conv2_;
  BatchNormLayer bn2_;
  Parameter dense_w_;
  Parameter dense_b_;
  StatSource source_ = StatSource::current_batch(Domain::O);
};

/// Names of the parameters a regime may update.
inline ParameterMask trainable_parameters(const Network& net, Regime regime) {
  ParameterMask mask;
  if (regime == Regime::BNOnly) {
    for (const BatchNormLayer* bn : net.batch_norms()) {
      mask.insert(bn->gamma.name);
      mask.insert(bn->beta.name);
    }
  } else {
    for (const Parameter* p : net.parameters()) mask.insert(p->name);
  }
  return mask;
}

inline std::size_t mask_size(const Network& net, const ParameterMask& mask) {
  std::size_t n = 0;
  for (const Parameter* p : net.parameters()) {
    if (mask.contains(p->name)) n += p->value.size();
  }
  return n;
}

}  // namespace domex
