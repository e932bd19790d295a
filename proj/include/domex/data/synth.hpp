#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "domex/autodiff/tensor.hpp"
#include "domex/error.hpp"
#include "domex/nn/batchnorm.hpp"
#include "domex/nn/network.hpp"

namespace domex {

/// Acquisition characteristics of one scanner. Intensities are in units of
/// the full raw range; the shift is applied before bit-depth normalisation.
struct DomainSpec {
  std::string name;
  double gain = 1.0;
  double offset = 0.0;
  double noise_sigma = 0.0;
  double texture_freq = 0.0;  ///< cycles per image side
  int bit_depth = 12;

  friend bool operator==(const DomainSpec&, const DomainSpec&) = default;
};

struct SampleRecord {
  std::uint32_t patient_id = 0;
  std::vector<float> image;  ///< 28*28, values in [0,1]
  int label = 0;
  Domain domain = Domain::O;
  int subscanner = -1;  ///< 0..4 for O, -1 for T

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

enum class Split : std::uint8_t { Train = 0, Val = 1, Test = 2 };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw InputError("unknown split '" + std::string(s) + "'");
}

using SplitAssignment = std::map<std::uint32_t, Split>;

struct Dataset {
  Domain domain = Domain::O;
  std::vector<DomainSpec> specs;      ///< O: five sub-scanners; T: one
  std::vector<SampleRecord> records;  ///< sorted by patient id
  SplitAssignment split;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct DomainPair {
  double shift = 0.0;
  std::uint64_t seed = 0;
  Dataset o;
  Dataset t;

  friend bool operator==(const DomainPair&, const DomainPair&) = default;
};

/// Images and labels of one split, ready for the network.
struct LabeledSet {
  Tensor images;  ///< [n,1,28,28]
  std::vector<int> labels;
  std::vector<std::uint32_t> patients;

  std::size_t size() const { return labels.size(); }
};

namespace synth {

inline constexpr std::size_t kPixels = kImageSide * kImageSide;
inline constexpr double kFatLevel = 0.25;
inline constexpr double kDenseLevel = 0.60;
inline constexpr double kBaseNoise = 0.20;
inline constexpr double kBaseTextureFreq = 2.5;
inline constexpr double kTextureShift = 2.5;  ///< cycles added at shift 1
inline constexpr double kDensityJitter = 0.07;
inline constexpr int kWaves = 6;
inline constexpr int kSubscanners = 5;

}  // namespace synth

/// Ordinal class of a latent density in [0,1] (thresholds 0.25/0.5/0.75).
inline int density_label(double d) {
  if (d < 0.25) return 0;
  if (d < 0.5) return 1;
  if (d < 0.75) return 2;
  return 3;
}

/// raw / (2^bits - 1).
inline std::vector<float> bit_depth_normalize(std::span<const std::uint32_t> raw, int bits) {
  if (bits != 12 && bits != 14) throw InputError("bit depth must be 12 or 14, got " + std::to_string(bits));
  const std::uint32_t max = (1u << bits) - 1u;
  std::vector<float> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] > max) {
      throw InputError("raw value " + std::to_string(raw[i]) + " exceeds " + std::to_string(bits) + "-bit range");
    }
    out[i] = static_cast<float>(static_cast<double>(raw[i]) / static_cast<double>(max));
  }
  return out;
}

/// Renders one image of a patient with latent density `d`: a band-limited
/// random field thresholded so the bright fraction is close to d, mapped to
/// fat/dense intensities, then passed through the scanner's gain, offset and
/// noise in the raw range.
template <class Rng>
std::vector<float> render_image(const DomainSpec& spec, double d, Rng& rng) {
  using synth::kPixels;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::array<double, kPixels> field{};
  for (int w = 0; w < synth::kWaves; ++w) {
    const double angle = unit(rng) * std::numbers::pi;
    const double freq = spec.texture_freq * (0.7 + 0.6 * unit(rng));
    const double phase = unit(rng) * 2.0 * std::numbers::pi;
    const double fx = freq * std::cos(angle) / kImageSide;
    const double fy = freq * std::sin(angle) / kImageSide;
    for (std::size_t y = 0; y < kImageSide; ++y)
      for (std::size_t x = 0; x < kImageSide; ++x)
        field[y * kImageSide + x] += std::cos(2.0 * std::numbers::pi * (fx * x + fy * y) + phase);
  }
  const double fraction = std::clamp(d + synth::kDensityJitter * normal(rng), 0.02, 0.98);
  const auto bright = static_cast<std::size_t>(std::lround(fraction * kPixels));
  std::array<double, kPixels> sorted = field;
  std::sort(sorted.begin(), sorted.end());
  const double threshold = bright == 0 ? sorted.back() + 1.0 : sorted[kPixels - bright];

  const std::uint32_t max_raw = (1u << spec.bit_depth) - 1u;
  std::vector<std::uint32_t> raw(kPixels);
  for (std::size_t i = 0; i < kPixels; ++i) {
    const double tissue = field[i] >= threshold ? synth::kDenseLevel : synth::kFatLevel;
    const double v = spec.gain * tissue + spec.offset + spec.noise_sigma * normal(rng);
    raw[i] = static_cast<std::uint32_t>(std::lround(std::clamp(v, 0.0, 1.0) * max_raw));
  }
  return bit_depth_normalize(raw, spec.bit_depth);
}

/// One patient: latent density, 1-4 images sharing its label.
template <class Rng>
std::vector<SampleRecord> generate_patient(const DomainSpec& spec, std::uint32_t patient_id, Domain domain,
                                           int subscanner, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> count(1, 4);
  const double d = unit(rng);
  const int label = density_label(d);
  const int n = count(rng);
  std::vector<SampleRecord> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    out.push_back(SampleRecord{patient_id, render_image(spec, d, rng), label, domain, subscanner});
  }
  return out;
}

/// Per-patient RNG stream, independent of generation order.
inline std::mt19937_64 patient_rng(std::uint64_t seed, Domain domain, std::uint32_t patient_id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(domain), patient_id};
  return std::mt19937_64(seq);
}

/// Shuffles the unique patient ids and assigns contiguous 70/20/10 blocks;
/// val and test sizes round down so the remainder goes to train.
inline SplitAssignment patient_split(std::span<const std::uint32_t> patient_ids, std::uint64_t seed) {
  std::vector<std::uint32_t> ids(patient_ids.begin(), patient_ids.end());
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (ids.size() < 10) throw InputError("patient_split: need at least 10 patients, got " + std::to_string(ids.size()));
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  const std::size_t n = ids.size();
  const std::size_t n_val = n * 2 / 10;
  const std::size_t n_test = n / 10;
  const std::size_t n_train = n - n_val - n_test;
  SplitAssignment out;
  for (std::size_t i = 0; i < n; ++i) {
    out[ids[i]] = i < n_train ? Split::Train : (i < n_train + n_val ? Split::Val : Split::Test);
  }
  return out;
}

inline SplitAssignment patient_split(std::span<const SampleRecord> records, std::uint64_t seed) {
  std::vector<std::uint32_t> ids;
  ids.reserve(records.size());
  for (const auto& r : records) ids.push_back(r.patient_id);
  return patient_split(ids, seed);
}

/// Five original-domain scanners spread around the identity acquisition.
inline std::vector<DomainSpec> original_specs() {
  std::vector<DomainSpec> specs;
  for (int k = 0; k < synth::kSubscanners; ++k) {
    const double step = k - 2;
    specs.push_back(DomainSpec{"O" + std::to_string(k), 1.0 + 0.05 * step, 0.0,
                               synth::kBaseNoise * (1.0 + 0.1 * step), synth::kBaseTextureFreq, 12});
  }
  return specs;
}

/// Target scanner displaced from the identity acquisition by `s`.
inline DomainSpec target_spec(double s) {
  return DomainSpec{"T", 1.0 + 0.5 * s, 0.1 * s, synth::kBaseNoise * (1.0 + s),
                    synth::kBaseTextureFreq + synth::kTextureShift * s, 14};
}

inline Dataset generate_domain(Domain domain, const std::vector<DomainSpec>& specs, std::uint32_t first_id,
                               std::size_t n_patients, std::uint64_t seed) {
  Dataset ds;
  ds.domain = domain;
  ds.specs = specs;
  for (std::size_t i = 0; i < n_patients; ++i) {
    const auto id = static_cast<std::uint32_t>(first_id + i);
    const int sub = domain == Domain::O ? static_cast<int>(i % specs.size()) : -1;
    auto rng = patient_rng(seed, domain, id);
    auto recs = generate_patient(specs[domain == Domain::O ? static_cast<std::size_t>(sub) : 0], id, domain, sub, rng);
    for (auto& r : recs) ds.records.push_back(std::move(r));
  }
  ds.split = patient_split(std::span<const SampleRecord>(ds.records),
                           seed ^ (0x9E3779B97F4A7C15ull * (static_cast<std::uint64_t>(domain) + 1)));
  return ds;
}

inline constexpr std::size_t kDefaultPatientsO = 3000;
inline constexpr std::size_t kDefaultPatientsT = 800;

/// Dataset O (five 12-bit scanners) and Dataset T (one 14-bit scanner at
/// shift s). O does not depend on s, so a shift sweep reuses one O.
inline DomainPair make_domain_pair(double s, std::size_t n_patients_o, std::size_t n_patients_t, std::uint64_t seed) {
  if (!(s >= 0.0 && s <= 1.0)) throw InputError("shift magnitude must be in [0,1]");
  DomainPair pair;
  pair.shift = s;
  pair.seed = seed;
  pair.o = generate_domain(Domain::O, original_specs(), 0, n_patients_o, seed);
  pair.t = generate_domain(Domain::T, {target_spec(s)}, static_cast<std::uint32_t>(n_patients_o), n_patients_t, seed);
  return pair;
}

inline LabeledSet labeled_set(const Dataset& ds, Split split) {
  std::vector<const SampleRecord*> picked;
  for (const auto& r : ds.records) {
    auto it = ds.split.find(r.patient_id);
    if (it != ds.split.end() && it->second == split) picked.push_back(&r);
  }
  if (picked.empty()) throw InputError("split '" + std::string(to_string(split)) + "' is empty");
  LabeledSet out;
  out.images = Tensor({picked.size(), 1, kImageSide, kImageSide});
  for (std::size_t i = 0; i < picked.size(); ++i) {
    std::copy(picked[i]->image.begin(), picked[i]->image.end(), out.images.ptr() + i * synth::kPixels);
    out.labels.push_back(picked[i]->label);
    out.patients.push_back(picked[i]->patient_id);
  }
  return out;
}

/// Concatenation, used for the joint O+T construct.
inline LabeledSet concat(const LabeledSet& a, const LabeledSet& b) {
  LabeledSet out;
  const std::size_t n = a.size() + b.size();
  std::vector<float> data(a.images.data().begin(), a.images.data().end());
  data.insert(data.end(), b.images.data().begin(), b.images.data().end());
  out.images = Tensor({n, 1, kImageSide, kImageSide}, std::move(data));
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.patients = a.patients;
  out.patients.insert(out.patients.end(), b.patients.begin(), b.patients.end());
  return out;
}

}  // namespace domex
