#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "domex/error.hpp"
#include "domex/ewc/ewc.hpp"
#include "domex/train/trainer.hpp"

namespace domex {

struct SweepRow {
  double lambda = 0.0;
  std::uint64_t seed = 0;
  Regime regime = Regime::AllLayers;
  StatSource bn_source;
  double kappa_o = 0.0;
  double kappa_t = 0.0;
  std::optional<double> p_vs_baseline_o;  ///< post vs pre fine-tune, O test
  std::size_t epochs_ran = 0;
  std::string error;  ///< empty when the run succeeded

  bool ok() const { return error.empty(); }
};

struct SweepSpec {
  Regime regime = Regime::AllLayers;
  StatSource bn_source = StatSource::frozen_global(Domain::O);
  std::vector<double> lambdas;
  std::vector<std::uint64_t> seeds;
};

inline std::vector<double> default_lambda_grid(Regime r) {
  if (r == Regime::BNOnly) return {0.0, 0.0125, 0.025, 0.05, 0.1, 0.2};
  return {0.0, 1.0, 10.0, 1e2, 1e3, 1e4, 1e5};
}

/// Fine-tunes `base` once per (lambda, seed) on up to `jobs` threads. Every
/// run works on its own copy of the network. A failing run yields a row with
/// `error` set instead of aborting the sweep. Rows come back sorted by
/// (lambda, seed).
inline std::vector<SweepRow> run_sweep(const Network& base, const EwcState* ewc, const SplitSets& data,
                                       const SweepSpec& spec, const TrainConfig& cfg, std::size_t jobs) {
  if (spec.lambdas.empty()) throw InputError("sweep needs at least one lambda");
  if (spec.seeds.empty()) throw InputError("sweep needs at least one seed");
  for (double l : spec.lambdas) {
    if (!(l >= 0.0)) throw InputError("sweep lambdas must be >= 0");
  }
  std::vector<SweepRow> rows;
  for (double l : spec.lambdas) {
    for (std::uint64_t s : spec.seeds) {
      SweepRow row;
      row.lambda = l;
      row.seed = s;
      row.regime = spec.regime;
      row.bn_source = spec.bn_source;
      rows.push_back(row);
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    return a.lambda != b.lambda ? a.lambda < b.lambda : a.seed < b.seed;
  });

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < rows.size(); i = next++) {
      SweepRow& row = rows[i];
      try {
        TrainConfig c = cfg;
        c.seed = row.seed;
        c.lambda = row.lambda;
        c.regime = row.regime;
        c.bn_source = row.bn_source;
        const RunReport r = finetune(base, data, row.regime, row.bn_source, row.lambda, c, ewc).report;
        row.kappa_o = r.kappa_o;
        row.kappa_t = r.kappa_t;
        row.p_vs_baseline_o = r.p_o_vs_pre;
        row.epochs_ran = r.epochs_ran();
      } catch (const std::exception& e) {
        row.error = e.what();
        if (row.error.empty()) row.error = "unknown failure";
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(jobs, 1, rows.size());
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  }
  return rows;
}

struct SweepPoint {
  double lambda = 0.0;
  double mean_kappa_o = 0.0;
  double mean_kappa_t = 0.0;
  std::size_t runs = 0;
};

/// Per-lambda means over the successful runs (the two curves of a
/// lambda-sweep plot).
inline std::vector<SweepPoint> sweep_curve(const std::vector<SweepRow>& rows) {
  std::map<double, SweepPoint> by;
  for (const auto& r : rows) {
    if (!r.ok()) continue;
    SweepPoint& p = by[r.lambda];
    p.lambda = r.lambda;
    p.mean_kappa_o += r.kappa_o;
    p.mean_kappa_t += r.kappa_t;
    ++p.runs;
  }
  std::vector<SweepPoint> out;
  for (auto& [l, p] : by) {
    p.mean_kappa_o /= static_cast<double>(p.runs);
    p.mean_kappa_t /= static_cast<double>(p.runs);
    out.push_back(p);
  }
  return out;
}

}  // namespace domex
