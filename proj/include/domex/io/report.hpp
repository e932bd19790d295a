#pragma once

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "domex/io/files.hpp"
#include "domex/train/sweep.hpp"
#include "domex/train/trainer.hpp"

namespace domex::io {

/// Shortest round-trip decimal form; stable across runs.
inline std::string format_number(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string format_optional(const std::optional<double>& v) { return v ? format_number(*v) : ""; }

inline nlohmann::json config_to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"patience", c.patience},
          {"seed", c.seed},
          {"lambda", c.lambda},
          {"regime", std::string(to_string(c.regime))},
          {"bn_source", to_string(c.bn_source)},
          {"eval_every", c.eval_every},
          {"lr", c.lr},
          {"fisher_samples", c.fisher_samples}};
}

inline constexpr const char* kReportHeader =
    "row,epoch,train_loss,val_kappa,kappa_O,kappa_T,pre_kappa_O,pre_kappa_T,p_O_vs_pre,p_T_vs_pre";

/// One row per recorded epoch, then a `summary` row whose epoch column is
/// the best (returned) epoch.
inline std::string report_csv(const RunReport& r) {
  std::string out = std::string(kReportHeader) + "\n";
  for (const auto& e : r.epochs) {
    out += "epoch," + std::to_string(e.epoch) + "," + format_number(e.train_loss) + "," +
           format_number(e.val_kappa) + ",,,,,,\n";
  }
  double best_val = 0.0;
  for (const auto& e : r.epochs) {
    if (e.epoch == r.best_epoch) best_val = e.val_kappa;
  }
  out += "summary," + std::to_string(r.best_epoch) + ",," + format_number(best_val) + "," +
         format_number(r.kappa_o) + "," + format_number(r.kappa_t) + "," + format_optional(r.pre_kappa_o) + "," +
         format_optional(r.pre_kappa_t) + "," + format_optional(r.p_o_vs_pre) + "," +
         format_optional(r.p_t_vs_pre) + "\n";
  return out;
}

inline nlohmann::json report_meta(const RunReport& r, const TrainConfig& cfg) {
  return {{"construct", std::string(to_string(r.construct))},
          {"regime", std::string(to_string(r.regime))},
          {"bn_source", to_string(r.bn_source)},
          {"lambda", r.lambda},
          {"seed", r.seed},
          {"epochs_ran", r.epochs_ran()},
          {"best_epoch", r.best_epoch},
          {"kappa_O", r.kappa_o},
          {"kappa_T", r.kappa_t},
          {"config", config_to_json(cfg)}};
}

/// Writes `<stem>.csv` and `<stem>.meta.json`.
inline void write_report(const fs::path& stem, const RunReport& r, const TrainConfig& cfg) {
  fs::path csv = stem, meta = stem;
  csv += ".csv";
  meta += ".meta.json";
  atomic_write(csv, report_csv(r));
  atomic_write(meta, report_meta(r, cfg).dump(2) + "\n");
}

inline constexpr const char* kSweepHeader =
    "lambda,seed,regime,bn_source,kappa_O,kappa_T,p_vs_baseline_O,epochs_ran,status";

/// One row per (lambda, seed); `status` is `ok` or `failed: <reason>`.
inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = std::string(kSweepHeader) + "\n";
  for (const auto& r : rows) {
    std::string status = r.ok() ? "ok" : "failed: " + r.error;
    std::replace(status.begin(), status.end(), ',', ';');
    std::replace(status.begin(), status.end(), '\n', ' ');
    out += format_number(r.lambda) + "," + std::to_string(r.seed) + "," + std::string(to_string(r.regime)) + "," +
           to_string(r.bn_source) + ",";
    if (r.ok()) {
      out += format_number(r.kappa_o) + "," + format_number(r.kappa_t) + "," + format_optional(r.p_vs_baseline_o) +
             "," + std::to_string(r.epochs_ran);
    } else {
      out += ",,,";
    }
    out += "," + status + "\n";
  }
  return out;
}

/// lambda against mean kappa on O and on T.
inline std::string sweep_plot_csv(const std::vector<SweepRow>& rows) {
  std::string out = "lambda,mean_kappa_O,mean_kappa_T,runs\n";
  for (const auto& p : sweep_curve(rows)) {
    out += format_number(p.lambda) + "," + format_number(p.mean_kappa_o) + "," + format_number(p.mean_kappa_t) + "," +
           std::to_string(p.runs) + "\n";
  }
  return out;
}

}  // namespace domex::io
