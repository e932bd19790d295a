#pragma once

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "domex/error.hpp"
#include "domex/ewc/ewc.hpp"
#include "domex/io/checkpoint.hpp"
#include "domex/io/dataset_io.hpp"
#include "domex/io/report.hpp"
#include "domex/metrics/kappa.hpp"
#include "domex/metrics/pca.hpp"
#include "domex/train/sweep.hpp"
#include "domex/train/trainer.hpp"

namespace domex::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitIo = 2;

struct Options {
  TrainConfig cfg;
  std::size_t jobs = 0;
  std::string out;

  // generate
  double shift = 0.5;
  std::size_t patients_o = kDefaultPatientsO;
  std::size_t patients_t = kDefaultPatientsT;

  // shared inputs
  std::string dataset;
  std::string checkpoint;
  std::string construct = "O_only";
  std::string regime = "all_layers";
  std::string bn_source = "frozen:O";
  std::string domain = "O";
  std::string split = "test";
  bool with_ewc = false;
  std::vector<double> lambdas;
  std::vector<std::uint64_t> seeds;
};

inline std::size_t default_jobs() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : n;
}

inline void print_marginals(std::ostream& os, const DomainPair& pair) {
  for (const Dataset* ds : {&pair.o, &pair.t}) {
    const auto c = io::class_counts(*ds);
    const double n = static_cast<double>(ds->records.size());
    os << "domain " << to_string(ds->domain) << ": " << ds->records.size() << " images, class marginals";
    for (std::size_t k = 0; k < c.size(); ++k) {
      char buf[32];
      std::snprintf(buf, sizeof buf, " %.3f", static_cast<double>(c[k]) / n);
      os << buf;
    }
    os << "\n";
  }
}

inline EwcState compute_ewc(Network net, const SplitSets& data, const TrainConfig& cfg) {
  net.set_bn_source(StatSource::current_batch(Domain::O));
  EwcState st;
  st.anchor = snapshot_parameters(net);
  st.fisher = estimate_fisher(net, data.o_train.images, data.o_train.labels, cfg.fisher_samples, cfg.seed);
  st.fisher_samples = cfg.fisher_samples;
  return st;
}

inline const LabeledSet& pick_split(const SplitSets& d, Domain domain, Split split) {
  if (domain == Domain::Joint) throw InputError("choose domain O or T");
  const bool o = domain == Domain::O;
  switch (split) {
    case Split::Train: return o ? d.o_train : d.t_train;
    case Split::Val: return o ? d.o_val : d.t_val;
    case Split::Test: return o ? d.o_test : d.t_test;
  }
  throw InputError("unknown split");
}

inline int cmd_generate(const Options& o, std::ostream& os) {
  DomainPair pair = make_domain_pair(o.shift, o.patients_o, o.patients_t, o.cfg.seed);
  io::save_dataset(o.out, pair);
  print_marginals(os, pair);
  return kExitOk;
}

inline int cmd_train(const Options& o, std::ostream& os) {
  const Construct construct = parse_construct(o.construct);
  o.cfg.validate();
  if (o.with_ewc && construct != Construct::OOnly) {
    throw InputError("--ewc anchors EWC at an O-trained model; use it with --construct O_only");
  }
  const SplitSets data = SplitSets::from(io::load_dataset(o.dataset));
  io::ensure_directory(o.out);
  TrainedModel m = run_baseline(construct, data, o.cfg);
  io::Checkpoint ck{m.network, std::nullopt, io::config_to_json(o.cfg)};
  ck.config["construct"] = o.construct;
  if (o.with_ewc) ck.ewc = compute_ewc(m.network, data, o.cfg);
  io::save_checkpoint(fs::path(o.out) / "checkpoint", ck);
  io::write_report(fs::path(o.out) / "report", m.report, o.cfg);
  os << o.construct << ": kappa_O " << io::format_number(m.report.kappa_o) << " kappa_T "
     << io::format_number(m.report.kappa_t) << " after " << m.report.epochs_ran() << " epochs\n";
  return kExitOk;
}

/// Loads the checkpoint and, when asked for, computes the EWC state it is
/// missing. `fisher_requested` mirrors an explicit --fisher-samples.
inline io::Checkpoint checkpoint_with_ewc(const Options& o, const SplitSets& data, bool need_ewc,
                                          bool fisher_requested) {
  io::Checkpoint ck = io::load_checkpoint(o.checkpoint);
  if (need_ewc && !ck.ewc) {
    if (!fisher_requested) {
      throw StateError("lambda > 0 needs a Fisher diagonal and anchor: the checkpoint has none; retrain with "
                       "--ewc or pass --fisher-samples N to compute them from the O training split");
    }
    ck.ewc = compute_ewc(ck.network, data, o.cfg);
  }
  return ck;
}

inline int cmd_finetune(const Options& o, bool fisher_requested, std::ostream& os) {
  TrainConfig cfg = o.cfg;
  cfg.regime = parse_regime(o.regime);
  cfg.bn_source = parse_stat_source(o.bn_source);
  cfg.validate();
  const SplitSets data = SplitSets::from(io::load_dataset(o.dataset));
  io::Checkpoint ck = checkpoint_with_ewc(o, data, cfg.lambda > 0.0, fisher_requested);
  io::ensure_directory(o.out);
  TrainedModel m = finetune(ck.network, data, cfg.regime, cfg.bn_source, cfg.lambda, cfg,
                            ck.ewc ? &*ck.ewc : nullptr);
  io::Checkpoint out{m.network, ck.ewc, io::config_to_json(cfg)};
  out.config["construct"] = "finetune";
  io::save_checkpoint(fs::path(o.out) / "checkpoint", out);
  io::write_report(fs::path(o.out) / "report", m.report, cfg);
  os << "finetune " << to_string(cfg.regime) << " " << to_string(cfg.bn_source) << " lambda "
     << io::format_number(cfg.lambda) << ": kappa_O " << io::format_optional(m.report.pre_kappa_o) << " -> "
     << io::format_number(m.report.kappa_o) << " (p " << io::format_optional(m.report.p_o_vs_pre) << "), kappa_T "
     << io::format_optional(m.report.pre_kappa_t) << " -> " << io::format_number(m.report.kappa_t) << "\n";
  return kExitOk;
}

inline int cmd_sweep(const Options& o, bool fisher_requested, std::ostream& os, std::ostream& err) {
  SweepSpec spec;
  spec.regime = parse_regime(o.regime);
  spec.bn_source = parse_stat_source(o.bn_source);
  spec.lambdas = o.lambdas.empty() ? default_lambda_grid(spec.regime) : o.lambdas;
  spec.seeds = o.seeds.empty() ? std::vector<std::uint64_t>{o.cfg.seed} : o.seeds;
  for (double l : spec.lambdas) {
    if (!(l >= 0.0)) throw InputError("lambdas must be >= 0");
  }
  o.cfg.validate();
  const SplitSets data = SplitSets::from(io::load_dataset(o.dataset));
  bool need_ewc = false;
  for (double l : spec.lambdas) need_ewc = need_ewc || l > 0.0;
  io::Checkpoint ck = checkpoint_with_ewc(o, data, need_ewc, fisher_requested);
  io::ensure_directory(o.out);
  const auto rows = run_sweep(ck.network, ck.ewc ? &*ck.ewc : nullptr, data, spec, o.cfg,
                              o.jobs == 0 ? default_jobs() : o.jobs);
  io::atomic_write(fs::path(o.out) / "sweep.csv", io::sweep_csv(rows));
  io::atomic_write(fs::path(o.out) / "sweep_plot.csv", io::sweep_plot_csv(rows));
  std::size_t failed = 0;
  for (const auto& r : rows) failed += r.ok() ? 0 : 1;
  os << rows.size() << " runs, " << failed << " failed\n";
  if (failed > 0) {
    for (const auto& r : rows) {
      if (!r.ok()) err << "lambda " << io::format_number(r.lambda) << " seed " << r.seed << ": " << r.error << "\n";
    }
    return kExitUsage;
  }
  return kExitOk;
}

inline int cmd_eval(const Options& o, bool source_given, std::ostream& os) {
  io::Checkpoint ck = io::load_checkpoint(o.checkpoint);
  const SplitSets data = SplitSets::from(io::load_dataset(o.dataset));
  const LabeledSet& set = pick_split(data, parse_domain(o.domain), parse_split(o.split));
  const StatSource src = source_given ? parse_stat_source(o.bn_source) : ck.network.bn_source();
  const Evaluation e = evaluate(ck.network, set, src);
  const ConfusionMatrix cm = confusion_matrix(set.labels, e.predictions);
  nlohmann::json j = {{"domain", o.domain},
                      {"split", o.split},
                      {"bn_source", to_string(src)},
                      {"n", set.size()},
                      {"kappa", e.kappa},
                      {"confusion_matrix", cm.counts}};
  io::ensure_directory(o.out);
  io::atomic_write(fs::path(o.out) / "metrics.json", j.dump(2) + "\n");
  os << "kappa " << io::format_number(e.kappa) << " on " << set.size() << " images\n";
  return kExitOk;
}

inline int cmd_export_features(const Options& o, std::ostream& os, std::ostream& err) {
  io::Checkpoint ck = io::load_checkpoint(o.checkpoint);
  const SplitSets data = SplitSets::from(io::load_dataset(o.dataset));
  const LabeledSet& set = pick_split(data, parse_domain(o.domain), parse_split(o.split));
  const Tensor f = ck.network.pooled_features(set.images);
  const std::size_t n = f.dim(0), d = f.dim(1);
  Matrix x(n, d);
  for (std::size_t i = 0; i < n * d; ++i) x.data[i] = f[i];
  const PcaResult pca = pca_project(x, 2);

  std::string csv = "row,label";
  for (std::size_t j = 0; j < d; ++j) csv += ",f" + std::to_string(j);
  for (std::size_t j = 0; j < pca.projection.cols; ++j) csv += ",pc" + std::to_string(j + 1);
  csv += "\n";
  for (std::size_t i = 0; i < n; ++i) {
    csv += std::to_string(i) + "," + std::to_string(set.labels[i]);
    for (std::size_t j = 0; j < d; ++j) csv += "," + io::format_number(f[i * d + j]);
    for (std::size_t j = 0; j < pca.projection.cols; ++j) csv += "," + io::format_number(pca.projection(i, j));
    csv += "\n";
  }
  std::string var = "component,explained_variance\n";
  for (std::size_t j = 0; j < pca.explained.size(); ++j) {
    var += "pc" + std::to_string(j + 1) + "," + io::format_number(pca.explained[j]) + "\n";
  }
  io::ensure_directory(o.out);
  io::atomic_write(fs::path(o.out) / "features.csv", csv);
  io::atomic_write(fs::path(o.out) / "explained_variance.csv", var);
  if (pca.rank_deficient) err << "warning: features have rank below 2; fewer components written\n";
  os << n << " rows, " << pca.explained.size() << " components\n";
  return kExitOk;
}

/// Entry point of the `domex` tool. Exit codes: 0 success, 1 usage or
/// validation error, 2 IO or corrupt input.
inline int run(int argc, const char* const* argv, std::ostream& os = std::cout, std::ostream& err = std::cerr) {
  Options o;
  CLI::App app{"Domain expansion experiments: frozen BN statistics and EWC", "domex"};
  app.set_config("--config", "", "Key-value config file (TOML/INI) with option values");
  app.allow_config_extras(false);
  app.require_subcommand(1);
  app.fallthrough();

  app.add_option("--seed", o.cfg.seed, "Random seed")->capture_default_str();
  app.add_option("--jobs", o.jobs, "Parallel sweep workers (default: available cores)");
  app.add_option("--out", o.out, "Output directory");
  app.add_option("--batch-size,--batch_size", o.cfg.batch_size, "Mini-batch size")->capture_default_str();
  app.add_option("--max-epochs,--max_epochs", o.cfg.max_epochs, "Epoch limit")->capture_default_str();
  app.add_option("--patience", o.cfg.patience, "Early-stopping patience in epochs")->capture_default_str();
  app.add_option("--lr", o.cfg.lr, "Adam learning rate")->capture_default_str();
  app.add_option("--eval-every,--eval_every", o.cfg.eval_every, "Validate every k epochs")->capture_default_str();
  CLI::Option* fisher_opt =
      app.add_option("--fisher-samples,--fisher_samples", o.cfg.fisher_samples, "O training images used for the Fisher diagonal")
          ->capture_default_str();

  auto* gen = app.add_subcommand("generate", "Generate a synthetic O/T dataset pair");
  gen->add_option("--shift", o.shift, "Shift magnitude s of domain T, in [0,1]")->capture_default_str();
  gen->add_option("--patients-o", o.patients_o, "Patients in domain O")->capture_default_str();
  gen->add_option("--patients-t", o.patients_t, "Patients in domain T")->capture_default_str();

  auto* train = app.add_subcommand("train", "Train a baseline construct");
  train->add_option("--dataset", o.dataset, "Dataset directory")->required();
  train->add_option("--construct", o.construct, "O_only, O_then_T_naive or joint_OT")->capture_default_str();
  train->add_flag("--ewc", o.with_ewc, "Store EWC anchor and Fisher diagonal in the checkpoint");

  auto* ft = app.add_subcommand("finetune", "Fine-tune an O checkpoint on T");
  ft->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
  ft->add_option("--dataset", o.dataset, "Dataset directory")->required();
  ft->add_option("--regime", o.regime, "all_layers or bn_only")->capture_default_str();
  ft->add_option("--bn-source", o.bn_source, "batch:<O|T|OT> or frozen:<O|T|OT>")->capture_default_str();
  ft->add_option("--lambda", o.cfg.lambda, "EWC importance weight")->capture_default_str();

  auto* sw = app.add_subcommand("sweep", "Fine-tune over a lambda grid and several seeds");
  sw->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
  sw->add_option("--dataset", o.dataset, "Dataset directory")->required();
  sw->add_option("--regime", o.regime, "all_layers or bn_only")->capture_default_str();
  sw->add_option("--bn-source", o.bn_source, "batch:<O|T|OT> or frozen:<O|T|OT>")->capture_default_str();
  sw->add_option("--lambdas", o.lambdas, "Lambda values (default: the regime's grid)")->delimiter(',');
  sw->add_option("--seeds", o.seeds, "Fine-tuning seeds (default: --seed)")->delimiter(',');

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
  ev->add_option("--dataset", o.dataset, "Dataset directory")->required();
  ev->add_option("--domain", o.domain, "O or T")->capture_default_str();
  ev->add_option("--split", o.split, "train, val or test")->capture_default_str();
  CLI::Option* ev_src = ev->add_option("--bn-source", o.bn_source, "BN source (default: the checkpoint's)");

  auto* ex = app.add_subcommand("export-features", "Export pooled features and their 2-D PCA projection");
  ex->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
  ex->add_option("--dataset", o.dataset, "Dataset directory")->required();
  ex->add_option("--domain", o.domain, "O or T")->capture_default_str();
  ex->add_option("--split", o.split, "train, val or test")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, os, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  if (o.out.empty()) {
    err << "error: --out is required\n";
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_generate(o, os);
    if (*train) return cmd_train(o, os);
    if (*ft) return cmd_finetune(o, fisher_opt->count() > 0, os);
    if (*sw) return cmd_sweep(o, fisher_opt->count() > 0, os, err);
    if (*ev) return cmd_eval(o, ev_src->count() > 0, os);
    if (*ex) return cmd_export_features(o, os, err);
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "io error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitUsage;
}

}  // namespace domex::cli
