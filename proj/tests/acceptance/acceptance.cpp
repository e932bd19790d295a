// Acceptance run: every criterion over seeds 11, 13 and 17, one PASS/FAIL
// line per criterion at the end. Exit status is nonzero if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <unistd.h>
#include <vector>

#include "domex/io/checkpoint.hpp"
#include "domex/io/report.hpp"
#include "domex/metrics/kappa.hpp"
#include "domex/train/trainer.hpp"
#include "domex/util/allocator.hpp"
#include "numeric_checks.hpp"

using namespace domex;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr std::uint64_t kSeeds[] = {11, 13, 17};
constexpr double kShiftGrid[] = {0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60, 0.70};
// Target cross-domain drop of the O-trained model, 0.6694 -> 0.5621.
constexpr double kTargetGap = 0.6694 - 0.5621;
constexpr std::size_t kPatientsO = 3000, kPatientsT = 800;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void say(const char* fmt, auto... args) {
  std::printf(fmt, args...);
  std::fflush(stdout);
}

struct Check {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

struct SeedRun {
  std::uint64_t seed = 0;
  double s_star = 0.0;
  bool calibrated = false;
  double calibration_seconds = 0.0;
  double o_only_o = 0.0, o_only_t = 0.0;
  RunReport naive, joint, bn_cbt;
  std::vector<RunReport> al, bn;  // FG(O) lambda sweeps, lambda 0 first
  std::vector<Check> oracles;
  std::vector<Check> determinism;
  double longest_run = 0.0;
  std::string longest_name;

  void timed(const RunReport& r, const std::string& name) {
    if (r.seconds > longest_run) longest_run = r.seconds, longest_name = name;
  }
};

bool same_non_bn_parameters(Network& a, Network& b) {
  const ParameterMask bn = trainable_parameters(a, Regime::BNOnly);
  for (Parameter* p : a.parameters()) {
    if (!bn.contains(p->name) && !(p->value == b.parameter(p->name).value)) return false;
  }
  return true;
}

bool same_o_statistics(const Network& a, const Network& b) {
  const auto la = a.batch_norms(), lb = b.batch_norms();
  for (std::size_t i = 0; i < la.size(); ++i) {
    if (!la[i]->has_stats(Domain::O) || !lb[i]->has_stats(Domain::O)) return false;
    if (!(la[i]->stats(Domain::O) == lb[i]->stats(Domain::O))) return false;
  }
  return true;
}

std::vector<Check> run_oracles(std::uint64_t seed) {
  std::vector<Check> out;
  auto add = [&](bool ok, const std::string& what) {
    Check c;
    c.require(ok, what);
    out.push_back(c);
  };
  const auto fd = checks::autodiff_vs_finite_differences(seed, 100);
  add(fd.value < 1e-3, "autodiff vs finite differences worst " + std::to_string(fd.value));
  const auto conv = checks::conv_vs_naive(seed, 100);
  add(conv.value <= 1e-5, "conv2d vs direct loop worst " + std::to_string(conv.value));
  const std::vector<int> t{0, 1, 2, 3}, p{3, 2, 1, 0};
  const double k = linear_weighted_kappa(t, p).kappa;
  add(std::abs(k + 0.6) <= 1e-12, "reversed-label kappa " + std::to_string(k));
  const auto wil = checks::wilcoxon_vs_enumeration(seed, 1000);
  add(wil.value <= 1e-12, "exact Wilcoxon vs enumeration worst " + std::to_string(wil.value));
  const auto ewc = checks::ewc_properties(seed);
  add(ewc.anchor_penalty == 0.0, "penalty at anchor " + std::to_string(ewc.anchor_penalty));
  add(ewc.linearity_gap == 0.0, "penalty linearity gap " + std::to_string(ewc.linearity_gap));
  add(ewc.gradient_error < 1e-3, "penalty gradient error " + std::to_string(ewc.gradient_error));
  add(ewc.min_fisher >= 0.0, "minimum Fisher entry " + std::to_string(ewc.min_fisher));
  const auto adam = checks::adam_first_step(seed, 200);
  add(adam.value < 0.01, "Adam first step relative error " + std::to_string(adam.value));
  const std::uint32_t full12[] = {4095}, full14[] = {16383}, zero[] = {0};
  add(bit_depth_normalize(full12, 12)[0] == 1.0f && bit_depth_normalize(full14, 14)[0] == 1.0f &&
          bit_depth_normalize(zero, 12)[0] == 0.0f && bit_depth_normalize(zero, 14)[0] == 0.0f,
      "bit-depth fixed points");
  return out;
}

SeedRun run_seed(std::uint64_t seed, const fs::path& scratch) {
  SeedRun r;
  r.seed = seed;
  TrainConfig cfg;
  cfg.seed = seed;

  // Calibration: O does not depend on s, so one O model serves every shift.
  const auto t_cal = Clock::now();
  TrainedModel base = train_original(SplitSets::from(make_domain_pair(kShiftGrid[0], kPatientsO, kPatientsT, seed)), cfg);
  r.timed(base.report, "O_only");
  r.o_only_o = base.report.kappa_o;
  say("seed %llu: O_only kappa_O %.4f (%.1fs)\n", static_cast<unsigned long long>(seed), r.o_only_o,
      base.report.seconds);
  // s* is the admissible shift whose gap is nearest the target; without an
  // admissible one, the shift nearest the target overall.
  double best_miss = 1e9, any_miss = 1e9, nearest = kShiftGrid[0];
  for (double s : kShiftGrid) {
    const DomainPair pair = make_domain_pair(s, kPatientsO, kPatientsT, seed);
    const double kt = evaluate(base.network, labeled_set(pair.t, Split::Test), StatSource::current_batch(Domain::O)).kappa;
    const double gap = r.o_only_o - kt;
    const double miss = std::abs(gap - kTargetGap);
    say("  s=%.2f kappa_T %.4f gap %.4f\n", s, kt, gap);
    if (r.o_only_o >= 0.60 && gap >= 0.08 && gap <= 0.20 && miss < best_miss) {
      r.s_star = s;
      r.calibrated = true;
      best_miss = miss;
    }
    if (miss < any_miss) nearest = s, any_miss = miss;
  }
  if (!r.calibrated) r.s_star = nearest;
  r.calibration_seconds = since(t_cal);
  say("  s* = %.2f (%s, %.1fs)\n", r.s_star, r.calibrated ? "admissible" : "none admissible", r.calibration_seconds);

  const SplitSets data = SplitSets::from(make_domain_pair(r.s_star, kPatientsO, kPatientsT, seed));
  r.o_only_t = evaluate(base.network, data.t_test, StatSource::current_batch(Domain::O)).kappa;

  auto show = [&](const char* name, const RunReport& rep) {
    say("  %-22s kappa_O %.4f kappa_T %.4f p_O %.3g epochs %zu (%.1fs)\n", name, rep.kappa_o, rep.kappa_t,
        rep.p_o_vs_pre.value_or(-1.0), rep.epochs_ran(), rep.seconds);
    r.timed(rep, name);
  };

  TrainedModel naive = finetune(base.network, data, Regime::AllLayers, StatSource::current_batch(Domain::T), 0.0, cfg);
  r.naive = naive.report;
  show("O_then_T_naive", r.naive);

  TrainedModel joint = train_joint(data, cfg);
  r.joint = joint.report;
  show("joint_OT", r.joint);

  r.bn_cbt = finetune(base.network, data, Regime::BNOnly, StatSource::current_batch(Domain::T), 0.0, cfg).report;
  show("BNOnly batch:T", r.bn_cbt);

  Network fisher_net = base.network;
  EwcState ewc{snapshot_parameters(base.network),
               estimate_fisher(fisher_net, data.o_train.images, data.o_train.labels, cfg.fisher_samples, seed),
               cfg.fisher_samples};

  Check frozen_masks, frozen_stats;
  const StatSource fg = StatSource::frozen_global(Domain::O);
  for (Regime regime : {Regime::AllLayers, Regime::BNOnly}) {
    auto& reports = regime == Regime::AllLayers ? r.al : r.bn;
    for (double lambda : default_lambda_grid(regime)) {
      TrainedModel m = finetune(base.network, data, regime, fg, lambda, cfg, lambda > 0.0 ? &ewc : nullptr);
      char name[48];
      std::snprintf(name, sizeof name, "%s frozen:O l=%g", regime == Regime::AllLayers ? "AL" : "BN", lambda);
      show(name, m.report);
      reports.push_back(m.report);
      frozen_stats.require(same_o_statistics(m.network, base.network), std::string(name) + " changed O statistics");
      if (regime == Regime::BNOnly) {
        frozen_masks.require(same_non_bn_parameters(m.network, base.network),
                             std::string(name) + " changed a non-BN parameter");
      }
    }
  }

  // Determinism and persistence.
  Check reports;
  TrainedModel again = finetune(base.network, data, Regime::AllLayers, StatSource::current_batch(Domain::T), 0.0, cfg);
  reports.require(io::report_csv(again.report) == io::report_csv(r.naive) &&
                      io::report_meta(again.report, cfg).dump() == io::report_meta(r.naive, cfg).dump(),
                  "repeated O_then_T_naive report differs");

  Check round_trip;
  const fs::path dir = scratch / ("seed" + std::to_string(seed));
  io::save_checkpoint(dir, io::Checkpoint{base.network, ewc, io::config_to_json(cfg)});
  io::Checkpoint loaded = io::load_checkpoint(dir);
  for (const LabeledSet* s : {&data.o_test, &data.t_test}) {
    const double before = evaluate(base.network, *s, StatSource::current_batch(Domain::O)).kappa;
    const double after = evaluate(loaded.network, *s, StatSource::current_batch(Domain::O)).kappa;
    round_trip.require(std::abs(before - after) <= 1e-6, "checkpoint eval " + num(before) + " vs " + num(after));
  }
  fs::remove_all(dir);
  r.determinism = {reports, round_trip, frozen_masks, frozen_stats};

  r.oracles = run_oracles(seed);
  return r;
}

/// Index of the lambda with the highest kappa_O + kappa_T; first on ties.
std::size_t best_lambda(const std::vector<RunReport>& rows) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].kappa_o + rows[i].kappa_t > rows[best].kappa_o + rows[best].kappa_t) best = i;
  }
  return best;
}

struct Verdict {
  int id;
  std::string name;
  bool pass;
  std::string detail;
};

}  // namespace

int main() {
  tune_allocator();
  const auto t0 = Clock::now();
  const fs::path scratch = fs::temp_directory_path() / ("domex_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(scratch);

  std::vector<SeedRun> runs;
  for (std::uint64_t seed : kSeeds) runs.push_back(run_seed(seed, scratch));
  fs::remove_all(scratch);
  const double total = since(t0);

  // Per-seed checks for the claims that need two of three seeds.
  auto majority = [&](auto per_seed) {
    int passed = 0;
    std::string detail;
    for (const SeedRun& r : runs) {
      const Check c = per_seed(r);
      passed += c.pass ? 1 : 0;
      detail += " | seed " + std::to_string(r.seed) + ": " + (c.pass ? "ok" : c.detail);
    }
    return std::pair<bool, std::string>{passed >= 2, std::to_string(passed) + "/3 seeds" + detail};
  };

  std::vector<Verdict> verdicts;
  auto record = [&](int id, std::string name, std::pair<bool, std::string> v) {
    verdicts.push_back({id, std::move(name), v.first, std::move(v.second)});
  };

  record(1, "shift calibration", majority([](const SeedRun& r) {
           Check c;
           c.require(r.calibrated, "no shift with kappa_O >= 0.60 and gap in [0.08, 0.20]");
           c.require(r.calibration_seconds <= 15 * 60, "calibration took " + num(r.calibration_seconds) + "s");
           if (c.pass) c.detail = "s*=" + num(r.s_star);
           return c;
         }));

  {
    auto v = majority([](const SeedRun& r) {
      Check c;
      const double drop = *r.naive.pre_kappa_o - r.naive.kappa_o;
      c.require(drop >= 0.15, "kappa_O drop " + num(drop));
      c.require(*r.naive.p_o_vs_pre < 0.05, "p " + std::to_string(*r.naive.p_o_vs_pre));
      c.require(std::abs(r.naive.kappa_t - r.joint.kappa_t) <= 0.05,
                "naive kappa_T " + num(r.naive.kappa_t) + " vs joint " + num(r.joint.kappa_t));
      return c;
    });
    for (const SeedRun& r : runs) {
      if (!(r.naive.kappa_o < *r.naive.pre_kappa_o)) {
        v.first = false;
        v.second += " | seed " + std::to_string(r.seed) + ": kappa_O did not drop";
      }
    }
    record(2, "catastrophic forgetting under naive fine-tuning", v);
  }

  record(3, "joint training reference", majority([](const SeedRun& r) {
           Check c;
           c.require(r.joint.kappa_o >= r.o_only_o - 0.03,
                     "joint kappa_O " + num(r.joint.kappa_o) + " vs O_only " + num(r.o_only_o));
           c.require(r.joint.kappa_t >= r.o_only_t + 0.05,
                     "joint kappa_T " + num(r.joint.kappa_t) + " vs O_only " + num(r.o_only_t));
           return c;
         }));

  record(4, "frozen O statistics recover O under BNOnly", majority([](const SeedRun& r) {
           Check c;
           const RunReport& fg = r.bn.front();
           c.require(fg.kappa_o >= r.bn_cbt.kappa_o + 0.05,
                     "frozen:O kappa_O " + num(fg.kappa_o) + " vs batch:T " + num(r.bn_cbt.kappa_o));
           c.require(fg.kappa_t >= *fg.pre_kappa_t + 0.02,
                     "kappa_T " + num(fg.kappa_t) + " vs pre " + num(*fg.pre_kappa_t));
           return c;
         }));

  record(5, "EWC lambda sweep, all layers", majority([](const SeedRun& r) {
           Check c;
           const RunReport& zero = r.al.front();
           const RunReport& top = r.al.back();
           c.require(std::abs(top.kappa_o - r.o_only_o) <= 0.03,
                     "lambda=1e5 kappa_O " + num(top.kappa_o) + " vs O_only " + num(r.o_only_o));
           c.require(top.kappa_t <= zero.kappa_t - 0.10,
                     "lambda=1e5 kappa_T " + num(top.kappa_t) + " vs lambda=0 " + num(zero.kappa_t));
           bool middle = false;
           for (std::size_t i = 1; i + 1 < r.al.size(); ++i) {
             middle = middle || (r.al[i].kappa_o >= r.o_only_o - 0.05 && r.al[i].kappa_t >= zero.kappa_t - 0.05);
           }
           c.require(middle, "no intermediate lambda keeps both domains");
           return c;
         }));

  record(6, "all layers vs BNOnly at best lambda", majority([](const SeedRun& r) {
           Check c;
           const RunReport& al = r.al[best_lambda(r.al)];
           const RunReport& bn = r.bn[best_lambda(r.bn)];
           c.require(al.kappa_t > bn.kappa_t, "kappa_T AL " + num(al.kappa_t) + " vs BN " + num(bn.kappa_t));
           c.require(bn.kappa_o >= al.kappa_o, "kappa_O BN(l=" + io::format_number(bn.lambda) + ") " +
                                                   num(bn.kappa_o) + " vs AL(l=" + io::format_number(al.lambda) +
                                                   ") " + num(al.kappa_o));
           return c;
         }));

  auto every_seed = [&](auto pick) {
    bool pass = true;
    std::string detail;
    for (const SeedRun& r : runs) {
      for (const Check& c : pick(r)) {
        if (!c.pass) pass = false, detail += " | seed " + std::to_string(r.seed) + ": " + c.detail;
      }
    }
    return std::pair<bool, std::string>{pass, pass ? "every seed" : detail};
  };
  record(7, "numerical oracles", every_seed([](const SeedRun& r) { return r.oracles; }));
  record(8, "determinism and persistence", every_seed([](const SeedRun& r) { return r.determinism; }));

  {
    Check c;
    for (const SeedRun& r : runs) {
      c.require(r.longest_run <= 180.0,
                "seed " + std::to_string(r.seed) + " " + r.longest_name + " took " + num(r.longest_run) + "s");
    }
    c.require(total <= 45 * 60, "total " + num(total) + "s");
    double longest = 0.0;
    for (const SeedRun& r : runs) longest = std::max(longest, r.longest_run);
    record(9, "runtime", {c.pass, "longest run " + num(longest) + "s, total " + num(total) + "s" +
                                      (c.pass ? "" : " | " + c.detail)});
  }

  bool all = true;
  std::printf("\n");
  for (const Verdict& v : verdicts) {
    std::printf("%s criterion %d (%s): %s\n", v.pass ? "PASS" : "FAIL", v.id, v.name.c_str(), v.detail.c_str());
    all = all && v.pass;
  }
  return all ? 0 : 1;
}
