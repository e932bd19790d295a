#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "domex/cli/app.hpp"
#include "domex/io/checkpoint.hpp"
#include "domex/io/dataset_io.hpp"
#include "domex/io/files.hpp"
#include "domex/io/report.hpp"

using namespace domex;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() / ("domex_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "domex");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::string field(const std::string& line, std::size_t k) {
  std::istringstream in(line);
  std::string f;
  for (std::size_t i = 0; i <= k; ++i) std::getline(in, f, ',');
  return f;
}

const std::vector<std::string> kQuick = {"--seed", "5", "--max-epochs", "2", "--patience", "2", "--fisher-samples", "40"};

std::vector<std::string> with_quick(std::vector<std::string> a) {
  a.insert(a.begin(), kQuick.begin(), kQuick.end());
  return a;
}

// One generated dataset and O checkpoint shared by the CLI tests.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir();
    data_ = (*dir_ / "data").string();
    base_ = (*dir_ / "base").string();
    ASSERT_EQ(run_cli(with_quick({"generate", "--shift", "0.5", "--patients-o", "120", "--patients-t", "60", "--out", data_})).code, 0);
    ASSERT_EQ(run_cli(with_quick({"train", "--dataset", data_, "--construct", "O_only", "--ewc", "--out", base_})).code, 0);
  }
  static void TearDownTestSuite() { delete dir_; }

  static TempDir* dir_;
  static std::string data_;
  static std::string base_;
};

TempDir* CliTest::dir_ = nullptr;
std::string CliTest::data_;
std::string CliTest::base_;

}  // namespace

TEST(Files, AtomicWriteNeedsParent) {
  TempDir d;
  EXPECT_THROW(io::atomic_write(d / "missing/file.txt", "x"), IoError);
  io::atomic_write(d / "file.txt", "hello");
  EXPECT_EQ(io::read_file(d / "file.txt"), "hello");
  EXPECT_FALSE(fs::exists(d / "file.txt.tmp"));
  EXPECT_THROW(io::read_file(d / "nope"), IoError);
  EXPECT_THROW(io::ensure_directory(d / "a/b"), IoError);
}

TEST(Files, ChecksumAndByteCodec) {
  EXPECT_EQ(io::fnv1a(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(io::fnv1a("a"), 0xaf63dc4c8601ec8cull);
  io::ByteWriter w;
  w.u32(0x01020304u);
  w.f32(-1.5f);
  EXPECT_EQ(w.bytes().substr(0, 4), std::string("\x04\x03\x02\x01", 4));
  io::ByteReader r(w.bytes(), "test");
  EXPECT_EQ(r.u32(), 0x01020304u);
  EXPECT_EQ(r.f32(), -1.5f);
  EXPECT_THROW(r.u32(), IoError);
}

TEST(DatasetIo, RoundTripAndDeterminism) {
  TempDir d;
  const DomainPair pair = make_domain_pair(0.3, 40, 20, 9);
  io::save_dataset(d / "a", pair);
  io::save_dataset(d / "b", make_domain_pair(0.3, 40, 20, 9));
  EXPECT_EQ(io::load_dataset(d / "a"), pair);
  for (const char* f : {"images.f32", "records.bin", "manifest.json"}) {
    EXPECT_EQ(io::read_file(d / "a" / f), io::read_file(d / "b" / f)) << f;
  }
}

TEST(DatasetIo, ZeroShiftEchoesCentroidGain) {
  TempDir d;
  io::save_dataset(d / "z", make_domain_pair(0.0, 20, 20, 1));
  const auto m = nlohmann::json::parse(io::read_file(d / "z" / "manifest.json"));
  EXPECT_EQ(m["domains"]["O"]["centroid_gain"].get<double>(), m["domains"]["T"]["centroid_gain"].get<double>());
}

TEST(DatasetIo, CorruptionIsIoError) {
  TempDir d;
  io::save_dataset(d / "c", make_domain_pair(0.3, 20, 20, 2));
  std::string blob = io::read_file(d / "c" / "images.f32");
  blob[100] ^= 0x40;
  io::atomic_write(d / "c" / "images.f32", blob);
  EXPECT_THROW(io::load_dataset(d / "c"), IoError);
  EXPECT_THROW(io::load_dataset(d / "absent"), IoError);
  io::atomic_write(d / "c" / "manifest.json", "{not json");
  EXPECT_THROW(io::load_dataset(d / "c"), IoError);
}

TEST(CheckpointIo, RoundTripIsBitIdentical) {
  TempDir d;
  const SplitSets data = SplitSets::from(make_domain_pair(0.3, 60, 30, 4));
  TrainConfig cfg;
  cfg.seed = 4;
  cfg.max_epochs = 1;
  TrainedModel m = train_original(data, cfg);
  io::Checkpoint ck{m.network, EwcState{}, io::config_to_json(cfg)};
  ck.ewc->anchor = snapshot_parameters(m.network);
  ck.ewc->fisher = estimate_fisher(m.network, data.o_train.images, data.o_train.labels, 10, 1);
  ck.ewc->fisher_samples = 10;
  io::save_checkpoint(d / "ck", ck);
  io::Checkpoint back = io::load_checkpoint(d / "ck");

  const auto src = StatSource::current_batch(Domain::O);
  for (const LabeledSet* s : {&data.o_train, &data.o_val, &data.o_test, &data.t_train, &data.t_val, &data.t_test}) {
    EXPECT_EQ(back.network.logits(s->images), m.network.logits(s->images));
    EXPECT_EQ(evaluate(back.network, *s, src).kappa, evaluate(m.network, *s, src).kappa);
  }
  ASSERT_TRUE(back.ewc.has_value());
  for (const auto& [name, t] : ck.ewc->fisher.values) EXPECT_EQ(back.ewc->fisher.values.at(name), t);
  for (const auto& [name, t] : ck.ewc->anchor.params) EXPECT_EQ(back.ewc->anchor.params.at(name), t);
  EXPECT_EQ(back.config, ck.config);
  EXPECT_EQ(back.network.bn_source(), m.network.bn_source());

  const std::string manifest_text = io::read_file(d / "ck" / "manifest.json");
  auto manifest = nlohmann::json::parse(manifest_text);
  manifest["fingerprint"] = "some-other-net";
  io::atomic_write(d / "ck" / "manifest.json", manifest.dump());
  EXPECT_THROW(io::load_checkpoint(d / "ck"), InputError);
  io::atomic_write(d / "ck" / "manifest.json", manifest_text);
  std::string blob = io::read_file(d / "ck" / "tensors.f32");
  blob[8] ^= 0x01;
  io::atomic_write(d / "ck" / "tensors.f32", blob);
  EXPECT_THROW(io::load_checkpoint(d / "ck"), IoError);
  io::atomic_write(d / "ck" / "tensors.f32", "short");
  EXPECT_THROW(io::load_checkpoint(d / "ck"), IoError);
}

TEST(Reports, CsvGolden) {
  RunReport r;
  r.construct = Construct::Finetune;
  r.epochs = {{1, 1.25, 0.5}, {2, 0.75, 0.625}, {3, 0.5, 0.5}};
  r.best_epoch = 2;
  r.kappa_o = 0.25;
  r.kappa_t = 0.875;
  r.pre_kappa_o = 0.5;
  r.pre_kappa_t = 0.125;
  r.p_o_vs_pre = 0.0625;
  const std::string golden =
      "row,epoch,train_loss,val_kappa,kappa_O,kappa_T,pre_kappa_O,pre_kappa_T,p_O_vs_pre,p_T_vs_pre\n"
      "epoch,1,1.25,0.5,,,,,,\n"
      "epoch,2,0.75,0.625,,,,,,\n"
      "epoch,3,0.5,0.5,,,,,,\n"
      "summary,2,,0.625,0.25,0.875,0.5,0.125,0.0625,\n";
  EXPECT_EQ(io::report_csv(r), golden);
  EXPECT_EQ(lines(golden).size() - 1, r.epochs_ran() + 1);
}

TEST(Reports, SweepCsvGolden) {
  SweepRow ok;
  ok.lambda = 0.05;
  ok.seed = 11;
  ok.regime = Regime::BNOnly;
  ok.bn_source = StatSource::frozen_global(Domain::O);
  ok.kappa_o = 0.5;
  ok.kappa_t = 0.75;
  ok.p_vs_baseline_o = 0.25;
  ok.epochs_ran = 7;
  SweepRow bad = ok;
  bad.lambda = 1;
  bad.error = "boom, twice\nagain";
  EXPECT_EQ(io::sweep_csv({ok, bad}),
            "lambda,seed,regime,bn_source,kappa_O,kappa_T,p_vs_baseline_O,epochs_ran,status\n"
            "0.05,11,bn_only,frozen:O,0.5,0.75,0.25,7,ok\n"
            "1,11,bn_only,frozen:O,,,,,failed: boom; twice again\n");
  EXPECT_EQ(io::sweep_plot_csv({ok, bad}), "lambda,mean_kappa_O,mean_kappa_T,runs\n0.05,0.5,0.75,1\n");
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run_cli({}).code, 1);
  EXPECT_EQ(run_cli({"--out", "x"}).code, 1);
  EXPECT_EQ(run_cli({"generate"}).code, 1);
  EXPECT_EQ(run_cli({"frobnicate", "--out", "x"}).code, 1);
  TempDir d;
  EXPECT_EQ(run_cli({"generate", "--shift", "2", "--out", (d / "g").string()}).code, 1);
  EXPECT_EQ(run_cli({"--help"}).code, 0);
}

TEST(Cli, GenerateMissingParentIsIoError) {
  TempDir d;
  EXPECT_EQ(run_cli({"generate", "--patients-o", "20", "--patients-t", "20", "--out", (d / "no/such").string()}).code, 2);
}

TEST(Cli, GenerateTwiceIsByteIdentical) {
  TempDir d;
  for (const char* name : {"a", "b"}) {
    ASSERT_EQ(run_cli({"--seed", "3", "generate", "--patients-o", "30", "--patients-t", "20", "--out", (d / name).string()}).code, 0);
  }
  for (const char* f : {"images.f32", "records.bin", "manifest.json"}) {
    EXPECT_EQ(io::read_file(d / "a" / f), io::read_file(d / "b" / f));
  }
}

TEST(Cli, ConfigFile) {
  TempDir d;
  {
    std::ofstream cfg(d / "run.toml");
    cfg << "seed = 3\nmax_epochs = 2\n";
  }
  EXPECT_EQ(run_cli({"--config", (d / "run.toml").string(), "generate", "--patients-o", "20", "--patients-t", "20", "--out",
                 (d / "g").string()})
                .code,
            0);
  EXPECT_EQ(nlohmann::json::parse(io::read_file(d / "g" / "manifest.json"))["seed"], 3);
  {
    std::ofstream cfg(d / "bad.toml");
    cfg << "sed = 3\n";
  }
  EXPECT_EQ(run_cli({"--config", (d / "bad.toml").string(), "generate", "--out", (d / "h").string()}).code, 1);
}

TEST_F(CliTest, TrainWritesReportCheckpointAndIsDeterministic) {
  const std::string csv = io::read_file(fs::path(base_) / "report.csv");
  const auto rows = lines(csv);
  const auto meta = nlohmann::json::parse(io::read_file(fs::path(base_) / "report.meta.json"));
  EXPECT_EQ(rows.size() - 1, meta["epochs_ran"].get<std::size_t>() + 1);
  EXPECT_TRUE(fs::exists(fs::path(base_) / "checkpoint" / "manifest.json"));
  const std::string again = (dir_->path() / "base2").string();
  ASSERT_EQ(run_cli(with_quick({"train", "--dataset", data_, "--construct", "O_only", "--out", again})).code, 0);
  EXPECT_EQ(io::read_file(fs::path(again) / "report.csv"), csv);
}

TEST_F(CliTest, EvalReproducesReportKappa) {
  const std::string out = (dir_->path() / "eval").string();
  ASSERT_EQ(run_cli({"eval", "--checkpoint", base_ + "/checkpoint", "--dataset", data_, "--domain", "O", "--split", "test",
                 "--out", out})
                .code,
            0);
  const auto metrics = nlohmann::json::parse(io::read_file(fs::path(out) / "metrics.json"));
  const auto meta = nlohmann::json::parse(io::read_file(fs::path(base_) / "report.meta.json"));
  EXPECT_NEAR(metrics["kappa"].get<double>(), meta["kappa_O"].get<double>(), 1e-6);
  std::uint64_t total = 0;
  for (const auto& row : metrics["confusion_matrix"])
    for (const auto& c : row) total += c.get<std::uint64_t>();
  EXPECT_EQ(total, metrics["n"].get<std::uint64_t>());
}

TEST_F(CliTest, JointReportCarriesBothKappas) {
  const std::string out = (dir_->path() / "joint").string();
  ASSERT_EQ(run_cli(with_quick({"train", "--dataset", data_, "--construct", "joint_OT", "--out", out})).code, 0);
  const auto rows = lines(io::read_file(fs::path(out) / "report.csv"));
  EXPECT_FALSE(field(rows.back(), 4).empty());
  EXPECT_FALSE(field(rows.back(), 5).empty());
  EXPECT_EQ(run_cli(with_quick({"train", "--dataset", data_, "--construct", "joint_OT", "--ewc", "--out", out + "x"})).code, 1);
}

TEST_F(CliTest, NaiveTrainEqualsFinetuneReport) {
  const std::string naive = (dir_->path() / "naive").string();
  const std::string ft = (dir_->path() / "ft_naive").string();
  ASSERT_EQ(run_cli(with_quick({"train", "--dataset", data_, "--construct", "O_then_T_naive", "--out", naive})).code, 0);
  ASSERT_EQ(run_cli(with_quick({"finetune", "--checkpoint", base_ + "/checkpoint", "--dataset", data_, "--regime",
                            "all_layers", "--bn-source", "batch:T", "--lambda", "0", "--out", ft}))
                .code,
            0);
  EXPECT_EQ(io::read_file(fs::path(naive) / "report.csv"), io::read_file(fs::path(ft) / "report.csv"));
}

TEST_F(CliTest, FinetuneErrors) {
  const std::string out = (dir_->path() / "ft_err").string();
  EXPECT_EQ(run_cli(with_quick({"finetune", "--checkpoint", base_ + "/checkpoint", "--dataset", data_, "--bn-source",
                            "frozen:T", "--out", out}))
                .code,
            1);
  const std::string plain = (dir_->path() / "base2").string();
  if (!fs::exists(fs::path(plain) / "checkpoint")) {
    ASSERT_EQ(run_cli(with_quick({"train", "--dataset", data_, "--construct", "O_only", "--out", plain})).code, 0);
  }
  EXPECT_EQ(run_cli({"--max-epochs", "1", "finetune", "--checkpoint", plain + "/checkpoint", "--dataset", data_,
                 "--lambda", "5", "--out", out})
                .code,
            1);
  EXPECT_EQ(run_cli({"--max-epochs", "1", "--fisher-samples", "20", "finetune", "--checkpoint", plain + "/checkpoint",
                 "--dataset", data_, "--lambda", "5", "--out", out})
                .code,
            0);
  EXPECT_EQ(run_cli(with_quick({"finetune", "--checkpoint", (dir_->path() / "nothing").string(), "--dataset", data_,
                            "--out", out}))
                .code,
            2);
}

TEST_F(CliTest, FinetuneReportSchema) {
  const std::string out = (dir_->path() / "ft_bn").string();
  ASSERT_EQ(run_cli(with_quick({"finetune", "--checkpoint", base_ + "/checkpoint", "--dataset", data_, "--regime",
                            "bn_only", "--lambda", "0.05", "--out", out}))
                .code,
            0);
  const auto rows = lines(io::read_file(fs::path(out) / "report.csv"));
  const auto meta = nlohmann::json::parse(io::read_file(fs::path(out) / "report.meta.json"));
  EXPECT_EQ(rows.size() - 1, meta["epochs_ran"].get<std::size_t>() + 1);
  EXPECT_EQ(rows.front(), io::kReportHeader);
  for (std::size_t k = 4; k <= 9; ++k) EXPECT_FALSE(field(rows.back(), k).empty()) << k;
}

TEST_F(CliTest, SweepSixRowsSorted) {
  const std::string out = (dir_->path() / "sweep").string();
  ASSERT_EQ(run_cli({"--max-epochs", "1", "--jobs", "2", "sweep", "--checkpoint", base_ + "/checkpoint", "--dataset", data_,
                 "--regime", "bn_only", "--lambdas", "0.1,0,0.05", "--seeds", "2,1", "--out", out})
                .code,
            0);
  const auto rows = lines(io::read_file(fs::path(out) / "sweep.csv"));
  ASSERT_EQ(rows.size(), 7u);
  EXPECT_EQ(rows[0], io::kSweepHeader);
  double last = -1.0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double l = std::stod(field(rows[i], 0));
    EXPECT_GE(l, last);
    last = l;
    EXPECT_EQ(field(rows[i], 8), "ok");
  }
  const auto plot = lines(io::read_file(fs::path(out) / "sweep_plot.csv"));
  EXPECT_EQ(plot.size(), 4u);
  EXPECT_EQ(run_cli({"sweep", "--checkpoint", base_ + "/checkpoint", "--dataset", data_, "--lambdas", "-1", "--out", out})
                .code,
            1);
}

TEST_F(CliTest, ExportFeaturesSchemaAndDeterminism) {
  const std::string a = (dir_->path() / "feat_a").string(), b = (dir_->path() / "feat_b").string();
  for (const auto& out : {a, b}) {
    ASSERT_EQ(run_cli({"export-features", "--checkpoint", base_ + "/checkpoint", "--dataset", data_, "--out", out}).code, 0);
  }
  const std::string features = io::read_file(fs::path(a) / "features.csv");
  EXPECT_EQ(features, io::read_file(fs::path(b) / "features.csv"));
  const auto rows = lines(features);
  const SplitSets data = SplitSets::from(io::load_dataset(data_));
  EXPECT_EQ(rows.size() - 1, data.o_test.size());
  const auto var = lines(io::read_file(fs::path(a) / "explained_variance.csv"));
  ASSERT_EQ(var.size(), 3u);
  EXPECT_LE(std::stod(field(var[1], 1)) + std::stod(field(var[2], 1)), 1.0 + 1e-12);
}

TEST_F(CliTest, EvalFingerprintMismatchIsUsageError) {
  const fs::path copy = dir_->path() / "tampered";
  fs::copy(fs::path(base_) / "checkpoint", copy, fs::copy_options::recursive);
  auto m = nlohmann::json::parse(io::read_file(copy / "manifest.json"));
  m["fingerprint"] = "other";
  io::atomic_write(copy / "manifest.json", m.dump());
  EXPECT_EQ(run_cli({"eval", "--checkpoint", copy.string(), "--dataset", data_, "--out", (dir_->path() / "e2").string()}).code,
            1);
}
