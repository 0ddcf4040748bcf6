#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fgc/error.hpp"
#include "fgc/harness.hpp"

namespace fgc::harness {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("fgc_test_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

// Small enough to train in well under a second per epoch.
RunConfig tiny_config() {
  RunConfig c = default_config();
  c.dataset.synth.per_class = 40;
  c.dataset.test_per_class = 20;
  c.batch_size = 32;
  c.epochs = 2;
  c.fgc.k = 10;
  c.seed = 5;
  return c;
}

std::vector<json> run_records(const RunConfig& config, const Datasets& ds) {
  Trainer t(config, ds.train, &*ds.test);
  std::vector<json> out;
  train(t, [&](const json& r) { out.push_back(r); });
  return out;
}

// ---- configuration -------------------------------------------------------

TEST(Config, DefaultsAndFinalize) {
  RunConfig c = default_config();
  EXPECT_EQ(c.fgc.k, 200u);
  EXPECT_EQ(c.fgc.eta, 0.003);
  EXPECT_EQ(c.fgc.tau, 0.07);
  EXPECT_EQ(c.fgc.bank_momentum, 0.5);
  EXPECT_EQ(c.network.gate_bias_init, 2.0);
  c.finalize();
  c.validate();
  // Three gated layers: the deepest third couples.
  EXPECT_EQ(c.network.gated_layers().size(), 3u);
  EXPECT_EQ(c.network.fgc_layers(), std::vector<std::size_t>{3});
  EXPECT_EQ(c.shared_source_layer(), 3u);
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
  RunConfig c = tiny_config();
  c.fgc.neighbor_source = coupling::NeighborSource::label;
  c.optimizer.milestones = {5, 8};
  const json j = to_json(c);
  const RunConfig back = config_from_json(j);
  EXPECT_EQ(to_json(back), j);
  json bad = j;
  bad["fgc"]["kk"] = 3;
  EXPECT_THROW(config_from_json(bad), ConfigError);
  bad = j;
  bad["fgc"]["k"] = "many";
  EXPECT_THROW(config_from_json(bad), ConfigError);
  bad = j;
  bad["fgc"]["neighbor_source"] = "random";
  EXPECT_THROW(config_from_json(bad), ConfigError);
}

TEST(Config, HashIgnoresEpochBudgetOnly) {
  RunConfig a = tiny_config(), b = tiny_config();
  b.epochs = 50;
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.fgc.eta = 0.004;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, ValidationErrors) {
  RunConfig c = tiny_config();
  c.fgc.layers = {0};
  EXPECT_THROW(c.finalize(), ConfigError);
  c = tiny_config();
  c.fgc.tau = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.rho = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.dataset.synth.classes = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.batch_size = 53;  // 160 = 3 * 53 + 1
  const Datasets ds = load_datasets(c);
  EXPECT_THROW(c.validate_against(ds.train), ConfigError);
  c.batch_size = 161;
  EXPECT_THROW(c.validate_against(ds.train), ConfigError);
}

TEST(Toml, ParsesSupportedSyntax) {
  const std::string text = R"(
# run
seed = 3
rho = 0.25
name = "x # not a comment"
path = 'C:\raw'
flag = true
neg = -4
exp = 1e-3
list = [1, 2,
        3]  # trailing

[fgc]
k = 20
inline = { a = 1, b = "two" }
dotted.key = 7

[[network.layers]]
out_channels = 8

[[network.layers]]
out_channels = 16
gated = true
)";
  const json j = parse_toml(text);
  EXPECT_EQ(j.at("seed"), 3);
  EXPECT_EQ(j.at("rho"), 0.25);
  EXPECT_EQ(j.at("name"), "x # not a comment");
  EXPECT_EQ(j.at("path"), "C:\\raw");
  EXPECT_EQ(j.at("flag"), true);
  EXPECT_EQ(j.at("neg"), -4);
  EXPECT_EQ(j.at("exp"), 1e-3);
  EXPECT_EQ(j.at("list"), json({1, 2, 3}));
  EXPECT_EQ(j.at("fgc").at("k"), 20);
  EXPECT_EQ(j.at("fgc").at("inline").at("b"), "two");
  EXPECT_EQ(j.at("fgc").at("dotted").at("key"), 7);
  ASSERT_EQ(j.at("network").at("layers").size(), 2u);
  EXPECT_EQ(j.at("network").at("layers")[1].at("gated"), true);
}

TEST(Toml, ErrorsNameSourceAndLine) {
  for (const std::string bad : {"a = 1\nb = \n", "a = 1\na = 2\n", "[x\n", "a = \"open\n",
                                "a = [1, 2\n"}) {
    try {
      parse_toml(bad, "cfg.toml");
      FAIL() << "accepted: " << bad;
    } catch (const ParseError& e) {
      EXPECT_NE(std::string(e.what()).find("cfg.toml:"), std::string::npos) << e.what();
    }
  }
}

TEST(Config, LoadsTomlAndJsonFiles) {
  const fs::path dir = scratch_dir("config_files");
  write_text(dir / "run.toml", "epochs = 3\nrho = 0.1\n[fgc]\nk = 12\neta = 0.0\n");
  const RunConfig t = load_config(dir / "run.toml");
  EXPECT_EQ(t.epochs, 3u);
  EXPECT_EQ(t.rho, 0.1);
  EXPECT_EQ(t.fgc.k, 12u);
  write_text(dir / "run.json", R"({"epochs": 4, "fgc": {"neighbor_source": "gate"}})");
  const RunConfig j = load_config(dir / "run.json");
  EXPECT_EQ(j.epochs, 4u);
  EXPECT_EQ(j.fgc.neighbor_source, coupling::NeighborSource::gate);
  try {
    load_config(dir / "missing.toml");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("missing.toml"), std::string::npos);
  }
  write_text(dir / "run.yaml", "epochs: 3\n");
  EXPECT_THROW(load_config(dir / "run.yaml"), ConfigError);
}

// ---- checkpoints ---------------------------------------------------------

TEST(Checkpoint, SerializeRoundTrip) {
  const RunConfig c = tiny_config();
  const Datasets ds = load_datasets(c);
  Trainer t(c, ds.train, nullptr);
  t.run_epoch();
  const Checkpoint a = t.checkpoint();
  const Checkpoint b = deserialize(serialize(a));
  EXPECT_EQ(b.epoch, 1u);
  EXPECT_EQ(b.config_hash, a.config_hash);
  EXPECT_EQ(b.rng_state, a.rng_state);
  EXPECT_EQ(to_json(b.config), to_json(a.config));
  ASSERT_EQ(b.tensors.size(), a.tensors.size());
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    EXPECT_EQ(b.tensors[i].first, a.tensors[i].first);
    EXPECT_EQ(b.tensors[i].second.shape(), a.tensors[i].second.shape());
    EXPECT_TRUE(std::equal(a.tensors[i].second.data().begin(), a.tensors[i].second.data().end(),
                           b.tensors[i].second.data().begin()));
  }
  EXPECT_EQ(serialize(b), serialize(a));
  EXPECT_NO_THROW(b.tensor("fgc.3.feature_bank"));
  EXPECT_THROW(b.tensor("nope"), ContractError);
}

TEST(Checkpoint, RejectsCorruptInput) {
  const RunConfig c = tiny_config();
  const Datasets ds = load_datasets(c);
  Trainer t(c, ds.train, nullptr);
  const std::string bytes = serialize(t.checkpoint());
  EXPECT_THROW(deserialize(bytes.substr(0, bytes.size() - 8)), ParseError);
  EXPECT_THROW(deserialize("NOTACKPT" + bytes.substr(8)), ParseError);
  std::string version = bytes;
  version[8] = 9;
  EXPECT_THROW(deserialize(version), ParseError);
  EXPECT_THROW(deserialize(bytes.substr(0, 10)), ParseError);
  EXPECT_THROW(load_checkpoint(scratch_dir("ckpt") / "absent.bin"), Error);
}

// ---- training --------------------------------------------------------------

TEST(Trainer, SameSeedGivesBitIdenticalLogs) {
  const RunConfig c = tiny_config();
  const Datasets ds = load_datasets(c);
  const auto a = run_records(c, ds), b = run_records(c, ds);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(json(a).dump(), json(b).dump());
  RunConfig other = c;
  other.seed = 6;
  EXPECT_NE(json(run_records(other, ds)).dump(), json(a).dump());
}

TEST(Trainer, ResumeEqualsUninterruptedRun) {
  RunConfig c = tiny_config();
  c.epochs = 3;
  const Datasets ds = load_datasets(c);
  const auto full = run_records(c, ds);

  RunConfig first = c;
  first.epochs = 1;
  Trainer t1(first, ds.train, &*ds.test);
  t1.run_epoch();
  const fs::path path = scratch_dir("resume") / "ckpt.bin";
  save_checkpoint(t1.checkpoint(), path);

  const Checkpoint loaded = load_checkpoint(path);
  RunConfig rest = loaded.config;
  rest.epochs = 3;
  Trainer t2(rest, ds.train, &*ds.test);
  t2.restore(loaded);
  std::vector<json> resumed;
  train(t2, [&](const json& r) { resumed.push_back(r); });
  ASSERT_EQ(resumed.size(), 2u);
  EXPECT_EQ(resumed[0].dump(), full[1].dump());
  EXPECT_EQ(resumed[1].dump(), full[2].dump());
}

TEST(Trainer, RestoreRejectsOtherConfig) {
  const RunConfig c = tiny_config();
  const Datasets ds = load_datasets(c);
  Trainer a(c, ds.train, nullptr);
  RunConfig d = c;
  d.rho = 0.9;
  Trainer b(d, ds.train, nullptr);
  EXPECT_THROW(b.restore(a.checkpoint()), ContractError);
}

TEST(Trainer, ZeroEpochsCheckpointEqualsInit) {
  RunConfig c = tiny_config();
  c.epochs = 0;
  const Datasets ds = load_datasets(c);
  Trainer t(c, ds.train, nullptr);
  train(t, {});
  const Checkpoint ckpt = t.checkpoint();
  RunConfig finalized = c;
  finalized.finalize();
  const nn::GatedNetwork fresh(finalized.network, mix_seed(c.seed, 1));
  for (const NamedTensor& p : fresh.parameters()) {
    const Tensor& saved = ckpt.tensor(p.name);
    EXPECT_TRUE(std::equal(saved.data().begin(), saved.data().end(), p.tensor.data().begin()))
        << p.name;
  }
  const nn::GatedNetwork rebuilt = network_from(ckpt);
  EXPECT_EQ(ckpt.epoch, 0u);
  EXPECT_EQ(rebuilt.parameters().size(), fresh.parameters().size());
}

TEST(Trainer, LearnsWithoutRegularizers) {
  RunConfig c = tiny_config();
  c.dataset.synth.per_class = 100;
  c.dataset.test_per_class = 50;
  c.dataset.synth.contrast = 1.0;
  c.epochs = 8;
  c.fgc.eta = 0.0;
  c.rho = 0.0;
  const Datasets ds = load_datasets(c);
  const auto records = run_records(c, ds);
  const json& last = records.back();
  EXPECT_GT(last.at("eval").at("accuracy").get<double>(), 0.9);
  // Hard eval gates are not much worse than the stochastic training gates.
  const double train_error = 1.0 - last.at("train_accuracy").get<double>();
  EXPECT_LT(last.at("eval").at("error").get<double>(), train_error + 0.05);
  EXPECT_EQ(last.at("l0").size(), 3u);
  EXPECT_EQ(last.at("l_g").size(), 1u);  // logged even without its gradient
}

TEST(Trainer, ForcedOpenEvaluationPrunesNothing) {
  RunConfig c = tiny_config();
  c.rho = 2.0;
  c.epochs = 3;
  const Datasets ds = load_datasets(c);
  Trainer t(c, ds.train, nullptr);
  train(t, {});
  EXPECT_EQ(evaluate(t.network(), *ds.test, nn::GateOverride::force_open).pruning.pruning_ratio, 0.0);
  EXPECT_GT(evaluate(t.network(), *ds.test).pruning.pruning_ratio, 0.0);
}

TEST(Trainer, MiBoundsAreConsistent) {
  const RunConfig c = tiny_config();
  const Datasets ds = load_datasets(c);
  for (const json& r : run_records(c, ds)) {
    const json& mi = r.at("mi").at("3");
    const double log_n = std::log(160.0);
    EXPECT_DOUBLE_EQ(mi.at("log_n").get<double>(), log_n);
    EXPECT_LE(mi.at("bound_per_pair").get<double>(), log_n);
    EXPECT_LE(mi.at("step_max_bound_per_pair").get<double>(), log_n);
    EXPECT_NEAR(mi.at("bound_sum").get<double>(), log_n - r.at("l_g").at("3").get<double>(), 1e-12);
    EXPECT_NEAR(mi.at("bound_per_pair").get<double>(),
                log_n - r.at("l_g").at("3").get<double>() / 10.0, 1e-12);
  }
}

TEST(Trainer, NeighborSourcesAllRunAndDiffer) {
  RunConfig c = tiny_config();
  c.fgc.layers = {2, 3};
  const Datasets ds = load_datasets(c);
  std::vector<double> traces;
  for (const std::string source : {"feature", "feature_shared", "label", "gate"}) {
    c.fgc.neighbor_source = coupling::neighbor_source_from(source);
    const auto records = run_records(c, ds);
    traces.push_back(records.back().at("l_g").at("2").get<double>());
  }
  for (std::size_t i = 0; i < traces.size(); ++i) {
    for (std::size_t j = i + 1; j < traces.size(); ++j) EXPECT_NE(traces[i], traces[j]);
  }
}

TEST(Trainer, NumericFailureNamesComponent) {
  RunConfig c = tiny_config();
  c.optimizer.lr = 1e300;
  const Datasets ds = load_datasets(c);
  Trainer t(c, ds.train, nullptr);
  try {
    t.run_epoch();
    FAIL() << "expected a numeric failure";
  } catch (const NumericError& e) {
    EXPECT_FALSE(std::string(e.what()).empty());
  }
}

// ---- analysis --------------------------------------------------------------

TEST(Analysis, ReportsAndInvariants) {
  const RunConfig c = tiny_config();
  const Datasets ds = load_datasets(c);
  Trainer t(c, ds.train, nullptr);
  train(t, {});
  const Checkpoint ckpt = t.checkpoint();
  const fs::path out = scratch_dir("analysis");
  const json report = analyze(ckpt, *ds.test, out);
  for (const char* f : {"nmi.json", "report.json", "frequency_layer3.csv", "gate_ranking_layer3.csv",
                        "embeddings_layer3_feature.csv", "embeddings_layer3_gate.csv",
                        "neighbors_layer3.csv", "frequency_layer1.csv"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  ASSERT_EQ(report.at("nmi").size(), 1u);
  for (const char* k : {"feature_label", "gate_label", "feature_gate"}) {
    const double v = report.at("nmi")[0].at(k).get<double>();
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }

  nn::GatedNetwork net = network_from(ckpt);
  const auto emb = collect_embeddings(net, *ds.test);
  ASSERT_EQ(emb.size(), 3u);
  // Self NMI of an embedding is exactly one when it is not collapsed.
  const double self = metrics::embedding_nmi(emb[2].features, emb[2].dim, emb[2].features,
                                             emb[2].dim, emb[2].instances, 4, 1);
  EXPECT_NEAR(self, 1.0, 1e-12);
  for (std::size_t q : {0u, 17u, 79u}) {
    const auto ranked = gate_similarity_ranking(emb[2], q);
    EXPECT_EQ(ranked.front().first, q);
    EXPECT_EQ(ranked.size(), emb[2].instances);
    for (std::size_t i = 2; i < ranked.size(); ++i) EXPECT_GE(ranked[i - 1].second, ranked[i].second);
  }
  EXPECT_THROW(gate_similarity_ranking(emb[2], 80), ContractError);

  std::istringstream freq(read_text(out / "frequency_layer3.csv"));
  std::string line;
  std::getline(freq, line);
  EXPECT_EQ(line, "channel,class_0,class_1,class_2,class_3");
  while (std::getline(freq, line)) {
    std::istringstream cells(line);
    std::string cell;
    std::getline(cells, cell, ',');
    while (std::getline(cells, cell, ',')) {
      const double v = std::stod(cell);
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

// ---- command line ---------------------------------------------------------

struct CliResult {
  int code = -1;
  std::string out, err;
};

CliResult cli(const std::string& args, const fs::path& dir) {
  const char* exe = std::getenv("FGC_CLI");
  if (!exe) return {};
  const std::string cmd = std::string(exe) + " " + args + " > " + (dir / "stdout").string() +
                          " 2> " + (dir / "stderr").string();
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_text(dir / "stdout");
  r.err = read_text(dir / "stderr");
  return r;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    if (!std::getenv("FGC_CLI")) GTEST_SKIP() << "FGC_CLI is not set";
    dir_ = scratch_dir(::testing::UnitTest::GetInstance()->current_test_info()->name());
    write_text(dir_ / "run.toml",
               "epochs = 2\nbatch_size = 32\nseed = 4\n[fgc]\nk = 10\n"
               "[dataset]\nper_class = 40\ntest_per_class = 20\n");
  }
  fs::path dir_;
};

TEST_F(Cli, HelpExitsZeroForEverySubcommand) {
  for (const std::string sub : {"", "train ", "eval ", "analyze ", "export-dataset "}) {
    const CliResult r = cli(sub + "--help", dir_);
    EXPECT_EQ(r.code, 0) << sub;
    EXPECT_NE(r.out.find("Usage"), std::string::npos) << sub;
  }
}

TEST_F(Cli, UnknownFlagPrintsUsageAndExitsOne) {
  const CliResult r = cli("train --bogus 3", dir_);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("Usage"), std::string::npos) << r.err;
}

TEST_F(Cli, MissingConfigNamesPath) {
  const CliResult r = cli("train --config " + (dir_ / "missing.toml").string(), dir_);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("missing.toml"), std::string::npos) << r.err;
}

TEST_F(Cli, NumericFailureExitsTwo) {
  const CliResult r = cli("train --config " + (dir_ / "run.toml").string() + " --lr 1e300 --out " +
                              (dir_ / "run").string(),
                          dir_);
  EXPECT_EQ(r.code, 2) << r.err;
  EXPECT_NE(r.err.find("numeric failure"), std::string::npos) << r.err;
}

TEST_F(Cli, TrainEvalAnalyzeExport) {
  const std::string cfg = (dir_ / "run.toml").string();
  ASSERT_EQ(cli("train --config " + cfg + " --out " + (dir_ / "a").string(), dir_).code, 0);
  ASSERT_TRUE(fs::exists(dir_ / "a" / "checkpoint.bin"));
  ASSERT_TRUE(fs::exists(dir_ / "a" / "config.json"));
  const std::string ckpt = (dir_ / "a" / "checkpoint.bin").string();

  CliResult r = cli("eval --checkpoint " + ckpt, dir_);
  ASSERT_EQ(r.code, 0) << r.err;
  const json ev = json::parse(r.out);
  EXPECT_EQ(ev.at("epoch"), 2);
  EXPECT_TRUE(ev.at("flops").contains("pruning_ratio"));

  r = cli("eval --force-open --split train --checkpoint " + ckpt, dir_);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out).at("metrics").at("pruning_ratio"), 0.0);

  r = cli("analyze --checkpoint " + ckpt + " --out " + (dir_ / "report").string(), dir_);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "report" / "nmi.json"));

  r = cli("export-dataset --config " + cfg + " --out " + (dir_ / "idx").string(), dir_);
  ASSERT_EQ(r.code, 0) << r.err;
  const data::Dataset back = data::read_idx(dir_ / "idx" / "train-images.idx3-ubyte",
                                            dir_ / "idx" / "train-labels.idx1-ubyte");
  EXPECT_EQ(back.size(), 160u);

  EXPECT_EQ(cli("eval --checkpoint " + (dir_ / "nothing.bin").string(), dir_).code, 1);
}

TEST_F(Cli, RunsAreReproducibleAndResumable) {
  const std::string cfg = (dir_ / "run.toml").string();
  ASSERT_EQ(cli("train --config " + cfg + " --epochs 3 --out " + (dir_ / "a").string(), dir_).code, 0);
  ASSERT_EQ(cli("train --config " + cfg + " --epochs 3 --out " + (dir_ / "b").string(), dir_).code, 0);
  EXPECT_EQ(read_text(dir_ / "a" / "log.ndjson"), read_text(dir_ / "b" / "log.ndjson"));

  ASSERT_EQ(cli("train --config " + cfg + " --epochs 1 --out " + (dir_ / "c").string(), dir_).code, 0);
  const CliResult r = cli("train --resume " + (dir_ / "c" / "checkpoint.bin").string() +
                              " --epochs 3 --out " + (dir_ / "c").string(),
                          dir_);
  ASSERT_EQ(r.code, 0) << r.err;
  auto epochs = [](const std::string& log) {
    std::vector<std::string> out;
    std::istringstream in(log);
    std::string line;
    while (std::getline(in, line)) {
      if (json::parse(line).at("event") == "epoch") out.push_back(line);
    }
    return out;
  };
  EXPECT_EQ(epochs(read_text(dir_ / "c" / "log.ndjson")), epochs(read_text(dir_ / "a" / "log.ndjson")));
  EXPECT_EQ(read_text(dir_ / "c" / "checkpoint.bin"), read_text(dir_ / "a" / "checkpoint.bin"));
}

TEST_F(Cli, OverridesAndSetFlag) {
  const CliResult r = cli("train --config " + (dir_ / "run.toml").string() +
                              " --epochs 0 --neighbor-source gate --set fgc.tau=0.1 --set "
                              "dataset.geometry=rings --out " + (dir_ / "o").string(),
                          dir_);
  ASSERT_EQ(r.code, 0) << r.err;
  const json cfg = json::parse(read_text(dir_ / "o" / "config.json"));
  EXPECT_EQ(cfg.at("fgc").at("neighbor_source"), "gate");
  EXPECT_EQ(cfg.at("fgc").at("tau"), 0.1);
  EXPECT_EQ(cfg.at("dataset").at("geometry"), "rings");
  EXPECT_EQ(cli("train --set nokey=1 --epochs 0 --out " + (dir_ / "p").string(), dir_).code, 1);
}

}  // namespace
}  // namespace fgc::harness
