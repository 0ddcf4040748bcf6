// fgc: train, evaluate and analyze gated networks with feature-gate coupling.
#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "fgc/config.hpp"
#include "fgc/error.hpp"
#include "fgc/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fgc;
using namespace fgc::harness;

namespace {

constexpr int kOk = 0;
constexpr int kUserError = 1;
constexpr int kNumericFailure = 2;

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, batch_size, k;
  std::optional<double> eta, rho, tau, lr;
  std::optional<std::string> neighbor_source;
  std::vector<std::size_t> fgc_layers;
  std::vector<std::string> sets;  // dotted.key=json-value
};

void add_override_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--seed", o.seed, "Run seed");
  cmd->add_option("--epochs", o.epochs, "Number of training epochs");
  cmd->add_option("--batch-size", o.batch_size, "Mini-batch size");
  cmd->add_option("--k", o.k, "Neighbors per instance");
  cmd->add_option("--eta", o.eta, "Contrastive loss coefficient");
  cmd->add_option("--rho", o.rho, "L0 loss coefficient");
  cmd->add_option("--tau", o.tau, "Contrastive temperature");
  cmd->add_option("--lr", o.lr, "Initial learning rate");
  cmd->add_option("--neighbor-source", o.neighbor_source,
                  "feature | feature_shared | label | gate");
  cmd->add_option("--fgc-layers", o.fgc_layers, "Layer indices that receive coupling");
  cmd->add_option("--set", o.sets, "Override any config field, e.g. --set fgc.k=20");
}

json apply_overrides(json j, const Overrides& o) {
  auto at = [&](const char* section) -> json& {
    if (!j.contains(section)) j[section] = json::object();
    return j[section];
  };
  if (o.seed) j["seed"] = *o.seed;
  if (o.epochs) j["epochs"] = *o.epochs;
  if (o.batch_size) j["batch_size"] = *o.batch_size;
  if (o.rho) j["rho"] = *o.rho;
  if (o.k) at("fgc")["k"] = *o.k;
  if (o.eta) at("fgc")["eta"] = *o.eta;
  if (o.tau) at("fgc")["tau"] = *o.tau;
  if (o.neighbor_source) at("fgc")["neighbor_source"] = *o.neighbor_source;
  if (!o.fgc_layers.empty()) at("fgc")["layers"] = o.fgc_layers;
  if (o.lr) at("optimizer")["lr"] = *o.lr;
  for (const std::string& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
    json value;
    try {
      value = json::parse(s.substr(eq + 1));
    } catch (const json::parse_error&) {
      value = s.substr(eq + 1);  // bare strings need no quotes
    }
    std::string path = "/" + s.substr(0, eq);
    std::replace(path.begin(), path.end(), '.', '/');
    j[json::json_pointer(path)] = value;
  }
  return j;
}

RunConfig resolve_config(const std::string& config_path, const Overrides& o) {
  json j = config_path.empty() ? to_json(default_config()) : read_config_file(config_path);
  return config_from_json(apply_overrides(std::move(j), o));
}

class NdjsonLog {
 public:
  NdjsonLog(const fs::path& path, bool append)
      : out_(path, append ? std::ios::app : std::ios::trunc) {
    if (!out_) throw ConfigError("cannot open log " + path.string());
  }
  void write(const json& record) {
    out_ << record.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

const data::Dataset& pick_split(const Datasets& ds, const std::string& split) {
  if (split == "train") return ds.train;
  if (split == "test") {
    if (!ds.test) throw ConfigError("the configured dataset has no test split");
    return *ds.test;
  }
  throw ConfigError("--split must be train or test");
}

int run_train(const std::string& config_path, const Overrides& o, const fs::path& out,
              const std::string& resume) {
  RunConfig config;
  std::optional<Checkpoint> from;
  if (!resume.empty()) {
    from = load_checkpoint(resume);
    config = from->config;
    if (o.epochs) config.epochs = *o.epochs;
  } else {
    config = resolve_config(config_path, o);
  }
  config.validate();  // before any data is generated or loaded
  fs::create_directories(out);
  const Datasets ds = load_datasets(config);
  Trainer trainer(config, ds.train, ds.test ? &*ds.test : nullptr);
  NdjsonLog log(out / "log.ndjson", from.has_value());
  if (from) {
    trainer.restore(*from);
    log.write({{"event", "resume"}, {"epoch", trainer.epoch()}, {"checkpoint", resume}});
  } else {
    log.write({{"event", "start"},
               {"config", to_json(trainer.config())},
               {"config_hash", config_hash(trainer.config())},
               {"train_instances", ds.train.size()},
               {"eval_instances", ds.eval().size()}});
  }
  {
    std::ofstream cfg(out / "config.json");
    cfg << to_json(trainer.config()).dump(2) << '\n';
  }
  const fs::path ckpt_path = out / "checkpoint.bin";
  save_checkpoint(trainer.checkpoint(), ckpt_path);
  train(
      trainer,
      [&](const json& record) {
        log.write(record);
        std::cout << record.dump() << '\n';
      },
      ckpt_path);
  const EvalMetrics final_eval = evaluate(trainer.network(), ds.eval());
  json end{{"event", "end"}, {"epoch", trainer.epoch()}, {"eval", to_json(final_eval)}};
  log.write(end);
  std::cout << end.dump() << '\n';
  return kOk;
}

int run_eval(const std::string& ckpt_path, const std::string& split, bool force_open,
             const std::string& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Datasets ds = load_datasets(ckpt.config);
  nn::GatedNetwork net = network_from(ckpt);
  const EvalMetrics m = evaluate(net, pick_split(ds, split),
                                 force_open ? nn::GateOverride::force_open : nn::GateOverride::none);
  json record{{"event", "eval"},
              {"checkpoint", ckpt_path},
              {"epoch", ckpt.epoch},
              {"split", split},
              {"force_open", force_open},
              {"metrics", to_json(m)},
              {"flops", metrics::to_json(m.pruning)}};
  if (!out.empty()) {
    fs::create_directories(out);
    NdjsonLog(fs::path(out) / "log.ndjson", true).write(record);
  }
  std::cout << record.dump() << '\n';
  return kOk;
}

int run_analyze(const std::string& ckpt_path, const std::string& split, const fs::path& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Datasets ds = load_datasets(ckpt.config);
  json report = analyze(ckpt, pick_split(ds, split), out);
  json record{{"event", "analyze"}, {"checkpoint", ckpt_path}, {"split", split}, {"report", report}};
  NdjsonLog(out / "log.ndjson", true).write(record);
  std::cout << report["nmi"].dump() << '\n';
  return kOk;
}

int run_export(const std::string& config_path, const Overrides& o, const fs::path& out) {
  const RunConfig config = resolve_config(config_path, o);
  config.validate();
  const Datasets ds = load_datasets(config);
  fs::create_directories(out);
  data::write_idx(ds.train, out / "train-images.idx3-ubyte", out / "train-labels.idx1-ubyte");
  if (ds.test) {
    data::write_idx(*ds.test, out / "test-images.idx3-ubyte", out / "test-labels.idx1-ubyte");
  }
  json record{{"event", "export-dataset"},
              {"train_instances", ds.train.size()},
              {"test_instances", ds.test ? ds.test->size() : 0},
              {"out", out.string()}};
  NdjsonLog(out / "log.ndjson", true).write(record);
  std::cout << record.dump() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic channel pruning with feature-gate coupling"};
  app.require_subcommand(1);

  std::string config_path, resume, ckpt_path, split = "test", out_str = "fgc-out";
  bool force_open = false;
  Overrides overrides;

  CLI::App* train_cmd = app.add_subcommand("train", "Train a gated network");
  train_cmd->add_option("--config", config_path, "TOML or JSON run config");
  train_cmd->add_option("--out", out_str, "Output directory (log.ndjson, checkpoint.bin)");
  train_cmd->add_option("--resume", resume, "Continue from a checkpoint");
  add_override_flags(train_cmd, overrides);

  CLI::App* eval_cmd = app.add_subcommand("eval", "Hard-gate error and pruning ratio");
  eval_cmd->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  eval_cmd->add_option("--split", split, "train or test");
  eval_cmd->add_flag("--force-open", force_open, "Open every gate");
  std::string eval_out;
  eval_cmd->add_option("--out", eval_out, "Append the record to <out>/log.ndjson");

  CLI::App* analyze_cmd = app.add_subcommand("analyze", "NMI, frequencies, rankings, embeddings");
  analyze_cmd->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  analyze_cmd->add_option("--split", split, "train or test");
  analyze_cmd->add_option("--out", out_str, "Report directory");

  CLI::App* export_cmd = app.add_subcommand("export-dataset", "Write the dataset as IDX files");
  export_cmd->add_option("--config", config_path, "TOML or JSON run config");
  export_cmd->add_option("--out", out_str, "Output directory");
  add_override_flags(export_cmd, overrides);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kUserError;
  }

  try {
    if (*train_cmd) return run_train(config_path, overrides, out_str, resume);
    if (*eval_cmd) return run_eval(ckpt_path, split, force_open, eval_out);
    if (*analyze_cmd) return run_analyze(ckpt_path, split, out_str);
    if (*export_cmd) return run_export(config_path, overrides, out_str);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumericFailure;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUserError;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUserError;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUserError;
  }
  return kUserError;
}
