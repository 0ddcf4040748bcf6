#include "fgc/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "fgc/error.hpp"

namespace fgc::harness {

using nlohmann::json;

double OptimizerConfig::lr_at(std::size_t epoch) const {
  double lr_now = lr;
  for (std::size_t m : milestones) {
    if (epoch >= m) lr_now *= decay_factor;
  }
  return lr_now;
}

nn::NetworkSpec default_network() {
  nn::NetworkSpec spec;
  spec.input_channels = 1;
  spec.input_height = 16;
  spec.input_width = 16;
  spec.classes = 4;
  spec.layers = {
      {nn::LayerKind::conv, 8, 4, 2, 1, false, false},
      {nn::LayerKind::conv, 16, 3, 1, 1, true, false},
      {nn::LayerKind::conv, 16, 2, 2, 0, true, false},
      {nn::LayerKind::conv, 16, 3, 1, 1, true, false},
  };
  return spec;
}

RunConfig default_config() {
  RunConfig c;
  c.network = default_network();
  c.finalize();
  return c;
}

void RunConfig::finalize() {
  if (fgc.layers.empty()) {
    auto marked = network.fgc_layers();
    if (!marked.empty()) {
      fgc.layers = marked;
    } else {
      // Default Omega: the deepest third of the gated layers.
      auto gated = network.gated_layers();
      const std::size_t count = (gated.size() + 2) / 3;
      fgc.layers.assign(gated.end() - static_cast<long>(count), gated.end());
    }
  }
  network.set_fgc_layers(fgc.layers);
}

std::size_t RunConfig::shared_source_layer() const {
  if (fgc.shared_layer) return *fgc.shared_layer;
  if (fgc.layers.empty()) throw ConfigError("no fgc layers to share neighbors from");
  return *std::max_element(fgc.layers.begin(), fgc.layers.end());
}

void RunConfig::validate() const {
  network.validate();
  if (network.classes < 2) throw ConfigError("network.classes must be at least 2");
  std::set<std::size_t> seen;
  for (std::size_t id : fgc.layers) {
    if (id >= network.layers.size()) {
      throw ConfigError("fgc layer " + std::to_string(id) + " does not exist");
    }
    if (!network.layers[id].gated) {
      throw ConfigError("fgc layer " + std::to_string(id) + " is not gated");
    }
    if (!seen.insert(id).second) {
      throw ConfigError("fgc layer " + std::to_string(id) + " listed twice");
    }
  }
  if (fgc.k == 0) throw ConfigError("fgc.k must be at least 1");
  if (!(fgc.eta >= 0.0) || !std::isfinite(fgc.eta)) throw ConfigError("fgc.eta must be >= 0");
  if (!(fgc.tau > 0.0) || !std::isfinite(fgc.tau)) throw ConfigError("fgc.tau must be > 0");
  if (!(fgc.bank_momentum >= 0.0 && fgc.bank_momentum <= 1.0)) {
    throw ConfigError("fgc.bank_momentum must lie in [0, 1]");
  }
  if (fgc.neighbor_source == coupling::NeighborSource::feature_shared) {
    const std::size_t src = shared_source_layer();
    if (std::find(fgc.layers.begin(), fgc.layers.end(), src) == fgc.layers.end()) {
      throw ConfigError("fgc.shared_layer " + std::to_string(src) + " is not an fgc layer");
    }
  }
  if (!(rho >= 0.0) || !std::isfinite(rho)) throw ConfigError("rho must be >= 0");
  if (!(optimizer.lr > 0.0)) throw ConfigError("optimizer.lr must be > 0");
  if (!(optimizer.momentum >= 0.0 && optimizer.momentum < 1.0)) {
    throw ConfigError("optimizer.momentum must lie in [0, 1)");
  }
  if (!(optimizer.weight_decay >= 0.0)) throw ConfigError("optimizer.weight_decay must be >= 0");
  if (!(optimizer.decay_factor > 0.0)) throw ConfigError("optimizer.decay_factor must be > 0");
  if (!std::is_sorted(optimizer.milestones.begin(), optimizer.milestones.end())) {
    throw ConfigError("optimizer.milestones must be increasing");
  }
  if (batch_size < 2) {
    throw ConfigError("batch_size must be at least 2 (training batchnorm needs two samples)");
  }
  if (dataset.kind == "synth") {
    if (dataset.synth.classes != network.classes) {
      throw ConfigError("dataset.classes (" + std::to_string(dataset.synth.classes) +
                        ") differs from network.classes (" + std::to_string(network.classes) + ")");
    }
    if (network.input_channels != 1 || network.input_height != dataset.synth.image_size ||
        network.input_width != dataset.synth.image_size) {
      throw ConfigError("network input does not match the synthetic image size");
    }
    if (dataset.test_per_class == 0) throw ConfigError("dataset.test_per_class must be positive");
  } else if (dataset.kind == "idx") {
    if (dataset.train_images.empty() || dataset.train_labels.empty()) {
      throw ConfigError("idx dataset needs train_images and train_labels");
    }
  } else {
    throw ConfigError("dataset.kind must be synth or idx, got '" + dataset.kind + "'");
  }
}

void RunConfig::validate_against(const data::Dataset& train) const {
  const std::size_t n = train.size();
  if (batch_size > n) {
    throw ConfigError("batch_size " + std::to_string(batch_size) + " exceeds the " +
                      std::to_string(n) + " training instances");
  }
  if (n % batch_size == 1) {
    throw ConfigError("batch_size " + std::to_string(batch_size) +
                      " leaves a final batch of one instance; training batchnorm needs two");
  }
  if (train.channels != network.input_channels || train.height != network.input_height ||
      train.width != network.input_width) {
    throw ConfigError("dataset images do not match the network input");
  }
  if (train.classes > network.classes) {
    throw ConfigError("dataset has " + std::to_string(train.classes) + " classes, network " +
                      std::to_string(network.classes));
  }
}

json to_json(const RunConfig& c) {
  json net;
  nn::to_json(net, c.network);
  json fgc{{"layers", c.fgc.layers},
           {"k", c.fgc.k},
           {"eta", c.fgc.eta},
           {"tau", c.fgc.tau},
           {"bank_momentum", c.fgc.bank_momentum},
           {"neighbor_source", coupling::to_string(c.fgc.neighbor_source)},
           {"similarity", c.fgc.similarity == coupling::Similarity::dot ? "dot" : "cosine"}};
  if (c.fgc.shared_layer) fgc["shared_layer"] = *c.fgc.shared_layer;
  json ds{{"kind", c.dataset.kind}};
  if (c.dataset.kind == "synth") {
    ds["classes"] = c.dataset.synth.classes;
    ds["per_class"] = c.dataset.synth.per_class;
    ds["test_per_class"] = c.dataset.test_per_class;
    ds["image_size"] = c.dataset.synth.image_size;
    ds["geometry"] = data::to_string(c.dataset.synth.geometry);
    ds["noise_sigma"] = c.dataset.synth.noise_sigma;
    ds["contrast"] = c.dataset.synth.contrast;
    ds["seed"] = c.dataset.synth.seed;
  } else {
    ds["train_images"] = c.dataset.train_images;
    ds["train_labels"] = c.dataset.train_labels;
    ds["test_images"] = c.dataset.test_images;
    ds["test_labels"] = c.dataset.test_labels;
  }
  return json{{"seed", c.seed},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"rho", c.rho},
              {"network", net},
              {"fgc", fgc},
              {"optimizer",
               {{"lr", c.optimizer.lr},
                {"momentum", c.optimizer.momentum},
                {"weight_decay", c.optimizer.weight_decay},
                {"milestones", c.optimizer.milestones},
                {"decay_factor", c.optimizer.decay_factor},
                {"gate_no_decay", c.optimizer.gate_no_decay}}},
              {"dataset", ds},
              {"analysis", {{"queries", c.analysis_queries}}}};
}

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> allowed,
                    const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a table");
  for (const auto& [key, value] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(),
                     [&](const char* a) { return key == a; }) == allowed.end()) {
      throw ConfigError("unknown config key '" + (where.empty() ? key : where + "." + key) + "'");
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + where + (where.empty() ? "" : ".") + key +
                      "' has the wrong type: " + j.at(key).dump());
  }
}

}  // namespace

RunConfig config_from_json(const json& j) {
  RunConfig c;
  c.network = default_network();
  reject_unknown(j, {"seed", "epochs", "batch_size", "rho", "network", "fgc", "optimizer",
                     "dataset", "analysis"},
                 "");
  read(j, "seed", c.seed, "");
  read(j, "epochs", c.epochs, "");
  read(j, "batch_size", c.batch_size, "");
  read(j, "rho", c.rho, "");
  if (j.contains("network")) {
    const json& n = j.at("network");
    reject_unknown(n, {"input", "classes", "layers", "gate_hidden_ratio", "gate_hidden_min",
                       "gate_bias_init", "hard_concrete"},
                   "network");
    json merged;
    nn::to_json(merged, default_network());
    merged.update(n);
    try {
      nn::from_json(merged, c.network);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("invalid network block: ") + e.what());
    }
  }
  if (j.contains("fgc")) {
    const json& f = j.at("fgc");
    reject_unknown(f, {"layers", "k", "eta", "tau", "bank_momentum", "neighbor_source",
                       "shared_layer", "similarity"},
                   "fgc");
    read(f, "layers", c.fgc.layers, "fgc");
    read(f, "k", c.fgc.k, "fgc");
    read(f, "eta", c.fgc.eta, "fgc");
    read(f, "tau", c.fgc.tau, "fgc");
    read(f, "bank_momentum", c.fgc.bank_momentum, "fgc");
    std::string source = coupling::to_string(c.fgc.neighbor_source);
    read(f, "neighbor_source", source, "fgc");
    c.fgc.neighbor_source = coupling::neighbor_source_from(source);
    if (f.contains("shared_layer")) {
      std::size_t s = 0;
      read(f, "shared_layer", s, "fgc");
      c.fgc.shared_layer = s;
    }
    std::string sim = "dot";
    read(f, "similarity", sim, "fgc");
    if (sim == "dot") {
      c.fgc.similarity = coupling::Similarity::dot;
    } else if (sim == "cosine") {
      c.fgc.similarity = coupling::Similarity::cosine;
    } else {
      throw ConfigError("fgc.similarity must be dot or cosine, got '" + sim + "'");
    }
  }
  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    reject_unknown(o, {"lr", "momentum", "weight_decay", "milestones", "decay_factor",
                       "gate_no_decay"},
                   "optimizer");
    read(o, "lr", c.optimizer.lr, "optimizer");
    read(o, "momentum", c.optimizer.momentum, "optimizer");
    read(o, "weight_decay", c.optimizer.weight_decay, "optimizer");
    read(o, "milestones", c.optimizer.milestones, "optimizer");
    read(o, "decay_factor", c.optimizer.decay_factor, "optimizer");
    read(o, "gate_no_decay", c.optimizer.gate_no_decay, "optimizer");
  }
  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    reject_unknown(d, {"kind", "classes", "per_class", "test_per_class", "image_size", "geometry",
                       "noise_sigma", "contrast", "seed", "train_images", "train_labels", "test_images",
                       "test_labels"},
                   "dataset");
    read(d, "kind", c.dataset.kind, "dataset");
    read(d, "classes", c.dataset.synth.classes, "dataset");
    read(d, "per_class", c.dataset.synth.per_class, "dataset");
    read(d, "test_per_class", c.dataset.test_per_class, "dataset");
    read(d, "image_size", c.dataset.synth.image_size, "dataset");
    std::string geometry = data::to_string(c.dataset.synth.geometry);
    read(d, "geometry", geometry, "dataset");
    c.dataset.synth.geometry = data::geometry_from(geometry);
    read(d, "noise_sigma", c.dataset.synth.noise_sigma, "dataset");
    read(d, "contrast", c.dataset.synth.contrast, "dataset");
    read(d, "seed", c.dataset.synth.seed, "dataset");
    read(d, "train_images", c.dataset.train_images, "dataset");
    read(d, "train_labels", c.dataset.train_labels, "dataset");
    read(d, "test_images", c.dataset.test_images, "dataset");
    read(d, "test_labels", c.dataset.test_labels, "dataset");
  }
  if (j.contains("analysis")) {
    reject_unknown(j.at("analysis"), {"queries"}, "analysis");
    read(j.at("analysis"), "queries", c.analysis_queries, "analysis");
  }
  c.finalize();
  return c;
}

json read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string ext = path.extension().string();
  if (ext == ".toml") return parse_toml(buf.str(), path.string());
  if (ext == ".json") {
    try {
      return json::parse(buf.str());
    } catch (const json::parse_error& e) {
      throw ParseError(path.string() + ": " + e.what());
    }
  }
  throw ConfigError("config file " + path.string() + " must end in .toml or .json");
}

RunConfig load_config(const std::filesystem::path& path) {
  return config_from_json(read_config_file(path));
}

std::uint64_t config_hash(const RunConfig& config) {
  json j = to_json(config);
  j.erase("epochs");
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace fgc::harness
