#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fgc/coupling.hpp"
#include "fgc/data.hpp"
#include "fgc/network.hpp"

namespace fgc::harness {

struct OptimizerConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<std::size_t> milestones;  // epochs at which lr *= decay_factor
  double decay_factor = 0.1;
  bool gate_no_decay = true;

  double lr_at(std::size_t epoch) const;
};

struct FgcConfig {
  std::vector<std::size_t> layers;  // empty: last third of the gated layers
  std::size_t k = 200;
  double eta = 0.003;
  double tau = 0.07;
  double bank_momentum = 0.5;
  coupling::NeighborSource neighbor_source = coupling::NeighborSource::feature;
  std::optional<std::size_t> shared_layer;  // feature_shared; default deepest layer
  coupling::Similarity similarity = coupling::Similarity::dot;
};

struct DatasetConfig {
  std::string kind = "synth";  // synth | idx
  data::SynthOptions synth;
  std::size_t test_per_class = 200;
  std::string train_images, train_labels, test_images, test_labels;
};

struct RunConfig {
  nn::NetworkSpec network;
  FgcConfig fgc;
  double rho = 0.4;
  OptimizerConfig optimizer;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  DatasetConfig dataset;
  std::size_t analysis_queries = 8;

  // Resolves Omega into the network spec (marks fgc layers).
  void finalize();
  // Everything checkable without data; throws ConfigError.
  void validate() const;
  // Checks that need the training-set size and geometry.
  void validate_against(const data::Dataset& train) const;

  std::size_t shared_source_layer() const;
};

// Small CNN on 1x16x16 inputs: an ungated stride-2 stem and three gated
// convolutions, the last one coupled.
nn::NetworkSpec default_network();
RunConfig default_config();

nlohmann::json to_json(const RunConfig& config);
// Missing keys keep their defaults; unknown keys are rejected.
RunConfig config_from_json(const nlohmann::json& j);

// TOML or JSON chosen by extension (.toml / .json).
nlohmann::json read_config_file(const std::filesystem::path& path);
RunConfig load_config(const std::filesystem::path& path);

// FNV-1a over the canonical JSON, excluding the epoch budget so that
// extending a run keeps its identity.
std::uint64_t config_hash(const RunConfig& config);

// Minimal TOML reader (tables, arrays of tables, dotted keys, strings,
// numbers, booleans, arrays, inline tables) producing JSON.
nlohmann::json parse_toml(const std::string& text, const std::string& source = "<toml>");

}  // namespace fgc::harness
