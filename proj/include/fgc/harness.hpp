#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fgc/config.hpp"
#include "fgc/coupling.hpp"
#include "fgc/data.hpp"
#include "fgc/metrics.hpp"
#include "fgc/network.hpp"
#include "fgc/optim.hpp"

namespace fgc::harness {

struct Datasets {
  data::Dataset train;
  std::optional<data::Dataset> test;

  const data::Dataset& eval() const { return test ? *test : train; }
};

// Synthetic: train from dataset.seed, test from a derived seed, both
// normalized with the train statistics. IDX: test files optional.
Datasets load_datasets(const RunConfig& config);

// Versioned little-endian binary: magic, u32 version, u64 header length,
// JSON header (names, shapes, run state), then raw float64 payloads.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  RunConfig config;
  std::uint64_t config_hash = 0;
  std::size_t epoch = 0;
  std::string rng_state;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const;
};

std::string serialize(const Checkpoint& ckpt);
Checkpoint deserialize(const std::string& bytes, const std::string& source = "<memory>");
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct EvalMetrics {
  std::size_t instances = 0;
  double accuracy = 0.0;
  double error = 0.0;
  metrics::PruningReport pruning;
};

// Hard-gate (eval mode) top-1 error and pruning ratio; never touches banks.
EvalMetrics evaluate(nn::GatedNetwork& net, const data::Dataset& ds,
                     nn::GateOverride override = nn::GateOverride::none);
nlohmann::json to_json(const EvalMetrics& m);

class Trainer {
 public:
  Trainer(RunConfig config, const data::Dataset& train, const data::Dataset* eval);

  const RunConfig& config() const { return config_; }
  std::size_t epoch() const { return epoch_; }
  bool finished() const { return epoch_ >= config_.epochs; }

  // Trains one epoch and returns its log record.
  nlohmann::json run_epoch();

  Checkpoint checkpoint() const;
  void restore(const Checkpoint& ckpt);

  nn::GatedNetwork& network() { return net_; }
  const std::map<std::size_t, coupling::FgcLayerState>& fgc_states() const { return fgc_; }

 private:
  struct StepResult {
    double ce = 0.0, total = 0.0;
    std::size_t correct = 0;
    std::map<std::size_t, double> lg, l0;
  };
  StepResult step(const std::vector<std::size_t>& ids);
  std::vector<std::size_t> fgc_order() const;

  RunConfig config_;
  const data::Dataset& train_;
  const data::Dataset* eval_;
  nn::GatedNetwork net_;
  NesterovSgd optimizer_;
  std::map<std::size_t, coupling::FgcLayerState> fgc_;
  Rng rng_;
  std::size_t epoch_ = 0;
};

using LogSink = std::function<void(const nlohmann::json&)>;

// Runs the remaining epochs of `trainer`, emitting one record per epoch and,
// when `checkpoint_path` is set, saving after every epoch.
void train(Trainer& trainer, const LogSink& sink,
           const std::optional<std::filesystem::path>& checkpoint_path = std::nullopt);

// Rebuilds a network from a checkpoint's config and parameters.
nn::GatedNetwork network_from(const Checkpoint& ckpt);

struct LayerEmbeddings {
  std::size_t layer = 0;
  std::size_t dim = 0;
  std::size_t instances = 0;
  std::vector<double> features;  // pooled ungated feature, [instances x dim]
  std::vector<double> pi;        // gating probabilities, [instances x dim]
};

// Eval-mode embeddings of every gated layer.
std::vector<LayerEmbeddings> collect_embeddings(nn::GatedNetwork& net, const data::Dataset& ds);

struct NmiTriplet {
  std::size_t layer = 0;
  double feature_label = 0.0;
  double gate_label = 0.0;
  double feature_gate = 0.0;
};

NmiTriplet nmi_triplet(const LayerEmbeddings& emb, std::span<const int> labels,
                       std::size_t classes, std::uint64_t seed);

// Instance ids ordered by cosine similarity of pi to the query's pi; the
// query itself comes first, remaining ties go to the smaller id.
std::vector<std::pair<std::size_t, double>> gate_similarity_ranking(const LayerEmbeddings& emb,
                                                                    std::size_t query);

// Writes nmi.json, frequency_layer<l>.csv, gate_ranking_layer<l>.csv,
// embeddings_layer<l>.csv, neighbors_layer<l>.csv and report.json into
// `out_dir`; returns the report.
nlohmann::json analyze(const Checkpoint& ckpt, const data::Dataset& ds,
                       const std::filesystem::path& out_dir);

}  // namespace fgc::harness
