#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fgc/network.hpp"
#include "fgc/tensor.hpp"

namespace fgc::metrics {

// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

// Differentiable L0 surrogate: batch mean of sum_c pi_c, where pi is the
// hard-concrete expected-open probability.
Tensor l0_surrogate(const nn::GateState& state);
// Literal per-instance count of open gates (eval gates), batch mean.
double open_gate_count(const nn::GateState& state);

struct LossBreakdown {
  double ce = 0.0;
  std::map<std::size_t, double> contrastive;  // layer -> L_g
  std::map<std::size_t, double> l0;           // layer -> L0 surrogate
  double eta = 0.0;
  double rho = 0.0;
  double total = 0.0;

  // ce + eta * sum(contrastive) + rho * sum(l0), summed in layer order.
  double recompose() const;
};

struct Objective {
  Tensor total;
  LossBreakdown breakdown;
};

// Composite objective; the returned tensor is built with the same operation
// order as LossBreakdown::recompose so both agree exactly.
Objective total_loss(const Tensor& ce, const std::map<std::size_t, Tensor>& contrastive,
                     const std::map<std::size_t, Tensor>& l0, double eta, double rho);

struct MiBound {
  double bound_sum = 0.0;       // log N - L_g
  double bound_per_pair = 0.0;  // log N - L_g / k
};
MiBound mi_lower_bound(double contrastive, std::size_t dataset_size, std::size_t k);

// Hard eval gates of one gated layer over an evaluation set, row-major
// [instances x channels], entries 0 or 1.
struct LayerMasks {
  std::size_t layer = 0;
  std::size_t instances = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> open;
};

struct LayerFlops {
  std::size_t layer = 0;  // index into spec.layers; head uses layers.size()
  std::string kind;       // conv, fc or head
  bool gated = false;
  double full = 0.0;      // FLOPs of the dense layer
  double gated_mean = 0.0;  // mean FLOPs with closed channels skipped
  double open_in_fraction = 1.0;
  double open_out_fraction = 1.0;
  double gate_overhead = 0.0;  // gating-module FC FLOPs
};

struct PruningReport {
  std::vector<LayerFlops> layers;  // every layer plus the classifier head
  double full_total = 0.0;
  double gated_total = 0.0;
  double overhead_total = 0.0;
  double pruning_ratio = 0.0;                // 1 - gated / full
  double pruning_ratio_with_overhead = 0.0;  // 1 - (gated + overhead) / full
  std::size_t instances = 0;
  // layer -> [channels x classes] execution frequencies, row-major.
  std::map<std::size_t, std::vector<double>> execution_frequency;
  std::size_t classes = 0;
};

inline constexpr double kFlopsPerMac = 2.0;
inline constexpr const char* kFlopsConvention =
    "1 MAC = 2 FLOPs; batchnorm, ReLU and pooling excluded; gating-module FC cost "
    "reported separately as overhead";

// Per conv/fc layer, each instance costs full * (open inputs / C_in) *
// (open outputs / C_out); ungated sides count as fully open. The head scales
// with the last layer's open fraction. Labels (optional) drive the
// per-class execution-frequency matrices.
PruningReport pruning_ratio(const nn::NetworkSpec& spec, std::span<const LayerMasks> masks,
                            std::span<const int> labels = {}, std::size_t classes = 0);

nlohmann::json to_json(const PruningReport& report);
nlohmann::json to_json(const LossBreakdown& breakdown);
// CSV of one layer's frequency matrix: channel,<class 0>,<class 1>,...
std::string frequency_csv(const PruningReport& report, std::size_t layer);

// I(A;B) / sqrt(H(A) H(B)) from the contingency table.
double nmi(std::span<const int> a, std::span<const int> b);

struct KMeansOptions {
  std::size_t clusters = 2;
  std::size_t restarts = 20;
  std::size_t max_iterations = 300;
  std::uint64_t seed = 0;
};

struct KMeansResult {
  std::vector<int> assignment;
  std::vector<double> centroids;  // [clusters x dim]
  double inertia = 0.0;
};

// Lloyd iterations from k-means++ seeds, best of `restarts` by inertia.
KMeansResult kmeans(std::span<const double> points, std::size_t count, std::size_t dim,
                    const KMeansOptions& options);

// Discretizes each embedding with k-means (clusters = `clusters`, shared
// seed) and returns the NMI of the two assignments. A discretization that
// collapses to a single cluster carries no information and scores 0.
double embedding_nmi(std::span<const double> a, std::size_t dim_a, std::span<const double> b,
                     std::size_t dim_b, std::size_t count, std::size_t clusters,
                     std::uint64_t seed);
double embedding_label_nmi(std::span<const double> a, std::size_t dim, std::span<const int> labels,
                           std::size_t clusters, std::uint64_t seed);

}  // namespace fgc::metrics
