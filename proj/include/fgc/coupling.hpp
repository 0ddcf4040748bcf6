#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fgc/rng.hpp"
#include "fgc/tensor.hpp"

namespace fgc::coupling {

enum class BankKind { feature, gate };

// N x D table holding one vector per training instance. Rows are refreshed
// by momentum interpolation and never carry gradients.
class MemoryBank {
 public:
  // Rows drawn as unit-L2-norm random vectors.
  MemoryBank(std::size_t rows, std::size_t dim, double momentum, BankKind kind, Rng& rng);
  MemoryBank(std::size_t rows, std::size_t dim, double momentum, BankKind kind,
             std::vector<double> entries);

  std::size_t rows() const { return rows_; }
  std::size_t dim() const { return dim_; }
  double momentum() const { return momentum_; }
  BankKind kind() const { return kind_; }

  std::span<const double> row(std::size_t i) const;
  std::span<const double> entries() const { return entries_; }

  // bank[i] <- m * bank[i] + (1 - m) * fresh
  void update(std::size_t index, std::span<const double> fresh);
  void set_row(std::size_t index, std::span<const double> values);

 private:
  std::size_t rows_;
  std::size_t dim_;
  double momentum_;
  BankKind kind_;
  std::vector<double> entries_;
};

struct NeighborSet {
  std::size_t instance = 0;
  std::size_t layer = 0;
  std::vector<std::size_t> neighbors;  // by descending similarity
  std::vector<double> similarities;
};

enum class Similarity { dot, cosine };

// Similarity of the query against every bank row; the self position (if
// any) holds -infinity so it can never be selected.
std::vector<double> similarity_row(std::span<const double> query, const MemoryBank& bank,
                                   std::optional<std::size_t> self_index,
                                   Similarity kind = Similarity::dot);

// Indices of the k largest finite similarities; ties go to the smaller index.
NeighborSet topk_neighbors(std::span<const double> sims, std::size_t k);

// Softmax over all bank rows of (bank[r] . pi / tau), evaluated at row j.
double neighbor_probability(std::span<const double> pi, const MemoryBank& gate_bank,
                            std::size_t j, double tau);

// Batch mean over instances of -sum_{j in N_i} log p(j | pi_i). pi is [B, D]
// (one row per neighbor set, same order); bank rows are constants.
Tensor contrastive_loss(const Tensor& pi, const MemoryBank& gate_bank,
                        std::span<const NeighborSet> neighbors, double tau);

enum class NeighborSource { feature, feature_shared, label, gate };

std::string to_string(NeighborSource source);
NeighborSource neighbor_source_from(const std::string& name);

struct FgcOptions {
  std::size_t k = 200;
  double tau = 0.07;
  double bank_momentum = 0.5;
  NeighborSource source = NeighborSource::feature;
  Similarity similarity = Similarity::dot;
};

struct AlignInputs {
  Tensor pooled_features;               // [B, D], values only
  Tensor pi;                            // [B, D], differentiable
  std::span<const std::size_t> ids;     // dataset instance ids, length B
  std::span<const int> dataset_labels;  // all N labels; label source only
  const std::vector<NeighborSet>* shared = nullptr;  // feature_shared only
  Rng* rng = nullptr;                   // label source only
};

struct AlignResult {
  Tensor loss;  // batch-mean contrastive loss, scalar
  std::vector<NeighborSet> neighbors;
};

// Per-layer FGC machinery: one feature bank and one gate bank.
class FgcLayerState {
 public:
  FgcLayerState(std::size_t layer, std::size_t dataset_size, std::size_t dim,
                FgcOptions options, Rng& init_rng);

  std::size_t layer() const { return layer_; }
  const FgcOptions& options() const { return options_; }
  // k clipped to N - 1.
  std::size_t effective_k() const;

  MemoryBank& feature_bank() { return feature_bank_; }
  MemoryBank& gate_bank() { return gate_bank_; }
  const MemoryBank& feature_bank() const { return feature_bank_; }
  const MemoryBank& gate_bank() const { return gate_bank_; }

  // Step 1 (neighbor exploration) against the banks as they are now.
  std::vector<NeighborSet> explore(const AlignInputs& in);
  // Steps 1 and 2: neighbors, gate-space contrastive loss, then momentum
  // refresh of both banks for the batch rows (detached values).
  AlignResult explore_and_align(const AlignInputs& in);

 private:
  std::vector<std::size_t> sample_same_label(std::size_t instance,
                                             std::span<const int> labels, std::size_t k,
                                             Rng& rng);

  std::size_t layer_;
  FgcOptions options_;
  MemoryBank feature_bank_;
  MemoryBank gate_bank_;
  std::map<int, std::vector<std::size_t>> members_by_label_;
};

// CSV rows: instance_id,rank,neighbor_id,similarity
std::string neighbors_csv(std::span<const NeighborSet> sets);

}  // namespace fgc::coupling
