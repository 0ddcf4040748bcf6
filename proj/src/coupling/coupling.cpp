#include "fgc/coupling.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "fgc/error.hpp"
#include "fgc/ops.hpp"

namespace fgc::coupling {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

void check_momentum(double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("bank momentum must lie in [0, 1]");
}

}  // namespace

MemoryBank::MemoryBank(std::size_t rows, std::size_t dim, double momentum, BankKind kind,
                       Rng& rng)
    : rows_(rows), dim_(dim), momentum_(momentum), kind_(kind), entries_(rows * dim) {
  check_momentum(momentum);
  if (rows == 0 || dim == 0) throw ConfigError("memory bank extents must be positive");
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = entries_.data() + r * dim;
    double norm = 0.0;
    while (norm == 0.0) {
      norm = 0.0;
      for (std::size_t c = 0; c < dim; ++c) {
        row[c] = rng.normal();
        norm += row[c] * row[c];
      }
    }
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < dim; ++c) row[c] /= norm;
  }
}

MemoryBank::MemoryBank(std::size_t rows, std::size_t dim, double momentum, BankKind kind,
                       std::vector<double> entries)
    : rows_(rows), dim_(dim), momentum_(momentum), kind_(kind), entries_(std::move(entries)) {
  check_momentum(momentum);
  if (entries_.size() != rows * dim) {
    throw DimensionError("memory bank " + std::to_string(rows) + "x" + std::to_string(dim) +
                         " given " + std::to_string(entries_.size()) + " values");
  }
}

std::span<const double> MemoryBank::row(std::size_t i) const {
  if (i >= rows_) {
    throw ContractError("bank row " + std::to_string(i) + " out of range (" +
                        std::to_string(rows_) + " rows)");
  }
  return std::span<const double>(entries_).subspan(i * dim_, dim_);
}

void MemoryBank::update(std::size_t index, std::span<const double> fresh) {
  if (index >= rows_) {
    throw ContractError("bank update index " + std::to_string(index) + " out of range (" +
                        std::to_string(rows_) + " rows)");
  }
  if (fresh.size() != dim_) {
    throw DimensionError("bank update vector has " + std::to_string(fresh.size()) +
                         " values, bank dim is " + std::to_string(dim_));
  }
  for (double v : fresh) {
    if (!std::isfinite(v)) throw NumericError("bank update with a non-finite value");
  }
  double* row = entries_.data() + index * dim_;
  for (std::size_t c = 0; c < dim_; ++c) {
    row[c] = momentum_ * row[c] + (1.0 - momentum_) * fresh[c];
  }
}

void MemoryBank::set_row(std::size_t index, std::span<const double> values) {
  if (index >= rows_ || values.size() != dim_) {
    throw DimensionError("set_row: bad index or width");
  }
  std::copy(values.begin(), values.end(), entries_.begin() + index * dim_);
}

std::vector<double> similarity_row(std::span<const double> query, const MemoryBank& bank,
                                   std::optional<std::size_t> self_index, Similarity kind) {
  if (query.size() != bank.dim()) {
    throw DimensionError("similarity query has " + std::to_string(query.size()) +
                         " values, bank dim is " + std::to_string(bank.dim()));
  }
  std::vector<double> out(bank.rows());
  const double qnorm = kind == Similarity::cosine ? std::sqrt(dot(query, query)) : 1.0;
  for (std::size_t j = 0; j < bank.rows(); ++j) {
    auto row = bank.row(j);
    double s = dot(query, row);
    if (kind == Similarity::cosine) {
      const double denom = qnorm * std::sqrt(dot(row, row));
      s = denom > 0.0 ? s / denom : 0.0;
    }
    out[j] = s;
  }
  if (self_index) {
    if (*self_index >= bank.rows()) throw ContractError("self index out of range");
    out[*self_index] = -std::numeric_limits<double>::infinity();
  }
  return out;
}

NeighborSet topk_neighbors(std::span<const double> sims, std::size_t k) {
  if (k == 0) throw ContractError("topk needs k >= 1");
  std::vector<std::size_t> candidates;
  candidates.reserve(sims.size());
  for (std::size_t j = 0; j < sims.size(); ++j) {
    if (std::isfinite(sims[j])) candidates.push_back(j);
  }
  if (k > candidates.size()) {
    throw ContractError("k = " + std::to_string(k) + " exceeds the " +
                        std::to_string(candidates.size()) + " finite similarities");
  }
  auto before = [&](std::size_t a, std::size_t b) {
    return sims[a] > sims[b] || (sims[a] == sims[b] && a < b);
  };
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<long>(k),
                    candidates.end(), before);
  NeighborSet out;
  out.neighbors.assign(candidates.begin(), candidates.begin() + static_cast<long>(k));
  out.similarities.reserve(k);
  for (std::size_t j : out.neighbors) out.similarities.push_back(sims[j]);
  return out;
}

double neighbor_probability(std::span<const double> pi, const MemoryBank& gate_bank,
                            std::size_t j, double tau) {
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  if (pi.size() != gate_bank.dim()) {
    throw DimensionError("gating vector width differs from gate bank dim");
  }
  if (j >= gate_bank.rows()) throw ContractError("neighbor index out of range");
  std::vector<double> logits(gate_bank.rows());
  for (std::size_t r = 0; r < gate_bank.rows(); ++r) logits[r] = dot(gate_bank.row(r), pi) / tau;
  const double m = *std::max_element(logits.begin(), logits.end());
  double denom = 0.0;
  for (double l : logits) denom += std::exp(l - m);
  const double p = std::exp(logits[j] - m) / denom;
  if (!std::isfinite(p)) throw NumericError("neighbor probability is not finite");
  return p;
}

Tensor contrastive_loss(const Tensor& pi, const MemoryBank& gate_bank,
                        std::span<const NeighborSet> neighbors, double tau) {
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  if (neighbors.empty()) throw ContractError("contrastive loss over an empty batch");
  Tensor batch = pi.rank() == 1 ? reshape(pi, {1, pi.dim(0)}) : pi;
  if (batch.rank() != 2 || batch.dim(1) != gate_bank.dim() || batch.dim(0) != neighbors.size()) {
    throw DimensionError("contrastive loss: pi " + shape_string(pi.shape()) + " vs " +
                         std::to_string(neighbors.size()) + " neighbor sets and bank dim " +
                         std::to_string(gate_bank.dim()));
  }
  const std::size_t n = gate_bank.rows(), d = gate_bank.dim();
  std::vector<double> bank_t(d * n);
  auto entries = gate_bank.entries();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) bank_t[c * n + r] = entries[r * d + c];
  }
  Tensor logits = scale(matmul(batch, Tensor({d, n}, std::move(bank_t))), 1.0 / tau);
  Tensor log_p = log_softmax(logits);
  std::vector<std::size_t> rows, cols;
  for (std::size_t b = 0; b < neighbors.size(); ++b) {
    if (neighbors[b].neighbors.empty()) throw ContractError("empty neighbor set");
    for (std::size_t j : neighbors[b].neighbors) {
      if (j >= n) throw ContractError("neighbor index out of range for the gate bank");
      rows.push_back(b);
      cols.push_back(j);
    }
  }
  return scale(sum(gather(log_p, rows, cols)), -1.0 / static_cast<double>(neighbors.size()));
}

std::string to_string(NeighborSource source) {
  switch (source) {
    case NeighborSource::feature: return "feature";
    case NeighborSource::feature_shared: return "feature_shared";
    case NeighborSource::label: return "label";
    case NeighborSource::gate: return "gate";
  }
  return "feature";
}

NeighborSource neighbor_source_from(const std::string& name) {
  if (name == "feature") return NeighborSource::feature;
  if (name == "feature_shared") return NeighborSource::feature_shared;
  if (name == "label") return NeighborSource::label;
  if (name == "gate") return NeighborSource::gate;
  throw ConfigError("unknown neighbor source '" + name +
                    "' (expected feature, feature_shared, label or gate)");
}

FgcLayerState::FgcLayerState(std::size_t layer, std::size_t dataset_size, std::size_t dim,
                             FgcOptions options, Rng& init_rng)
    : layer_(layer),
      options_(options),
      feature_bank_(dataset_size, dim, options.bank_momentum, BankKind::feature, init_rng),
      gate_bank_(dataset_size, dim, options.bank_momentum, BankKind::gate, init_rng) {
  if (!(options_.tau > 0.0)) throw ConfigError("temperature must be positive");
  if (options_.k == 0) throw ConfigError("k must be at least 1");
  if (dataset_size < 2) throw ConfigError("feature-gate coupling needs at least 2 instances");
}

std::size_t FgcLayerState::effective_k() const {
  return std::min(options_.k, feature_bank_.rows() - 1);
}

std::vector<std::size_t> FgcLayerState::sample_same_label(std::size_t instance,
                                                          std::span<const int> labels,
                                                          std::size_t k, Rng& rng) {
  if (members_by_label_.empty()) {
    for (std::size_t i = 0; i < labels.size(); ++i) members_by_label_[labels[i]].push_back(i);
  }
  std::vector<std::size_t> pool;
  for (std::size_t j : members_by_label_.at(labels[instance])) {
    if (j != instance) pool.push_back(j);
  }
  const std::size_t take = std::min(k, pool.size());
  // Partial Fisher-Yates: the first `take` slots become a uniform sample.
  for (std::size_t i = 0; i < take; ++i) {
    std::size_t j = i + rng.below(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(take);
  return pool;
}

std::vector<NeighborSet> FgcLayerState::explore(const AlignInputs& in) {
  const std::size_t batch = in.ids.size();
  const std::size_t dim = feature_bank_.dim();
  if (in.pooled_features.rank() != 2 || in.pooled_features.dim(0) != batch ||
      in.pooled_features.dim(1) != dim || in.pi.rank() != 2 || in.pi.dim(0) != batch ||
      in.pi.dim(1) != dim) {
    throw DimensionError("explore: features " + shape_string(in.pooled_features.shape()) +
                         ", pi " + shape_string(in.pi.shape()) + " for " +
                         std::to_string(batch) + " ids and bank dim " + std::to_string(dim));
  }
  for (std::size_t id : in.ids) {
    if (id >= feature_bank_.rows()) {
      throw ContractError("instance id " + std::to_string(id) + " outside the bank (" +
                          std::to_string(feature_bank_.rows()) + " rows)");
    }
  }
  const std::size_t k = effective_k();
  auto features = in.pooled_features.data();
  auto pis = in.pi.data();
  std::vector<NeighborSet> sets(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t id = in.ids[b];
    auto f = features.subspan(b * dim, dim);
    NeighborSet set;
    switch (options_.source) {
      case NeighborSource::feature:
        set = topk_neighbors(similarity_row(f, feature_bank_, id, options_.similarity), k);
        break;
      case NeighborSource::gate:
        set = topk_neighbors(
            similarity_row(pis.subspan(b * dim, dim), gate_bank_, id, options_.similarity), k);
        break;
      case NeighborSource::feature_shared: {
        if (!in.shared || in.shared->size() != batch) {
          throw ContractError("shared neighbor source without the source layer's neighbors");
        }
        set = (*in.shared)[b];
        if (set.instance != id) throw ContractError("shared neighbor sets are out of order");
        break;
      }
      case NeighborSource::label: {
        if (in.dataset_labels.size() != feature_bank_.rows()) {
          throw ContractError("label neighbor source requested without dataset labels");
        }
        if (!in.rng) throw ContractError("label neighbor source needs a random generator");
        set.neighbors = sample_same_label(id, in.dataset_labels, k, *in.rng);
        for (std::size_t j : set.neighbors) set.similarities.push_back(dot(f, feature_bank_.row(j)));
        break;
      }
    }
    set.instance = id;
    set.layer = layer_;
    sets[b] = std::move(set);
  }
  return sets;
}

AlignResult FgcLayerState::explore_and_align(const AlignInputs& in) {
  AlignResult result;
  result.neighbors = explore(in);
  result.loss = contrastive_loss(in.pi, gate_bank_, result.neighbors, options_.tau);
  const std::size_t dim = feature_bank_.dim();
  auto features = in.pooled_features.data();
  auto pis = in.pi.data();
  for (std::size_t b = 0; b < in.ids.size(); ++b) {
    feature_bank_.update(in.ids[b], features.subspan(b * dim, dim));
    gate_bank_.update(in.ids[b], pis.subspan(b * dim, dim));
  }
  return result;
}

std::string neighbors_csv(std::span<const NeighborSet> sets) {
  std::ostringstream os;
  os.precision(17);
  os << "instance_id,rank,neighbor_id,similarity\n";
  for (const NeighborSet& s : sets) {
    for (std::size_t r = 0; r < s.neighbors.size(); ++r) {
      os << s.instance << ',' << r << ',' << s.neighbors[r] << ',';
      if (r < s.similarities.size()) os << s.similarities[r];
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace fgc::coupling
