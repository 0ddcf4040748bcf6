#include "fgc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>

#include "fgc/error.hpp"
#include "fgc/ops.hpp"
#include "fgc/rng.hpp"

namespace fgc::metrics {

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_string(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t classes = logits.dim(1);
  std::vector<std::size_t> rows(labels.size()), cols(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw ContractError("label " + std::to_string(labels[i]) + " outside [0, " +
                          std::to_string(classes) + ")");
    }
    rows[i] = i;
    cols[i] = static_cast<std::size_t>(labels[i]);
  }
  return scale(mean(gather(log_softmax(logits), rows, cols)), -1.0);
}

Tensor l0_surrogate(const nn::GateState& state) {
  return scale(sum(state.pi), 1.0 / static_cast<double>(state.pi.dim(0)));
}

double open_gate_count(const nn::GateState& state) {
  double total = 0.0;
  for (double g : state.gate.data()) total += g > 0.0 ? 1.0 : 0.0;
  return total / static_cast<double>(state.gate.dim(0));
}

double LossBreakdown::recompose() const {
  double sc = 0.0;
  for (const auto& [layer, v] : contrastive) sc += v;
  double sl = 0.0;
  for (const auto& [layer, v] : l0) sl += v;
  return (ce + eta * sc) + rho * sl;
}

namespace {

Tensor sum_in_order(const std::map<std::size_t, Tensor>& terms) {
  Tensor acc = Tensor::scalar(0.0);
  for (const auto& [layer, t] : terms) acc = add(acc, t);
  return acc;
}

}  // namespace

Objective total_loss(const Tensor& ce, const std::map<std::size_t, Tensor>& contrastive,
                     const std::map<std::size_t, Tensor>& l0, double eta, double rho) {
  if (eta < 0.0 || rho < 0.0) throw ConfigError("loss coefficients must be non-negative");
  Objective out;
  out.total = add(add(ce, scale(sum_in_order(contrastive), eta)), scale(sum_in_order(l0), rho));
  out.breakdown.ce = ce.item();
  for (const auto& [layer, t] : contrastive) out.breakdown.contrastive[layer] = t.item();
  for (const auto& [layer, t] : l0) out.breakdown.l0[layer] = t.item();
  out.breakdown.eta = eta;
  out.breakdown.rho = rho;
  out.breakdown.total = out.total.item();
  return out;
}

MiBound mi_lower_bound(double contrastive, std::size_t dataset_size, std::size_t k) {
  if (dataset_size < 2) throw ContractError("mutual-information bound needs N >= 2");
  if (k == 0) throw ContractError("mutual-information bound needs k >= 1");
  const double log_n = std::log(static_cast<double>(dataset_size));
  return MiBound{log_n - contrastive, log_n - contrastive / static_cast<double>(k)};
}

PruningReport pruning_ratio(const nn::NetworkSpec& spec, std::span<const LayerMasks> masks,
                            std::span<const int> labels, std::size_t classes) {
  const auto shapes = spec.shapes();
  std::map<std::size_t, const LayerMasks*> by_layer;
  std::size_t instances = 0;
  for (const LayerMasks& m : masks) {
    if (m.layer >= spec.layers.size() || !spec.layers[m.layer].gated) {
      throw ContractError("gate masks given for ungated layer " + std::to_string(m.layer));
    }
    if (m.channels != spec.layers[m.layer].out_channels ||
        m.open.size() != m.instances * m.channels) {
      throw DimensionError("gate masks for layer " + std::to_string(m.layer) +
                           " do not match its channel count");
    }
    for (std::uint8_t v : m.open) {
      if (v > 1) throw ContractError("gate frequency outside [0, 1]");
    }
    if (!by_layer.empty() && m.instances != instances) {
      throw DimensionError("gate masks cover different instance counts");
    }
    instances = m.instances;
    by_layer[m.layer] = &m;
  }
  for (std::size_t id : spec.gated_layers()) {
    if (!by_layer.count(id)) {
      throw ContractError("missing gate masks for gated layer " + std::to_string(id));
    }
  }
  if (instances == 0 && !by_layer.empty()) throw ContractError("gate masks over zero instances");
  if (!labels.empty() && labels.size() != instances) {
    throw DimensionError("labels do not match the number of masked instances");
  }
  const std::size_t n_eval = std::max<std::size_t>(instances, 1);

  // Fraction of open channels of layer `id` for instance n (1 when ungated).
  auto open_fraction = [&](std::size_t id, std::size_t n) {
    auto it = by_layer.find(id);
    if (it == by_layer.end()) return 1.0;
    const LayerMasks& m = *it->second;
    std::size_t open = 0;
    for (std::size_t c = 0; c < m.channels; ++c) open += m.open[n * m.channels + c];
    return static_cast<double>(open) / static_cast<double>(m.channels);
  };

  PruningReport report;
  report.instances = instances;
  report.classes = classes;
  const std::size_t total_layers = spec.layers.size();
  for (std::size_t l = 0; l <= total_layers; ++l) {
    LayerFlops f;
    f.layer = l;
    double macs = 0.0;
    if (l < total_layers) {
      const nn::LayerSpec& ls = spec.layers[l];
      const nn::LayerShape& s = shapes[l];
      f.kind = ls.kind == nn::LayerKind::conv ? "conv" : "fc";
      f.gated = ls.gated;
      macs = ls.kind == nn::LayerKind::conv
                 ? static_cast<double>(s.out_channels * s.out_height * s.out_width *
                                       s.in_channels * ls.kernel * ls.kernel)
                 : static_cast<double>(s.in_features() * s.out_channels);
      if (ls.gated) {
        const double hidden = static_cast<double>(spec.gate_hidden(l));
        f.gate_overhead = kFlopsPerMac * (static_cast<double>(s.in_channels) * hidden +
                                          hidden * static_cast<double>(s.out_channels));
      }
    } else {
      f.kind = "head";
      macs = static_cast<double>(shapes.back().out_channels * spec.classes);
    }
    f.full = kFlopsPerMac * macs;
    double gated_sum = 0.0, in_sum = 0.0, out_sum = 0.0;
    for (std::size_t n = 0; n < n_eval; ++n) {
      const double a_in = (l == 0 || instances == 0) ? 1.0 : open_fraction(l - 1, n);
      const double a_out = (l == total_layers || instances == 0) ? 1.0 : open_fraction(l, n);
      gated_sum += f.full * a_in * a_out;
      in_sum += a_in;
      out_sum += a_out;
    }
    f.gated_mean = gated_sum / static_cast<double>(n_eval);
    f.open_in_fraction = in_sum / static_cast<double>(n_eval);
    f.open_out_fraction = out_sum / static_cast<double>(n_eval);
    report.full_total += f.full;
    report.gated_total += f.gated_mean;
    report.overhead_total += f.gate_overhead;
    report.layers.push_back(f);
  }
  report.pruning_ratio = 1.0 - report.gated_total / report.full_total;
  report.pruning_ratio_with_overhead =
      1.0 - (report.gated_total + report.overhead_total) / report.full_total;

  if (!labels.empty() && classes > 0) {
    std::vector<double> class_count(classes, 0.0);
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= classes) {
        throw ContractError("label outside [0, classes)");
      }
      class_count[static_cast<std::size_t>(y)] += 1.0;
    }
    for (const auto& [id, m] : by_layer) {
      std::vector<double> freq(m->channels * classes, 0.0);
      for (std::size_t n = 0; n < instances; ++n) {
        const std::size_t y = static_cast<std::size_t>(labels[n]);
        for (std::size_t c = 0; c < m->channels; ++c) {
          freq[c * classes + y] += m->open[n * m->channels + c];
        }
      }
      for (std::size_t c = 0; c < m->channels; ++c) {
        for (std::size_t y = 0; y < classes; ++y) {
          if (class_count[y] > 0.0) freq[c * classes + y] /= class_count[y];
        }
      }
      report.execution_frequency[id] = std::move(freq);
    }
  }
  return report;
}

nlohmann::json to_json(const PruningReport& report) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerFlops& f : report.layers) {
    layers.push_back({{"layer", f.layer},
                      {"kind", f.kind},
                      {"gated", f.gated},
                      {"full_flops", f.full},
                      {"gated_flops", f.gated_mean},
                      {"open_in_fraction", f.open_in_fraction},
                      {"open_out_fraction", f.open_out_fraction},
                      {"gate_overhead_flops", f.gate_overhead}});
  }
  return {{"convention", kFlopsConvention},
          {"instances", report.instances},
          {"full_flops", report.full_total},
          {"gated_flops", report.gated_total},
          {"gate_overhead_flops", report.overhead_total},
          {"pruning_ratio", report.pruning_ratio},
          {"pruning_ratio_with_overhead", report.pruning_ratio_with_overhead},
          {"layers", std::move(layers)}};
}

nlohmann::json to_json(const LossBreakdown& b) {
  nlohmann::json lg = nlohmann::json::object();
  for (const auto& [layer, v] : b.contrastive) lg[std::to_string(layer)] = v;
  nlohmann::json l0 = nlohmann::json::object();
  for (const auto& [layer, v] : b.l0) l0[std::to_string(layer)] = v;
  return {{"ce", b.ce}, {"contrastive", lg}, {"l0", l0},
          {"eta", b.eta}, {"rho", b.rho}, {"total", b.total}};
}

std::string frequency_csv(const PruningReport& report, std::size_t layer) {
  auto it = report.execution_frequency.find(layer);
  if (it == report.execution_frequency.end()) {
    throw ContractError("no execution frequencies recorded for layer " + std::to_string(layer));
  }
  std::ostringstream os;
  os.precision(17);
  os << "channel";
  for (std::size_t y = 0; y < report.classes; ++y) os << ",class_" << y;
  os << '\n';
  const std::size_t channels = it->second.size() / report.classes;
  for (std::size_t c = 0; c < channels; ++c) {
    os << c;
    for (std::size_t y = 0; y < report.classes; ++y) os << ',' << it->second[c * report.classes + y];
    os << '\n';
  }
  return os.str();
}

double nmi(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw DimensionError("nmi: assignments differ in length");
  if (a.empty()) throw ContractError("nmi of empty assignments");
  std::map<int, double> pa, pb;
  std::map<std::pair<int, int>, double> joint;
  for (std::size_t i = 0; i < a.size(); ++i) {
    pa[a[i]] += 1.0;
    pb[b[i]] += 1.0;
    joint[{a[i], b[i]}] += 1.0;
  }
  if (pa.size() < 2 || pb.size() < 2) {
    throw ContractError("nmi undefined: an assignment is constant (zero entropy)");
  }
  const double n = static_cast<double>(a.size());
  auto entropy = [n](const std::map<int, double>& counts) {
    double h = 0.0;
    for (const auto& [key, c] : counts) h -= (c / n) * std::log(c / n);
    return h;
  };
  // Terms summed in sorted order so that nmi(a, b) == nmi(b, a) exactly.
  std::vector<double> terms;
  terms.reserve(joint.size());
  for (const auto& [key, c] : joint) {
    terms.push_back((c / n) * std::log((c * n) / (pa[key.first] * pb[key.second])));
  }
  std::sort(terms.begin(), terms.end());
  double mi = 0.0;
  for (double t : terms) mi += t;
  const double ha = entropy(pa), hb = entropy(pb);
  const double denom = std::sqrt(std::min(ha, hb) * std::max(ha, hb));
  return std::clamp(mi / denom, 0.0, 1.0);
}

namespace {

double squared_distance(const double* a, const double* b, std::size_t dim) {
  double acc = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

KMeansResult kmeans_once(std::span<const double> points, std::size_t count, std::size_t dim,
                         std::size_t k, std::size_t max_iterations, Rng& rng) {
  KMeansResult r;
  r.centroids.assign(k * dim, 0.0);
  // k-means++ seeding.
  std::vector<double> nearest(count, std::numeric_limits<double>::infinity());
  std::size_t first = rng.below(count);
  std::copy_n(points.data() + first * dim, dim, r.centroids.data());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
      nearest[i] = std::min(nearest[i], squared_distance(points.data() + i * dim,
                                                         r.centroids.data() + (c - 1) * dim, dim));
      total += nearest[i];
    }
    std::size_t pick = count - 1;
    if (total > 0.0) {
      double target = rng.uniform() * total;
      for (std::size_t i = 0; i < count; ++i) {
        target -= nearest[i];
        if (target < 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.below(count);
    }
    std::copy_n(points.data() + pick * dim, dim, r.centroids.data() + c * dim);
  }

  r.assignment.assign(count, -1);
  std::vector<double> sums(k * dim);
  std::vector<std::size_t> sizes(k);
  for (std::size_t it = 0; it < max_iterations; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < count; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = squared_distance(points.data() + i * dim, r.centroids.data() + c * dim, dim);
        if (d < best_d) {
          best_d = d;
          best = static_cast<int>(c);
        }
      }
      if (r.assignment[i] != best) {
        r.assignment[i] = best;
        changed = true;
      }
    }
    if (!changed && it > 0) break;
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(sizes.begin(), sizes.end(), 0);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t c = static_cast<std::size_t>(r.assignment[i]);
      ++sizes[c];
      for (std::size_t d = 0; d < dim; ++d) sums[c * dim + d] += points[i * dim + d];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (sizes[c] == 0) {
        // Re-seed an empty cluster at the point farthest from its centroid.
        std::size_t far = 0;
        double far_d = -1.0;
        for (std::size_t i = 0; i < count; ++i) {
          const double d = squared_distance(
              points.data() + i * dim,
              r.centroids.data() + static_cast<std::size_t>(r.assignment[i]) * dim, dim);
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        std::copy_n(points.data() + far * dim, dim, r.centroids.data() + c * dim);
        continue;
      }
      for (std::size_t d = 0; d < dim; ++d) {
        r.centroids[c * dim + d] = sums[c * dim + d] / static_cast<double>(sizes[c]);
      }
    }
  }
  r.inertia = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    r.inertia += squared_distance(points.data() + i * dim,
                                  r.centroids.data() + static_cast<std::size_t>(r.assignment[i]) * dim,
                                  dim);
  }
  return r;
}

bool is_constant(const std::vector<int>& v) {
  return std::adjacent_find(v.begin(), v.end(), std::not_equal_to<>()) == v.end();
}

}  // namespace

KMeansResult kmeans(std::span<const double> points, std::size_t count, std::size_t dim,
                    const KMeansOptions& options) {
  if (points.size() != count * dim) throw DimensionError("kmeans: points do not match count x dim");
  if (options.clusters == 0 || options.clusters > count) {
    throw ContractError("kmeans: cluster count must lie in [1, number of points]");
  }
  Rng rng(options.seed);
  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < std::max<std::size_t>(options.restarts, 1); ++r) {
    KMeansResult candidate = kmeans_once(points, count, dim, options.clusters,
                                         options.max_iterations, rng);
    if (candidate.inertia < best.inertia) best = std::move(candidate);
  }
  return best;
}

double embedding_nmi(std::span<const double> a, std::size_t dim_a, std::span<const double> b,
                     std::size_t dim_b, std::size_t count, std::size_t clusters,
                     std::uint64_t seed) {
  KMeansOptions opts;
  opts.clusters = clusters;
  opts.seed = seed;
  const auto ka = kmeans(a, count, dim_a, opts);
  const auto kb = kmeans(b, count, dim_b, opts);
  if (is_constant(ka.assignment) || is_constant(kb.assignment)) return 0.0;
  return nmi(ka.assignment, kb.assignment);
}

double embedding_label_nmi(std::span<const double> a, std::size_t dim, std::span<const int> labels,
                           std::size_t clusters, std::uint64_t seed) {
  KMeansOptions opts;
  opts.clusters = clusters;
  opts.seed = seed;
  const auto ka = kmeans(a, labels.size(), dim, opts);
  if (is_constant(ka.assignment)) return 0.0;
  return nmi(ka.assignment, labels);
}

}  // namespace fgc::metrics
