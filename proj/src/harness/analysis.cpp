#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fgc/error.hpp"
#include "fgc/harness.hpp"

namespace fgc::harness {

using nlohmann::json;

namespace {

constexpr std::size_t kBatch = 250;
constexpr std::uint64_t kNmiStream = 0x4e4d49;

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

std::string embedding_csv(std::span<const double> values, std::size_t dim,
                          std::span<const int> labels) {
  std::ostringstream os;
  os.precision(17);
  os << "instance_id,label";
  for (std::size_t d = 0; d < dim; ++d) os << ",d" << d;
  os << '\n';
  for (std::size_t i = 0; i < labels.size(); ++i) {
    os << i << ',' << labels[i];
    for (std::size_t d = 0; d < dim; ++d) os << ',' << values[i * dim + d];
    os << '\n';
  }
  return os.str();
}

}  // namespace

std::vector<LayerEmbeddings> collect_embeddings(nn::GatedNetwork& net, const data::Dataset& ds) {
  NoGradGuard no_grad;
  std::vector<LayerEmbeddings> out;
  for (std::size_t l : net.spec().gated_layers()) {
    LayerEmbeddings e;
    e.layer = l;
    e.dim = net.spec().layers[l].out_channels;
    e.instances = ds.size();
    out.push_back(std::move(e));
  }
  Rng unused(0);
  for (std::size_t start = 0; start < ds.size(); start += kBatch) {
    std::vector<std::size_t> ids(std::min(kBatch, ds.size() - start));
    std::iota(ids.begin(), ids.end(), start);
    nn::NetworkOutput r = net.forward(ds.batch_images(ids), Mode::eval, unused);
    for (std::size_t g = 0; g < r.gated.size(); ++g) {
      auto f = r.gated[g].pooled_feature.data();
      auto p = r.gated[g].gate.pi.data();
      out[g].features.insert(out[g].features.end(), f.begin(), f.end());
      out[g].pi.insert(out[g].pi.end(), p.begin(), p.end());
    }
  }
  return out;
}

NmiTriplet nmi_triplet(const LayerEmbeddings& emb, std::span<const int> labels,
                       std::size_t classes, std::uint64_t seed) {
  NmiTriplet t;
  t.layer = emb.layer;
  t.feature_label = metrics::embedding_label_nmi(emb.features, emb.dim, labels, classes, seed);
  t.gate_label = metrics::embedding_label_nmi(emb.pi, emb.dim, labels, classes, seed);
  t.feature_gate = metrics::embedding_nmi(emb.features, emb.dim, emb.pi, emb.dim, emb.instances,
                                          classes, seed);
  return t;
}

std::vector<std::pair<std::size_t, double>> gate_similarity_ranking(const LayerEmbeddings& emb,
                                                                    std::size_t query) {
  if (query >= emb.instances) {
    throw ContractError("query " + std::to_string(query) + " outside " +
                        std::to_string(emb.instances) + " instances");
  }
  auto norm = [&](std::size_t i) {
    double acc = 0.0;
    for (std::size_t d = 0; d < emb.dim; ++d) acc += emb.pi[i * emb.dim + d] * emb.pi[i * emb.dim + d];
    return std::sqrt(acc);
  };
  const double qn = norm(query);
  std::vector<std::pair<std::size_t, double>> ranked;
  ranked.reserve(emb.instances);
  for (std::size_t i = 0; i < emb.instances; ++i) {
    double dot = 0.0;
    for (std::size_t d = 0; d < emb.dim; ++d) dot += emb.pi[query * emb.dim + d] * emb.pi[i * emb.dim + d];
    const double denom = qn * norm(i);
    ranked.emplace_back(i, denom > 0.0 ? dot / denom : 0.0);
  }
  ranked[query].second = 1.0;
  std::stable_sort(ranked.begin(), ranked.end(), [&](const auto& a, const auto& b) {
    if (a.first == query || b.first == query) return a.first == query && b.first != query;
    return a.second > b.second;
  });
  return ranked;
}

json analyze(const Checkpoint& ckpt, const data::Dataset& ds, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  nn::GatedNetwork net = network_from(ckpt);
  const nn::NetworkSpec& spec = net.spec();
  const EvalMetrics eval = evaluate(net, ds);
  const std::uint64_t seed = mix_seed(ckpt.config.seed, kNmiStream);

  json report{{"epoch", ckpt.epoch}, {"eval", to_json(eval)},
              {"flops", metrics::to_json(eval.pruning)}};
  json nmi = json::array();
  const auto embeddings = collect_embeddings(net, ds);
  const std::size_t queries = std::min(ckpt.config.analysis_queries, ds.size());
  for (const LayerEmbeddings& emb : embeddings) {
    const std::string tag = "layer" + std::to_string(emb.layer);
    if (spec.layers[emb.layer].fgc) {
      const NmiTriplet t = nmi_triplet(emb, ds.labels, spec.classes, seed);
      nmi.push_back({{"layer", t.layer},
                     {"feature_label", t.feature_label},
                     {"gate_label", t.gate_label},
                     {"feature_gate", t.feature_gate}});
    }
    write_text(out_dir / ("frequency_" + tag + ".csv"), metrics::frequency_csv(eval.pruning, emb.layer));
    write_text(out_dir / ("embeddings_" + tag + "_feature.csv"),
               embedding_csv(emb.features, emb.dim, ds.labels));
    write_text(out_dir / ("embeddings_" + tag + "_gate.csv"), embedding_csv(emb.pi, emb.dim, ds.labels));

    std::ostringstream ranking;
    ranking.precision(17);
    ranking << "query_id,rank,instance_id,similarity\n";
    for (std::size_t q = 0; q < queries; ++q) {
      const std::size_t query = q * ds.size() / queries;
      const auto ranked = gate_similarity_ranking(emb, query);
      for (std::size_t r = 0; r < ranked.size(); ++r) {
        ranking << query << ',' << r << ',' << ranked[r].first << ',' << ranked[r].second << '\n';
      }
    }
    write_text(out_dir / ("gate_ranking_" + tag + ".csv"), ranking.str());
  }
  report["nmi"] = nmi;

  // Neighbor sets as stored in the training-time feature banks.
  for (const auto& [name, t] : ckpt.tensors) {
    const std::string prefix = "fgc.", suffix = ".feature_bank";
    if (name.rfind(prefix, 0) != 0 || !name.ends_with(suffix)) continue;
    const std::string layer = name.substr(prefix.size(), name.size() - prefix.size() - suffix.size());
    const std::size_t rows = t.dim(0), dim = t.dim(1);
    coupling::MemoryBank bank(rows, dim, ckpt.config.fgc.bank_momentum, coupling::BankKind::feature,
                              std::vector<double>(t.data().begin(), t.data().end()));
    const std::size_t k = std::min(ckpt.config.fgc.k, rows - 1);
    std::vector<coupling::NeighborSet> sets;
    for (std::size_t i = 0; i < rows; ++i) {
      coupling::NeighborSet s = coupling::topk_neighbors(
          coupling::similarity_row(bank.row(i), bank, i, ckpt.config.fgc.similarity), k);
      s.instance = i;
      sets.push_back(std::move(s));
    }
    write_text(out_dir / ("neighbors_layer" + layer + ".csv"), coupling::neighbors_csv(sets));
  }

  json nmi_doc{{"nmi", nmi}};
  write_text(out_dir / "nmi.json", nmi_doc.dump(2) + "\n");
  write_text(out_dir / "report.json", report.dump(2) + "\n");
  return report;
}

}  // namespace fgc::harness
