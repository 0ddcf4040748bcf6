#include <algorithm>
#include <cmath>

#include "fgc/error.hpp"
#include "fgc/harness.hpp"

namespace fgc::harness {

using nlohmann::json;

namespace {

// Seed tags for the independent random streams of a run.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kBankStream = 2;
constexpr std::uint64_t kTrainStream = 3;
constexpr std::uint64_t kBatchStream = 4;
constexpr std::uint64_t kTestSplitTag = 0x7e57;
constexpr std::size_t kEvalBatch = 250;

template <typename F>
auto component(const std::string& name, F&& f) {
  try {
    return f();
  } catch (const NumericError& e) {
    throw NumericError(name + " is not finite (" + e.what() + ")");
  }
}

void require_finite(const std::string& name, double v) {
  if (!std::isfinite(v)) throw NumericError(name + " is not finite");
}

RunConfig prepared(RunConfig config, const data::Dataset& train) {
  config.finalize();
  config.validate();
  config.validate_against(train);
  return config;
}

void copy_into(const Tensor& dst, const Tensor& src, const std::string& name) {
  if (dst.shape() != src.shape()) {
    throw ContractError("checkpoint tensor " + name + " has shape " + shape_string(src.shape()) +
                        ", model expects " + shape_string(dst.shape()));
  }
  auto d = dst.mutable_data();
  auto s = src.data();
  std::copy(s.begin(), s.end(), d.begin());
}

std::string key(std::size_t layer) { return std::to_string(layer); }

}  // namespace

Datasets load_datasets(const RunConfig& config) {
  Datasets out;
  if (config.dataset.kind == "synth") {
    out.train = data::synth_clusters(config.dataset.synth);
    data::SynthOptions test = config.dataset.synth;
    test.per_class = config.dataset.test_per_class;
    test.seed = mix_seed(config.dataset.synth.seed, kTestSplitTag);
    out.test = data::synth_clusters(test, out.train.stats, data::Split::test);
  } else {
    out.train = data::read_idx(config.dataset.train_images, config.dataset.train_labels);
    if (!config.dataset.test_images.empty()) {
      out.test = data::read_idx(config.dataset.test_images, config.dataset.test_labels,
                                out.train.stats, data::Split::test);
    }
  }
  return out;
}

EvalMetrics evaluate(nn::GatedNetwork& net, const data::Dataset& ds, nn::GateOverride override) {
  NoGradGuard no_grad;
  const nn::NetworkSpec& spec = net.spec();
  std::vector<metrics::LayerMasks> masks;
  for (std::size_t l : spec.gated_layers()) {
    masks.push_back({l, ds.size(), spec.layers[l].out_channels, {}});
  }
  Rng unused(0);  // eval mode draws no noise
  std::size_t correct = 0;
  for (std::size_t start = 0; start < ds.size(); start += kEvalBatch) {
    std::vector<std::size_t> ids;
    for (std::size_t i = start; i < std::min(ds.size(), start + kEvalBatch); ++i) ids.push_back(i);
    nn::NetworkOutput out = net.forward(ds.batch_images(ids), Mode::eval, unused, override);
    const std::size_t classes = out.logits.dim(1);
    auto logits = out.logits.data();
    for (std::size_t b = 0; b < ids.size(); ++b) {
      auto row = logits.subspan(b * classes, classes);
      const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == ds.labels[ids[b]]) ++correct;
    }
    for (std::size_t g = 0; g < out.gated.size(); ++g) {
      for (double v : out.gated[g].gate.gate.data()) {
        masks[g].open.push_back(override == nn::GateOverride::force_open || v != 0.0 ? 1 : 0);
      }
    }
  }
  EvalMetrics m;
  m.instances = ds.size();
  m.accuracy = static_cast<double>(correct) / static_cast<double>(ds.size());
  m.error = 1.0 - m.accuracy;
  m.pruning = metrics::pruning_ratio(spec, masks, ds.labels, spec.classes);
  return m;
}

json to_json(const EvalMetrics& m) {
  return json{{"instances", m.instances},
              {"accuracy", m.accuracy},
              {"error", m.error},
              {"pruning_ratio", m.pruning.pruning_ratio},
              {"pruning_ratio_with_overhead", m.pruning.pruning_ratio_with_overhead}};
}

Trainer::Trainer(RunConfig config, const data::Dataset& train, const data::Dataset* eval)
    : config_(prepared(std::move(config), train)),
      train_(train),
      eval_(eval),
      net_(config_.network, mix_seed(config_.seed, kInitStream)),
      optimizer_(SgdOptions{config_.optimizer.lr, config_.optimizer.momentum,
                            config_.optimizer.weight_decay}),
      rng_(mix_seed(config_.seed, kTrainStream)) {
  Rng bank_rng(mix_seed(config_.seed, kBankStream));
  std::vector<std::size_t> omega = config_.fgc.layers;
  std::sort(omega.begin(), omega.end());
  const bool shared = config_.fgc.neighbor_source == coupling::NeighborSource::feature_shared;
  for (std::size_t l : omega) {
    coupling::FgcOptions o{config_.fgc.k, config_.fgc.tau, config_.fgc.bank_momentum,
                           config_.fgc.neighbor_source, config_.fgc.similarity};
    // The source layer of a shared regime explores its own feature bank.
    if (shared && l == config_.shared_source_layer()) o.source = coupling::NeighborSource::feature;
    fgc_.emplace(l, coupling::FgcLayerState(l, train_.size(), config_.network.layers[l].out_channels,
                                            o, bank_rng));
  }
}

std::vector<std::size_t> Trainer::fgc_order() const {
  std::vector<std::size_t> order;
  const bool shared = config_.fgc.neighbor_source == coupling::NeighborSource::feature_shared;
  if (shared) order.push_back(config_.shared_source_layer());
  for (const auto& [l, state] : fgc_) {
    if (!shared || l != config_.shared_source_layer()) order.push_back(l);
  }
  return order;
}

Trainer::StepResult Trainer::step(const std::vector<std::size_t>& ids) {
  Tape tape;
  const std::vector<int> labels = train_.batch_labels(ids);
  nn::NetworkOutput out = component("network forward", [&] {
    return net_.forward(train_.batch_images(ids), Mode::train, rng_);
  });
  Tensor ce = component("cross-entropy loss",
                        [&] { return metrics::cross_entropy(out.logits, labels); });

  std::map<std::size_t, Tensor> l0, lg;
  std::map<std::size_t, const nn::GatedLayerOutput*> by_layer;
  for (const nn::GatedLayerOutput& g : out.gated) {
    by_layer[g.layer] = &g;
    l0[g.layer] = component("L0 surrogate of layer " + key(g.layer),
                            [&] { return metrics::l0_surrogate(g.gate); });
  }

  std::vector<coupling::NeighborSet> shared;
  for (std::size_t l : fgc_order()) {
    const nn::GatedLayerOutput& g = *by_layer.at(l);
    coupling::AlignInputs in;
    in.pooled_features = g.pooled_feature;
    in.pi = g.gate.pi;
    in.ids = ids;
    in.dataset_labels = train_.labels;
    in.shared = &shared;
    in.rng = &rng_;
    const std::string name = "contrastive loss of layer " + key(l);
    coupling::AlignResult r = component(name, [&] {
      if (config_.fgc.eta > 0.0) return fgc_.at(l).explore_and_align(in);
      // Diagnostic only: keep the banks and the logged trace without gradients.
      NoGradGuard no_grad;
      return fgc_.at(l).explore_and_align(in);
    });
    require_finite(name, r.loss.item());
    if (l == fgc_order().front()) shared = r.neighbors;
    lg[l] = r.loss;
  }

  metrics::Objective obj =
      component("total loss", [&] { return metrics::total_loss(ce, lg, l0, config_.fgc.eta, config_.rho); });
  require_finite("cross-entropy loss", obj.breakdown.ce);
  for (const auto& [l, v] : obj.breakdown.l0) require_finite("L0 surrogate of layer " + key(l), v);
  require_finite("total loss", obj.breakdown.total);
  component("backward pass", [&] {
    tape.backward(obj.total);
    return 0;
  });

  std::vector<NamedTensor> params = net_.parameters();
  if (!config_.optimizer.gate_no_decay) {
    for (NamedTensor& p : params) p.decay = true;
  }
  optimizer_.step(params);
  for (const NamedTensor& p : params) {
    for (double v : p.tensor.data()) require_finite("parameter " + p.name, v);
  }

  StepResult r;
  r.ce = obj.breakdown.ce;
  r.total = obj.breakdown.total;
  r.lg = obj.breakdown.contrastive;
  r.l0 = obj.breakdown.l0;
  const std::size_t classes = out.logits.dim(1);
  auto logits = out.logits.data();
  for (std::size_t b = 0; b < ids.size(); ++b) {
    auto row = logits.subspan(b * classes, classes);
    if (std::max_element(row.begin(), row.end()) - row.begin() == labels[b]) ++r.correct;
  }
  return r;
}

json Trainer::run_epoch() {
  if (finished()) throw ContractError("training already reached its epoch budget");
  const double lr = config_.optimizer.lr_at(epoch_);
  optimizer_.set_lr(lr);
  const std::size_t n = train_.size();
  const data::BatchPlan plan =
      data::batches(n, config_.batch_size, mix_seed(config_.seed, kBatchStream), epoch_);

  double ce = 0.0, total = 0.0;
  std::size_t correct = 0;
  std::map<std::size_t, double> lg, l0, step_max_bound;
  const double log_n = std::log(static_cast<double>(n));
  for (const auto& ids : plan.batches) {
    StepResult s = step(ids);
    const double w = static_cast<double>(ids.size());
    ce += w * s.ce;
    total += w * s.total;
    correct += s.correct;
    for (const auto& [l, v] : s.lg) {
      lg[l] += w * v;
      const double bound =
          metrics::mi_lower_bound(v, n, fgc_.at(l).effective_k()).bound_per_pair;
      auto it = step_max_bound.find(l);
      if (it == step_max_bound.end() || bound > it->second) step_max_bound[l] = bound;
    }
    for (const auto& [l, v] : s.l0) l0[l] += w * v;
  }
  ++epoch_;

  const double dn = static_cast<double>(n);
  json record{{"event", "epoch"},
              {"epoch", epoch_},
              {"lr", lr},
              {"ce", ce / dn},
              {"total", total / dn},
              {"train_accuracy", static_cast<double>(correct) / dn}};
  json jlg = json::object(), jl0 = json::object(), jmi = json::object();
  for (const auto& [l, v] : lg) {
    jlg[key(l)] = v / dn;
    const metrics::MiBound b = metrics::mi_lower_bound(v / dn, n, fgc_.at(l).effective_k());
    jmi[key(l)] = {{"log_n", log_n},
                   {"bound_sum", b.bound_sum},
                   {"bound_per_pair", b.bound_per_pair},
                   {"step_max_bound_per_pair", step_max_bound.at(l)}};
  }
  for (const auto& [l, v] : l0) jl0[key(l)] = v / dn;
  record["l_g"] = jlg;
  record["l0"] = jl0;
  record["mi"] = jmi;
  if (eval_) record["eval"] = to_json(evaluate(net_, *eval_));
  return record;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ckpt;
  ckpt.config = config_;
  ckpt.config_hash = config_hash(config_);
  ckpt.epoch = epoch_;
  ckpt.rng_state = rng_.state();
  const nn::GatedNetwork& net = net_;
  for (const NamedTensor& p : net.parameters()) ckpt.tensors.emplace_back(p.name, p.tensor.clone());
  for (const NamedTensor& b : net.buffers()) ckpt.tensors.emplace_back(b.name, b.tensor.clone());
  for (const auto& [l, state] : fgc_) {
    const auto& fb = state.feature_bank();
    const auto& gb = state.gate_bank();
    const std::vector<double> fv(fb.entries().begin(), fb.entries().end());
    const std::vector<double> gv(gb.entries().begin(), gb.entries().end());
    ckpt.tensors.emplace_back("fgc." + key(l) + ".feature_bank", Tensor({fb.rows(), fb.dim()}, fv));
    ckpt.tensors.emplace_back("fgc." + key(l) + ".gate_bank", Tensor({gb.rows(), gb.dim()}, gv));
  }
  for (const NamedTensor& p : net.parameters()) {
    auto it = optimizer_.velocities().find(p.name);
    if (it != optimizer_.velocities().end()) {
      ckpt.tensors.emplace_back("optim.velocity." + p.name, Tensor(p.tensor.shape(), it->second));
    }
  }
  return ckpt;
}

void Trainer::restore(const Checkpoint& ckpt) {
  if (ckpt.config_hash != config_hash(config_)) {
    throw ContractError("checkpoint belongs to a different run configuration");
  }
  for (const NamedTensor& p : net_.parameters()) copy_into(p.tensor, ckpt.tensor(p.name), p.name);
  for (const NamedTensor& b : net_.buffers()) copy_into(b.tensor, ckpt.tensor(b.name), b.name);
  for (auto& [l, state] : fgc_) {
    for (auto [bank, suffix] : {std::pair{&state.feature_bank(), ".feature_bank"},
                                std::pair{&state.gate_bank(), ".gate_bank"}}) {
      const std::string name = "fgc." + key(l) + suffix;
      const Tensor& t = ckpt.tensor(name);
      if (t.shape() != Shape{bank->rows(), bank->dim()}) {
        throw ContractError("checkpoint bank " + name + " has shape " + shape_string(t.shape()));
      }
      for (std::size_t r = 0; r < bank->rows(); ++r) {
        bank->set_row(r, t.data().subspan(r * bank->dim(), bank->dim()));
      }
    }
  }
  for (const NamedTensor& p : net_.parameters()) {
    const std::string name = "optim.velocity." + p.name;
    for (const auto& [n, t] : ckpt.tensors) {
      if (n == name) optimizer_.set_velocity(p.name, {t.data().begin(), t.data().end()});
    }
  }
  epoch_ = ckpt.epoch;
  rng_.set_state(ckpt.rng_state);
}

void train(Trainer& trainer, const LogSink& sink,
           const std::optional<std::filesystem::path>& checkpoint_path) {
  while (!trainer.finished()) {
    json record = trainer.run_epoch();
    if (sink) sink(record);
    if (checkpoint_path) save_checkpoint(trainer.checkpoint(), *checkpoint_path);
  }
}

nn::GatedNetwork network_from(const Checkpoint& ckpt) {
  RunConfig config = ckpt.config;
  config.finalize();
  nn::GatedNetwork net(config.network, mix_seed(config.seed, kInitStream));
  for (const NamedTensor& p : net.parameters()) copy_into(p.tensor, ckpt.tensor(p.name), p.name);
  for (const NamedTensor& b : net.buffers()) copy_into(b.tensor, ckpt.tensor(b.name), b.name);
  return net;
}

}  // namespace fgc::harness
