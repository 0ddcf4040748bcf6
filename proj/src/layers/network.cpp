#include "fgc/network.hpp"

#include <algorithm>
#include <cmath>

#include "fgc/error.hpp"

namespace fgc::nn {

Tensor open_probability(const Tensor& logits, const HardConcrete& hc) {
  return sigmoid(add_scalar(logits, hc.open_shift()));
}

Tensor logistic_noise(const Shape& shape, Rng& rng) {
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) {
    const double u = rng.uniform_open();
    v = std::log(u) - std::log1p(-u);
  }
  return Tensor(shape, std::move(values));
}

Tensor hard_concrete_sample(const Tensor& logits, const Tensor& noise, const HardConcrete& hc) {
  Tensor s = sigmoid(scale(add(logits, noise), 1.0 / hc.temperature));
  Tensor stretched = add_scalar(scale(s, hc.zeta - hc.gamma), hc.gamma);
  return clamp(stretched, 0.0, 1.0);
}

Tensor hard_gate(const Tensor& pi) {
  std::vector<double> values(pi.numel());
  auto pd = pi.data();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = gate_open(pd[i]) ? 1.0 : 0.0;
  return Tensor(pi.shape(), std::move(values));
}

GateState gating_forward(const Tensor& x_prev, const GatingModuleParams& params, Mode mode,
                         Rng& rng, const HardConcrete& hc) {
  const std::size_t in_channels = x_prev.rank() >= 2 ? x_prev.dim(1) : 0;
  if (x_prev.rank() < 2 || params.fc1_weight.dim(0) != in_channels) {
    throw DimensionError("gating module expects " + std::to_string(params.fc1_weight.dim(0)) +
                         " input channels, got input " + shape_string(x_prev.shape()));
  }
  Tensor pooled = x_prev.rank() == 4 ? global_avg_pool(x_prev) : x_prev;
  Tensor hidden = relu(add_bias(matmul(pooled, params.fc1_weight), params.fc1_bias));
  GateState state;
  state.logits = add_bias(matmul(hidden, params.fc2_weight), params.fc2_bias);
  state.pi = open_probability(state.logits, hc);
  if (mode == Mode::train) {
    state.gate = hard_concrete_sample(state.logits, logistic_noise(state.logits.shape(), rng), hc);
  } else {
    state.gate = hard_gate(state.pi);
  }
  return state;
}

namespace {

const char* kind_name(LayerKind k) { return k == LayerKind::conv ? "conv" : "fc"; }

LayerKind kind_from(const std::string& name) {
  if (name == "conv") return LayerKind::conv;
  if (name == "fc") return LayerKind::fc;
  throw ConfigError("unknown layer kind '" + name + "' (expected conv or fc)");
}

}  // namespace

void NetworkSpec::validate() const {
  if (input_channels == 0 || input_height == 0 || input_width == 0) {
    throw ConfigError("network input extents must be positive");
  }
  if (layers.empty()) throw ConfigError("network needs at least one layer");
  if (classes < 2) throw ConfigError("network needs at least two classes");
  if (!(gate_hidden_ratio > 0.0)) throw ConfigError("gate_hidden_ratio must be positive");
  bool seen_fc = false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string where = "layer " + std::to_string(i) + ": ";
    if (l.out_channels == 0) throw ConfigError(where + "out_channels must be positive");
    if (l.fgc && !l.gated) throw ConfigError(where + "fgc requires a gated layer");
    if (l.kind == LayerKind::conv && seen_fc) {
      throw ConfigError(where + "conv layers cannot follow fc layers");
    }
    if (l.kind == LayerKind::conv && (l.kernel == 0 || l.stride == 0)) {
      throw ConfigError(where + "kernel and stride must be positive");
    }
    seen_fc = seen_fc || l.kind == LayerKind::fc;
  }
  (void)shapes();
}

std::vector<LayerShape> NetworkSpec::shapes() const {
  std::vector<LayerShape> out;
  std::size_t c = input_channels, h = input_height, w = input_width;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    LayerShape s{c, h, w, l.out_channels, 1, 1};
    if (l.kind == LayerKind::conv) {
      try {
        s.out_height = conv_output_extent(h, l.kernel, {l.stride, l.padding});
        s.out_width = conv_output_extent(w, l.kernel, {l.stride, l.padding});
      } catch (const ConfigError& e) {
        throw ConfigError("layer " + std::to_string(i) + ": " + e.what());
      }
    }
    out.push_back(s);
    c = s.out_channels;
    h = s.out_height;
    w = s.out_width;
  }
  return out;
}

std::size_t NetworkSpec::gate_hidden(std::size_t layer) const {
  const double scaled = std::floor(static_cast<double>(layers.at(layer).out_channels) *
                                   gate_hidden_ratio);
  return std::max(static_cast<std::size_t>(scaled), gate_hidden_min);
}

std::vector<std::size_t> NetworkSpec::gated_layers() const {
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].gated) ids.push_back(i);
  }
  return ids;
}

std::vector<std::size_t> NetworkSpec::fgc_layers() const {
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].fgc) ids.push_back(i);
  }
  return ids;
}

void NetworkSpec::set_fgc_layers(std::span<const std::size_t> omega) {
  for (std::size_t id : omega) {
    if (id >= layers.size()) {
      throw ConfigError("fgc layer " + std::to_string(id) + " does not exist (network has " +
                        std::to_string(layers.size()) + " layers)");
    }
    if (!layers[id].gated) {
      throw ConfigError("fgc layer " + std::to_string(id) + " is not gated");
    }
  }
  for (auto& l : layers) l.fgc = false;
  for (std::size_t id : omega) layers[id].fgc = true;
}

void to_json(nlohmann::json& j, const NetworkSpec& spec) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerSpec& l : spec.layers) {
    nlohmann::json e{{"kind", kind_name(l.kind)},
                     {"out_channels", l.out_channels},
                     {"gated", l.gated},
                     {"fgc", l.fgc}};
    if (l.kind == LayerKind::conv) {
      e["kernel"] = l.kernel;
      e["stride"] = l.stride;
      e["padding"] = l.padding;
    }
    layers.push_back(std::move(e));
  }
  j = nlohmann::json{
      {"input", {spec.input_channels, spec.input_height, spec.input_width}},
      {"classes", spec.classes},
      {"layers", std::move(layers)},
      {"gate_hidden_ratio", spec.gate_hidden_ratio},
      {"gate_hidden_min", spec.gate_hidden_min},
      {"gate_bias_init", spec.gate_bias_init},
      {"hard_concrete",
       {{"temperature", spec.hard_concrete.temperature},
        {"gamma", spec.hard_concrete.gamma},
        {"zeta", spec.hard_concrete.zeta}}},
  };
}

void from_json(const nlohmann::json& j, NetworkSpec& spec) {
  spec = NetworkSpec{};
  if (j.contains("input")) {
    const auto& in = j.at("input");
    if (!in.is_array() || in.size() != 3) {
      throw ConfigError("network.input must be [channels, height, width]");
    }
    spec.input_channels = in[0].get<std::size_t>();
    spec.input_height = in[1].get<std::size_t>();
    spec.input_width = in[2].get<std::size_t>();
  }
  spec.classes = j.value("classes", spec.classes);
  spec.gate_hidden_ratio = j.value("gate_hidden_ratio", spec.gate_hidden_ratio);
  spec.gate_hidden_min = j.value("gate_hidden_min", spec.gate_hidden_min);
  spec.gate_bias_init = j.value("gate_bias_init", spec.gate_bias_init);
  if (j.contains("hard_concrete")) {
    const auto& hc = j.at("hard_concrete");
    spec.hard_concrete.temperature = hc.value("temperature", spec.hard_concrete.temperature);
    spec.hard_concrete.gamma = hc.value("gamma", spec.hard_concrete.gamma);
    spec.hard_concrete.zeta = hc.value("zeta", spec.hard_concrete.zeta);
  }
  if (!j.contains("layers") || !j.at("layers").is_array()) {
    throw ConfigError("network.layers must be an array");
  }
  for (const auto& e : j.at("layers")) {
    LayerSpec l;
    l.kind = kind_from(e.value("kind", std::string("conv")));
    l.out_channels = e.at("out_channels").get<std::size_t>();
    l.kernel = e.value("kernel", l.kernel);
    l.stride = e.value("stride", l.stride);
    l.padding = e.value("padding", l.padding);
    l.gated = e.value("gated", false);
    l.fgc = e.value("fgc", false);
    spec.layers.push_back(l);
  }
}

LayerForward gated_layer_forward(const Tensor& x_prev, const LayerSpec& spec,
                                 LayerParams& params, Mode mode, Rng& rng,
                                 const HardConcrete& hc, GateOverride override) {
  Tensor z;
  if (spec.kind == LayerKind::conv) {
    z = conv2d(x_prev, params.weight, {spec.stride, spec.padding});
  } else {
    const std::size_t n = x_prev.dim(0);
    Tensor flat = x_prev.rank() == 2 ? x_prev : reshape(x_prev, {n, x_prev.numel() / n});
    z = matmul(flat, params.weight);
  }
  LayerForward out;
  out.feature = relu(batchnorm(z, params.bn_gamma, params.bn_beta, params.bn, mode));
  if (!spec.gated) {
    out.output = out.feature;
    return out;
  }
  if (!params.gating) throw ContractError("gated layer without gating-module parameters");
  out.gate = gating_forward(x_prev, *params.gating, mode, rng, hc);
  if (override == GateOverride::force_open) {
    out.output = channel_mul(out.feature, Tensor::full(out.gate->gate.shape(), 1.0));
  } else {
    out.output = channel_mul(out.feature, out.gate->gate);
  }
  return out;
}

namespace {

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = stddev * rng.normal();
  return Tensor(std::move(shape), std::move(v), true);
}

}  // namespace

GatedNetwork::GatedNetwork(NetworkSpec spec, std::uint64_t init_seed)
    : spec_(std::move(spec)) {
  spec_.validate();
  shapes_ = spec_.shapes();
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const LayerSpec& l = spec_.layers[i];
    const LayerShape& s = shapes_[i];
    Rng weights_rng(mix_seed(init_seed, 2 * i));
    LayerParams p;
    if (l.kind == LayerKind::conv) {
      const double fan_in = static_cast<double>(s.in_channels * l.kernel * l.kernel);
      p.weight = normal_tensor({l.out_channels, s.in_channels, l.kernel, l.kernel},
                               std::sqrt(2.0 / fan_in), weights_rng);
    } else {
      const double fan_in = static_cast<double>(s.in_features());
      p.weight = normal_tensor({s.in_features(), l.out_channels}, std::sqrt(2.0 / fan_in),
                               weights_rng);
    }
    p.bn_gamma = Tensor::full({l.out_channels}, 1.0, true);
    p.bn_beta = Tensor::zeros({l.out_channels}, true);
    p.bn = BatchNormState::identity(l.out_channels);
    if (l.gated) {
      Rng gate_rng(mix_seed(init_seed, 2 * i + 1));
      const std::size_t hidden = spec_.gate_hidden(i);
      GatingModuleParams g;
      g.fc1_weight = normal_tensor({s.in_channels, hidden},
                                   std::sqrt(2.0 / static_cast<double>(s.in_channels)), gate_rng);
      g.fc1_bias = Tensor::zeros({hidden}, true);
      g.fc2_weight = normal_tensor({hidden, l.out_channels},
                                   std::sqrt(1.0 / static_cast<double>(hidden)), gate_rng);
      g.fc2_bias = Tensor::full({l.out_channels}, spec_.gate_bias_init, true);
      p.gating = std::move(g);
    }
    layers_.push_back(std::move(p));
  }
  Rng head_rng(mix_seed(init_seed, 0xfeedULL));
  const std::size_t last = shapes_.back().out_channels;
  head_weight_ = normal_tensor({last, spec_.classes},
                               std::sqrt(1.0 / static_cast<double>(last)), head_rng);
  head_bias_ = Tensor::zeros({spec_.classes}, true);
}

NetworkOutput GatedNetwork::forward(const Tensor& x, Mode mode, Rng& rng,
                                    GateOverride override) {
  if (x.rank() != 4 || x.dim(1) != spec_.input_channels || x.dim(2) != spec_.input_height ||
      x.dim(3) != spec_.input_width) {
    throw DimensionError("network input " + shape_string(x.shape()) + " does not match [N, " +
                         std::to_string(spec_.input_channels) + ", " +
                         std::to_string(spec_.input_height) + ", " +
                         std::to_string(spec_.input_width) + "]");
  }
  NetworkOutput out;
  Tensor cur = x;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    LayerForward lf = gated_layer_forward(cur, spec_.layers[i], layers_[i], mode, rng,
                                          spec_.hard_concrete, override);
    if (lf.gate) {
      GatedLayerOutput g;
      g.layer = i;
      g.fgc = spec_.layers[i].fgc;
      g.pooled_feature = lf.feature.rank() == 4 ? global_avg_pool(lf.feature) : lf.feature;
      g.gate = std::move(*lf.gate);
      out.gated.push_back(std::move(g));
    }
    cur = lf.output;
  }
  Tensor pooled = cur.rank() == 4 ? global_avg_pool(cur) : cur;
  out.logits = add_bias(matmul(pooled, head_weight_), head_bias_);
  return out;
}

PrunedInference GatedNetwork::infer_pruned(std::span<const double> image) const {
  const std::size_t in_size = spec_.input_channels * spec_.input_height * spec_.input_width;
  if (image.size() != in_size) {
    throw DimensionError("infer_pruned: image has " + std::to_string(image.size()) +
                         " values, expected " + std::to_string(in_size));
  }
  PrunedInference result;
  std::vector<double> cur(image.begin(), image.end());
  std::vector<bool> open(spec_.input_channels, true);
  const double shift = spec_.hard_concrete.open_shift();

  // Pooled channel descriptor; closed channels are zero maps.
  auto pool = [](const std::vector<double>& act, const std::vector<bool>& is_open,
                 std::size_t channels, std::size_t hw) {
    std::vector<double> pooled(channels, 0.0);
    const double denom = static_cast<double>(hw);
    for (std::size_t c = 0; c < channels; ++c) {
      if (!is_open[c]) continue;
      double acc = 0.0;
      for (std::size_t i = 0; i < hw; ++i) acc += act[c * hw + i];
      pooled[c] = acc / denom;
    }
    return pooled;
  };

  for (std::size_t li = 0; li < spec_.layers.size(); ++li) {
    const LayerSpec& l = spec_.layers[li];
    const LayerShape& s = shapes_[li];
    const LayerParams& p = layers_[li];
    const std::size_t in_hw = s.in_height * s.in_width;
    const std::size_t out_hw = s.out_height * s.out_width;

    std::vector<bool> out_open(l.out_channels, true);
    if (l.gated) {
      const GatingModuleParams& g = *p.gating;
      const std::size_t hidden = g.fc1_bias.numel();
      std::vector<double> pooled = pool(cur, open, s.in_channels, in_hw);
      auto w1 = g.fc1_weight.data();
      auto b1 = g.fc1_bias.data();
      auto w2 = g.fc2_weight.data();
      auto b2 = g.fc2_bias.data();
      std::vector<double> h(hidden, 0.0);
      for (std::size_t c = 0; c < s.in_channels; ++c) {
        for (std::size_t j = 0; j < hidden; ++j) h[j] += pooled[c] * w1[c * hidden + j];
      }
      for (std::size_t j = 0; j < hidden; ++j) {
        const double v = h[j] + b1[j];
        h[j] = v > 0.0 ? v : 0.0;
      }
      std::vector<double> logit(l.out_channels, 0.0);
      for (std::size_t j = 0; j < hidden; ++j) {
        for (std::size_t k = 0; k < l.out_channels; ++k) {
          logit[k] += h[j] * w2[j * l.out_channels + k];
        }
      }
      for (std::size_t k = 0; k < l.out_channels; ++k) {
        out_open[k] = gate_open(sigmoid_value((logit[k] + b2[k]) + shift));
      }
      result.open.push_back(out_open);
    }

    std::vector<double> next(l.out_channels * out_hw, 0.0);
    auto w = p.weight.data();
    auto rm = p.bn.running_mean.data();
    auto rv = p.bn.running_var.data();
    auto gamma = p.bn_gamma.data();
    auto beta = p.bn_beta.data();
    for (std::size_t k = 0; k < l.out_channels; ++k) {
      if (!out_open[k]) continue;
      for (std::size_t pos = 0; pos < out_hw; ++pos) {
        double acc = 0.0;
        if (l.kind == LayerKind::conv) {
          const std::size_t oh = pos / s.out_width, ow = pos % s.out_width;
          for (std::size_t c = 0; c < s.in_channels; ++c) {
            if (!open[c]) continue;
            for (std::size_t kr = 0; kr < l.kernel; ++kr) {
              const long ih = static_cast<long>(oh * l.stride + kr) - static_cast<long>(l.padding);
              if (ih < 0 || ih >= static_cast<long>(s.in_height)) continue;
              for (std::size_t ks = 0; ks < l.kernel; ++ks) {
                const long iw =
                    static_cast<long>(ow * l.stride + ks) - static_cast<long>(l.padding);
                if (iw < 0 || iw >= static_cast<long>(s.in_width)) continue;
                acc += w[((k * s.in_channels + c) * l.kernel + kr) * l.kernel + ks] *
                       cur[(c * s.in_height + ih) * s.in_width + iw];
              }
            }
          }
        } else {
          for (std::size_t c = 0; c < s.in_channels; ++c) {
            if (!open[c]) continue;
            for (std::size_t i = 0; i < in_hw; ++i) {
              const std::size_t f = c * in_hw + i;
              acc += cur[f] * w[f * l.out_channels + k];
            }
          }
        }
        const double v = batchnorm_eval_value(acc, rm[k], rv[k], gamma[k], beta[k], p.bn.eps);
        next[k * out_hw + pos] = v > 0.0 ? v : 0.0;
      }
    }
    std::size_t open_in = 0, open_out = 0;
    for (bool b : open) open_in += b ? 1 : 0;
    for (bool b : out_open) open_out += b ? 1 : 0;
    const std::size_t per_pair =
        l.kind == LayerKind::conv ? l.kernel * l.kernel * out_hw : in_hw;
    result.executed_macs += static_cast<std::uint64_t>(open_in * open_out * per_pair);
    cur = std::move(next);
    open = std::move(out_open);
  }

  const LayerShape& last = shapes_.back();
  const std::size_t last_hw = last.out_height * last.out_width;
  std::vector<double> pooled = pool(cur, open, last.out_channels, last_hw);
  auto hw_ = head_weight_.data();
  auto hb = head_bias_.data();
  result.logits.assign(spec_.classes, 0.0);
  std::size_t open_last = 0;
  for (std::size_t c = 0; c < last.out_channels; ++c) {
    if (!open[c]) continue;
    ++open_last;
    for (std::size_t j = 0; j < spec_.classes; ++j) {
      result.logits[j] += pooled[c] * hw_[c * spec_.classes + j];
    }
  }
  for (std::size_t j = 0; j < spec_.classes; ++j) result.logits[j] = result.logits[j] + hb[j];
  result.executed_macs += static_cast<std::uint64_t>(open_last * spec_.classes);
  return result;
}

std::vector<NamedTensor> GatedNetwork::parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string prefix = "layers." + std::to_string(i) + ".";
    const LayerParams& p = layers_[i];
    out.push_back({prefix + "weight", p.weight, true});
    out.push_back({prefix + "bn.gamma", p.bn_gamma, true});
    out.push_back({prefix + "bn.beta", p.bn_beta, true});
    if (p.gating) {
      out.push_back({prefix + "gate.fc1.weight", p.gating->fc1_weight, false});
      out.push_back({prefix + "gate.fc1.bias", p.gating->fc1_bias, false});
      out.push_back({prefix + "gate.fc2.weight", p.gating->fc2_weight, false});
      out.push_back({prefix + "gate.fc2.bias", p.gating->fc2_bias, false});
    }
  }
  out.push_back({"head.weight", head_weight_, true});
  out.push_back({"head.bias", head_bias_, true});
  return out;
}

std::vector<NamedTensor> GatedNetwork::buffers() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string prefix = "layers." + std::to_string(i) + ".bn.";
    out.push_back({prefix + "running_mean", layers_[i].bn.running_mean, false});
    out.push_back({prefix + "running_var", layers_[i].bn.running_var, false});
  }
  return out;
}

}  // namespace fgc::nn
