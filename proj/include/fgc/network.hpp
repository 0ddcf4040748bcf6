#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fgc/ops.hpp"
#include "fgc/optim.hpp"
#include "fgc/rng.hpp"
#include "fgc/tensor.hpp"

namespace fgc::nn {

// Stretched hard-concrete relaxation of a Bernoulli gate.
struct HardConcrete {
  double temperature = 2.0 / 3.0;
  double gamma = -0.1;  // stretch lower end
  double zeta = 1.1;    // stretch upper end

  // Offset added to the logits to get the probability that the clamped
  // sample is non-zero: q = sigmoid(logits - temperature * log(-gamma / zeta)).
  double open_shift() const { return -temperature * std::log(-gamma / zeta); }
};

// Expected-open probability, the gating probability used by banks, the
// contrastive loss and the L0 surrogate.
Tensor open_probability(const Tensor& logits, const HardConcrete& hc);
// Logistic noise log(u) - log(1-u), u ~ U(0,1), as a constant tensor.
Tensor logistic_noise(const Shape& shape, Rng& rng);
// Reparameterized relaxed gate in [0,1], differentiable w.r.t. logits.
Tensor hard_concrete_sample(const Tensor& logits, const Tensor& noise, const HardConcrete& hc);
// Deterministic eval gate: 1 where pi >= 0.5, else 0.
Tensor hard_gate(const Tensor& pi);
inline bool gate_open(double pi) { return pi >= 0.5; }

struct GatingModuleParams {
  Tensor fc1_weight;  // [C_in, hidden]
  Tensor fc1_bias;    // [hidden]
  Tensor fc2_weight;  // [hidden, C_out]
  Tensor fc2_bias;    // [C_out]
};

struct GateState {
  Tensor logits;  // [N, C]
  Tensor pi;      // [N, C], in (0,1)
  Tensor gate;    // [N, C], relaxed in train mode, {0,1} in eval mode
};

GateState gating_forward(const Tensor& x_prev, const GatingModuleParams& params, Mode mode,
                         Rng& rng, const HardConcrete& hc = {});

enum class LayerKind { conv, fc };

struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  bool gated = false;
  bool fgc = false;
};

struct LayerShape {
  std::size_t in_channels, in_height, in_width;
  std::size_t out_channels, out_height, out_width;
  std::size_t in_features() const { return in_channels * in_height * in_width; }
};

struct NetworkSpec {
  std::size_t input_channels = 1;
  std::size_t input_height = 16;
  std::size_t input_width = 16;
  std::vector<LayerSpec> layers;
  std::size_t classes = 2;
  double gate_hidden_ratio = 0.25;
  std::size_t gate_hidden_min = 8;
  double gate_bias_init = 2.0;
  HardConcrete hard_concrete;

  // Throws ConfigError on inconsistent layer descriptions.
  void validate() const;
  std::vector<LayerShape> shapes() const;
  std::size_t gate_hidden(std::size_t layer) const;
  std::vector<std::size_t> gated_layers() const;
  std::vector<std::size_t> fgc_layers() const;
  // Marks exactly the listed layers as fgc-enabled; rejects ungated ones.
  void set_fgc_layers(std::span<const std::size_t> omega);
};

void to_json(nlohmann::json& j, const NetworkSpec& spec);
void from_json(const nlohmann::json& j, NetworkSpec& spec);

struct LayerParams {
  Tensor weight;  // conv: [K, C, R, S]; fc: [in_features, K]
  Tensor bn_gamma;
  Tensor bn_beta;
  BatchNormState bn;
  std::optional<GatingModuleParams> gating;
};

struct LayerForward {
  Tensor output;   // gated feature x^l
  Tensor feature;  // ungated F(x^{l-1})
  std::optional<GateState> gate;
};

enum class GateOverride { none, force_open };

// x_out = gate (channel-wise) * relu(batchnorm(conv(x_prev))).
LayerForward gated_layer_forward(const Tensor& x_prev, const LayerSpec& spec,
                                 LayerParams& params, Mode mode, Rng& rng,
                                 const HardConcrete& hc = {},
                                 GateOverride override = GateOverride::none);

struct GatedLayerOutput {
  std::size_t layer = 0;
  bool fgc = false;
  Tensor pooled_feature;  // [N, C], pooled ungated feature
  GateState gate;
};

struct NetworkOutput {
  Tensor logits;  // [N, classes]
  std::vector<GatedLayerOutput> gated;
};

struct PrunedInference {
  std::vector<double> logits;
  std::vector<std::vector<bool>> open;  // per gated layer, per channel
  std::uint64_t executed_macs = 0;      // convolution/fc MACs actually run
};

class GatedNetwork {
 public:
  GatedNetwork(NetworkSpec spec, std::uint64_t init_seed);

  const NetworkSpec& spec() const { return spec_; }
  const std::vector<LayerShape>& shapes() const { return shapes_; }

  NetworkOutput forward(const Tensor& x, Mode mode, Rng& rng,
                        GateOverride override = GateOverride::none);

  // Single-instance eval-mode inference that never touches closed channels:
  // a closed output channel is not convolved, and a closed input channel is
  // skipped by every consumer. Bit-identical to forward() in eval mode.
  PrunedInference infer_pruned(std::span<const double> image) const;

  std::vector<NamedTensor> parameters() const;
  std::vector<NamedTensor> buffers() const;

  LayerParams& layer(std::size_t i) { return layers_.at(i); }
  const LayerParams& layer(std::size_t i) const { return layers_.at(i); }

 private:
  NetworkSpec spec_;
  std::vector<LayerShape> shapes_;
  std::vector<LayerParams> layers_;
  Tensor head_weight_;  // [C_last, classes]
  Tensor head_bias_;    // [classes]
};

}  // namespace fgc::nn
