#include "fgc/optim.hpp"

#include "fgc/error.hpp"

namespace fgc {

void sgd_update(std::span<double> param, std::span<const double> grad,
                std::span<double> velocity, const SgdOptions& options, bool decay) {
  if (param.size() != grad.size() || param.size() != velocity.size()) {
    throw DimensionError("sgd_update: parameter has " + std::to_string(param.size()) +
                         " values, grad " + std::to_string(grad.size()) + ", velocity " +
                         std::to_string(velocity.size()));
  }
  const double wd = decay ? options.weight_decay : 0.0;
  const double mu = options.momentum;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double d = grad[i] + wd * param[i];
    velocity[i] = mu * velocity[i] + d;
    param[i] -= options.lr * (d + mu * velocity[i]);
  }
}

NesterovSgd::NesterovSgd(SgdOptions options) : options_(options) {
  if (!(options_.lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (options_.momentum < 0.0 || options_.momentum >= 1.0) {
    throw ConfigError("momentum must lie in [0, 1)");
  }
  if (options_.weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
}

void NesterovSgd::set_lr(double lr) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  options_.lr = lr;
}

void NesterovSgd::step(std::span<NamedTensor> params) {
  for (NamedTensor& p : params) {
    if (!p.tensor.requires_grad()) continue;
    auto [it, inserted] = velocity_.try_emplace(p.name);
    if (inserted) it->second.assign(p.tensor.numel(), 0.0);
    sgd_update(p.tensor.mutable_data(), p.tensor.grad(), it->second, options_, p.decay);
  }
}

void NesterovSgd::set_velocity(const std::string& name, std::vector<double> values) {
  velocity_[name] = std::move(values);
}

}  // namespace fgc
