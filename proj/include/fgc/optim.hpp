#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "fgc/tensor.hpp"

namespace fgc {

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool decay = true;  // false for gating-module parameters
};

struct SgdOptions {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

// One Nesterov step on a flat buffer:
//   d = g + wd*p;  v = mu*v + d;  p -= lr*(d + mu*v)
// With mu = 0 this is plain SGD. decay=false drops the wd*p term.
void sgd_update(std::span<double> param, std::span<const double> grad,
                std::span<double> velocity, const SgdOptions& options, bool decay);

class NesterovSgd {
 public:
  explicit NesterovSgd(SgdOptions options);

  const SgdOptions& options() const { return options_; }
  void set_lr(double lr);

  // Reads each parameter's grad buffer. Velocity buffers are keyed by name
  // and created on first use.
  void step(std::span<NamedTensor> params);

  const std::map<std::string, std::vector<double>>& velocities() const { return velocity_; }
  void set_velocity(const std::string& name, std::vector<double> values);

 private:
  SgdOptions options_;
  std::map<std::string, std::vector<double>> velocity_;
};

}  // namespace fgc
