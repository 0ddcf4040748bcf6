#pragma once

#include <cstddef>
#include <cmath>
#include <span>

#include "fgc/tensor.hpp"

namespace fgc {

enum class Mode { train, eval };

// Every op checks that its output is finite and throws NumericError naming
// the op otherwise. Accumulations run in a fixed sequential order, so results
// are bit-reproducible for identical inputs.

Tensor matmul(const Tensor& a, const Tensor& b);

struct Conv2dGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};
// Output extent of a convolution along one axis; throws ConfigError when the
// stride does not divide the padded span.
std::size_t conv_output_extent(std::size_t input, std::size_t kernel, Conv2dGeometry g);
// Cross-correlation, no bias. x: [N,C,H,W], w: [K,C,R,S].
Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dGeometry g);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);

// x: [N,C], bias: [C].
Tensor add_bias(const Tensor& x, const Tensor& bias);
// x: [N,C,H,W] or [N,C]; gate: [N,C]. Scales every channel map by its gate.
Tensor channel_mul(const Tensor& x, const Tensor& gate);
// [N,C,H,W] -> [N,C]; divides by H*W.
Tensor global_avg_pool(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Row-wise log-softmax of [N,C], max-subtracted.
Tensor log_softmax(const Tensor& x);
// out[m] = x[rows[m], cols[m]] for a 2-D x.
Tensor gather(const Tensor& x, std::span<const std::size_t> rows,
              std::span<const std::size_t> cols);

struct BatchNormState {
  Tensor running_mean;  // [C]
  Tensor running_var;   // [C], unbiased
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNormState identity(std::size_t channels);
};
// Per-channel normalization of [N,C,H,W] or [N,C]. Training mode normalizes
// with the (biased) batch statistics and folds them into the running
// estimates; evaluation mode uses the running estimates only.
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 BatchNormState& state, Mode mode);

// Shared scalar kernels so that hand-written inference paths reproduce the
// tensor ops bit-for-bit.
double sigmoid_value(double x);
inline double batchnorm_eval_value(double x, double mean, double var, double gamma,
                                   double beta, double eps) {
  return gamma * ((x - mean) / std::sqrt(var + eps)) + beta;
}

}  // namespace fgc
