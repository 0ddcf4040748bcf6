#include "fgc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <string>

#include "fgc/error.hpp"

namespace fgc {

namespace {

Tape* tracking_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = Tape::current();
  if (!tape) return nullptr;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return tape;
  }
  return nullptr;
}

void ensure_finite(const char* op, const Tensor& t) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + " produced a non-finite value");
    }
  }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + " expects a rank-" + std::to_string(rank) +
                         " tensor, got " + shape_string(t.shape()));
  }
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

// Elementwise unary op whose derivative is expressed through (x, y).
template <typename Forward, typename Derivative>
Tensor unary(const char* name, const Tensor& x, Forward f, Derivative df) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
  Tape* tape = tracking_tape({&x});
  Tensor y(x.shape(), std::move(out), tape != nullptr);
  ensure_finite(name, y);
  if (tape) {
    tape->record(name, {x, y}, y, [x, y, df]() mutable {
      if (!x.requires_grad()) return;
      auto gx = x.mutable_grad();
      auto gy = y.grad();
      auto xd = x.data();
      auto yd = y.data();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * df(xd[i], yd[i]);
    });
  }
  return y;
}

struct Spatial {
  std::size_t n, c, hw;
};

Spatial spatial_layout(const char* op, const Tensor& x) {
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
  if (x.rank() == 2) return {x.dim(0), x.dim(1), 1};
  throw DimensionError(std::string(op) + " expects [N,C,H,W] or [N,C], got " +
                       shape_string(x.shape()));
}

}  // namespace

double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      const double* brow = bd.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  Tape* tape = tracking_tape({&a, &b});
  Tensor c({m, n}, std::move(out), tape != nullptr);
  ensure_finite("matmul", c);
  if (tape) {
    tape->record("matmul", {a, b, c}, c, [a, b, c, m, k, n]() mutable {
      auto gc = c.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        auto bd = b.data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += gc[i * n + j] * bd[p * n + j];
            ga[i * k + p] += acc;
          }
        }
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        auto ad = a.data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double av = ad[i * k + p];
            for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * gc[i * n + j];
          }
        }
      }
    });
  }
  return c;
}

std::size_t conv_output_extent(std::size_t input, std::size_t kernel, Conv2dGeometry g) {
  if (g.stride == 0) throw ConfigError("convolution stride must be positive");
  const std::size_t padded = input + 2 * g.padding;
  if (padded < kernel) {
    throw ConfigError("kernel extent " + std::to_string(kernel) + " exceeds padded input " +
                      std::to_string(padded));
  }
  if ((padded - kernel) % g.stride != 0) {
    throw ConfigError("non-integral convolution output: (" + std::to_string(input) + " + 2*" +
                      std::to_string(g.padding) + " - " + std::to_string(kernel) + ") / " +
                      std::to_string(g.stride));
  }
  return (padded - kernel) / g.stride + 1;
}

namespace {

struct ConvDims {
  std::size_t n, c, h, w, k, r, s, ho, wo;
  std::size_t q() const { return c * r * s; }
  std::size_t p() const { return ho * wo; }
};

// cols[(ci*R + kr)*S + ks][oh*Wo + ow] for one sample.
void im2col(const double* x, const ConvDims& d, Conv2dGeometry g, double* cols) {
  const long pad = static_cast<long>(g.padding);
  for (std::size_t ci = 0; ci < d.c; ++ci) {
    for (std::size_t kr = 0; kr < d.r; ++kr) {
      for (std::size_t ks = 0; ks < d.s; ++ks) {
        double* dst = cols + ((ci * d.r + kr) * d.s + ks) * d.p();
        for (std::size_t oh = 0; oh < d.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + kr) - pad;
          for (std::size_t ow = 0; ow < d.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + ks) - pad;
            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<long>(d.h) &&
                                iw < static_cast<long>(d.w);
            dst[oh * d.wo + ow] = inside ? x[(ci * d.h + ih) * d.w + iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvDims& d, Conv2dGeometry g, double* dx) {
  const long pad = static_cast<long>(g.padding);
  for (std::size_t ci = 0; ci < d.c; ++ci) {
    for (std::size_t kr = 0; kr < d.r; ++kr) {
      for (std::size_t ks = 0; ks < d.s; ++ks) {
        const double* src = cols + ((ci * d.r + kr) * d.s + ks) * d.p();
        for (std::size_t oh = 0; oh < d.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + kr) - pad;
          if (ih < 0 || ih >= static_cast<long>(d.h)) continue;
          for (std::size_t ow = 0; ow < d.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + ks) - pad;
            if (iw < 0 || iw >= static_cast<long>(d.w)) continue;
            dx[(ci * d.h + ih) * d.w + iw] += src[oh * d.wo + ow];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dGeometry g) {
  require_rank("conv2d input", x, 4);
  require_rank("conv2d weight", w, 4);
  if (x.dim(1) != w.dim(1)) {
    throw DimensionError("conv2d: input channels " + std::to_string(x.dim(1)) +
                         " do not match weight " + shape_string(w.shape()));
  }
  ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), 0, 0};
  d.ho = conv_output_extent(d.h, d.r, g);
  d.wo = conv_output_extent(d.w, d.s, g);
  const std::size_t Q = d.q(), P = d.p();

  std::vector<double> out(d.n * d.k * P, 0.0);
  std::vector<double> cols(Q * P);
  auto xd = x.data();
  auto wd = w.data();
  for (std::size_t n = 0; n < d.n; ++n) {
    im2col(xd.data() + n * d.c * d.h * d.w, d, g, cols.data());
    double* on = out.data() + n * d.k * P;
    for (std::size_t k = 0; k < d.k; ++k) {
      double* orow = on + k * P;
      for (std::size_t q = 0; q < Q; ++q) {
        const double wv = wd[k * Q + q];
        const double* crow = cols.data() + q * P;
        for (std::size_t p = 0; p < P; ++p) orow[p] += wv * crow[p];
      }
    }
  }
  Tape* tape = tracking_tape({&x, &w});
  Tensor y({d.n, d.k, d.ho, d.wo}, std::move(out), tape != nullptr);
  ensure_finite("conv2d", y);
  if (tape) {
    tape->record("conv2d", {x, w, y}, y, [x, w, y, d, g]() mutable {
      const std::size_t Q = d.q(), P = d.p();
      auto gy = y.grad();
      auto xd = x.data();
      auto wd = w.data();
      std::vector<double> cols(Q * P);
      std::vector<double> dcols(Q * P);
      for (std::size_t n = 0; n < d.n; ++n) {
        const double* gyn = gy.data() + n * d.k * P;
        if (w.requires_grad()) {
          im2col(xd.data() + n * d.c * d.h * d.w, d, g, cols.data());
          auto gw = w.mutable_grad();
          for (std::size_t k = 0; k < d.k; ++k) {
            const double* grow = gyn + k * P;
            // Four rows at a time; each sum still runs over p in order.
            std::size_t q = 0;
            for (; q + 4 <= Q; q += 4) {
              const double* c0 = cols.data() + q * P;
              const double *c1 = c0 + P, *c2 = c1 + P, *c3 = c2 + P;
              double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
              for (std::size_t p = 0; p < P; ++p) {
                const double gv = grow[p];
                a0 += gv * c0[p];
                a1 += gv * c1[p];
                a2 += gv * c2[p];
                a3 += gv * c3[p];
              }
              gw[k * Q + q] += a0;
              gw[k * Q + q + 1] += a1;
              gw[k * Q + q + 2] += a2;
              gw[k * Q + q + 3] += a3;
            }
            for (; q < Q; ++q) {
              const double* crow = cols.data() + q * P;
              double acc = 0.0;
              for (std::size_t p = 0; p < P; ++p) acc += grow[p] * crow[p];
              gw[k * Q + q] += acc;
            }
          }
        }
        if (x.requires_grad()) {
          std::fill(dcols.begin(), dcols.end(), 0.0);
          for (std::size_t k = 0; k < d.k; ++k) {
            const double* grow = gyn + k * P;
            for (std::size_t q = 0; q < Q; ++q) {
              const double wv = wd[k * Q + q];
              double* drow = dcols.data() + q * P;
              for (std::size_t p = 0; p < P; ++p) drow[p] += wv * grow[p];
            }
          }
          col2im_add(dcols.data(), d, g, x.mutable_grad().data() + n * d.c * d.h * d.w);
        }
      }
    });
  }
  return y;
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x, [](double v) { return sigmoid_value(v); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw ContractError("clamp bounds out of order");
  return unary(
      "clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      "scale", x, [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double offset) {
  return unary(
      "add_scalar", x, [offset](double v) { return v + offset; },
      [](double, double) { return 1.0; });
}

namespace {

enum class Binary { add, sub, mul };

Tensor binary(const char* name, const Tensor& a, const Tensor& b, Binary kind) {
  require_same_shape(name, a, b);
  std::vector<double> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    switch (kind) {
      case Binary::add: out[i] = ad[i] + bd[i]; break;
      case Binary::sub: out[i] = ad[i] - bd[i]; break;
      case Binary::mul: out[i] = ad[i] * bd[i]; break;
    }
  }
  Tape* tape = tracking_tape({&a, &b});
  Tensor y(a.shape(), std::move(out), tape != nullptr);
  ensure_finite(name, y);
  if (tape) {
    tape->record(name, {a, b, y}, y, [a, b, y, kind]() mutable {
      auto gy = y.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        auto bd = b.data();
        for (std::size_t i = 0; i < ga.size(); ++i) {
          ga[i] += kind == Binary::mul ? gy[i] * bd[i] : gy[i];
        }
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        auto ad = a.data();
        for (std::size_t i = 0; i < gb.size(); ++i) {
          switch (kind) {
            case Binary::add: gb[i] += gy[i]; break;
            case Binary::sub: gb[i] -= gy[i]; break;
            case Binary::mul: gb[i] += gy[i] * ad[i]; break;
          }
        }
      }
    });
  }
  return y;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", a, b, Binary::add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", a, b, Binary::sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", a, b, Binary::mul); }

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_bias input", x, 2);
  require_rank("add_bias bias", bias, 1);
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (bias.dim(0) != c) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " vs input " +
                         shape_string(x.shape()));
  }
  std::vector<double> out(n * c);
  auto xd = x.data();
  auto bd = bias.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xd[i * c + j] + bd[j];
  }
  Tape* tape = tracking_tape({&x, &bias});
  Tensor y(x.shape(), std::move(out), tape != nullptr);
  ensure_finite("add_bias", y);
  if (tape) {
    tape->record("add_bias", {x, bias, y}, y, [x, bias, y, n, c]() mutable {
      auto gy = y.grad();
      if (x.requires_grad()) {
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.mutable_grad();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < c; ++j) gb[j] += gy[i * c + j];
        }
      }
    });
  }
  return y;
}

Tensor channel_mul(const Tensor& x, const Tensor& gate) {
  const Spatial s = spatial_layout("channel_mul", x);
  require_rank("channel_mul gate", gate, 2);
  if (gate.dim(0) != s.n || gate.dim(1) != s.c) {
    throw DimensionError("channel_mul: gate " + shape_string(gate.shape()) + " vs input " +
                         shape_string(x.shape()));
  }
  std::vector<double> out(x.numel());
  auto xd = x.data();
  auto gd = gate.data();
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    const double gv = gd[nc];
    for (std::size_t i = 0; i < s.hw; ++i) out[nc * s.hw + i] = gv * xd[nc * s.hw + i];
  }
  Tape* tape = tracking_tape({&x, &gate});
  Tensor y(x.shape(), std::move(out), tape != nullptr);
  ensure_finite("channel_mul", y);
  if (tape) {
    tape->record("channel_mul", {x, gate, y}, y, [x, gate, y, s]() mutable {
      auto gy = y.grad();
      auto xd = x.data();
      auto gd = gate.data();
      for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
        if (x.requires_grad()) {
          auto gx = x.mutable_grad();
          for (std::size_t i = 0; i < s.hw; ++i) gx[nc * s.hw + i] += gy[nc * s.hw + i] * gd[nc];
        }
        if (gate.requires_grad()) {
          double acc = 0.0;
          for (std::size_t i = 0; i < s.hw; ++i) acc += gy[nc * s.hw + i] * xd[nc * s.hw + i];
          gate.mutable_grad()[nc] += acc;
        }
      }
    });
  }
  return y;
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank("global_avg_pool", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> out(n * c);
  auto xd = x.data();
  const double denom = static_cast<double>(hw);
  for (std::size_t nc = 0; nc < n * c; ++nc) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += xd[nc * hw + i];
    out[nc] = acc / denom;
  }
  Tape* tape = tracking_tape({&x});
  Tensor y({n, c}, std::move(out), tape != nullptr);
  ensure_finite("global_avg_pool", y);
  if (tape) {
    tape->record("global_avg_pool", {x, y}, y, [x, y, n, c, hw, denom]() mutable {
      if (!x.requires_grad()) return;
      auto gx = x.mutable_grad();
      auto gy = y.grad();
      for (std::size_t nc = 0; nc < n * c; ++nc) {
        const double share = gy[nc] / denom;
        for (std::size_t i = 0; i < hw; ++i) gx[nc * hw + i] += share;
      }
    });
  }
  return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  std::vector<double> values(x.data().begin(), x.data().end());
  Tape* tape = tracking_tape({&x});
  Tensor y(std::move(shape), std::move(values), tape != nullptr);
  if (tape) {
    tape->record("reshape", {x, y}, y, [x, y]() mutable {
      if (!x.requires_grad()) return;
      auto gx = x.mutable_grad();
      auto gy = y.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
    });
  }
  return y;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tape* tape = tracking_tape({&x});
  Tensor y({}, {acc}, tape != nullptr);
  ensure_finite("sum", y);
  if (tape) {
    tape->record("sum", {x, y}, y, [x, y]() mutable {
      if (!x.requires_grad()) return;
      const double g = y.grad()[0];
      for (double& v : x.mutable_grad()) v += g;
    });
  }
  return y;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean of an empty tensor");
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const double count = static_cast<double>(x.numel());
  Tape* tape = tracking_tape({&x});
  Tensor y({}, {acc / count}, tape != nullptr);
  ensure_finite("mean", y);
  if (tape) {
    tape->record("mean", {x, y}, y, [x, y, count]() mutable {
      if (!x.requires_grad()) return;
      const double g = y.grad()[0] / count;
      for (double& v : x.mutable_grad()) v += g;
    });
  }
  return y;
}

Tensor log_softmax(const Tensor& x) {
  require_rank("log_softmax", x, 2);
  const std::size_t n = x.dim(0), c = x.dim(1);
  std::vector<double> out(n * c);
  auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = xd.data() + i * c;
    const double m = *std::max_element(row, row + c);
    double acc = 0.0;
    for (std::size_t j = 0; j < c; ++j) acc += std::exp(row[j] - m);
    const double lse = m + std::log(acc);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lse;
  }
  Tape* tape = tracking_tape({&x});
  Tensor y({n, c}, std::move(out), tape != nullptr);
  ensure_finite("log_softmax", y);
  if (tape) {
    tape->record("log_softmax", {x, y}, y, [x, y, n, c]() mutable {
      if (!x.requires_grad()) return;
      auto gx = x.mutable_grad();
      auto gy = y.grad();
      auto yd = y.data();
      for (std::size_t i = 0; i < n; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < c; ++j) total += gy[i * c + j];
        for (std::size_t j = 0; j < c; ++j) {
          gx[i * c + j] += gy[i * c + j] - std::exp(yd[i * c + j]) * total;
        }
      }
    });
  }
  return y;
}

Tensor gather(const Tensor& x, std::span<const std::size_t> rows,
              std::span<const std::size_t> cols) {
  require_rank("gather", x, 2);
  if (rows.size() != cols.size()) throw DimensionError("gather: rows/cols length differ");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<std::size_t> flat(rows.size());
  std::vector<double> out(rows.size());
  auto xd = x.data();
  for (std::size_t m = 0; m < rows.size(); ++m) {
    if (rows[m] >= r || cols[m] >= c) {
      throw DimensionError("gather: index (" + std::to_string(rows[m]) + ", " +
                           std::to_string(cols[m]) + ") outside " + shape_string(x.shape()));
    }
    flat[m] = rows[m] * c + cols[m];
    out[m] = xd[flat[m]];
  }
  Tape* tape = tracking_tape({&x});
  Tensor y({rows.size()}, std::move(out), tape != nullptr);
  if (tape) {
    tape->record("gather", {x, y}, y, [x, y, flat = std::move(flat)]() mutable {
      if (!x.requires_grad()) return;
      auto gx = x.mutable_grad();
      auto gy = y.grad();
      for (std::size_t m = 0; m < flat.size(); ++m) gx[flat[m]] += gy[m];
    });
  }
  return y;
}

BatchNormState BatchNormState::identity(std::size_t channels) {
  return BatchNormState{Tensor::zeros({channels}), Tensor::full({channels}, 1.0)};
}

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 BatchNormState& state, Mode mode) {
  const Spatial s = spatial_layout("batchnorm", x);
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &state.running_mean, &state.running_var}) {
    if (t->rank() != 1 || t->dim(0) != s.c) {
      throw DimensionError("batchnorm: per-channel parameter " + shape_string(t->shape()) +
                           " vs input " + shape_string(x.shape()));
    }
  }
  const double eps = state.eps;
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  std::vector<double> out(x.numel());

  if (mode == Mode::eval) {
    auto rm = state.running_mean.data();
    auto rv = state.running_var.data();
    for (std::size_t n = 0; n < s.n; ++n) {
      for (std::size_t c = 0; c < s.c; ++c) {
        const std::size_t base = (n * s.c + c) * s.hw;
        for (std::size_t i = 0; i < s.hw; ++i) {
          out[base + i] = batchnorm_eval_value(xd[base + i], rm[c], rv[c], gd[c], bd[c], eps);
        }
      }
    }
    Tape* tape = tracking_tape({&x, &gamma, &beta});
    Tensor y(x.shape(), std::move(out), tape != nullptr);
    ensure_finite("batchnorm", y);
    if (tape) {
      std::vector<double> inv_std(s.c);
      for (std::size_t c = 0; c < s.c; ++c) inv_std[c] = 1.0 / std::sqrt(rv[c] + eps);
      std::vector<double> means(rm.begin(), rm.end());
      tape->record("batchnorm", {x, gamma, beta, y}, y,
                   [x, gamma, beta, y, s, inv_std, means]() mutable {
                     auto gy = y.grad();
                     auto xd = x.data();
                     auto gd = gamma.data();
                     for (std::size_t n = 0; n < s.n; ++n) {
                       for (std::size_t c = 0; c < s.c; ++c) {
                         const std::size_t base = (n * s.c + c) * s.hw;
                         for (std::size_t i = 0; i < s.hw; ++i) {
                           const double g = gy[base + i];
                           const double xhat = (xd[base + i] - means[c]) * inv_std[c];
                           if (x.requires_grad()) x.mutable_grad()[base + i] += g * gd[c] * inv_std[c];
                           if (gamma.requires_grad()) gamma.mutable_grad()[c] += g * xhat;
                           if (beta.requires_grad()) beta.mutable_grad()[c] += g;
                         }
                       }
                     }
                   });
    }
    return y;
  }

  if (s.n < 2) {
    throw ContractError("batchnorm in training mode needs a batch of at least 2 instances");
  }
  const std::size_t count = s.n * s.hw;
  const double dcount = static_cast<double>(count);
  std::vector<double> mu(s.c, 0.0), var(s.c, 0.0), inv_std(s.c);
  for (std::size_t c = 0; c < s.c; ++c) {
    double acc = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const std::size_t base = (n * s.c + c) * s.hw;
      for (std::size_t i = 0; i < s.hw; ++i) acc += xd[base + i];
    }
    mu[c] = acc / dcount;
    double sq = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const std::size_t base = (n * s.c + c) * s.hw;
      for (std::size_t i = 0; i < s.hw; ++i) {
        const double dlt = xd[base + i] - mu[c];
        sq += dlt * dlt;
      }
    }
    var[c] = sq / dcount;
    inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  }
  std::vector<double> xhat(x.numel());
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t base = (n * s.c + c) * s.hw;
      for (std::size_t i = 0; i < s.hw; ++i) {
        xhat[base + i] = (xd[base + i] - mu[c]) * inv_std[c];
        out[base + i] = gd[c] * xhat[base + i] + bd[c];
      }
    }
  }
  {
    auto rm = state.running_mean.mutable_data();
    auto rv = state.running_var.mutable_data();
    const double unbias = dcount / (dcount - 1.0);
    for (std::size_t c = 0; c < s.c; ++c) {
      rm[c] = (1.0 - state.momentum) * rm[c] + state.momentum * mu[c];
      rv[c] = (1.0 - state.momentum) * rv[c] + state.momentum * var[c] * unbias;
    }
  }
  Tape* tape = tracking_tape({&x, &gamma, &beta});
  Tensor y(x.shape(), std::move(out), tape != nullptr);
  ensure_finite("batchnorm", y);
  if (tape) {
    tape->record("batchnorm", {x, gamma, beta, y}, y,
                 [x, gamma, beta, y, s, dcount, inv_std = std::move(inv_std),
                  xhat = std::move(xhat)]() mutable {
                   auto gy = y.grad();
                   auto gd = gamma.data();
                   for (std::size_t c = 0; c < s.c; ++c) {
                     double sum_g = 0.0, sum_gx = 0.0;
                     for (std::size_t n = 0; n < s.n; ++n) {
                       const std::size_t base = (n * s.c + c) * s.hw;
                       for (std::size_t i = 0; i < s.hw; ++i) {
                         sum_g += gy[base + i];
                         sum_gx += gy[base + i] * xhat[base + i];
                       }
                     }
                     if (gamma.requires_grad()) gamma.mutable_grad()[c] += sum_gx;
                     if (beta.requires_grad()) beta.mutable_grad()[c] += sum_g;
                     if (!x.requires_grad()) continue;
                     auto gx = x.mutable_grad();
                     const double k = gd[c] * inv_std[c] / dcount;
                     for (std::size_t n = 0; n < s.n; ++n) {
                       const std::size_t base = (n * s.c + c) * s.hw;
                       for (std::size_t i = 0; i < s.hw; ++i) {
                         gx[base + i] +=
                             k * (dcount * gy[base + i] - sum_g - xhat[base + i] * sum_gx);
                       }
                     }
                   }
                 });
  }
  return y;
}

}  // namespace fgc
