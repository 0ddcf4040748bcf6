#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numeric>

#include "fgc/error.hpp"
#include "fgc/metrics.hpp"
#include "oracles.hpp"

namespace fgc::metrics {
namespace {

using testing::gradcheck;
using testing::random_tensor;

TEST(CrossEntropy, MatchesOracleAndGradient) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor logits = random_tensor({5, 4}, rng, -3, 3);
    std::vector<int> labels(5);
    for (int& y : labels) y = static_cast<int>(rng.below(4));
    long double oracle = 0.0L;
    for (std::size_t i = 0; i < 5; ++i) {
      long double z = 0.0L;
      for (std::size_t c = 0; c < 4; ++c) z += std::exp(static_cast<long double>(logits[i * 4 + c]));
      oracle -= logits[i * 4 + labels[i]] - std::log(z);
    }
    NoGradGuard ng;
    EXPECT_NEAR(cross_entropy(logits, labels).item(), static_cast<double>(oracle / 5), 1e-12);
  }
  const Tensor logits = random_tensor({3, 4}, rng, -3, 3);
  const std::vector<int> labels{0, 3, 1};
  EXPECT_LT(gradcheck({logits}, [&](const std::vector<Tensor>& in) {
              return cross_entropy(in[0], labels);
            }),
            1e-5);
  const std::vector<int> bad{0, 4, 1};
  EXPECT_THROW(cross_entropy(logits, bad), ContractError);
  EXPECT_THROW(cross_entropy(logits, std::vector<int>{0}), DimensionError);
}

nn::GateState state_from_logits(const Tensor& logits) {
  nn::GateState s;
  s.logits = logits;
  s.pi = nn::open_probability(logits, {});
  s.gate = nn::hard_gate(s.pi);
  return s;
}

TEST(L0, MeanOfSummedProbabilitiesAndMonotone) {
  Rng rng(2);
  const Tensor logits = random_tensor({6, 5}, rng, -3, 3, false);
  const nn::GateState s = state_from_logits(logits);
  double oracle = 0.0;
  for (double p : s.pi.data()) oracle += p;
  EXPECT_NEAR(l0_surrogate(s).item(), oracle / 6.0, 1e-14);
  double previous = l0_surrogate(s).item();
  for (int step = 0; step < 10; ++step) {
    const Tensor raised = add_scalar(logits, 0.3 * (step + 1));
    const double next = l0_surrogate(state_from_logits(raised)).item();
    EXPECT_GT(next, previous);
    previous = next;
  }
  double open = 0.0;
  for (double p : s.pi.data()) open += p >= 0.5 ? 1.0 : 0.0;
  EXPECT_EQ(open_gate_count(s), open / 6.0);
}

TEST(TotalLoss, RecomposesExactly) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor ce = Tensor::scalar(rng.uniform(0, 3), true);
    std::map<std::size_t, Tensor> lg, l0;
    for (std::size_t layer : {2u, 5u, 7u}) {
      lg[layer] = Tensor::scalar(rng.uniform(0, 50), true);
      l0[layer] = Tensor::scalar(rng.uniform(0, 16), true);
    }
    l0[1] = Tensor::scalar(rng.uniform(0, 16), true);  // gated but not coupled
    const double eta = rng.uniform(0, 0.01), rho = rng.uniform(0, 1);
    const Objective obj = total_loss(ce, lg, l0, eta, rho);
    EXPECT_EQ(obj.breakdown.recompose(), obj.total.item());
    double sum_lg = 0.0, sum_l0 = 0.0;
    for (const auto& [l, t] : lg) sum_lg += t.item();
    for (const auto& [l, t] : l0) sum_l0 += t.item();
    EXPECT_NEAR(obj.total.item(), ce.item() + eta * sum_lg + rho * sum_l0, 1e-10);
  }
  EXPECT_THROW(total_loss(Tensor::scalar(0.0), {}, {}, -1.0, 0.0), ConfigError);
}

TEST(TotalLoss, GradientsAreCoefficients) {
  const Tensor ce = Tensor::scalar(1.0, true);
  std::map<std::size_t, Tensor> lg{{3, Tensor::scalar(2.0, true)}};
  std::map<std::size_t, Tensor> l0{{1, Tensor::scalar(4.0, true)}, {3, Tensor::scalar(5.0, true)}};
  Tape tape;
  const Objective obj = total_loss(ce, lg, l0, 0.003, 0.4);
  tape.backward(obj.total);
  EXPECT_EQ(ce.grad()[0], 1.0);
  EXPECT_EQ(lg.at(3).grad()[0], 0.003);
  EXPECT_EQ(l0.at(1).grad()[0], 0.4);
  EXPECT_EQ(l0.at(3).grad()[0], 0.4);
}

TEST(MiBound, Formulas) {
  for (double lg : {0.0, 1.5, 37.0}) {
    for (std::size_t k : {1u, 20u, 200u}) {
      const MiBound b = mi_lower_bound(lg, 2000, k);
      EXPECT_NEAR(b.bound_sum, std::log(2000.0) - lg, 1e-12);
      EXPECT_NEAR(b.bound_per_pair, std::log(2000.0) - lg / static_cast<double>(k), 1e-12);
      EXPECT_LE(b.bound_per_pair, std::log(2000.0));
    }
  }
  EXPECT_THROW(mi_lower_bound(1.0, 1, 5), ContractError);
  EXPECT_THROW(mi_lower_bound(1.0, 10, 0), ContractError);
}

nn::NetworkSpec random_spec(Rng& rng) {
  nn::NetworkSpec s;
  s.input_channels = 1 + rng.below(3);
  s.input_height = s.input_width = 8;
  s.classes = 2 + rng.below(4);
  const std::size_t depth = 2 + rng.below(3);
  for (std::size_t i = 0; i < depth; ++i) {
    nn::LayerSpec l;
    l.out_channels = 2 + rng.below(7);
    l.gated = rng.below(4) != 0;
    if (i + 1 == depth && rng.below(2) == 0) {
      l.kind = nn::LayerKind::fc;
    } else {
      l.kernel = 3;
      l.stride = 1;
      l.padding = 1;
    }
    s.layers.push_back(l);
  }
  return s;
}

std::vector<LayerMasks> masks_from(nn::GatedNetwork& net, const Tensor& x) {
  NoGradGuard ng;
  Rng unused(0);
  const nn::NetworkOutput out = net.forward(x, Mode::eval, unused);
  std::vector<LayerMasks> masks;
  for (const nn::GatedLayerOutput& g : out.gated) {
    LayerMasks m;
    m.layer = g.layer;
    m.instances = g.gate.gate.dim(0);
    m.channels = g.gate.gate.dim(1);
    for (double v : g.gate.gate.data()) m.open.push_back(v == 1.0 ? 1 : 0);
    masks.push_back(std::move(m));
  }
  return masks;
}

TEST(PruningRatio, MatchesExecutedMacCounter) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const nn::NetworkSpec spec = random_spec(rng);
    nn::GatedNetwork net(spec, 10 + trial);
    for (std::size_t l : spec.gated_layers()) {
      for (double& v : net.layer(l).gating->fc2_bias.mutable_data()) v = rng.uniform(-3, 3);
    }
    const std::size_t n = 12;
    const Tensor x = random_tensor({n, spec.input_channels, 8, 8}, rng, -1, 1, false);
    const auto masks = masks_from(net, x);
    const PruningReport r = pruning_ratio(spec, masks);
    double executed = 0.0, dense = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t sz = spec.input_channels * 64;
      executed += static_cast<double>(net.infer_pruned(x.data().subspan(i * sz, sz)).executed_macs);
    }
    executed = kFlopsPerMac * executed / static_cast<double>(n);
    for (const LayerFlops& f : r.layers) dense += f.full;
    EXPECT_NEAR(r.gated_total, executed, 1e-9 * executed) << "trial " << trial;
    EXPECT_NEAR(r.full_total, dense, 1e-9 * dense);
    EXPECT_NEAR(r.pruning_ratio, 1.0 - executed / dense, 1e-9);
    EXPECT_LT(r.pruning_ratio_with_overhead, r.pruning_ratio + 1e-15);
  }
}

TEST(PruningRatio, ZeroWhenOpenAndMonotoneAsChannelsClose) {
  Rng rng(5);
  nn::NetworkSpec spec;
  spec.input_channels = 1;
  spec.input_height = spec.input_width = 8;
  spec.classes = 3;
  spec.layers = {{nn::LayerKind::conv, 4, 3, 1, 1, true, false},
                 {nn::LayerKind::conv, 6, 3, 1, 1, true, false}};
  std::vector<LayerMasks> masks{{0, 5, 4, std::vector<std::uint8_t>(20, 1)},
                                {1, 5, 6, std::vector<std::uint8_t>(30, 1)}};
  EXPECT_EQ(pruning_ratio(spec, masks).pruning_ratio, 0.0);
  double previous = 0.0;
  for (int step = 0; step < 40; ++step) {
    LayerMasks& m = masks[rng.below(2)];
    const std::size_t i = rng.below(m.open.size());
    const bool was_open = m.open[i] == 1;
    m.open[i] = 0;
    const double now = pruning_ratio(spec, masks).pruning_ratio;
    if (was_open) {
      EXPECT_GT(now, previous);
    } else {
      EXPECT_EQ(now, previous);
    }
    previous = now;
  }
}

TEST(PruningRatio, ExecutionFrequencies) {
  nn::NetworkSpec spec;
  spec.input_channels = 1;
  spec.input_height = spec.input_width = 8;
  spec.classes = 2;
  spec.layers = {{nn::LayerKind::conv, 2, 3, 1, 1, true, false}};
  // Instances 0,1 are class 0; 2 is class 1.
  const std::vector<LayerMasks> masks{{0, 3, 2, {1, 0, 1, 1, 0, 1}}};
  const std::vector<int> labels{0, 0, 1};
  const PruningReport r = pruning_ratio(spec, masks, labels, 2);
  const auto& f = r.execution_frequency.at(0);
  EXPECT_EQ(f, (std::vector<double>{1.0, 0.0, 0.5, 1.0}));
  for (double v : f) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(frequency_csv(r, 0), "channel,class_0,class_1\n0,1,0\n1,0.5,1\n");
  EXPECT_THROW(frequency_csv(r, 3), ContractError);
}

TEST(PruningRatio, RejectsInconsistentMasks) {
  nn::NetworkSpec spec;
  spec.input_channels = 1;
  spec.input_height = spec.input_width = 8;
  spec.classes = 2;
  spec.layers = {{nn::LayerKind::conv, 2, 3, 1, 1, true, false},
                 {nn::LayerKind::conv, 2, 3, 1, 1, false, false}};
  EXPECT_THROW(pruning_ratio(spec, std::vector<LayerMasks>{}), ContractError);
  EXPECT_THROW(pruning_ratio(spec, std::vector<LayerMasks>{{1, 1, 2, {1, 1}}}), ContractError);
  EXPECT_THROW(pruning_ratio(spec, std::vector<LayerMasks>{{0, 1, 3, {1, 1, 1}}}), DimensionError);
}

double nmi_oracle(const std::vector<int>& a, const std::vector<int>& b) {
  // Direct from the definition with an explicit dense contingency table.
  const int ka = *std::max_element(a.begin(), a.end()) + 1;
  const int kb = *std::max_element(b.begin(), b.end()) + 1;
  std::vector<double> joint(static_cast<std::size_t>(ka * kb), 0.0), pa(ka, 0.0), pb(kb, 0.0);
  const double n = static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[static_cast<std::size_t>(a[i] * kb + b[i])] += 1.0 / n;
    pa[a[i]] += 1.0 / n;
    pb[b[i]] += 1.0 / n;
  }
  double mi = 0.0, ha = 0.0, hb = 0.0;
  for (int i = 0; i < ka; ++i) {
    if (pa[i] > 0) ha -= pa[i] * std::log(pa[i]);
    for (int j = 0; j < kb; ++j) {
      const double p = joint[static_cast<std::size_t>(i * kb + j)];
      if (p > 0) mi += p * std::log(p / (pa[i] * pb[j]));
    }
  }
  for (int j = 0; j < kb; ++j) {
    if (pb[j] > 0) hb -= pb[j] * std::log(pb[j]);
  }
  return mi / std::sqrt(ha * hb);
}

TEST(Nmi, MatchesOracleSymmetricAndPermutationInvariant) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> a(300), b(300);
    for (std::size_t i = 0; i < 300; ++i) {
      a[i] = static_cast<int>(rng.below(4));
      b[i] = rng.below(3) == 0 ? static_cast<int>(rng.below(5)) : a[i];
    }
    EXPECT_NEAR(nmi(a, b), nmi_oracle(a, b), 1e-12);
    EXPECT_EQ(nmi(a, b), nmi(b, a));
  }
  std::vector<int> a(100), perm(100);
  for (std::size_t i = 0; i < 100; ++i) {
    a[i] = static_cast<int>(i % 4);
    perm[i] = (a[i] + 1) % 4 * 10;
  }
  EXPECT_NEAR(nmi(a, a), 1.0, 1e-12);
  EXPECT_NEAR(nmi(a, perm), 1.0, 1e-12);
  EXPECT_THROW(nmi(a, std::vector<int>(100, 0)), ContractError);
  EXPECT_THROW(nmi(a, std::vector<int>(3, 0)), DimensionError);
}

TEST(Nmi, IndependentAssignmentsScoreNearZero) {
  Rng rng(7);
  double total = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<int> a(5000), b(5000);
    for (std::size_t i = 0; i < 5000; ++i) {
      a[i] = static_cast<int>(rng.below(4));
      b[i] = static_cast<int>(rng.below(4));
    }
    total += nmi(a, b);
  }
  EXPECT_LT(total / 10.0, 0.02);
}

std::vector<double> clustered_points(std::size_t per, std::size_t dim, Rng& rng,
                                     std::vector<int>* labels) {
  std::vector<double> pts;
  for (std::size_t i = 0; i < 4 * per; ++i) {
    const int c = static_cast<int>(i % 4);
    if (labels) labels->push_back(c);
    for (std::size_t d = 0; d < dim; ++d) {
      pts.push_back((d == static_cast<std::size_t>(c) ? 5.0 : 0.0) + 0.2 * rng.normal());
    }
  }
  return pts;
}

TEST(KMeans, RecoversSeparatedClustersDeterministically) {
  Rng rng(8);
  std::vector<int> labels;
  const auto pts = clustered_points(50, 6, rng, &labels);
  KMeansOptions o;
  o.clusters = 4;
  o.seed = 3;
  const KMeansResult a = kmeans(pts, 200, 6, o);
  const KMeansResult b = kmeans(pts, 200, 6, o);
  EXPECT_EQ(a.assignment, b.assignment);
  EXPECT_EQ(a.inertia, b.inertia);
  EXPECT_NEAR(nmi(a.assignment, labels), 1.0, 1e-12);
  o.clusters = 0;
  EXPECT_THROW(kmeans(pts, 200, 6, o), ContractError);
  o.clusters = 4;
  EXPECT_THROW(kmeans(pts, 199, 6, o), DimensionError);
}

TEST(EmbeddingNmi, SelfIsOneAndCollapseIsZero) {
  Rng rng(9);
  std::vector<int> labels;
  const auto pts = clustered_points(40, 5, rng, &labels);
  EXPECT_NEAR(embedding_nmi(pts, 5, pts, 5, 160, 4, 1), 1.0, 1e-12);
  EXPECT_NEAR(embedding_label_nmi(pts, 5, labels, 4, 1), 1.0, 1e-12);
  const std::vector<double> constant(160 * 2, 0.25);
  EXPECT_EQ(embedding_nmi(pts, 5, constant, 2, 160, 4, 1), 0.0);
  // Unrelated noise carries almost no information about the labels.
  std::vector<double> noise(160 * 3);
  for (double& v : noise) v = rng.normal();
  EXPECT_LT(embedding_label_nmi(noise, 3, labels, 4, 1), 0.1);
}

TEST(Json, ReportAndBreakdownFields) {
  LossBreakdown b;
  b.ce = 1.0;
  b.contrastive[3] = 2.0;
  b.l0[1] = 3.0;
  b.total = b.recompose();
  const auto j = to_json(b);
  EXPECT_EQ(j.at("contrastive").at("3"), 2.0);
  EXPECT_EQ(j.at("l0").at("1"), 3.0);
  nn::NetworkSpec spec;
  spec.input_channels = 1;
  spec.input_height = spec.input_width = 8;
  spec.layers = {{nn::LayerKind::conv, 2, 3, 1, 1, true, false}};
  const auto r = to_json(pruning_ratio(spec, std::vector<LayerMasks>{{0, 1, 2, {1, 0}}}));
  EXPECT_EQ(r.at("convention"), kFlopsConvention);
  EXPECT_EQ(r.at("layers").size(), 2u);
  EXPECT_GT(r.at("pruning_ratio").get<double>(), 0.0);
}

}  // namespace
}  // namespace fgc::metrics
