// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The mohge Authors.

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "grad_check.hpp"
#include "mohge/config.hpp"
#include "mohge/layer.hpp"
#include "mohge/rng.hpp"

using namespace mohge;

namespace {

ModelConfig tiny(std::size_t d, std::size_t ng, std::size_t n, std::size_t kg, std::size_t ke,
                 std::size_t shared) {
  ModelConfig c;
  c.model_dim = d;
  c.num_groups = ng;
  c.experts_per_group = n;
  c.top_groups = kg;
  c.top_experts = ke;
  c.num_shared_experts = shared;
  c.base_width = 4;
  if (ng == 1) c.group_widths = {4};
  else if (ng == 2) c.group_widths = {3, 5};
  else c.group_widths = {2, 3, 5, 6};
  return c;
}

Matrix<double> random_matrix(std::size_t r, std::size_t c, Rng& rng, double s = 1.0) {
  Matrix<double> m(r, c);
  for (auto& v : m.data()) v = rng.normal() * s;
  return m;
}

// Reference expert: act(x . up) . down with explicit loops.
std::vector<double> reference_expert(const std::vector<double>& x, const ExpertNetwork<double>& e,
                                     bool gelu) {
  const std::size_t d = e.up.rows(), w = e.up.cols();
  std::vector<double> out(d, 0.0);
  for (std::size_t k = 0; k < w; ++k) {
    double h = 0.0;
    for (std::size_t j = 0; j < d; ++j) h += x[j] * e.up(j, k);
    const double a = gelu ? 0.5 * h * std::erfc(-h / std::sqrt(2.0)) : h;
    for (std::size_t j = 0; j < d; ++j) out[j] += a * e.down(k, j);
  }
  return out;
}

double probe_loss(const Matrix<double>& x, const MoHGELayer<double>& layer,
                  const Matrix<double>& upstream) {
  const auto out = layer_forward(x, layer);
  double s = 0.0;
  for (std::size_t k = 0; k < out.outputs.size(); ++k)
    s += out.outputs.data()[k] * upstream.data()[k];
  return s;
}

std::vector<std::vector<ExpertId>> selections(const Matrix<double>& x,
                                              const MoHGELayer<double>& layer) {
  std::vector<std::vector<ExpertId>> out;
  for (const auto& d : route(x, layer.gating, layer.config)) out.push_back(d.selected_experts);
  return out;
}

}  // namespace

TEST(Activation, GeluValues) {
  EXPECT_EQ(activate(Activation::gelu, 0.0), 0.0);
  EXPECT_NEAR(activate(Activation::gelu, 1.0), 0.8413447460685429, 1e-15);
  EXPECT_NEAR(activate(Activation::gelu, -1.0), -0.15865525393145707, 1e-15);
  EXPECT_EQ(activate(Activation::identity, -2.5), -2.5);
  for (double x : {-3.0, -0.7, 0.0, 0.4, 2.2}) {
    double xv = x;
    const double num =
        gradcheck::central_difference(xv, [&] { return activate(Activation::gelu, xv); });
    EXPECT_NEAR(activate_derivative(Activation::gelu, x), num, 1e-8);
  }
  EXPECT_EQ(activate_derivative(Activation::identity, 3.0), 1.0);
}

TEST(Expert, ForwardMatchesLoops) {
  Rng rng(1);
  ExpertNetwork<double> e(5, 7);
  e.up = random_matrix(5, 7, rng);
  e.down = random_matrix(7, 5, rng);
  const auto x = random_matrix(1, 5, rng);
  const std::vector<double> xv(x.row(0).begin(), x.row(0).end());
  const auto got = expert_forward(x.row(0), e);
  const auto want = reference_expert(xv, e, true);
  for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(got[j], want[j], 1e-12);
  EXPECT_EQ(e.parameter_count(), 70);
  const std::vector<double> bad(4, 0.0);
  EXPECT_THROW(expert_forward(std::span<const double>(bad), e), DimensionError);
}

TEST(Layer, ForwardIsWeightedSumPlusShared) {
  Rng rng(2);
  const auto c = tiny(4, 4, 3, 2, 3, 2);
  const auto layer = MoHGELayer<double>::random(c, rng);
  const auto x = random_matrix(10, 4, rng);
  const auto out = layer_forward(x, layer);
  for (std::size_t t = 0; t < 10; ++t) {
    const std::vector<double> xv(x.row(t).begin(), x.row(t).end());
    std::vector<double> want(4, 0.0);
    const auto& d = out.decisions[t];
    for (auto id : d.selected_experts) {
      const auto y = reference_expert(xv, layer.expert(id), true);
      for (std::size_t j = 0; j < 4; ++j) want[j] += d.final_scores[id.group * 3 + id.index] * y[j];
    }
    for (const auto& s : layer.shared) {
      const auto y = reference_expert(xv, s, true);
      for (std::size_t j = 0; j < 4; ++j) want[j] += y[j];
    }
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out.outputs(t, j), want[j], 1e-12);
  }
}

TEST(Layer, ConstructionShapes) {
  const auto c = shrink(preset(Scale::B1), 64);
  MoHGELayer<float> layer(c);
  ASSERT_EQ(layer.experts.size(), 32u);
  ASSERT_EQ(layer.shared.size(), 2u);
  EXPECT_EQ(layer.expert({7, 3}).width(), 14u);
  EXPECT_EQ(layer.shared[0].width(), 9u);
  auto bad = c;
  bad.group_widths[0] = 99;
  EXPECT_THROW(MoHGELayer<float>{bad}, ConfigError);
}

TEST(Layer, RandomInitIsSeedDeterministic) {
  const auto c = shrink(preset(Scale::B1), 64);
  Rng a(42), b(42), z(43);
  EXPECT_EQ(MoHGELayer<float>::random(c, a), MoHGELayer<float>::random(c, b));
  Rng a2(42);
  EXPECT_FALSE(MoHGELayer<float>::random(c, a2) == MoHGELayer<float>::random(c, z));
}

TEST(LayerGradients, MatchCentralDifferences) {
  Rng rng(2718);
  int instances = 0;
  for (int trial = 0; trial < 40 && instances < 24; ++trial) {
    const std::size_t ng = std::vector<std::size_t>{1, 2, 4}[rng.below(3)];
    const std::size_t n = 1 + rng.below(4);
    const std::size_t kg = 1 + rng.below(ng);
    const std::size_t ke = 1 + rng.below(kg * n);
    const auto c = tiny(2 + rng.below(7), ng, n, kg, ke, rng.below(3));
    auto layer = MoHGELayer<double>::random(c, rng);
    if (rng.below(4) == 0) layer.activation = Activation::identity;
    const auto x = random_matrix(5, c.model_dim, rng);
    const auto up = random_matrix(5, c.model_dim, rng);
    const auto base = selections(x, layer);
    const auto g = layer_gradients(x, layer, up);

    bool flipped = false;
    auto check = [&](Matrix<double>& param, const Matrix<double>& grad) {
      for (std::size_t k = 0; k < param.size() && !flipped; ++k) {
        double& v = param.data()[k];
        const double saved = v;
        const double num = gradcheck::central_difference(v, [&] {
          flipped |= selections(x, layer) != base;
          return probe_loss(x, layer, up);
        });
        v = saved;
        if (flipped) return;
        EXPECT_TRUE(gradcheck::close(grad.data()[k], num))
            << "analytic " << grad.data()[k] << " numeric " << num;
      }
    };
    check(layer.gating.group_embeddings, g.group_embeddings);
    check(layer.gating.expert_embeddings, g.expert_embeddings);
    for (std::size_t e = 0; e < layer.experts.size(); ++e) {
      check(layer.experts[e].up, g.experts[e].up);
      check(layer.experts[e].down, g.experts[e].down);
    }
    for (std::size_t s = 0; s < layer.shared.size(); ++s) {
      check(layer.shared[s].up, g.shared[s].up);
      check(layer.shared[s].down, g.shared[s].down);
    }
    if (!flipped) ++instances;
  }
  EXPECT_GE(instances, 20);
}

TEST(LayerGradients, WorkerCountIsBitIdentical) {
  Rng rng(9);
  const auto c = shrink(preset(Scale::B1), 64);
  const auto layer = MoHGELayer<float>::random(c, rng);
  Matrix<float> x(700, c.model_dim), up(700, c.model_dim);
  for (auto& v : x.data()) v = static_cast<float>(rng.normal());
  for (auto& v : up.data()) v = static_cast<float>(rng.normal());
  const auto a = layer_gradients(x, layer, up, 1);
  const auto b = layer_gradients(x, layer, up, 3);
  EXPECT_EQ(a.group_embeddings, b.group_embeddings);
  EXPECT_EQ(a.expert_embeddings, b.expert_embeddings);
  for (std::size_t e = 0; e < a.experts.size(); ++e) EXPECT_EQ(a.experts[e].up, b.experts[e].up);
}

TEST(LayerGradients, ShapeErrors) {
  Rng rng(9);
  const auto c = tiny(4, 2, 2, 1, 1, 0);
  const auto layer = MoHGELayer<double>::random(c, rng);
  const auto x = random_matrix(3, 4, rng);
  EXPECT_THROW(layer_gradients(x, layer, random_matrix(2, 4, rng)), DimensionError);
  EXPECT_THROW(layer_gradients(x, layer, random_matrix(3, 5, rng)), DimensionError);
}

TEST(ParameterCount, PresetTotals) {
  const auto c = preset(Scale::B3);
  const auto p = count_parameters(c);
  std::int64_t routed = 0;
  for (auto w : c.group_widths) routed += 8 * 2 * 1024 * static_cast<std::int64_t>(w);
  EXPECT_EQ(p.routed_total, routed);
  EXPECT_EQ(p.shared_total, 2 * 2 * 1024 * 832);
  EXPECT_EQ(p.activated_routed_worst, 6 * 2 * 1024 * 1280);
  EXPECT_EQ(p.total(), routed + 2 * 2 * 1024 * 832);
  // In the 1B preset the widest group has only four experts, so the worst
  // case spills into the next group.
  const auto q = count_parameters(preset(Scale::B1));
  EXPECT_EQ(q.activated_routed_worst, 2 * 1024 * (4 * 896 + 2 * 832));
}

TEST(ParameterCount, MatchesLayerArrays) {
  Rng rng(3);
  const auto c = shrink(preset(Scale::B3), 64);
  const auto layer = MoHGELayer<float>::random(c, rng);
  std::int64_t routed = 0, shared = 0;
  for (const auto& e : layer.experts) routed += e.parameter_count();
  for (const auto& e : layer.shared) shared += e.parameter_count();
  EXPECT_EQ(count_parameters(layer).routed_total, routed);
  EXPECT_EQ(count_parameters(layer).shared_total, shared);
}

TEST(ParameterCount, ExpectedActivationFromDecisions) {
  Rng rng(4);
  const auto c = shrink(preset(Scale::B1), 64);
  const auto layer = MoHGELayer<double>::random(c, rng);
  const auto x = random_matrix(200, c.model_dim, rng);
  const auto decs = route(x, layer.gating, c);
  double want = 0.0;
  for (const auto& d : decs)
    for (auto id : d.selected_experts) want += 2.0 * 16.0 * static_cast<double>(c.group_widths[id.group]);
  want /= 200.0;
  const auto got = expected_activated_parameters(c, std::span<const RoutingDecision<double>>(decs));
  EXPECT_NEAR(got.routed, want, 1e-9);
  EXPECT_EQ(got.shared, 2.0 * 2.0 * 16.0 * 9.0);
  EXPECT_LE(got.routed, static_cast<double>(count_parameters(c).activated_routed_worst));
}
