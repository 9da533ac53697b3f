// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The mohge Authors.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "mohge/config.hpp"
#include "mohge/rng.hpp"
#include "mohge/routing.hpp"
#include "oracle.hpp"

using namespace mohge;

namespace {

ModelConfig tiny_config(std::size_t d, std::size_t ng, std::size_t n, std::size_t kg,
                        std::size_t ke) {
  ModelConfig c;
  c.model_dim = d;
  c.num_groups = ng;
  c.experts_per_group = n;
  c.top_groups = kg;
  c.top_experts = ke;
  c.base_width = 8;
  c.group_widths.assign(ng, 8);
  for (std::size_t i = 0; i < ng / 2; ++i) {
    c.group_widths[i] = 8 - (ng / 2 - i);
    c.group_widths[ng - 1 - i] = 8 + (ng / 2 - i);
  }
  return c;
}

Matrix<double> random_tokens(std::size_t t, std::size_t d, Rng& rng) {
  Matrix<double> m(t, d);
  for (auto& v : m.data()) v = rng.normal();
  return m;
}

std::vector<std::vector<double>> rows(const Matrix<double>& m) {
  std::vector<std::vector<double>> out;
  for (std::size_t r = 0; r < m.rows(); ++r) out.emplace_back(m.row(r).begin(), m.row(r).end());
  return out;
}

}  // namespace

TEST(Sigmoid, KnownValues) {
  EXPECT_NEAR(sigmoid(std::log(3.0)), 0.75, 1e-15);
  EXPECT_DOUBLE_EQ(sigmoid(0.0), 0.5);
  EXPECT_GT(sigmoid(-1000.0), -1e-300);
  EXPECT_TRUE(std::isfinite(sigmoid(-1000.0)));
  EXPECT_DOUBLE_EQ(sigmoid(1000.0), 1.0);
  EXPECT_NEAR(sigmoid(-3.0f), 1.0f - sigmoid(3.0f), 1e-7f);
}

TEST(Softmax, MatchesScalarOracle) {
  std::vector<double> v{1, 2, 3, 4};
  softmax_inplace(std::span<double>(v));
  const auto ref = oracle::softmax({1, 2, 3, 4});
  for (std::size_t k = 0; k < v.size(); ++k) EXPECT_NEAR(v[k], ref[k], 1e-15);
  EXPECT_NEAR(std::accumulate(v.begin(), v.end(), 0.0), 1.0, 1e-15);
  std::vector<double> big{1000, 1000};
  softmax_inplace(std::span<double>(big));
  EXPECT_DOUBLE_EQ(big[0], 0.5);
}

TEST(SelectGroups, TopKWithLowIndexTies) {
  const std::vector<double> gs{0.2, 0.9, 0.5, 0.9, 0.1};
  EXPECT_EQ(select_groups<double>(gs, 2), (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(select_groups<double>(gs, 3), (std::vector<std::size_t>{1, 2, 3}));
  const std::vector<double> flat{0.5, 0.5, 0.5, 0.5};
  EXPECT_EQ(select_groups<double>(flat, 2), (std::vector<std::size_t>{0, 1}));
  EXPECT_THROW(select_groups<double>(gs, 0), ConfigError);
  EXPECT_THROW(select_groups<double>(gs, 6), ConfigError);
}

TEST(ScaleAndSelect, TwoGroupWorkedExample) {
  const std::vector<double> es_prime{0.7, 0.3, 0.6, 0.4};
  const std::vector<double> gs{0.5, 0.9};
  const auto sel = scale_and_select<double>(es_prime, gs, 2);
  const std::vector<double> want{0.35, 0.15, 0.54, 0.36};
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(sel.es_double[k], want[k], 1e-15);
  ASSERT_EQ(sel.selected.size(), 2u);
  EXPECT_EQ(sel.selected[0], (ExpertId{1, 0}));
  EXPECT_EQ(sel.selected[1], (ExpertId{1, 1}));
  const auto es = normalize_global<double>(sel.es_triple);
  EXPECT_NEAR(es[2], 0.6, 1e-15);
  EXPECT_NEAR(es[3], 0.4, 1e-15);
  EXPECT_EQ(es[0], 0.0);
  EXPECT_EQ(es[1], 0.0);
}

TEST(ScaleAndSelect, UnitGroupScoresReduceToTopKOverIntraScores) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> es_prime(12);
    for (auto& v : es_prime) v = rng.uniform(0.01, 1.0);
    const std::vector<double> gs(3, 1.0);
    const auto sel = scale_and_select<double>(es_prime, gs, 5);
    std::vector<std::size_t> want = oracle::best_subset(es_prime, 5);
    std::vector<std::size_t> got;
    for (auto id : sel.selected) got.push_back(id.group * 4 + id.index);
    EXPECT_EQ(got, want);
  }
}

TEST(ScaleAndSelect, TiesGoToLowerGroupThenIndex) {
  const std::vector<double> es_prime{0.5, 0.5, 0.5, 0.5};
  const std::vector<double> gs{1.0, 1.0};
  const auto sel = scale_and_select<double>(es_prime, gs, 3);
  ASSERT_EQ(sel.selected.size(), 3u);
  EXPECT_EQ(sel.selected[0], (ExpertId{0, 0}));
  EXPECT_EQ(sel.selected[1], (ExpertId{0, 1}));
  EXPECT_EQ(sel.selected[2], (ExpertId{1, 0}));
}

TEST(ScaleAndSelect, RejectsTooManyExperts) {
  const std::vector<double> es_prime{0.7, 0.3, 0.0, 0.0};
  const std::vector<double> gs{0.5, 0.9};
  EXPECT_THROW(scale_and_select<double>(es_prime, gs, 3), NumericalError);
  EXPECT_THROW(scale_and_select<double>(es_prime, gs, 5), ConfigError);
  EXPECT_THROW(scale_and_select<double>(es_prime, gs, 0), ConfigError);
}

TEST(NormalizeGlobal, RejectsAllZero) {
  const std::vector<double> z(4, 0.0);
  EXPECT_THROW(normalize_global<double>(z), NumericalError);
}

TEST(RouteToken, MatchesBruteForceOracle) {
  Rng rng(2026);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t ng = 2 + 2 * rng.below(3), n = 1 + rng.below(4);
    const std::size_t kg = 1 + rng.below(ng), ke = 1 + rng.below(kg * n);
    const auto c = tiny_config(3 + rng.below(5), ng, n, kg, ke);
    const auto p = GatingParameters<double>::random(c, rng, 0.8);
    const auto x = random_tokens(1, c.model_dim, rng);
    const auto d = route_token(x.row(0), p, c);
    const auto ref = oracle::route(rows(x)[0], rows(p.group_embeddings), rows(p.expert_embeddings),
                                   n, kg, ke);
    EXPECT_EQ(d.selected_groups, ref.groups);
    std::vector<std::size_t> got;
    for (auto id : d.selected_experts) got.push_back(id.group * n + id.index);
    EXPECT_EQ(got, ref.experts);
    for (std::size_t k = 0; k < ng * n; ++k) {
      EXPECT_NEAR(d.final_scores[k], ref.es[k], 1e-12);
      EXPECT_NEAR(d.es_prime[k], ref.es_prime[k], 1e-12);
    }
  }
}

TEST(RouteToken, StageInvariants) {
  Rng rng(5);
  const auto c = shrink(preset(Scale::B3), 64);
  const auto p = GatingParameters<double>::random(c, rng, 0.5);
  const auto x = random_tokens(500, c.model_dim, rng);
  const std::size_t n = c.experts_per_group;
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const auto d = route_token(x.row(t), p, c);
    ASSERT_EQ(d.selected_groups.size(), c.top_groups);
    for (double g : d.group_scores) {
      EXPECT_GT(g, 0.0);
      EXPECT_LT(g, 1.0);
    }
    for (std::size_t g = 0; g < c.num_groups; ++g) {
      double row = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        row += d.es_prime[g * n + i];
        EXPECT_EQ(d.es_double[g * n + i], d.es_prime[g * n + i] * d.group_scores[g]);
      }
      const bool sel = std::binary_search(d.selected_groups.begin(), d.selected_groups.end(), g);
      if (sel) EXPECT_NEAR(row, 1.0, 1e-12);
      else EXPECT_EQ(row, 0.0);
    }
    std::size_t nz = 0;
    double sum = 0.0;
    for (double v : d.es_triple) nz += v != 0.0;
    for (double v : d.final_scores) sum += v;
    EXPECT_EQ(nz, c.top_experts);
    EXPECT_NEAR(sum, 1.0, 1e-12);
    ASSERT_EQ(d.selected_experts.size(), c.top_experts);
    EXPECT_TRUE(std::is_sorted(d.selected_experts.begin(), d.selected_experts.end()));
    for (auto id : d.selected_experts)
      EXPECT_TRUE(std::binary_search(d.selected_groups.begin(), d.selected_groups.end(), id.group));
  }
}

TEST(Route, GroupPermutationEquivariance) {
  Rng rng(17);
  const auto c = shrink(preset(Scale::B1), 64);
  const auto p = GatingParameters<double>::random(c, rng, 0.5);
  const auto x = random_tokens(64, c.model_dim, rng);
  const std::size_t n = c.experts_per_group;
  std::vector<std::size_t> perm(c.num_groups);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (int trial = 0; trial < 20; ++trial) {
    for (std::size_t k = perm.size(); k > 1; --k) std::swap(perm[k - 1], perm[rng.below(k)]);
    GatingParameters<double> q = p;
    for (std::size_t g = 0; g < c.num_groups; ++g) {
      std::copy_n(p.group(g).begin(), c.model_dim, q.group(perm[g]).begin());
      for (std::size_t i = 0; i < n; ++i)
        std::copy_n(p.expert(g, i).begin(), c.model_dim, q.expert(perm[g], i).begin());
    }
    for (std::size_t t = 0; t < x.rows(); ++t) {
      const auto a = route_token(x.row(t), p, c);
      const auto b = route_token(x.row(t), q, c);
      for (std::size_t g = 0; g < c.num_groups; ++g)
        for (std::size_t i = 0; i < n; ++i)
          ASSERT_EQ(a.final_scores[g * n + i], b.final_scores[perm[g] * n + i]);
    }
  }
}

TEST(Route, WorkerCountDoesNotChangeResults) {
  Rng rng(3);
  const auto c = shrink(preset(Scale::B3), 64);
  const auto p = GatingParameters<float>::random(c, rng, 0.5);
  Matrix<float> x(1000, c.model_dim);
  for (auto& v : x.data()) v = static_cast<float>(rng.normal());
  const auto a = route(x, p, c, 1);
  const auto b = route(x, p, c, 3);
  EXPECT_EQ(a, b);
}

TEST(Route, DuplicatedTokensRouteIdentically) {
  Rng rng(8);
  const auto c = shrink(preset(Scale::B1), 64);
  const auto p = GatingParameters<double>::random(c, rng, 0.5);
  Matrix<double> x(2, c.model_dim);
  for (std::size_t j = 0; j < c.model_dim; ++j) x(0, j) = x(1, j) = rng.normal();
  const auto d = route(x, p, c);
  EXPECT_EQ(d[0], d[1]);
}

TEST(Route, InputErrors) {
  Rng rng(1);
  const auto c = shrink(preset(Scale::B1), 64);
  const auto p = GatingParameters<double>::random(c, rng, 0.5);
  const std::vector<double> short_token(c.model_dim - 1, 0.0);
  EXPECT_THROW(route_token(std::span<const double>(short_token), p, c), DimensionError);
  EXPECT_THROW(route(Matrix<double>(0, c.model_dim), p, c), ConfigError);
  auto bad = p;
  bad.group_embeddings(0, 0) = std::nan("");
  EXPECT_THROW(route(Matrix<double>(1, c.model_dim), bad, c), NumericalError);
  auto other = shrink(preset(Scale::B3), 64);
  EXPECT_THROW(route(Matrix<double>(1, c.model_dim), p, other), DimensionError);
}
