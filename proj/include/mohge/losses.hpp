// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The mohge Authors.

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "mohge/config.hpp"
#include "mohge/error.hpp"
#include "mohge/parallel.hpp"
#include "mohge/routing.hpp"
#include "mohge/tensor.hpp"

namespace mohge {

// Batch statistics behind both auxiliary losses. Frequencies carry the 1/T
// normalization, so stats from token shards merge by token-weighted average.
struct RoutingBatchStats {
  std::size_t token_count = 0;
  std::size_t num_groups = 0;
  std::size_t experts_per_group = 0;
  std::vector<double> group_freq;   // f^G, per group
  std::vector<double> group_prob;   // p^G, per group
  std::vector<double> expert_freq;  // f^E, [group * N + index]
  std::vector<double> expert_prob;  // p^E, [group * N + index]
};

template <typename T>
RoutingBatchStats accumulate_stats(std::span<const RoutingDecision<T>> decisions,
                                   const ModelConfig& config) {
  if (decisions.empty()) throw ConfigError("accumulate_stats: no tokens");
  const std::size_t ng = config.num_groups;
  const std::size_t n = config.experts_per_group;
  RoutingBatchStats s;
  s.token_count = decisions.size();
  s.num_groups = ng;
  s.experts_per_group = n;
  s.group_freq.assign(ng, 0.0);
  s.group_prob.assign(ng, 0.0);
  s.expert_freq.assign(ng * n, 0.0);
  s.expert_prob.assign(ng * n, 0.0);
  for (const auto& d : decisions) {
    require_dim(d.group_scores.size(), ng, "decision group_scores");
    require_dim(d.es_prime.size(), ng * n, "decision es_prime");
    for (std::size_t g : d.selected_groups) s.group_freq[g] += 1.0;
    double gs_sum = 0.0;
    for (T v : d.group_scores) gs_sum += static_cast<double>(v);
    for (std::size_t g = 0; g < ng; ++g)
      s.group_prob[g] += static_cast<double>(d.group_scores[g]) / gs_sum;
    for (const auto& e : d.selected_experts) s.expert_freq[e.group * n + e.index] += 1.0;
    for (std::size_t g = 0; g < ng; ++g) {
      double row = 0.0;
      for (std::size_t i = 0; i < n; ++i) row += static_cast<double>(d.es_prime[g * n + i]);
      if (row == 0.0) continue;
      for (std::size_t i = 0; i < n; ++i)
        s.expert_prob[g * n + i] +=
            static_cast<double>(d.es_prime[g * n + i]) / (row + config.epsilon);
    }
  }
  const double tc = static_cast<double>(s.token_count);
  const double gscale = static_cast<double>(ng) / (static_cast<double>(config.top_groups) * tc);
  const double escale = static_cast<double>(n) / (static_cast<double>(config.top_experts) * tc);
  for (auto& v : s.group_freq) v *= gscale;
  for (auto& v : s.group_prob) v /= tc;
  for (auto& v : s.expert_freq) v *= escale;
  for (auto& v : s.expert_prob) v /= tc;
  return s;
}

template <typename T>
RoutingBatchStats accumulate_stats(const std::vector<RoutingDecision<T>>& decisions,
                                   const ModelConfig& config) {
  return accumulate_stats(std::span<const RoutingDecision<T>>(decisions), config);
}

// Token-weighted average of two shards' statistics.
inline RoutingBatchStats merge_stats(const RoutingBatchStats& a, const RoutingBatchStats& b) {
  if (a.token_count == 0) return b;
  if (b.token_count == 0) return a;
  if (a.num_groups != b.num_groups || a.experts_per_group != b.experts_per_group)
    throw DimensionError("merge_stats: shape mismatch");
  RoutingBatchStats m = a;
  m.token_count = a.token_count + b.token_count;
  const double wa = static_cast<double>(a.token_count) / static_cast<double>(m.token_count);
  const double wb = static_cast<double>(b.token_count) / static_cast<double>(m.token_count);
  auto mix = [&](std::vector<double>& dst, const std::vector<double>& x,
                 const std::vector<double>& y) {
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = wa * x[k] + wb * y[k];
  };
  mix(m.group_freq, a.group_freq, b.group_freq);
  mix(m.group_prob, a.group_prob, b.group_prob);
  mix(m.expert_freq, a.expert_freq, b.expert_freq);
  mix(m.expert_prob, a.expert_prob, b.expert_prob);
  return m;
}

// Width-weighted group penalty: alpha_g * sum_i (W_i / W_max) f^G_i p^G_i.
inline double group_wise_loss(const RoutingBatchStats& stats,
                              std::span<const std::size_t> widths, double alpha_g) {
  require_dim(widths.size(), stats.num_groups, "widths");
  const double w_max = static_cast<double>(widths.back());
  double acc = 0.0;
  for (std::size_t i = 0; i < widths.size(); ++i)
    acc += static_cast<double>(widths[i]) / w_max * stats.group_freq[i] * stats.group_prob[i];
  return alpha_g * acc;
}

inline double group_wise_loss(const RoutingBatchStats& stats, const ModelConfig& c) {
  return group_wise_loss(stats, std::span<const std::size_t>(c.group_widths), c.alpha_group);
}

// Intra-group balance penalty: alpha_e * sum_g sum_i f^E_{g,i} p^E_{g,i}.
inline double intra_group_loss(const RoutingBatchStats& stats, double alpha_e) {
  double acc = 0.0;
  for (std::size_t k = 0; k < stats.expert_freq.size(); ++k)
    acc += stats.expert_freq[k] * stats.expert_prob[k];
  return alpha_e * acc;
}

template <typename T>
struct AuxLossGradients {
  Matrix<T> group_embeddings;
  Matrix<T> expert_embeddings;
  double group_loss = 0.0;
  double expert_loss = 0.0;
  RoutingBatchStats stats;
};

// Gradients of L_G + L_E for decisions already computed on `tokens`.
// Frequencies are held constant; gradient flows through the normalized group
// scores and the intra-group softmax.
template <typename T>
AuxLossGradients<T> aux_loss_gradients(const Matrix<T>& tokens,
                                       std::span<const RoutingDecision<T>> decisions,
                                       const GatingParameters<T>& params,
                                       const ModelConfig& config, std::size_t workers = 1) {
  require_dim(decisions.size(), tokens.rows(), "decisions");
  require_dim(tokens.cols(), config.model_dim, "token width");
  params.check(config);
  const std::size_t ng = config.num_groups;
  const std::size_t n = config.experts_per_group;
  const std::size_t d = config.model_dim;
  const double tc = static_cast<double>(tokens.rows());
  AuxLossGradients<T> out;
  out.stats = accumulate_stats(decisions, config);
  out.group_loss = group_wise_loss(out.stats, config);
  out.expert_loss = intra_group_loss(out.stats, config.alpha_expert);

  std::vector<double> cgroup(ng);
  const double w_max = static_cast<double>(config.max_width());
  for (std::size_t g = 0; g < ng; ++g)
    cgroup[g] = config.alpha_group * static_cast<double>(config.group_widths[g]) / w_max *
                out.stats.group_freq[g];
  std::vector<double> cexpert(ng * n);
  for (std::size_t k = 0; k < ng * n; ++k)
    cexpert[k] = config.alpha_expert * out.stats.expert_freq[k];

  std::vector<double> grad_group(ng * d, 0.0);
  std::vector<double> grad_expert(ng * n * d, 0.0);
  struct Acc {
    std::vector<double> group, expert;
  };
  parallel_reduce_ordered(
      tokens.rows(), workers,
      [&] { return Acc{std::vector<double>(ng * d, 0.0), std::vector<double>(ng * n * d, 0.0)}; },
      [&](Acc& acc, std::size_t b, std::size_t e) {
        for (std::size_t t = b; t < e; ++t) {
          const auto& dec = decisions[t];
          const auto x = tokens.row(t);
          double s = 0.0;
          for (T v : dec.group_scores) s += static_cast<double>(v);
          double cbar = 0.0;
          for (std::size_t g = 0; g < ng; ++g)
            cbar += cgroup[g] * static_cast<double>(dec.group_scores[g]) / s;
          for (std::size_t g = 0; g < ng; ++g) {
            const double gs = static_cast<double>(dec.group_scores[g]);
            const double dz = (cgroup[g] - cbar) / (s * tc) * gs * (1.0 - gs);
            double* row = acc.group.data() + g * d;
            for (std::size_t j = 0; j < d; ++j) row[j] += dz * static_cast<double>(x[j]);
          }
          for (std::size_t g : dec.selected_groups) {
            const T* a = dec.es_prime.data() + g * n;
            double sum_a = 0.0, m = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
              sum_a += static_cast<double>(a[i]);
              m += cexpert[g * n + i] * static_cast<double>(a[i]);
            }
            const double denom = sum_a + config.epsilon;
            for (std::size_t k = 0; k < n; ++k) {
              const double ak = static_cast<double>(a[k]);
              const double du = (ak * (cexpert[g * n + k] - m) / denom -
                                 m * ak * (1.0 - sum_a) / (denom * denom)) /
                                tc;
              double* row = acc.expert.data() + (g * n + k) * d;
              for (std::size_t j = 0; j < d; ++j) row[j] += du * static_cast<double>(x[j]);
            }
          }
        }
      },
      [&](const Acc& acc) {
        for (std::size_t k = 0; k < grad_group.size(); ++k) grad_group[k] += acc.group[k];
        for (std::size_t k = 0; k < grad_expert.size(); ++k) grad_expert[k] += acc.expert[k];
      });

  out.group_embeddings = Matrix<T>(ng, d);
  out.expert_embeddings = Matrix<T>(ng * n, d);
  for (std::size_t k = 0; k < grad_group.size(); ++k) {
    if (!std::isfinite(grad_group[k]))
      throw NumericalError("aux_loss_gradients: non-finite group embedding gradient");
    out.group_embeddings.data()[k] = static_cast<T>(grad_group[k]);
  }
  for (std::size_t k = 0; k < grad_expert.size(); ++k) {
    if (!std::isfinite(grad_expert[k]))
      throw NumericalError("aux_loss_gradients: non-finite expert embedding gradient");
    out.expert_embeddings.data()[k] = static_cast<T>(grad_expert[k]);
  }
  return out;
}

template <typename T>
AuxLossGradients<T> loss_gradients(const Matrix<T>& tokens, const GatingParameters<T>& params,
                                   const ModelConfig& config, std::size_t workers = 1) {
  const auto decisions = route(tokens, params, config, workers);
  return aux_loss_gradients(tokens, std::span<const RoutingDecision<T>>(decisions), params,
                            config, workers);
}

}  // namespace mohge
