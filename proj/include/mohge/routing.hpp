// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The mohge Authors.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "mohge/config.hpp"
#include "mohge/error.hpp"
#include "mohge/parallel.hpp"
#include "mohge/rng.hpp"
#include "mohge/tensor.hpp"

namespace mohge {

struct ExpertId {
  std::size_t group = 0;
  std::size_t index = 0;

  auto operator<=>(const ExpertId&) const = default;
};

// Learnable routing state: one centroid per group and one embedding per
// expert, all of length model_dim.
template <typename T>
struct GatingParameters {
  Matrix<T> group_embeddings;   // num_groups x model_dim
  Matrix<T> expert_embeddings;  // (num_groups * experts_per_group) x model_dim
  std::size_t experts_per_group = 0;

  GatingParameters() = default;
  explicit GatingParameters(const ModelConfig& c)
      : group_embeddings(c.num_groups, c.model_dim),
        expert_embeddings(c.total_experts(), c.model_dim),
        experts_per_group(c.experts_per_group) {}

  std::size_t model_dim() const { return group_embeddings.cols(); }
  std::size_t num_groups() const { return group_embeddings.rows(); }

  std::span<const T> group(std::size_t g) const { return group_embeddings.row(g); }
  std::span<T> group(std::size_t g) { return group_embeddings.row(g); }
  std::span<const T> expert(std::size_t g, std::size_t i) const {
    return expert_embeddings.row(g * experts_per_group + i);
  }
  std::span<T> expert(std::size_t g, std::size_t i) {
    return expert_embeddings.row(g * experts_per_group + i);
  }

  // i.i.d. normal entries.
  static GatingParameters random(const ModelConfig& c, Rng& rng, double stddev) {
    GatingParameters p(c);
    for (auto& v : p.group_embeddings.data()) v = static_cast<T>(rng.normal(0.0, stddev));
    for (auto& v : p.expert_embeddings.data()) v = static_cast<T>(rng.normal(0.0, stddev));
    return p;
  }

  void check(const ModelConfig& c) const {
    require_dim(group_embeddings.rows(), c.num_groups, "group_embeddings rows");
    require_dim(group_embeddings.cols(), c.model_dim, "group_embeddings cols");
    require_dim(expert_embeddings.rows(), c.total_experts(), "expert_embeddings rows");
    require_dim(expert_embeddings.cols(), c.model_dim, "expert_embeddings cols");
    require_dim(experts_per_group, c.experts_per_group, "experts_per_group");
    auto finite = [](const Matrix<T>& m) {
      return std::all_of(m.data().begin(), m.data().end(),
                         [](T v) { return std::isfinite(v); });
    };
    if (!finite(group_embeddings) || !finite(expert_embeddings))
      throw NumericalError("gating parameters contain non-finite entries");
  }

  bool operator==(const GatingParameters&) const = default;
};

// Per-token record of every routing stage. Score matrices are flattened
// row-major as [group * experts_per_group + index].
template <typename T>
struct RoutingDecision {
  std::vector<T> group_scores;               // GS, one per group
  std::vector<std::size_t> selected_groups;  // ascending
  std::vector<T> es_prime;                   // intra-group softmax, zero outside selected groups
  std::vector<T> es_double;                  // es_prime scaled by the group score
  std::vector<T> es_triple;                  // es_double restricted to the top-K_e entries
  std::vector<T> final_scores;               // es_triple normalized to sum 1
  std::vector<ExpertId> selected_experts;    // ascending (group, index)

  bool operator==(const RoutingDecision&) const = default;
};

template <typename T>
T sigmoid(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

// In-place softmax with max subtraction.
template <typename T>
void softmax_inplace(std::span<T> v) {
  if (v.empty()) return;
  const T mx = *std::max_element(v.begin(), v.end());
  T sum{};
  for (auto& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (auto& x : v) x /= sum;
}

template <typename T>
std::vector<T> group_scores(std::span<const T> token, const GatingParameters<T>& params) {
  require_dim(token.size(), params.model_dim(), "token");
  std::vector<T> gs(params.num_groups());
  for (std::size_t g = 0; g < gs.size(); ++g) gs[g] = sigmoid(dot(token, params.group(g)));
  return gs;
}

// Indices of the k largest scores, ties to the lower index, returned ascending.
template <typename T>
std::vector<std::size_t> select_groups(std::span<const T> gs, std::size_t k) {
  if (k < 1 || k > gs.size())
    throw ConfigError("select_groups: k_g must lie in [1, num_groups]");
  std::vector<std::size_t> idx(gs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return gs[a] > gs[b] || (gs[a] == gs[b] && a < b);
                    });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <typename T>
std::vector<T> intra_group_scores(std::span<const T> token, const GatingParameters<T>& params,
                                  std::span<const std::size_t> selected) {
  require_dim(token.size(), params.model_dim(), "token");
  if (selected.empty()) throw ConfigError("intra_group_scores: no group selected");
  const std::size_t n = params.experts_per_group;
  std::vector<T> es(params.num_groups() * n, T(0));
  for (std::size_t g : selected) {
    if (g >= params.num_groups()) throw ConfigError("intra_group_scores: group out of range");
    std::span<T> row(es.data() + g * n, n);
    for (std::size_t i = 0; i < n; ++i) row[i] = dot(token, params.expert(g, i));
    softmax_inplace(row);
  }
  return es;
}

template <typename T>
struct ScaledSelection {
  std::vector<T> es_double;
  std::vector<T> es_triple;
  std::vector<ExpertId> selected;  // ascending (group, index)
};

// Scales intra-group scores by their group score and keeps the k_e largest
// entries globally. Ties go to the lower (group, index).
template <typename T>
ScaledSelection<T> scale_and_select(std::span<const T> es_prime, std::span<const T> gs,
                                    std::size_t k_e) {
  const std::size_t num_groups = gs.size();
  if (num_groups == 0 || es_prime.size() % num_groups != 0)
    throw DimensionError("scale_and_select: es_prime is not num_groups x N");
  const std::size_t n = es_prime.size() / num_groups;
  ScaledSelection<T> out;
  out.es_double.resize(es_prime.size());
  std::vector<std::size_t> candidates;
  for (std::size_t g = 0; g < num_groups; ++g)
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = g * n + i;
      out.es_double[k] = es_prime[k] * gs[g];
      if (out.es_double[k] > T(0)) candidates.push_back(k);
    }
  if (k_e < 1 || k_e > es_prime.size())
    throw ConfigError("scale_and_select: k_e must lie in [1, num_groups * N]");
  // Fewer positive scores than k_e only happens when scores underflow.
  if (k_e > candidates.size())
    throw NumericalError("scale_and_select: fewer than k_e positive scores");
  const auto& v = out.es_double;
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k_e),
                    candidates.end(), [&](std::size_t a, std::size_t b) {
                      return v[a] > v[b] || (v[a] == v[b] && a < b);
                    });
  candidates.resize(k_e);
  std::sort(candidates.begin(), candidates.end());
  out.es_triple.assign(es_prime.size(), T(0));
  for (std::size_t k : candidates) {
    out.es_triple[k] = v[k];
    out.selected.push_back({k / n, k % n});
  }
  return out;
}

// Divides by the total. The total is accumulated over the nonzero entries in
// descending order so the result does not depend on how groups are labelled.
template <typename T>
std::vector<T> normalize_global(std::span<const T> es_triple) {
  std::vector<T> nz;
  for (T v : es_triple)
    if (v != T(0)) nz.push_back(v);
  if (nz.empty()) throw NumericalError("normalize_global: all scores are zero");
  std::sort(nz.begin(), nz.end(), std::greater<T>());
  T total{};
  for (T v : nz) total += v;
  std::vector<T> es(es_triple.size());
  for (std::size_t k = 0; k < es.size(); ++k) es[k] = es_triple[k] / total;
  return es;
}

template <typename T>
RoutingDecision<T> route_token(std::span<const T> token, const GatingParameters<T>& params,
                               const ModelConfig& config) {
  RoutingDecision<T> d;
  d.group_scores = group_scores(token, params);
  d.selected_groups = select_groups<T>(d.group_scores, config.top_groups);
  d.es_prime = intra_group_scores(token, params, std::span<const std::size_t>(d.selected_groups));
  auto sel = scale_and_select<T>(d.es_prime, d.group_scores, config.top_experts);
  d.es_double = std::move(sel.es_double);
  d.es_triple = std::move(sel.es_triple);
  d.selected_experts = std::move(sel.selected);
  d.final_scores = normalize_global<T>(d.es_triple);
  return d;
}

// Routes every row of `tokens`. Output order follows token order for any
// worker count.
template <typename T>
std::vector<RoutingDecision<T>> route(const Matrix<T>& tokens, const GatingParameters<T>& params,
                                      const ModelConfig& config, std::size_t workers = 1) {
  if (tokens.rows() == 0) throw ConfigError("route: empty batch");
  require_dim(tokens.cols(), config.model_dim, "token");
  params.check(config);
  std::vector<RoutingDecision<T>> out(tokens.rows());
  parallel_for_chunks(tokens.rows(), workers, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t t = b; t < e; ++t) out[t] = route_token(tokens.row(t), params, config);
  });
  return out;
}

}  // namespace mohge
