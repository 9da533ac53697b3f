// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The mohge Authors.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <vector>

#include "mohge/config.hpp"
#include "mohge/error.hpp"
#include "mohge/losses.hpp"
#include "mohge/parallel.hpp"
#include "mohge/rng.hpp"
#include "mohge/routing.hpp"
#include "mohge/tensor.hpp"

namespace mohge {

enum class Activation { gelu, identity };

template <typename T>
T activate(Activation a, T x) {
  if (a == Activation::identity) return x;
  return T(0.5) * x * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
}

template <typename T>
T activate_derivative(Activation a, T x) {
  if (a == Activation::identity) return T(1);
  const T cdf = T(0.5) * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * static_cast<T>(0.5 * std::numbers::inv_sqrtpi *
                                                           std::numbers::sqrt2);
  return cdf + x * pdf;
}

// Two-matrix feed-forward expert: out = act(x . up) . down, with x a row
// vector, up model_dim x width and down width x model_dim.
template <typename T>
struct ExpertNetwork {
  Matrix<T> up;
  Matrix<T> down;

  ExpertNetwork() = default;
  ExpertNetwork(std::size_t model_dim, std::size_t width)
      : up(model_dim, width), down(width, model_dim) {}

  std::size_t model_dim() const { return up.rows(); }
  std::size_t width() const { return up.cols(); }
  std::int64_t parameter_count() const {
    return static_cast<std::int64_t>(up.size() + down.size());
  }

  // Pre-activation hidden values, length width.
  void hidden(std::span<const T> x, std::span<T> pre) const {
    const std::size_t d = model_dim(), w = width();
    std::fill(pre.begin(), pre.end(), T(0));
    for (std::size_t j = 0; j < d; ++j) {
      const T xj = x[j];
      const T* row = up.row(j).data();
      for (std::size_t k = 0; k < w; ++k) pre[k] += xj * row[k];
    }
  }

  // out += scale * expert(x). `pre` receives the pre-activation values.
  void forward_accumulate(std::span<const T> x, Activation act, T scale, std::span<T> out,
                          std::span<T> pre) const {
    hidden(x, pre);
    const std::size_t d = model_dim(), w = width();
    for (std::size_t k = 0; k < w; ++k) {
      const T a = activate(act, pre[k]) * scale;
      const T* row = down.row(k).data();
      for (std::size_t j = 0; j < d; ++j) out[j] += a * row[j];
    }
  }

  bool operator==(const ExpertNetwork&) const = default;
};

template <typename T>
std::vector<T> expert_forward(std::span<const T> token, const ExpertNetwork<T>& expert,
                              Activation act = Activation::gelu) {
  require_dim(token.size(), expert.model_dim(), "token");
  require_dim(expert.down.rows(), expert.width(), "down_proj rows");
  require_dim(expert.down.cols(), expert.model_dim(), "down_proj cols");
  std::vector<T> out(expert.model_dim(), T(0)), pre(expert.width());
  expert.forward_accumulate(token, act, T(1), out, pre);
  return out;
}

struct LayerInit {
  double gating_stddev = -1.0;  // negative: 1 / sqrt(model_dim)
  double up_stddev = -1.0;      // negative: 1 / sqrt(model_dim)
  double down_stddev = -1.0;    // negative: 1 / sqrt(width)
};

template <typename T>
struct MoHGELayer {
  ModelConfig config;
  GatingParameters<T> gating;
  std::vector<ExpertNetwork<T>> experts;  // [group * N + index]
  std::vector<ExpertNetwork<T>> shared;
  Activation activation = Activation::gelu;

  MoHGELayer() = default;
  explicit MoHGELayer(const ModelConfig& c) : config(c), gating(c) {
    require_valid(c);
    experts.reserve(c.total_experts());
    for (std::size_t g = 0; g < c.num_groups; ++g)
      for (std::size_t i = 0; i < c.experts_per_group; ++i)
        experts.emplace_back(c.model_dim, c.group_widths[g]);
    for (std::size_t s = 0; s < c.num_shared_experts; ++s)
      shared.emplace_back(c.model_dim, c.base_width);
  }

  static MoHGELayer random(const ModelConfig& c, Rng& rng, const LayerInit& init = {}) {
    MoHGELayer layer(c);
    const double d = static_cast<double>(c.model_dim);
    const double gs = init.gating_stddev >= 0 ? init.gating_stddev : 1.0 / std::sqrt(d);
    Rng grng = rng.fork(1);
    layer.gating = GatingParameters<T>::random(c, grng, gs);
    Rng erng = rng.fork(2);
    auto fill = [&](ExpertNetwork<T>& e) {
      const double us = init.up_stddev >= 0 ? init.up_stddev : 1.0 / std::sqrt(d);
      const double ds = init.down_stddev >= 0
                            ? init.down_stddev
                            : 1.0 / std::sqrt(static_cast<double>(e.width()));
      for (auto& v : e.up.data()) v = static_cast<T>(erng.normal(0.0, us));
      for (auto& v : e.down.data()) v = static_cast<T>(erng.normal(0.0, ds));
    };
    for (auto& e : layer.experts) fill(e);
    for (auto& e : layer.shared) fill(e);
    return layer;
  }

  const ExpertNetwork<T>& expert(ExpertId id) const {
    return experts[id.group * config.experts_per_group + id.index];
  }
  ExpertNetwork<T>& expert(ExpertId id) {
    return experts[id.group * config.experts_per_group + id.index];
  }

  bool operator==(const MoHGELayer&) const = default;
};

template <typename T>
struct WeightedExpert {
  ExpertId id;
  T weight;
};

// Sum of weighted routed experts plus every shared expert at weight 1.
template <typename T>
std::vector<T> mix_experts(std::span<const T> token, const MoHGELayer<T>& layer,
                           std::span<const WeightedExpert<T>> routed) {
  const std::size_t d = layer.config.model_dim;
  require_dim(token.size(), d, "token");
  std::vector<T> out(d, T(0));
  std::vector<T> pre(std::max(layer.config.max_width(), layer.config.base_width));
  for (const auto& we : routed) {
    const auto& e = layer.expert(we.id);
    e.forward_accumulate(token, layer.activation, we.weight, out,
                         std::span<T>(pre.data(), e.width()));
  }
  for (const auto& e : layer.shared)
    e.forward_accumulate(token, layer.activation, T(1), out,
                         std::span<T>(pre.data(), e.width()));
  return out;
}

template <typename T>
std::vector<WeightedExpert<T>> routed_weights(const RoutingDecision<T>& d, std::size_t n) {
  std::vector<WeightedExpert<T>> w;
  w.reserve(d.selected_experts.size());
  for (const auto& id : d.selected_experts)
    w.push_back({id, d.final_scores[id.group * n + id.index]});
  return w;
}

template <typename T>
struct LayerOutput {
  Matrix<T> outputs;
  std::vector<RoutingDecision<T>> decisions;
  double group_loss = 0.0;   // L_G
  double expert_loss = 0.0;  // L_E
  RoutingBatchStats stats;
};

template <typename T>
LayerOutput<T> layer_forward(const Matrix<T>& tokens, const MoHGELayer<T>& layer,
                             std::size_t workers = 1) {
  LayerOutput<T> out;
  out.decisions = route(tokens, layer.gating, layer.config, workers);
  out.outputs = Matrix<T>(tokens.rows(), layer.config.model_dim);
  const std::size_t n = layer.config.experts_per_group;
  parallel_for_chunks(tokens.rows(), workers, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t t = b; t < e; ++t) {
      const auto w = routed_weights(out.decisions[t], n);
      const auto y = mix_experts(tokens.row(t), layer, std::span<const WeightedExpert<T>>(w));
      std::copy(y.begin(), y.end(), out.outputs.row(t).begin());
    }
  });
  out.stats = accumulate_stats(out.decisions, layer.config);
  out.group_loss = group_wise_loss(out.stats, layer.config);
  out.expert_loss = intra_group_loss(out.stats, layer.config.alpha_expert);
  return out;
}

template <typename T>
struct ExpertGradient {
  Matrix<T> up;
  Matrix<T> down;
};

template <typename T>
struct LayerGradients {
  Matrix<T> group_embeddings;
  Matrix<T> expert_embeddings;
  std::vector<ExpertGradient<T>> experts;
  std::vector<ExpertGradient<T>> shared;

  static LayerGradients zeros_like(const MoHGELayer<T>& layer) {
    LayerGradients g;
    g.group_embeddings = Matrix<T>(layer.gating.group_embeddings.rows(),
                                   layer.gating.group_embeddings.cols());
    g.expert_embeddings = Matrix<T>(layer.gating.expert_embeddings.rows(),
                                    layer.gating.expert_embeddings.cols());
    for (const auto& e : layer.experts)
      g.experts.push_back({Matrix<T>(e.up.rows(), e.up.cols()),
                           Matrix<T>(e.down.rows(), e.down.cols())});
    for (const auto& e : layer.shared)
      g.shared.push_back({Matrix<T>(e.up.rows(), e.up.cols()),
                          Matrix<T>(e.down.rows(), e.down.cols())});
    return g;
  }

  template <typename Fn>
  void for_each_array(Fn&& fn) {
    fn(group_embeddings);
    fn(expert_embeddings);
    for (auto& e : experts) {
      fn(e.up);
      fn(e.down);
    }
    for (auto& e : shared) {
      fn(e.up);
      fn(e.down);
    }
  }

  void add(const LayerGradients& o) {
    auto acc = [](Matrix<T>& a, const Matrix<T>& b) {
      for (std::size_t k = 0; k < a.size(); ++k) a.data()[k] += b.data()[k];
    };
    acc(group_embeddings, o.group_embeddings);
    acc(expert_embeddings, o.expert_embeddings);
    for (std::size_t k = 0; k < experts.size(); ++k) {
      acc(experts[k].up, o.experts[k].up);
      acc(experts[k].down, o.experts[k].down);
    }
    for (std::size_t k = 0; k < shared.size(); ++k) {
      acc(shared[k].up, o.shared[k].up);
      acc(shared[k].down, o.shared[k].down);
    }
  }
};

namespace detail {

// Backward through one expert for out += scale * expert(x); returns
// dot(upstream, expert(x)) so the caller can route the gradient to `scale`.
template <typename T>
T expert_backward(std::span<const T> x, const ExpertNetwork<T>& e, Activation act, T scale,
                  std::span<const T> upstream, ExpertGradient<T>& grad, std::span<T> pre,
                  std::span<T> dh) {
  e.hidden(x, pre);
  const std::size_t d = e.model_dim(), w = e.width();
  T r{};
  for (std::size_t k = 0; k < w; ++k) {
    const T a = activate(act, pre[k]);
    const T* drow = e.down.row(k).data();
    T* gdrow = grad.down.row(k).data();
    T back{};
    for (std::size_t j = 0; j < d; ++j) {
      r += a * drow[j] * upstream[j];
      gdrow[j] += scale * a * upstream[j];
      back += drow[j] * upstream[j];
    }
    dh[k] = scale * back * activate_derivative(act, pre[k]);
  }
  for (std::size_t j = 0; j < d; ++j) {
    T* gurow = grad.up.row(j).data();
    for (std::size_t k = 0; k < w; ++k) gurow[k] += x[j] * dh[k];
  }
  return r;
}

}  // namespace detail

// Backward pass of the task path given d(loss)/d(output) per token. Top-K
// masks are constants; gradient reaches the gating through the global
// normalization, the group-score scaling and the intra-group softmax.
template <typename T>
LayerGradients<T> layer_gradients(const Matrix<T>& tokens, const MoHGELayer<T>& layer,
                                  const Matrix<T>& upstream,
                                  std::span<const RoutingDecision<T>> decisions,
                                  std::size_t workers = 1) {
  const auto& c = layer.config;
  require_dim(upstream.rows(), tokens.rows(), "upstream rows");
  require_dim(upstream.cols(), c.model_dim, "upstream cols");
  require_dim(decisions.size(), tokens.rows(), "decisions");
  const std::size_t n = c.experts_per_group, ng = c.num_groups, d = c.model_dim;
  const std::size_t wmax = std::max(c.max_width(), c.base_width);

  LayerGradients<T> total = LayerGradients<T>::zeros_like(layer);
  parallel_reduce_ordered(
      tokens.rows(), workers, [&] { return LayerGradients<T>::zeros_like(layer); },
      [&](LayerGradients<T>& acc, std::size_t b, std::size_t e) {
        std::vector<T> pre(wmax), dh(wmax);
        std::vector<T> r(c.top_experts), d_es_prime(ng * n), d_gs(ng);
        for (std::size_t t = b; t < e; ++t) {
          const auto x = tokens.row(t);
          const auto gy = upstream.row(t);
          const auto& dec = decisions[t];
          bool any = false;
          for (T v : gy)
            if (v != T(0)) any = true;
          if (!any) continue;

          for (std::size_t s = 0; s < layer.shared.size(); ++s) {
            const auto& ex = layer.shared[s];
            detail::expert_backward(x, ex, layer.activation, T(1), gy, acc.shared[s],
                                    std::span<T>(pre.data(), ex.width()),
                                    std::span<T>(dh.data(), ex.width()));
          }
          T rbar{};
          for (std::size_t k = 0; k < dec.selected_experts.size(); ++k) {
            const auto id = dec.selected_experts[k];
            const std::size_t flat = id.group * n + id.index;
            const T es = dec.final_scores[flat];
            const auto& ex = layer.experts[flat];
            r[k] = detail::expert_backward(x, ex, layer.activation, es, gy, acc.experts[flat],
                                           std::span<T>(pre.data(), ex.width()),
                                           std::span<T>(dh.data(), ex.width()));
            rbar += es * r[k];
          }
          // Same summation order as normalize_global.
          std::vector<T> nz;
          for (const auto& id : dec.selected_experts)
            nz.push_back(dec.es_triple[id.group * n + id.index]);
          std::sort(nz.begin(), nz.end(), std::greater<T>());
          T z{};
          for (T v : nz) z += v;

          std::fill(d_es_prime.begin(), d_es_prime.end(), T(0));
          std::fill(d_gs.begin(), d_gs.end(), T(0));
          for (std::size_t k = 0; k < dec.selected_experts.size(); ++k) {
            const auto id = dec.selected_experts[k];
            const std::size_t flat = id.group * n + id.index;
            const T d_triple = (r[k] - rbar) / z;
            d_es_prime[flat] += d_triple * dec.group_scores[id.group];
            d_gs[id.group] += d_triple * dec.es_prime[flat];
          }
          for (std::size_t g : dec.selected_groups) {
            const T* a = dec.es_prime.data() + g * n;
            const T* bvec = d_es_prime.data() + g * n;
            T s{};
            for (std::size_t i = 0; i < n; ++i) s += a[i] * bvec[i];
            for (std::size_t i = 0; i < n; ++i) {
              const T du = a[i] * (bvec[i] - s);
              if (du == T(0)) continue;
              T* row = acc.expert_embeddings.row(g * n + i).data();
              for (std::size_t j = 0; j < d; ++j) row[j] += du * x[j];
            }
            const T gs = dec.group_scores[g];
            const T dz = d_gs[g] * gs * (T(1) - gs);
            T* row = acc.group_embeddings.row(g).data();
            for (std::size_t j = 0; j < d; ++j) row[j] += dz * x[j];
          }
        }
      },
      [&](const LayerGradients<T>& acc) { total.add(acc); });

  bool finite = true;
  total.for_each_array([&](Matrix<T>& m) {
    for (T v : m.data())
      if (!std::isfinite(v)) finite = false;
  });
  if (!finite) throw NumericalError("layer_gradients: non-finite gradient");
  return total;
}

template <typename T>
LayerGradients<T> layer_gradients(const Matrix<T>& tokens, const MoHGELayer<T>& layer,
                                  const Matrix<T>& upstream, std::size_t workers = 1) {
  const auto decisions = route(tokens, layer.gating, layer.config, workers);
  return layer_gradients(tokens, layer, upstream,
                         std::span<const RoutingDecision<T>>(decisions), workers);
}

// Expert parameter accounting. Shared experts are reported separately so
// either "activated" convention can be recovered.
struct ParameterCount {
  std::int64_t routed_total = 0;
  std::int64_t shared_total = 0;
  std::int64_t activated_routed_worst = 0;  // K_e widest experts
  std::int64_t activated_shared = 0;        // all shared experts

  std::int64_t total() const { return routed_total + shared_total; }
  std::int64_t activated_worst() const { return activated_routed_worst + activated_shared; }
};

inline ParameterCount count_parameters(const ModelConfig& c) {
  ParameterCount p;
  std::vector<std::int64_t> per_expert;
  for (std::size_t g = 0; g < c.num_groups; ++g)
    for (std::size_t i = 0; i < c.experts_per_group; ++i) {
      per_expert.push_back(c.expert_params(g));
      p.routed_total += c.expert_params(g);
    }
  p.shared_total = static_cast<std::int64_t>(c.num_shared_experts) * c.shared_expert_params();
  // Widest experts first; they fill whole groups, which top_experts <=
  // top_groups * experts_per_group keeps feasible.
  std::sort(per_expert.begin(), per_expert.end(), std::greater<>());
  for (std::size_t k = 0; k < std::min(c.top_experts, per_expert.size()); ++k)
    p.activated_routed_worst += per_expert[k];
  p.activated_shared = p.shared_total;
  return p;
}

template <typename T>
ParameterCount count_parameters(const MoHGELayer<T>& layer) {
  return count_parameters(layer.config);
}

struct ExpectedActivation {
  double routed = 0.0;  // mean over tokens of selected expert parameters
  double shared = 0.0;
  double total() const { return routed + shared; }
};

template <typename T>
ExpectedActivation expected_activated_parameters(const ModelConfig& c,
                                                 std::span<const RoutingDecision<T>> decisions) {
  ExpectedActivation out;
  out.shared = static_cast<double>(count_parameters(c).activated_shared);
  if (decisions.empty()) return out;
  double acc = 0.0;
  for (const auto& d : decisions)
    for (const auto& id : d.selected_experts) acc += static_cast<double>(c.expert_params(id.group));
  out.routed = acc / static_cast<double>(decisions.size());
  return out;
}

}  // namespace mohge
