// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The mohge Authors.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mohge/allocation.hpp"
#include "mohge/config.hpp"
#include "mohge/error.hpp"
#include "mohge/layer.hpp"
#include "mohge/losses.hpp"
#include "mohge/rng.hpp"
#include "mohge/routing.hpp"
#include "mohge/tensor.hpp"
#include "mohge/trace.hpp"

namespace mohge {

// ---------------------------------------------------------------------------
// Synthetic token streams

enum class DifficultyScheme { rank, perplexity };

inline DifficultyScheme parse_scheme(const std::string& s) {
  if (s == "rank") return DifficultyScheme::rank;
  if (s == "perplexity") return DifficultyScheme::perplexity;
  throw ConfigError("unknown difficulty scheme '" + s + "' (expected rank or perplexity)");
}

inline std::string to_string(DifficultyScheme s) {
  return s == DifficultyScheme::rank ? "rank" : "perplexity";
}

// Bucket 0 is the easiest.
inline std::vector<std::string> bucket_names(DifficultyScheme s) {
  if (s == DifficultyScheme::rank) return {"Top 1K", "Top 1K-5K", "Top 5K-10K", "Beyond 10K"};
  return {"<=5", "<=10", ">10"};
}

struct WorldOptions {
  std::uint64_t world_seed = 0x4D6F484745ull;
  double centroid_norm = 1.5;
  double spread = 1.0;
  std::size_t target_hidden = 0;  // 0: 4 * model_dim
  double target_gain = 2.5;
  // Output amplitude of the target per bucket, easiest first; empty uses
  // default_amplitudes().
  std::vector<double> amplitudes;
};

inline WorldOptions& default_world_options() {
  static WorldOptions opt;
  return opt;
}

// Fixed generative model shared by every stream drawn from it. Bucket b emits
// tokens centroid_b + spread * (basis_b^T z), z ~ N(0, I_rank_b); the rank
// grows with difficulty, so harder tokens span more directions of the input
// space. The reconstruction target is one fixed random two-layer map scaled by a
// per-bucket amplitude, so harder buckets also carry more target energy.
struct SyntheticWorld {
  std::size_t model_dim = 0;
  DifficultyScheme scheme = DifficultyScheme::rank;
  WorldOptions options;
  std::vector<std::vector<double>> centroids;
  std::vector<Matrix<double>> bases;  // rank_b x model_dim
  std::vector<double> amplitudes;     // per bucket
  Matrix<double> target_in;           // model_dim x hidden
  Matrix<double> target_out;          // hidden x model_dim

  static std::vector<double> rank_fractions(DifficultyScheme s) {
    if (s == DifficultyScheme::rank) return {0.125, 0.25, 0.5, 1.0};
    return {0.125, 0.5, 1.0};
  }

  static std::vector<double> default_amplitudes(DifficultyScheme s) {
    if (s == DifficultyScheme::rank) return {0.25, 0.5, 1.0, 2.0};
    return {0.25, 1.0, 2.0};
  }

  SyntheticWorld(std::size_t dim, DifficultyScheme s, const WorldOptions& opt = {})
      : model_dim(dim), scheme(s), options(opt) {
    if (dim == 0) throw ConfigError("synthetic world: model_dim must be positive");
    Rng rng(opt.world_seed);
    const auto fracs = rank_fractions(s);
    for (double f : fracs) {
      std::vector<double> c(dim);
      double norm = 0.0;
      for (auto& v : c) {
        v = rng.normal();
        norm += v * v;
      }
      norm = std::sqrt(norm);
      for (auto& v : c) v *= opt.centroid_norm / norm;
      centroids.push_back(std::move(c));
      const auto rank = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::llround(f * static_cast<double>(dim))));
      Matrix<double> basis(rank, dim);
      const double scale = 1.0 / std::sqrt(static_cast<double>(rank));
      for (auto& v : basis.data()) v = rng.normal() * scale;
      bases.push_back(std::move(basis));
    }
    amplitudes = opt.amplitudes.empty() ? default_amplitudes(s) : opt.amplitudes;
    if (amplitudes.size() != fracs.size())
      throw ConfigError("synthetic world: expected one amplitude per bucket");
    const std::size_t h = opt.target_hidden ? opt.target_hidden : 4 * dim;
    target_in = Matrix<double>(dim, h);
    target_out = Matrix<double>(h, dim);
    for (auto& v : target_in.data()) v = rng.normal() * opt.target_gain / std::sqrt(double(dim));
    for (auto& v : target_out.data()) v = rng.normal() / std::sqrt(double(h));
  }

  std::size_t num_buckets() const { return centroids.size(); }

  template <typename T>
  void sample(std::size_t bucket, Rng& rng, std::span<T> out) const {
    const auto& basis = bases[bucket];
    std::vector<double> x = centroids[bucket];
    for (std::size_t r = 0; r < basis.rows(); ++r) {
      const double z = rng.normal() * options.spread;
      for (std::size_t j = 0; j < model_dim; ++j) x[j] += z * basis(r, j);
    }
    for (std::size_t j = 0; j < model_dim; ++j) out[j] = static_cast<T>(x[j]);
  }

  template <typename T>
  void target(std::span<const T> x, std::size_t bucket, std::span<T> y) const {
    const std::size_t h = target_in.cols();
    std::vector<double> hid(h, 0.0);
    for (std::size_t j = 0; j < model_dim; ++j)
      for (std::size_t k = 0; k < h; ++k) hid[k] += static_cast<double>(x[j]) * target_in(j, k);
    std::vector<double> acc(model_dim, 0.0);
    for (std::size_t k = 0; k < h; ++k) {
      const double a = std::tanh(hid[k]);
      for (std::size_t j = 0; j < model_dim; ++j) acc[j] += a * target_out(k, j);
    }
    for (std::size_t j = 0; j < model_dim; ++j) y[j] = static_cast<T>(amplitudes[bucket] * acc[j]);
  }
};

template <typename T>
struct TokenStream {
  Matrix<T> tokens;     // one token per row
  std::vector<int> labels;  // difficulty bucket per token
  DifficultyScheme scheme = DifficultyScheme::rank;
  std::uint64_t seed = 0;
  std::shared_ptr<const SyntheticWorld> world;

  std::size_t size() const { return tokens.rows(); }
  std::size_t num_buckets() const { return world ? world->num_buckets() : 0; }

  Matrix<T> targets(std::size_t begin, std::size_t end) const {
    Matrix<T> y(end - begin, tokens.cols());
    for (std::size_t t = begin; t < end; ++t)
      world->target(tokens.row(t), static_cast<std::size_t>(labels[t]), y.row(t - begin));
    return y;
  }
};

// Draws `count` tokens. Bucket labels follow `proportions` (uniform when
// empty); the same seed always yields the same stream.
template <typename T = float>
TokenStream<T> generate_stream(const ModelConfig& config, DifficultyScheme scheme,
                               std::size_t count, std::uint64_t seed,
                               std::vector<double> proportions = {},
                               const WorldOptions& world_options = default_world_options()) {
  if (count == 0) throw ConfigError("generate_stream: token count must be at least 1");
  auto world = std::make_shared<const SyntheticWorld>(config.model_dim, scheme, world_options);
  const std::size_t nb = world->num_buckets();
  if (proportions.empty()) proportions.assign(nb, 1.0 / static_cast<double>(nb));
  if (proportions.size() != nb)
    throw ConfigError("generate_stream: expected " + std::to_string(nb) + " bucket proportions");
  std::vector<double> cdf(nb);
  double total = 0.0;
  for (std::size_t b = 0; b < nb; ++b) {
    if (!(proportions[b] >= 0.0)) throw ConfigError("generate_stream: negative proportion");
    total += proportions[b];
    cdf[b] = total;
  }
  if (!(total > 0.0)) throw ConfigError("generate_stream: proportions sum to zero");

  TokenStream<T> s;
  s.scheme = scheme;
  s.seed = seed;
  s.world = world;
  s.tokens = Matrix<T>(count, config.model_dim);
  s.labels.resize(count);
  Rng rng(seed);
  for (std::size_t t = 0; t < count; ++t) {
    const double u = rng.uniform() * total;
    std::size_t b = 0;
    while (b + 1 < nb && u >= cdf[b]) ++b;
    s.labels[t] = static_cast<int>(b);
    world->sample(b, rng, s.tokens.row(t));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Training

struct LossSwitches {
  bool use_group_loss = true;
  bool use_expert_loss = true;
};

struct TrainOptions {
  std::size_t steps = 2000;
  double lr = 1e-2;
  double final_lr_fraction = 1.0;  // linear decay of lr down to lr * fraction at the last step
  std::size_t batch_size = 128;
  std::size_t log_interval = 100;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

// Settings for trained runs on presets shrunk to desk size. The full-scale
// auxiliary coefficients barely move routing within a few thousand SGD steps
// on a 16-dimensional layer, so desk runs use stronger ones.
struct DeskSetup {
  std::size_t shrink = 64;
  double alpha_group = 1.0;
  double alpha_expert = 30.0;
  double lr = 2e-2;
  double final_lr_fraction = 0.02;
  std::size_t steps = 8000;
  double gating_stddev = 0.02;
  std::size_t train_tokens = 20000;
};

inline ModelConfig desk_config(const ModelConfig& full, const DeskSetup& desk = {}) {
  ModelConfig c = shrink(full, desk.shrink);
  c.alpha_group = desk.alpha_group;
  c.alpha_expert = desk.alpha_expert;
  return c;
}

inline TrainOptions desk_train_options(std::uint64_t seed, const DeskSetup& desk = {}) {
  TrainOptions opt;
  opt.steps = desk.steps;
  opt.lr = desk.lr;
  opt.final_lr_fraction = desk.final_lr_fraction;
  opt.seed = seed;
  return opt;
}

struct MetricsRecord {
  std::size_t step = 0;  // last step of the interval, 1-based
  double task_loss = 0.0;
  double group_loss = 0.0;
  double expert_loss = 0.0;
  std::vector<std::uint64_t> group_traffic;  // group selections in the interval

  bool operator==(const MetricsRecord&) const = default;
};

template <typename T>
struct TrainResult {
  MoHGELayer<T> layer;
  std::vector<MetricsRecord> history;
};

// Plain SGD on 0.5 * mean ||layer(x) - target(x)||^2 plus the enabled
// auxiliary losses. Auxiliary gradients only touch the gating parameters.
template <typename T>
TrainResult<T> train_toy(MoHGELayer<T> layer, const TokenStream<T>& stream,
                         const LossSwitches& switches, const TrainOptions& opt) {
  if (opt.steps < 1) throw ConfigError("train_toy: steps must be at least 1");
  if (opt.batch_size < 1) throw ConfigError("train_toy: batch_size must be at least 1");
  if (stream.size() == 0 || !stream.world) throw ConfigError("train_toy: empty stream");
  const auto& c = layer.config;
  const std::size_t d = c.model_dim;
  ModelConfig aux_config = c;
  if (!switches.use_group_loss) aux_config.alpha_group = 0.0;
  if (!switches.use_expert_loss) aux_config.alpha_expert = 0.0;
  const bool any_aux = switches.use_group_loss || switches.use_expert_loss;

  TrainResult<T> result;
  Rng rng(opt.seed);
  MetricsRecord interval;
  interval.group_traffic.assign(c.num_groups, 0);
  std::size_t interval_steps = 0;
  const std::size_t log_every = std::max<std::size_t>(1, opt.log_interval);
  if (!(opt.lr > 0.0) || !(opt.final_lr_fraction >= 0.0))
    throw ConfigError("train_toy: lr must be positive and final_lr_fraction nonnegative");

  Matrix<T> batch(opt.batch_size, d), target(opt.batch_size, d), upstream(opt.batch_size, d);
  for (std::size_t step = 1; step <= opt.steps; ++step) {
    for (std::size_t b = 0; b < opt.batch_size; ++b) {
      const std::size_t t = rng.below(stream.size());
      std::copy_n(stream.tokens.row(t).begin(), d, batch.row(b).begin());
      stream.world->target(stream.tokens.row(t), static_cast<std::size_t>(stream.labels[t]),
                           target.row(b));
    }
    const auto diverged = [step](const NumericalError& e) {
      return NumericalError("training diverged at step " + std::to_string(step) + ": " + e.what(),
                            step);
    };
    const auto fwd = [&] {
      try {
        return layer_forward(batch, layer, opt.workers);
      } catch (const NumericalError& e) {
        throw diverged(e);
      }
    }();
    double task = 0.0;
    const T inv_b = T(1) / static_cast<T>(opt.batch_size);
    for (std::size_t k = 0; k < batch.size(); ++k) {
      const T diff = fwd.outputs.data()[k] - target.data()[k];
      task += 0.5 * static_cast<double>(diff) * static_cast<double>(diff);
      upstream.data()[k] = diff * inv_b;
    }
    task /= static_cast<double>(opt.batch_size);
    if (!std::isfinite(task) || !std::isfinite(fwd.group_loss) ||
        !std::isfinite(fwd.expert_loss))
      throw NumericalError("training diverged at step " + std::to_string(step), step);

    const std::span<const RoutingDecision<T>> decs(fwd.decisions);
    LayerGradients<T> grads;
    try {
      grads = layer_gradients(batch, layer, upstream, decs, opt.workers);
      if (any_aux) {
        const auto aux = aux_loss_gradients(batch, decs, layer.gating, aux_config, opt.workers);
        for (std::size_t k = 0; k < grads.group_embeddings.size(); ++k)
          grads.group_embeddings.data()[k] += aux.group_embeddings.data()[k];
        for (std::size_t k = 0; k < grads.expert_embeddings.size(); ++k)
          grads.expert_embeddings.data()[k] += aux.expert_embeddings.data()[k];
      }
    } catch (const NumericalError& e) {
      throw diverged(e);
    }
    const double progress =
        opt.steps > 1 ? static_cast<double>(step - 1) / static_cast<double>(opt.steps - 1) : 1.0;
    const T lr = static_cast<T>(opt.lr * (1.0 - progress * (1.0 - opt.final_lr_fraction)));
    auto apply = [&](Matrix<T>& p, const Matrix<T>& g) {
      for (std::size_t k = 0; k < p.size(); ++k) p.data()[k] -= lr * g.data()[k];
    };
    apply(layer.gating.group_embeddings, grads.group_embeddings);
    apply(layer.gating.expert_embeddings, grads.expert_embeddings);
    for (std::size_t k = 0; k < layer.experts.size(); ++k) {
      apply(layer.experts[k].up, grads.experts[k].up);
      apply(layer.experts[k].down, grads.experts[k].down);
    }
    for (std::size_t k = 0; k < layer.shared.size(); ++k) {
      apply(layer.shared[k].up, grads.shared[k].up);
      apply(layer.shared[k].down, grads.shared[k].down);
    }

    interval.task_loss += task;
    interval.group_loss += fwd.group_loss;
    interval.expert_loss += fwd.expert_loss;
    for (const auto& dec : fwd.decisions)
      for (std::size_t g : dec.selected_groups) ++interval.group_traffic[g];
    ++interval_steps;
    if (step % log_every == 0 || step == opt.steps) {
      interval.step = step;
      interval.task_loss /= static_cast<double>(interval_steps);
      interval.group_loss /= static_cast<double>(interval_steps);
      interval.expert_loss /= static_cast<double>(interval_steps);
      result.history.push_back(interval);
      interval = MetricsRecord{};
      interval.group_traffic.assign(c.num_groups, 0);
      interval_steps = 0;
    }
  }
  result.layer = std::move(layer);
  return result;
}

inline nlohmann::json to_json(const MetricsRecord& m) {
  return {{"step", m.step},
          {"task_loss", m.task_loss},
          {"group_loss", m.group_loss},
          {"expert_loss", m.expert_loss},
          {"group_traffic", m.group_traffic}};
}

// One JSON object per logging interval.
inline void write_metrics(std::ostream& os, const std::vector<MetricsRecord>& history,
                          std::uint64_t seed, const std::string& condition) {
  for (const auto& m : history) {
    auto j = to_json(m);
    j["seed"] = seed;
    j["condition"] = condition;
    os << j.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Routing replay and load analysis

// Expert activation counts over a routed token set.
struct RoutingCounts {
  std::size_t num_groups = 0;
  std::size_t experts_per_group = 0;
  std::uint64_t tokens = 0;
  std::vector<std::uint64_t> expert;  // [group * N + index]
  std::vector<std::uint64_t> group;   // group selections

  RoutingCounts() = default;
  explicit RoutingCounts(const ModelConfig& c)
      : num_groups(c.num_groups),
        experts_per_group(c.experts_per_group),
        expert(c.total_experts(), 0),
        group(c.num_groups, 0) {}

  template <typename T>
  void add(const RoutingDecision<T>& d) {
    ++tokens;
    for (std::size_t g : d.selected_groups) ++group[g];
    for (const auto& id : d.selected_experts) ++expert[id.group * experts_per_group + id.index];
  }

  void add(const TraceRecord& r) {
    ++tokens;
    for (std::size_t g : r.groups) {
      if (g >= num_groups) throw ConfigError("trace references an unknown group");
      ++group[g];
    }
    for (const auto& e : r.experts) {
      if (e.group >= num_groups || e.index >= experts_per_group)
        throw ConfigError("trace references an unknown expert");
      ++expert[e.group * experts_per_group + e.index];
    }
  }

  std::uint64_t total_activations() const {
    return std::accumulate(expert.begin(), expert.end(), std::uint64_t{0});
  }
};

// Routes the whole stream in fixed-size chunks and calls fn(token, decision)
// in token order.
template <typename T, typename Fn>
void for_each_routed(const MoHGELayer<T>& layer, const TokenStream<T>& stream,
                     std::size_t workers, Fn&& fn) {
  constexpr std::size_t chunk = 16384;
  for (std::size_t b = 0; b < stream.size(); b += chunk) {
    const std::size_t e = std::min(stream.size(), b + chunk);
    Matrix<T> part(e - b, stream.tokens.cols());
    std::copy(stream.tokens.data().begin() + static_cast<std::ptrdiff_t>(b * part.cols()),
              stream.tokens.data().begin() + static_cast<std::ptrdiff_t>(e * part.cols()),
              part.data().begin());
    const auto decs = route(part, layer.gating, layer.config, workers);
    for (std::size_t t = 0; t < decs.size(); ++t) fn(b + t, decs[t]);
  }
}

template <typename T>
RoutingCounts count_routing(const MoHGELayer<T>& layer, const TokenStream<T>& stream,
                            std::size_t workers = 1) {
  RoutingCounts counts(layer.config);
  for_each_routed(layer, stream, workers,
                  [&](std::size_t, const RoutingDecision<T>& d) { counts.add(d); });
  return counts;
}

// Mean routed expert parameters per token, from activation counts.
inline double expected_routed_parameters(const RoutingCounts& counts, const ModelConfig& c) {
  if (counts.tokens == 0) return 0.0;
  double acc = 0.0;
  for (std::size_t k = 0; k < counts.expert.size(); ++k)
    acc += static_cast<double>(counts.expert[k]) *
           static_cast<double>(c.expert_params(k / c.experts_per_group));
  return acc / static_cast<double>(counts.tokens);
}

struct LoadReport {
  std::size_t num_groups = 0;
  std::size_t num_gpus = 0;
  std::uint64_t token_count = 0;
  std::uint64_t total_activations = 0;
  Matrix<double> fraction;                            // num_groups x num_gpus
  std::vector<std::uint64_t> group_activations;       // per group
  std::vector<double> per_group_std;                  // population std over GPUs
  std::vector<double> per_gpu_param_weighted_load;    // sum of activated expert params
  std::vector<std::int64_t> per_gpu_params;           // resident expert params

  double mean_std() const {
    double acc = 0.0;
    for (double s : per_group_std) acc += s;
    return per_group_std.empty() ? 0.0 : acc / static_cast<double>(per_group_std.size());
  }

  bool operator==(const LoadReport&) const = default;
};

inline double population_std(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return std::sqrt(var / static_cast<double>(v.size()));
}

inline LoadReport build_load_report(const RoutingCounts& counts, const PlacementPlan& plan,
                                    const ModelConfig& c) {
  check_plan(plan, c);
  if (counts.num_groups != c.num_groups || counts.experts_per_group != c.experts_per_group)
    throw ConfigError("routing counts do not match config shape");
  LoadReport r;
  r.num_groups = c.num_groups;
  r.num_gpus = plan.num_gpus;
  r.token_count = counts.tokens;
  r.total_activations = counts.total_activations();
  r.fraction = Matrix<double>(c.num_groups, plan.num_gpus);
  r.group_activations.assign(c.num_groups, 0);
  r.per_group_std.assign(c.num_groups, 0.0);
  r.per_gpu_param_weighted_load.assign(plan.num_gpus, 0.0);
  r.per_gpu_params = per_gpu_params(plan, c);
  std::vector<std::uint64_t> cell(plan.num_gpus);
  for (std::size_t g = 0; g < c.num_groups; ++g) {
    std::fill(cell.begin(), cell.end(), 0);
    for (std::size_t i = 0; i < c.experts_per_group; ++i) {
      const std::uint64_t k = counts.expert[g * c.experts_per_group + i];
      cell[plan.gpu_of(g, i)] += k;
      r.group_activations[g] += k;
    }
    for (std::size_t p = 0; p < plan.num_gpus; ++p) {
      r.per_gpu_param_weighted_load[p] +=
          static_cast<double>(cell[p]) * static_cast<double>(c.expert_params(g));
      r.fraction(g, p) = r.group_activations[g]
                             ? static_cast<double>(cell[p]) /
                                   static_cast<double>(r.group_activations[g])
                             : 0.0;
    }
    r.per_group_std[g] = population_std(r.fraction.row(g));
  }
  return r;
}

template <typename T>
LoadReport run_load_sim(const MoHGELayer<T>& layer, const TokenStream<T>& stream,
                        const PlacementPlan& plan, std::size_t workers = 1) {
  check_plan(plan, layer.config);
  return build_load_report(count_routing(layer, stream, workers), plan, layer.config);
}

// Replays a serialized trace into a load report.
inline LoadReport replay_load_report(std::istream& trace, const PlacementPlan& plan,
                                     const ModelConfig& c) {
  RoutingCounts counts(c);
  const auto h = read_trace(trace, [&](const TraceRecord& r) { counts.add(r); });
  if (h.num_groups != c.num_groups || h.experts_per_group != c.experts_per_group)
    throw ConfigError("trace shape does not match config");
  return build_load_report(counts, plan, c);
}

inline void write_load_report(std::ostream& os, const LoadReport& r, const ModelConfig& c,
                              const PlacementPlan& plan, std::uint64_t seed) {
  os << "# mohge load report; std = population std across GPUs; plan=" << to_string(plan.mode)
     << " gpus=" << r.num_gpus << " tokens=" << r.token_count
     << " activations=" << r.total_activations << " seed=" << seed << "\n";
  os << "# per-GPU expert params:";
  for (auto v : r.per_gpu_params) os << ' ' << v;
  os << "\n# param spread=" << param_spread(r.per_gpu_params);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", param_spread_ratio(r.per_gpu_params));
  os << " ratio=" << buf << "\n";
  os << "# param-weighted load:";
  for (double v : r.per_gpu_param_weighted_load) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    os << ' ' << buf;
  }
  os << "\n";
  os << "group";
  for (std::size_t p = 0; p < r.num_gpus; ++p) os << "\tGPU_" << (p + 1);
  os << "\tStd\n";
  for (std::size_t g = 0; g < r.num_groups; ++g) {
    os << "Group " << (g + 1);
    for (std::size_t p = 0; p < r.num_gpus; ++p) {
      std::snprintf(buf, sizeof buf, "%.6f", r.fraction(g, p));
      os << '\t' << buf;
    }
    std::snprintf(buf, sizeof buf, "%.6g", r.per_group_std[g]);
    os << '\t' << buf << '\n';
  }
  (void)c;
}

// Mean over groups of the population std of within-group expert shares.
inline double expert_share_dispersion(const RoutingCounts& counts) {
  double acc = 0.0;
  std::size_t used = 0;
  std::vector<double> share(counts.experts_per_group);
  for (std::size_t g = 0; g < counts.num_groups; ++g) {
    std::uint64_t tot = 0;
    for (std::size_t i = 0; i < counts.experts_per_group; ++i)
      tot += counts.expert[g * counts.experts_per_group + i];
    if (tot == 0) continue;
    for (std::size_t i = 0; i < counts.experts_per_group; ++i)
      share[i] = static_cast<double>(counts.expert[g * counts.experts_per_group + i]) /
                 static_cast<double>(tot);
    acc += population_std(share);
    ++used;
  }
  return used ? acc / static_cast<double>(used) : 0.0;
}

// ---------------------------------------------------------------------------
// Group traffic and difficulty analyses

struct GroupTrafficHistogram {
  std::string condition;
  std::vector<std::uint64_t> tokens_routed_per_group;

  std::uint64_t total() const {
    return std::accumulate(tokens_routed_per_group.begin(), tokens_routed_per_group.end(),
                           std::uint64_t{0});
  }
  std::vector<double> shares() const {
    std::vector<double> s(tokens_routed_per_group.size());
    const double tot = static_cast<double>(total());
    for (std::size_t g = 0; g < s.size(); ++g)
      s[g] = static_cast<double>(tokens_routed_per_group[g]) / tot;
    return s;
  }
};

template <typename T>
GroupTrafficHistogram group_traffic(const MoHGELayer<T>& layer, const TokenStream<T>& stream,
                                    std::string condition, std::size_t workers = 1) {
  return {std::move(condition), count_routing(layer, stream, workers).group};
}

// sum_i (W_i / W_max) * share_i over group-selection shares.
inline double width_weighted_traffic(const GroupTrafficHistogram& h, const ModelConfig& c) {
  const auto s = h.shares();
  double acc = 0.0;
  for (std::size_t g = 0; g < s.size(); ++g)
    acc += static_cast<double>(c.group_widths[g]) / static_cast<double>(c.max_width()) * s[g];
  return acc;
}

inline void write_histograms(std::ostream& os, const std::vector<GroupTrafficHistogram>& hs,
                             const ModelConfig& c, std::uint64_t seed) {
  os << "# tokens routed per group; seed=" << seed << "\n";
  os << "group\twidth";
  for (const auto& h : hs) os << '\t' << h.condition;
  os << '\n';
  for (std::size_t g = 0; g < c.num_groups; ++g) {
    os << "Group " << (g + 1) << '\t' << c.group_widths[g];
    for (const auto& h : hs) os << '\t' << h.tokens_routed_per_group[g];
    os << '\n';
  }
}

struct DifficultyTable {
  std::vector<std::string> bucket_names;
  Matrix<double> ratios;                       // buckets x groups, rows sum to 1
  std::vector<std::vector<std::uint64_t>> counts;
  std::vector<bool> empty;                     // bucket had no tokens
  std::vector<double> mean_selected_width;     // per bucket, over expert selections
};

template <typename T>
DifficultyTable difficulty_analysis(const MoHGELayer<T>& layer, const TokenStream<T>& stream,
                                    std::size_t workers = 1) {
  if (stream.labels.size() != stream.size())
    throw ConfigError("difficulty_analysis: stream carries no bucket labels");
  const auto& c = layer.config;
  const std::size_t nb = stream.num_buckets();
  DifficultyTable tab;
  tab.bucket_names = bucket_names(stream.scheme);
  tab.counts.assign(nb, std::vector<std::uint64_t>(c.num_groups, 0));
  std::vector<double> width_sum(nb, 0.0);
  for_each_routed(layer, stream, workers, [&](std::size_t t, const RoutingDecision<T>& d) {
    const auto b = static_cast<std::size_t>(stream.labels[t]);
    for (const auto& id : d.selected_experts) {
      ++tab.counts[b][id.group];
      width_sum[b] += static_cast<double>(c.group_widths[id.group]);
    }
  });
  tab.ratios = Matrix<double>(nb, c.num_groups);
  tab.empty.assign(nb, false);
  tab.mean_selected_width.assign(nb, 0.0);
  for (std::size_t b = 0; b < nb; ++b) {
    const auto tot = std::accumulate(tab.counts[b].begin(), tab.counts[b].end(), std::uint64_t{0});
    if (tot == 0) {
      tab.empty[b] = true;
      continue;
    }
    for (std::size_t g = 0; g < c.num_groups; ++g)
      tab.ratios(b, g) = static_cast<double>(tab.counts[b][g]) / static_cast<double>(tot);
    tab.mean_selected_width[b] = width_sum[b] / static_cast<double>(tot);
  }
  return tab;
}

inline void write_difficulty_table(std::ostream& os, const DifficultyTable& tab,
                                   DifficultyScheme scheme, std::uint64_t seed) {
  os << "# share of expert selections per group; scheme=" << to_string(scheme)
     << " seed=" << seed << "\n";
  os << (scheme == DifficultyScheme::rank ? "Token Ranks" : "Perplexity");
  for (std::size_t g = 0; g < tab.ratios.cols(); ++g) os << "\tGroup " << (g + 1);
  os << "\tMean Width\n";
  char buf[64];
  for (std::size_t b = 0; b < tab.ratios.rows(); ++b) {
    os << tab.bucket_names[b];
    if (tab.empty[b]) {
      os << "\tEMPTY\n";
      continue;
    }
    for (std::size_t g = 0; g < tab.ratios.cols(); ++g) {
      std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * tab.ratios(b, g));
      os << '\t' << buf;
    }
    std::snprintf(buf, sizeof buf, "%.4f", tab.mean_selected_width[b]);
    os << '\t' << buf << '\n';
  }
}

// Spearman rank correlation with average ranks for ties.
inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw DimensionError("spearman: bad sizes");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t k = 0; k < idx.size();) {
      std::size_t m = k;
      while (m + 1 < idx.size() && v[idx[m + 1]] == v[idx[k]]) ++m;
      const double avg = 0.5 * static_cast<double>(k + m) + 1.0;
      for (std::size_t q = k; q <= m; ++q) r[idx[q]] = avg;
      k = m + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t k = 0; k < rx.size(); ++k) {
    mx += rx[k];
    my += ry[k];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t k = 0; k < rx.size(); ++k) {
    sxy += (rx[k] - mx) * (ry[k] - my);
    sxx += (rx[k] - mx) * (rx[k] - mx);
    syy += (ry[k] - my) * (ry[k] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace mohge
