// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The mohge Authors.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mohge/config.hpp"
#include "mohge/error.hpp"
#include "mohge/routing.hpp"

namespace mohge {

enum class PlanMode { strict, relaxed, naive };

inline PlanMode parse_plan_mode(const std::string& s) {
  if (s == "strict") return PlanMode::strict;
  if (s == "relaxed") return PlanMode::relaxed;
  if (s == "naive") return PlanMode::naive;
  throw ConfigError("unknown plan mode '" + s + "' (expected strict, relaxed or naive)");
}

inline std::string to_string(PlanMode m) {
  switch (m) {
    case PlanMode::strict: return "strict";
    case PlanMode::relaxed: return "relaxed";
    case PlanMode::naive: return "naive";
  }
  return "?";
}

// Expert -> GPU assignment. An all-size set is the column of experts sharing
// one index across every group.
struct PlacementPlan {
  std::size_t num_gpus = 0;
  std::size_t num_groups = 0;
  std::size_t experts_per_group = 0;
  PlanMode mode = PlanMode::strict;
  std::vector<std::size_t> assignment;  // [group * N + index] -> gpu

  std::size_t gpu_of(ExpertId id) const {
    return assignment[id.group * experts_per_group + id.index];
  }
  std::size_t gpu_of(std::size_t group, std::size_t index) const {
    return assignment[group * experts_per_group + index];
  }

  // Number of all-size sets hosted by each GPU (meaningful for strict and
  // relaxed plans).
  std::vector<std::size_t> sets_per_gpu() const {
    std::vector<std::size_t> out(num_gpus, 0);
    for (std::size_t i = 0; i < experts_per_group; ++i) ++out[gpu_of(0, i)];
    return out;
  }

  // True iff no all-size set is split across GPUs.
  bool keeps_sets_whole() const {
    for (std::size_t i = 0; i < experts_per_group; ++i)
      for (std::size_t g = 1; g < num_groups; ++g)
        if (gpu_of(g, i) != gpu_of(0, i)) return false;
    return true;
  }

  bool operator==(const PlacementPlan&) const = default;
};

inline void check_gpu_count(const ModelConfig& c, std::size_t num_gpus) {
  if (num_gpus < 1) throw ConfigError("num_gpus must be at least 1");
  if (num_gpus > c.experts_per_group)
    throw ConfigError("num_gpus " + std::to_string(num_gpus) + " exceeds experts_per_group " +
                      std::to_string(c.experts_per_group));
}

// All-size group-decoupling placement: expert (g, i) goes to GPU i mod D.
// Strict mode requires D | N; relaxed mode accepts uneven set counts.
inline PlacementPlan allocate(const ModelConfig& c, std::size_t num_gpus,
                              PlanMode mode = PlanMode::strict) {
  check_gpu_count(c, num_gpus);
  if (mode == PlanMode::naive) throw ConfigError("allocate: use naive_group_allocation");
  if (mode == PlanMode::strict && c.experts_per_group % num_gpus != 0)
    throw ConfigError("strict allocation needs num_gpus to divide experts_per_group (" +
                      std::to_string(num_gpus) + " does not divide " +
                      std::to_string(c.experts_per_group) + ")");
  PlacementPlan p{num_gpus, c.num_groups, c.experts_per_group, mode, {}};
  p.assignment.resize(c.total_experts());
  for (std::size_t g = 0; g < c.num_groups; ++g)
    for (std::size_t i = 0; i < c.experts_per_group; ++i)
      p.assignment[g * c.experts_per_group + i] = i % num_gpus;
  return p;
}

// Strawman placement: experts laid out group-major and cut into D contiguous
// blocks, so whole groups land together (GPU j hosts group j when D = N_g).
inline PlacementPlan naive_group_allocation(const ModelConfig& c, std::size_t num_gpus) {
  check_gpu_count(c, num_gpus);
  PlacementPlan p{num_gpus, c.num_groups, c.experts_per_group, PlanMode::naive, {}};
  const std::size_t total = c.total_experts();
  p.assignment.resize(total);
  for (std::size_t k = 0; k < total; ++k) p.assignment[k] = k * num_gpus / total;
  return p;
}

inline PlacementPlan make_plan(const ModelConfig& c, std::size_t num_gpus, PlanMode mode) {
  return mode == PlanMode::naive ? naive_group_allocation(c, num_gpus)
                                 : allocate(c, num_gpus, mode);
}

inline void check_plan(const PlacementPlan& p, const ModelConfig& c) {
  if (p.num_groups != c.num_groups || p.experts_per_group != c.experts_per_group ||
      p.assignment.size() != c.total_experts())
    throw ConfigError("placement plan does not match config shape");
  for (std::size_t gpu : p.assignment)
    if (gpu >= p.num_gpus) throw ConfigError("placement plan references an unknown GPU");
}

inline std::vector<std::int64_t> per_gpu_params(const PlacementPlan& p, const ModelConfig& c) {
  check_plan(p, c);
  std::vector<std::int64_t> out(p.num_gpus, 0);
  for (std::size_t g = 0; g < c.num_groups; ++g)
    for (std::size_t i = 0; i < c.experts_per_group; ++i)
      out[p.gpu_of(g, i)] += c.expert_params(g);
  return out;
}

inline std::int64_t param_spread(const std::vector<std::int64_t>& per_gpu) {
  const auto [lo, hi] = std::minmax_element(per_gpu.begin(), per_gpu.end());
  return *hi - *lo;
}

inline double param_spread_ratio(const std::vector<std::int64_t>& per_gpu) {
  const auto [lo, hi] = std::minmax_element(per_gpu.begin(), per_gpu.end());
  return static_cast<double>(*hi) / static_cast<double>(*lo);
}

// Tab-separated plan table, one row per expert. Lines starting with '#' are
// metadata.
inline void write_plan(std::ostream& os, const PlacementPlan& p, const ModelConfig& c) {
  check_plan(p, c);
  os << "# mohge-plan v1 mode=" << to_string(p.mode) << " gpus=" << p.num_gpus
     << " groups=" << p.num_groups << " experts_per_group=" << p.experts_per_group << "\n";
  os << "group\tindex\tgpu\twidth\tparams\n";
  for (std::size_t g = 0; g < c.num_groups; ++g)
    for (std::size_t i = 0; i < c.experts_per_group; ++i)
      os << g << '\t' << i << '\t' << p.gpu_of(g, i) << '\t' << c.group_widths[g] << '\t'
         << c.expert_params(g) << '\n';
}

inline PlacementPlan read_plan(std::istream& is) {
  PlacementPlan p;
  std::string line;
  bool have_meta = false, have_columns = false;
  std::vector<bool> seen;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream ss(line.substr(1));
      std::string tok;
      ss >> tok >> tok;
      while (ss >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
        if (key == "mode") p.mode = parse_plan_mode(val);
        else if (key == "gpus") p.num_gpus = std::stoul(val);
        else if (key == "groups") p.num_groups = std::stoul(val);
        else if (key == "experts_per_group") p.experts_per_group = std::stoul(val);
      }
      have_meta = true;
      p.assignment.assign(p.num_groups * p.experts_per_group, 0);
      seen.assign(p.assignment.size(), false);
      continue;
    }
    if (!have_columns) {
      if (line.rfind("group\t", 0) != 0) throw ConfigError("plan table: missing column header");
      have_columns = true;
      continue;
    }
    if (!have_meta) throw ConfigError("plan table: missing metadata line");
    std::istringstream ss(line);
    std::size_t g, i, gpu;
    if (!(ss >> g >> i >> gpu)) throw ConfigError("plan table: malformed row '" + line + "'");
    if (g >= p.num_groups || i >= p.experts_per_group || gpu >= p.num_gpus)
      throw ConfigError("plan table: row out of range '" + line + "'");
    const std::size_t k = g * p.experts_per_group + i;
    if (seen[k]) throw ConfigError("plan table: expert assigned twice");
    seen[k] = true;
    p.assignment[k] = gpu;
  }
  if (!have_meta) throw ConfigError("plan table: missing metadata line");
  if (std::find(seen.begin(), seen.end(), false) != seen.end())
    throw ConfigError("plan table: some experts are unassigned");
  return p;
}

}  // namespace mohge
