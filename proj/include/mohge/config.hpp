// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The mohge Authors.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mohge/error.hpp"

namespace mohge {

// Hyperparameters of one heterogeneous grouped-experts layer.
//
// Groups are indexed from 0 and their widths are stored ascending. Experts
// are addressed as (group, index) with index in [0, experts_per_group).
struct ModelConfig {
  std::size_t model_dim = 0;
  std::size_t num_groups = 0;
  std::size_t experts_per_group = 0;
  std::size_t top_groups = 0;
  std::size_t top_experts = 0;
  std::size_t num_shared_experts = 0;
  std::vector<std::size_t> group_widths;
  std::size_t base_width = 0;
  double alpha_group = 1e-4;
  double alpha_expert = 2.5e-3;
  double epsilon = 1e-9;

  std::size_t total_experts() const noexcept {
    return num_groups * experts_per_group;
  }
  std::size_t max_width() const { return group_widths.back(); }
  std::size_t min_width() const { return group_widths.front(); }

  // Parameters of one expert in group g (up and down projections).
  std::int64_t expert_params(std::size_t g) const {
    return 2 * static_cast<std::int64_t>(model_dim) *
           static_cast<std::int64_t>(group_widths[g]);
  }
  std::int64_t shared_expert_params() const {
    return 2 * static_cast<std::int64_t>(model_dim) *
           static_cast<std::int64_t>(base_width);
  }

  bool operator==(const ModelConfig&) const = default;
};

struct Violation {
  std::string invariant;
  std::string detail;
};

// Widths symmetric around base_width. half_schedule holds the num_groups/2
// offsets in ascending order; the lower half mirrors them below the base.
inline std::vector<std::size_t> build_group_widths(
    std::size_t base_width, std::size_t num_groups,
    const std::vector<std::size_t>& half_schedule) {
  if (base_width == 0) throw ConfigError("base_width must be positive");
  if (num_groups == 1) {
    if (!half_schedule.empty())
      throw ConfigError("a single group takes no offsets");
    return {base_width};
  }
  if (num_groups == 0 || num_groups % 2 != 0)
    throw ConfigError("num_groups must be even or 1");
  const std::size_t half = num_groups / 2;
  if (half_schedule.size() != half)
    throw ConfigError("half_schedule must hold num_groups/2 offsets");
  for (std::size_t k = 0; k < half; ++k) {
    if (half_schedule[k] == 0 && k == 0)
      throw ConfigError("offsets must be positive");
    if (k > 0 && half_schedule[k] <= half_schedule[k - 1])
      throw ConfigError("offsets must be strictly ascending");
    if (half_schedule[k] >= base_width)
      throw ConfigError("offset " + std::to_string(half_schedule[k]) +
                        " would give a non-positive width");
  }
  std::vector<std::size_t> widths(num_groups);
  for (std::size_t i = 0; i < half; ++i)
    widths[i] = base_width - half_schedule[half - 1 - i];
  for (std::size_t i = half; i < num_groups; ++i)
    widths[i] = base_width + half_schedule[i - half];
  return widths;
}

inline std::vector<Violation> validate(const ModelConfig& c) {
  std::vector<Violation> out;
  auto add = [&](std::string inv, std::string detail) {
    out.push_back({std::move(inv), std::move(detail)});
  };
  if (c.model_dim == 0) add("model_dim_positive", "model_dim must be > 0");
  if (c.num_groups == 0) add("num_groups_positive", "num_groups must be > 0");
  if (c.experts_per_group == 0)
    add("experts_per_group_positive", "experts_per_group must be > 0");
  if (c.top_groups == 0) add("top_groups_positive", "top_groups must be > 0");
  if (c.top_experts == 0)
    add("top_experts_positive", "top_experts must be > 0");
  if (c.base_width == 0) add("base_width_positive", "base_width must be > 0");
  if (c.top_groups > c.num_groups)
    add("top_groups_range", "top_groups " + std::to_string(c.top_groups) +
                                " > num_groups " + std::to_string(c.num_groups));
  if (c.top_experts > c.top_groups * c.experts_per_group)
    add("top_experts_capacity",
        "top_experts " + std::to_string(c.top_experts) +
            " > top_groups * experts_per_group = " +
            std::to_string(c.top_groups * c.experts_per_group));
  if (c.group_widths.size() != c.num_groups) {
    add("group_widths_length",
        "expected " + std::to_string(c.num_groups) + " widths, got " +
            std::to_string(c.group_widths.size()));
  } else {
    for (std::size_t i = 0; i < c.group_widths.size(); ++i)
      if (c.group_widths[i] == 0) {
        add("group_widths_positive",
            "width of group " + std::to_string(i) + " is zero");
        break;
      }
    for (std::size_t i = 1; i < c.group_widths.size(); ++i)
      if (c.group_widths[i] <= c.group_widths[i - 1]) {
        add("group_widths_ascending",
            "width of group " + std::to_string(i) + " (" +
                std::to_string(c.group_widths[i]) + ") <= group " +
                std::to_string(i - 1) + " (" +
                std::to_string(c.group_widths[i - 1]) + ")");
        break;
      }
    const std::size_t n = c.group_widths.size();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t sum = c.group_widths[i] + c.group_widths[n - 1 - i];
      if (sum != 2 * c.base_width) {
        add("symmetric_pair",
            "widths[" + std::to_string(i) + "] + widths[" +
                std::to_string(n - 1 - i) + "] = " + std::to_string(sum) +
                " != 2 * base_width = " + std::to_string(2 * c.base_width));
        break;
      }
    }
  }
  if (!(c.alpha_group >= 0.0))
    add("alpha_group_nonnegative", "alpha_group must be >= 0");
  if (!(c.alpha_expert >= 0.0))
    add("alpha_expert_nonnegative", "alpha_expert must be >= 0");
  if (!(c.epsilon > 0.0)) add("epsilon_positive", "epsilon must be > 0");
  return out;
}

inline void require_valid(const ModelConfig& c) {
  const auto v = validate(c);
  if (v.empty()) return;
  std::string msg = "invalid config:";
  for (const auto& e : v) msg += " [" + e.invariant + "] " + e.detail + ";";
  throw ConfigError(msg);
}

enum class Scale { B1, B3, B14 };

inline Scale parse_scale(std::string_view s) {
  if (s == "1B" || s == "1b") return Scale::B1;
  if (s == "3B" || s == "3b") return Scale::B3;
  if (s == "14B" || s == "14b") return Scale::B14;
  throw ConfigError("unknown scale '" + std::string(s) + "' (expected 1B, 3B or 14B)");
}

inline std::string to_string(Scale s) {
  switch (s) {
    case Scale::B1: return "1B";
    case Scale::B3: return "3B";
    case Scale::B14: return "14B";
  }
  return "?";
}

inline ModelConfig preset(Scale scale) {
  ModelConfig c;
  c.model_dim = 1024;
  c.num_groups = 8;
  c.top_groups = 3;
  c.top_experts = 6;
  c.num_shared_experts = 2;
  switch (scale) {
    case Scale::B1:
      c.experts_per_group = 4;
      c.base_width = 576;
      c.group_widths = build_group_widths(576, 8, {64, 192, 256, 320});
      break;
    case Scale::B3:
      c.experts_per_group = 8;
      c.base_width = 832;
      c.group_widths = build_group_widths(832, 8, {64, 192, 320, 448});
      break;
    case Scale::B14:
      c.experts_per_group = 16;
      c.base_width = 1088;
      c.group_widths = build_group_widths(1088, 8, {64, 192, 320, 448});
      break;
  }
  return c;
}

inline ModelConfig preset(std::string_view name) { return preset(parse_scale(name)); }

// Shrinks model_dim and every width by an exact integer factor. Width ratios,
// routing shape and the pair-sum constraint survive unchanged.
inline ModelConfig shrink(const ModelConfig& c, std::size_t factor) {
  if (factor == 0) throw ConfigError("shrink factor must be positive");
  if (factor == 1) return c;
  auto div = [&](std::size_t v, const char* what) {
    if (v % factor != 0)
      throw ConfigError(std::string(what) + " " + std::to_string(v) +
                        " is not divisible by shrink factor " +
                        std::to_string(factor));
    return v / factor;
  };
  ModelConfig out = c;
  out.model_dim = div(c.model_dim, "model_dim");
  out.base_width = div(c.base_width, "base_width");
  for (auto& w : out.group_widths) w = div(w, "group width");
  return out;
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return nlohmann::json{{"model_dim", c.model_dim},
                        {"num_groups", c.num_groups},
                        {"experts_per_group", c.experts_per_group},
                        {"top_groups", c.top_groups},
                        {"top_experts", c.top_experts},
                        {"num_shared_experts", c.num_shared_experts},
                        {"group_widths", c.group_widths},
                        {"base_width", c.base_width},
                        {"alpha_group", c.alpha_group},
                        {"alpha_expert", c.alpha_expert},
                        {"epsilon", c.epsilon}};
}

// Parses a config object. Keys must match field names; total_experts is
// accepted as a consistency check. Structural problems throw ConfigError,
// invariant violations are left to validate().
inline ModelConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::vector<std::string> known = {
      "model_dim",   "num_groups",         "experts_per_group", "top_groups",
      "top_experts", "num_shared_experts", "group_widths",      "base_width",
      "alpha_group", "alpha_expert",       "epsilon",           "total_experts"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ConfigError("unknown config key '" + it.key() + "'");

  ModelConfig c;
  auto get_uint = [&](const char* key, std::size_t& dst, bool required) {
    if (!j.contains(key)) {
      if (required) throw ConfigError(std::string("missing config key '") + key + "'");
      return;
    }
    const auto& v = j.at(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
      throw ConfigError(std::string("config key '") + key +
                        "' must be a non-negative integer");
    dst = v.get<std::size_t>();
  };
  auto get_real = [&](const char* key, double& dst) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_number())
      throw ConfigError(std::string("config key '") + key + "' must be a number");
    dst = j.at(key).get<double>();
  };
  get_uint("model_dim", c.model_dim, true);
  get_uint("num_groups", c.num_groups, true);
  get_uint("experts_per_group", c.experts_per_group, true);
  get_uint("top_groups", c.top_groups, true);
  get_uint("top_experts", c.top_experts, true);
  get_uint("num_shared_experts", c.num_shared_experts, false);
  get_uint("base_width", c.base_width, true);
  if (!j.contains("group_widths") || !j.at("group_widths").is_array())
    throw ConfigError("config key 'group_widths' must be an integer array");
  for (const auto& w : j.at("group_widths")) {
    if (!w.is_number_integer() || w.get<std::int64_t>() < 0)
      throw ConfigError("group_widths entries must be non-negative integers");
    c.group_widths.push_back(w.get<std::size_t>());
  }
  get_real("alpha_group", c.alpha_group);
  get_real("alpha_expert", c.alpha_expert);
  get_real("epsilon", c.epsilon);
  if (j.contains("total_experts")) {
    std::size_t total = 0;
    get_uint("total_experts", total, false);
    if (total != c.total_experts())
      throw ConfigError("total_experts " + std::to_string(total) +
                        " != num_groups * experts_per_group");
  }
  return c;
}

inline ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("malformed config file '" + path + "': " + e.what());
  }
  return config_from_json(j);
}

}  // namespace mohge
