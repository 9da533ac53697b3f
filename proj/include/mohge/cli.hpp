// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The mohge Authors.

#pragma once

#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mohge/allocation.hpp"
#include "mohge/config.hpp"
#include "mohge/error.hpp"
#include "mohge/layer.hpp"
#include "mohge/rng.hpp"
#include "mohge/simulator.hpp"
#include "mohge/trace.hpp"
#include "mohge/weights_io.hpp"

// Command-line driver: validate / train / simulate / report / rerun.
//
// Every run writes manifest.json into its output directory. `rerun` reads one
// back and repeats the run, optionally into a different directory.

namespace mohge::cli {

enum ExitCode : int { kOk = 0, kValidation = 1, kIo = 2, kNumerical = 3 };

struct RunOptions {
  std::string command;
  std::string config_path;
  std::string preset;
  std::size_t shrink = 0;  // 0: desk size for presets on train/simulate/report
  std::uint64_t seed = 0;
  std::size_t tokens = 0;       // 0: command default
  std::size_t eval_tokens = 40000;
  std::optional<std::size_t> steps;  // unset: desk default for presets, else 2000
  double lr = 0.0;              // 0: desk default for presets, else 1e-2
  double final_lr_fraction = -1.0;
  std::size_t batch_size = 128;
  std::size_t log_interval = 100;
  std::size_t gpus = 0;  // 0: experts_per_group
  std::string plan = "strict";
  std::string plan_file;
  std::string scheme = "rank";
  std::string losses = "both";
  bool ablate_losses = false;
  std::optional<double> alpha_group;
  std::optional<double> alpha_expert;
  double gating_stddev = -1.0;
  std::size_t workers = 1;
  std::string out;
  std::string weights;
  std::string trace;
  bool write_trace = false;
};

inline nlohmann::json to_json(const RunOptions& o) {
  nlohmann::json j = {{"command", o.command},
                      {"config_path", o.config_path},
                      {"preset", o.preset},
                      {"shrink", o.shrink},
                      {"seed", o.seed},
                      {"tokens", o.tokens},
                      {"eval_tokens", o.eval_tokens},
                      {"lr", o.lr},
                      {"final_lr_fraction", o.final_lr_fraction},
                      {"batch_size", o.batch_size},
                      {"log_interval", o.log_interval},
                      {"gpus", o.gpus},
                      {"plan", o.plan},
                      {"plan_file", o.plan_file},
                      {"scheme", o.scheme},
                      {"losses", o.losses},
                      {"ablate_losses", o.ablate_losses},
                      {"gating_stddev", o.gating_stddev},
                      {"workers", o.workers},
                      {"out", o.out},
                      {"weights", o.weights},
                      {"trace", o.trace},
                      {"write_trace", o.write_trace}};
  j["steps"] = o.steps ? nlohmann::json(*o.steps) : nlohmann::json(nullptr);
  j["alpha_group"] = o.alpha_group ? nlohmann::json(*o.alpha_group) : nlohmann::json(nullptr);
  j["alpha_expert"] = o.alpha_expert ? nlohmann::json(*o.alpha_expert) : nlohmann::json(nullptr);
  return j;
}

inline RunOptions options_from_json(const nlohmann::json& j) {
  RunOptions o;
  try {
    o.command = j.at("command").get<std::string>();
    o.config_path = j.value("config_path", "");
    o.preset = j.value("preset", "");
    o.shrink = j.value("shrink", std::size_t{0});
    o.seed = j.value("seed", std::uint64_t{0});
    o.tokens = j.value("tokens", std::size_t{0});
    o.eval_tokens = j.value("eval_tokens", std::size_t{40000});
    o.lr = j.value("lr", 0.0);
    o.final_lr_fraction = j.value("final_lr_fraction", -1.0);
    o.batch_size = j.value("batch_size", std::size_t{128});
    o.log_interval = j.value("log_interval", std::size_t{100});
    o.gpus = j.value("gpus", std::size_t{0});
    o.plan = j.value("plan", "strict");
    o.plan_file = j.value("plan_file", "");
    o.scheme = j.value("scheme", "rank");
    o.losses = j.value("losses", "both");
    o.ablate_losses = j.value("ablate_losses", false);
    o.gating_stddev = j.value("gating_stddev", -1.0);
    o.workers = j.value("workers", std::size_t{1});
    o.out = j.value("out", "");
    o.weights = j.value("weights", "");
    o.trace = j.value("trace", "");
    o.write_trace = j.value("write_trace", false);
    if (j.contains("steps") && !j.at("steps").is_null())
      o.steps = j.at("steps").get<std::size_t>();
    if (j.contains("alpha_group") && !j.at("alpha_group").is_null())
      o.alpha_group = j.at("alpha_group").get<double>();
    if (j.contains("alpha_expert") && !j.at("alpha_expert").is_null())
      o.alpha_expert = j.at("alpha_expert").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed manifest: ") + e.what());
  }
  return o;
}

namespace detail {

inline bool uses_desk(const RunOptions& o) {
  return o.config_path.empty() && o.command != "validate" && o.shrink == 0;
}

// Config resolution: --config wins over --preset; presets used for runs are
// shrunk to desk size with desk coefficients unless --shrink is given.
inline ModelConfig resolve_config(const RunOptions& o) {
  ModelConfig c;
  if (!o.config_path.empty()) {
    c = load_config(o.config_path);
    if (o.shrink > 1) c = shrink(c, o.shrink);
  } else {
    if (o.preset.empty()) throw ConfigError("one of --config or --preset is required");
    c = preset(o.preset);
    if (uses_desk(o)) c = desk_config(c);
    else if (o.shrink > 1) c = shrink(c, o.shrink);
  }
  if (o.alpha_group) c.alpha_group = *o.alpha_group;
  if (o.alpha_expert) c.alpha_expert = *o.alpha_expert;
  return c;
}

inline TrainOptions resolve_train_options(const RunOptions& o, std::uint64_t seed) {
  const DeskSetup desk;
  const bool d = uses_desk(o);
  TrainOptions t;
  t.steps = o.steps ? *o.steps : (d ? desk.steps : t.steps);
  t.lr = o.lr > 0 ? o.lr : (d ? desk.lr : t.lr);
  t.final_lr_fraction =
      o.final_lr_fraction >= 0 ? o.final_lr_fraction : (d ? desk.final_lr_fraction : 1.0);
  t.batch_size = o.batch_size;
  t.log_interval = o.log_interval;
  t.seed = seed;
  t.workers = o.workers;
  return t;
}

// Independent seeds for each randomized stage of a run.
struct Seeds {
  std::uint64_t train_stream, eval_stream, init, train;
  explicit Seeds(std::uint64_t s)
      : train_stream(Rng::splitmix(s ^ 0x01)),
        eval_stream(Rng::splitmix(s ^ 0x02)),
        init(Rng::splitmix(s ^ 0x03)),
        train(Rng::splitmix(s ^ 0x04)) {}
};

inline std::filesystem::path prepare_out(const RunOptions& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  std::error_code ec;
  std::filesystem::create_directories(o.out, ec);
  if (ec || !std::filesystem::is_directory(o.out))
    throw IoError("cannot create output directory '" + o.out + "'");
  return std::filesystem::path(o.out);
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write '" + p.string() + "'");
  return f;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  auto f = open_out(p);
  f << text;
  if (!f) throw IoError("failed writing '" + p.string() + "'");
}

inline PlacementPlan resolve_plan(const RunOptions& o, const ModelConfig& c) {
  if (!o.plan_file.empty()) {
    std::ifstream in(o.plan_file);
    if (!in) throw IoError("cannot open plan file '" + o.plan_file + "'");
    auto p = read_plan(in);
    check_plan(p, c);
    return p;
  }
  return make_plan(c, o.gpus ? o.gpus : c.experts_per_group, parse_plan_mode(o.plan));
}

struct Condition {
  std::string name;
  LossSwitches switches;
};

inline std::vector<Condition> conditions(const RunOptions& o) {
  LossSwitches base;
  if (o.losses == "both") base = {true, true};
  else if (o.losses == "group") base = {true, false};
  else if (o.losses == "expert") base = {false, true};
  else if (o.losses == "none") base = {false, false};
  else throw ConfigError("unknown --losses '" + o.losses + "' (expected both, group, expert or none)");
  if (!o.ablate_losses) return {{"trained", base}};
  if (!base.use_group_loss)
    throw ConfigError("--ablate-losses needs the group loss enabled in --losses");
  return {{"with_group_loss", base}, {"without_group_loss", {false, base.use_expert_loss}}};
}

inline nlohmann::json manifest(const RunOptions& o, const ModelConfig& c) {
  nlohmann::json m = {{"tool", "mohge"},
                      {"command", o.command},
                      {"config_source", o.config_path.empty() ? "preset:" + o.preset
                                                              : o.config_path},
                      {"config", to_json(c)},
                      {"seed", o.seed},
                      {"out", o.out},
                      {"options", to_json(o)}};
  return m;
}

inline void write_manifest(const std::filesystem::path& dir, nlohmann::json m) {
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

}  // namespace detail

inline int cmd_validate(const RunOptions& o, std::ostream& out, std::ostream& err) {
  const ModelConfig c = detail::resolve_config(o);
  const auto v = validate(c);
  if (v.empty()) {
    out << "valid: " << c.num_groups << " groups x " << c.experts_per_group
        << " experts, widths";
    for (auto w : c.group_widths) out << ' ' << w;
    out << ", base " << c.base_width << "\n";
    return kOk;
  }
  for (const auto& x : v) err << "violation " << x.invariant << ": " << x.detail << "\n";
  return kValidation;
}

inline int cmd_train(const RunOptions& o, std::ostream& out) {
  const ModelConfig c = detail::resolve_config(o);
  require_valid(c);
  const auto conds = detail::conditions(o);
  const detail::Seeds seeds(o.seed);
  const auto train_opt = detail::resolve_train_options(o, seeds.train);
  const auto dir = detail::prepare_out(o);
  const auto scheme = parse_scheme(o.scheme);
  const std::size_t tokens = o.tokens ? o.tokens : DeskSetup{}.train_tokens;
  const auto train_stream = generate_stream<float>(c, scheme, tokens, seeds.train_stream);
  const auto eval_stream = generate_stream<float>(c, scheme, o.eval_tokens, seeds.eval_stream);
  Rng init_rng(seeds.init);
  LayerInit init;
  init.gating_stddev =
      o.gating_stddev >= 0 ? o.gating_stddev : (detail::uses_desk(o) ? DeskSetup{}.gating_stddev : -1.0);
  const auto layer0 = MoHGELayer<float>::random(c, init_rng, init);

  auto m = detail::manifest(o, c);
  m["steps"] = train_opt.steps;
  m["lr"] = train_opt.lr;
  m["final_lr_fraction"] = train_opt.final_lr_fraction;
  m["tokens"] = tokens;
  m["eval_tokens"] = o.eval_tokens;
  m["conditions"] = nlohmann::json::array();
  for (const auto& cond : conds)
    m["conditions"].push_back({{"name", cond.name},
                               {"use_group_loss", cond.switches.use_group_loss},
                               {"use_expert_loss", cond.switches.use_expert_loss}});
  detail::write_manifest(dir, m);

  std::ostringstream metrics;
  std::vector<GroupTrafficHistogram> hists;
  for (const auto& cond : conds) {
    const auto res = train_toy(layer0, train_stream, cond.switches, train_opt);
    write_metrics(metrics, res.history, o.seed, cond.name);
    const std::string wname = conds.size() == 1 ? "weights.bin" : "weights." + cond.name + ".bin";
    save_weights(dir / wname, res.layer);
    const auto counts = count_routing(res.layer, eval_stream, o.workers);
    hists.push_back({cond.name, counts.group});
    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "%s: task_loss=%.6f width_weighted_traffic=%.6f routed_params_per_token=%.1f\n",
                  cond.name.c_str(), res.history.back().task_loss,
                  width_weighted_traffic(hists.back(), c), expected_routed_parameters(counts, c));
    out << buf;
  }
  detail::write_text(dir / "metrics.jsonl", metrics.str());
  std::ostringstream hs;
  write_histograms(hs, hists, c, o.seed);
  detail::write_text(dir / "histograms.tsv", hs.str());
  return kOk;
}

inline int cmd_simulate(const RunOptions& o, std::ostream& out) {
  MoHGELayer<float> layer;
  const detail::Seeds seeds(o.seed);
  if (!o.weights.empty()) {
    layer = load_weights<float>(o.weights);
  } else {
    const ModelConfig c = detail::resolve_config(o);
    Rng init_rng(seeds.init);
    LayerInit init;
    init.gating_stddev = o.gating_stddev;
    layer = MoHGELayer<float>::random(c, init_rng, init);
  }
  const ModelConfig& c = layer.config;
  const auto plan = detail::resolve_plan(o, c);
  const auto scheme = parse_scheme(o.scheme);
  const std::size_t tokens = o.tokens ? o.tokens : 100000;
  const auto dir = detail::prepare_out(o);
  auto m = detail::manifest(o, c);
  m["config_source"] = o.weights.empty() ? m["config_source"] : nlohmann::json("weights:" + o.weights);
  m["tokens"] = tokens;
  m["plan"] = to_string(plan.mode);
  m["gpus"] = plan.num_gpus;
  detail::write_manifest(dir, m);

  const auto stream = generate_stream<float>(c, scheme, tokens, seeds.eval_stream);
  RoutingCounts counts(c);
  std::ofstream trace;
  if (o.write_trace) {
    trace = detail::open_out(dir / "trace.tsv");
    write_trace_header(trace, c, o.seed);
  }
  for_each_routed(layer, stream, o.workers, [&](std::size_t t, const RoutingDecision<float>& d) {
    counts.add(d);
    if (o.write_trace)
      write_trace_record(trace, to_trace_record(t, stream.labels[t], d, c.experts_per_group));
  });
  if (o.write_trace && !trace) throw IoError("failed writing trace");

  const auto report = build_load_report(counts, plan, c);
  std::ostringstream rs, ps, ds;
  write_load_report(rs, report, c, plan, o.seed);
  detail::write_text(dir / "load_report.tsv", rs.str());
  write_plan(ps, plan, c);
  detail::write_text(dir / "plan.tsv", ps.str());
  const auto tab = difficulty_analysis(layer, stream, o.workers);
  write_difficulty_table(ds, tab, scheme, o.seed);
  detail::write_text(dir / "difficulty.tsv", ds.str());

  char buf[200];
  std::snprintf(buf, sizeof buf,
                "plan=%s gpus=%zu tokens=%zu mean_std=%.6g param_spread_ratio=%.6f\n",
                to_string(plan.mode).c_str(), plan.num_gpus, tokens, report.mean_std(),
                param_spread_ratio(report.per_gpu_params));
  out << buf;
  return kOk;
}

inline int cmd_report(const RunOptions& o, std::ostream& out) {
  if (o.trace.empty()) throw ConfigError("report needs --trace");
  const ModelConfig c =
      o.weights.empty() ? detail::resolve_config(o) : load_weights<float>(o.weights).config;
  const auto plan = detail::resolve_plan(o, c);
  std::ifstream in(o.trace);
  if (!in) throw IoError("cannot open trace '" + o.trace + "'");
  const auto report = replay_load_report(in, plan, c);
  const auto dir = detail::prepare_out(o);
  auto m = detail::manifest(o, c);
  m["plan"] = to_string(plan.mode);
  m["gpus"] = plan.num_gpus;
  detail::write_manifest(dir, m);
  std::ostringstream rs;
  write_load_report(rs, report, c, plan, o.seed);
  detail::write_text(dir / "load_report.tsv", rs.str());
  char buf[160];
  std::snprintf(buf, sizeof buf, "replayed tokens=%llu mean_std=%.6g\n",
                static_cast<unsigned long long>(report.token_count), report.mean_std());
  out << buf;
  return kOk;
}

inline int dispatch(const RunOptions& o, std::ostream& out, std::ostream& err) {
  if (o.command == "validate") return cmd_validate(o, out, err);
  if (o.command == "train") return cmd_train(o, out);
  if (o.command == "simulate") return cmd_simulate(o, out);
  if (o.command == "report") return cmd_report(o, out);
  throw ConfigError("unknown command '" + o.command + "'");
}

// Maps library exceptions onto the exit-code contract.
inline int guarded(const RunOptions& o, std::ostream& out, std::ostream& err) {
  try {
    return dispatch(o, out, err);
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  }
}

inline RunOptions load_manifest_options(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("malformed manifest '" + path + "': " + e.what());
  }
  if (!j.contains("options")) throw ConfigError("manifest has no options block");
  return options_from_json(j.at("options"));
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"mohge: heterogeneous grouped experts toolkit"};
  app.require_subcommand(1);
  RunOptions o;
  std::string manifest_path, rerun_out;

  auto add_config = [&](CLI::App* s) {
    s->add_option("--config", o.config_path, "JSON config file");
    s->add_option("--preset", o.preset, "1B, 3B or 14B");
    s->add_option("--shrink", o.shrink, "divide dims and widths by this factor");
  };
  auto add_common = [&](CLI::App* s) {
    add_config(s);
    s->add_option("--seed", o.seed, "master seed");
    s->add_option("--workers", o.workers, "shard workers")->check(CLI::PositiveNumber);
    s->add_option("--out", o.out, "output directory");
    s->add_option("--alpha-group", o.alpha_group, "override group loss coefficient");
    s->add_option("--alpha-expert", o.alpha_expert, "override expert loss coefficient");
    s->add_option("--scheme", o.scheme, "difficulty scheme: rank or perplexity");
  };
  auto add_plan = [&](CLI::App* s) {
    s->add_option("--gpus", o.gpus, "number of GPUs (default experts_per_group)");
    s->add_option("--plan", o.plan, "strict, relaxed or naive");
    s->add_option("--plan-file", o.plan_file, "read the placement from a plan table");
  };

  auto* validate_cmd = app.add_subcommand("validate", "check a config");
  add_config(validate_cmd);

  auto* train_cmd = app.add_subcommand("train", "train a toy layer");
  add_common(train_cmd);
  train_cmd->add_option("--tokens", o.tokens, "training stream size");
  train_cmd->add_option("--eval-tokens", o.eval_tokens, "held-out stream size for histograms");
  train_cmd->add_option("--steps", o.steps, "SGD steps");
  train_cmd->add_option("--lr", o.lr, "learning rate");
  train_cmd->add_option("--final-lr-fraction", o.final_lr_fraction, "linear decay target");
  train_cmd->add_option("--batch-size", o.batch_size, "tokens per step");
  train_cmd->add_option("--log-interval", o.log_interval, "steps per metrics record");
  train_cmd->add_option("--gating-stddev", o.gating_stddev, "gating init stddev");
  train_cmd->add_option("--losses", o.losses, "both, group, expert or none");
  train_cmd->add_flag("--ablate-losses", o.ablate_losses, "also train without the group loss");

  auto* sim_cmd = app.add_subcommand("simulate", "route a stream and report load");
  add_common(sim_cmd);
  add_plan(sim_cmd);
  sim_cmd->add_option("--tokens", o.tokens, "stream size");
  sim_cmd->add_option("--weights", o.weights, "trained weights (config comes from the file)");
  sim_cmd->add_option("--gating-stddev", o.gating_stddev, "gating init stddev when untrained");
  sim_cmd->add_flag("--write-trace", o.write_trace, "also write trace.tsv");

  auto* report_cmd = app.add_subcommand("report", "replay a routing trace");
  add_common(report_cmd);
  add_plan(report_cmd);
  report_cmd->add_option("--trace", o.trace, "trace file")->required();
  report_cmd->add_option("--weights", o.weights, "weights file supplying the config");

  auto* rerun_cmd = app.add_subcommand("rerun", "repeat a run from its manifest");
  rerun_cmd->add_option("manifest", manifest_path, "manifest.json")->required();
  rerun_cmd->add_option("--out", rerun_out, "output directory (default: the original)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kValidation;
  }

  if (rerun_cmd->parsed()) {
    try {
      o = load_manifest_options(manifest_path);
    } catch (const IoError& e) {
      err << "io error: " << e.what() << "\n";
      return kIo;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << "\n";
      return kValidation;
    }
    if (!rerun_out.empty()) o.out = rerun_out;
    return guarded(o, out, err);
  }
  o.command = app.get_subcommands().front()->get_name();
  return guarded(o, out, err);
}

}  // namespace mohge::cli
