// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The mohge Authors.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "mohge/cli.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "mohge");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int code = mohge::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("mohge_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<std::string> data_lines(const std::string& text) {
  std::vector<std::string> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty() && line[0] != '#') rows.push_back(line);
  return rows;
}

// Small, quick training run shared by several tests.
std::vector<std::string> quick_train(const fs::path& out) {
  return {"train", "--preset", "1B", "--seed", "3", "--steps", "40", "--tokens", "2000",
          "--eval-tokens", "2000", "--log-interval", "10", "--out", out.string()};
}

}  // namespace

TEST(CliValidate, PresetIsValid) {
  const auto r = invoke({"validate", "--preset", "3B"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("valid: 8 groups x 8 experts"), std::string::npos);
}

TEST(CliValidate, ExitCodesSeparateValidationFromIo) {
  const auto dir = scratch("validate");
  fs::create_directories(dir);
  const auto bad = dir / "bad.json";
  auto j = mohge::to_json(mohge::preset(mohge::Scale::B3));
  j["group_widths"][0] = 400;
  std::ofstream(bad) << j.dump();
  const auto r = invoke({"validate", "--config", bad.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("violation"), std::string::npos);
  EXPECT_EQ(invoke({"validate", "--config", (dir / "missing.json").string()}).code, 2);
  EXPECT_EQ(invoke({"validate"}).code, 1);
  EXPECT_EQ(invoke({"frobnicate"}).code, 1);
}

TEST(CliTrain, ZeroStepsIsAnError) {
  auto args = quick_train(scratch("zero"));
  args[6] = "0";
  EXPECT_EQ(invoke(args).code, 1);
}

TEST(CliTrain, DivergenceHasNumericalExitCode) {
  auto args = quick_train(scratch("diverge"));
  args.insert(args.end(), {"--lr", "1e6"});
  const auto r = invoke(args);
  EXPECT_EQ(r.code, 3) << r.err;
}

TEST(CliTrain, WritesArtifactsAndRerunsBitIdentically) {
  const auto a = scratch("train_a"), b = scratch("train_b");
  const auto r = invoke(quick_train(a));
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"manifest.json", "metrics.jsonl", "weights.bin", "histograms.tsv"})
    EXPECT_TRUE(fs::exists(a / f)) << f;
  const auto m = nlohmann::json::parse(slurp(a / "manifest.json"));
  EXPECT_EQ(m["command"], "train");
  EXPECT_EQ(m["seed"], 3);
  EXPECT_EQ(m["config"]["model_dim"], 16);
  EXPECT_EQ(data_lines(slurp(a / "metrics.jsonl")).size(), 4u);

  const auto again = invoke({"rerun", (a / "manifest.json").string(), "--out", b.string()});
  ASSERT_EQ(again.code, 0) << again.err;
  EXPECT_EQ(slurp(a / "metrics.jsonl"), slurp(b / "metrics.jsonl"));
  EXPECT_EQ(slurp(a / "weights.bin"), slurp(b / "weights.bin"));
  EXPECT_EQ(slurp(a / "histograms.tsv"), slurp(b / "histograms.tsv"));
}

TEST(CliTrain, AblationWritesBothConditions) {
  const auto a = scratch("ablate");
  auto args = quick_train(a);
  args.push_back("--ablate-losses");
  ASSERT_EQ(invoke(args).code, 0);
  EXPECT_TRUE(fs::exists(a / "weights.with_group_loss.bin"));
  EXPECT_TRUE(fs::exists(a / "weights.without_group_loss.bin"));
  EXPECT_NE(slurp(a / "histograms.tsv").find("group\twidth\twith_group_loss\twithout_group_loss"),
            std::string::npos);
  args.insert(args.end(), {"--losses", "expert"});
  EXPECT_EQ(invoke(args).code, 1);
}

TEST(CliTrain, AblationShiftsMassTowardSmallerGroups) {
  // Desk-default run with seed 7: the with-group-loss column must put more of
  // its traffic on the narrower half of the groups.
  const auto a = scratch("ablate_seed7");
  ASSERT_EQ(invoke({"train", "--preset", "1B", "--ablate-losses", "--seed", "7", "--out",
                    a.string()})
                .code,
            0);
  const auto rows = data_lines(slurp(a / "histograms.tsv"));
  ASSERT_EQ(rows.size(), 9u);
  double with_small = 0, with_total = 0, without_small = 0, without_total = 0;
  for (std::size_t g = 1; g < rows.size(); ++g) {
    std::istringstream in(rows[g]);
    std::string name, num;
    double width, with, without;
    in >> name >> num >> width >> with >> without;
    with_total += with;
    without_total += without;
    if (g <= 4) {
      with_small += with;
      without_small += without;
    }
  }
  EXPECT_GT(with_small / with_total, without_small / without_total);
}

TEST(CliSimulate, NaivePlanReportsWidthRatioOn3B) {
  const auto a = scratch("naive");
  const auto r = invoke({"simulate", "--preset", "3B", "--plan", "naive", "--gpus", "8",
                         "--tokens", "2000", "--out", a.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("param_spread_ratio=3.333333"), std::string::npos) << r.out;
  EXPECT_NE(slurp(a / "load_report.tsv").find("ratio=3.333333"), std::string::npos);
}

TEST(CliSimulate, StrictPlanHasEqualParamsInHeader) {
  const auto a = scratch("strict");
  ASSERT_EQ(invoke({"simulate", "--preset", "3B", "--gpus", "4", "--tokens", "2000", "--out",
                    a.string()})
                .code,
            0);
  const auto text = slurp(a / "load_report.tsv");
  EXPECT_NE(text.find("# param spread=0 ratio=1.000000"), std::string::npos);
  const auto at = text.find("# per-GPU expert params:");
  ASSERT_NE(at, std::string::npos);
  std::istringstream in(text.substr(at + 24, text.find('\n', at) - at - 24));
  std::vector<long long> per;
  for (long long v; in >> v;) per.push_back(v);
  ASSERT_EQ(per.size(), 4u);
  for (auto v : per) EXPECT_EQ(v, per[0]);
  EXPECT_EQ(invoke({"simulate", "--preset", "3B", "--gpus", "3", "--out", a.string()}).code, 1);
}

TEST(CliSimulate, DifficultyTableRows) {
  const auto a = scratch("rank"), b = scratch("ppl");
  ASSERT_EQ(invoke({"simulate", "--preset", "1B", "--tokens", "3000", "--out", a.string()}).code, 0);
  ASSERT_EQ(invoke({"simulate", "--preset", "1B", "--tokens", "3000", "--scheme", "perplexity",
                    "--out", b.string()})
                .code,
            0);
  EXPECT_EQ(data_lines(slurp(a / "difficulty.tsv")).size(), 1u + 4u);
  EXPECT_EQ(data_lines(slurp(b / "difficulty.tsv")).size(), 1u + 3u);
}

TEST(CliReport, TraceReplayMatchesSimulation) {
  const auto t = scratch("trained"), s = scratch("sim"), r = scratch("replay");
  ASSERT_EQ(invoke(quick_train(t)).code, 0);
  const auto sim = invoke({"simulate", "--weights", (t / "weights.bin").string(), "--gpus", "2",
                           "--tokens", "3000", "--seed", "5", "--write-trace", "--out", s.string()});
  ASSERT_EQ(sim.code, 0) << sim.err;
  const auto rep = invoke({"report", "--weights", (t / "weights.bin").string(), "--trace",
                           (s / "trace.tsv").string(), "--gpus", "2", "--seed", "5", "--out",
                           r.string()});
  ASSERT_EQ(rep.code, 0) << rep.err;
  EXPECT_EQ(slurp(s / "load_report.tsv"), slurp(r / "load_report.tsv"));

  const auto p = scratch("planfile");
  ASSERT_EQ(invoke({"report", "--weights", (t / "weights.bin").string(), "--trace",
                    (s / "trace.tsv").string(), "--plan-file", (s / "plan.tsv").string(), "--seed",
                    "5", "--out", p.string()})
                .code,
            0);
  EXPECT_EQ(slurp(s / "load_report.tsv"), slurp(p / "load_report.tsv"));
  EXPECT_EQ(invoke({"report", "--preset", "1B", "--trace", "/nonexistent/trace.tsv", "--out",
                    p.string()})
                .code,
            2);
}

TEST(CliSimulate, WorkerCountDoesNotChangeOutputs) {
  const auto a = scratch("w1"), b = scratch("w3");
  ASSERT_EQ(invoke({"simulate", "--preset", "1B", "--tokens", "3000", "--out", a.string()}).code, 0);
  ASSERT_EQ(invoke({"simulate", "--preset", "1B", "--tokens", "3000", "--workers", "3", "--out",
                    b.string()})
                .code,
            0);
  EXPECT_EQ(slurp(a / "load_report.tsv"), slurp(b / "load_report.tsv"));
  EXPECT_EQ(slurp(a / "difficulty.tsv"), slurp(b / "difficulty.tsv"));
}

TEST(CliRerun, MissingManifest) {
  EXPECT_EQ(invoke({"rerun", "/nonexistent/manifest.json"}).code, 2);
}
