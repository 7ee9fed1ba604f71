#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "lmgrad/checkpoint.hpp"
#include "lmgrad/experiments.hpp"

using namespace lmgrad;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("lmgrad_test_" + name);
  fs::remove_all(p);
  return p;
}

Json tiny_train_config(const fs::path& out) {
  Json c = default_config();
  c["out_dir"] = out.string();
  c["corpus"]["vocab_size"] = 12;
  c["corpus"]["num_seqs"] = 20;
  c["corpus"]["seq_len"] = 8;
  c["corpus"]["max_context_len"] = 1;
  c["train"]["steps"] = 40;
  c["train"]["eval_every"] = 10;
  c["train"]["dim"] = 3;
  c["train"]["checkpoint_every"] = 20;
  return c;
}

SpamSweepConfig tiny_spam() {
  SpamSweepConfig s;
  s.vocab_sizes = {4, 8};
  s.lrs = {0.0, 3e-2};
  s.seeds = {1, 2};
  s.dim = 2;
  s.steps = 30;
  s.num_seqs = 16;
  s.seq_len = 6;
  s.eval_every = 10;
  return s;
}

}  // namespace

TEST(Config, MergeRejectsUnknownKeysAndWrongTypes) {
  Json c = default_config();
  merge_config(c, Json::parse(R"({"train": {"lr": 0.5}})"));
  EXPECT_EQ(c["train"]["lr"].get<double>(), 0.5);
  EXPECT_THROW(merge_config(c, Json::parse(R"({"train": {"lrr": 0.5}})")), ConfigError);
  EXPECT_THROW(merge_config(c, Json::parse(R"({"nope": {}})")), ConfigError);
  Json bad = default_config();
  merge_config(bad, Json::parse(R"({"train": {"steps": "many"}})"));
  EXPECT_THROW(train_config_from_json(bad["train"]), ConfigError);
}

TEST(Config, DottedOverrides) {
  Json c = default_config();
  apply_override(c, "train.lr", "0.003");
  apply_override(c, "train.optimizer", "gd");
  apply_override(c, "spamlang_sweep.vocab_sizes", "[4,8]");
  EXPECT_EQ(c["train"]["lr"].get<double>(), 0.003);
  EXPECT_EQ(c["train"]["optimizer"].get<std::string>(), "gd");
  EXPECT_EQ(c["spamlang_sweep"]["vocab_sizes"].size(), 2u);
  EXPECT_THROW(apply_override(c, "train.nope", "1"), ConfigError);
  EXPECT_THROW(apply_override(c, "nope", "1"), ConfigError);
  const TrainConfig tc = train_config_from_json(c["train"]);
  EXPECT_EQ(tc.optimizer, OptimizerKind::kGradientDescent);
}

TEST(Config, OutputDirPrecedence) {
  Json c = default_config();
  ::unsetenv(kOutEnvVar);
  EXPECT_EQ(resolve_out_dir(c, "train"), (fs::path("lmgrad-out") / "train").string());
  ::setenv(kOutEnvVar, "/tmp/root", 1);
  EXPECT_EQ(resolve_out_dir(c, "train"), (fs::path("/tmp/root") / "train").string());
  c["out_dir"] = "/tmp/explicit";
  EXPECT_EQ(resolve_out_dir(c, "train"), "/tmp/explicit");
  ::unsetenv(kOutEnvVar);
}

TEST(Spearman, HandValues) {
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
  // Ties take average ranks: x ranks (1, 2.5, 2.5, 4), y ranks (1, 2, 3, 4).
  const double expected = 4.5 / std::sqrt(4.5 * 5.0);
  EXPECT_NEAR(spearman({1, 2, 2, 3}, {1, 2, 3, 4}), expected, 1e-15);
  EXPECT_TRUE(std::isnan(spearman({1, 1, 1}, {1, 2, 3})));
}

TEST(SpamSweep, ZeroLearningRateKeepsInitialLoss) {
  const SpamCell c = run_spam_cell(tiny_spam(), 8, 0.0, 1);
  EXPECT_FALSE(c.failed);
  EXPECT_EQ(c.final_loss, c.initial_loss);
  EXPECT_NEAR(c.excess_loss, c.final_loss - c.entropy_floor, 1e-15);
}

TEST(SpamSweep, DeterministicAndOrdered) {
  const SpamSweepResult a = spamlang_sweep(tiny_spam());
  const SpamSweepResult b = spamlang_sweep(tiny_spam());
  ASSERT_EQ(a.cells.size(), 8u);
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    EXPECT_EQ(a.cells[i].final_loss, b.cells[i].final_loss);
    EXPECT_EQ(a.cells[i].trajectory.size(), b.cells[i].trajectory.size());
  }
  ASSERT_EQ(a.best.size(), 2u);
  for (const auto& best : a.best) EXPECT_EQ(best.lr, 3e-2);
}

TEST(Cli, TrainWritesArtifactsDeterministically) {
  const fs::path d1 = scratch("train1"), d2 = scratch("train2");
  const RunOutcome r1 = run_experiment("train", tiny_train_config(d1));
  const RunOutcome r2 = run_experiment("train", tiny_train_config(d2));
  EXPECT_EQ(r1.exit_code, kExitOk);
  for (const std::string f : {"corpus.txt", "model.ckpt", "trajectory.csv", "loss.svg", "summary.csv",
                              "checkpoints/step_20.ckpt"}) {
    ASSERT_TRUE(fs::exists(d1 / f)) << f;
    EXPECT_TRUE(fs::exists(d1 / (f + ".meta.json"))) << f;
    EXPECT_EQ(slurp(d1 / f), slurp(d2 / f)) << f;
  }
  // Sidecars differ only in the out_dir recorded in the config.
  const Json meta = Json::parse(slurp(d1 / "trajectory.csv.meta.json"));
  EXPECT_EQ(meta["experiment"], "train");
  EXPECT_EQ(meta["file"], "trajectory.csv");
}

TEST(Cli, DiagnoseIsReproducibleFromCheckpoint) {
  const fs::path t = scratch("diag_train");
  run_experiment("train", tiny_train_config(t));
  auto diag = [&](const fs::path& out) {
    Json c = default_config();
    c["out_dir"] = out.string();
    c["diagnose"]["checkpoint"] = (t / "model.ckpt").string();
    c["diagnose"]["corpus"] = (t / "corpus.txt").string();
    c["diagnose"]["max_context_len"] = 1;
    c["diagnose"]["trajectory"] = (t / "trajectory.csv").string();
    return run_experiment("diagnose", c);
  };
  const fs::path a = scratch("diag_a"), b = scratch("diag_b");
  EXPECT_EQ(diag(a).exit_code, kExitOk);
  diag(b);
  for (const std::string f : {"rank_curve.csv", "compression.csv", "profile.csv", "efficiency.csv", "summary.csv"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  EXPECT_EQ(slurp(a / "rank_curve.csv").rfind("token_count,rank,max_rank\n", 0), 0u);

  // Mismatched context length changes C and is rejected.
  Json c = default_config();
  c["out_dir"] = scratch("diag_bad").string();
  c["diagnose"]["checkpoint"] = (t / "model.ckpt").string();
  c["diagnose"]["corpus"] = (t / "corpus.txt").string();
  c["diagnose"]["max_context_len"] = 3;
  EXPECT_THROW(run_experiment("diagnose", c), ConfigError);
  std::ofstream(t / "broken.ckpt") << "garbage";
  c["diagnose"]["max_context_len"] = 1;
  c["diagnose"]["checkpoint"] = (t / "broken.ckpt").string();
  EXPECT_THROW(run_experiment("diagnose", c), CheckpointError);
}

TEST(Cli, VerifyPassesWithSmallBudgetsAndFailsWithAbsurdTolerance) {
  Json c = default_config();
  c["out_dir"] = scratch("verify").string();
  c["verify"]["gibbs_trials"] = 20;
  c["verify"]["rank_bound_trials"] = 20;
  c["verify"]["top1_trials"] = 2;
  c["verify"]["lower_bound_instances"] = 10;
  c["verify"]["sgd_corpora"] = 3;
  c["verify"]["residual_instances"] = 5;
  const RunOutcome ok = run_experiment("verify", c);
  EXPECT_EQ(ok.exit_code, kExitOk) << ok.message;
  EXPECT_TRUE(fs::exists(fs::path(ok.out_dir) / "summary.csv"));
  c["verify"]["tol"] = 1e6;
  c["out_dir"] = scratch("verify_bad").string();
  EXPECT_EQ(run_experiment("verify", c).exit_code, kExitViolation);
}

TEST(Cli, UnknownExperimentAndNumericFailure) {
  EXPECT_THROW(run_experiment("nope", default_config()), ConfigError);
  Json c = tiny_train_config(scratch("diverge"));
  c["train"]["optimizer"] = "gd";
  c["train"]["lr"] = 1e200;
  c["train"]["checkpoint_every"] = 0;
  const RunOutcome r = run_experiment("train", c);
  EXPECT_EQ(r.exit_code, kExitNumeric);
}

TEST(BottleneckSweep, StructConfigUsesSweepDimAndBaseline) {
  BottleneckSweepConfig b;
  b.vocab_size = 24;
  b.dim = 6;
  b.ranks = {2, 6};
  b.seeds = {1, 2};
  b.steps = 40;
  b.eval_every = 10;
  b.num_seqs = 40;
  b.val_seqs = 10;
  b.seq_len = 12;
  const BottleneckSweepResult r = bottleneck_sweep(b);
  ASSERT_EQ(r.cells.size(), 6u);
  for (const auto& c : r.cells) {
    EXPECT_FALSE(c.failed);
    EXPECT_EQ(c.trajectory.back().step, 40u);
    EXPECT_TRUE(c.trajectory.back().val_loss.has_value());
  }
  EXPECT_EQ(r.cells.back().head_rank, 0);
  EXPECT_GT(r.train_tokens, 0u);
  const BottleneckSweepResult again = bottleneck_sweep(b);
  for (std::size_t i = 0; i < r.cells.size(); ++i) EXPECT_EQ(r.cells[i].final_val_loss, again.cells[i].final_val_loss);
}
