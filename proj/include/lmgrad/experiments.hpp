#pragma once

// Config-driven runners behind the command line tool. Every run writes its
// artifacts into one output directory, each with a `<file>.meta.json`
// sidecar holding the resolved configuration and seed.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmgrad/corpus.hpp"
#include "lmgrad/matrix_lm.hpp"
#include "lmgrad/theory.hpp"

namespace lmgrad {

using Json = nlohmann::ordered_json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitViolation = 2, kExitNumeric = 3 };

/// Environment variable consulted for the output root when the config has none.
inline constexpr const char* kOutEnvVar = "LMGRAD_OUT";

/// Every key the runners understand, with its default.
Json default_config();

/// Recursively overlays `patch` on `base`. Keys absent from `base` are
/// rejected so typos surface as config errors.
void merge_config(Json& base, const Json& patch, const std::string& path = "");

/// Sets a dotted key (`train.lr`) from command-line text. The text is read as
/// JSON when it parses, otherwise as a string.
void apply_override(Json& config, const std::string& dotted_key, const std::string& text);

Json load_config_file(const std::string& path);

/// Output directory: `out_dir` from the config, else $LMGRAD_OUT joined with
/// the experiment name, else `lmgrad-out/<experiment>`.
std::string resolve_out_dir(const Json& config, const std::string& experiment);

struct RunOutcome {
  int exit_code = kExitOk;
  std::string out_dir;
  std::vector<std::string> files;  // relative to out_dir, sidecars excluded
  std::string message;
};

RunOutcome run_gen_corpus(const Json& config);
RunOutcome run_train(const Json& config);
RunOutcome run_diagnose(const Json& config);
RunOutcome run_verify(const Json& config);
RunOutcome run_spamlang_sweep(const Json& config);
RunOutcome run_bottleneck_sweep(const Json& config);
RunOutcome run_report(const Json& config);

/// Dispatches on the subcommand name.
RunOutcome run_experiment(const std::string& experiment, const Json& config);

/// Experiment names in command-line spelling.
const std::vector<std::string>& experiment_names();

// ---------------------------------------------------------------------------
// Typed views used by the runners (and by tests that skip the file layer).
// ---------------------------------------------------------------------------

struct CorpusSpec {
  std::string kind = "zipf";  // zipf | spamlang | file
  std::string path;
  std::size_t vocab_size = 256;
  std::size_t num_seqs = 400;
  std::size_t seq_len = 32;
  double exponent = kDefaultZipfExponent;
  std::uint64_t seed = 1;
};

CorpusSpec corpus_spec_from_json(const Json& j);
Corpus make_corpus(const CorpusSpec& spec);

TrainConfig train_config_from_json(const Json& j);

/// Average-rank Spearman correlation; NaN when either side is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct SpamCell {
  std::size_t vocab_size = 0;
  double lr = 0;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  double initial_loss = 0;
  double final_loss = 0;
  double entropy_floor = 0;
  double excess_loss = 0;  // final_loss - entropy_floor
  double top1_acc = 0;
  Trajectory trajectory;
};

struct SpamSweepConfig {
  std::vector<std::size_t> vocab_sizes = {16, 64, 256, 1024};
  std::vector<double> lrs = {1e-3, 3e-3, 1e-2, 3e-2};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  Index dim = 8;
  std::size_t steps = 1000;
  std::size_t num_seqs = 512;
  std::size_t seq_len = 16;
  std::size_t max_context_len = 1;
  std::size_t eval_every = 50;
  TrainConfig base;  // optimizer, schedule and init settings

  void validate() const;
};

SpamSweepConfig spam_sweep_from_json(const Json& j);

struct SpamBest {
  std::size_t vocab_size = 0;
  double lr = 0;
  double mean_excess = 0;
};

struct SpamSweepResult {
  std::vector<SpamCell> cells;  // ordered V, lr, seed
  std::vector<SpamBest> best;   // per V, lr minimizing mean excess loss over seeds
  double spearman_vocab_excess = 0;
};

/// One (V, lr, seed) cell. Its outcome depends on nothing else in the grid.
SpamCell run_spam_cell(const SpamSweepConfig& config, std::size_t vocab_size, double lr, std::uint64_t seed);
SpamSweepResult spamlang_sweep(const SpamSweepConfig& config);

struct BottleneckCell {
  Index head_rank = 0;  // 0 is the full-head baseline
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  double final_train_loss = 0;
  double final_val_loss = 0;
  Trajectory trajectory;
};

struct BottleneckSweepConfig {
  std::size_t vocab_size = 512;
  Index dim = 32;
  std::vector<Index> ranks = {2, 4, 8, 16, 32};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  bool full_head_baseline = true;
  std::size_t steps = 1000;
  std::size_t eval_every = 10;
  double exponent = kDefaultZipfExponent;
  std::size_t num_seqs = 2000;
  std::size_t val_seqs = 500;
  std::size_t seq_len = 64;
  std::size_t max_context_len = 1;
  std::uint64_t corpus_seed = 7;
  TrainConfig base;

  void validate() const;
};

BottleneckSweepConfig bottleneck_sweep_from_json(const Json& j);

struct BottleneckSweepResult {
  std::vector<BottleneckCell> cells;
  double spearman_rank_loss = 0;  // over factored cells
  /// Steps the smallest rank trained divided by the steps the largest rank
  /// needed to reach the same validation loss (seed-averaged curves).
  std::optional<double> token_budget_ratio;
  std::size_t train_tokens = 0;
  double train_entropy_floor = 0;
};

BottleneckSweepResult bottleneck_sweep(const BottleneckSweepConfig& config);

struct VerifyConfig {
  std::uint64_t seed = 0;
  double tol = kRankTol;
  std::size_t gibbs_trials = 1000;
  std::size_t rank_bound_trials = 500;
  std::size_t top1_trials = 20;
  double top1_epsilon = 1e-3;
  std::size_t lower_bound_instances = 200;
  std::size_t sgd_corpora = 50;
  std::size_t residual_instances = 100;
  SgdRankConfig sgd;
  SgdCorpusSpec sgd_corpus;
};

VerifyConfig verify_config_from_json(const Json& j);
std::vector<VerificationResult> verify_all(const VerifyConfig& config);

}  // namespace lmgrad
