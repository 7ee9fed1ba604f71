#pragma once

// Brute-force checks of the structural results about softmax LM heads:
// the entropy floor of the loss, rank caps of logits and log-probabilities,
// the rank-2 top-1 construction, rank lower bounds on P - Ñ (full batch and
// mini-batch), and the Eckart-Young floor on the logit update residual.

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lmgrad/corpus.hpp"
#include "lmgrad/linalg.hpp"
#include "lmgrad/matrix_lm.hpp"

namespace lmgrad {

struct InstanceRecord {
  std::size_t id = 0;
  bool violated = false;
  double margin = 0;
  std::vector<std::pair<std::string, double>> fields;
};

struct VerificationResult {
  std::string proposition;
  std::uint64_t seed = 0;
  std::size_t instances = 0;
  std::size_t violations = 0;
  std::size_t skipped = 0;
  double worst_margin = 0;  // minimum slack over tested instances
  std::vector<InstanceRecord> details;

  void add(InstanceRecord rec);
  bool passed() const { return violations == 0; }
};

/// Header `instance,violated,margin,<fields...>`.
void write_instances_csv(std::ostream& out, const VerificationResult& result);

/// Counts with positive rows, integer entries in [0, max_count] and random zeros.
CountMatrix random_counts(Index contexts, Index vocab, int max_count, std::mt19937_64& rng);

/// Counts where exactly `unique_tokens` distinct tokens occur as the single
/// observed continuation of some context; every other row has at least two
/// observed tokens. Requires unique_tokens <= min(contexts, vocab).
CountMatrix planted_counts(Index contexts, Index vocab, Index unique_tokens, std::mt19937_64& rng);

/// Row-stochastic matrix with all entries in (0, 1).
Matrix random_interior_probs(Index rows, Index cols, double logit_scale, std::mt19937_64& rng);

struct GibbsDims {
  Index max_contexts = 10;
  Index max_vocab = 12;
  Index max_dim = 4;
};

VerificationResult verify_gibbs(std::size_t trials, const GibbsDims& dims, std::uint64_t seed);

struct RankBoundDims {
  Index max_contexts = 16;
  Index max_vocab = 20;
  Index max_dim = 5;
};

VerificationResult verify_rank_bounds(std::size_t trials, const RankBoundDims& dims, std::uint64_t seed,
                                      double tol = kRankTol);

struct Top1Construction {
  ModelParams params;           // D = 2
  std::vector<double> alphas;   // per-context scale of H_i along W_argmax
  std::vector<double> errors;   // |P_i,k - Ñ_i,k| at the argmax k
  double max_error = 0;
  bool used_grid_fallback = false;
};

/// Places the V head rows on the unit circle at angles 2πk/V and sets
/// H_i = α_i W_{argmax Ñ_i}, with α_i chosen so the top-1 probability is
/// within epsilon of Ñ_i's maximum.
Top1Construction construct_top1(const CountMatrix& target, double epsilon);

struct Top1Dims {
  Index max_contexts = 64;
  Index max_vocab = 256;
};

VerificationResult verify_top1(std::size_t trials, const Top1Dims& dims, double epsilon, std::uint64_t seed);

struct LowerBoundDims {
  Index max_contexts = 64;
  Index max_vocab = 32;
};

VerificationResult verify_rank_lower_bound(std::size_t instances, const LowerBoundDims& dims, std::uint64_t seed,
                                           double tol = kRankTol);

/// Rank (singular values above tol * max(1, σ_max)).
Index svd_rank(const Matrix& m, double tol = kRankTol);

struct BatchUniqueSet {
  /// Table rows of the selected contexts and their in-batch continuation.
  std::vector<std::pair<Index, Token>> contexts;
  std::size_t candidates = 0;  // before restricting to one connected component
  std::size_t components = 0;
};

/// Contexts with a single distinct next token in the batch but several in the
/// dataset, one per continuation token, restricted to the largest connected
/// component of the graph with edges where Ñ_{c, w_c'} > 0 or Ñ_{c', w_c} > 0.
BatchUniqueSet batch_unique_contexts(const CountMatrix& full, const CountMatrix& batch);

struct SgdRankConfig {
  std::size_t max_context_len = 2;
  double batch_fraction = 0.25;
  std::vector<double> delta_grid = {1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 1e-4};
  double check_delta = 1e-3;
  double tol = kRankTol;
};

/// One instance: samples a batch, builds P = (1 - δ) Ñ + δ / V and checks
/// rank(P_B - Ñ^B) >= min(|C_B^u|, V - 1) for each δ.
InstanceRecord check_sgd_rank(const Corpus& corpus, const SgdRankConfig& config, std::uint64_t seed,
                              bool* skipped = nullptr);

struct SgdCorpusSpec {
  std::size_t vocab_size = 32;
  double exponent = kDefaultZipfExponent;
  std::size_t num_seqs = 40;
  std::size_t seq_len = 16;
};

VerificationResult verify_sgd_rank(std::size_t corpora, const SgdCorpusSpec& spec, const SgdRankConfig& config,
                                   std::uint64_t seed);

struct ResidualDims {
  Index max_contexts = 48;
  Index max_vocab = 24;
  Index max_dim = 3;
};

VerificationResult verify_update_residual(std::size_t instances, const ResidualDims& dims, std::uint64_t seed,
                                          double tol = kRankTol);

}  // namespace lmgrad
