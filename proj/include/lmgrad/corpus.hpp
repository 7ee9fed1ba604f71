#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "lmgrad/linalg.hpp"

namespace lmgrad {

using Token = std::uint32_t;
using Sequence = std::vector<Token>;

inline constexpr std::size_t kDefaultMaxContextLen = 16;
inline constexpr double kDefaultZipfExponent = 1.2;
/// Dense count matrices beyond this many contexts are refused.
inline constexpr std::size_t kMaxContexts = 100000;

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Corpus {
  std::size_t vocab_size = 0;
  std::vector<Sequence> sequences;
  std::uint64_t seed = 0;  // 0 for ingested corpora

  std::size_t token_count() const;
  /// Throws CorpusError unless every sequence is nonempty with ids < vocab_size.
  void validate() const;
};

Corpus gen_spamlang(std::size_t vocab_size, std::size_t num_seqs, std::size_t seq_len, std::uint64_t seed);

/// First-order Markov source whose transition rows are independently
/// permuted Zipf(exponent) distributions. The initial token follows the
/// unpermuted Zipf law (token 0 most likely).
class ZipfBigramSource {
 public:
  ZipfBigramSource(std::size_t vocab_size, double exponent, std::uint64_t seed);

  std::size_t vocab_size() const { return initial_.size(); }
  const Vector& initial() const { return initial_; }
  /// Row-stochastic V x V transition table.
  const Matrix& transitions() const { return transitions_; }

  Corpus sample(std::size_t num_seqs, std::size_t seq_len, std::uint64_t seed) const;

 private:
  Vector initial_;
  Matrix transitions_;
};

/// Zipf weights 1/k^s for ranks k = 1..n, normalized.
Vector zipf_pmf(std::size_t n, double exponent);

Corpus gen_zipf_bigram(std::size_t vocab_size, double exponent, std::size_t num_seqs, std::size_t seq_len,
                       std::uint64_t seed);

/// Line format: header `#vocab <V>`, then one sequence per line as
/// space-separated decimal token ids.
void write_corpus(std::ostream& out, const Corpus& corpus);
Corpus read_corpus(std::istream& in);
void save_corpus(const std::string& path, const Corpus& corpus);
Corpus load_corpus(const std::string& path);

struct SequenceHash {
  std::size_t operator()(const Sequence& s) const noexcept;
};

/// Distinct contexts in order of first appearance. Keys are the (truncated)
/// prefixes themselves; lookups compare content.
class ContextTable {
 public:
  /// Returns the row for `key`, inserting it if new.
  Index intern(std::span<const Token> key);
  /// Row for `key`, or -1 when absent.
  Index find(std::span<const Token> key) const;

  Index size() const { return static_cast<Index>(keys_.size()); }
  const std::vector<Sequence>& keys() const { return keys_; }

 private:
  std::vector<Sequence> keys_;
  std::unordered_map<Sequence, Index, SequenceHash> index_;
};

/// Next-token counts N (integer-valued, stored as doubles), the row-normalized
/// Ñ and context weights ω = rowsum(N) / T.
struct CountMatrix {
  Matrix counts;
  std::uint64_t total = 0;
  Matrix normalized;
  Vector weights;
  /// ContextTable row of each matrix row (identity for full-corpus counts).
  std::vector<Index> rows;

  Index num_contexts() const { return counts.rows(); }
  Index vocab_size() const { return counts.cols(); }

  /// Fills total, normalized and weights from counts. Rows must be positive.
  void finalize();
};

/// One entry per token position: the context row it is conditioned on and
/// the observed token.
struct TokenEvent {
  Index row = 0;
  Token token = 0;
};

struct CountTables {
  ContextTable table;
  CountMatrix counts;
  std::vector<TokenEvent> events;
};

/// Context of position t is w_{<t} truncated to its last max_context_len
/// tokens; position 0 has the empty context.
CountTables build_counts(const Corpus& corpus, std::size_t max_context_len = kDefaultMaxContextLen);

/// In-batch counts N^B for the listed sequences. Rows appear in increasing
/// table order and only for contexts present in the batch.
CountMatrix batch_counts(const Corpus& corpus, const ContextTable& table, std::span<const std::size_t> batch,
                         std::size_t max_context_len = kDefaultMaxContextLen);

/// Counts of `corpus` restricted to contexts already present in `table`
/// (positions with unknown contexts are dropped). Used for held-out data.
CountMatrix counts_on_table(const Corpus& corpus, const ContextTable& table,
                            std::size_t max_context_len = kDefaultMaxContextLen);

struct PrefixStat {
  std::size_t prefix_tokens = 0;
  std::size_t unique_tokens = 0;
  std::size_t unique_contexts = 0;
};

struct EntropyHistogram {
  std::vector<double> edges;    // bins + 1 edges in nats
  std::vector<double> weights;  // ω-weighted mass per bin, sums to 1
};

struct AssumptionStats {
  std::size_t unique_context_count = 0;     // rows of Ñ that are one-hot
  std::size_t unique_next_token_count = 0;  // distinct continuations of those rows
  std::vector<PrefixStat> prefix_stats;
  EntropyHistogram entropy_histogram;
};

/// Rows of Ñ that are exactly one-hot, with their continuation token.
std::vector<std::pair<Index, Token>> one_hot_rows(const CountMatrix& counts);

AssumptionStats assumption_stats(const Corpus& corpus, const ContextTable& table, const CountMatrix& counts,
                                 std::span<const std::size_t> prefix_sizes, std::size_t entropy_bins = 20,
                                 std::size_t max_context_len = kDefaultMaxContextLen);

/// CSV with header `stat,key,value`.
void write_stats_csv(std::ostream& out, const AssumptionStats& stats);

}  // namespace lmgrad
