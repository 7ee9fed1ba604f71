#include "lmgrad/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <unordered_set>

#include "lmgrad/format.hpp"

namespace lmgrad {

std::size_t Corpus::token_count() const {
  std::size_t n = 0;
  for (const auto& s : sequences) n += s.size();
  return n;
}

void Corpus::validate() const {
  if (vocab_size == 0) throw CorpusError("corpus: vocabulary size must be positive");
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    if (sequences[i].empty()) throw CorpusError("corpus: sequence " + std::to_string(i) + " is empty");
    for (Token t : sequences[i])
      if (t >= vocab_size)
        throw CorpusError("corpus: token " + std::to_string(t) + " in sequence " + std::to_string(i) +
                          " is outside vocabulary of size " + std::to_string(vocab_size));
  }
}

Corpus gen_spamlang(std::size_t vocab_size, std::size_t num_seqs, std::size_t seq_len, std::uint64_t seed) {
  if (vocab_size < 2) throw CorpusError("spamlang: vocab_size must be >= 2");
  if (num_seqs < 1) throw CorpusError("spamlang: num_seqs must be >= 1");
  if (seq_len < 2) throw CorpusError("spamlang: seq_len must be >= 2");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Token> symbol(0, static_cast<Token>(vocab_size - 1));
  Corpus corpus;
  corpus.vocab_size = vocab_size;
  corpus.seed = seed;
  corpus.sequences.reserve(num_seqs);
  for (std::size_t s = 0; s < num_seqs; ++s) corpus.sequences.emplace_back(seq_len, symbol(rng));
  return corpus;
}

Vector zipf_pmf(std::size_t n, double exponent) {
  Vector p(static_cast<Index>(n));
  for (std::size_t k = 0; k < n; ++k) p(static_cast<Index>(k)) = std::pow(static_cast<double>(k + 1), -exponent);
  return p / p.sum();
}

ZipfBigramSource::ZipfBigramSource(std::size_t vocab_size, double exponent, std::uint64_t seed) {
  if (vocab_size < 2) throw CorpusError("zipf: vocab_size must be >= 2");
  if (!(exponent > 0)) throw CorpusError("zipf: exponent must be positive");
  const Index v = static_cast<Index>(vocab_size);
  initial_ = zipf_pmf(vocab_size, exponent);
  transitions_.resize(v, v);
  std::mt19937_64 rng(seed);
  std::vector<Index> order(vocab_size);
  for (Index i = 0; i < v; ++i) {
    std::iota(order.begin(), order.end(), Index{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (Index k = 0; k < v; ++k) transitions_(i, order[static_cast<std::size_t>(k)]) = initial_(k);
  }
}

namespace {

std::discrete_distribution<Token> make_sampler(const Eigen::Ref<const Vector>& p) {
  return std::discrete_distribution<Token>(p.data(), p.data() + p.size());
}

}  // namespace

Corpus ZipfBigramSource::sample(std::size_t num_seqs, std::size_t seq_len, std::uint64_t seed) const {
  if (num_seqs < 1 || seq_len < 1) throw CorpusError("zipf: num_seqs and seq_len must be >= 1");
  const Index v = transitions_.rows();
  auto first = make_sampler(initial_);
  std::vector<std::discrete_distribution<Token>> rows;
  rows.reserve(static_cast<std::size_t>(v));
  // Row-major copy so each transition row is contiguous.
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> t = transitions_;
  for (Index i = 0; i < v; ++i) rows.emplace_back(t.row(i).data(), t.row(i).data() + v);

  std::mt19937_64 rng(seed);
  Corpus corpus;
  corpus.vocab_size = static_cast<std::size_t>(v);
  corpus.seed = seed;
  corpus.sequences.reserve(num_seqs);
  for (std::size_t s = 0; s < num_seqs; ++s) {
    Sequence seq(seq_len);
    seq[0] = first(rng);
    for (std::size_t k = 1; k < seq_len; ++k) seq[k] = rows[seq[k - 1]](rng);
    corpus.sequences.push_back(std::move(seq));
  }
  return corpus;
}

Corpus gen_zipf_bigram(std::size_t vocab_size, double exponent, std::size_t num_seqs, std::size_t seq_len,
                       std::uint64_t seed) {
  // The table and the samples draw from separate streams of the same seed.
  const ZipfBigramSource source(vocab_size, exponent, seed);
  Corpus corpus = source.sample(num_seqs, seq_len, seed ^ 0x9e3779b97f4a7c15ULL);
  corpus.seed = seed;
  return corpus;
}

void write_corpus(std::ostream& out, const Corpus& corpus) {
  out << "#vocab " << corpus.vocab_size << '\n';
  for (const auto& seq : corpus.sequences) {
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i) out << ' ';
      out << seq[i];
    }
    out << '\n';
  }
}

Corpus read_corpus(std::istream& in) {
  Corpus corpus;
  std::string line;
  if (!std::getline(in, line)) throw CorpusError("corpus file: missing `#vocab <V>` header");
  {
    std::istringstream header(line);
    std::string tag;
    long long v = 0;
    if (!(header >> tag >> v) || tag != "#vocab" || v <= 0)
      throw CorpusError("corpus file: malformed header `" + line + "`");
    corpus.vocab_size = static_cast<std::size_t>(v);
  }
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    Sequence seq;
    std::size_t pos = 0;
    while (pos <= line.size()) {
      std::size_t end = line.find(' ', pos);
      if (end == std::string::npos) end = line.size();
      const std::string field = line.substr(pos, end - pos);
      if (field.empty() || field.find_first_not_of("0123456789") != std::string::npos)
        throw CorpusError("corpus file: line " + std::to_string(lineno) + ": bad token `" + field + "`");
      seq.push_back(static_cast<Token>(std::stoull(field)));
      pos = end + 1;
    }
    corpus.sequences.push_back(std::move(seq));
  }
  corpus.validate();
  return corpus;
}

void save_corpus(const std::string& path, const Corpus& corpus) {
  std::ofstream out(path);
  if (!out) throw CorpusError("cannot open " + path + " for writing");
  write_corpus(out, corpus);
}

Corpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open corpus file " + path);
  return read_corpus(in);
}

std::size_t SequenceHash::operator()(const Sequence& s) const noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ s.size();
  for (Token t : s) {
    h ^= t;
    h *= 0x100000001b3ULL;
  }
  return static_cast<std::size_t>(h);
}

Index ContextTable::intern(std::span<const Token> key) {
  Sequence k(key.begin(), key.end());
  auto it = index_.find(k);
  if (it != index_.end()) return it->second;
  if (keys_.size() >= kMaxContexts)
    throw CorpusError("context table exceeds " + std::to_string(kMaxContexts) +
                      " rows; lower max_context_len or the corpus size");
  const Index row = static_cast<Index>(keys_.size());
  index_.emplace(k, row);
  keys_.push_back(std::move(k));
  return row;
}

Index ContextTable::find(std::span<const Token> key) const {
  auto it = index_.find(Sequence(key.begin(), key.end()));
  return it == index_.end() ? -1 : it->second;
}

void CountMatrix::finalize() {
  const Vector row_sums = counts.rowwise().sum();
  if (counts.rows() > 0 && row_sums.minCoeff() <= 0) throw CorpusError("count matrix has an empty row");
  const double t = row_sums.sum();
  total = static_cast<std::uint64_t>(std::llround(t));
  normalized = counts.array().colwise() / row_sums.array();
  weights = row_sums / t;
}

namespace {

std::span<const Token> context_of(const Sequence& seq, std::size_t t, std::size_t max_context_len) {
  const std::size_t len = std::min(t, max_context_len);
  return std::span<const Token>(seq.data() + (t - len), len);
}

void require_vocab(const Corpus& corpus) {
  corpus.validate();
  if (corpus.vocab_size > static_cast<std::size_t>(std::numeric_limits<Index>::max()))
    throw CorpusError("vocabulary too large");
}

}  // namespace

CountTables build_counts(const Corpus& corpus, std::size_t max_context_len) {
  require_vocab(corpus);
  CountTables out;
  out.events.reserve(corpus.token_count());
  for (const auto& seq : corpus.sequences)
    for (std::size_t t = 0; t < seq.size(); ++t)
      out.events.push_back({out.table.intern(context_of(seq, t, max_context_len)), seq[t]});

  CountMatrix& cm = out.counts;
  cm.counts = Matrix::Zero(out.table.size(), static_cast<Index>(corpus.vocab_size));
  for (const auto& e : out.events) cm.counts(e.row, e.token) += 1.0;
  cm.rows.resize(static_cast<std::size_t>(out.table.size()));
  std::iota(cm.rows.begin(), cm.rows.end(), Index{0});
  cm.finalize();
  return out;
}

namespace {

CountMatrix gather_counts(const Corpus& corpus, const ContextTable& table, std::span<const std::size_t> seqs,
                          std::size_t max_context_len, bool skip_unknown) {
  std::vector<TokenEvent> events;
  for (std::size_t s : seqs) {
    if (s >= corpus.sequences.size()) throw CorpusError("batch index " + std::to_string(s) + " out of range");
    const Sequence& seq = corpus.sequences[s];
    for (std::size_t t = 0; t < seq.size(); ++t) {
      const Index row = table.find(context_of(seq, t, max_context_len));
      if (row < 0) {
        if (skip_unknown) continue;
        throw CorpusError("batch sequence " + std::to_string(s) + " has a context missing from the table");
      }
      events.push_back({row, seq[t]});
    }
  }
  if (events.empty()) throw CorpusError("no token positions map onto the context table");

  std::vector<Index> present;
  present.reserve(events.size());
  for (const auto& e : events) present.push_back(e.row);
  std::sort(present.begin(), present.end());
  present.erase(std::unique(present.begin(), present.end()), present.end());
  std::vector<Index> local(static_cast<std::size_t>(table.size()), -1);
  for (std::size_t i = 0; i < present.size(); ++i) local[static_cast<std::size_t>(present[i])] = static_cast<Index>(i);

  CountMatrix cm;
  cm.counts = Matrix::Zero(static_cast<Index>(present.size()), static_cast<Index>(corpus.vocab_size));
  for (const auto& e : events) cm.counts(local[static_cast<std::size_t>(e.row)], e.token) += 1.0;
  cm.rows = std::move(present);
  cm.finalize();
  return cm;
}

}  // namespace

CountMatrix batch_counts(const Corpus& corpus, const ContextTable& table, std::span<const std::size_t> batch,
                         std::size_t max_context_len) {
  if (batch.empty()) throw CorpusError("batch_counts: empty batch");
  return gather_counts(corpus, table, batch, max_context_len, false);
}

CountMatrix counts_on_table(const Corpus& corpus, const ContextTable& table, std::size_t max_context_len) {
  require_vocab(corpus);
  std::vector<std::size_t> all(corpus.sequences.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return gather_counts(corpus, table, all, max_context_len, true);
}

std::vector<std::pair<Index, Token>> one_hot_rows(const CountMatrix& counts) {
  std::vector<std::pair<Index, Token>> out;
  for (Index i = 0; i < counts.counts.rows(); ++i) {
    Index nonzero = 0;
    Index at = -1;
    for (Index j = 0; j < counts.counts.cols(); ++j)
      if (counts.counts(i, j) > 0) {
        ++nonzero;
        at = j;
      }
    if (nonzero == 1) out.emplace_back(i, static_cast<Token>(at));
  }
  return out;
}

AssumptionStats assumption_stats(const Corpus& corpus, const ContextTable& table, const CountMatrix& counts,
                                 std::span<const std::size_t> prefix_sizes, std::size_t entropy_bins,
                                 std::size_t max_context_len) {
  AssumptionStats stats;
  const auto unique_rows = one_hot_rows(counts);
  stats.unique_context_count = unique_rows.size();
  std::unordered_set<Token> continuations;
  for (const auto& [row, tok] : unique_rows) continuations.insert(tok);
  stats.unique_next_token_count = continuations.size();

  // Prefix statistics over the concatenated corpus, in sequence order.
  std::vector<std::size_t> sizes(prefix_sizes.begin(), prefix_sizes.end());
  std::sort(sizes.begin(), sizes.end());
  std::unordered_set<Token> seen_tokens;
  std::unordered_set<Index> seen_contexts;
  std::size_t consumed = 0;
  std::size_t next = 0;
  for (const auto& seq : corpus.sequences) {
    for (std::size_t t = 0; t < seq.size() && next < sizes.size(); ++t) {
      seen_tokens.insert(seq[t]);
      seen_contexts.insert(table.find(context_of(seq, t, max_context_len)));
      ++consumed;
      while (next < sizes.size() && sizes[next] == consumed) {
        stats.prefix_stats.push_back({consumed, seen_tokens.size(), seen_contexts.size()});
        ++next;
      }
    }
  }

  const std::size_t bins = std::max<std::size_t>(entropy_bins, 1);
  const double top = std::log(static_cast<double>(std::max<Index>(counts.vocab_size(), 2)));
  auto& hist = stats.entropy_histogram;
  hist.edges.resize(bins + 1);
  for (std::size_t b = 0; b <= bins; ++b) hist.edges[b] = top * static_cast<double>(b) / static_cast<double>(bins);
  hist.weights.assign(bins, 0.0);
  for (Index i = 0; i < counts.normalized.rows(); ++i) {
    double h = 0;
    for (Index j = 0; j < counts.normalized.cols(); ++j) {
      const double p = counts.normalized(i, j);
      if (p > 0) h -= p * std::log(p);
    }
    auto b = static_cast<std::size_t>(std::floor(h / top * static_cast<double>(bins)));
    b = std::min(b, bins - 1);
    hist.weights[b] += counts.weights(i);
  }
  return stats;
}

void write_stats_csv(std::ostream& out, const AssumptionStats& stats) {
  out << "stat,key,value\n";
  out << "unique_context_count,," << stats.unique_context_count << '\n';
  out << "unique_next_token_count,," << stats.unique_next_token_count << '\n';
  for (const auto& p : stats.prefix_stats) {
    out << "unique_tokens_at_prefix," << p.prefix_tokens << ',' << p.unique_tokens << '\n';
    out << "unique_contexts_at_prefix," << p.prefix_tokens << ',' << p.unique_contexts << '\n';
  }
  const auto& h = stats.entropy_histogram;
  for (std::size_t b = 0; b < h.weights.size(); ++b)
    out << "entropy_bin," << fmt_double(h.edges[b]) << ',' << fmt_double(h.weights[b]) << '\n';
}

}  // namespace lmgrad
