#include "lmgrad/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "lmgrad/format.hpp"

namespace lmgrad {

void VerificationResult::add(InstanceRecord rec) {
  rec.id = details.size();
  if (instances == 0 || rec.margin < worst_margin) worst_margin = rec.margin;
  ++instances;
  if (rec.violated) ++violations;
  details.push_back(std::move(rec));
}

void write_instances_csv(std::ostream& out, const VerificationResult& result) {
  out << "instance,violated,margin";
  // Records of one verifier share their field names; take the widest set.
  const InstanceRecord* widest = nullptr;
  for (const auto& r : result.details)
    if (!widest || r.fields.size() > widest->fields.size()) widest = &r;
  if (widest)
    for (const auto& [k, v] : widest->fields) out << ',' << k;
  out << '\n';
  for (const auto& r : result.details) {
    out << r.id << ',' << (r.violated ? 1 : 0) << ',' << fmt_double(r.margin);
    if (widest)
      for (const auto& [k, v] : widest->fields) {
        out << ',';
        auto it = std::find_if(r.fields.begin(), r.fields.end(), [&](const auto& f) { return f.first == k; });
        if (it != r.fields.end()) out << fmt_double(it->second);
      }
    out << '\n';
  }
}

namespace {

Index uniform_index(Index lo, Index hi, std::mt19937_64& rng) {
  return std::uniform_int_distribution<Index>(lo, hi)(rng);
}

double uniform_real(double lo, double hi, std::mt19937_64& rng) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Matrix gaussian(Index rows, Index cols, double sd, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, sd);
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

CountMatrix from_counts(Matrix n) {
  CountMatrix cm;
  cm.counts = std::move(n);
  cm.rows.resize(static_cast<std::size_t>(cm.counts.rows()));
  std::iota(cm.rows.begin(), cm.rows.end(), Index{0});
  cm.finalize();
  return cm;
}

}  // namespace

CountMatrix random_counts(Index contexts, Index vocab, int max_count, std::mt19937_64& rng) {
  Matrix n = Matrix::Zero(contexts, vocab);
  std::bernoulli_distribution keep(0.5);
  std::uniform_int_distribution<int> value(1, std::max(1, max_count));
  for (Index i = 0; i < contexts; ++i) {
    for (Index j = 0; j < vocab; ++j)
      if (keep(rng)) n(i, j) = value(rng);
    if (n.row(i).sum() == 0) n(i, uniform_index(0, vocab - 1, rng)) = value(rng);
  }
  return from_counts(std::move(n));
}

CountMatrix planted_counts(Index contexts, Index vocab, Index unique_tokens, std::mt19937_64& rng) {
  if (vocab < 2) throw std::invalid_argument("planted_counts: vocab must be >= 2");
  if (unique_tokens < 0 || unique_tokens > std::min(contexts, vocab))
    throw std::invalid_argument("planted_counts: unique_tokens must lie in [0, min(C, V)]");
  std::vector<Index> tokens(static_cast<std::size_t>(vocab));
  std::iota(tokens.begin(), tokens.end(), Index{0});
  std::shuffle(tokens.begin(), tokens.end(), rng);

  std::uniform_int_distribution<int> value(1, 4);
  Matrix n = Matrix::Zero(contexts, vocab);
  for (Index i = 0; i < unique_tokens; ++i) n(i, tokens[static_cast<std::size_t>(i)]) = value(rng);
  std::bernoulli_distribution repeat_unique(unique_tokens > 0 ? 0.3 : 0.0);
  for (Index i = unique_tokens; i < contexts; ++i) {
    if (repeat_unique(rng)) {
      n(i, tokens[static_cast<std::size_t>(uniform_index(0, unique_tokens - 1, rng))]) = value(rng);
      continue;
    }
    // At least two observed continuations.
    const Index support = uniform_index(2, std::min<Index>(vocab, 6), rng);
    std::vector<Index> pick(tokens);
    std::shuffle(pick.begin(), pick.end(), rng);
    for (Index s = 0; s < support; ++s) n(i, pick[static_cast<std::size_t>(s)]) = value(rng);
  }
  // Shuffle context order.
  std::vector<Index> order(static_cast<std::size_t>(contexts));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);
  Matrix shuffled(contexts, vocab);
  for (Index i = 0; i < contexts; ++i) shuffled.row(i) = n.row(order[static_cast<std::size_t>(i)]);
  return from_counts(std::move(shuffled));
}

Matrix random_interior_probs(Index rows, Index cols, double logit_scale, std::mt19937_64& rng) {
  return softmax_rows(gaussian(rows, cols, logit_scale, rng));
}

Index svd_rank(const Matrix& m, double tol) {
  const Vector sv = singular_values(m);
  if (sv.size() == 0) return 0;
  const double threshold = tol * std::max(1.0, sv(0));
  return static_cast<Index>((sv.array() > threshold).count());
}

// ---------------------------------------------------------------------------

VerificationResult verify_gibbs(std::size_t trials, const GibbsDims& dims, std::uint64_t seed) {
  VerificationResult res;
  res.proposition = "gibbs";
  res.seed = seed;
  std::mt19937_64 rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    const Index c = uniform_index(1, dims.max_contexts, rng);
    const Index v = uniform_index(2, dims.max_vocab, rng);
    const Index d = uniform_index(1, dims.max_dim, rng);
    const CountMatrix counts = random_counts(c, v, 5, rng);
    const double scale = uniform_real(0.1, 3.0, rng);
    ModelParams params;
    params.hidden = gaussian(c, d, scale, rng);
    params.head = HeadWeights::full(gaussian(v, d, scale, rng));

    const double floor = entropy_floor(counts);
    const double l = loss(counts, params);

    // Equality branch: logits log Ñ_smoothed realized with D = V, W = I.
    ModelParams exact;
    exact.hidden = smoothed_targets(counts).array().log().matrix();
    exact.head = HeadWeights::full(Matrix::Identity(v, v));
    const double eq_gap = std::abs(loss(counts, exact) - floor);

    InstanceRecord rec;
    rec.margin = l - floor;
    rec.violated = rec.margin < -1e-10 || !(eq_gap < 1e-8);
    rec.fields = {{"contexts", double(c)}, {"vocab", double(v)},  {"dim", double(d)},
                  {"loss", l},            {"floor", floor},       {"equality_gap", eq_gap}};
    res.add(std::move(rec));
  }
  return res;
}

VerificationResult verify_rank_bounds(std::size_t trials, const RankBoundDims& dims, std::uint64_t seed, double tol) {
  VerificationResult res;
  res.proposition = "rank_bounds";
  res.seed = seed;
  std::mt19937_64 rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    const Index d = uniform_index(1, dims.max_dim, rng);
    const Index v = uniform_index(d + 3, std::max(d + 3, dims.max_vocab), rng);
    const Index c = uniform_index(1, dims.max_contexts, rng);
    const double scale = uniform_real(0.1, 3.0, rng);
    const Matrix h = gaussian(c, d, scale, rng);
    const Matrix w = gaussian(v, d, scale, rng);
    const Matrix l = h * w.transpose();
    const Index logit_rank = qr_rank(l, tol);
    const Index logprob_rank = qr_rank(log_softmax_rows(l), tol);

    InstanceRecord rec;
    rec.margin = static_cast<double>(std::min(d - logit_rank, d + 1 - logprob_rank));
    rec.violated = rec.margin < 0;
    rec.fields = {{"contexts", double(c)},          {"vocab", double(v)},
                  {"dim", double(d)},               {"logit_rank", double(logit_rank)},
                  {"logprob_rank", double(logprob_rank)}};
    res.add(std::move(rec));
  }
  return res;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<Index> argmax_rows(const Matrix& m) {
  std::vector<Index> best(static_cast<std::size_t>(m.rows()), 0);
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 1; j < m.cols(); ++j)
      if (m(i, j) > m(i, best[static_cast<std::size_t>(i)])) best[static_cast<std::size_t>(i)] = j;
  return best;
}

/// Solves p(α) ≈ target for p(α) = 1 / Σ_j exp(α (cos_j - 1)).
struct AlphaSearch {
  const Vector& cosines;  // W_k · W_j for all j
  double eps;
  bool fallback = false;

  double prob(double alpha) const { return 1.0 / (alpha * (cosines.array() - 1.0)).exp().sum(); }

  double solve(double target) {
    const double v = static_cast<double>(cosines.size());
    if (target < 1.0 / v - 1e-12) throw std::logic_error("construct_top1: target probability below 1/V");
    const double goal = eps / 4;
    if (std::abs(prob(0) - target) < goal) return 0.0;

    double lo = 0.0, hi = 1.0;
    double p_lo = prob(lo), p_hi = prob(hi);
    while (p_hi < target - goal && hi < 1e15) {
      if (p_hi < p_lo) return grid(target);
      lo = hi;
      p_lo = p_hi;
      hi *= 2;
      p_hi = prob(hi);
    }
    if (std::abs(p_hi - target) < goal) return hi;
    for (int it = 0; it < 400; ++it) {
      const double mid = 0.5 * (lo + hi);
      const double pm = prob(mid);
      if (std::abs(pm - target) < goal) return mid;
      if (pm < p_lo - 1e-15 || pm > p_hi + 1e-15) return grid(target);
      if (pm < target) {
        lo = mid;
        p_lo = pm;
      } else {
        hi = mid;
        p_hi = pm;
      }
    }
    return grid(target);
  }

  /// Log-spaced scan used when monotonicity is violated numerically.
  double grid(double target) {
    fallback = true;
    double best = 0.0, best_err = std::abs(prob(0) - target);
    for (int i = 0; i <= 20000; ++i) {
      const double a = std::pow(10.0, -6.0 + 21.0 * i / 20000.0);
      const double err = std::abs(prob(a) - target);
      if (err < best_err) {
        best_err = err;
        best = a;
      }
    }
    return best;
  }
};

}  // namespace

Top1Construction construct_top1(const CountMatrix& target, double epsilon) {
  if (!(epsilon > 0)) throw std::invalid_argument("construct_top1: epsilon must be positive");
  const Index v = target.vocab_size();
  const Index c = target.num_contexts();
  if (v < 2) throw std::invalid_argument("construct_top1: vocabulary must have at least 2 tokens");

  Matrix w(v, 2);
  for (Index k = 0; k < v; ++k) {
    const double angle = 2.0 * M_PI * static_cast<double>(k) / static_cast<double>(v);
    w(k, 0) = std::cos(angle);
    w(k, 1) = std::sin(angle);
  }
  const auto top = argmax_rows(target.normalized);

  Top1Construction out;
  out.params.hidden.resize(c, 2);
  out.alphas.resize(static_cast<std::size_t>(c));
  for (Index i = 0; i < c; ++i) {
    const Index k = top[static_cast<std::size_t>(i)];
    const Vector cosines = w * w.row(k).transpose();
    AlphaSearch search{cosines, epsilon};
    const double alpha = search.solve(target.normalized(i, k));
    out.used_grid_fallback = out.used_grid_fallback || search.fallback;
    out.alphas[static_cast<std::size_t>(i)] = alpha;
    out.params.hidden.row(i) = alpha * w.row(k);
  }
  out.params.head = HeadWeights::full(std::move(w));

  const Matrix p = softmax_rows(logits(out.params));
  out.errors.resize(static_cast<std::size_t>(c));
  for (Index i = 0; i < c; ++i) {
    const Index k = top[static_cast<std::size_t>(i)];
    out.errors[static_cast<std::size_t>(i)] = std::abs(p(i, k) - target.normalized(i, k));
    out.max_error = std::max(out.max_error, out.errors[static_cast<std::size_t>(i)]);
  }
  return out;
}

VerificationResult verify_top1(std::size_t trials, const Top1Dims& dims, double epsilon, std::uint64_t seed) {
  VerificationResult res;
  res.proposition = "top1_construction";
  res.seed = seed;
  std::mt19937_64 rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    const Index c = uniform_index(1, dims.max_contexts, rng);
    const Index v = uniform_index(2, dims.max_vocab, rng);
    Matrix n = random_counts(c, v, 6, rng).counts;
    // Mix in one-hot, uniform and sharply peaked rows.
    for (Index i = 0; i < c; ++i) {
      const int kind = static_cast<int>(uniform_index(0, 3, rng));
      const Index k = uniform_index(0, v - 1, rng);
      if (kind == 1) {
        n.row(i).setZero();
        n(i, k) = 1;
      } else if (kind == 2) {
        n.row(i).setOnes();
      } else if (kind == 3) {
        n(i, k) += 50;
      }
    }
    const CountMatrix counts = from_counts(std::move(n));
    const Top1Construction built = construct_top1(counts, epsilon);
    const Index head_rank = qr_rank(built.params.head.effective());

    InstanceRecord rec;
    rec.margin = epsilon - built.max_error;
    rec.violated = !(built.max_error < epsilon) || head_rank > 2;
    rec.fields = {{"contexts", double(c)},
                  {"vocab", double(v)},
                  {"max_error", built.max_error},
                  {"head_rank", double(head_rank)},
                  {"max_alpha", *std::max_element(built.alphas.begin(), built.alphas.end())},
                  {"grid_fallback", built.used_grid_fallback ? 1.0 : 0.0}};
    res.add(std::move(rec));
  }
  return res;
}

// ---------------------------------------------------------------------------

namespace {

/// Smallest singular value of the |C^uu| x |C^uu| block of (P - Ñ) with one
/// one-hot context per unique token and that token's column. For the
/// Laplacian case (|C^uu| = V) the second smallest is returned.
double unique_block_sigma(const Matrix& diff, const CountMatrix& counts) {
  std::vector<Index> rows, cols;
  std::vector<bool> seen(static_cast<std::size_t>(counts.vocab_size()), false);
  for (const auto& [row, tok] : one_hot_rows(counts)) {
    if (seen[tok]) continue;
    seen[tok] = true;
    rows.push_back(row);
    cols.push_back(static_cast<Index>(tok));
  }
  const auto k = static_cast<Index>(rows.size());
  if (k == 0) return 0.0;
  Matrix block(k, k);
  for (Index a = 0; a < k; ++a)
    for (Index b = 0; b < k; ++b) block(a, b) = diff(rows[static_cast<std::size_t>(a)], cols[static_cast<std::size_t>(b)]);
  const Vector sv = singular_values(block);
  if (k == counts.vocab_size()) return k >= 2 ? sv(k - 2) : 0.0;
  return sv(k - 1);
}

Index distinct_unique_tokens(const CountMatrix& counts) {
  std::vector<bool> seen(static_cast<std::size_t>(counts.vocab_size()), false);
  Index n = 0;
  for (const auto& [row, tok] : one_hot_rows(counts))
    if (!seen[tok]) {
      seen[tok] = true;
      ++n;
    }
  return n;
}

}  // namespace

VerificationResult verify_rank_lower_bound(std::size_t instances, const LowerBoundDims& dims, std::uint64_t seed,
                                           double tol) {
  VerificationResult res;
  res.proposition = "rank_lower_bound";
  res.seed = seed;
  std::mt19937_64 rng(seed);
  for (std::size_t t = 0; t < instances; ++t) {
    const Index v = uniform_index(2, dims.max_vocab, rng);
    const Index k = uniform_index(1, v, rng);
    const Index c = uniform_index(k, std::max(k, dims.max_contexts), rng);
    const CountMatrix counts = planted_counts(c, v, k, rng);
    const Matrix p = random_interior_probs(c, v, uniform_real(0.5, 2.0, rng), rng);
    const Matrix diff = p - counts.normalized;

    const Index unique = distinct_unique_tokens(counts);
    const Index bound = std::min(unique, v - 1);
    const Index rank = qr_rank(diff, tol);
    const Index oracle = svd_rank(diff, tol);
    const double sigma = unique_block_sigma(diff, counts);

    InstanceRecord rec;
    rec.margin = static_cast<double>(std::min(rank, oracle) - bound);
    rec.violated = rank < bound || oracle < bound || (bound > 0 && !(sigma > 1e-12));
    rec.fields = {{"contexts", double(c)},      {"vocab", double(v)},        {"unique_tokens", double(unique)},
                  {"bound", double(bound)},     {"qr_rank", double(rank)},   {"svd_rank", double(oracle)},
                  {"block_sigma_min", sigma}};
    res.add(std::move(rec));
  }
  return res;
}

// ---------------------------------------------------------------------------

namespace {

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), std::size_t{0}); }
  std::size_t find(std::size_t x) {
    while (parent_[x] != x) x = parent_[x] = parent_[parent_[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent_[std::max(a, b)] = std::min(a, b);
  }

 private:
  std::vector<std::size_t> parent_;
};

}  // namespace

BatchUniqueSet batch_unique_contexts(const CountMatrix& full, const CountMatrix& batch) {
  std::vector<std::pair<Index, Token>> cand;
  std::vector<bool> token_taken(static_cast<std::size_t>(full.vocab_size()), false);
  for (Index i = 0; i < batch.counts.rows(); ++i) {
    Index nz = 0, at = -1;
    for (Index j = 0; j < batch.counts.cols(); ++j)
      if (batch.counts(i, j) > 0) {
        ++nz;
        at = j;
      }
    if (nz != 1) continue;
    const Index row = batch.rows[static_cast<std::size_t>(i)];
    if ((full.counts.row(row).array() > 0).count() < 2) continue;
    if (token_taken[static_cast<std::size_t>(at)]) continue;
    token_taken[static_cast<std::size_t>(at)] = true;
    cand.emplace_back(row, static_cast<Token>(at));
  }

  BatchUniqueSet out;
  out.candidates = cand.size();
  if (cand.empty()) return out;
  DisjointSets sets(cand.size());
  for (std::size_t a = 0; a < cand.size(); ++a)
    for (std::size_t b = a + 1; b < cand.size(); ++b)
      if (full.normalized(cand[a].first, cand[b].second) > 0 || full.normalized(cand[b].first, cand[a].second) > 0)
        sets.unite(a, b);
  std::vector<std::size_t> size(cand.size(), 0);
  for (std::size_t a = 0; a < cand.size(); ++a) ++size[sets.find(a)];
  std::size_t best = 0;
  for (std::size_t a = 0; a < cand.size(); ++a) {
    if (size[a] > 0) ++out.components;
    if (size[a] > size[best]) best = a;
  }
  for (std::size_t a = 0; a < cand.size(); ++a)
    if (sets.find(a) == best) out.contexts.push_back(cand[a]);
  return out;
}

InstanceRecord check_sgd_rank(const Corpus& corpus, const SgdRankConfig& config, std::uint64_t seed, bool* skipped) {
  const CountTables tables = build_counts(corpus, config.max_context_len);
  const std::size_t s = corpus.sequences.size();
  const std::size_t nb =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(config.batch_fraction * double(s))), 1, s);
  std::vector<std::size_t> order(s);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> batch(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(nb));
  std::sort(batch.begin(), batch.end());

  const CountMatrix bc = batch_counts(corpus, tables.table, batch, config.max_context_len);
  const BatchUniqueSet set = batch_unique_contexts(tables.counts, bc);
  const Index v = tables.counts.vocab_size();
  const Index bound = std::min(static_cast<Index>(set.contexts.size()), v - 1);
  if (skipped) *skipped = set.candidates == 0;

  Matrix full_rows(bc.counts.rows(), v);
  for (Index i = 0; i < bc.counts.rows(); ++i)
    full_rows.row(i) = tables.counts.normalized.row(bc.rows[static_cast<std::size_t>(i)]);

  auto rank_at = [&](double delta, Index* oracle, double* inf_err) {
    const Matrix p = ((1.0 - delta) * full_rows.array() + delta / double(v)).matrix();
    const Matrix diff = p - bc.normalized;
    if (oracle) *oracle = svd_rank(diff, config.tol);
    if (inf_err) {
      *inf_err = 0;
      for (const auto& [row, tok] : set.contexts) {
        const Vector pc = (1.0 - delta) * tables.counts.normalized.row(row).transpose().array() + delta / double(v);
        *inf_err = std::max(*inf_err, (pc - tables.counts.normalized.row(row).transpose()).cwiseAbs().maxCoeff());
      }
    }
    return qr_rank(diff, config.tol);
  };

  double largest_ok = 0;
  for (double delta : config.delta_grid)
    if (rank_at(delta, nullptr, nullptr) >= bound) largest_ok = std::max(largest_ok, delta);

  Index oracle = 0;
  double inf_err = 0;
  const Index rank = rank_at(config.check_delta, &oracle, &inf_err);

  InstanceRecord rec;
  rec.margin = static_cast<double>(std::min(rank, oracle) - bound);
  rec.violated = rank < bound || oracle < bound;
  rec.fields = {{"contexts", double(tables.counts.num_contexts())},
                {"batch_contexts", double(bc.num_contexts())},
                {"candidates", double(set.candidates)},
                {"components", double(set.components)},
                {"unique_set", double(set.contexts.size())},
                {"bound", double(bound)},
                {"qr_rank", double(rank)},
                {"svd_rank", double(oracle)},
                {"inf_error", inf_err},
                {"largest_ok_delta", largest_ok}};
  return rec;
}

VerificationResult verify_sgd_rank(std::size_t corpora, const SgdCorpusSpec& spec, const SgdRankConfig& config,
                                   std::uint64_t seed) {
  VerificationResult res;
  res.proposition = "sgd_rank";
  res.seed = seed;
  std::mt19937_64 seeds(seed);
  for (std::size_t i = 0; i < corpora; ++i) {
    const std::uint64_t corpus_seed = seeds();
    const std::uint64_t batch_seed = seeds();
    const Corpus corpus = gen_zipf_bigram(spec.vocab_size, spec.exponent, spec.num_seqs, spec.seq_len, corpus_seed);
    bool skipped = false;
    InstanceRecord rec = check_sgd_rank(corpus, config, batch_seed, &skipped);
    if (skipped) {
      ++res.skipped;
      continue;
    }
    res.add(std::move(rec));
  }
  return res;
}

// ---------------------------------------------------------------------------

VerificationResult verify_update_residual(std::size_t instances, const ResidualDims& dims, std::uint64_t seed,
                                          double tol) {
  VerificationResult res;
  res.proposition = "update_residual";
  res.seed = seed;
  std::mt19937_64 rng(seed);
  for (std::size_t t = 0; t < instances; ++t) {
    const Index d = uniform_index(1, dims.max_dim, rng);
    const Index v = uniform_index(2 * d + 2, std::max(2 * d + 2, dims.max_vocab), rng);
    const Index k = uniform_index(2 * d + 1, v, rng);
    const Index c = uniform_index(k, std::max(k, dims.max_contexts), rng);
    const CountMatrix counts = planted_counts(c, v, k, rng);
    const Index unique_bound = std::min(distinct_unique_tokens(counts), v - 1);
    if (unique_bound <= 2 * d) {
      ++res.skipped;
      continue;
    }
    const double scale = uniform_real(0.3, 2.0, rng);
    ModelParams params;
    params.hidden = gaussian(c, d, scale, rng);
    params.head = HeadWeights::full(gaussian(v, d, scale, rng));

    const Matrix delta = first_order_logit_update(counts, params);
    const Index delta_rank = qr_rank(delta, tol);
    const Matrix p = softmax_rows(logits(params));
    const Matrix r_plain = p - counts.normalized;
    const Matrix r_weighted = logit_gradient(counts, p);

    double margin = std::numeric_limits<double>::infinity();
    bool strict = true;
    std::vector<std::pair<std::string, double>> fields = {
        {"contexts", double(c)}, {"vocab", double(v)}, {"dim", double(d)}, {"unique_bound", double(unique_bound)},
        {"delta_rank", double(delta_rank)}};
    const std::pair<const char*, const Matrix*> conventions[] = {{"plain", &r_plain}, {"weighted", &r_weighted}};
    for (const auto& [name, r] : conventions) {
      const double tail = best_rank_k_residual(*r, 2 * d);
      const double resid = (delta - *r).norm();
      const double resid_descent = (delta + *r).norm();  // -Δ against R
      strict = strict && resid > tail && resid_descent > tail && tail > 0;
      margin = std::min({margin, resid - tail, resid_descent - tail});
      fields.emplace_back(std::string("tail_") + name, tail);
      fields.emplace_back(std::string("residual_") + name, resid);
      fields.emplace_back(std::string("residual_descent_") + name, resid_descent);
    }

    InstanceRecord rec;
    rec.margin = margin;
    rec.violated = !strict || delta_rank > 2 * d;
    rec.fields = std::move(fields);
    res.add(std::move(rec));
  }
  return res;
}

}  // namespace lmgrad
