#include <gtest/gtest.h>

#include <Eigen/QR>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "lmgrad/diagnostics.hpp"

using namespace lmgrad;

namespace {

Matrix gaussian(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = n(rng);
  return m;
}

Index svd_oracle_rank(const Matrix& m, double tol) {
  const Vector sv = Eigen::JacobiSVD<Matrix>(m).singularValues();
  return static_cast<Index>((sv.array() > tol).count());
}

struct Trained {
  Corpus corpus = gen_zipf_bigram(24, 1.2, 40, 12, 5);
  CountTables tables = build_counts(corpus, 1);
  ModelParams params;
  Trained() {
    TrainingData d;
    d.counts = &tables.counts;
    TrainConfig c;
    c.steps = 150;
    c.lr = 3e-2;
    c.dim = 4;
    params = train(d, c).params;
  }
};

}  // namespace

TEST(PerToken, RowsArePredictionMinusOneHot) {
  Matrix p(2, 3);
  p << 0.2, 0.3, 0.5, 0.6, 0.1, 0.3;
  const std::vector<TokenEvent> ev = {{1, 0}, {0, 2}, {1, 0}};
  const Matrix g = per_token_gradients(ev, p);
  Matrix expected(3, 3);
  expected << -0.4, 0.1, 0.3, 0.2, 0.3, -0.5, -0.4, 0.1, 0.3;
  EXPECT_LT((g - expected).norm(), 1e-15);
}

TEST(RankCurve, BoundedMonotoneAndMatchesSvdOracle) {
  const Trained t;
  const Matrix probs = softmax_rows(logits(t.params));
  const std::vector<std::size_t> sizes = {1, 2, 4, 8, 16, 32, 64, 128, 256};
  const RankCurve curve = gradient_rank_curve(t.tables.events, probs, sizes, 11);
  ASSERT_EQ(curve.size(), sizes.size());
  for (std::size_t i = 0; i < curve.size(); ++i) {
    EXPECT_EQ(curve[i].token_count, sizes[i]);
    EXPECT_EQ(curve[i].max_rank, std::min<Index>(Index(sizes[i]), 24));
    EXPECT_LE(curve[i].rank, curve[i].max_rank);
    if (i > 0) {
      EXPECT_GE(curve[i].rank, curve[i - 1].rank);
    }
  }
  EXPECT_EQ(curve.front().rank, 1);
  // Same permutation, same rows: rebuild the largest prefix and rank it by SVD.
  std::vector<std::size_t> order(t.tables.events.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(11);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<TokenEvent> picked;
  for (std::size_t k = 0; k < 256; ++k) picked.push_back(t.tables.events[order[k]]);
  EXPECT_EQ(curve.back().rank, svd_oracle_rank(per_token_gradients(picked, probs), 1e-6));
  // Seeded: identical on re-run.
  const RankCurve again = gradient_rank_curve(t.tables.events, probs, sizes, 11);
  for (std::size_t i = 0; i < curve.size(); ++i) EXPECT_EQ(again[i].rank, curve[i].rank);
}

TEST(RankCurve, RejectsBadSizes) {
  const Trained t;
  const Matrix probs = softmax_rows(logits(t.params));
  const std::vector<std::size_t> zero = {0}, unsorted = {4, 2}, too_big = {1u << 30};
  EXPECT_THROW(gradient_rank_curve(t.tables.events, probs, zero, 0), DiagnosticsError);
  EXPECT_THROW(gradient_rank_curve(t.tables.events, probs, unsorted, 0), DiagnosticsError);
  EXPECT_THROW(gradient_rank_curve(t.tables.events, probs, too_big, 0), DiagnosticsError);
}

TEST(LostFraction, TrivialCases) {
  std::mt19937_64 rng(1);
  const Matrix g = gaussian(5, 8, rng);
  // Square orthogonal head: nothing is lost.
  const Matrix q = Eigen::HouseholderQR<Matrix>(gaussian(8, 8, rng)).householderQ();
  EXPECT_NEAR(lost_norm_fraction(g, HeadWeights::full(q)).value, 0.0, 1e-7);
  // Gradient inside range(W): nothing lost. Inside ker(W^T): everything lost.
  const Matrix w = gaussian(8, 3, rng);
  const auto split = range_kernel_split(w);
  EXPECT_NEAR(lost_norm_fraction(project_rows_onto_span(g, split.range), HeadWeights::full(w)).value, 0.0, 1e-7);
  EXPECT_NEAR(lost_norm_fraction(project_rows_onto_span(g, split.kernel), HeadWeights::full(w)).value, 1.0, 1e-12);
  const LostFraction z = lost_norm_fraction(Matrix::Zero(2, 8), HeadWeights::full(w));
  EXPECT_TRUE(z.zero_gradient);
  EXPECT_EQ(z.value, 0.0);
  EXPECT_THROW(lost_norm_fraction(Matrix::Ones(2, 7), HeadWeights::full(w)), DiagnosticsError);
}

TEST(LostFraction, IsotropicGradientsLoseSqrtOneMinusDOverV) {
  std::mt19937_64 rng(2);
  const Index v = 256, d = 16;
  double lost = 0, cos = 0;
  for (int t = 0; t < 5; ++t) {
    const Matrix w = gaussian(v, d, rng);
    const Matrix g = gaussian(64, v, rng);
    lost += lost_norm_fraction(g, HeadWeights::full(w)).value / 5;
    cos += kernel_cosine(g, HeadWeights::full(w)).mean / 5;
  }
  EXPECT_NEAR(lost, std::sqrt(1.0 - double(d) / double(v)), 0.01);
  EXPECT_NEAR(cos, std::sqrt(double(d) / double(v)), 0.02);
}

TEST(Compression, TwoRoutesAgree) {
  const Trained t;
  const Matrix g = logit_gradient(t.tables.counts, softmax_rows(logits(t.params)));
  const CompressionReport r = compression_report(g, t.params.head);
  EXPECT_NEAR(r.lost_fraction * r.lost_fraction + r.retained_fraction * r.retained_fraction, 1.0, 1e-10);
  EXPECT_NEAR(r.lost_fraction, lost_norm_fraction(g, t.params.head).value, 1e-12);
  EXPECT_NEAR(r.eckart_young_gap, best_rank_k_residual(g, 8), 1e-12);
  EXPECT_EQ(r.per_row_lost.size(), size_t(g.rows()));
  for (double x : r.per_row_lost) {
    EXPECT_GE(x, 0.0);
    EXPECT_LE(x, 1.0 + 1e-12);
  }
  EXPECT_GT(r.cosine_mean, 0.0);
  EXPECT_LE(r.cosine_mean, 1.0);
}

TEST(KernelCosine, SkipsZeroRowsAndRejectsAllZero) {
  std::mt19937_64 rng(3);
  const Matrix w = gaussian(6, 2, rng);
  Matrix g = gaussian(3, 6, rng);
  g.row(1).setZero();
  const KernelCosine c = kernel_cosine(g, HeadWeights::full(w));
  EXPECT_EQ(c.rows_used, 2);
  EXPECT_EQ(c.zero_rows, 1);
  EXPECT_THROW(kernel_cosine(Matrix::Zero(2, 6), HeadWeights::full(w)), DiagnosticsError);
}

TEST(Profile, SortsFlipsAndAverages) {
  Matrix full(2, 3), proj(2, 3);
  full << 1, -3, 2, 3, -1, 0;
  proj << 10, 20, 30, 40, 50, 60;
  const CoefficientProfile p = coefficient_profile(full, proj);
  // Row 0 ordered (-3, 2, 1), no flip. Row 1 ordered (3, -1, 0), flipped.
  EXPECT_EQ(p.full_mean, (std::vector<double>{-3, 1.5, 0.5}));
  EXPECT_EQ(p.full_std, (std::vector<double>{0, 0.5, 0.5}));
  // Projection follows the same order and sign: row 0 (20, 30, 10), row 1 (-40, -50, -60).
  EXPECT_EQ(p.proj_mean, (std::vector<double>{-10, -10, -25}));
  EXPECT_THROW(coefficient_profile(full, Matrix::Zero(3, 3)), DiagnosticsError);
}

TEST(Efficiency, LogitDirectionWinsAtSmallSteps) {
  const Trained t;
  const std::vector<double> fractions = {0.0, 1e-5, 1e-4};
  const EfficiencyCurve e = update_efficiency(t.tables.counts, t.params, fractions);
  EXPECT_EQ(e.loss_delta_logit_dir[0], 0.0);
  for (std::size_t i = 1; i < fractions.size(); ++i) {
    EXPECT_LT(e.loss_delta_logit_dir[i], 0.0);
    EXPECT_LT(e.loss_delta_hidden_dir[i], 0.0);
    EXPECT_LE(e.loss_delta_logit_dir[i], e.loss_delta_hidden_dir[i]);
  }
  const std::vector<double> bad = {1.5};
  EXPECT_THROW(update_efficiency(t.tables.counts, t.params, bad), DiagnosticsError);
}

TEST(Csv, HeadersAreStable) {
  std::ostringstream a, b, c, d;
  write_rank_curve_csv(a, {{4, 3, 4}});
  write_efficiency_csv(b, {{0.1}, {-0.2}, {-0.1}});
  write_profile_csv(c, {{1}, {0}, {1}, {0}});
  write_compression_csv(d, {});
  EXPECT_EQ(a.str(), "token_count,rank,max_rank\n4,3,4\n");
  EXPECT_EQ(b.str(), "alpha,delta_logit,delta_hidden\n0.1,-0.2,-0.1\n");
  EXPECT_EQ(c.str(), "position,full_mean,full_std,proj_mean,proj_std\n1,1,0,1,0\n");
  EXPECT_EQ(d.str().rfind("metric,value\nlost_fraction,0\n", 0), 0u);
}
