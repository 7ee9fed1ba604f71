#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "lmgrad/matrix_lm.hpp"

using namespace lmgrad;

namespace {

CountMatrix counts_from(const Matrix& n) {
  CountMatrix c;
  c.counts = n;
  c.rows.resize(static_cast<std::size_t>(n.rows()));
  for (Index i = 0; i < n.rows(); ++i) c.rows[static_cast<std::size_t>(i)] = i;
  c.finalize();
  return c;
}

CountMatrix random_counts(Index c, Index v, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> val(0, 3);
  Matrix n(c, v);
  for (Index i = 0; i < c; ++i) {
    for (Index j = 0; j < v; ++j) n(i, j) = val(rng) == 0 ? 1 + val(rng) : 0;
    if (n.row(i).sum() == 0) n(i, 0) = 1;
  }
  return counts_from(n);
}

// Scalar-loop loss, no Eigen expressions.
double brute_loss(const CountMatrix& c, const Matrix& l) {
  double acc = 0;
  for (Index i = 0; i < l.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < l.cols(); ++j) mx = std::max(mx, l(i, j));
    double z = 0;
    for (Index j = 0; j < l.cols(); ++j) z += std::exp(l(i, j) - mx);
    for (Index j = 0; j < l.cols(); ++j)
      if (c.counts(i, j) > 0) acc += c.counts(i, j) * (l(i, j) - mx - std::log(z));
  }
  return -acc / static_cast<double>(c.total);
}

template <typename Fn>
Matrix finite_difference(Matrix& x, Fn&& f, double h = 1e-6) {
  Matrix g(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i)
    for (Index j = 0; j < x.cols(); ++j) {
      const double keep = x(i, j);
      x(i, j) = keep + h;
      const double up = f();
      x(i, j) = keep - h;
      const double down = f();
      x(i, j) = keep;
      g(i, j) = (up - down) / (2 * h);
    }
  return g;
}

double rel_err(const Matrix& a, const Matrix& b) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), 1e-12});
}

}  // namespace

TEST(Loss, MatchesScalarLoopOracle) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 20; ++t) {
    const CountMatrix c = random_counts(6, 9, rng);
    const ModelParams p = init_params(6, 9, 3, 0, 2.0, 100 + t);
    EXPECT_NEAR(loss(c, p), brute_loss(c, logits(p)), 1e-12);
  }
}

TEST(Loss, ZeroCountsIgnoreVanishingProbabilities) {
  Matrix n(1, 3);
  n << 1, 0, 0;
  const CountMatrix c = counts_from(n);
  Matrix l(1, 3);
  l << 0, -1e4, -1e4;  // P(0) ~ 1, other entries underflow
  EXPECT_NEAR(loss_from_logits(c, l), 0.0, 1e-12);
  EXPECT_TRUE(std::isfinite(loss_from_logits(c, l)));
}

TEST(Loss, UniformLogitsGiveLogV) {
  std::mt19937_64 rng(2);
  const CountMatrix c = random_counts(4, 7, rng);
  EXPECT_NEAR(loss_from_logits(c, Matrix::Zero(4, 7)), std::log(7.0), 1e-13);
}

TEST(Loss, EntropyFloorAndSmoothedTargets) {
  std::mt19937_64 rng(3);
  const CountMatrix c = random_counts(5, 6, rng);
  ModelParams exact;
  exact.hidden = smoothed_targets(c).array().log().matrix();
  exact.head = HeadWeights::full(Matrix::Identity(6, 6));
  EXPECT_NEAR(loss(c, exact), entropy_floor(c), 1e-9);
  const Matrix s = smoothed_targets(c, 0.1);
  EXPECT_NEAR(s.row(0).sum(), 1.0, 1e-14);
  EXPECT_GT(s.minCoeff(), 0.0);
}

TEST(Gradients, LogitGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 10; ++t) {
    const CountMatrix c = random_counts(5, 8, rng);
    Matrix l = init_params(5, 8, 4, 0, 1.5, t).hidden * init_params(8, 8, 4, 0, 1.5, t + 50).hidden.transpose();
    const Matrix g = logit_gradient(c, softmax_rows(l));
    const Matrix fd = finite_difference(l, [&] { return loss_from_logits(c, l); });
    EXPECT_LT(rel_err(g, fd), 1e-5);
  }
}

TEST(Gradients, ParameterGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (Index r : {0, 1, 2}) {
    const CountMatrix c = random_counts(6, 7, rng);
    ModelParams p = init_params(6, 7, 3, r, 1.0, 10 + r);
    const ParamGradients g = param_gradients(c, p);
    EXPECT_LT(rel_err(g.hidden, finite_difference(p.hidden, [&] { return loss(c, p); })), 1e-5);
    if (r == 0) {
      Matrix& w = p.head.as_full().w;
      EXPECT_LT(rel_err(g.w, finite_difference(w, [&] { return loss(c, p); })), 1e-5);
    } else {
      auto& f = p.head.as_factored();
      EXPECT_LT(rel_err(g.a, finite_difference(f.a, [&] { return loss(c, p); })), 1e-5);
      EXPECT_LT(rel_err(g.b, finite_difference(f.b, [&] { return loss(c, p); })), 1e-5);
    }
  }
}

TEST(Gradients, RowsOfLogitGradientSumToZero) {
  std::mt19937_64 rng(6);
  const CountMatrix c = random_counts(5, 6, rng);
  const ModelParams p = init_params(5, 6, 2, 0, 1.0, 1);
  const Matrix g = logit_gradient(c, softmax_rows(logits(p)));
  EXPECT_LT(g.rowwise().sum().cwiseAbs().maxCoeff(), 1e-15);
}

TEST(LogitUpdate, FirstOrderMatchesExactForSmallSteps) {
  std::mt19937_64 rng(7);
  for (Index r : {0, 2}) {
    const CountMatrix c = random_counts(8, 10, rng);
    const ModelParams p = init_params(8, 10, 3, r, 1.0, 3);
    const Matrix delta = first_order_logit_update(c, p);
    double prev = std::numeric_limits<double>::infinity();
    for (double eta : {1e-2, 1e-3, 1e-4}) {
      const double err = (exact_logit_update(c, p, eta) - delta).norm();
      EXPECT_LT(err, prev);
      prev = err;
    }
    EXPECT_LT(prev, 1e-3 * delta.norm());
    EXPECT_LE(qr_rank(delta, 1e-8), 2 * p.head.dim());
  }
}

TEST(LogitUpdate, MasksDropBlocks) {
  std::mt19937_64 rng(8);
  const CountMatrix c = random_counts(6, 9, rng);
  const ModelParams p = init_params(6, 9, 2, 0, 1.0, 4);
  const Matrix both = first_order_logit_update(c, p);
  const Matrix hidden_only = first_order_logit_update(c, p, {true, false});
  const Matrix head_only = first_order_logit_update(c, p, {false, true});
  EXPECT_LT((hidden_only + head_only - both).norm(), 1e-12);
  EXPECT_LE(qr_rank(hidden_only, 1e-10), 2);
  // dH W^T has rows in range(W): annihilated by ker(W^T).
  const OrthonormalBasis k = kernel_basis(p.head.effective());
  EXPECT_LT(project_rows_onto_span(hidden_only, k).norm(), 1e-12);
}

TEST(Top1, TiesGoToLowestTokenId) {
  Matrix n(2, 3);
  n << 1, 3, 3, 2, 0, 1;
  const CountMatrix c = counts_from(n);
  Matrix p(2, 3);
  p << 0.2, 0.4, 0.4, 0.1, 0.8, 0.1;
  const Top1Accuracy acc = top1_accuracy(c, p);
  EXPECT_DOUBLE_EQ(acc.unweighted, 0.5);
  EXPECT_DOUBLE_EQ(acc.weighted, 7.0 / 10.0);
}

TEST(Params, InitShapesScalesAndDeterminism) {
  const ModelParams a = init_params(50, 40, 8, 0, 1.0, 9);
  EXPECT_EQ(a.hidden.rows(), 50);
  EXPECT_EQ(a.head.vocab_size(), 40);
  EXPECT_EQ(a.head.dim(), 8);
  EXPECT_EQ(a.head.inner_rank(), 0);
  const double sd = std::sqrt(a.hidden.array().square().mean());
  EXPECT_NEAR(sd, 1.0 / std::sqrt(8.0), 0.05);
  EXPECT_EQ(init_params(50, 40, 8, 0, 1.0, 9).hidden, a.hidden);
  const ModelParams f = init_params(5, 12, 6, 3, 1.0, 9);
  EXPECT_TRUE(f.head.is_factored());
  EXPECT_EQ(f.head.inner_rank(), 3);
  EXPECT_EQ(f.head.effective().rows(), 12);
  EXPECT_EQ(qr_rank(f.head.effective()), 3);
  EXPECT_THROW(HeadWeights::factored(Matrix::Ones(4, 5), Matrix::Ones(5, 3)), ModelError);
}

TEST(Params, GatherRowsKeepsHead) {
  const ModelParams p = init_params(6, 5, 2, 0, 1.0, 1);
  const ModelParams g = gather_rows(p, {4, 1});
  EXPECT_EQ(g.hidden.row(0), p.hidden.row(4));
  EXPECT_EQ(g.hidden.row(1), p.hidden.row(1));
  EXPECT_EQ(g.head.effective(), p.head.effective());
}

TEST(Schedule, WarmupThenCosineDecay) {
  TrainConfig c;
  c.lr = 1.0;
  c.steps = 110;
  c.warmup_steps = 10;
  c.schedule = ScheduleKind::kCosine;
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 0), 0.1);
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 9), 1.0);
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 10), 1.0);
  EXPECT_NEAR(scheduled_lr(c, 60), 0.5, 1e-12);
  for (std::size_t s = 11; s < 110; ++s) EXPECT_LE(scheduled_lr(c, s), scheduled_lr(c, s - 1));
  c.schedule = ScheduleKind::kConstant;
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 50), 1.0);
}

TEST(Config, ParsingAndValidation) {
  EXPECT_EQ(parse_optimizer("adam"), OptimizerKind::kAdam);
  EXPECT_EQ(parse_optimizer("gd"), OptimizerKind::kGradientDescent);
  EXPECT_EQ(parse_schedule("cosine"), ScheduleKind::kCosine);
  EXPECT_THROW(parse_optimizer("sgd2"), ModelError);
  EXPECT_THROW(parse_schedule("step"), ModelError);
  TrainConfig c;
  c.lr = -1;
  EXPECT_THROW(c.validate(), ModelError);
  c = {};
  c.head_rank = 9;
  EXPECT_THROW(c.validate(), ModelError);
  c = {};
  c.eval_every = 0;
  EXPECT_THROW(c.validate(), ModelError);
}

namespace {

struct Toy {
  Corpus corpus = gen_zipf_bigram(12, 1.2, 24, 10, 3);
  CountTables tables = build_counts(corpus, 2);
  TrainingData data() const {
    TrainingData d;
    d.counts = &tables.counts;
    d.corpus = &corpus;
    d.table = &tables.table;
    d.max_context_len = 2;
    return d;
  }
};

}  // namespace

TEST(Train, ZeroLearningRateKeepsInitialLoss) {
  const Toy toy;
  TrainConfig c;
  c.steps = 20;
  c.lr = 0;
  c.dim = 3;
  c.eval_every = 5;
  const TrainResult r = train(toy.data(), c);
  ASSERT_EQ(r.trajectory.size(), 5u);
  EXPECT_EQ(r.trajectory.front().train_loss, r.trajectory.back().train_loss);
  EXPECT_EQ(r.trajectory.back().step, 20u);
}

TEST(Train, AdamAndGradientDescentReduceLoss) {
  const Toy toy;
  for (OptimizerKind k : {OptimizerKind::kAdam, OptimizerKind::kGradientDescent}) {
    TrainConfig c;
    c.steps = 200;
    c.lr = k == OptimizerKind::kAdam ? 3e-2 : 1.0;
    c.optimizer = k;
    c.dim = 4;
    const TrainResult r = train(toy.data(), c);
    EXPECT_LT(r.trajectory.back().train_loss, r.trajectory.front().train_loss - 0.3);
    EXPECT_GE(r.trajectory.back().train_loss, entropy_floor(toy.tables.counts) - 1e-12);
  }
}

TEST(Train, DeterministicAcrossRuns) {
  const Toy toy;
  TrainConfig c;
  c.steps = 50;
  c.batch_sequences = 5;
  c.dim = 3;
  c.eval_every = 10;
  const TrainResult a = train(toy.data(), c);
  const TrainResult b = train(toy.data(), c);
  std::ostringstream sa, sb;
  write_trajectory_csv(sa, a.trajectory);
  write_trajectory_csv(sb, b.trajectory);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_EQ(a.params.hidden, b.params.hidden);
}

TEST(Train, WholeCorpusBatchEqualsFullBatch) {
  const Toy toy;
  TrainConfig c;
  c.steps = 30;
  c.dim = 3;
  const TrainResult full = train(toy.data(), c);
  c.batch_sequences = toy.corpus.sequences.size();
  const TrainResult batched = train(toy.data(), c);
  EXPECT_EQ(full.params.hidden, batched.params.hidden);
  EXPECT_EQ(full.params.head.effective(), batched.params.head.effective());
}

TEST(Train, MiniBatchOnlyTouchesPresentRows) {
  const Toy toy;
  TrainConfig c;
  c.steps = 1;
  c.batch_sequences = 1;
  c.dim = 3;
  c.update.head = false;
  const ModelParams init = init_params(toy.tables.counts.num_contexts(), 12, 3, 0, 1.0, c.seed);
  const TrainResult r = train(toy.data(), c, init);
  Index changed = 0;
  for (Index i = 0; i < init.hidden.rows(); ++i)
    if (r.params.hidden.row(i) != init.hidden.row(i)) ++changed;
  EXPECT_GT(changed, 0);
  EXPECT_LE(changed, 10);  // one sequence of 10 tokens
  EXPECT_EQ(r.params.head.effective(), init.head.effective());
}

TEST(Train, DivergenceRaisesNumericError) {
  const Toy toy;
  TrainConfig c;
  c.steps = 200;
  c.lr = 1e200;
  c.optimizer = OptimizerKind::kGradientDescent;
  c.dim = 3;
  EXPECT_THROW(train(toy.data(), c), NumericError);
}

TEST(Train, HookRecordsCheckpointsAndValidation) {
  const Toy toy;
  const CountMatrix val = counts_on_table(gen_zipf_bigram(12, 1.2, 6, 10, 3), toy.tables.table, 2);
  TrainingData d = toy.data();
  d.validation = &val;
  TrainConfig c;
  c.steps = 20;
  c.eval_every = 10;
  c.dim = 3;
  std::vector<std::size_t> seen;
  const TrainResult r = train(d, c, std::nullopt, [&](std::size_t step, const ModelParams&) {
    seen.push_back(step);
    return std::optional<std::string>("ckpt" + std::to_string(step));
  });
  EXPECT_EQ(seen, (std::vector<std::size_t>{0, 10, 20}));
  EXPECT_EQ(*r.trajectory[1].checkpoint, "ckpt10");
  EXPECT_TRUE(r.trajectory.back().val_loss.has_value());
  std::ostringstream out;
  write_trajectory_csv(out, r.trajectory);
  EXPECT_EQ(out.str().rfind("step,train_loss,val_loss,top1_acc\n", 0), 0u);
}

TEST(Train, RejectsMismatchedInit) {
  const Toy toy;
  TrainConfig c;
  c.dim = 3;
  EXPECT_THROW(train(toy.data(), c, init_params(2, 12, 3, 0, 1.0, 0)), ModelError);
}
