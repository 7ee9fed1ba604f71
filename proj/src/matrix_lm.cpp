#include "lmgrad/matrix_lm.hpp"

#include <cmath>
#include <numeric>
#include <ostream>
#include <random>

#include "lmgrad/format.hpp"

namespace lmgrad {

NumericError::NumericError(std::size_t step_, double loss_, double max_abs_logit_)
    : std::runtime_error("non-finite loss at step " + std::to_string(step_) + " (loss=" + fmt_double(loss_) +
                         ", max |logit|=" + fmt_double(max_abs_logit_) + ")"),
      step(step_),
      loss(loss_),
      max_abs_logit(max_abs_logit_) {}

HeadWeights HeadWeights::full(Matrix w) {
  HeadWeights h;
  h.head_ = FullHead{std::move(w)};
  return h;
}

HeadWeights HeadWeights::factored(Matrix a, Matrix b) {
  if (a.cols() != b.rows())
    throw ModelError("factored head: A has " + std::to_string(a.cols()) + " columns but B has " +
                     std::to_string(b.rows()) + " rows");
  if (b.rows() > b.cols()) throw ModelError("factored head: inner rank exceeds hidden dimension");
  HeadWeights h;
  h.head_ = FactoredHead{std::move(a), std::move(b)};
  return h;
}

Index HeadWeights::vocab_size() const {
  return is_factored() ? as_factored().a.rows() : as_full().w.rows();
}

Index HeadWeights::dim() const { return is_factored() ? as_factored().b.cols() : as_full().w.cols(); }

Index HeadWeights::inner_rank() const { return is_factored() ? as_factored().a.cols() : 0; }

Matrix HeadWeights::effective() const {
  if (is_factored()) return as_factored().a * as_factored().b;
  return as_full().w;
}

void ModelParams::validate() const {
  if (hidden.cols() != head.dim())
    throw ModelError("hidden dimension mismatch: H has " + std::to_string(hidden.cols()) +
                     " columns, head expects " + std::to_string(head.dim()));
}

namespace {

Matrix normal_matrix(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  // Fill row by row so the draw order matches the row-major file layout.
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

}  // namespace

ModelParams init_params(Index contexts, Index vocab, Index dim, Index head_rank, double init_scale,
                        std::uint64_t seed) {
  if (contexts < 1 || vocab < 1 || dim < 1) throw ModelError("init_params: dimensions must be positive");
  if (head_rank < 0 || head_rank > dim) throw ModelError("init_params: head rank must lie in [0, D]");
  if (!(init_scale > 0)) throw ModelError("init_params: init_scale must be positive");
  std::mt19937_64 rng(seed);
  const double sd = init_scale / std::sqrt(static_cast<double>(dim));
  ModelParams p;
  p.hidden = normal_matrix(contexts, dim, sd, rng);
  if (head_rank == 0) {
    p.head = HeadWeights::full(normal_matrix(vocab, dim, sd, rng));
  } else {
    const double sd_a = init_scale / std::sqrt(static_cast<double>(head_rank));
    Matrix a = normal_matrix(vocab, head_rank, sd_a, rng);
    Matrix b = normal_matrix(head_rank, dim, sd, rng);
    p.head = HeadWeights::factored(std::move(a), std::move(b));
  }
  return p;
}

ModelParams gather_rows(const ModelParams& params, const std::vector<Index>& rows) {
  ModelParams out;
  out.hidden.resize(static_cast<Index>(rows.size()), params.hidden.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.hidden.row(static_cast<Index>(i)) = params.hidden.row(rows[i]);
  out.head = params.head;
  return out;
}

Matrix logits(const ModelParams& params) {
  params.validate();
  if (params.head.is_factored()) {
    const auto& f = params.head.as_factored();
    const Matrix hb = params.hidden * f.b.transpose();
    return hb * f.a.transpose();
  }
  return params.hidden * params.head.as_full().w.transpose();
}

namespace {

void check_shapes(const CountMatrix& counts, Index rows, Index cols, const char* what) {
  if (counts.counts.rows() != rows || counts.counts.cols() != cols)
    throw ModelError(std::string(what) + ": count matrix is " + std::to_string(counts.counts.rows()) + "x" +
                     std::to_string(counts.counts.cols()) + ", model output is " + std::to_string(rows) + "x" +
                     std::to_string(cols));
}

struct Forward {
  Matrix logits;
  Matrix probs;
  double loss = 0;
};

Forward forward(const CountMatrix& counts, const ModelParams& params) {
  Forward f;
  f.logits = logits(params);
  check_shapes(counts, f.logits.rows(), f.logits.cols(), "loss");
  const Vector row_max = f.logits.rowwise().maxCoeff();
  const Matrix shifted = f.logits.colwise() - row_max;
  f.probs = shifted.array().exp().matrix();
  const Vector sums = f.probs.rowwise().sum();
  f.probs.array().colwise() /= sums.array();
  const double fit = (counts.counts.array() * shifted.array()).sum();
  const double norm = counts.counts.rowwise().sum().dot(sums.array().log().matrix());
  f.loss = -(fit - norm) / static_cast<double>(counts.total);
  return f;
}

}  // namespace

double loss_from_logits(const CountMatrix& counts, const Matrix& logits) {
  check_shapes(counts, logits.rows(), logits.cols(), "loss");
  const Matrix log_probs = log_softmax_rows(logits);
  return -(counts.counts.array() * log_probs.array()).sum() / static_cast<double>(counts.total);
}

double loss(const CountMatrix& counts, const ModelParams& params) { return loss_from_logits(counts, logits(params)); }

double entropy_floor(const CountMatrix& counts) {
  double acc = 0;
  for (Index j = 0; j < counts.counts.cols(); ++j)
    for (Index i = 0; i < counts.counts.rows(); ++i) {
      const double n = counts.counts(i, j);
      if (n > 0) acc += n * std::log(counts.normalized(i, j));
    }
  return -acc / static_cast<double>(counts.total);
}

Matrix smoothed_targets(const CountMatrix& counts, double delta) {
  const double v = static_cast<double>(counts.vocab_size());
  return ((1.0 - delta) * counts.normalized.array() + delta / v).matrix();
}

Matrix logit_gradient(const CountMatrix& counts, const Matrix& probs) {
  check_shapes(counts, probs.rows(), probs.cols(), "logit_gradient");
  return ((probs - counts.normalized).array().colwise() * counts.weights.array()).matrix();
}

ParamGradients backprop_logit_gradient(const Matrix& g, const ModelParams& params) {
  ParamGradients out;
  if (params.head.is_factored()) {
    const auto& f = params.head.as_factored();
    const Matrix ga = g * f.a;                       // C x r
    out.hidden = ga * f.b;                           // C x D
    out.a = g.transpose() * (params.hidden * f.b.transpose());  // V x r
    out.b = ga.transpose() * params.hidden;          // r x D
  } else {
    const Matrix& w = params.head.as_full().w;
    out.hidden = g * w;
    out.w = g.transpose() * params.hidden;
  }
  return out;
}

ParamGradients param_gradients(const CountMatrix& counts, const ModelParams& params) {
  const Matrix p = softmax_rows(logits(params));
  return backprop_logit_gradient(logit_gradient(counts, p), params);
}

Matrix first_order_logit_update(const CountMatrix& counts, const ModelParams& params, UpdateMask mask) {
  const ParamGradients g = param_gradients(counts, params);
  Matrix delta = Matrix::Zero(params.hidden.rows(), params.head.vocab_size());
  if (mask.hidden) delta.noalias() -= g.hidden * params.head.effective().transpose();
  if (mask.head) {
    Matrix head_grad;
    if (params.head.is_factored()) {
      const auto& f = params.head.as_factored();
      head_grad = g.a * f.b + f.a * g.b;
    } else {
      head_grad = g.w;
    }
    delta.noalias() -= params.hidden * head_grad.transpose();
  }
  return delta;
}

Matrix exact_logit_update(const CountMatrix& counts, const ModelParams& params, double eta, UpdateMask mask) {
  if (!(eta > 0)) throw ModelError("exact_logit_update: step size must be positive");
  const ParamGradients g = param_gradients(counts, params);
  ModelParams next = params;
  if (mask.hidden) next.hidden -= eta * g.hidden;
  if (mask.head) {
    if (next.head.is_factored()) {
      next.head.as_factored().a -= eta * g.a;
      next.head.as_factored().b -= eta * g.b;
    } else {
      next.head.as_full().w -= eta * g.w;
    }
  }
  return (logits(next) - logits(params)) / eta;
}

namespace {

std::vector<Index> row_argmax(const Matrix& m) {
  std::vector<Index> best(static_cast<std::size_t>(m.rows()), 0);
  for (Index j = 1; j < m.cols(); ++j)
    for (Index i = 0; i < m.rows(); ++i)
      if (m(i, j) > m(i, best[static_cast<std::size_t>(i)])) best[static_cast<std::size_t>(i)] = j;
  return best;
}

}  // namespace

Top1Accuracy top1_accuracy(const CountMatrix& counts, const Matrix& probs) {
  check_shapes(counts, probs.rows(), probs.cols(), "top1_accuracy");
  const auto pred = row_argmax(probs);
  const auto target = row_argmax(counts.normalized);
  Top1Accuracy acc;
  const Index c = probs.rows();
  if (c == 0) return acc;
  for (Index i = 0; i < c; ++i) {
    if (pred[static_cast<std::size_t>(i)] != target[static_cast<std::size_t>(i)]) continue;
    acc.weighted += counts.weights(i);
    acc.unweighted += 1.0;
  }
  acc.unweighted /= static_cast<double>(c);
  return acc;
}

Top1Accuracy top1_accuracy(const CountMatrix& counts, const ModelParams& params) {
  return top1_accuracy(counts, softmax_rows(logits(params)));
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lr >= 0) || !std::isfinite(lr)) throw ModelError("train: lr must be finite and nonnegative");
  if (dim < 1) throw ModelError("train: dim must be positive");
  if (head_rank < 0 || head_rank > dim) throw ModelError("train: head_rank must lie in [0, dim]");
  if (warmup_steps > steps) throw ModelError("train: warmup_steps exceeds steps");
  if (eval_every == 0) throw ModelError("train: eval_every must be positive");
  if (!(init_scale > 0)) throw ModelError("train: init_scale must be positive");
  if (optimizer == OptimizerKind::kAdam &&
      !(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1 && adam.eps > 0))
    throw ModelError("train: invalid Adam hyperparameters");
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::kAdam ? "adam" : "gd"; }
std::string to_string(ScheduleKind k) { return k == ScheduleKind::kCosine ? "cosine" : "constant"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::kAdam;
  if (s == "gd" || s == "plain_gd") return OptimizerKind::kGradientDescent;
  throw ModelError("unknown optimizer `" + s + "` (expected adam or gd)");
}

ScheduleKind parse_schedule(const std::string& s) {
  if (s == "constant") return ScheduleKind::kConstant;
  if (s == "cosine") return ScheduleKind::kCosine;
  throw ModelError("unknown schedule `" + s + "` (expected constant or cosine)");
}

double scheduled_lr(const TrainConfig& config, std::size_t step) {
  if (config.schedule == ScheduleKind::kConstant) return config.lr;
  if (step < config.warmup_steps)
    return config.lr * static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps);
  const std::size_t decay = config.steps - config.warmup_steps;
  if (decay == 0) return config.lr;
  const double progress = static_cast<double>(step - config.warmup_steps) / static_cast<double>(decay);
  return config.lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

void write_trajectory_csv(std::ostream& out, const Trajectory& trajectory) {
  out << "step,train_loss,val_loss,top1_acc\n";
  for (const auto& p : trajectory) {
    out << p.step << ',' << fmt_double(p.train_loss) << ',';
    if (p.val_loss) out << fmt_double(*p.val_loss);
    out << ',' << fmt_double(p.top1_acc) << '\n';
  }
}

namespace {

struct AdamMoments {
  Matrix m, v;
  void reset_like(const Matrix& x) {
    m = Matrix::Zero(x.rows(), x.cols());
    v = Matrix::Zero(x.rows(), x.cols());
  }
};

class Optimizer {
 public:
  Optimizer(const TrainConfig& config, const ModelParams& params) : config_(config) {
    if (config_.optimizer != OptimizerKind::kAdam) return;
    hidden_.reset_like(params.hidden);
    if (params.head.is_factored()) {
      a_.reset_like(params.head.as_factored().a);
      b_.reset_like(params.head.as_factored().b);
    } else {
      w_.reset_like(params.head.as_full().w);
    }
  }

  /// Applies one update. `rows` lists the rows of H the gradient refers to.
  void step(ModelParams& params, const ParamGradients& g, const std::vector<Index>& rows, double lr) {
    ++t_;
    if (config_.update.hidden) update_rows(params.hidden, hidden_, g.hidden, rows, lr);
    if (config_.update.head) {
      if (params.head.is_factored()) {
        update(params.head.as_factored().a, a_, g.a, lr);
        update(params.head.as_factored().b, b_, g.b, lr);
      } else {
        update(params.head.as_full().w, w_, g.w, lr);
      }
    }
  }

 private:
  void update(Matrix& x, AdamMoments& s, const Matrix& g, double lr) {
    if (config_.optimizer == OptimizerKind::kGradientDescent) {
      x -= lr * g;
      return;
    }
    const auto& a = config_.adam;
    s.m = a.beta1 * s.m + (1 - a.beta1) * g;
    s.v = a.beta2 * s.v.array() + (1 - a.beta2) * g.array().square();
    const double c1 = 1 - std::pow(a.beta1, static_cast<double>(t_));
    const double c2 = 1 - std::pow(a.beta2, static_cast<double>(t_));
    x.array() -= lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + a.eps);
  }

  void update_rows(Matrix& x, AdamMoments& s, const Matrix& g, const std::vector<Index>& rows, double lr) {
    // Gather the touched rows, update them as a block and scatter back.
    Matrix xr(g.rows(), g.cols());
    AdamMoments sr;
    const bool adam = config_.optimizer == OptimizerKind::kAdam;
    if (adam) sr.reset_like(g);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const Index r = rows[i];
      xr.row(static_cast<Index>(i)) = x.row(r);
      if (adam) {
        sr.m.row(static_cast<Index>(i)) = s.m.row(r);
        sr.v.row(static_cast<Index>(i)) = s.v.row(r);
      }
    }
    update(xr, sr, g, lr);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const Index r = rows[i];
      x.row(r) = xr.row(static_cast<Index>(i));
      if (adam) {
        s.m.row(r) = sr.m.row(static_cast<Index>(i));
        s.v.row(r) = sr.v.row(static_cast<Index>(i));
      }
    }
  }

  const TrainConfig& config_;
  AdamMoments hidden_, w_, a_, b_;
  std::size_t t_ = 0;
};

/// Draws sequence batches without replacement; an epoch that cannot fill a
/// whole batch is reshuffled.
class BatchSampler {
 public:
  BatchSampler(std::size_t num_seqs, std::size_t batch, std::uint64_t seed)
      : order_(num_seqs), batch_(std::min(batch, num_seqs)), rng_(seed) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    reshuffle();
  }

  std::vector<std::size_t> next() {
    if (cursor_ + batch_ > order_.size()) reshuffle();
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + batch_));
    cursor_ += batch_;
    return out;
  }

 private:
  void reshuffle() {
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }

  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t cursor_ = 0;
  std::mt19937_64 rng_;
};

}  // namespace

TrainResult train(const TrainingData& data, const TrainConfig& config, std::optional<ModelParams> init,
                  const EvalHook& on_eval) {
  config.validate();
  if (data.counts == nullptr) throw ModelError("train: no count matrix");
  const CountMatrix& full = *data.counts;
  const bool sgd = config.batch_sequences > 0;
  if (sgd && (data.corpus == nullptr || data.table == nullptr))
    throw ModelError("train: SGD batching needs the corpus and its context table");

  TrainResult result;
  result.params = init ? std::move(*init)
                       : init_params(full.num_contexts(), full.vocab_size(), config.dim, config.head_rank,
                                     config.init_scale, config.seed);
  ModelParams& params = result.params;
  params.validate();
  if (params.hidden.rows() != full.num_contexts() || params.head.vocab_size() != full.vocab_size())
    throw ModelError("train: parameters do not match the count matrix");

  Optimizer optimizer(config, params);
  std::optional<BatchSampler> sampler;
  if (sgd) sampler.emplace(data.corpus->sequences.size(), config.batch_sequences, config.seed ^ 0x5851f42d4c957f2dULL);

  auto record = [&](std::size_t step) {
    TrajectoryPoint pt;
    pt.step = step;
    const Forward f = forward(full, params);
    pt.train_loss = f.loss;
    pt.top1_acc = top1_accuracy(full, f.probs).weighted;
    if (data.validation) pt.val_loss = loss(*data.validation, gather_rows(params, data.validation->rows));
    if (on_eval) pt.checkpoint = on_eval(step, params);
    result.trajectory.push_back(std::move(pt));
  };

  for (std::size_t step = 0; step < config.steps; ++step) {
    if (step % config.eval_every == 0) record(step);

    CountMatrix batch;
    const CountMatrix* target = &full;
    if (sgd) {
      const auto seqs = sampler->next();
      batch = batch_counts(*data.corpus, *data.table, seqs, data.max_context_len);
      target = &batch;
    }
    // Full-batch and batched steps share this path so that a batch covering
    // the whole corpus reproduces full-batch training bit for bit.
    const ModelParams local = gather_rows(params, target->rows);
    const Forward f = forward(*target, local);
    if (!std::isfinite(f.loss) || !f.logits.allFinite())
      throw NumericError(step, f.loss, f.logits.cwiseAbs().maxCoeff());
    const ParamGradients grads = backprop_logit_gradient(logit_gradient(*target, f.probs), local);
    optimizer.step(params, grads, target->rows, scheduled_lr(config, step));
  }
  record(config.steps);
  if (!std::isfinite(result.trajectory.back().train_loss))
    throw NumericError(config.steps, result.trajectory.back().train_loss, logits(params).cwiseAbs().maxCoeff());
  return result;
}

}  // namespace lmgrad
