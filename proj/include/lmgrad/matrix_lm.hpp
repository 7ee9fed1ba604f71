#pragma once

// Matrix language model: free context representations H (C x D) and an LM
// head W (V x D), optionally factored as A (V x r) * B (r x D). The loss is
// the per-token average negative log-likelihood -(1/T) <N, log softmax(H W^T)>.

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "lmgrad/corpus.hpp"
#include "lmgrad/linalg.hpp"

namespace lmgrad {

/// Interior smoothing used when log Ñ must be finite: (1 - δ) Ñ + δ / V.
inline constexpr double kInteriorSmoothing = 1e-12;

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when training produces a non-finite loss.
class NumericError : public std::runtime_error {
 public:
  NumericError(std::size_t step, double loss, double max_abs_logit);

  std::size_t step;
  double loss;
  double max_abs_logit;
};

struct FullHead {
  Matrix w;  // V x D
};

struct FactoredHead {
  Matrix a;  // V x r
  Matrix b;  // r x D
};

class HeadWeights {
 public:
  HeadWeights() = default;
  static HeadWeights full(Matrix w);
  static HeadWeights factored(Matrix a, Matrix b);

  bool is_factored() const { return std::holds_alternative<FactoredHead>(head_); }
  Index vocab_size() const;
  Index dim() const;
  /// Inner rank r of a factored head, 0 for a full head.
  Index inner_rank() const;

  /// W or A * B.
  Matrix effective() const;

  FullHead& as_full() { return std::get<FullHead>(head_); }
  const FullHead& as_full() const { return std::get<FullHead>(head_); }
  FactoredHead& as_factored() { return std::get<FactoredHead>(head_); }
  const FactoredHead& as_factored() const { return std::get<FactoredHead>(head_); }

 private:
  std::variant<FullHead, FactoredHead> head_;
};

struct ModelParams {
  Matrix hidden;  // C x D
  HeadWeights head;

  Index num_contexts() const { return hidden.rows(); }
  Index dim() const { return hidden.cols(); }
  void validate() const;
};

/// Entries i.i.d. N(0, (init_scale / sqrt(D))^2); a factored head draws A
/// with scale init_scale / sqrt(r) and B with init_scale / sqrt(D).
ModelParams init_params(Index contexts, Index vocab, Index dim, Index head_rank, double init_scale,
                        std::uint64_t seed);

/// Rows of H selected by `rows` (table row ids), head shared.
ModelParams gather_rows(const ModelParams& params, const std::vector<Index>& rows);

Matrix logits(const ModelParams& params);

/// -(1/T) <N, log softmax(logits)>, zero-count entries contributing nothing.
double loss_from_logits(const CountMatrix& counts, const Matrix& logits);
double loss(const CountMatrix& counts, const ModelParams& params);

/// -(1/T) <N, log Ñ>, the Gibbs lower bound on the loss.
double entropy_floor(const CountMatrix& counts);

/// (1 - δ) Ñ + δ / V.
Matrix smoothed_targets(const CountMatrix& counts, double delta = kInteriorSmoothing);

/// diag(ω) (P - Ñ).
Matrix logit_gradient(const CountMatrix& counts, const Matrix& probs);

struct ParamGradients {
  Matrix hidden;  // C x D
  Matrix w;       // full head
  Matrix a, b;    // factored head
};

ParamGradients param_gradients(const CountMatrix& counts, const ModelParams& params);

/// Chain rule from a logit gradient G (C x V): dH = G W, dW = G^T H,
/// dA = G^T H B^T, dB = A^T G^T H.
ParamGradients backprop_logit_gradient(const Matrix& logit_grad, const ModelParams& params);

struct UpdateMask {
  bool hidden = true;
  bool head = true;
};

/// First-order logit change per unit learning rate under one gradient step:
/// -(dH W^T + H dW^T), with masked blocks left out.
Matrix first_order_logit_update(const CountMatrix& counts, const ModelParams& params, UpdateMask mask = {});

/// (logits(θ - η ∇θ) - logits(θ)) / η.
Matrix exact_logit_update(const CountMatrix& counts, const ModelParams& params, double eta,
                          UpdateMask mask = {});

struct Top1Accuracy {
  double weighted = 0;    // ω-weighted fraction of contexts
  double unweighted = 0;  // plain fraction of contexts
};

/// Agreement of argmax P and argmax Ñ per context; ties go to the lowest id.
Top1Accuracy top1_accuracy(const CountMatrix& counts, const Matrix& probs);
Top1Accuracy top1_accuracy(const CountMatrix& counts, const ModelParams& params);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class OptimizerKind { kGradientDescent, kAdam };
enum class ScheduleKind { kConstant, kCosine };

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
};

struct TrainConfig {
  std::size_t steps = 1000;
  double lr = 1e-2;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  AdamConfig adam;
  ScheduleKind schedule = ScheduleKind::kConstant;
  std::size_t warmup_steps = 0;
  /// Sequences per SGD batch; 0 trains on the full count matrix.
  std::size_t batch_sequences = 0;
  std::uint64_t seed = 0;
  double init_scale = 1.0;
  std::size_t eval_every = 100;
  Index dim = 8;
  /// Inner rank of a factored head; 0 for a full V x D head.
  Index head_rank = 0;
  UpdateMask update;

  void validate() const;
};

std::string to_string(OptimizerKind k);
std::string to_string(ScheduleKind k);
OptimizerKind parse_optimizer(const std::string& s);
ScheduleKind parse_schedule(const std::string& s);

/// Learning rate at step `step` (0-based).
double scheduled_lr(const TrainConfig& config, std::size_t step);

struct TrajectoryPoint {
  std::size_t step = 0;
  double train_loss = 0;
  std::optional<double> val_loss;
  double top1_acc = 0;  // ω-weighted
  std::optional<std::string> checkpoint;
};

using Trajectory = std::vector<TrajectoryPoint>;

/// Header `step,train_loss,val_loss,top1_acc`; an absent val_loss is empty.
void write_trajectory_csv(std::ostream& out, const Trajectory& trajectory);

/// What the trainer sees. SGD batching needs the corpus and its table.
struct TrainingData {
  const CountMatrix* counts = nullptr;
  const Corpus* corpus = nullptr;
  const ContextTable* table = nullptr;
  std::size_t max_context_len = kDefaultMaxContextLen;
  /// Held-out counts whose rows index the same table.
  const CountMatrix* validation = nullptr;
};

struct TrainResult {
  ModelParams params;
  Trajectory trajectory;
};

/// Invoked at every recorded step; may return a checkpoint reference that is
/// stored in the trajectory.
using EvalHook = std::function<std::optional<std::string>(std::size_t step, const ModelParams&)>;

TrainResult train(const TrainingData& data, const TrainConfig& config, std::optional<ModelParams> init = {},
                  const EvalHook& on_eval = {});

}  // namespace lmgrad
