#pragma once

// Measurements of how the LM head compresses logit gradients: empirical
// rank of per-token gradients, the norm fraction lost in ker(W^T), cosine
// between a gradient and its visible part, sorted coefficient profiles,
// loss decrease along logit vs hidden-state directions, and the
// Eckart-Young floor on the update residual.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <vector>

#include "lmgrad/corpus.hpp"
#include "lmgrad/linalg.hpp"
#include "lmgrad/matrix_lm.hpp"

namespace lmgrad {

class DiagnosticsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RankPoint {
  std::size_t token_count = 0;
  Index rank = 0;
  Index max_rank = 0;  // min(token_count, V)
};

using RankCurve = std::vector<RankPoint>;

/// Stacks one row P_context - onehot(next token) per sampled token position
/// and counts its QR rank at `tol`. Sizes are nested prefixes of a single
/// seeded permutation of the positions.
RankCurve gradient_rank_curve(std::span<const TokenEvent> events, const Matrix& probs,
                              std::span<const std::size_t> token_counts, std::uint64_t seed,
                              double tol = kRankTol);

/// Per-token logit gradient rows for the given positions.
Matrix per_token_gradients(std::span<const TokenEvent> events, const Matrix& probs);

struct LostFraction {
  double value = 0;
  bool zero_gradient = false;
};

/// ||proj_{ker W^T}(G)||_F / ||G||_F, using the kernel basis of the head.
LostFraction lost_norm_fraction(const Matrix& grad, const HeadWeights& head);

struct KernelCosine {
  double mean = 0;
  double std = 0;
  Index rows_used = 0;
  Index zero_rows = 0;
};

/// Mean and std over nonzero rows g of ||proj_{range W}(g)|| / ||g||.
KernelCosine kernel_cosine(const Matrix& grad, const HeadWeights& head);

struct CompressionReport {
  double lost_fraction = 0;
  double retained_fraction = 0;  // ||proj_{range W}(G)||_F / ||G||_F
  double cosine_mean = 0;
  double cosine_std = 0;
  double eckart_young_gap = 0;
  std::vector<double> per_row_lost;
  bool zero_gradient = false;
};

CompressionReport compression_report(const Matrix& grad, const HeadWeights& head);

struct CoefficientProfile {
  std::vector<double> full_mean, full_std, proj_mean, proj_std;
};

/// Per row, orders coefficients by |G_full| descending, flips the row so the
/// leading full coefficient is negative, and averages position-wise.
CoefficientProfile coefficient_profile(const Matrix& full, const Matrix& projected);

struct EfficiencyCurve {
  std::vector<double> fractions;
  std::vector<double> loss_delta_logit_dir;
  std::vector<double> loss_delta_hidden_dir;
};

/// loss(L + α ||L||_F d) - loss(L) for d1 = -G_L / ||G_L|| and
/// d2 = -(dH W^T) / ||dH W^T||.
EfficiencyCurve update_efficiency(const CountMatrix& counts, const ModelParams& params,
                                  std::span<const double> fractions);

/// Frobenius residual of the best rank-2D approximation of G.
double eckart_young_gap(const Matrix& grad, Index dim);

void write_rank_curve_csv(std::ostream& out, const RankCurve& curve);
void write_efficiency_csv(std::ostream& out, const EfficiencyCurve& curve);
void write_profile_csv(std::ostream& out, const CoefficientProfile& profile);
void write_compression_csv(std::ostream& out, const CompressionReport& report);

}  // namespace lmgrad
