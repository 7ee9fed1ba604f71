#include "lmgrad/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>

#include "lmgrad/format.hpp"

namespace lmgrad {

Matrix per_token_gradients(std::span<const TokenEvent> events, const Matrix& probs) {
  Matrix g(static_cast<Index>(events.size()), probs.cols());
  for (std::size_t k = 0; k < events.size(); ++k) {
    const auto& e = events[k];
    g.row(static_cast<Index>(k)) = probs.row(e.row);
    g(static_cast<Index>(k), e.token) -= 1.0;
  }
  return g;
}

RankCurve gradient_rank_curve(std::span<const TokenEvent> events, const Matrix& probs,
                              std::span<const std::size_t> token_counts, std::uint64_t seed, double tol) {
  for (std::size_t i = 0; i < token_counts.size(); ++i) {
    if (token_counts[i] == 0) throw DiagnosticsError("gradient_rank_curve: token counts must be positive");
    if (i > 0 && token_counts[i] <= token_counts[i - 1])
      throw DiagnosticsError("gradient_rank_curve: token counts must be strictly ascending");
    if (token_counts[i] > events.size())
      throw DiagnosticsError("gradient_rank_curve: " + std::to_string(token_counts[i]) +
                             " tokens requested but the corpus has " + std::to_string(events.size()));
  }
  std::vector<std::size_t> order(events.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  RankCurve curve;
  const auto v = static_cast<std::size_t>(probs.cols());
  for (std::size_t n : token_counts) {
    std::vector<TokenEvent> picked(n);
    for (std::size_t k = 0; k < n; ++k) picked[k] = events[order[k]];
    const Matrix g = per_token_gradients(picked, probs);
    curve.push_back({n, qr_rank(g, tol), static_cast<Index>(std::min(n, v))});
  }
  return curve;
}

namespace {

void require_vocab(const Matrix& grad, const HeadWeights& head, const char* what) {
  if (grad.cols() != head.vocab_size())
    throw DiagnosticsError(std::string(what) + ": gradient has " + std::to_string(grad.cols()) +
                           " columns, head vocabulary is " + std::to_string(head.vocab_size()));
}

}  // namespace

LostFraction lost_norm_fraction(const Matrix& grad, const HeadWeights& head) {
  require_vocab(grad, head, "lost_norm_fraction");
  const double total = grad.norm();
  if (total == 0) return {0.0, true};
  const OrthonormalBasis kernel = kernel_basis(head.effective());
  const double lost = project_rows_onto_span(grad, kernel).norm();
  return {std::min(1.0, lost / total), false};
}

namespace {

KernelCosine cosine_stats(const Matrix& grad, const Matrix& visible) {
  KernelCosine out;
  double sum = 0, sum_sq = 0;
  for (Index i = 0; i < grad.rows(); ++i) {
    const double gn = grad.row(i).norm();
    if (gn == 0) {
      ++out.zero_rows;
      continue;
    }
    // cos(g, P g) = ||P g|| / ||g|| for an orthogonal projector P.
    const double c = visible.row(i).norm() / gn;
    sum += c;
    sum_sq += c * c;
    ++out.rows_used;
  }
  if (out.rows_used == 0) throw DiagnosticsError("kernel_cosine: gradient is identically zero");
  const double n = static_cast<double>(out.rows_used);
  out.mean = sum / n;
  out.std = std::sqrt(std::max(0.0, sum_sq / n - out.mean * out.mean));
  return out;
}

}  // namespace

KernelCosine kernel_cosine(const Matrix& grad, const HeadWeights& head) {
  require_vocab(grad, head, "kernel_cosine");
  const auto split = range_kernel_split(head.effective());
  return cosine_stats(grad, project_rows_onto_span(grad, split.range));
}

CompressionReport compression_report(const Matrix& grad, const HeadWeights& head) {
  require_vocab(grad, head, "compression_report");
  CompressionReport r;
  const double total = grad.norm();
  r.eckart_young_gap = eckart_young_gap(grad, head.dim());
  if (total == 0) {
    r.zero_gradient = true;
    return r;
  }
  const auto split = range_kernel_split(head.effective());
  const Matrix lost = project_rows_onto_span(grad, split.kernel);
  const Matrix visible = project_rows_onto_span(grad, split.range);
  r.lost_fraction = lost.norm() / total;
  r.retained_fraction = visible.norm() / total;
  const KernelCosine c = cosine_stats(grad, visible);
  r.cosine_mean = c.mean;
  r.cosine_std = c.std;
  r.per_row_lost.resize(static_cast<std::size_t>(grad.rows()));
  for (Index i = 0; i < grad.rows(); ++i) {
    const double gn = grad.row(i).norm();
    r.per_row_lost[static_cast<std::size_t>(i)] = gn == 0 ? 0.0 : lost.row(i).norm() / gn;
  }
  return r;
}

CoefficientProfile coefficient_profile(const Matrix& full, const Matrix& projected) {
  if (full.rows() != projected.rows() || full.cols() != projected.cols())
    throw DiagnosticsError("coefficient_profile: full and projected gradients differ in shape");
  const auto v = static_cast<std::size_t>(full.cols());
  CoefficientProfile p;
  std::vector<double> fs(v, 0.0), fs2(v, 0.0), ps(v, 0.0), ps2(v, 0.0);
  std::vector<Index> order(v);
  const Matrix full_t = full.transpose();  // rows become contiguous columns
  const Matrix proj_t = projected.transpose();
  const Index n = full.rows();
  for (Index i = 0; i < n; ++i) {
    auto fr = full_t.col(i);
    auto pr = proj_t.col(i);
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return std::abs(fr(a)) > std::abs(fr(b)); });
    const double sign = v > 0 && fr(order[0]) > 0 ? -1.0 : 1.0;
    for (std::size_t k = 0; k < v; ++k) {
      const double f = sign * fr(order[k]);
      const double q = sign * pr(order[k]);
      fs[k] += f;
      fs2[k] += f * f;
      ps[k] += q;
      ps2[k] += q * q;
    }
  }
  const double dn = n > 0 ? static_cast<double>(n) : 1.0;
  auto finish = [&](const std::vector<double>& s, const std::vector<double>& s2, std::vector<double>& mean,
                    std::vector<double>& sd) {
    mean.resize(v);
    sd.resize(v);
    for (std::size_t k = 0; k < v; ++k) {
      mean[k] = s[k] / dn;
      sd[k] = std::sqrt(std::max(0.0, s2[k] / dn - mean[k] * mean[k]));
    }
  };
  finish(fs, fs2, p.full_mean, p.full_std);
  finish(ps, ps2, p.proj_mean, p.proj_std);
  return p;
}

EfficiencyCurve update_efficiency(const CountMatrix& counts, const ModelParams& params,
                                  std::span<const double> fractions) {
  const Matrix l = logits(params);
  const Matrix p = softmax_rows(l);
  const Matrix g = logit_gradient(counts, p);
  const Matrix w = params.head.effective();
  const Matrix hidden_dir = (g * w) * w.transpose();  // dH W^T
  const double gn = g.norm();
  const double hn = hidden_dir.norm();
  if (gn == 0 || hn == 0) throw DiagnosticsError("update_efficiency: zero-norm update direction");
  const Matrix d1 = -g / gn;
  const Matrix d2 = -hidden_dir / hn;
  const double budget = l.norm();
  const double base = loss_from_logits(counts, l);

  EfficiencyCurve out;
  for (double a : fractions) {
    if (!(a >= 0 && a <= 1)) throw DiagnosticsError("update_efficiency: fractions must lie in [0, 1]");
    out.fractions.push_back(a);
    if (a == 0) {
      out.loss_delta_logit_dir.push_back(0.0);
      out.loss_delta_hidden_dir.push_back(0.0);
      continue;
    }
    const double step = a * budget;
    out.loss_delta_logit_dir.push_back(loss_from_logits(counts, l + step * d1) - base);
    out.loss_delta_hidden_dir.push_back(loss_from_logits(counts, l + step * d2) - base);
  }
  return out;
}

double eckart_young_gap(const Matrix& grad, Index dim) { return best_rank_k_residual(grad, 2 * dim); }

void write_rank_curve_csv(std::ostream& out, const RankCurve& curve) {
  out << "token_count,rank,max_rank\n";
  for (const auto& p : curve) out << p.token_count << ',' << p.rank << ',' << p.max_rank << '\n';
}

void write_efficiency_csv(std::ostream& out, const EfficiencyCurve& curve) {
  out << "alpha,delta_logit,delta_hidden\n";
  for (std::size_t i = 0; i < curve.fractions.size(); ++i)
    out << fmt_double(curve.fractions[i]) << ',' << fmt_double(curve.loss_delta_logit_dir[i]) << ','
        << fmt_double(curve.loss_delta_hidden_dir[i]) << '\n';
}

void write_profile_csv(std::ostream& out, const CoefficientProfile& profile) {
  out << "position,full_mean,full_std,proj_mean,proj_std\n";
  for (std::size_t k = 0; k < profile.full_mean.size(); ++k)
    out << (k + 1) << ',' << fmt_double(profile.full_mean[k]) << ',' << fmt_double(profile.full_std[k]) << ','
        << fmt_double(profile.proj_mean[k]) << ',' << fmt_double(profile.proj_std[k]) << '\n';
}

void write_compression_csv(std::ostream& out, const CompressionReport& report) {
  out << "metric,value\n";
  out << "lost_fraction," << fmt_double(report.lost_fraction) << '\n';
  out << "retained_fraction," << fmt_double(report.retained_fraction) << '\n';
  out << "cosine_mean," << fmt_double(report.cosine_mean) << '\n';
  out << "cosine_std," << fmt_double(report.cosine_std) << '\n';
  out << "eckart_young_gap," << fmt_double(report.eckart_young_gap) << '\n';
  out << "zero_gradient," << (report.zero_gradient ? 1 : 0) << '\n';
}

}  // namespace lmgrad
