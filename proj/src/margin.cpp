#include "vmargin/margin.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <string>

#include "vmargin/error.hpp"

namespace vmargin {

template <typename T>
std::vector<std::size_t> top_k_indices(std::span<const T> values, std::size_t k) {
  if (k > values.size()) {
    throw UsageError("top-k: k=" + std::to_string(k) + " exceeds length " +
                     std::to_string(values.size()));
  }
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto before = [&](std::size_t a, std::size_t b) {
    return values[a] > values[b] || (values[a] == values[b] && a < b);
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), before);
  idx.resize(k);
  return idx;
}

template std::vector<std::size_t> top_k_indices<float>(std::span<const float>, std::size_t);
template std::vector<std::size_t> top_k_indices<double>(std::span<const double>, std::size_t);

template <typename T>
std::vector<MarginRecord> compute_margins(const Matrix<T>& logits,
                                          std::span<const TokenId> targets) {
  if (logits.cols() < 2) {
    throw UsageError("compute_margins: need at least 2 logits per row");
  }
  if (targets.size() != logits.rows()) {
    throw UsageError("compute_margins: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(logits.rows()) + " rows");
  }
  std::vector<MarginRecord> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    // Single pass top-2; strict > keeps the lower index on ties.
    std::size_t best = 0;
    std::size_t second = 1;
    if (!std::isfinite(row[0])) {
      throw DataError("non-finite logit at position " + std::to_string(r) + ", token 0");
    }
    if (!std::isfinite(row[1])) {
      throw DataError("non-finite logit at position " + std::to_string(r) + ", token 1");
    }
    if (row[1] > row[0]) std::swap(best, second);
    for (std::size_t c = 2; c < row.size(); ++c) {
      const T v = row[c];
      if (!std::isfinite(v)) {
        throw DataError("non-finite logit at position " + std::to_string(r) + ", token " +
                        std::to_string(c));
      }
      if (v > row[best]) {
        second = best;
        best = c;
      } else if (v > row[second]) {
        second = c;
      }
    }
    MarginRecord& rec = out[r];
    rec.position = r;
    rec.target = targets[r];
    rec.top1 = static_cast<TokenId>(best);
    rec.top2 = static_cast<TokenId>(second);
    rec.margin = static_cast<double>(row[best]) - static_cast<double>(row[second]);
    rec.correct = rec.top1 == rec.target;
  }
  return out;
}

template std::vector<MarginRecord> compute_margins<float>(const MatrixF&, std::span<const TokenId>);
template std::vector<MarginRecord> compute_margins<double>(const MatrixD&,
                                                           std::span<const TokenId>);

float emulate_bf16(float x) noexcept {
  if (!std::isfinite(x)) return x;
  std::uint32_t bits = std::bit_cast<std::uint32_t>(x);
  const std::uint32_t lsb = (bits >> 16) & 1u;
  bits += 0x7FFFu + lsb;
  bits &= 0xFFFF0000u;
  return std::bit_cast<float>(bits);
}

MatrixF emulate_bf16(const MatrixF& m) {
  MatrixF out = m;
  for (float& v : out.values()) v = emulate_bf16(v);
  return out;
}

std::vector<float> recompute_fp32_logits(std::span<const float> hidden,
                                         const MatrixF& unembedding) {
  if (hidden.size() != unembedding.cols()) {
    throw UsageError("recompute_fp32_logits: hidden size " + std::to_string(hidden.size()) +
                     " does not match unembedding width " + std::to_string(unembedding.cols()));
  }
  std::vector<float> out(unembedding.rows());
  for (std::size_t v = 0; v < unembedding.rows(); ++v) {
    auto w = unembedding.row(v);
    double acc = 0.0;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      acc += static_cast<double>(w[i]) * static_cast<double>(hidden[i]);
    }
    out[v] = static_cast<float>(acc);
  }
  return out;
}

MatrixF recompute_fp32_logits(const MatrixF& hidden, const MatrixF& unembedding) {
  MatrixF out(hidden.rows(), unembedding.rows());
  for (std::size_t r = 0; r < hidden.rows(); ++r) {
    auto row = recompute_fp32_logits(hidden.row(r), unembedding);
    std::copy(row.begin(), row.end(), out.row(r).begin());
  }
  return out;
}

std::size_t unique_value_count(std::span<const double> values) {
  std::vector<std::uint64_t> bits;
  bits.reserve(values.size());
  for (double v : values) {
    bits.push_back(std::bit_cast<std::uint64_t>(v == 0.0 ? 0.0 : v));
  }
  std::sort(bits.begin(), bits.end());
  return static_cast<std::size_t>(std::unique(bits.begin(), bits.end()) - bits.begin());
}

double eta_hat(std::span<const double> sorted_margins, double epsilon) {
  if (sorted_margins.empty()) return 0.0;
  auto it = std::lower_bound(sorted_margins.begin(), sorted_margins.end(), epsilon);
  return static_cast<double>(it - sorted_margins.begin()) /
         static_cast<double>(sorted_margins.size());
}

double nearest_rank(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw UsageError("quantile of an empty sample");
  const double n = static_cast<double>(sorted.size());
  auto rank = static_cast<std::size_t>(std::ceil(p * n));
  if (rank < 1) rank = 1;
  if (rank > sorted.size()) rank = sorted.size();
  return sorted[rank - 1];
}

GapFit fit_gap_curve(std::span<const double> margins, const GapGridSpec& grid) {
  if (margins.size() < 1000) {
    throw UsageError("fit_gap_curve: need at least 1000 margins, got " +
                     std::to_string(margins.size()));
  }
  if (grid.count < 5 || !(grid.quantile_lo > 0.0) || !(grid.quantile_hi > grid.quantile_lo) ||
      grid.quantile_hi > 1.0) {
    throw NumericalError("fit_gap_curve: degenerate grid specification");
  }
  std::vector<double> sorted(margins.begin(), margins.end());
  std::sort(sorted.begin(), sorted.end());
  if (sorted.front() < 0.0 || !std::isfinite(sorted.back())) {
    throw DataError("fit_gap_curve: margins must be finite and nonnegative");
  }
  auto first_positive = std::upper_bound(sorted.begin(), sorted.end(), 0.0);
  if (first_positive == sorted.end()) {
    throw NumericalError("fit_gap_curve: all margins are zero");
  }
  double lo = nearest_rank(sorted, grid.quantile_lo);
  const double hi = nearest_rank(sorted, grid.quantile_hi);
  lo = std::max(lo, *first_positive);
  if (!(hi > lo)) {
    throw NumericalError("fit_gap_curve: epsilon grid collapses (lo=" + std::to_string(lo) +
                         ", hi=" + std::to_string(hi) + ")");
  }

  GapFit fit;
  const double log_lo = std::log(lo);
  const double log_hi = std::log(hi);
  const auto n = grid.count;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(n - 1);
    const double eps = i + 1 == n ? hi : std::exp(log_lo + t * (log_hi - log_lo));
    const double eta = eta_hat(sorted, eps);
    fit.epsilon_grid.push_back(eps);
    fit.eta_hat.push_back(eta);
    fit.used.push_back(eta > 0.0);
  }

  std::vector<double> xs;
  std::vector<double> ys;
  std::vector<double> ratios;
  for (std::size_t i = 0; i < n; ++i) {
    if (!fit.used[i]) continue;
    xs.push_back(std::log(fit.epsilon_grid[i]));
    ys.push_back(std::log(fit.eta_hat[i]));
    ratios.push_back(fit.eta_hat[i] / fit.epsilon_grid[i]);
  }
  if (xs.size() < 5) {
    throw NumericalError("fit_gap_curve: only " + std::to_string(xs.size()) +
                         " usable grid points (need 5)");
  }

  const double m = static_cast<double>(xs.size());
  const double mean_x = std::accumulate(xs.begin(), xs.end(), 0.0) / m;
  const double mean_y = std::accumulate(ys.begin(), ys.end(), 0.0) / m;
  double sxx = 0.0;
  double sxy = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mean_x;
    const double dy = ys[i] - mean_y;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (!(sxx > 0.0)) throw NumericalError("fit_gap_curve: zero spread in log epsilon");
  fit.beta = sxy / sxx;
  const double intercept = mean_y - fit.beta * mean_x;
  fit.alpha_intercept = std::exp(intercept);
  if (syy > 0.0) {
    double ss_res = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double r = ys[i] - (intercept + fit.beta * xs[i]);
      ss_res += r * r;
    }
    fit.r2 = std::clamp(1.0 - ss_res / syy, 0.0, 1.0);
  } else {
    fit.r2 = 0.0;
  }

  const std::size_t half = (ratios.size() + 1) / 2;
  fit.alpha_constrained =
      std::accumulate(ratios.begin(), ratios.begin() + static_cast<std::ptrdiff_t>(half), 0.0) /
      static_cast<double>(half);
  return fit;
}

MarginQuantiles margin_quantiles(std::span<const double> margins) {
  if (margins.empty()) throw UsageError("margin_quantiles: empty input");
  std::vector<double> sorted(margins.begin(), margins.end());
  std::sort(sorted.begin(), sorted.end());
  MarginQuantiles q;
  q.q05 = nearest_rank(sorted, 0.05);
  q.q25 = nearest_rank(sorted, 0.25);
  q.median = nearest_rank(sorted, 0.5);
  q.q75 = nearest_rank(sorted, 0.75);
  q.q95 = nearest_rank(sorted, 0.95);
  q.pr_below_half = eta_hat(sorted, 0.5);
  return q;
}

std::vector<double> mid_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && values[order[j]] == values[order[i]]) ++j;
    // Positions i..j-1 share the average of ranks i+1..j.
    const double avg = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) ranks[order[t]] = avg;
    i = j;
  }
  return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw UsageError("spearman: length mismatch");
  if (x.size() < 3) throw UsageError("spearman: need at least 3 pairs");
  const auto rx = mid_ranks(x);
  const auto ry = mid_ranks(y);
  const double n = static_cast<double>(rx.size());
  const double mean = (n + 1.0) / 2.0;  // mid-ranks always average to (n+1)/2
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    const double dx = rx[i] - mean;
    const double dy = ry[i] - mean;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw NumericalError("spearman: constant input, correlation undefined");
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<double> margins_of(std::span<const MarginRecord> records) {
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.margin);
  return out;
}

}  // namespace vmargin
