#ifndef VMARGIN_MARGIN_HPP
#define VMARGIN_MARGIN_HPP

// Margin computation, bfloat16 emulation, gap-curve fitting and rank
// statistics. Everything here is a pure function over its inputs.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "vmargin/matrix.hpp"

namespace vmargin {

using TokenId = std::int32_t;

/// One audited position. `margin` is top-1 logit minus top-2 logit.
struct MarginRecord {
  std::size_t position = 0;
  TokenId target = 0;
  TokenId top1 = 0;
  TokenId top2 = 0;
  double margin = 0.0;
  bool correct = false;

  bool operator==(const MarginRecord&) const = default;
};

/// Indices of the k largest entries in descending order; equal values are
/// ordered by ascending index.
template <typename T>
std::vector<std::size_t> top_k_indices(std::span<const T> values, std::size_t k);

/// Margin records for every row of `logits`. Throws DataError on a non-finite
/// logit and UsageError when rows have fewer than two columns or the target
/// count differs from the row count.
template <typename T>
std::vector<MarginRecord> compute_margins(const Matrix<T>& logits,
                                          std::span<const TokenId> targets);

/// Round a float to the nearest bfloat16 value (8-bit significand), ties to
/// even. Infinities and NaN pass through unchanged.
float emulate_bf16(float x) noexcept;

/// Applies emulate_bf16 to every entry.
MatrixF emulate_bf16(const MatrixF& m);

/// logits = unembedding * hidden, accumulated in double and stored as float.
std::vector<float> recompute_fp32_logits(std::span<const float> hidden,
                                         const MatrixF& unembedding);

/// Batched form: one logit row per hidden-state row.
MatrixF recompute_fp32_logits(const MatrixF& hidden, const MatrixF& unembedding);

/// Number of distinct bit patterns; -0.0 counts as +0.0.
std::size_t unique_value_count(std::span<const double> values);

struct GapGridSpec {
  std::size_t count = 20;
  double quantile_lo = 1e-4;
  double quantile_hi = 0.3;
};

/// Empirical expressibility gap over a log-spaced epsilon grid and its
/// log-log fit. Grid points with eta_hat == 0 are kept in the grid but
/// excluded from the fit; `used` marks which points entered the regression.
struct GapFit {
  std::vector<double> epsilon_grid;
  std::vector<double> eta_hat;
  std::vector<bool> used;
  double beta = 0.0;
  double alpha_intercept = 0.0;
  double alpha_constrained = 0.0;
  double r2 = 0.0;

  bool operator==(const GapFit&) const = default;
};

/// Fraction of margins strictly below epsilon. `sorted_margins` must be
/// sorted ascending.
double eta_hat(std::span<const double> sorted_margins, double epsilon);

/// Nearest-rank quantile of an ascending-sorted sample, p in [0, 1].
double nearest_rank(std::span<const double> sorted, double p);

GapFit fit_gap_curve(std::span<const double> margins, const GapGridSpec& grid = {});

struct MarginQuantiles {
  double q05 = 0.0;
  double q25 = 0.0;
  double median = 0.0;
  double q75 = 0.0;
  double q95 = 0.0;
  double pr_below_half = 0.0;
};

MarginQuantiles margin_quantiles(std::span<const double> margins);

/// Average (mid) ranks, 1-based.
std::vector<double> mid_ranks(std::span<const double> values);

/// Spearman rank correlation with mid-rank ties. Throws NumericalError when
/// either input is constant.
double spearman(std::span<const double> x, std::span<const double> y);

/// Margins of a record list, in record order.
std::vector<double> margins_of(std::span<const MarginRecord> records);

}  // namespace vmargin

#endif  // VMARGIN_MARGIN_HPP
