#ifndef VMARGIN_OBJECTIVES_HPP
#define VMARGIN_OBJECTIVES_HPP

// Margin-refinement objectives and the combined training loss
//
//   L = ce_weight * CE + lambda_mrp * L_mrp
//
// where L_mrp is either the gated margin loss or the top-k Fisher distance
// loss. Each loss has a tape form (for training) and a value form.

#include <cstddef>
#include <span>
#include <string>
#include <string_view>

#include "vmargin/autodiff.hpp"
#include "vmargin/margin.hpp"
#include "vmargin/matrix.hpp"

namespace vmargin {

enum class Objective { kMargin, kFisher };

std::string_view to_string(Objective o);
Objective parse_objective(std::string_view s);

struct MrpConfig {
  Objective objective = Objective::kMargin;
  double lambda_mrp = 0.0;
  double tau = 0.5;
  std::size_t k = 5;
  double clamp_floor = 1e-8;
  double ce_weight = 1.0;

  /// Throws UsageError on an invalid combination.
  void validate() const;
};

/// -mean(margin) over rows whose top-1/top-2 margin is below tau; 0 when no
/// row qualifies.
ad::Var margin_loss(ad::Var logits, double tau);

/// -mean over rows of sum_{i != j} p_i p_j d_F(i, j), restricted to the top-k
/// renormalized distribution. `unembedding` is V x d.
ad::Var fisher_loss(ad::Var logits, ad::Var unembedding, std::size_t k,
                    double clamp_floor = 1e-8);

/// Mean negative log-likelihood of `targets`, one per row.
ad::Var cross_entropy(ad::Var logits, std::span<const TokenId> targets);

/// The selected refinement objective alone.
ad::Var mrp_loss(ad::Var logits, ad::Var unembedding, const MrpConfig& config);

ad::Var combined_loss(ad::Var logits, ad::Var unembedding, std::span<const TokenId> targets,
                      const MrpConfig& config);

double margin_loss(const MatrixD& logits, double tau);
double fisher_loss(const MatrixD& logits, const MatrixD& unembedding, std::size_t k,
                   double clamp_floor = 1e-8);
double cross_entropy(const MatrixD& logits, std::span<const TokenId> targets);
double combined_loss(const MatrixD& logits, const MatrixD& unembedding,
                     std::span<const TokenId> targets, const MrpConfig& config);

/// Fisher distance between rows i and j of `normalized_rows` (k x d, unit
/// rows) under the covariance diag(p) - p p^T of the top-k distribution `p`.
/// Returns sqrt(max(d^2, clamp_floor)).
double fisher_distance(std::span<const double> p, const MatrixD& normalized_rows, std::size_t i,
                       std::size_t j, double clamp_floor = 1e-8);

}  // namespace vmargin

#endif  // VMARGIN_OBJECTIVES_HPP
