#ifndef VMARGIN_SYNTH_HPP
#define VMARGIN_SYNTH_HPP

// Synthetic manifolds with known token sites, for checking the linear
// small-epsilon law eta(eps) = alpha * eps + O(eps^2).
//
// Hidden states live in the first two ambient coordinates: on the unit
// circle (k = 1) or uniformly in the square [-1, 1]^2 (k = 2). Logits are
// sites * h.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "vmargin/margin.hpp"
#include "vmargin/matrix.hpp"

namespace vmargin {

enum class Sampler { kCircleUniform, kSquareUniform };

std::string_view to_string(Sampler s);
Sampler parse_sampler(std::string_view s);

struct ManifoldSpec {
  std::size_t intrinsic_dim = 1;
  std::size_t ambient_dim = 2;
  MatrixD sites;  // V x ambient_dim
  Sampler sampler = Sampler::kCircleUniform;
  std::size_t sample_count = 1'000'000;
  std::uint64_t seed = 0;

  /// Throws UsageError on a shape mismatch, fewer than two sites, or
  /// duplicate site rows.
  void validate() const;
};

/// `count` unit sites at angles 2*pi*i/count in the first two coordinates.
MatrixD circle_sites(std::size_t count, std::size_t ambient_dim = 2);

/// Seeded Gaussian sites.
MatrixD random_sites(std::size_t count, std::size_t ambient_dim, std::uint64_t seed);

/// The two-site antipodal circle: sites (1, 0) and (-1, 0).
ManifoldSpec antipodal_circle(std::size_t samples = 1'000'000, std::uint64_t seed = 0);

struct ManifoldSample {
  MatrixD hidden;  // sample_count x ambient_dim
  std::vector<MarginRecord> records;
};

ManifoldSample generate(const ManifoldSpec& spec);

/// Margin at one hidden state; same tie rule as compute_margins.
double margin_at(const MatrixD& sites, std::span<const double> h);

inline constexpr double kOracleEpsilon = 1e-3;

/// Dense midpoint-grid estimate of alpha = eta(eps_ref) / eps_ref, computed
/// at two grid densities (>= 1e7 and twice that). Returns the finer value;
/// throws NumericalError when the two differ by more than 0.5%.
double oracle_alpha(const ManifoldSpec& spec);

struct ScalingVerdict {
  GapFit fit;
  double oracle_alpha = 0.0;
  double relative_alpha_error = 0.0;  // |alpha_constrained - oracle| / oracle
  double gradient_floor = 0.0;

  bool operator==(const ScalingVerdict&) const = default;
};

/// Smallest finite-difference norm of the top1-minus-top2 logit gradient
/// along the manifold, over the 1% of samples nearest the boundary.
double gradient_floor(const ManifoldSpec& spec, const ManifoldSample& sample);

/// Requires sample_count >= 1e5.
ScalingVerdict validate_scaling(const ManifoldSpec& spec);

}  // namespace vmargin

#endif  // VMARGIN_SYNTH_HPP
