#include "vmargin/synth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "vmargin/error.hpp"
#include "vmargin/rng.hpp"

namespace vmargin {

std::string_view to_string(Sampler s) {
  return s == Sampler::kCircleUniform ? "circle_uniform" : "square_uniform";
}

Sampler parse_sampler(std::string_view s) {
  if (s == "circle_uniform" || s == "circle") return Sampler::kCircleUniform;
  if (s == "square_uniform" || s == "square") return Sampler::kSquareUniform;
  throw UsageError("unknown sampler '" + std::string(s) + "' (expected circle or square)");
}

void ManifoldSpec::validate() const {
  const std::size_t expect_k = sampler == Sampler::kCircleUniform ? 1 : 2;
  if (intrinsic_dim != expect_k) {
    throw UsageError(std::string(to_string(sampler)) + " has intrinsic dimension " +
                     std::to_string(expect_k));
  }
  if (ambient_dim < 2) throw UsageError("ambient_dim must be at least 2");
  if (sites.cols() != ambient_dim) {
    throw UsageError("sites have " + std::to_string(sites.cols()) + " columns, ambient_dim is " +
                     std::to_string(ambient_dim));
  }
  if (sites.rows() < 2) throw UsageError("at least two sites are required");
  for (double v : sites.values()) {
    if (!std::isfinite(v)) throw UsageError("non-finite site coordinate");
  }
  for (std::size_t i = 0; i < sites.rows(); ++i) {
    for (std::size_t j = i + 1; j < sites.rows(); ++j) {
      if (std::ranges::equal(sites.row(i), sites.row(j))) {
        throw UsageError("sites " + std::to_string(i) + " and " + std::to_string(j) +
                         " are identical");
      }
    }
  }
}

MatrixD circle_sites(std::size_t count, std::size_t ambient_dim) {
  MatrixD s(count, ambient_dim);
  for (std::size_t i = 0; i < count; ++i) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(count);
    s(i, 0) = std::cos(a);
    s(i, 1) = std::sin(a);
  }
  return s;
}

MatrixD random_sites(std::size_t count, std::size_t ambient_dim, std::uint64_t seed) {
  Rng rng(seed);
  MatrixD s(count, ambient_dim);
  for (double& v : s.values()) v = rng.normal();
  return s;
}

ManifoldSpec antipodal_circle(std::size_t samples, std::uint64_t seed) {
  ManifoldSpec spec;
  spec.sites = MatrixD(2, 2, {1.0, 0.0, -1.0, 0.0});
  spec.sample_count = samples;
  spec.seed = seed;
  return spec;
}

namespace {

double logit(const MatrixD& sites, std::size_t v, std::span<const double> h) {
  double s = 0.0;
  for (std::size_t c = 0; c < h.size(); ++c) s += sites(v, c) * h[c];
  return s;
}

std::pair<std::size_t, std::size_t> top_two(const MatrixD& sites, std::span<const double> h) {
  std::size_t a = 0;
  std::size_t b = 1;
  double la = logit(sites, 0, h);
  double lb = logit(sites, 1, h);
  if (lb > la) {
    std::swap(a, b);
    std::swap(la, lb);
  }
  for (std::size_t v = 2; v < sites.rows(); ++v) {
    const double l = logit(sites, v, h);
    if (l > la) {
      b = a;
      lb = la;
      a = v;
      la = l;
    } else if (l > lb) {
      b = v;
      lb = l;
    }
  }
  return {a, b};
}

// Point on the manifold: angle for the circle, (u, v) for the square.
void place(Sampler s, double x, double y, std::span<double> h) {
  std::fill(h.begin(), h.end(), 0.0);
  if (s == Sampler::kCircleUniform) {
    h[0] = std::cos(x);
    h[1] = std::sin(x);
  } else {
    h[0] = x;
    h[1] = y;
  }
}

}  // namespace

double margin_at(const MatrixD& sites, std::span<const double> h) {
  const auto [a, b] = top_two(sites, h);
  return logit(sites, a, h) - logit(sites, b, h);
}

ManifoldSample generate(const ManifoldSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  ManifoldSample out;
  out.hidden = MatrixD(spec.sample_count, spec.ambient_dim);
  for (std::size_t i = 0; i < spec.sample_count; ++i) {
    if (spec.sampler == Sampler::kCircleUniform) {
      place(spec.sampler, 2.0 * std::numbers::pi * rng.uniform(), 0.0, out.hidden.row(i));
    } else {
      const double u = rng.uniform(-1.0, 1.0);
      const double v = rng.uniform(-1.0, 1.0);
      place(spec.sampler, u, v, out.hidden.row(i));
    }
  }
  MatrixD logits(spec.sample_count, spec.sites.rows());
  for (std::size_t i = 0; i < spec.sample_count; ++i) {
    for (std::size_t v = 0; v < spec.sites.rows(); ++v) {
      logits(i, v) = logit(spec.sites, v, out.hidden.row(i));
    }
  }
  const std::vector<TokenId> targets(spec.sample_count, 0);
  out.records = compute_margins(logits, targets);
  return out;
}

namespace {

double dense_alpha(const ManifoldSpec& spec, std::size_t points) {
  std::vector<double> h(spec.ambient_dim);
  std::size_t below = 0;
  std::size_t total = 0;
  if (spec.sampler == Sampler::kCircleUniform) {
    for (std::size_t i = 0; i < points; ++i) {
      const double t = 2.0 * std::numbers::pi * (static_cast<double>(i) + 0.5) /
                       static_cast<double>(points);
      place(spec.sampler, t, 0.0, h);
      if (margin_at(spec.sites, h) < kOracleEpsilon) ++below;
    }
    total = points;
  } else {
    const auto n = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(points))));
    for (std::size_t i = 0; i < n; ++i) {
      const double u = -1.0 + 2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j) {
        const double v = -1.0 + 2.0 * (static_cast<double>(j) + 0.5) / static_cast<double>(n);
        place(spec.sampler, u, v, h);
        if (margin_at(spec.sites, h) < kOracleEpsilon) ++below;
      }
    }
    total = n * n;
  }
  return static_cast<double>(below) / static_cast<double>(total) / kOracleEpsilon;
}

}  // namespace

double oracle_alpha(const ManifoldSpec& spec) {
  spec.validate();
  constexpr std::size_t kPoints = 10'000'000;
  const double coarse = dense_alpha(spec, kPoints);
  const double fine = dense_alpha(spec, 2 * kPoints);
  if (!(fine > 0.0)) {
    throw NumericalError("oracle_alpha: no grid point has margin below " +
                         std::to_string(kOracleEpsilon));
  }
  const double change = std::abs(fine - coarse) / fine;
  if (change > 0.005) {
    throw NumericalError("oracle_alpha did not converge: grid doubling changed alpha by " +
                         std::to_string(100.0 * change) + "%");
  }
  return fine;
}

double gradient_floor(const ManifoldSpec& spec, const ManifoldSample& sample) {
  const auto& recs = sample.records;
  if (recs.empty()) throw UsageError("gradient_floor: no samples");
  std::vector<double> sorted = margins_of(recs);
  std::sort(sorted.begin(), sorted.end());
  const double cutoff = nearest_rank(sorted, 0.01);

  constexpr double kStep = 1e-5;
  std::vector<double> h(spec.ambient_dim);
  double floor = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < recs.size(); ++i) {
    if (recs[i].margin > cutoff) continue;
    const auto a = static_cast<std::size_t>(recs[i].top1);
    const auto b = static_cast<std::size_t>(recs[i].top2);
    auto diff = [&](double x, double y) {
      place(spec.sampler, x, y, h);
      return logit(spec.sites, a, h) - logit(spec.sites, b, h);
    };
    const auto p = sample.hidden.row(i);
    double norm = 0.0;
    if (spec.sampler == Sampler::kCircleUniform) {
      const double t = std::atan2(p[1], p[0]);
      norm = std::abs(diff(t + kStep, 0.0) - diff(t - kStep, 0.0)) / (2.0 * kStep);
    } else {
      const double gu = (diff(p[0] + kStep, p[1]) - diff(p[0] - kStep, p[1])) / (2.0 * kStep);
      const double gv = (diff(p[0], p[1] + kStep) - diff(p[0], p[1] - kStep)) / (2.0 * kStep);
      norm = std::hypot(gu, gv);
    }
    floor = std::min(floor, norm);
  }
  return floor;
}

ScalingVerdict validate_scaling(const ManifoldSpec& spec) {
  if (spec.sample_count < 100'000) {
    throw UsageError("validate_scaling needs at least 1e5 samples, got " +
                     std::to_string(spec.sample_count));
  }
  const auto sample = generate(spec);
  ScalingVerdict v;
  v.fit = fit_gap_curve(margins_of(sample.records));
  v.oracle_alpha = oracle_alpha(spec);
  v.relative_alpha_error = std::abs(v.fit.alpha_constrained - v.oracle_alpha) / v.oracle_alpha;
  v.gradient_floor = gradient_floor(spec, sample);
  return v;
}

}  // namespace vmargin
