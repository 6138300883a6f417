#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "vmargin/error.hpp"
#include "vmargin/margin.hpp"
#include "vmargin/rng.hpp"

using namespace vmargin;

namespace {

// Rounds by comparing distances to the two neighbouring bf16 values, rather
// than by the carry trick the library uses.
float bf16_by_distance(float x) {
  const std::uint32_t bits = std::bit_cast<std::uint32_t>(x);
  const std::uint32_t down_bits = bits & 0xFFFF0000u;
  const float down = std::bit_cast<float>(down_bits);
  if (down_bits == bits) return x;
  const float up = std::bit_cast<float>(down_bits + 0x10000u);
  const double dd = std::abs(static_cast<double>(x) - down);
  const double du = std::abs(static_cast<double>(up) - x);
  if (dd < du) return down;
  if (du < dd) return up;
  return ((down_bits >> 16) & 1u) == 0 ? down : up;
}

}  // namespace

TEST_CASE("compute_margins: worked rows") {
  MatrixD logits(2, 3, {3.0, 1.0, 0.0, 1.0, 1.0, 0.0});
  std::vector<TokenId> targets = {0, 2};
  auto recs = compute_margins(logits, targets);
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].top1 == 0);
  CHECK(recs[0].top2 == 1);
  CHECK(recs[0].margin == 2.0);
  CHECK(recs[0].correct);
  // Tie: lower id wins.
  CHECK(recs[1].top1 == 0);
  CHECK(recs[1].top2 == 1);
  CHECK(recs[1].margin == 0.0);
  CHECK_FALSE(recs[1].correct);
}

TEST_CASE("compute_margins: matches full-sort oracle on random rows") {
  Rng rng(11);
  auto logits = oracle::random_matrix(rng, 100, 50);
  // Inject exact ties into a few rows.
  for (std::size_t r = 0; r < 100; r += 7) logits(r, 3) = logits(r, 17);
  std::vector<TokenId> targets(100);
  for (auto& t : targets) t = static_cast<TokenId>(rng.below(50));
  CHECK(compute_margins(logits, targets) == oracle::margins_by_full_sort(logits, targets));
}

TEST_CASE("compute_margins: invariants and shift invariance") {
  Rng rng(12);
  auto logits = oracle::random_matrix(rng, 200, 20);
  std::vector<TokenId> targets(200, 0);
  auto recs = compute_margins(logits, targets);
  // Shift by a power of two so the shifted logits are exact.
  MatrixD shifted = logits;
  for (double& v : shifted.values()) v += 64.0;
  auto recs2 = compute_margins(shifted, targets);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(recs[i].margin >= 0.0);
    CHECK(recs[i].top1 != recs[i].top2);
    CHECK(recs[i].correct == (recs[i].top1 == recs[i].target));
    CHECK(recs2[i].top1 == recs[i].top1);
    CHECK(recs2[i].top2 == recs[i].top2);
    CHECK(recs2[i].margin == doctest::Approx(recs[i].margin).epsilon(1e-12));
  }
}

TEST_CASE("compute_margins: errors") {
  MatrixF bad(2, 3, {1.0f, 2.0f, 3.0f, 0.0f, std::numeric_limits<float>::quiet_NaN(), 1.0f});
  std::vector<TokenId> targets = {0, 0};
  try {
    compute_margins(bad, targets);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("position 1") != std::string::npos);
  }
  MatrixF narrow(2, 1, {1.0f, 2.0f});
  CHECK_THROWS_AS(compute_margins(narrow, targets), UsageError);
  MatrixF ok(1, 3, {1.0f, 2.0f, 3.0f});
  CHECK_THROWS_AS(compute_margins(ok, targets), UsageError);
}

TEST_CASE("emulate_bf16: representable values and rounding") {
  CHECK(emulate_bf16(1.0f) == 1.0f);
  const float next = 1.0f + std::ldexp(1.0f, -7);
  CHECK(next == 1.0078125f);
  CHECK(emulate_bf16(next) == next);
  CHECK(emulate_bf16(1.0f + std::ldexp(1.0f, -8)) == 1.0f);  // halfway, even
  CHECK(emulate_bf16(1.0f + std::ldexp(1.0f, -8) + std::ldexp(1.0f, -20)) == next);
  // Halfway above an odd mantissa rounds up to even.
  CHECK(emulate_bf16(next + std::ldexp(1.0f, -8)) == 1.0f + std::ldexp(1.0f, -6));
  CHECK(std::isinf(emulate_bf16(std::numeric_limits<float>::infinity())));
  CHECK(std::isnan(emulate_bf16(std::numeric_limits<float>::quiet_NaN())));
  CHECK(std::signbit(emulate_bf16(-0.0f)));
}

TEST_CASE("emulate_bf16: matches distance oracle and is idempotent") {
  Rng rng(3);
  for (int i = 0; i < 1'000'000; ++i) {
    // Random bit patterns cover every exponent; skip non-finite ones.
    const auto bits = static_cast<std::uint32_t>(rng.next_u64());
    const float x = std::bit_cast<float>(bits);
    if (!std::isfinite(x) || std::abs(x) > 3.0e38f) continue;
    const float y = emulate_bf16(x);
    if (i % 10 == 0) REQUIRE(y == bf16_by_distance(x));
    REQUIRE(emulate_bf16(y) == y);
  }
}

TEST_CASE("recompute_fp32_logits: identity and double-precision oracle") {
  MatrixF eye(4, 4);
  for (std::size_t i = 0; i < 4; ++i) eye(i, i) = 1.0f;
  std::vector<float> h = {0.5f, -1.25f, 3.0f, 7.5f};
  CHECK(recompute_fp32_logits(h, eye) == h);

  Rng rng(5);
  MatrixF w(100, 32);
  for (float& v : w.values()) v = static_cast<float>(rng.normal());
  std::vector<float> hidden(32);
  for (float& v : hidden) v = static_cast<float>(rng.normal());
  auto logits = recompute_fp32_logits(hidden, w);
  for (std::size_t v = 0; v < 100; ++v) {
    double exact = 0.0;
    for (std::size_t i = 0; i < 32; ++i) exact += static_cast<double>(w(v, i)) * hidden[i];
    CHECK(std::abs(logits[v] - exact) < 2e-5);
  }

  std::vector<float> short_h(31);
  CHECK_THROWS_AS(recompute_fp32_logits(short_h, w), UsageError);
}

TEST_CASE("recompute_fp32_logits: bf16 rounding collapses margins") {
  Rng rng(6);
  MatrixF w(100, 32);
  for (float& v : w.values()) v = static_cast<float>(rng.normal());
  MatrixF hidden(500, 32);
  for (float& v : hidden.values()) v = static_cast<float>(rng.normal());
  auto logits = recompute_fp32_logits(hidden, w);
  std::vector<TokenId> targets(500, 0);
  auto fp32 = margins_of(compute_margins(logits, targets));
  auto bf16 = margins_of(compute_margins(emulate_bf16(logits), targets));
  CHECK(unique_value_count(bf16) < unique_value_count(fp32));
}

TEST_CASE("unique_value_count") {
  CHECK(unique_value_count(std::vector<double>{1.0, 1.0, 2.0}) == 2);
  CHECK(unique_value_count(std::vector<double>{}) == 0);
  CHECK(unique_value_count(std::vector<double>{0.0, -0.0}) == 1);

  Rng rng(7);
  MatrixF logits(10'000, 64);
  for (float& v : logits.values()) v = static_cast<float>(rng.uniform(1.0, 8.0));
  std::vector<TokenId> targets(10'000, 0);
  const auto fp32 = unique_value_count(margins_of(compute_margins(logits, targets)));
  const auto bf16 = unique_value_count(margins_of(compute_margins(emulate_bf16(logits), targets)));
  CHECK(static_cast<double>(bf16) <= 0.05 * static_cast<double>(fp32));
}

TEST_CASE("fit_gap_curve: exactly uniform margins") {
  std::vector<double> m(100'000);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = (static_cast<double>(i) + 0.5) / 1e5;
  auto fit = fit_gap_curve(m);
  CHECK(std::abs(fit.beta - 1.0) < 1e-3);
  CHECK(fit.r2 > 0.9999);
  CHECK(fit.alpha_intercept == doctest::Approx(1.0).epsilon(0.01));
  CHECK(fit.alpha_constrained == doctest::Approx(1.0).epsilon(0.01));

  for (double& v : m) v *= 2.0;
  auto half = fit_gap_curve(m);
  CHECK(half.alpha_constrained == doctest::Approx(0.5).epsilon(0.01));
  CHECK(std::abs(half.beta - 1.0) < 1e-3);
}

TEST_CASE("fit_gap_curve: eta_hat equals counting oracle on log-normal margins") {
  Rng rng(8);
  std::vector<double> m(20'000);
  for (double& v : m) v = std::exp(rng.normal() - 0.5);
  auto fit = fit_gap_curve(m);
  REQUIRE(fit.epsilon_grid.size() == 20);
  for (std::size_t i = 0; i < fit.epsilon_grid.size(); ++i) {
    CHECK(fit.eta_hat[i] == oracle::count_below(m, fit.epsilon_grid[i]));
    if (i > 0) {
      CHECK(fit.epsilon_grid[i] > fit.epsilon_grid[i - 1]);
      CHECK(fit.eta_hat[i] >= fit.eta_hat[i - 1]);
    }
  }
  CHECK(fit.r2 >= 0.0);
  CHECK(fit.r2 <= 1.0);
  std::vector<double> sorted = m;
  std::sort(sorted.begin(), sorted.end());
  CHECK(eta_hat(sorted, sorted.back() + 1.0) == 1.0);
}

TEST_CASE("fit_gap_curve: zero-count points are excluded, degenerate inputs fail") {
  // 20% exact zeros: low quantiles are zero, grid starts at the smallest
  // positive margin.
  std::vector<double> m(5000, 0.0);
  for (std::size_t i = 1000; i < m.size(); ++i) m[i] = static_cast<double>(i - 999) / 4000.0;
  auto fit = fit_gap_curve(m);
  CHECK(fit.epsilon_grid.front() == 1.0 / 4000.0);
  CHECK(fit.used.front());

  CHECK_THROWS_AS(fit_gap_curve(std::vector<double>(2000, 0.0)), NumericalError);
  CHECK_THROWS_AS(fit_gap_curve(std::vector<double>(2000, 1.0)), NumericalError);
  std::vector<double> ok(2000);
  for (std::size_t i = 0; i < ok.size(); ++i) ok[i] = static_cast<double>(i + 1);
  CHECK_THROWS_AS(fit_gap_curve(ok, GapGridSpec{3, 1e-4, 0.3}), NumericalError);
  CHECK_THROWS_AS(fit_gap_curve(std::vector<double>(10, 1.0)), UsageError);
}

TEST_CASE("margin_quantiles") {
  auto q = margin_quantiles(std::vector<double>{0, 1, 2, 3, 4});
  CHECK(q.median == 2.0);
  CHECK(margin_quantiles(std::vector<double>(10, 0.4)).pr_below_half == 1.0);
  CHECK_THROWS_AS(margin_quantiles(std::vector<double>{}), UsageError);

  Rng rng(9);
  std::vector<double> m(10'000);
  for (double& v : m) v = std::abs(rng.normal());
  auto got = margin_quantiles(m);
  std::vector<double> s = m;
  std::sort(s.begin(), s.end());
  // Nearest rank: the ceil(p n)-th smallest value.
  CHECK(got.q05 == s[499]);
  CHECK(got.q25 == s[2499]);
  CHECK(got.median == s[4999]);
  CHECK(got.q75 == s[7499]);
  CHECK(got.q95 == s[9499]);
  CHECK(got.pr_below_half == oracle::count_below(m, 0.5));
  CHECK(got.q05 <= got.q25);
  CHECK(got.q25 <= got.median);
  CHECK(got.median <= got.q75);
  CHECK(got.q75 <= got.q95);
}

TEST_CASE("spearman") {
  CHECK(spearman(std::vector<double>{1, 2, 3}, std::vector<double>{10, 20, 30}) == 1.0);
  CHECK(spearman(std::vector<double>{1, 2, 3}, std::vector<double>{3, 2, 1}) == -1.0);
  CHECK_THROWS_AS(spearman(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}),
                  NumericalError);
  CHECK_THROWS_AS(spearman(std::vector<double>{1, 2}, std::vector<double>{1, 2}), UsageError);

  Rng rng(10);
  std::vector<double> x(500);
  std::vector<double> y(500);
  for (std::size_t i = 0; i < 500; ++i) {
    x[i] = static_cast<double>(rng.below(40));  // heavy ties
    y[i] = x[i] * 3.0 + static_cast<double>(rng.below(25));  // integers
  }
  const double rho = spearman(x, y);
  CHECK(std::abs(rho - oracle::spearman_brute(x, y)) < 1e-12);

  // Invariance under a strictly increasing transform.
  std::vector<double> gy(500);
  for (std::size_t i = 0; i < 500; ++i) gy[i] = std::exp(0.1 * y[i]) - 3.0;
  CHECK(std::abs(spearman(x, gy) - rho) < 1e-15);
}
