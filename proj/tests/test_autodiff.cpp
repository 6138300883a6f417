#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "vmargin/autodiff.hpp"
#include "vmargin/error.hpp"
#include "vmargin/rng.hpp"

using namespace vmargin;
using ad::Tape;
using ad::Var;

namespace {

// Reduce a tensor to a scalar through a fixed random weighting so every
// output coordinate contributes a distinct amount.
Var probe(Tape& t, Var y, std::uint64_t seed) {
  Rng rng(seed);
  MatrixD w(y.rows(), y.cols());
  for (double& v : w.values()) v = rng.normal();
  return ad::sum(ad::mul(y, t.constant(w)));
}

struct Case {
  std::string name;
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
  std::function<Var(Tape&, std::span<const Var>)> fn;
};

std::vector<Case> primitive_cases() {
  std::vector<Case> cases;
  cases.push_back({"matmul", {{4, 3}, {3, 2}}, [](Tape&, std::span<const Var> x) {
                     return ad::matmul(x[0], x[1]);
                   }});
  cases.push_back({"matmul_nt", {{4, 3}, {5, 3}}, [](Tape&, std::span<const Var> x) {
                     return ad::matmul_nt(x[0], x[1]);
                   }});
  cases.push_back({"transpose", {{3, 5}}, [](Tape&, std::span<const Var> x) {
                     return ad::transpose(x[0]);
                   }});
  cases.push_back({"add", {{3, 4}, {3, 4}}, [](Tape&, std::span<const Var> x) {
                     return ad::add(x[0], x[1]);
                   }});
  cases.push_back({"sub", {{3, 4}, {3, 4}}, [](Tape&, std::span<const Var> x) {
                     return ad::sub(x[0], x[1]);
                   }});
  cases.push_back({"mul", {{3, 4}, {3, 4}}, [](Tape&, std::span<const Var> x) {
                     return ad::mul(x[0], x[1]);
                   }});
  cases.push_back({"scale", {{3, 4}}, [](Tape&, std::span<const Var> x) {
                     return ad::scale(x[0], -1.7);
                   }});
  cases.push_back({"mean", {{3, 4}}, [](Tape&, std::span<const Var> x) {
                     return ad::mean(x[0]);
                   }});
  cases.push_back({"softmax", {{3, 6}}, [](Tape&, std::span<const Var> x) {
                     return ad::softmax(x[0]);
                   }});
  cases.push_back({"softmax_causal", {{5, 5}}, [](Tape&, std::span<const Var> x) {
                     return ad::softmax_causal(x[0]);
                   }});
  cases.push_back({"log_softmax_gather", {{4, 7}}, [](Tape&, std::span<const Var> x) {
                     const std::size_t idx[] = {0, 6, 3, 3};
                     return ad::log_softmax_gather(x[0], idx);
                   }});
  cases.push_back({"topk_values_gather", {{4, 9}}, [](Tape&, std::span<const Var> x) {
                     return ad::topk_values_gather(x[0], 3).values;
                   }});
  cases.push_back({"l2_normalize_rows", {{4, 5}}, [](Tape&, std::span<const Var> x) {
                     return ad::l2_normalize_rows(x[0]);
                   }});
  cases.push_back({"rms_norm_rows", {{4, 5}}, [](Tape&, std::span<const Var> x) {
                     return ad::rms_norm_rows(x[0]);
                   }});
  cases.push_back({"gelu", {{4, 5}}, [](Tape&, std::span<const Var> x) {
                     return ad::gelu(x[0]);
                   }});
  cases.push_back({"sqrt_clamped", {{3, 4}}, [](Tape&, std::span<const Var> x) {
                     // Square first so the argument stays above the floor.
                     return ad::sqrt_clamped(ad::add(ad::mul(x[0], x[0]), ad::mul(x[0], x[0])),
                                             1e-8);
                   }});
  cases.push_back({"masked_mean", {{2, 5}}, [](Tape&, std::span<const Var> x) {
                     return ad::masked_mean(x[0], {true, false, true, true, false, false, true,
                                                   false, false, true});
                   }});
  cases.push_back({"quadratic_form", {{6, 4}, {1, 4}}, [](Tape&, std::span<const Var> x) {
                     return ad::quadratic_form(x[0], x[1]);
                   }});
  cases.push_back({"gather_rows", {{5, 3}}, [](Tape&, std::span<const Var> x) {
                     const std::size_t idx[] = {4, 0, 4, 2};
                     return ad::gather_rows(x[0], idx);
                   }});
  cases.push_back({"slice_rows", {{5, 3}}, [](Tape&, std::span<const Var> x) {
                     return ad::slice_rows(x[0], 1, 3);
                   }});
  cases.push_back({"slice_cols", {{3, 6}}, [](Tape&, std::span<const Var> x) {
                     return ad::slice_cols(x[0], 2, 3);
                   }});
  cases.push_back({"concat_rows", {{2, 3}, {4, 3}}, [](Tape&, std::span<const Var> x) {
                     return ad::concat_rows(x);
                   }});
  cases.push_back({"concat_cols", {{3, 2}, {3, 4}}, [](Tape&, std::span<const Var> x) {
                     return ad::concat_cols(x);
                   }});
  return cases;
}

}  // namespace

TEST_CASE("softmax of two equal logits") {
  Tape t;
  Var x = t.parameter(MatrixD(1, 2, {0.0, 0.0}));
  Var y = ad::softmax(x);
  CHECK(y.at(0, 0) == 0.5);
  CHECK(y.at(0, 1) == 0.5);
  t.backward(ad::slice_cols(y, 0, 1));
  CHECK(x.grad()[0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(x.grad()[1] == doctest::Approx(-0.25).epsilon(1e-15));
}

TEST_CASE("sqrt_clamped at zero returns sqrt(floor) with finite gradient") {
  Tape t;
  Var x = t.parameter(MatrixD(1, 1, {0.0}));
  Var y = ad::sqrt_clamped(x, 1e-8);
  CHECK(y.item() == doctest::Approx(1e-4).epsilon(1e-12));
  t.backward(y);
  CHECK(std::isfinite(x.grad()[0]));
  CHECK_THROWS_AS(ad::sqrt_clamped(x, 0.0), UsageError);
}

TEST_CASE("grad_check of x^2 at 3") {
  const double err = ad::grad_check([](Tape&, Var x) { return ad::sum(ad::mul(x, x)); },
                                    MatrixD(1, 1, {3.0}));
  CHECK(err < 1e-8);
}

TEST_CASE("grad_check rejects non-finite values") {
  CHECK_THROWS_AS(
      ad::grad_check([](Tape&, Var x) { return ad::sum(ad::scale(x, HUGE_VAL)); },
                     MatrixD(1, 1, {1.0})),
      NumericalError);
}

TEST_CASE("matmul forward matches double loops, backward matches finite differences") {
  Rng rng(21);
  auto a = oracle::random_matrix(rng, 4, 3);
  auto b = oracle::random_matrix(rng, 3, 2);
  Tape t;
  Var c = ad::matmul(t.constant(a), t.constant(b));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < 3; ++p) acc += a(i, p) * b(p, j);
      CHECK(c.at(i, j) == doctest::Approx(acc).epsilon(1e-15));
    }
  const double err = ad::grad_check(
      [](Tape& tape, std::span<const Var> x) { return probe(tape, ad::matmul(x[0], x[1]), 1); },
      {a, b});
  CHECK(err < 1e-4);
}

TEST_CASE("every primitive passes central differences on 100 seeded instances") {
  for (const auto& c : primitive_cases()) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng rng(1000 + seed);
      std::vector<MatrixD> points;
      for (auto [r, cols] : c.shapes) points.push_back(oracle::random_matrix(rng, r, cols));
      const auto err = ad::grad_check(
          [&](Tape& t, std::span<const Var> x) { return probe(t, c.fn(t, x), seed); }, points);
      worst = std::max(worst, err);
    }
    INFO(c.name);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("topk_values_gather: backward touches selected entries only") {
  Tape t;
  Var x = t.parameter(MatrixD(2, 5, {0.1, 0.9, 0.5, 0.9, -1.0, 3.0, 2.0, 1.0, 0.0, -1.0}));
  auto top = ad::topk_values_gather(x, 2);
  CHECK(top.indices == std::vector<std::size_t>{1, 3, 0, 1});
  t.backward(ad::sum(top.values));
  CHECK(x.grad() == std::vector<double>{0, 1, 0, 1, 0, 1, 1, 0, 0, 0});
}

TEST_CASE("masked_mean with an empty mask is a constant zero") {
  Tape t;
  Var x = t.parameter(MatrixD(1, 3, {1.0, 2.0, 3.0}));
  Var y = ad::masked_mean(x, {false, false, false});
  CHECK(y.item() == 0.0);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("shape mismatches are usage errors") {
  Tape t;
  Var a = t.constant(MatrixD(2, 3));
  Var b = t.constant(MatrixD(2, 3));
  CHECK_THROWS_AS(ad::matmul(a, b), UsageError);
  CHECK_THROWS_AS(ad::add(a, t.constant(MatrixD(3, 2))), UsageError);
  CHECK_THROWS_AS(ad::quadratic_form(a, t.constant(MatrixD(1, 2))), UsageError);
  CHECK_THROWS_AS(ad::topk_values_gather(a, 4), UsageError);
  Tape other;
  CHECK_THROWS_AS(ad::add(a, other.constant(MatrixD(2, 3))), UsageError);
}

TEST_CASE("backward is deterministic") {
  Rng rng(31);
  auto a = oracle::random_matrix(rng, 6, 8);
  auto b = oracle::random_matrix(rng, 8, 5);
  auto run = [&] {
    Tape t;
    Var x = t.parameter(a);
    Var y = t.parameter(b);
    Var s = ad::softmax(ad::matmul(x, y));
    t.backward(probe(t, ad::l2_normalize_rows(s), 3));
    return std::make_pair(x.grad(), y.grad());
  };
  CHECK(run() == run());
}

TEST_CASE("gradients accumulate through shared parents") {
  Tape t;
  Var x = t.parameter(MatrixD(1, 2, {2.0, -3.0}));
  t.backward(ad::sum(ad::add(x, x)));
  CHECK(x.grad() == std::vector<double>{2.0, 2.0});
}
