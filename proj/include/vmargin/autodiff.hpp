#ifndef VMARGIN_AUTODIFF_HPP
#define VMARGIN_AUTODIFF_HPP

// Minimal reverse-mode differentiation over 2-D double tensors.
//
// A Tape records every primitive application in order; the recording order is
// a topological order, so backward() walks it once in reverse. Top-k and mask
// selections are resolved during the forward pass and frozen: gradients flow
// through the selected values only, never through the choice of index.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "vmargin/matrix.hpp"

namespace vmargin::ad {

class Tape;

/// Handle to a tensor recorded on a tape. Cheap to copy; valid while the tape
/// lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  std::size_t rows() const;
  std::size_t cols() const;
  std::size_t size() const { return rows() * cols(); }
  bool requires_grad() const;
  const std::vector<double>& value() const;
  double item() const;  // value of a 1x1 tensor
  double at(std::size_t r, std::size_t c) const;
  /// Accumulated gradient; all zeros until backward() reaches this node.
  const std::vector<double>& grad() const;
  MatrixD value_matrix() const;
  MatrixD grad_matrix() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(const MatrixD& m);
  Var constant(std::size_t rows, std::size_t cols, std::vector<double> values);
  Var parameter(const MatrixD& m);
  Var scalar(double v);

  /// Seeds d(out)/d(out) = 1 and propagates to every node that requires grad.
  /// `out` must be 1x1. Gradients accumulate across calls.
  void backward(Var out);
  void zero_grad();

  std::size_t size() const { return nodes_.size(); }

  // Used by primitive implementations.
  Var record(std::size_t rows, std::size_t cols, std::vector<double> value,
             std::span<const Var> parents, BackwardFn backward);
  const std::vector<double>& value(std::size_t id) const { return nodes_[id].value; }
  std::vector<double>& grad(std::size_t id);
  std::size_t rows(std::size_t id) const { return nodes_[id].rows; }
  std::size_t cols(std::size_t id) const { return nodes_[id].cols; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// Linear algebra.
Var matmul(Var a, Var b);     // (m x k) (k x n)
Var matmul_nt(Var a, Var b);  // (m x k) (n x k)^T
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scale(Var a, double s);

// Reductions.
Var sum(Var a);
Var mean(Var a);
/// Mean over entries with mask[i] set; a constant 0 when the mask is empty.
Var masked_mean(Var a, const std::vector<bool>& mask);

// Row-wise nonlinearities.
Var softmax(Var a);
/// Row r may only attend to columns c <= r; masked entries are exactly 0.
Var softmax_causal(Var a);
/// Column vector of log softmax(a)[r, index[r]].
Var log_softmax_gather(Var a, std::span<const std::size_t> index);
Var l2_normalize_rows(Var a);
Var rms_norm_rows(Var a, double eps = 1e-6);
Var gelu(Var a);
/// Elementwise sqrt(max(a, floor)); entries below the floor get zero gradient.
Var sqrt_clamped(Var a, double floor);

/// Row-wise top-k values (descending, lower index wins ties). The chosen
/// indices are frozen and exposed for reuse, e.g. to gather embedding rows.
struct TopK {
  Var values;                        // rows x k
  std::vector<std::size_t> indices;  // rows * k, row-major
};
TopK topk_values_gather(Var a, std::size_t k);

/// For each row x of `x` (m x k): x^T (diag(p) - p p^T) x, with p a 1 x k row.
Var quadratic_form(Var x, Var p);

// Indexing.
Var gather_rows(Var a, std::span<const std::size_t> index);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);

/// Reverse-mode gradient of `fn` at `points` against double-precision central
/// differences. Returns the worst per-coordinate relative error; coordinates
/// whose gradient magnitude is below 1e-6 are compared in absolute terms.
/// Throws NumericalError when fn evaluates to a non-finite value.
using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;
double grad_check(const ScalarFn& fn, const std::vector<MatrixD>& points, double step = 1e-6);
double grad_check(const std::function<Var(Tape&, Var)>& fn, const MatrixD& point,
                  double step = 1e-6);

}  // namespace vmargin::ad

#endif  // VMARGIN_AUTODIFF_HPP
