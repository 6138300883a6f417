#include "vmargin/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "vmargin/error.hpp"
#include "vmargin/margin.hpp"

namespace vmargin::ad {

// ---------------------------------------------------------------------------
// Var / Tape

std::size_t Var::rows() const { return tape_->rows(id_); }
std::size_t Var::cols() const { return tape_->cols(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }
const std::vector<double>& Var::value() const { return tape_->value(id_); }
double Var::item() const {
  if (size() != 1) throw UsageError("item() on a tensor that is not 1x1");
  return value()[0];
}
double Var::at(std::size_t r, std::size_t c) const { return value()[r * cols() + c]; }
const std::vector<double>& Var::grad() const { return tape_->grad(id_); }
MatrixD Var::value_matrix() const { return MatrixD(rows(), cols(), value()); }
MatrixD Var::grad_matrix() const { return MatrixD(rows(), cols(), grad()); }

Var Tape::constant(const MatrixD& m) { return constant(m.rows(), m.cols(), m.values()); }

Var Tape::constant(std::size_t rows, std::size_t cols, std::vector<double> values) {
  if (values.size() != rows * cols) throw UsageError("constant: storage does not match shape");
  return record(rows, cols, std::move(values), {}, nullptr);
}

Var Tape::parameter(const MatrixD& m) {
  Var v = record(m.rows(), m.cols(), m.values(), {}, nullptr);
  nodes_[v.id()].requires_grad = true;
  return v;
}

Var Tape::scalar(double v) { return constant(1, 1, {v}); }

Var Tape::record(std::size_t rows, std::size_t cols, std::vector<double> value,
                 std::span<const Var> parents, BackwardFn backward) {
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.value = std::move(value);
  for (const Var& p : parents) {
    if (p.tape() != this) throw UsageError("operands recorded on different tapes");
    n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

std::vector<double>& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Tape::backward(Var out) {
  if (out.tape() != this) throw UsageError("backward: variable belongs to another tape");
  if (out.size() != 1) throw UsageError("backward: output must be a 1x1 tensor");
  if (!nodes_[out.id()].requires_grad) return;
  grad(out.id())[0] += 1.0;
  for (std::size_t i = out.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, i);
  }
}

void Tape::zero_grad() {
  for (Node& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

namespace {

void require_same_tape(Var a, Var b) {
  if (a.tape() != b.tape()) throw UsageError("operands recorded on different tapes");
}

void require_same_shape(Var a, Var b, const char* op) {
  require_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw UsageError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

// C (m x n) += A (m x k) * B (k x n)
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C (m x n) += A (m x k) * B^T, B is (n x k)
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c[i * n + j] += acc;
    }
  }
}

// C (m x n) += A^T * B, A is (k x m), B is (k x n)
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = ap[i];
      if (api == 0.0) continue;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const std::size_t m = a.rows();
  const std::size_t k = a.cols();
  const std::size_t n = b.cols();
  if (b.rows() != k) {
    throw UsageError("matmul: inner dimensions differ (" + std::to_string(k) + " vs " +
                     std::to_string(b.rows()) + ")");
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.value().data(), b.value().data(), out.data(), m, k, n);
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  Var parents[] = {a, b};
  return a.tape()->record(m, n, std::move(out), parents, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) gemm_nt(g.data(), t.value(ib).data(), t.grad(ia).data(), m, n, k);
    if (t.requires_grad(ib)) gemm_tn(t.value(ia).data(), g.data(), t.grad(ib).data(), k, m, n);
  });
}

Var matmul_nt(Var a, Var b) {
  require_same_tape(a, b);
  const std::size_t m = a.rows();
  const std::size_t k = a.cols();
  const std::size_t n = b.rows();
  if (b.cols() != k) {
    throw UsageError("matmul_nt: inner dimensions differ (" + std::to_string(k) + " vs " +
                     std::to_string(b.cols()) + ")");
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nt(a.value().data(), b.value().data(), out.data(), m, k, n);
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  Var parents[] = {a, b};
  return a.tape()->record(m, n, std::move(out), parents, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);  // m x n
    if (t.requires_grad(ia)) gemm_nn(g.data(), t.value(ib).data(), t.grad(ia).data(), m, n, k);
    if (t.requires_grad(ib)) gemm_tn(g.data(), t.value(ia).data(), t.grad(ib).data(), n, m, k);
  });
}

Var transpose(Var a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  std::vector<double> out(m * n);
  const auto& v = a.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = v[i * n + j];
  const std::size_t ia = a.id();
  Var parents[] = {a};
  return a.tape()->record(n, m, std::move(out), parents, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  std::vector<double> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  Var parents[] = {a, b};
  return a.tape()->record(a.rows(), a.cols(), std::move(out), parents,
                          [=](Tape& t, std::size_t self) {
                            const auto& g = t.grad(self);
                            for (std::size_t id : {ia, ib}) {
                              if (!t.requires_grad(id)) continue;
                              auto& gp = t.grad(id);
                              for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
                            }
                          });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  Var parents[] = {a, b};
  return a.tape()->record(a.rows(), a.cols(), std::move(out), parents,
                          [=](Tape& t, std::size_t self) {
                            const auto& g = t.grad(self);
                            if (t.requires_grad(ia)) {
                              auto& ga = t.grad(ia);
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                            }
                            if (t.requires_grad(ib)) {
                              auto& gb = t.grad(ib);
                              for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                            }
                          });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  Var parents[] = {a, b};
  return a.tape()->record(a.rows(), a.cols(), std::move(out), parents,
                          [=](Tape& t, std::size_t self) {
                            const auto& g = t.grad(self);
                            if (t.requires_grad(ia)) {
                              auto& ga = t.grad(ia);
                              const auto& vb = t.value(ib);
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
                            }
                            if (t.requires_grad(ib)) {
                              auto& gb = t.grad(ib);
                              const auto& va = t.value(ia);
                              for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
                            }
                          });
}

Var scale(Var a, double s) {
  std::vector<double> out = a.value();
  for (double& v : out) v *= s;
  const std::size_t ia = a.id();
  Var parents[] = {a};
  return a.tape()->record(a.rows(), a.cols(), std::move(out), parents,
                          [=](Tape& t, std::size_t self) {
                            const auto& g = t.grad(self);
                            auto& ga = t.grad(ia);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
                          });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(Var a) {
  double acc = 0.0;
  for (double v : a.value()) acc += v;
  const std::size_t ia = a.id();
  Var parents[] = {a};
  return a.tape()->record(1, 1, {acc}, parents, [=](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (double& v : t.grad(ia)) v += g;
  });
}

Var mean(Var a) {
  if (a.size() == 0) throw UsageError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Var masked_mean(Var a, const std::vector<bool>& mask) {
  if (mask.size() != a.size()) throw UsageError("masked_mean: mask size does not match tensor");
  std::size_t count = 0;
  double acc = 0.0;
  const auto& v = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (mask[i]) {
      acc += v[i];
      ++count;
    }
  }
  if (count == 0) return a.tape()->scalar(0.0);
  const double inv = 1.0 / static_cast<double>(count);
  const std::size_t ia = a.id();
  Var parents[] = {a};
  return a.tape()->record(1, 1, {acc * inv}, parents, [=](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0] * inv;
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (mask[i]) ga[i] += g;
  });
}

// ---------------------------------------------------------------------------
// Row-wise nonlinearities

namespace {

// Shared softmax; `limit(r)` is the number of live columns in row r.
template <typename Limit>
Var softmax_impl(Var a, Limit limit) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  const auto& v = a.value();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    const std::size_t live = limit(r);
    const double* x = v.data() + r * n;
    double* y = out.data() + r * n;
    double mx = x[0];
    for (std::size_t c = 1; c < live; ++c) mx = std::max(mx, x[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < live; ++c) {
      y[c] = std::exp(x[c] - mx);
      z += y[c];
    }
    for (std::size_t c = 0; c < live; ++c) y[c] /= z;
  }
  const std::size_t ia = a.id();
  Var parents[] = {a};
  return a.tape()->record(m, n, std::move(out), parents, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& ga = t.grad(ia);
    for (std::size_t r = 0; r < m; ++r) {
      const std::size_t live = limit(r);
      const std::size_t off = r * n;
      double dot = 0.0;
      for (std::size_t c = 0; c < live; ++c) dot += g[off + c] * y[off + c];
      for (std::size_t c = 0; c < live; ++c) ga[off + c] += y[off + c] * (g[off + c] - dot);
    }
  });
}

}  // namespace

Var softmax(Var a) {
  const std::size_t n = a.cols();
  if (n == 0) throw UsageError("softmax: empty rows");
  return softmax_impl(a, [n](std::size_t) { return n; });
}

Var softmax_causal(Var a) {
  const std::size_t n = a.cols();
  if (a.rows() > n) throw UsageError("softmax_causal: more rows than columns");
  return softmax_impl(a, [](std::size_t r) { return r + 1; });
}

Var log_softmax_gather(Var a, std::span<const std::size_t> index) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  if (index.size() != m) throw UsageError("log_softmax_gather: one index per row required");
  const auto& v = a.value();
  std::vector<double> out(m);
  std::vector<double> lse(m);
  std::vector<std::size_t> idx(index.begin(), index.end());
  for (std::size_t r = 0; r < m; ++r) {
    if (idx[r] >= n) {
      throw DataError("log_softmax_gather: index " + std::to_string(idx[r]) +
                      " out of range at row " + std::to_string(r));
    }
    const double* x = v.data() + r * n;
    double mx = x[0];
    for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, x[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(x[c] - mx);
    lse[r] = mx + std::log(z);
    out[r] = x[idx[r]] - lse[r];
  }
  const std::size_t ia = a.id();
  Var parents[] = {a};
  return a.tape()->record(m, 1, std::move(out), parents,
                          [=, lse = std::move(lse), idx = std::move(idx)](Tape& t,
                                                                          std::size_t self) {
                            const auto& g = t.grad(self);
                            const auto& x = t.value(ia);
                            auto& ga = t.grad(ia);
                            for (std::size_t r = 0; r < m; ++r) {
                              const std::size_t off = r * n;
                              for (std::size_t c = 0; c < n; ++c) {
                                ga[off + c] -= g[r] * std::exp(x[off + c] - lse[r]);
                              }
                              ga[off + idx[r]] += g[r];
                            }
                          });
}

Var l2_normalize_rows(Var a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  const auto& v = a.value();
  std::vector<double> out(m * n);
  std::vector<double> norms(m);
  for (std::size_t r = 0; r < m; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < n; ++c) ss += v[r * n + c] * v[r * n + c];
    const double nr = std::sqrt(ss);
    if (!(nr > 0.0)) throw NumericalError("l2_normalize_rows: zero row " + std::to_string(r));
    norms[r] = nr;
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = v[r * n + c] / nr;
  }
  const std::size_t ia = a.id();
  Var parents[] = {a};
  return a.tape()->record(m, n, std::move(out), parents,
                          [=, norms = std::move(norms)](Tape& t, std::size_t self) {
                            const auto& g = t.grad(self);
                            const auto& y = t.value(self);
                            auto& ga = t.grad(ia);
                            for (std::size_t r = 0; r < m; ++r) {
                              const std::size_t off = r * n;
                              double dot = 0.0;
                              for (std::size_t c = 0; c < n; ++c) dot += g[off + c] * y[off + c];
                              for (std::size_t c = 0; c < n; ++c) {
                                ga[off + c] += (g[off + c] - dot * y[off + c]) / norms[r];
                              }
                            }
                          });
}

Var rms_norm_rows(Var a, double eps) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  const auto& v = a.value();
  std::vector<double> out(m * n);
  std::vector<double> inv(m);
  for (std::size_t r = 0; r < m; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < n; ++c) ss += v[r * n + c] * v[r * n + c];
    inv[r] = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = v[r * n + c] * inv[r];
  }
  const std::size_t ia = a.id();
  Var parents[] = {a};
  return a.tape()->record(
      m, n, std::move(out), parents, [=, inv = std::move(inv)](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& y = t.value(self);
        auto& ga = t.grad(ia);
        const double dn = static_cast<double>(n);
        for (std::size_t r = 0; r < m; ++r) {
          const std::size_t off = r * n;
          double dot = 0.0;
          for (std::size_t c = 0; c < n; ++c) dot += g[off + c] * y[off + c];
          for (std::size_t c = 0; c < n; ++c) {
            ga[off + c] += inv[r] * (g[off + c] - y[off + c] * dot / dn);
          }
        }
      });
}

Var gelu(Var a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const auto& v = a.value();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = v[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
  }
  const std::size_t ia = a.id();
  Var parents[] = {a};
  return a.tape()->record(a.rows(), a.cols(), std::move(out), parents,
                          [=](Tape& t, std::size_t self) {
                            const auto& g = t.grad(self);
                            const auto& x = t.value(ia);
                            auto& ga = t.grad(ia);
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              const double xi = x[i];
                              const double u = kC * (xi + kA * xi * xi * xi);
                              const double th = std::tanh(u);
                              const double du = kC * (1.0 + 3.0 * kA * xi * xi);
                              const double d = 0.5 * (1.0 + th) + 0.5 * xi * (1.0 - th * th) * du;
                              ga[i] += g[i] * d;
                            }
                          });
}

Var sqrt_clamped(Var a, double floor) {
  if (!(floor > 0.0)) throw UsageError("sqrt_clamped: floor must be positive");
  const auto& v = a.value();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::sqrt(std::max(v[i], floor));
  const std::size_t ia = a.id();
  Var parents[] = {a};
  return a.tape()->record(a.rows(), a.cols(), std::move(out), parents,
                          [=](Tape& t, std::size_t self) {
                            const auto& g = t.grad(self);
                            const auto& x = t.value(ia);
                            const auto& y = t.value(self);
                            auto& ga = t.grad(ia);
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              if (x[i] >= floor) ga[i] += g[i] * 0.5 / y[i];
                            }
                          });
}

TopK topk_values_gather(Var a, std::size_t k) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  if (k == 0 || k > n) {
    throw UsageError("topk_values_gather: k=" + std::to_string(k) + " with " + std::to_string(n) +
                     " columns");
  }
  const auto& v = a.value();
  TopK result;
  result.indices.reserve(m * k);
  std::vector<double> out(m * k);
  for (std::size_t r = 0; r < m; ++r) {
    auto row = std::span<const double>(v.data() + r * n, n);
    auto idx = top_k_indices(row, k);
    for (std::size_t j = 0; j < k; ++j) {
      out[r * k + j] = row[idx[j]];
      result.indices.push_back(idx[j]);
    }
  }
  const std::size_t ia = a.id();
  Var parents[] = {a};
  result.values = a.tape()->record(
      m, k, std::move(out), parents, [=, idx = result.indices](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad(ia);
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < k; ++j) ga[r * n + idx[r * k + j]] += g[r * k + j];
      });
  return result;
}

Var quadratic_form(Var x, Var p) {
  require_same_tape(x, p);
  const std::size_t m = x.rows();
  const std::size_t k = x.cols();
  if (p.rows() != 1 || p.cols() != k) throw UsageError("quadratic_form: p must be 1 x k");
  const auto& xv = x.value();
  const auto& pv = p.value();
  std::vector<double> out(m);
  std::vector<double> px(m);  // p . x per row
  for (std::size_t r = 0; r < m; ++r) {
    double sq = 0.0;
    double dot = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const double xi = xv[r * k + c];
      sq += pv[c] * xi * xi;
      dot += pv[c] * xi;
    }
    px[r] = dot;
    out[r] = sq - dot * dot;
  }
  const std::size_t ix = x.id();
  const std::size_t ip = p.id();
  Var parents[] = {x, p};
  return x.tape()->record(
      m, 1, std::move(out), parents, [=, px = std::move(px)](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& xs = t.value(ix);
        const auto& ps = t.value(ip);
        if (t.requires_grad(ix)) {
          auto& gx = t.grad(ix);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < k; ++c)
              gx[r * k + c] += g[r] * 2.0 * ps[c] * (xs[r * k + c] - px[r]);
        }
        if (t.requires_grad(ip)) {
          auto& gp = t.grad(ip);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < k; ++c) {
              const double xi = xs[r * k + c];
              gp[c] += g[r] * (xi * xi - 2.0 * px[r] * xi);
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Indexing

Var gather_rows(Var a, std::span<const std::size_t> index) {
  const std::size_t n = a.cols();
  const auto& v = a.value();
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<double> out(idx.size() * n);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= a.rows()) {
      throw DataError("gather_rows: index " + std::to_string(idx[r]) + " out of range");
    }
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(idx[r] * n), n,
                out.begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  const std::size_t ia = a.id();
  const std::size_t count = idx.size();
  Var parents[] = {a};
  return a.tape()->record(count, n, std::move(out), parents,
                          [=, idx = std::move(idx)](Tape& t, std::size_t self) {
                            const auto& g = t.grad(self);
                            auto& ga = t.grad(ia);
                            for (std::size_t r = 0; r < idx.size(); ++r)
                              for (std::size_t c = 0; c < n; ++c)
                                ga[idx[r] * n + c] += g[r * n + c];
                          });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const std::size_t n = a.cols();
  if (begin + count > a.rows()) throw UsageError("slice_rows: range out of bounds");
  const auto& v = a.value();
  std::vector<double> out(v.begin() + static_cast<std::ptrdiff_t>(begin * n),
                          v.begin() + static_cast<std::ptrdiff_t>((begin + count) * n));
  const std::size_t ia = a.id();
  Var parents[] = {a};
  return a.tape()->record(count, n, std::move(out), parents, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[begin * n + i] += g[i];
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  if (begin + count > n) throw UsageError("slice_cols: range out of bounds");
  const auto& v = a.value();
  std::vector<double> out(m * count);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < count; ++c) out[r * count + c] = v[r * n + begin + c];
  const std::size_t ia = a.id();
  Var parents[] = {a};
  return a.tape()->record(m, count, std::move(out), parents, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < count; ++c) ga[r * n + begin + c] += g[r * count + c];
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  std::vector<double> out;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    if (p.cols() != n) throw UsageError("concat_rows: column counts differ");
    offsets.push_back(out.size());
    ids.push_back(p.id());
    out.insert(out.end(), p.value().begin(), p.value().end());
    m += p.rows();
  }
  return parts[0].tape()->record(
      m, n, std::move(out), parts,
      [ids = std::move(ids), offsets = std::move(offsets)](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        for (std::size_t i = 0; i < ids.size(); ++i) {
          if (!t.requires_grad(ids[i])) continue;
          auto& gp = t.grad(ids[i]);
          for (std::size_t j = 0; j < gp.size(); ++j) gp[j] += g[offsets[i] + j];
        }
      });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    if (p.rows() != m) throw UsageError("concat_cols: row counts differ");
    ids.push_back(p.id());
    widths.push_back(p.cols());
    n += p.cols();
  }
  std::vector<double> out(m * n);
  std::size_t col = 0;
  for (const Var& p : parts) {
    const auto& v = p.value();
    const std::size_t w = p.cols();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < w; ++c) out[r * n + col + c] = v[r * w + c];
    col += w;
  }
  return parts[0].tape()->record(
      m, n, std::move(out), parts,
      [=, ids = std::move(ids), widths = std::move(widths)](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        std::size_t c0 = 0;
        for (std::size_t i = 0; i < ids.size(); ++i) {
          const std::size_t w = widths[i];
          if (t.requires_grad(ids[i])) {
            auto& gp = t.grad(ids[i]);
            for (std::size_t r = 0; r < m; ++r)
              for (std::size_t c = 0; c < w; ++c) gp[r * w + c] += g[r * n + c0 + c];
          }
          c0 += w;
        }
      });
}

// ---------------------------------------------------------------------------
// Gradient check

double grad_check(const ScalarFn& fn, const std::vector<MatrixD>& points, double step) {
  if (!(step > 0.0)) throw UsageError("grad_check: step must be positive");

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    std::vector<Var> inputs;
    for (const auto& p : points) inputs.push_back(tape.parameter(p));
    Var out = fn(tape, inputs);
    if (!std::isfinite(out.item())) throw NumericalError("grad_check: non-finite function value");
    tape.backward(out);
    for (const Var& v : inputs) analytic.push_back(v.grad());
  }

  auto evaluate = [&](const std::vector<MatrixD>& at) {
    Tape tape;
    std::vector<Var> inputs;
    for (const auto& p : at) inputs.push_back(tape.constant(p));
    const double y = fn(tape, inputs).item();
    if (!std::isfinite(y)) throw NumericalError("grad_check: non-finite function value");
    return y;
  };

  double worst = 0.0;
  std::vector<MatrixD> probe = points;
  for (std::size_t t = 0; t < points.size(); ++t) {
    for (std::size_t i = 0; i < points[t].size(); ++i) {
      const double x0 = points[t].values()[i];
      probe[t].values()[i] = x0 + step;
      const double fp = evaluate(probe);
      probe[t].values()[i] = x0 - step;
      const double fm = evaluate(probe);
      probe[t].values()[i] = x0;
      const double numeric = (fp - fm) / (2.0 * step);
      const double exact = analytic[t][i];
      const double mag = std::max(std::abs(numeric), std::abs(exact));
      const double err = mag < 1e-6 ? std::abs(numeric - exact) : std::abs(numeric - exact) / mag;
      worst = std::max(worst, err);
    }
  }
  return worst;
}

double grad_check(const std::function<Var(Tape&, Var)>& fn, const MatrixD& point, double step) {
  return grad_check([&](Tape& t, std::span<const Var> in) { return fn(t, in[0]); },
                    std::vector<MatrixD>{point}, step);
}

}  // namespace vmargin::ad
