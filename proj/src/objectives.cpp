#include "vmargin/objectives.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "vmargin/error.hpp"

namespace vmargin {

std::string_view to_string(Objective o) { return o == Objective::kMargin ? "margin" : "fisher"; }

Objective parse_objective(std::string_view s) {
  if (s == "margin") return Objective::kMargin;
  if (s == "fisher") return Objective::kFisher;
  throw UsageError("unknown objective '" + std::string(s) + "' (expected margin|fisher)");
}

void MrpConfig::validate() const {
  if (!(lambda_mrp >= 0.0) || !std::isfinite(lambda_mrp)) {
    throw UsageError("lambda_mrp must be a finite nonnegative number");
  }
  if (!(ce_weight >= 0.0) || !std::isfinite(ce_weight)) {
    throw UsageError("ce_weight must be a finite nonnegative number");
  }
  if (!(clamp_floor > 0.0)) throw UsageError("clamp_floor must be positive");
  if (objective == Objective::kMargin && !(tau > 0.0)) throw UsageError("tau must be positive");
  if (objective == Objective::kFisher && k < 2) throw UsageError("fisher objective needs k >= 2");
}

namespace {

void require_finite(ad::Var v, const char* what) {
  const auto& vals = v.value();
  for (std::size_t i = 0; i < vals.size(); ++i) {
    if (!std::isfinite(vals[i])) {
      throw DataError(std::string(what) + ": non-finite logit at position " +
                      std::to_string(i / v.cols()));
    }
  }
}

// Ordered pairs (i, j), i != j, as one-hot selector rows: left picks i,
// right picks j.
struct PairSelectors {
  MatrixD left;
  MatrixD right;
  MatrixD diff;
};

PairSelectors pair_selectors(std::size_t k) {
  const std::size_t pairs = k * (k - 1);
  PairSelectors s{MatrixD(pairs, k), MatrixD(pairs, k), MatrixD(pairs, k)};
  std::size_t row = 0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      if (i == j) continue;
      s.left(row, i) = 1.0;
      s.right(row, j) = 1.0;
      s.diff(row, i) = 1.0;
      s.diff(row, j) = -1.0;
      ++row;
    }
  }
  return s;
}

}  // namespace

ad::Var margin_loss(ad::Var logits, double tau) {
  if (logits.cols() < 2) throw UsageError("margin_loss: need at least 2 logits per row");
  require_finite(logits, "margin_loss");
  ad::Tape& tape = *logits.tape();
  const auto top2 = ad::topk_values_gather(logits, 2);
  const ad::Var diff = tape.constant(2, 1, {1.0, -1.0});
  const ad::Var margins = ad::matmul(top2.values, diff);
  std::vector<bool> gate(margins.size());
  bool any = false;
  for (std::size_t r = 0; r < gate.size(); ++r) {
    gate[r] = margins.value()[r] < tau;
    any = any || gate[r];
  }
  if (!any) return tape.scalar(0.0);
  return ad::scale(ad::masked_mean(margins, gate), -1.0);
}

ad::Var fisher_loss(ad::Var logits, ad::Var unembedding, std::size_t k, double clamp_floor) {
  if (k < 2) throw UsageError("fisher_loss: k must be at least 2");
  if (k > logits.cols()) {
    throw UsageError("fisher_loss: k=" + std::to_string(k) + " exceeds vocabulary size " +
                     std::to_string(logits.cols()));
  }
  if (unembedding.rows() != logits.cols()) {
    throw UsageError("fisher_loss: unembedding has " + std::to_string(unembedding.rows()) +
                     " rows for " + std::to_string(logits.cols()) + " logits");
  }
  require_finite(logits, "fisher_loss");
  ad::Tape& tape = *logits.tape();
  const std::size_t rows = logits.rows();

  const auto top = ad::topk_values_gather(logits, k);
  const ad::Var probs = ad::softmax(top.values);  // rows x k
  const ad::Var directions =
      ad::l2_normalize_rows(ad::gather_rows(unembedding, top.indices));  // rows*k x d

  const auto sel = pair_selectors(k);
  const ad::Var left = tape.constant(sel.left);
  const ad::Var right = tape.constant(sel.right);
  const ad::Var diff = tape.constant(sel.diff);

  std::vector<ad::Var> penalties;
  penalties.reserve(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const ad::Var w = ad::slice_rows(directions, r * k, k);
    const ad::Var gram = ad::matmul_nt(w, w);
    // Row (i, j) of proj is (w_i - w_j) projected onto every top-k direction.
    const ad::Var proj = ad::matmul(diff, gram);
    const ad::Var p = ad::slice_rows(probs, r, 1);
    const ad::Var dist = ad::sqrt_clamped(ad::quadratic_form(proj, p), clamp_floor);
    const ad::Var pt = ad::transpose(p);
    const ad::Var weight = ad::mul(ad::matmul(left, pt), ad::matmul(right, pt));
    penalties.push_back(ad::sum(ad::mul(weight, dist)));
  }
  return ad::scale(ad::mean(ad::concat_rows(penalties)), -1.0);
}

ad::Var cross_entropy(ad::Var logits, std::span<const TokenId> targets) {
  if (targets.size() != logits.rows()) {
    throw UsageError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(logits.rows()) + " rows");
  }
  std::vector<std::size_t> index(targets.size());
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= logits.cols()) {
      throw DataError("cross_entropy: invalid target id " + std::to_string(targets[r]) +
                      " at position " + std::to_string(r));
    }
    index[r] = static_cast<std::size_t>(targets[r]);
  }
  return ad::scale(ad::mean(ad::log_softmax_gather(logits, index)), -1.0);
}

ad::Var mrp_loss(ad::Var logits, ad::Var unembedding, const MrpConfig& config) {
  config.validate();
  if (config.objective == Objective::kMargin) return margin_loss(logits, config.tau);
  return fisher_loss(logits, unembedding, config.k, config.clamp_floor);
}

ad::Var combined_loss(ad::Var logits, ad::Var unembedding, std::span<const TokenId> targets,
                      const MrpConfig& config) {
  config.validate();
  ad::Tape& tape = *logits.tape();
  ad::Var total = tape.scalar(0.0);
  if (config.ce_weight != 0.0) {
    total = ad::add(total, ad::scale(cross_entropy(logits, targets), config.ce_weight));
  }
  if (config.lambda_mrp != 0.0) {
    total = ad::add(total, ad::scale(mrp_loss(logits, unembedding, config), config.lambda_mrp));
  }
  return total;
}

double margin_loss(const MatrixD& logits, double tau) {
  ad::Tape tape;
  return margin_loss(tape.constant(logits), tau).item();
}

double fisher_loss(const MatrixD& logits, const MatrixD& unembedding, std::size_t k,
                   double clamp_floor) {
  ad::Tape tape;
  return fisher_loss(tape.constant(logits), tape.constant(unembedding), k, clamp_floor).item();
}

double cross_entropy(const MatrixD& logits, std::span<const TokenId> targets) {
  ad::Tape tape;
  return cross_entropy(tape.constant(logits), targets).item();
}

double combined_loss(const MatrixD& logits, const MatrixD& unembedding,
                     std::span<const TokenId> targets, const MrpConfig& config) {
  ad::Tape tape;
  return combined_loss(tape.constant(logits), tape.constant(unembedding), targets, config).item();
}

double fisher_distance(std::span<const double> p, const MatrixD& normalized_rows, std::size_t i,
                       std::size_t j, double clamp_floor) {
  const std::size_t k = normalized_rows.rows();
  if (p.size() != k) throw UsageError("fisher_distance: p length does not match row count");
  if (i >= k || j >= k) {
    throw UsageError("fisher_distance: pair (" + std::to_string(i) + ", " + std::to_string(j) +
                     ") out of range for k=" + std::to_string(k));
  }
  if (!(clamp_floor > 0.0)) throw UsageError("fisher_distance: clamp_floor must be positive");
  double total = 0.0;
  for (double v : p) total += v;
  if (std::abs(total - 1.0) > 1e-6) throw UsageError("fisher_distance: p does not sum to 1");
  for (std::size_t r = 0; r < k; ++r) {
    double ss = 0.0;
    for (double v : normalized_rows.row(r)) ss += v * v;
    if (std::abs(std::sqrt(ss) - 1.0) > 1e-6) {
      throw UsageError("fisher_distance: row " + std::to_string(r) + " is not unit norm");
    }
  }

  const std::size_t d = normalized_rows.cols();
  std::vector<double> proj(k, 0.0);
  for (std::size_t l = 0; l < k; ++l) {
    double acc = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      acc += (normalized_rows(i, c) - normalized_rows(j, c)) * normalized_rows(l, c);
    }
    proj[l] = acc;
  }
  double sq = 0.0;
  double dot = 0.0;
  for (std::size_t l = 0; l < k; ++l) {
    sq += p[l] * proj[l] * proj[l];
    dot += p[l] * proj[l];
  }
  return std::sqrt(std::max(sq - dot * dot, clamp_floor));
}

}  // namespace vmargin
