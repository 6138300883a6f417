#include "vmargin/train.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "vmargin/error.hpp"
#include "vmargin/rng.hpp"

namespace vmargin {

void TrainConfig::validate() const {
  if (steps < 1) throw UsageError("steps must be at least 1");
  if (batch_size < 1) throw UsageError("batch_size must be at least 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw UsageError("learning_rate must be positive");
  }
  if (!(weight_decay >= 0.0)) throw UsageError("weight_decay must be nonnegative");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) {
    throw UsageError("warmup_fraction must lie in [0, 1)");
  }
  if (mrp.ce_weight == 0.0 && mrp.lambda_mrp == 0.0) {
    throw UsageError("ce_weight and lambda_mrp are both zero; nothing to train");
  }
  mrp.validate();
}

double learning_rate_at(const TrainConfig& config, std::size_t step) {
  const auto warmup = static_cast<std::size_t>(
      std::ceil(config.warmup_fraction * static_cast<double>(config.steps)));
  if (step < warmup) {
    return config.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  return config.learning_rate;
}

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

TrainResult train(ToyLm model, const Corpus& corpus, const TrainConfig& config) {
  config.validate();
  if (corpus.sequences.empty()) throw UsageError("train: empty corpus");

  Rng rng(config.seed);
  auto& params = model.parameters();
  std::vector<std::vector<double>> m(params.size()), v(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i].assign(params[i].value.size(), 0.0);
    v[i].assign(params[i].value.size(), 0.0);
  }

  TrainResult result;
  result.log.reserve(config.steps);
  const MrpConfig& mrp = config.mrp;
  const double inv_batch = 1.0 / static_cast<double>(config.batch_size);

  for (std::size_t step = 0; step < config.steps; ++step) {
    ad::Tape tape;
    const auto vars = bind_parameters(tape, model, true);
    ad::Var total = tape.scalar(0.0);
    StepMetrics metrics;
    metrics.step = step + 1;
    std::vector<double> margins;

    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const auto& seq = corpus.sequences[rng.below(corpus.sequences.size())];
      const std::size_t n = seq.size() - 1;
      const auto targets = std::span<const TokenId>(seq).subspan(1);
      const auto act = forward(model, vars, seq);
      const ad::Var logits = ad::slice_rows(act.logits, 0, n);
      for (double x : logits.value()) {
        if (!std::isfinite(x)) {
          throw NumericalError("training diverged at step " + std::to_string(step + 1) +
                               ": non-finite logit");
        }
      }
      const ad::Var ce = cross_entropy(logits, targets);
      ad::Var loss = tape.scalar(0.0);
      if (mrp.ce_weight != 0.0) loss = ad::scale(ce, mrp.ce_weight);
      if (mrp.lambda_mrp != 0.0) {
        const ad::Var pen = mrp_loss(logits, act.unembedding, mrp);
        loss = ad::add(loss, ad::scale(pen, mrp.lambda_mrp));
        metrics.mrp += pen.item() * inv_batch;
      } else {
        const MatrixD lv = logits.value_matrix();
        metrics.mrp += (mrp.objective == Objective::kMargin
                            ? margin_loss(lv, mrp.tau)
                            : fisher_loss(lv, act.unembedding.value_matrix(), mrp.k,
                                          mrp.clamp_floor)) *
                       inv_batch;
      }
      total = ad::add(total, ad::scale(loss, inv_batch));
      metrics.ce += ce.item() * inv_batch;
      for (const auto& r : compute_margins(logits.value_matrix(), targets)) {
        margins.push_back(r.margin);
      }
    }
    if (!std::isfinite(total.item())) {
      throw NumericalError("training diverged at step " + std::to_string(step + 1) +
                           ": non-finite loss");
    }
    metrics.median_margin = median_of(std::move(margins));
    result.log.push_back(metrics);

    tape.backward(total);
    const double lr = learning_rate_at(config, step);
    const double t = static_cast<double>(step + 1);
    const double c1 = 1.0 - std::pow(kBeta1, t);
    const double c2 = 1.0 - std::pow(kBeta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& g = vars[i].grad();
      auto& w = params[i].value.values();
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[i][j] = kBeta1 * m[i][j] + (1.0 - kBeta1) * g[j];
        v[i][j] = kBeta2 * v[i][j] + (1.0 - kBeta2) * g[j] * g[j];
        const double update = (m[i][j] / c1) / (std::sqrt(v[i][j] / c2) + kAdamEps);
        w[j] -= lr * (update + config.weight_decay * w[j]);
        if (!std::isfinite(w[j])) {
          throw NumericalError("training diverged at step " + std::to_string(step + 1) +
                               ": non-finite parameter in " + params[i].name);
        }
      }
    }
  }
  result.model = std::move(model);
  return result;
}

AuditSummary summarize_audit(std::span<const MarginRecord> audit) {
  const auto margins = margins_of(audit);
  const auto q = margin_quantiles(margins);
  AuditSummary s;
  s.median_margin = q.median;
  s.pr_below_half = q.pr_below_half;
  try {
    s.gap = fit_gap_curve(margins);
  } catch (const Error&) {
    s.gap.reset();
  }
  return s;
}

double corpus_cross_entropy(const ToyLm& model, const Corpus& corpus) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& seq : corpus.sequences) {
    const auto fwd = forward(model, seq);
    const std::size_t rows = seq.size() - 1;
    const auto targets = std::span<const TokenId>(seq).subspan(1);
    const std::size_t cols = fwd.logits.cols();
    MatrixD logits(rows, cols,
                   std::vector<double>(fwd.logits.values().begin(),
                                       fwd.logits.values().begin() +
                                           static_cast<std::ptrdiff_t>(rows * cols)));
    sum += cross_entropy(logits, targets) * static_cast<double>(rows);
    n += rows;
  }
  if (n == 0) throw UsageError("corpus_cross_entropy: empty corpus");
  return sum / static_cast<double>(n);
}

std::vector<DoseRow> dose_response(const ToyLm& base, const Corpus& train_corpus,
                                   const Corpus& audit_corpus, const TrainConfig& config,
                                   std::span<const double> lambdas) {
  if (lambdas.empty()) throw UsageError("dose_response: empty lambda list");
  if (!std::is_sorted(lambdas.begin(), lambdas.end())) {
    throw UsageError("dose_response: lambda list must be sorted ascending");
  }
  std::vector<DoseRow> rows;
  const auto baseline = audit_model(base, audit_corpus);
  auto make_row = [&](const ToyLm& model, const std::vector<MarginRecord>& audit) {
    const auto s = summarize_audit(audit);
    DoseRow row;
    row.median_margin = s.median_margin;
    row.pr_below_half = s.pr_below_half;
    row.gap = s.gap;
    row.churn = churn_report(baseline, audit);
    row.final_ce = corpus_cross_entropy(model, audit_corpus);
    return row;
  };
  rows.push_back(make_row(base, baseline));
  for (double lambda : lambdas) {
    TrainConfig c = config;
    c.mrp.lambda_mrp = lambda;
    const auto trained = train(base, train_corpus, c);
    DoseRow row = make_row(trained.model, audit_model(trained.model, audit_corpus));
    row.lambda = lambda;
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace vmargin
