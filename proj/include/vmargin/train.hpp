#ifndef VMARGIN_TRAIN_HPP
#define VMARGIN_TRAIN_HPP

// AdamW training of the toy model against CE + lambda * MRP, and the
// dose-response sweep built on it.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vmargin/audit.hpp"
#include "vmargin/margin.hpp"
#include "vmargin/objectives.hpp"
#include "vmargin/toy_lm.hpp"

namespace vmargin {

struct TrainConfig {
  std::size_t steps = 200;
  double learning_rate = 3e-4;
  double weight_decay = 0.01;
  double warmup_fraction = 0.05;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  MrpConfig mrp;

  void validate() const;
};

/// Learning rate for 0-based `step`: linear ramp over the first
/// ceil(warmup_fraction * steps) steps, then constant.
double learning_rate_at(const TrainConfig& config, std::size_t step);

/// Metrics of the batch seen at a step, measured before the update. `step`
/// is 1-based.
struct StepMetrics {
  std::size_t step = 0;
  double ce = 0.0;
  double mrp = 0.0;
  double median_margin = 0.0;

  bool operator==(const StepMetrics&) const = default;
};

struct TrainResult {
  ToyLm model;
  std::vector<StepMetrics> log;
};

/// Deterministic given the config seed. Throws NumericalError naming the
/// step when the loss or a parameter becomes non-finite.
TrainResult train(ToyLm model, const Corpus& corpus, const TrainConfig& config);

struct DoseRow {
  std::optional<double> lambda;  // absent for the untrained baseline row
  double median_margin = 0.0;
  double pr_below_half = 0.0;
  std::optional<GapFit> gap;  // absent when the fit is degenerate
  ChurnReport churn;          // against the baseline audit
  double final_ce = 0.0;      // mean CE over the audit corpus
};

struct AuditSummary {
  double median_margin = 0.0;
  double pr_below_half = 0.0;
  std::optional<GapFit> gap;
};

AuditSummary summarize_audit(std::span<const MarginRecord> audit);

/// Baseline row for `base`, then one row per lambda. Every run starts from
/// `base` with the same seed; only lambda_mrp differs.
std::vector<DoseRow> dose_response(const ToyLm& base, const Corpus& train_corpus,
                                   const Corpus& audit_corpus, const TrainConfig& config,
                                   std::span<const double> lambdas);

/// Mean next-token CE of the model over every loss position.
double corpus_cross_entropy(const ToyLm& model, const Corpus& corpus);

}  // namespace vmargin

#endif  // VMARGIN_TRAIN_HPP
