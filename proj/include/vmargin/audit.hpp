#ifndef VMARGIN_AUDIT_HPP
#define VMARGIN_AUDIT_HPP

// Per-position comparisons between a baseline and a polished audit.
//
// Audits are matched by position id, never by file order, so every report is
// invariant under permutation of either input.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vmargin/margin.hpp"

namespace vmargin {

using Audit = std::vector<MarginRecord>;

/// Records paired by position, ascending. Throws DataError when the position
/// sets differ, a position repeats, or a pair disagrees on its target.
std::vector<std::pair<MarginRecord, MarginRecord>> align_audits(std::span<const MarginRecord> baseline,
                                                                std::span<const MarginRecord> polished);

struct ChurnReport {
  std::size_t total = 0;
  std::size_t churned = 0;
  std::size_t w2r = 0;
  std::size_t r2w = 0;
  std::optional<double> flip_ratio;  // w2r / r2w
  std::int64_t net_corrected = 0;

  bool operator==(const ChurnReport&) const = default;
};

ChurnReport churn_report(std::span<const MarginRecord> baseline,
                         std::span<const MarginRecord> polished);

/// Top-1 unchanged, runner-up changed.
struct RotationReport {
  std::size_t rotated = 0;
  std::size_t rotated_wider = 0;
  double mean_margin_delta = 0.0;  // 0 when nothing rotated

  bool operator==(const RotationReport&) const = default;
};

RotationReport rotation_report(std::span<const MarginRecord> baseline,
                               std::span<const MarginRecord> polished);

inline constexpr double kBandEdges[] = {0.5, 1.0, 2.0, 5.0};

/// Half-open margin band [lo, hi); the last band has no upper edge.
struct Band {
  double lo = 0.0;
  std::optional<double> hi;
  std::size_t count = 0;
  std::size_t correct = 0;
  std::optional<double> accuracy;  // absent for an empty band

  bool operator==(const Band&) const = default;
};

struct BandTable {
  std::vector<Band> bands;
  std::size_t total = 0;
  double overall_accuracy = 0.0;

  bool operator==(const BandTable&) const = default;
};

BandTable band_accuracy(std::span<const MarginRecord> audit);

struct ExpansionReport {
  double pct_wider = 0.0;  // percent of positions with a strictly larger margin
  double mean_delta = 0.0;
  double median_delta = 0.0;

  bool operator==(const ExpansionReport&) const = default;
};

ExpansionReport expansion_report(std::span<const MarginRecord> baseline,
                                 std::span<const MarginRecord> polished);

using TargetCounts = std::unordered_map<TokenId, std::size_t>;

/// Occurrences of each target token among the audited positions.
TargetCounts count_targets(std::span<const MarginRecord> audit);

struct FrequencyBucket {
  std::string label;
  std::size_t lo = 0;
  std::optional<std::size_t> hi;  // inclusive
  std::size_t count = 0;
  std::size_t baseline_correct = 0;
  std::size_t polished_correct = 0;
  std::optional<double> baseline_accuracy;
  std::optional<double> polished_accuracy;
  std::optional<double> delta;  // polished - baseline accuracy
  std::int64_t net_corrected = 0;
  std::optional<double> share;  // of total net corrected; absent when that is 0

  bool operator==(const FrequencyBucket&) const = default;
};

struct FrequencyBuckets {
  std::vector<FrequencyBucket> buckets;  // 1, 2-4, 5-19, 20-99, 100+
  std::int64_t total_net_corrected = 0;

  bool operator==(const FrequencyBuckets&) const = default;
};

FrequencyBuckets frequency_audit(std::span<const MarginRecord> baseline,
                                 std::span<const MarginRecord> polished,
                                 const TargetCounts& target_counts);

enum class TokenClass { kStructural, kNumeric, kFunctionWord, kEntityLike, kContentWord, kFragment };

inline constexpr TokenClass kTokenClasses[] = {
    TokenClass::kStructural, TokenClass::kNumeric,     TokenClass::kFunctionWord,
    TokenClass::kEntityLike, TokenClass::kContentWord, TokenClass::kFragment};

std::string_view to_string(TokenClass c);

/// The pinned 101-entry function word list, lowercase.
std::span<const std::string_view> function_words();

/// First matching rule wins: structural, numeric, function word,
/// entity-like, content word, fragment. Surrounding whitespace is ignored
/// except that a whitespace-only token is structural.
TokenClass classify_token(std::string_view text);

struct ClassRow {
  TokenClass token_class = TokenClass::kFragment;
  std::size_t count = 0;
  std::size_t w2r = 0;
  std::size_t r2w = 0;
  std::int64_t net_corrected = 0;
  std::optional<double> share;  // of total net corrected; absent when that is 0

  bool operator==(const ClassRow&) const = default;
};

struct ClassAudit {
  std::vector<ClassRow> rows;  // every class except fragment, in rule order
  ClassRow fragment;
  std::int64_t total_net_corrected = 0;

  bool operator==(const ClassAudit&) const = default;
};

/// Classes are assigned from the target token's text; `vocab[id]` is the
/// text of token id.
ClassAudit class_audit(std::span<const MarginRecord> baseline,
                       std::span<const MarginRecord> polished,
                       std::span<const std::string> vocab);

}  // namespace vmargin

#endif  // VMARGIN_AUDIT_HPP
