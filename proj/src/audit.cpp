#include "vmargin/audit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "vmargin/error.hpp"

namespace vmargin {

std::vector<std::pair<MarginRecord, MarginRecord>> align_audits(
    std::span<const MarginRecord> baseline, std::span<const MarginRecord> polished) {
  if (baseline.size() != polished.size()) {
    throw DataError("audits have " + std::to_string(baseline.size()) + " and " +
                    std::to_string(polished.size()) + " positions");
  }
  auto sorted = [](std::span<const MarginRecord> a) {
    std::vector<MarginRecord> v(a.begin(), a.end());
    std::sort(v.begin(), v.end(),
              [](const MarginRecord& x, const MarginRecord& y) { return x.position < y.position; });
    for (std::size_t i = 1; i < v.size(); ++i) {
      if (v[i].position == v[i - 1].position) {
        throw DataError("position " + std::to_string(v[i].position) + " appears twice");
      }
    }
    return v;
  };
  const auto b = sorted(baseline);
  const auto p = sorted(polished);
  std::vector<std::pair<MarginRecord, MarginRecord>> out;
  out.reserve(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[i].position != p[i].position) {
      throw DataError("position " + std::to_string(b[i].position) +
                      " is missing from the polished audit");
    }
    if (b[i].target != p[i].target) {
      throw DataError("position " + std::to_string(b[i].position) + " has targets " +
                      std::to_string(b[i].target) + " and " + std::to_string(p[i].target));
    }
    out.emplace_back(b[i], p[i]);
  }
  return out;
}

ChurnReport churn_report(std::span<const MarginRecord> baseline,
                         std::span<const MarginRecord> polished) {
  ChurnReport r;
  for (const auto& [b, p] : align_audits(baseline, polished)) {
    ++r.total;
    if (b.top1 == p.top1) continue;
    ++r.churned;
    if (!b.correct && p.correct) ++r.w2r;
    if (b.correct && !p.correct) ++r.r2w;
  }
  if (r.r2w > 0) r.flip_ratio = static_cast<double>(r.w2r) / static_cast<double>(r.r2w);
  r.net_corrected = static_cast<std::int64_t>(r.w2r) - static_cast<std::int64_t>(r.r2w);
  return r;
}

RotationReport rotation_report(std::span<const MarginRecord> baseline,
                               std::span<const MarginRecord> polished) {
  RotationReport r;
  double delta_sum = 0.0;
  for (const auto& [b, p] : align_audits(baseline, polished)) {
    if (b.top1 != p.top1 || b.top2 == p.top2) continue;
    ++r.rotated;
    if (p.margin > b.margin) ++r.rotated_wider;
    delta_sum += p.margin - b.margin;
  }
  if (r.rotated > 0) r.mean_margin_delta = delta_sum / static_cast<double>(r.rotated);
  return r;
}

BandTable band_accuracy(std::span<const MarginRecord> audit) {
  if (audit.empty()) throw UsageError("band_accuracy: empty audit");
  BandTable t;
  double lo = 0.0;
  for (double edge : kBandEdges) {
    t.bands.push_back(Band{lo, edge, 0, 0, {}});
    lo = edge;
  }
  t.bands.push_back(Band{lo, {}, 0, 0, {}});

  std::size_t correct = 0;
  for (const auto& r : audit) {
    const auto it = std::upper_bound(std::begin(kBandEdges), std::end(kBandEdges), r.margin);
    auto& band = t.bands[static_cast<std::size_t>(it - std::begin(kBandEdges))];
    ++band.count;
    if (r.correct) {
      ++band.correct;
      ++correct;
    }
  }
  for (auto& b : t.bands) {
    if (b.count > 0) b.accuracy = static_cast<double>(b.correct) / static_cast<double>(b.count);
  }
  t.total = audit.size();
  t.overall_accuracy = static_cast<double>(correct) / static_cast<double>(t.total);
  return t;
}

ExpansionReport expansion_report(std::span<const MarginRecord> baseline,
                                 std::span<const MarginRecord> polished) {
  const auto pairs = align_audits(baseline, polished);
  if (pairs.empty()) throw UsageError("expansion_report: empty audits");
  std::vector<double> deltas;
  deltas.reserve(pairs.size());
  std::size_t wider = 0;
  double sum = 0.0;
  for (const auto& [b, p] : pairs) {
    const double d = p.margin - b.margin;
    deltas.push_back(d);
    sum += d;
    if (d > 0.0) ++wider;
  }
  std::sort(deltas.begin(), deltas.end());
  const std::size_t n = deltas.size();
  ExpansionReport r;
  r.pct_wider = 100.0 * static_cast<double>(wider) / static_cast<double>(n);
  r.mean_delta = sum / static_cast<double>(n);
  r.median_delta = n % 2 == 1 ? deltas[n / 2] : 0.5 * (deltas[n / 2 - 1] + deltas[n / 2]);
  return r;
}

TargetCounts count_targets(std::span<const MarginRecord> audit) {
  TargetCounts c;
  for (const auto& r : audit) ++c[r.target];
  return c;
}

namespace {

std::optional<double> ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

std::optional<double> share_of(std::int64_t part, std::int64_t total) {
  if (total == 0) return std::nullopt;
  return static_cast<double>(part) / static_cast<double>(total);
}

int correction(const MarginRecord& b, const MarginRecord& p) {
  return static_cast<int>(p.correct) - static_cast<int>(b.correct);
}

}  // namespace

FrequencyBuckets frequency_audit(std::span<const MarginRecord> baseline,
                                 std::span<const MarginRecord> polished,
                                 const TargetCounts& target_counts) {
  FrequencyBuckets out;
  const std::pair<std::size_t, std::optional<std::size_t>> edges[] = {
      {1, 1}, {2, 4}, {5, 19}, {20, 99}, {100, std::nullopt}};
  for (const auto& [lo, hi] : edges) {
    FrequencyBucket k;
    k.label = hi ? (lo == *hi ? std::to_string(lo) : std::to_string(lo) + "-" + std::to_string(*hi))
                 : std::to_string(lo) + "+";
    k.lo = lo;
    k.hi = hi;
    out.buckets.push_back(k);
  }
  for (const auto& [b, p] : align_audits(baseline, polished)) {
    const auto it = target_counts.find(b.target);
    if (it == target_counts.end() || it->second == 0) {
      throw DataError("no frequency count for target token " + std::to_string(b.target));
    }
    auto bucket = std::find_if(out.buckets.begin(), out.buckets.end(), [&](const auto& k) {
      return it->second >= k.lo && (!k.hi || it->second <= *k.hi);
    });
    ++bucket->count;
    bucket->baseline_correct += b.correct ? 1 : 0;
    bucket->polished_correct += p.correct ? 1 : 0;
    bucket->net_corrected += correction(b, p);
    out.total_net_corrected += correction(b, p);
  }
  for (auto& k : out.buckets) {
    k.baseline_accuracy = ratio(k.baseline_correct, k.count);
    k.polished_accuracy = ratio(k.polished_correct, k.count);
    if (k.count > 0) k.delta = *k.polished_accuracy - *k.baseline_accuracy;
    k.share = share_of(k.net_corrected, out.total_net_corrected);
  }
  return out;
}

ClassAudit class_audit(std::span<const MarginRecord> baseline,
                       std::span<const MarginRecord> polished,
                       std::span<const std::string> vocab) {
  ClassAudit out;
  for (TokenClass c : kTokenClasses) {
    ClassRow row;
    row.token_class = c;
    if (c == TokenClass::kFragment) {
      out.fragment = row;
    } else {
      out.rows.push_back(row);
    }
  }
  auto row_of = [&](TokenClass c) -> ClassRow& {
    return c == TokenClass::kFragment ? out.fragment : out.rows[static_cast<std::size_t>(c)];
  };
  std::vector<std::optional<TokenClass>> cache(vocab.size());
  for (const auto& [b, p] : align_audits(baseline, polished)) {
    if (b.target < 0 || static_cast<std::size_t>(b.target) >= vocab.size()) {
      throw DataError("no token text for target token " + std::to_string(b.target));
    }
    auto& cls = cache[static_cast<std::size_t>(b.target)];
    if (!cls) cls = classify_token(vocab[static_cast<std::size_t>(b.target)]);
    auto& row = row_of(*cls);
    ++row.count;
    if (b.top1 != p.top1) {
      if (!b.correct && p.correct) ++row.w2r;
      if (b.correct && !p.correct) ++row.r2w;
    }
    row.net_corrected += correction(b, p);
    out.total_net_corrected += correction(b, p);
  }
  for (auto& r : out.rows) r.share = share_of(r.net_corrected, out.total_net_corrected);
  out.fragment.share = share_of(out.fragment.net_corrected, out.total_net_corrected);
  return out;
}

}  // namespace vmargin
