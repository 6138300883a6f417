#ifndef VMARGIN_IO_HPP
#define VMARGIN_IO_HPP

// File formats. Every writer goes through write_file_atomic, and every
// write/read pair round-trips bit-exactly.
//
//   logits     one JSON header line, then rows*cols little-endian f32 or bf16
//   audit      JSONL: header line, then one MarginRecord per line
//   checkpoint 8-byte magic, u32 version, u64 header length, JSON header,
//              then every parameter as little-endian f64, in header order

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "vmargin/audit.hpp"
#include "vmargin/margin.hpp"
#include "vmargin/matrix.hpp"
#include "vmargin/synth.hpp"
#include "vmargin/tokenizer.hpp"
#include "vmargin/toy_lm.hpp"
#include "vmargin/train.hpp"

namespace vmargin {

using Json = nlohmann::ordered_json;

std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

/// 64-bit FNV-1a, as 16 lowercase hex digits.
std::string fnv1a64_hex(std::string_view bytes);

// ---- logits ---------------------------------------------------------------

enum class Dtype { kF32, kBf16 };
std::string_view to_string(Dtype d);
Dtype parse_dtype(std::string_view s);

struct LogitsContainer {
  Dtype dtype = Dtype::kF32;
  std::string corpus_id;
  std::string model_id;
  MatrixF values;  // bf16 payloads are widened to float on read
};

std::string encode_logits(const LogitsContainer& c);
LogitsContainer decode_logits(std::string_view bytes);
void write_logits(const std::filesystem::path& path, const LogitsContainer& c);
LogitsContainer read_logits(const std::filesystem::path& path);

/// Whitespace-separated token ids.
std::vector<TokenId> read_targets(const std::filesystem::path& path);
void write_targets(const std::filesystem::path& path, std::span<const TokenId> targets);

// ---- audits ---------------------------------------------------------------

inline constexpr int kAuditVersion = 1;

struct AuditHeader {
  int version = kAuditVersion;
  std::size_t count = 0;
  std::string dtype = "f32";
  double tau = 0.5;
  std::string created;
  std::uint64_t seed = 0;

  bool operator==(const AuditHeader&) const = default;
};

/// Creation stamp: SOURCE_DATE_EPOCH when set, otherwise the Unix epoch, so
/// that reruns produce identical bytes.
std::string creation_stamp();

struct AuditFile {
  AuditHeader header;
  std::vector<MarginRecord> records;
};

std::string encode_audit(const AuditFile& a);
AuditFile decode_audit(std::string_view text);
void write_audit(const std::filesystem::path& path, const AuditFile& a);
AuditFile read_audit(const std::filesystem::path& path);

// ---- checkpoints ----------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ToyLm model;
  std::vector<std::string> vocab;  // token text by id
  std::uint64_t seed = 0;
  std::size_t step = 0;
};

std::string encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(std::string_view bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// ---- reports --------------------------------------------------------------

Json to_json(const GapFit& f);
GapFit gap_fit_from_json(const Json& j);
Json to_json(const ChurnReport& r);
Json to_json(const RotationReport& r);
Json to_json(const BandTable& t);
Json to_json(const ExpansionReport& r);
Json to_json(const FrequencyBuckets& f);
Json to_json(const ClassAudit& c);
Json to_json(const MarginQuantiles& q);
Json to_json(const ScalingVerdict& v);
Json to_json(const ToyLmConfig& c);
ToyLmConfig toy_config_from_json(const Json& j);
Json to_json(const TrainConfig& c);

/// Provenance block: tool, command, seed, free-form config and a digest of
/// every input file.
Json provenance(std::string_view command, std::uint64_t seed, Json config,
                std::span<const std::filesystem::path> inputs);

/// Pretty JSON with a trailing newline.
std::string dump(const Json& j);

// CSV tables
std::string gap_fit_csv(const GapFit& f);
std::string band_csv(const BandTable& t);
std::string frequency_csv(const FrequencyBuckets& f);
std::string class_csv(const ClassAudit& c);
std::string churn_csv(const ChurnReport& churn, const RotationReport& rot,
                      const ExpansionReport& exp);
std::string metrics_csv(std::span<const StepMetrics> log);
std::string dose_csv(std::span<const DoseRow> rows);
std::string layer_scan_csv(std::span<const LayerScanRow> rows);

/// Shortest round-trip decimal form of a double.
std::string format_double(double v);

}  // namespace vmargin

#endif  // VMARGIN_IO_HPP
