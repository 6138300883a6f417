#include "vmargin/io.hpp"

#include <bit>
#include <charconv>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <fstream>
#include <sstream>

#include "vmargin/error.hpp"

namespace vmargin {

namespace fs = std::filesystem;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const fs::path& path, std::string_view content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + tmp.string() + "'");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw DataError("write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw DataError("cannot move output into place at '" + path.string() + "'");
  }
}

std::string fnv1a64_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string dump(const Json& j) { return j.dump(2) + "\n"; }

namespace {

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_le(std::string_view s, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
  }
  return v;
}

Json parse_json(std::string_view text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const Json::exception& e) {
    throw DataError(what + ": malformed JSON (" + e.what() + ")");
  }
}

template <typename T>
T field(const Json& j, const char* key, const std::string& what) {
  if (!j.is_object() || !j.contains(key)) {
    throw DataError(what + ": missing field '" + key + "'");
  }
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw DataError(what + ": field '" + key + "' has the wrong type");
  }
}

Json opt(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

std::string opt_csv(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

}  // namespace

// ---- logits ---------------------------------------------------------------

std::string_view to_string(Dtype d) { return d == Dtype::kF32 ? "f32" : "bf16"; }

Dtype parse_dtype(std::string_view s) {
  if (s == "f32") return Dtype::kF32;
  if (s == "bf16") return Dtype::kBf16;
  throw DataError("unknown dtype '" + std::string(s) + "'");
}

std::string encode_logits(const LogitsContainer& c) {
  Json h;
  h["rows"] = c.values.rows();
  h["cols"] = c.values.cols();
  h["dtype"] = to_string(c.dtype);
  h["layout"] = "row-major-le";
  h["corpus_id"] = c.corpus_id;
  h["model_id"] = c.model_id;
  std::string out = h.dump() + "\n";
  for (float v : c.values.values()) {
    if (c.dtype == Dtype::kF32) {
      put_u32(out, std::bit_cast<std::uint32_t>(v));
    } else {
      put_u16(out, static_cast<std::uint16_t>(std::bit_cast<std::uint32_t>(emulate_bf16(v)) >> 16));
    }
  }
  return out;
}

LogitsContainer decode_logits(std::string_view bytes) {
  const std::string what = "logits file";
  if (bytes.empty()) throw DataError(what + " is empty");
  const auto nl = bytes.find('\n');
  if (nl == std::string_view::npos) throw DataError(what + ": missing header line");
  const Json h = parse_json(bytes.substr(0, nl), what);
  LogitsContainer c;
  const auto rows = field<std::size_t>(h, "rows", what);
  const auto cols = field<std::size_t>(h, "cols", what);
  c.dtype = parse_dtype(field<std::string>(h, "dtype", what));
  if (field<std::string>(h, "layout", what) != "row-major-le") {
    throw DataError(what + ": unsupported layout");
  }
  c.corpus_id = field<std::string>(h, "corpus_id", what);
  c.model_id = field<std::string>(h, "model_id", what);
  if (rows == 0) throw DataError(what + " has no rows");
  if (cols < 2) throw DataError(what + " needs at least 2 columns");
  const std::size_t width = c.dtype == Dtype::kF32 ? 4 : 2;
  const std::string_view payload = bytes.substr(nl + 1);
  if (payload.size() != rows * cols * width) {
    throw DataError(what + ": payload is " + std::to_string(payload.size()) + " bytes, expected " +
                    std::to_string(rows * cols * width));
  }
  std::vector<float> v(rows * cols);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (c.dtype == Dtype::kF32) {
      v[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(payload, 4 * i, 4)));
    } else {
      v[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(payload, 2 * i, 2) << 16));
    }
  }
  c.values = MatrixF(rows, cols, std::move(v));
  return c;
}

void write_logits(const fs::path& path, const LogitsContainer& c) {
  write_file_atomic(path, encode_logits(c));
}

LogitsContainer read_logits(const fs::path& path) { return decode_logits(read_file(path)); }

std::vector<TokenId> read_targets(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::vector<TokenId> out;
  std::string word;
  while (in >> word) {
    TokenId v = 0;
    const auto r = std::from_chars(word.data(), word.data() + word.size(), v);
    if (r.ec != std::errc() || r.ptr != word.data() + word.size()) {
      throw DataError("targets file: '" + word + "' is not a token id");
    }
    out.push_back(v);
  }
  return out;
}

void write_targets(const fs::path& path, std::span<const TokenId> targets) {
  std::string out;
  for (TokenId t : targets) out += std::to_string(t) + "\n";
  write_file_atomic(path, out);
}

// ---- audits ---------------------------------------------------------------

std::string creation_stamp() {
  std::time_t t = 0;
  if (const char* env = std::getenv("SOURCE_DATE_EPOCH")) {
    long long v = 0;
    const auto r = std::from_chars(env, env + std::strlen(env), v);
    if (r.ec == std::errc() && *r.ptr == '\0' && v >= 0) t = static_cast<std::time_t>(v);
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string encode_audit(const AuditFile& a) {
  Json h;
  h["version"] = a.header.version;
  h["count"] = a.records.size();
  h["dtype"] = a.header.dtype;
  h["tau"] = a.header.tau;
  h["created"] = a.header.created;
  h["seed"] = a.header.seed;
  std::string out = h.dump() + "\n";
  for (const auto& r : a.records) {
    Json j;
    j["position"] = r.position;
    j["target"] = r.target;
    j["top1"] = r.top1;
    j["top2"] = r.top2;
    j["margin"] = r.margin;
    j["correct"] = r.correct;
    out += j.dump() + "\n";
  }
  return out;
}

AuditFile decode_audit(std::string_view text) {
  const std::string what = "audit file";
  if (text.empty()) throw DataError(what + " is empty");
  AuditFile a;
  std::size_t start = 0;
  std::size_t line_no = 0;
  bool have_header = false;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.empty()) continue;
    const std::string where = what + " line " + std::to_string(line_no);
    const Json j = parse_json(line, where);
    if (!have_header) {
      a.header.version = field<int>(j, "version", where);
      if (a.header.version != kAuditVersion) {
        throw DataError(what + ": version " + std::to_string(a.header.version) +
                        " is not supported (expected " + std::to_string(kAuditVersion) + ")");
      }
      a.header.count = field<std::size_t>(j, "count", where);
      a.header.dtype = field<std::string>(j, "dtype", where);
      a.header.tau = field<double>(j, "tau", where);
      a.header.created = field<std::string>(j, "created", where);
      a.header.seed = field<std::uint64_t>(j, "seed", where);
      have_header = true;
      continue;
    }
    MarginRecord r;
    r.position = field<std::size_t>(j, "position", where);
    r.target = field<TokenId>(j, "target", where);
    r.top1 = field<TokenId>(j, "top1", where);
    r.top2 = field<TokenId>(j, "top2", where);
    r.margin = field<double>(j, "margin", where);
    r.correct = field<bool>(j, "correct", where);
    a.records.push_back(r);
  }
  if (!have_header) throw DataError(what + " has no header");
  if (a.records.size() != a.header.count) {
    throw DataError(what + ": header count " + std::to_string(a.header.count) + " but " +
                    std::to_string(a.records.size()) + " records");
  }
  return a;
}

void write_audit(const fs::path& path, const AuditFile& a) {
  write_file_atomic(path, encode_audit(a));
}

AuditFile read_audit(const fs::path& path) { return decode_audit(read_file(path)); }

// ---- checkpoints ----------------------------------------------------------

namespace {
constexpr char kMagic[8] = {'V', 'M', 'A', 'R', 'G', 'C', 'K', 'P'};
}

Json to_json(const ToyLmConfig& c) {
  Json j;
  j["vocab_size"] = c.vocab_size;
  j["hidden_dim"] = c.hidden_dim;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["context"] = c.context;
  j["tied_embeddings"] = c.tied_embeddings;
  return j;
}

ToyLmConfig toy_config_from_json(const Json& j) {
  const std::string what = "model config";
  ToyLmConfig c;
  c.vocab_size = field<std::size_t>(j, "vocab_size", what);
  c.hidden_dim = field<std::size_t>(j, "hidden_dim", what);
  c.layers = field<std::size_t>(j, "layers", what);
  c.heads = field<std::size_t>(j, "heads", what);
  c.context = field<std::size_t>(j, "context", what);
  c.tied_embeddings = field<bool>(j, "tied_embeddings", what);
  return c;
}

std::string encode_checkpoint(const Checkpoint& c) {
  Json h;
  h["config"] = to_json(c.model.config());
  h["seed"] = c.seed;
  h["step"] = c.step;
  h["vocab"] = c.vocab;
  Json params = Json::array();
  for (const auto& p : c.model.parameters()) {
    params.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
  }
  h["params"] = params;
  const std::string header = h.dump();

  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kCheckpointVersion);
  put_u64(out, header.size());
  out += header;
  for (const auto& p : c.model.parameters()) {
    for (double v : p.value.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  const std::string what = "checkpoint";
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw DataError("not a checkpoint file");
  }
  const auto version = static_cast<std::uint32_t>(get_le(bytes, 8, 4));
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t header_len = get_le(bytes, 12, 8);
  if (header_len > bytes.size() - 20) throw DataError(what + ": truncated header");
  const Json h = parse_json(bytes.substr(20, header_len), what);

  Checkpoint c;
  const ToyLmConfig config = toy_config_from_json(field<Json>(h, "config", what));
  c.seed = field<std::uint64_t>(h, "seed", what);
  c.step = field<std::size_t>(h, "step", what);
  c.vocab = field<std::vector<std::string>>(h, "vocab", what);
  std::size_t at = 20 + header_len;
  std::vector<Parameter> params;
  for (const auto& p : field<Json>(h, "params", what)) {
    const auto rows = field<std::size_t>(p, "rows", what);
    const auto cols = field<std::size_t>(p, "cols", what);
    if ((bytes.size() - at) / 8 < rows * cols) throw DataError(what + ": truncated payload");
    std::vector<double> v(rows * cols);
    for (double& x : v) {
      x = std::bit_cast<double>(get_le(bytes, at, 8));
      at += 8;
    }
    params.push_back({field<std::string>(p, "name", what), MatrixD(rows, cols, std::move(v))});
  }
  if (at != bytes.size()) throw DataError(what + ": trailing bytes after the payload");
  try {
    c.model = ToyLm(config, std::move(params));
  } catch (const UsageError& e) {
    throw DataError(what + ": " + e.what());
  }
  return c;
}

void write_checkpoint(const fs::path& path, const Checkpoint& c) {
  write_file_atomic(path, encode_checkpoint(c));
}

Checkpoint read_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path)); }

// ---- reports --------------------------------------------------------------

Json to_json(const GapFit& f) {
  Json j;
  j["beta"] = f.beta;
  j["alpha_intercept"] = f.alpha_intercept;
  j["alpha_constrained"] = f.alpha_constrained;
  j["r2"] = f.r2;
  j["grid"] = {{"epsilon", f.epsilon_grid}, {"eta_hat", f.eta_hat}, {"used", f.used}};
  return j;
}

GapFit gap_fit_from_json(const Json& j) {
  const std::string what = "gap fit";
  GapFit f;
  f.beta = field<double>(j, "beta", what);
  f.alpha_intercept = field<double>(j, "alpha_intercept", what);
  f.alpha_constrained = field<double>(j, "alpha_constrained", what);
  f.r2 = field<double>(j, "r2", what);
  const Json g = field<Json>(j, "grid", what);
  f.epsilon_grid = field<std::vector<double>>(g, "epsilon", what);
  f.eta_hat = field<std::vector<double>>(g, "eta_hat", what);
  f.used = field<std::vector<bool>>(g, "used", what);
  return f;
}

Json to_json(const ChurnReport& r) {
  return {{"total", r.total},         {"churned", r.churned},
          {"w2r", r.w2r},             {"r2w", r.r2w},
          {"flip_ratio", opt(r.flip_ratio)}, {"net_corrected", r.net_corrected}};
}

Json to_json(const RotationReport& r) {
  return {{"rotated", r.rotated},
          {"rotated_wider", r.rotated_wider},
          {"mean_margin_delta", r.mean_margin_delta}};
}

Json to_json(const BandTable& t) {
  Json bands = Json::array();
  for (const auto& b : t.bands) {
    bands.push_back({{"lo", b.lo},
                     {"hi", opt(b.hi)},
                     {"count", b.count},
                     {"correct", b.correct},
                     {"accuracy", opt(b.accuracy)}});
  }
  return {{"bands", bands}, {"total", t.total}, {"overall_accuracy", t.overall_accuracy}};
}

Json to_json(const ExpansionReport& r) {
  return {{"pct_wider", r.pct_wider}, {"mean_delta", r.mean_delta}, {"median_delta", r.median_delta}};
}

Json to_json(const FrequencyBuckets& f) {
  Json buckets = Json::array();
  for (const auto& k : f.buckets) {
    buckets.push_back({{"bucket", k.label},
                       {"count", k.count},
                       {"baseline_accuracy", opt(k.baseline_accuracy)},
                       {"polished_accuracy", opt(k.polished_accuracy)},
                       {"delta", opt(k.delta)},
                       {"net_corrected", k.net_corrected},
                       {"share", opt(k.share)}});
  }
  return {{"buckets", buckets}, {"total_net_corrected", f.total_net_corrected}};
}

namespace {
Json class_row_json(const ClassRow& r) {
  return {{"class", to_string(r.token_class)},
          {"count", r.count},
          {"w2r", r.w2r},
          {"r2w", r.r2w},
          {"net_corrected", r.net_corrected},
          {"share", opt(r.share)}};
}
}  // namespace

Json to_json(const ClassAudit& c) {
  Json rows = Json::array();
  for (const auto& r : c.rows) rows.push_back(class_row_json(r));
  return {{"classes", rows},
          {"fragment", class_row_json(c.fragment)},
          {"total_net_corrected", c.total_net_corrected}};
}

Json to_json(const MarginQuantiles& q) {
  return {{"q05", q.q05},     {"q25", q.q25}, {"median", q.median},
          {"q75", q.q75},     {"q95", q.q95}, {"pr_below_half", q.pr_below_half}};
}

Json to_json(const ScalingVerdict& v) {
  return {{"fit", to_json(v.fit)},
          {"oracle_alpha", v.oracle_alpha},
          {"relative_alpha_error", v.relative_alpha_error},
          {"gradient_floor", v.gradient_floor}};
}

Json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"warmup_fraction", c.warmup_fraction},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"mrp",
           {{"objective", to_string(c.mrp.objective)},
            {"lambda_mrp", c.mrp.lambda_mrp},
            {"tau", c.mrp.tau},
            {"k", c.mrp.k},
            {"clamp_floor", c.mrp.clamp_floor},
            {"ce_weight", c.mrp.ce_weight}}}};
}

Json provenance(std::string_view command, std::uint64_t seed, Json config,
                std::span<const fs::path> inputs) {
  Json in = Json::array();
  for (const auto& p : inputs) {
    in.push_back({{"path", p.string()}, {"fnv1a64", fnv1a64_hex(read_file(p))}});
  }
  return {{"tool", "vmargin"},
          {"command", command},
          {"seed", seed},
          {"config", std::move(config)},
          {"inputs", in}};
}

std::string gap_fit_csv(const GapFit& f) {
  std::string out = "epsilon,eta_hat,used\n";
  for (std::size_t i = 0; i < f.epsilon_grid.size(); ++i) {
    out += format_double(f.epsilon_grid[i]) + "," + format_double(f.eta_hat[i]) + "," +
           (f.used[i] ? "1" : "0") + "\n";
  }
  return out;
}

std::string band_csv(const BandTable& t) {
  std::string out = "lo,hi,count,correct,accuracy\n";
  for (const auto& b : t.bands) {
    out += format_double(b.lo) + "," + opt_csv(b.hi) + "," + std::to_string(b.count) + "," +
           std::to_string(b.correct) + "," + opt_csv(b.accuracy) + "\n";
  }
  return out;
}

std::string frequency_csv(const FrequencyBuckets& f) {
  std::string out = "bucket,count,baseline_accuracy,polished_accuracy,delta,net_corrected,share\n";
  for (const auto& k : f.buckets) {
    out += k.label + "," + std::to_string(k.count) + "," + opt_csv(k.baseline_accuracy) + "," +
           opt_csv(k.polished_accuracy) + "," + opt_csv(k.delta) + "," +
           std::to_string(k.net_corrected) + "," + opt_csv(k.share) + "\n";
  }
  return out;
}

std::string class_csv(const ClassAudit& c) {
  std::string out = "class,count,w2r,r2w,net_corrected,share\n";
  auto row = [&](const ClassRow& r) {
    out += std::string(to_string(r.token_class)) + "," + std::to_string(r.count) + "," +
           std::to_string(r.w2r) + "," + std::to_string(r.r2w) + "," +
           std::to_string(r.net_corrected) + "," + opt_csv(r.share) + "\n";
  };
  for (const auto& r : c.rows) row(r);
  row(c.fragment);
  return out;
}

std::string churn_csv(const ChurnReport& churn, const RotationReport& rot,
                      const ExpansionReport& exp) {
  std::string out = "metric,value\n";
  out += "total," + std::to_string(churn.total) + "\n";
  out += "churned," + std::to_string(churn.churned) + "\n";
  out += "w2r," + std::to_string(churn.w2r) + "\n";
  out += "r2w," + std::to_string(churn.r2w) + "\n";
  out += "flip_ratio," + opt_csv(churn.flip_ratio) + "\n";
  out += "net_corrected," + std::to_string(churn.net_corrected) + "\n";
  out += "rotated," + std::to_string(rot.rotated) + "\n";
  out += "rotated_wider," + std::to_string(rot.rotated_wider) + "\n";
  out += "rotation_mean_margin_delta," + format_double(rot.mean_margin_delta) + "\n";
  out += "pct_wider," + format_double(exp.pct_wider) + "\n";
  out += "mean_delta," + format_double(exp.mean_delta) + "\n";
  out += "median_delta," + format_double(exp.median_delta) + "\n";
  return out;
}

std::string metrics_csv(std::span<const StepMetrics> log) {
  std::string out = "step,ce,mrp,median_margin\n";
  for (const auto& m : log) {
    out += std::to_string(m.step) + "," + format_double(m.ce) + "," + format_double(m.mrp) + "," +
           format_double(m.median_margin) + "\n";
  }
  return out;
}

std::string dose_csv(std::span<const DoseRow> rows) {
  std::string out =
      "lambda,median_margin,pr_below_half,beta,alpha_intercept,alpha_constrained,r2,churned,w2r,"
      "r2w,flip_ratio,net_corrected,ce\n";
  for (const auto& r : rows) {
    out += (r.lambda ? format_double(*r.lambda) : std::string("baseline")) + "," +
           format_double(r.median_margin) + "," + format_double(r.pr_below_half) + ",";
    if (r.gap) {
      out += format_double(r.gap->beta) + "," + format_double(r.gap->alpha_intercept) + "," +
             format_double(r.gap->alpha_constrained) + "," + format_double(r.gap->r2) + ",";
    } else {
      out += ",,,,";
    }
    out += std::to_string(r.churn.churned) + "," + std::to_string(r.churn.w2r) + "," +
           std::to_string(r.churn.r2w) + "," + opt_csv(r.churn.flip_ratio) + "," +
           std::to_string(r.churn.net_corrected) + "," + format_double(r.final_ce) + "\n";
  }
  return out;
}

std::string layer_scan_csv(std::span<const LayerScanRow> rows) {
  std::string out = "layer,spearman_ce_mrp\n";
  for (const auto& r : rows) out += std::to_string(r.layer) + "," + opt_csv(r.spearman_ce_mrp) + "\n";
  return out;
}

}  // namespace vmargin
