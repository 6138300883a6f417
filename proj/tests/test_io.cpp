#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "vmargin/error.hpp"
#include "vmargin/io.hpp"
#include "vmargin/rng.hpp"

using namespace vmargin;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "vmargin_test_io";
  fs::create_directories(dir);
  return dir / name;
}

const std::string kFixtures = VMARGIN_FIXTURE_DIR;

}  // namespace

TEST_CASE("fnv1a64 reference vectors") {
  CHECK(fnv1a64_hex("") == "cbf29ce484222325");
  CHECK(fnv1a64_hex("a") == "af63dc4c8601ec8c");
  CHECK(fnv1a64_hex("foobar") == "85944171f73967e8");
}

TEST_CASE("format_double round-trips") {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double v = rng.normal() * std::pow(10.0, rng.uniform(-20, 20));
    CHECK(std::stod(format_double(v)) == v);
  }
  CHECK(format_double(0.5) == "0.5");
}

TEST_CASE("f32 logits round-trip bit-exactly") {
  Rng rng(3);
  MatrixF m(7, 5);
  for (float& v : m.values()) v = static_cast<float>(rng.normal() * 4.0);
  m(0, 0) = -0.0f;
  LogitsContainer c{Dtype::kF32, "corpus", "model", m};
  const auto bytes = encode_logits(c);
  const auto back = decode_logits(bytes);
  CHECK(back.values == m);
  CHECK(std::signbit(back.values(0, 0)));
  CHECK(back.corpus_id == "corpus");
  CHECK(encode_logits(back) == bytes);

  write_logits(scratch("l.bin"), c);
  CHECK(read_logits(scratch("l.bin")).values == m);
  CHECK_FALSE(fs::exists(scratch("l.bin.tmp")));
}

TEST_CASE("bf16 logits widen through the rounding rule") {
  Rng rng(4);
  MatrixF m(3, 9);
  for (float& v : m.values()) v = static_cast<float>(rng.uniform(1.0, 8.0));
  const auto back = decode_logits(encode_logits({Dtype::kBf16, "", "", m}));
  CHECK(back.dtype == Dtype::kBf16);
  CHECK(back.values == emulate_bf16(m));
  CHECK(encode_logits(back).size() == encode_logits({Dtype::kBf16, "", "", m}).size());
}

TEST_CASE("malformed logits are data errors") {
  CHECK_THROWS_AS(decode_logits(""), DataError);
  CHECK_THROWS_AS(decode_logits("not json\n"), DataError);
  CHECK_THROWS_AS(decode_logits("{\"rows\":1}\n"), DataError);
  auto good = encode_logits({Dtype::kF32, "", "", MatrixF(2, 3)});
  CHECK_THROWS_AS(decode_logits(good.substr(0, good.size() - 1)), DataError);
  CHECK_THROWS_AS(decode_logits(good + "x"), DataError);
  CHECK_THROWS_AS(decode_logits(encode_logits({Dtype::kF32, "", "", MatrixF(2, 1)})), DataError);
  CHECK_THROWS_AS(read_logits(kFixtures + "/missing.bin"), DataError);
}

TEST_CASE("fixture logits decode to the expected audit") {
  const auto c = read_logits(kFixtures + "/logits3.bin");
  const auto targets = read_targets(kFixtures + "/targets3.txt");
  REQUIRE(c.values.rows() == 3);
  AuditFile a;
  a.header.created = "1970-01-01T00:00:00Z";
  a.header.count = 3;
  a.records = compute_margins(c.values, targets);
  CHECK(encode_audit(a) == read_file(kFixtures + "/audit3.jsonl"));
}

TEST_CASE("targets parsing") {
  write_file_atomic(scratch("t.txt"), "1 2\n3\n");
  CHECK(read_targets(scratch("t.txt")) == std::vector<TokenId>{1, 2, 3});
  write_file_atomic(scratch("t.txt"), "1 x\n");
  CHECK_THROWS_AS(read_targets(scratch("t.txt")), DataError);
}

TEST_CASE("audit files round-trip") {
  Rng rng(8);
  const auto logits = oracle::random_matrix(rng, 200, 17);
  std::vector<TokenId> targets;
  for (int i = 0; i < 200; ++i) targets.push_back(static_cast<TokenId>(rng.below(17)));
  AuditFile a;
  a.header = {kAuditVersion, 200, "f32", 0.5, creation_stamp(), 7};
  a.records = compute_margins(logits, targets);
  const auto text = encode_audit(a);
  const auto back = decode_audit(text);
  CHECK(back.header == a.header);
  CHECK(back.records == a.records);
  CHECK(encode_audit(back) == text);

  const auto fixture = read_audit(kFixtures + "/baseline6.jsonl");
  CHECK(fixture.records.size() == 6);
  CHECK(encode_audit(fixture) == read_file(kFixtures + "/baseline6.jsonl"));
}

TEST_CASE("malformed audits are data errors") {
  CHECK_THROWS_AS(decode_audit(""), DataError);
  const auto text = read_file(kFixtures + "/baseline6.jsonl");
  CHECK_THROWS_AS(decode_audit(text.substr(0, text.rfind('{'))), DataError);
  auto v2 = text;
  v2.replace(v2.find("\"version\":1"), 11, "\"version\":2");
  CHECK_THROWS_AS(decode_audit(v2), DataError);
  auto bad = text;
  bad.replace(bad.find("\"margin\":0.2"), 12, "\"margin\":\"x\"");
  CHECK_THROWS_AS(decode_audit(bad), DataError);
}

TEST_CASE("creation stamp follows SOURCE_DATE_EPOCH") {
  unsetenv("SOURCE_DATE_EPOCH");
  CHECK(creation_stamp() == "1970-01-01T00:00:00Z");
  setenv("SOURCE_DATE_EPOCH", "1000000000", 1);
  CHECK(creation_stamp() == "2001-09-09T01:46:40Z");
  setenv("SOURCE_DATE_EPOCH", "garbage", 1);
  CHECK(creation_stamp() == "1970-01-01T00:00:00Z");
  unsetenv("SOURCE_DATE_EPOCH");
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  ToyLmConfig cfg;
  cfg.vocab_size = 11;
  cfg.hidden_dim = 8;
  cfg.context = 6;
  for (bool tied : {true, false}) {
    cfg.tied_embeddings = tied;
    Checkpoint c{ToyLm::init(cfg, 3), {}, 3, 17};
    for (std::size_t i = 0; i < 11; ++i) c.vocab.push_back("t" + std::to_string(i));
    const auto bytes = encode_checkpoint(c);
    const auto back = decode_checkpoint(bytes);
    CHECK(back.model == c.model);
    CHECK(back.vocab == c.vocab);
    CHECK(back.seed == 3);
    CHECK(back.step == 17);
    CHECK(encode_checkpoint(back) == bytes);

    write_checkpoint(scratch("m.ckpt"), c);
    CHECK(read_checkpoint(scratch("m.ckpt")).model == c.model);
  }
}

TEST_CASE("checkpoint version and framing are checked") {
  ToyLmConfig cfg;
  cfg.vocab_size = 5;
  cfg.hidden_dim = 4;
  cfg.context = 4;
  const auto bytes = encode_checkpoint({ToyLm::init(cfg, 0), {}, 0, 0});
  auto v2 = bytes;
  v2[8] = 2;
  CHECK_THROWS_WITH_AS(decode_checkpoint(v2), doctest::Contains("version 2"), DataError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 8)), DataError);
  CHECK_THROWS_AS(decode_checkpoint(bytes + "x"), DataError);
  CHECK_THROWS_AS(decode_checkpoint("garbage"), DataError);
}

TEST_CASE("gap fit JSON round-trips bit-exactly") {
  Rng rng(5);
  std::vector<double> m;
  for (int i = 0; i < 5000; ++i) m.push_back(std::abs(rng.normal()));
  const auto fit = fit_gap_curve(m);
  const auto text = dump(to_json(fit));
  const auto back = gap_fit_from_json(Json::parse(text));
  CHECK(back == fit);
  CHECK_THROWS_AS(gap_fit_from_json(Json::parse("{\"beta\":1}")), DataError);
}

TEST_CASE("provenance digests inputs") {
  write_file_atomic(scratch("p.txt"), "foobar");
  const std::vector<fs::path> in = {scratch("p.txt")};
  const auto p = provenance("gap-fit", 4, Json{{"k", 1}}, in);
  CHECK(p["inputs"][0]["fnv1a64"] == "85944171f73967e8");
  CHECK(p["seed"] == 4);
  CHECK(p["command"] == "gap-fit");
}

TEST_CASE("CSV tables") {
  const std::vector<LayerScanRow> rows = {{0, 0.25}, {1, std::nullopt}};
  CHECK(layer_scan_csv(rows) == "layer,spearman_ce_mrp\n0,0.25\n1,\n");
  const std::vector<StepMetrics> log = {{1, 2.5, -0.5, 0.75}};
  CHECK(metrics_csv(log) == "step,ce,mrp,median_margin\n1,2.5,-0.5,0.75\n");
}
