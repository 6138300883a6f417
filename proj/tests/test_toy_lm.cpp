#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "vmargin/error.hpp"
#include "vmargin/objectives.hpp"
#include "vmargin/rng.hpp"
#include "vmargin/tokenizer.hpp"
#include "vmargin/toy_lm.hpp"
#include "vmargin/train.hpp"

using namespace vmargin;

namespace {

ToyLmConfig tiny(bool tied = true) {
  ToyLmConfig c;
  c.vocab_size = 24;
  c.hidden_dim = 16;
  c.layers = 2;
  c.heads = 2;
  c.context = 12;
  c.tied_embeddings = tied;
  return c;
}

// A repetitive stream with a little seeded noise: learnable in a few steps.
std::vector<TokenId> pattern_stream(std::size_t n, std::uint64_t seed, double noise = 0.1) {
  Rng rng(seed);
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < n; ++i) {
    TokenId t = static_cast<TokenId>((i * 7) % 11 + 1);
    if (rng.uniform() < noise) t = static_cast<TokenId>(rng.below(24));
    out.push_back(t);
  }
  return out;
}

double loss_of(const ToyLm& model, std::span<const TokenId> seq, const char* grad_of,
               MatrixD* grad) {
  ad::Tape tape;
  const auto vars = bind_parameters(tape, model, true);
  const auto act = forward(model, vars, seq);
  const auto logits = ad::slice_rows(act.logits, 0, seq.size() - 1);
  const auto loss = cross_entropy(logits, seq.subspan(1));
  tape.backward(loss);
  if (grad) *grad = vars[model.index_of(grad_of)].grad_matrix();
  return loss.item();
}

}  // namespace

TEST_CASE("split_words separates letters, digits and symbols") {
  const auto w = split_words("Hello, world 2023!\n  it's 3.14 caf\xC3\xA9");
  const std::vector<std::string> expect = {"Hello", ",", "world", "2023", "!", "it", "'", "s",
                                           "3",     ".", "14",    "caf",  "\xC3\xA9"};
  CHECK(w == expect);
  CHECK(split_words("   \t\n").empty());
}

TEST_CASE("tokenizer ranks by count then lexicographically") {
  const auto t = Tokenizer::build("b a b c a b d", 4);
  REQUIRE(t.size() == 4);
  CHECK(t.text(0) == "<unk>");
  CHECK(t.text(1) == "b");
  CHECK(t.text(2) == "a");
  CHECK(t.text(3) == "c");
  CHECK(t.encode("d b zz") == std::vector<TokenId>{0, 1, 0});
  CHECK_THROWS_AS(t.text(9), DataError);
  CHECK_THROWS_AS(Tokenizer::from_tokens({"<unk>", "x", "x"}), DataError);
  CHECK_THROWS_AS(Tokenizer::from_tokens({"x"}), DataError);
}

TEST_CASE("bundled corpus is large enough") {
  const auto text = read_text_files({VMARGIN_DATA_DIR "/corpus/alice29.txt",
                                     VMARGIN_DATA_DIR "/corpus/asyoulik.txt"});
  CHECK(split_words(text).size() >= 50000);
  CHECK_THROWS_AS(read_text_files({VMARGIN_DATA_DIR "/no/such/file.txt"}), DataError);
}

TEST_CASE("config validation") {
  auto c = tiny();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c = tiny();
  c.vocab_size = 1;
  CHECK_THROWS_AS(c.validate(), UsageError);
  CHECK(parameter_names(tiny()).size() == 2 + 6 * 2);
  CHECK(parameter_names(tiny(false)).back() == "unembed");
}

TEST_CASE("seeded init and forward are bit-identical") {
  const auto a = ToyLm::init(tiny(), 5);
  const auto b = ToyLm::init(tiny(), 5);
  CHECK(a == b);
  CHECK_FALSE(a == ToyLm::init(tiny(), 6));
  const std::vector<TokenId> seq = {1, 4, 2, 9, 0, 3};
  const auto fa = forward(a, seq);
  const auto fb = forward(b, seq);
  CHECK(fa.logits == fb.logits);
  REQUIRE(fa.hidden.size() == 2);
  CHECK(fa.logits.rows() == seq.size());
  CHECK(fa.logits.cols() == 24);
}

TEST_CASE("forward rejects bad input") {
  const auto m = ToyLm::init(tiny(), 0);
  CHECK_THROWS_AS(forward(m, std::vector<TokenId>{1, 24}), DataError);
  CHECK_THROWS_AS(forward(m, std::vector<TokenId>{1, -1}), DataError);
  CHECK_THROWS_AS(forward(m, std::vector<TokenId>(13, 1)), UsageError);
  CHECK_THROWS_AS(forward(m, std::vector<TokenId>{}), UsageError);
}

TEST_CASE("forward is causal") {
  const auto m = ToyLm::init(tiny(), 1);
  const auto a = forward(m, std::vector<TokenId>{3, 4, 5, 6});
  const auto b = forward(m, std::vector<TokenId>{3, 4, 5, 7});
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 24; ++c) CHECK(a.logits(r, c) == b.logits(r, c));
  }
  bool last_differs = false;
  for (std::size_t c = 0; c < 24; ++c) last_differs |= a.logits(3, c) != b.logits(3, c);
  CHECK(last_differs);
}

TEST_CASE("three tokens give two loss positions") {
  const std::vector<TokenId> seq = {2, 5, 7};
  const auto corpus = make_corpus(seq, 12);
  REQUIRE(corpus.sequences.size() == 1);
  CHECK(corpus.positions() == 2);
  CHECK(corpus.targets() == std::vector<TokenId>{5, 7});
  const auto audit = audit_model(ToyLm::init(tiny(), 0), corpus);
  REQUIRE(audit.size() == 2);
  CHECK(audit[0].target == 5);
  CHECK(audit[1].target == 7);
  CHECK(audit[1].position == 1);
}

TEST_CASE("make_corpus chunks and drops a single trailing token") {
  std::vector<TokenId> t(25);
  std::iota(t.begin(), t.end(), 0);
  const auto c = make_corpus(t, 12);
  REQUIRE(c.sequences.size() == 2);
  CHECK(c.positions() == 22);
  t.push_back(0);
  CHECK(make_corpus(t, 12).sequences.size() == 3);
  CHECK_THROWS_AS(make_corpus(t, 1), UsageError);
}

TEST_CASE("audit positions are numbered across sequences") {
  const auto tokens = pattern_stream(40, 3);
  const auto corpus = make_corpus(tokens, 12);
  const auto audit = audit_model(ToyLm::init(tiny(), 2), corpus);
  REQUIRE(audit.size() == corpus.positions());
  for (std::size_t i = 0; i < audit.size(); ++i) CHECK(audit[i].position == i);
  CHECK(margins_of(audit).size() == corpus.targets().size());
}

TEST_CASE("tied embedding: perturbing the shared matrix moves lookup and logits") {
  auto m = ToyLm::init(tiny(), 3);
  const std::vector<TokenId> seq = {4, 4, 4};
  const auto before = forward(m, seq);

  // Token 9 is never looked up, so only the output side sees this change.
  auto out_only = m;
  out_only.get("embed")(9, 0) += 0.5;
  const auto a = forward(out_only, seq);
  CHECK(a.hidden[0] == before.hidden[0]);
  CHECK(a.logits(0, 9) != before.logits(0, 9));
  CHECK(a.logits(0, 8) == before.logits(0, 8));

  auto in_too = m;
  in_too.get("embed")(4, 0) += 0.5;
  const auto b = forward(in_too, seq);
  CHECK_FALSE(b.hidden[0] == before.hidden[0]);
}

TEST_CASE("tied gradient is the sum of the input and output contributions") {
  const auto tied = ToyLm::init(tiny(true), 4);
  auto params = tied.parameters();
  params.push_back({"unembed", tied.get("embed")});
  const ToyLm untied(tiny(false), params);

  const std::vector<TokenId> seq = {1, 3, 5, 7, 3, 1};
  MatrixD g_tied, g_in, g_out;
  const double l1 = loss_of(tied, seq, "embed", &g_tied);
  const double l2 = loss_of(untied, seq, "embed", &g_in);
  loss_of(untied, seq, "unembed", &g_out);
  CHECK(l1 == doctest::Approx(l2).epsilon(1e-14));

  double max_err = 0.0;
  double max_out = 0.0;
  for (std::size_t i = 0; i < g_tied.size(); ++i) {
    max_err = std::max(max_err, std::abs(g_tied.values()[i] - g_in.values()[i] - g_out.values()[i]));
    max_out = std::max(max_out, std::abs(g_out.values()[i]));
  }
  CHECK(max_err < 1e-12);
  // Control: dropping the unembedding gradient gives a different update.
  CHECK(max_out > 1e-6);
  CHECK_FALSE(g_tied == g_in);
}

TEST_CASE("model gradient matches finite differences") {
  ToyLmConfig c;
  c.vocab_size = 7;
  c.hidden_dim = 4;
  c.layers = 1;
  c.heads = 2;
  c.context = 5;
  const auto model = ToyLm::init(c, 11);
  const std::vector<TokenId> seq = {1, 6, 2, 2, 5};
  std::vector<MatrixD> points;
  for (const auto& p : model.parameters()) points.push_back(p.value);
  const double err = ad::grad_check(
      [&](ad::Tape&, std::span<const ad::Var> vars) {
        const auto act = forward(model, vars, seq);
        const auto logits = ad::slice_rows(act.logits, 0, seq.size() - 1);
        return ad::add(cross_entropy(logits, std::span(seq).subspan(1)),
                       ad::scale(fisher_loss(logits, act.unembedding, 3), 0.5));
      },
      points);
  CHECK(err < 1e-4);
}

TEST_CASE("virtual logits of the final layer equal the model logits") {
  const auto m = ToyLm::init(tiny(), 8);
  const auto f = forward(m, std::vector<TokenId>{2, 3, 4, 5});
  CHECK(virtual_logits(m, f.hidden.back()) == f.logits);
}

TEST_CASE("layer scan") {
  const auto m = ToyLm::init(tiny(), 9);
  const auto corpus = make_corpus(pattern_stream(60, 1), 12);
  const auto rows = layer_scan(m, corpus);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].layer == 0);
  CHECK(rows[1].layer == 1);
  CHECK(layer_scan(m, corpus) == rows);

  // Margin increasing in -CE: large CE pairs with small margins, hence large
  // deficits.
  std::vector<double> ce, margin;
  for (int i = 0; i < 50; ++i) {
    ce.push_back(0.1 * i);
    margin.push_back(1.0 - 0.02 * i);
  }
  const auto synth = layer_scan_rows({margin, std::vector<double>(50, 2.0)}, ce, 0.5);
  REQUIRE(synth.size() == 2);
  REQUIRE(synth[0].spearman_ce_mrp.has_value());
  CHECK(*synth[0].spearman_ce_mrp > 0.0);
  CHECK(*synth[0].spearman_ce_mrp ==
        doctest::Approx(oracle::spearman_brute(ce, [&] {
                          std::vector<double> p;
                          for (double x : margin) p.push_back(std::max(0.0, 0.5 - x));
                          return p;
                        }())).epsilon(1e-12));
  CHECK_FALSE(synth[1].spearman_ce_mrp.has_value());
  CHECK_THROWS_AS(layer_scan_rows({{1.0, 2.0}}, ce, 0.5), UsageError);
}

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  c.steps = 40;
  c.learning_rate = 1e-3;
  c.warmup_fraction = 0.1;
  CHECK(learning_rate_at(c, 0) == doctest::Approx(0.25e-3));
  CHECK(learning_rate_at(c, 3) == doctest::Approx(1e-3));
  CHECK(learning_rate_at(c, 39) == doctest::Approx(1e-3));
  c.warmup_fraction = 0.0;
  CHECK(learning_rate_at(c, 0) == 1e-3);
  c.warmup_fraction = 1.0;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c = TrainConfig{};
  c.mrp.ce_weight = 0.0;
  CHECK_THROWS_AS(c.validate(), UsageError);
}

TEST_CASE("training lowers cross-entropy and is deterministic") {
  const auto corpus = make_corpus(pattern_stream(400, 7), 12);
  const auto init = ToyLm::init(tiny(), 0);
  TrainConfig c;
  c.steps = 50;
  c.learning_rate = 3e-3;
  c.batch_size = 2;
  const auto a = train(init, corpus, c);
  REQUIRE(a.log.size() == 50);
  CHECK(a.log.front().step == 1);
  CHECK(a.log.back().ce < a.log.front().ce);
  CHECK(corpus_cross_entropy(a.model, corpus) < corpus_cross_entropy(init, corpus));

  const auto b = train(init, corpus, c);
  CHECK(a.model == b.model);
  CHECK(a.log == b.log);

  c.seed = 1;
  CHECK_FALSE(train(init, corpus, c).model == a.model);
}

TEST_CASE("margin objective widens margins against a plain run") {
  // Noisy enough that a good share of margins sit under the gate.
  const auto corpus = make_corpus(pattern_stream(400, 7, 0.6), 12);
  TrainConfig c;
  c.steps = 60;
  c.learning_rate = 3e-3;
  c.batch_size = 2;
  const auto base = train(ToyLm::init(tiny(), 0), corpus, c).model;

  c.mrp.objective = Objective::kMargin;
  c.mrp.lambda_mrp = 0.0;
  const auto plain = train(base, corpus, c);
  c.mrp.lambda_mrp = 0.3;
  const auto mm = train(base, corpus, c);
  const auto q0 = margin_quantiles(margins_of(audit_model(plain.model, corpus)));
  const auto q3 = margin_quantiles(margins_of(audit_model(mm.model, corpus)));
  CHECK(q0.median < 1.0);
  CHECK(q3.median >= q0.median);
}

TEST_CASE("pure refinement mode trains") {
  const auto corpus = make_corpus(pattern_stream(100, 2), 12);
  TrainConfig c;
  c.steps = 5;
  c.mrp.objective = Objective::kFisher;
  c.mrp.ce_weight = 0.0;
  c.mrp.lambda_mrp = 1.0;
  const auto r = train(ToyLm::init(tiny(), 0), corpus, c);
  CHECK(r.log.size() == 5);
  CHECK(r.log.back().mrp < 0.0);
}

TEST_CASE("dose response with lambda 0 equals a plain run") {
  const auto corpus = make_corpus(pattern_stream(200, 5), 12);
  const auto base = ToyLm::init(tiny(), 1);
  TrainConfig c;
  c.steps = 10;
  c.mrp.objective = Objective::kFisher;
  const std::vector<double> lambdas = {0.0};
  const auto rows = dose_response(base, corpus, corpus, c, lambdas);
  REQUIRE(rows.size() == 2);
  CHECK_FALSE(rows[0].lambda.has_value());
  CHECK(rows[0].churn.churned == 0);

  const auto plain = summarize_audit(audit_model(train(base, corpus, c).model, corpus));
  CHECK(rows[1].lambda == 0.0);
  CHECK(rows[1].median_margin == plain.median_margin);
  CHECK(rows[1].pr_below_half == plain.pr_below_half);

  const std::vector<double> unsorted = {0.3, 0.1};
  CHECK_THROWS_AS(dose_response(base, corpus, corpus, c, unsorted), UsageError);
  CHECK_THROWS_AS(dose_response(base, corpus, corpus, c, std::vector<double>{}), UsageError);
}

TEST_CASE("summary of uniform margins fits a straight line") {
  std::vector<MarginRecord> audit;
  for (std::size_t i = 0; i < 100000; ++i) {
    MarginRecord r;
    r.position = i;
    r.margin = 2.0 * (static_cast<double>(i) + 0.5) / 1e5;
    audit.push_back(r);
  }
  const auto s = summarize_audit(audit);
  REQUIRE(s.gap.has_value());
  CHECK(s.gap->r2 > 0.999);
  CHECK(s.pr_below_half == doctest::Approx(0.25));
}
