// vmargin: margin audits, gap fits, audit comparison, toy training and
// synthetic scaling checks.
//
// Exit codes: 0 ok, 1 usage, 2 malformed data, 3 numerical failure.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vmargin/audit.hpp"
#include "vmargin/autodiff.hpp"
#include "vmargin/error.hpp"
#include "vmargin/io.hpp"
#include "vmargin/margin.hpp"
#include "vmargin/synth.hpp"
#include "vmargin/tokenizer.hpp"
#include "vmargin/toy_lm.hpp"
#include "vmargin/train.hpp"

namespace fs = std::filesystem;
using namespace vmargin;

namespace {

constexpr const char* kReference = R"(
Reference values from the 4B-parameter study (reference only; not
reproducible at desk scale and not checked by this tool):
  gap-fit   beta 0.912, R^2 0.9997, alpha 0.762 over 256,577 positions
  compare   Fisher lambda 0.6: churn 19.4%, W->R 16,327, R->W 5,356,
            flip ratio 3.0x, net +10,971
)";

std::vector<fs::path> as_paths(const std::vector<std::string>& v) {
  return {v.begin(), v.end()};
}

void emit(const std::string& path, const std::string& content) {
  if (path.empty() || path == "-") {
    std::cout << content;
  } else {
    write_file_atomic(path, content);
  }
}

MatrixF to_float(const MatrixD& m) {
  MatrixF out(m.rows(), m.cols());
  std::transform(m.values().begin(), m.values().end(), out.values().begin(),
                 [](double v) { return static_cast<float>(v); });
  return out;
}

// Sequence i goes to the audit split when i % 10 == 0.
std::pair<Corpus, Corpus> split_corpus(const Corpus& all) {
  Corpus train_part, audit_part;
  for (std::size_t i = 0; i < all.sequences.size(); ++i) {
    (i % 10 == 0 ? audit_part : train_part).sequences.push_back(all.sequences[i]);
  }
  if (train_part.sequences.empty() || audit_part.sequences.empty()) {
    throw UsageError("corpus is too small to split into train and audit parts");
  }
  return {train_part, audit_part};
}

// ---- audit -------------------------------------------------------------

struct AuditOpts {
  std::string logits, targets, out, hidden, unembedding;
  bool bf16 = false, fp32 = false;
  double tau = 0.5;
  std::uint64_t seed = 0;
};

int run_audit(const AuditOpts& o) {
  const auto targets = read_targets(o.targets);
  MatrixF logits;
  std::string dtype = "f32";
  if (o.fp32) {
    if (o.hidden.empty() || o.unembedding.empty()) {
      throw UsageError("--fp32-recompute needs --hidden and --unembedding");
    }
    const auto h = read_logits(o.hidden).values;
    const auto u = read_logits(o.unembedding).values;
    if (h.cols() != u.cols()) {
      throw DataError("hidden width " + std::to_string(h.cols()) +
                      " does not match unembedding width " + std::to_string(u.cols()));
    }
    logits = recompute_fp32_logits(h, u);
  } else {
    if (o.logits.empty()) throw UsageError("--logits is required");
    auto c = read_logits(o.logits);
    dtype = std::string(to_string(c.dtype));
    logits = std::move(c.values);
  }
  if (o.bf16) {
    logits = emulate_bf16(logits);
    dtype = "bf16";
  }
  AuditFile a;
  a.records = compute_margins(logits, targets);
  a.header = {kAuditVersion, a.records.size(), dtype, o.tau, creation_stamp(), o.seed};
  write_audit(o.out, a);
  std::cerr << "audited " << a.records.size() << " positions, "
            << unique_value_count(margins_of(a.records)) << " distinct margins\n";
  return 0;
}

// ---- gap-fit -----------------------------------------------------------

struct GapOpts {
  std::string audit, out, csv;
  GapGridSpec grid;
};

int run_gap_fit(const GapOpts& o) {
  const auto a = read_audit(o.audit);
  if (a.records.size() < 1000) {
    throw UsageError("gap-fit needs at least 1000 positions, got " +
                     std::to_string(a.records.size()));
  }
  const auto fit = fit_gap_curve(margins_of(a.records), o.grid);
  Json grid = {{"count", o.grid.count},
               {"quantile_lo", o.grid.quantile_lo},
               {"quantile_hi", o.grid.quantile_hi}};
  Json report = {{"provenance", provenance("gap-fit", a.header.seed, grid,
                                           std::vector<fs::path>{o.audit})}};
  report.update(to_json(fit));
  const auto text = dump(report);
  std::cout << text;
  if (!o.out.empty()) write_file_atomic(o.out, text);
  if (!o.csv.empty()) write_file_atomic(o.csv, gap_fit_csv(fit));
  return 0;
}

// ---- compare -----------------------------------------------------------

struct CompareOpts {
  std::string baseline, polished, out_dir, freq_counts, token_texts;
  bool freq_from_audit = false;
};

TargetCounts read_counts(const std::string& path) {
  std::istringstream in(read_file(path));
  TargetCounts counts;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    std::istringstream ls(line);
    long long id = -1, n = -1;
    std::string extra;
    if (!(ls >> id >> n) || (ls >> extra) || id < 0 || n < 0) {
      throw DataError(path + ":" + std::to_string(lineno) + ": expected '<token id> <count>'");
    }
    counts[static_cast<TokenId>(id)] += static_cast<std::size_t>(n);
  }
  return counts;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

int run_compare(const CompareOpts& o) {
  if (!o.freq_counts.empty() && o.freq_from_audit) {
    throw UsageError("--freq-counts and --freq-from-audit are exclusive");
  }
  const auto base = read_audit(o.baseline).records;
  const auto pol = read_audit(o.polished).records;
  std::vector<fs::path> inputs = {o.baseline, o.polished};

  const auto churn = churn_report(base, pol);
  const auto rot = rotation_report(base, pol);
  const auto exp = expansion_report(base, pol);
  const auto bands_base = band_accuracy(base);
  const auto bands_pol = band_accuracy(pol);

  std::optional<FrequencyBuckets> freq;
  if (!o.freq_counts.empty()) {
    inputs.emplace_back(o.freq_counts);
    freq = frequency_audit(base, pol, read_counts(o.freq_counts));
  } else if (o.freq_from_audit) {
    freq = frequency_audit(base, pol, count_targets(base));
  }
  std::optional<ClassAudit> classes;
  if (!o.token_texts.empty()) {
    inputs.emplace_back(o.token_texts);
    classes = class_audit(base, pol, read_lines(o.token_texts));
  }

  Json config = {{"freq_source", !o.freq_counts.empty() ? "file"
                                 : o.freq_from_audit    ? "baseline-audit"
                                                        : "none"},
                 {"token_texts", !o.token_texts.empty()}};
  Json bundle = {{"provenance", provenance("compare", 0, config, inputs)},
                 {"churn", to_json(churn)},
                 {"rotation", to_json(rot)},
                 {"bands", {{"baseline", to_json(bands_base)}, {"polished", to_json(bands_pol)}}},
                 {"expansion", to_json(exp)}};
  if (freq) bundle["frequency"] = to_json(*freq);
  if (classes) bundle["class"] = to_json(*classes);

  const fs::path dir = o.out_dir;
  fs::create_directories(dir);
  write_file_atomic(dir / "report.json", dump(bundle));
  write_file_atomic(dir / "churn.csv", churn_csv(churn, rot, exp));
  write_file_atomic(dir / "bands_baseline.csv", band_csv(bands_base));
  write_file_atomic(dir / "bands_polished.csv", band_csv(bands_pol));
  if (freq) write_file_atomic(dir / "frequency.csv", frequency_csv(*freq));
  if (classes) write_file_atomic(dir / "class.csv", class_csv(*classes));

  std::cerr << "churned " << churn.churned << " of " << churn.total << " (W->R " << churn.w2r
            << ", R->W " << churn.r2w << ", net " << churn.net_corrected << ")\n";
  return 0;
}

// ---- train / sweep -----------------------------------------------------

struct ModelOpts {
  std::vector<std::string> corpus;
  std::string init;
  ToyLmConfig arch;
};

struct Loaded {
  ToyLm model;
  std::vector<std::string> vocab;
  Corpus corpus;
};

// Model from --init or fresh, plus the tokenized corpus.
Loaded load_model(const ModelOpts& o, std::uint64_t seed) {
  const auto text = read_text_files(o.corpus);
  Loaded l;
  if (!o.init.empty()) {
    auto ck = read_checkpoint(o.init);
    l.model = std::move(ck.model);
    l.vocab = std::move(ck.vocab);
  } else {
    const auto tok = Tokenizer::build(text, o.arch.vocab_size);
    auto arch = o.arch;
    arch.vocab_size = tok.size();
    l.model = ToyLm::init(arch, seed);
    l.vocab = tok.tokens();
  }
  const auto tok = Tokenizer::from_tokens(l.vocab);
  const auto ids = tok.encode(text);
  l.corpus = make_corpus(ids, l.model.config().context);
  if (l.corpus.sequences.empty()) throw DataError("corpus has no complete sequence");
  return l;
}

struct TrainOpts {
  ModelOpts model;
  TrainConfig train;
  std::string loss = "margin";
  std::string out_dir;
  std::vector<double> lambdas = {0.0, 0.15, 0.3, 0.6};
  std::size_t pretrain_steps = 300;
  double pretrain_lr = 1e-3;
};

void apply_loss(TrainOpts& o, bool k_given) {
  o.train.mrp.objective = parse_objective(o.loss);
  if (k_given && o.train.mrp.objective == Objective::kMargin) {
    std::cerr << "warning: --k is ignored by the margin objective\n";
  }
  o.train.validate();
}

int run_train(TrainOpts o, bool k_given) {
  apply_loss(o, k_given);
  auto l = load_model(o.model, o.train.seed);
  const auto result = train(std::move(l.model), l.corpus, o.train);

  const fs::path dir = o.out_dir;
  fs::create_directories(dir);
  write_checkpoint(dir / "model.ckpt", {result.model, l.vocab, o.train.seed, o.train.steps});
  write_file_atomic(dir / "metrics.csv", metrics_csv(result.log));
  Json config = {{"model", to_json(result.model.config())}, {"train", to_json(o.train)}};
  write_file_atomic(dir / "train.json",
                    dump({{"provenance", provenance("train", o.train.seed, config,
                                                    as_paths(o.model.corpus))}}));
  if (!result.log.empty()) {
    std::cerr << "step " << result.log.back().step << ": ce " << result.log.back().ce
              << ", median margin " << result.log.back().median_margin << "\n";
  }
  return 0;
}

Json dose_json(const DoseRow& r) {
  Json j;
  j["lambda"] = r.lambda ? Json(*r.lambda) : Json(nullptr);
  j["median_margin"] = r.median_margin;
  j["pr_below_half"] = r.pr_below_half;
  j["gap"] = r.gap ? to_json(*r.gap) : Json(nullptr);
  j["churn"] = to_json(r.churn);
  j["final_ce"] = r.final_ce;
  return j;
}

int run_sweep(TrainOpts o, bool k_given) {
  apply_loss(o, k_given);
  auto l = load_model(o.model, o.train.seed);
  const auto [train_part, audit_part] = split_corpus(l.corpus);

  ToyLm base = std::move(l.model);
  if (o.model.init.empty() && o.pretrain_steps > 0) {
    TrainConfig pre = o.train;
    pre.steps = o.pretrain_steps;
    pre.learning_rate = o.pretrain_lr;
    pre.mrp.lambda_mrp = 0.0;
    pre.mrp.ce_weight = 1.0;
    base = train(std::move(base), train_part, pre).model;
  }
  const auto rows = dose_response(base, train_part, audit_part, o.train, o.lambdas);

  const fs::path dir = o.out_dir;
  fs::create_directories(dir);
  write_checkpoint(dir / "base.ckpt", {base, l.vocab, o.train.seed, o.pretrain_steps});
  write_file_atomic(dir / "dose.csv", dose_csv(rows));
  Json config = {{"model", to_json(base.config())},
                 {"train", to_json(o.train)},
                 {"lambdas", o.lambdas},
                 {"pretrain_steps", o.model.init.empty() ? o.pretrain_steps : 0},
                 {"pretrain_lr", o.pretrain_lr}};
  Json summary = {{"provenance", provenance("sweep", o.train.seed, config,
                                            as_paths(o.model.corpus))},
                  {"rows", Json::array()}};
  for (const auto& r : rows) summary["rows"].push_back(dose_json(r));
  write_file_atomic(dir / "summary.json", dump(summary));
  std::cout << dose_csv(rows);
  return 0;
}

// ---- logits export -----------------------------------------------------

struct ExportOpts {
  std::string checkpoint, logits_out, targets_out, hidden_out, unembedding_out;
  std::vector<std::string> corpus;
  bool bf16 = false;
};

int run_export(const ExportOpts& o) {
  const auto ck = read_checkpoint(o.checkpoint);
  const auto tok = Tokenizer::from_tokens(ck.vocab);
  const auto corpus = make_corpus(tok.encode(read_text_files(o.corpus)), ck.model.config().context);
  const std::size_t n = corpus.positions();
  if (n == 0) throw DataError("corpus has no complete sequence");
  const std::size_t v = ck.model.config().vocab_size;
  const std::size_t d = ck.model.config().hidden_dim;
  MatrixD logits(n, v), hidden(n, d);
  std::size_t row = 0;
  for (const auto& seq : corpus.sequences) {
    const auto fwd = forward(ck.model, seq);
    ad::Tape tape;
    const auto normed = ad::rms_norm_rows(tape.constant(fwd.hidden.back())).value_matrix();
    for (std::size_t t = 0; t + 1 < seq.size(); ++t, ++row) {
      std::copy(fwd.logits.row(t).begin(), fwd.logits.row(t).end(), logits.row(row).begin());
      std::copy(normed.row(t).begin(), normed.row(t).end(), hidden.row(row).begin());
    }
  }
  const std::string corpus_id = fnv1a64_hex(read_text_files(o.corpus));
  const std::string model_id = fnv1a64_hex(read_file(o.checkpoint));
  write_logits(o.logits_out,
               {o.bf16 ? Dtype::kBf16 : Dtype::kF32, corpus_id, model_id, to_float(logits)});
  write_targets(o.targets_out, corpus.targets());
  if (!o.hidden_out.empty()) {
    write_logits(o.hidden_out, {Dtype::kF32, corpus_id, model_id, to_float(hidden)});
  }
  if (!o.unembedding_out.empty()) {
    write_logits(o.unembedding_out, {Dtype::kF32, corpus_id, model_id,
                                     to_float(ck.model.get(ck.model.unembedding_name()))});
  }
  return 0;
}

// ---- synth-validate ----------------------------------------------------

struct SynthOpts {
  std::string sampler = "circle", sites_file, out, audit_out;
  std::size_t sites = 2;
  std::uint64_t site_seed = 0;
  std::size_t samples = 1'000'000;
  std::uint64_t seed = 0;
};

MatrixD read_sites(const std::string& path) {
  std::vector<std::vector<double>> rows;
  std::size_t lineno = 0;
  for (const auto& line : read_lines(path)) {
    ++lineno;
    if (line.find_first_not_of(" \t") == std::string::npos || line[0] == '#') continue;
    std::istringstream ls(line);
    std::vector<double> row;
    std::string tok;
    while (ls >> tok) {
      double x = 0.0;
      const auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), x);
      if (ec != std::errc() || p != tok.data() + tok.size() || !std::isfinite(x)) {
        throw DataError(path + ":" + std::to_string(lineno) + ": bad number '" + tok + "'");
      }
      row.push_back(x);
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw DataError(path + ":" + std::to_string(lineno) + ": ragged site row");
    }
    if (std::find(rows.begin(), rows.end(), row) != rows.end()) {
      throw DataError(path + ":" + std::to_string(lineno) + ": duplicate site");
    }
    rows.push_back(std::move(row));
  }
  if (rows.size() < 2) throw DataError(path + ": need at least two sites");
  MatrixD m(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(rows[i].begin(), rows[i].end(), m.row(i).begin());
  }
  return m;
}

int run_synth(const SynthOpts& o) {
  ManifoldSpec spec;
  spec.sampler = parse_sampler(o.sampler);
  spec.intrinsic_dim = spec.sampler == Sampler::kCircleUniform ? 1 : 2;
  spec.sample_count = o.samples;
  spec.seed = o.seed;
  if (!o.sites_file.empty()) {
    spec.sites = read_sites(o.sites_file);
  } else if (spec.sampler == Sampler::kCircleUniform) {
    spec.sites = circle_sites(o.sites);
  } else {
    spec.sites = random_sites(o.sites, 2, o.site_seed);
  }
  spec.ambient_dim = spec.sites.cols();

  const auto verdict = validate_scaling(spec);
  const bool pass = verdict.fit.beta >= 0.9 && verdict.fit.beta <= 1.1 && verdict.fit.r2 >= 0.99;
  Json config = {{"sampler", to_string(spec.sampler)},
                 {"intrinsic_dim", spec.intrinsic_dim},
                 {"ambient_dim", spec.ambient_dim},
                 {"sites", spec.sites.rows()},
                 {"samples", spec.sample_count}};
  std::vector<fs::path> inputs;
  if (!o.sites_file.empty()) inputs.emplace_back(o.sites_file);
  Json report = {{"provenance", provenance("synth-validate", o.seed, config, inputs)}};
  report.update(to_json(verdict));
  report["pass"] = pass;
  const auto text = dump(report);
  std::cout << text;
  if (!o.out.empty()) write_file_atomic(o.out, text);
  if (!o.audit_out.empty()) {
    AuditFile a;
    a.records = generate(spec).records;
    a.header = {kAuditVersion, a.records.size(), "f64", 0.5, creation_stamp(), o.seed};
    write_audit(o.audit_out, a);
  }
  if (!pass) {
    std::cerr << "scaling check failed: beta " << verdict.fit.beta << ", R^2 " << verdict.fit.r2
              << "\n";
    return static_cast<int>(ExitCode::kNumerical);
  }
  return 0;
}

// ---- layer-scan --------------------------------------------------------

struct ScanOpts {
  std::string checkpoint, out;
  std::vector<std::string> corpus;
  double tau = 0.5;
};

int run_layer_scan(const ScanOpts& o) {
  const auto ck = read_checkpoint(o.checkpoint);
  const auto tok = Tokenizer::from_tokens(ck.vocab);
  const auto corpus = make_corpus(tok.encode(read_text_files(o.corpus)), ck.model.config().context);
  if (corpus.sequences.empty()) throw DataError("corpus has no complete sequence");
  emit(o.out, layer_scan_csv(layer_scan(ck.model, corpus, o.tau)));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Voronoi margin audits and margin refinement for language models"};
  app.footer(kReference);
  app.require_subcommand(1);
  app.set_version_flag("--version", "vmargin 0.1.0");

  AuditOpts ao;
  auto* audit = app.add_subcommand("audit", "Compute per-position margins from logits");
  audit->add_option("--logits", ao.logits, "Logits container");
  audit->add_option("--targets", ao.targets, "Whitespace-separated target ids")->required();
  audit->add_option("--out", ao.out, "Audit JSONL output")->required();
  audit->add_flag("--bf16-emulate", ao.bf16, "Round logits to bfloat16 before auditing");
  audit->add_flag("--fp32-recompute", ao.fp32,
                  "Recompute logits from --hidden and --unembedding instead of --logits");
  audit->add_option("--hidden", ao.hidden, "Hidden states (logits container format, N x d)");
  audit->add_option("--unembedding", ao.unembedding, "Unembedding (logits container format, V x d)");
  audit->add_option("--tau", ao.tau, "Threshold recorded in the header")->capture_default_str();
  audit->add_option("--seed", ao.seed, "Seed recorded in the header")->capture_default_str();

  GapOpts go;
  auto* gap = app.add_subcommand("gap-fit", "Fit eta(eps) = alpha * eps^beta on an audit");
  gap->footer("Reference only: the 4B subject gave beta 0.912, R^2 0.9997, alpha 0.762.");
  gap->add_option("--audit", go.audit, "Audit JSONL")->required();
  gap->add_option("--out", go.out, "Report JSON");
  gap->add_option("--csv", go.csv, "Grid CSV");
  gap->add_option("--grid-count", go.grid.count)->capture_default_str();
  gap->add_option("--quantile-lo", go.grid.quantile_lo)->capture_default_str();
  gap->add_option("--quantile-hi", go.grid.quantile_hi)->capture_default_str();

  CompareOpts co;
  auto* cmp = app.add_subcommand("compare", "Churn, rotation, band, frequency and class reports");
  cmp->footer(
      "Reference only: at Fisher lambda 0.6 the 4B subject showed W->R 16,327, R->W 5,356\n"
      "(flip ratio 3.0x) over 256,577 positions.");
  cmp->add_option("--baseline", co.baseline, "Baseline audit")->required();
  cmp->add_option("--polished", co.polished, "Polished audit")->required();
  cmp->add_option("--out-dir", co.out_dir, "Directory for report.json and CSVs")->required();
  cmp->add_option("--freq-counts", co.freq_counts, "Lines of '<token id> <count>'");
  cmp->add_flag("--freq-from-audit", co.freq_from_audit,
                "Count target frequencies from the baseline audit");
  cmp->add_option("--token-texts", co.token_texts, "Token text per line, by id");

  auto add_model = [](CLI::App* c, ModelOpts& m) {
    c->add_option("--corpus", m.corpus, "Text files")->required();
    c->add_option("--init", m.init, "Start from a checkpoint");
    c->add_option("--vocab-size", m.arch.vocab_size)->capture_default_str();
    c->add_option("--hidden-dim", m.arch.hidden_dim)->capture_default_str();
    c->add_option("--layers", m.arch.layers)->capture_default_str();
    c->add_option("--heads", m.arch.heads)->capture_default_str();
    c->add_option("--context", m.arch.context)->capture_default_str();
  };
  auto add_train = [](CLI::App* c, TrainOpts& t) -> CLI::Option* {
    c->add_option("--loss", t.loss, "margin or fisher")
        ->check(CLI::IsMember({"margin", "fisher"}))
        ->capture_default_str();
    c->add_option("--lambda-mrp", t.train.mrp.lambda_mrp)->capture_default_str();
    c->add_option("--tau", t.train.mrp.tau)->capture_default_str();
    auto* k = c->add_option("--k", t.train.mrp.k, "Top-k size (fisher only)")->capture_default_str();
    c->add_option("--ce-weight", t.train.mrp.ce_weight)->capture_default_str();
    c->add_option("--steps", t.train.steps)->capture_default_str();
    c->add_option("--lr", t.train.learning_rate)->capture_default_str();
    c->add_option("--weight-decay", t.train.weight_decay)->capture_default_str();
    c->add_option("--warmup-fraction", t.train.warmup_fraction)->capture_default_str();
    c->add_option("--batch-size", t.train.batch_size)->capture_default_str();
    c->add_option("--seed", t.train.seed)->capture_default_str();
    c->add_option("--out-dir", t.out_dir)->required();
    return k;
  };

  TrainOpts to;
  auto* tr = app.add_subcommand("train", "Train the toy model against CE + lambda * MRP");
  add_model(tr, to.model);
  auto* train_k = add_train(tr, to);

  TrainOpts so;
  auto* sw = app.add_subcommand("sweep", "Dose-response sweep over lambda");
  add_model(sw, so.model);
  auto* sweep_k = add_train(sw, so);
  sw->add_option("--lambdas", so.lambdas, "Ascending lambda values")
      ->delimiter(',')
      ->capture_default_str();
  sw->add_option("--pretrain-steps", so.pretrain_steps, "CE-only steps before the sweep")
      ->capture_default_str();
  sw->add_option("--pretrain-lr", so.pretrain_lr)->capture_default_str();

  ExportOpts eo;
  auto* ex = app.add_subcommand("export", "Write logits and targets of a checkpoint on a corpus");
  ex->add_option("--checkpoint", eo.checkpoint)->required();
  ex->add_option("--corpus", eo.corpus)->required();
  ex->add_option("--logits-out", eo.logits_out)->required();
  ex->add_option("--targets-out", eo.targets_out)->required();
  ex->add_option("--hidden-out", eo.hidden_out, "Final normalized hidden states");
  ex->add_option("--unembedding-out", eo.unembedding_out);
  ex->add_flag("--bf16", eo.bf16, "Store logits as bfloat16");

  SynthOpts yo;
  auto* sy = app.add_subcommand("synth-validate", "Check the linear gap law on a synthetic manifold");
  sy->add_option("--sampler", yo.sampler, "circle or square")->capture_default_str();
  sy->add_option("--sites", yo.sites, "Number of generated sites")->capture_default_str();
  sy->add_option("--site-seed", yo.site_seed, "Seed for square-sampler sites")->capture_default_str();
  sy->add_option("--sites-file", yo.sites_file, "One site per line, whitespace-separated");
  sy->add_option("--samples", yo.samples)->capture_default_str();
  sy->add_option("--seed", yo.seed)->capture_default_str();
  sy->add_option("--out", yo.out, "Verdict JSON");
  sy->add_option("--audit-out", yo.audit_out, "Margins of the samples as an audit file");

  ScanOpts lo;
  auto* ls = app.add_subcommand("layer-scan", "Per-layer virtual-margin correlation with CE");
  ls->add_option("--checkpoint", lo.checkpoint)->required();
  ls->add_option("--corpus", lo.corpus)->required();
  ls->add_option("--out", lo.out, "CSV output (stdout when absent)");
  ls->add_option("--tau", lo.tau)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : static_cast<int>(ExitCode::kUsage);
  }

  try {
    if (*audit) return run_audit(ao);
    if (*gap) return run_gap_fit(go);
    if (*cmp) return run_compare(co);
    if (*tr) return run_train(to, train_k->count() > 0);
    if (*sw) return run_sweep(so, sweep_k->count() > 0);
    if (*ex) return run_export(eo);
    if (*sy) return run_synth(yo);
    if (*ls) return run_layer_scan(lo);
  } catch (const Error& e) {
    std::cerr << "vmargin: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "vmargin: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kData);
  } catch (const std::exception& e) {
    std::cerr << "vmargin: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kUsage);
  }
  return static_cast<int>(ExitCode::kUsage);
}
