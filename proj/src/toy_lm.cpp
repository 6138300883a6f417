#include "vmargin/toy_lm.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "vmargin/error.hpp"
#include "vmargin/rng.hpp"

namespace vmargin {

void ToyLmConfig::validate() const {
  if (vocab_size < 2) throw UsageError("vocab_size must be at least 2");
  if (hidden_dim == 0 || heads == 0 || layers == 0 || context < 2) {
    throw UsageError("hidden_dim, heads and layers must be positive and context at least 2");
  }
  if (hidden_dim % heads != 0) {
    throw UsageError("hidden_dim " + std::to_string(hidden_dim) + " is not divisible by heads " +
                     std::to_string(heads));
  }
}

std::vector<std::string> parameter_names(const ToyLmConfig& config) {
  std::vector<std::string> names = {"embed", "pos"};
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    for (const char* w : {"wq", "wk", "wv", "wo", "w1", "w2"}) names.push_back(p + w);
  }
  if (!config.tied_embeddings) names.push_back("unembed");
  return names;
}

namespace {

std::pair<std::size_t, std::size_t> parameter_shape(const ToyLmConfig& c, std::string_view name) {
  const std::size_t d = c.hidden_dim;
  if (name == "embed" || name == "unembed") return {c.vocab_size, d};
  if (name == "pos") return {c.context, d};
  if (name.ends_with(".w1")) return {d, 4 * d};
  if (name.ends_with(".w2")) return {4 * d, d};
  return {d, d};
}

}  // namespace

ToyLm::ToyLm(ToyLmConfig config, std::vector<Parameter> params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
  const auto names = parameter_names(config_);
  if (names.size() != params_.size()) {
    throw DataError("model has " + std::to_string(params_.size()) + " parameters, expected " +
                    std::to_string(names.size()));
  }
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto [r, c] = parameter_shape(config_, names[i]);
    if (params_[i].name != names[i] || params_[i].value.rows() != r ||
        params_[i].value.cols() != c) {
      throw DataError("parameter " + std::to_string(i) + " ('" + params_[i].name +
                      "') does not match the configuration");
    }
  }
}

ToyLm ToyLm::init(const ToyLmConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const double d = static_cast<double>(config.hidden_dim);
  const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.layers));
  std::vector<Parameter> params;
  for (const auto& name : parameter_names(config)) {
    const auto [rows, cols] = parameter_shape(config, name);
    double sd = 1.0 / std::sqrt(static_cast<double>(rows));
    if (name == "embed" || name == "unembed" || name == "pos") sd = 1.0 / std::sqrt(d);
    if (name.ends_with(".wo") || name.ends_with(".w2")) sd *= residual_scale;
    MatrixD m(rows, cols);
    for (double& v : m.values()) v = sd * rng.normal();
    params.push_back({name, std::move(m)});
  }
  return ToyLm(config, std::move(params));
}

std::size_t ToyLm::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  throw UsageError("no parameter named '" + std::string(name) + "'");
}

const MatrixD& ToyLm::get(std::string_view name) const { return params_[index_of(name)].value; }
MatrixD& ToyLm::get(std::string_view name) { return params_[index_of(name)].value; }

bool ToyLm::operator==(const ToyLm& other) const {
  if (!(config_ == other.config_) || params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name != other.params_[i].name || !(params_[i].value == other.params_[i].value))
      return false;
  }
  return true;
}

std::vector<ad::Var> bind_parameters(ad::Tape& tape, const ToyLm& model, bool trainable) {
  std::vector<ad::Var> vars;
  for (const auto& p : model.parameters()) {
    vars.push_back(trainable ? tape.parameter(p.value) : tape.constant(p.value));
  }
  return vars;
}

Activations forward(const ToyLm& model, std::span<const ad::Var> params,
                    std::span<const TokenId> tokens) {
  const auto& c = model.config();
  if (params.size() != model.parameters().size()) {
    throw UsageError("forward: parameter binding does not match the model");
  }
  if (tokens.empty()) throw UsageError("forward: empty token sequence");
  if (tokens.size() > c.context) {
    throw UsageError("forward: sequence of " + std::to_string(tokens.size()) +
                     " tokens exceeds context " + std::to_string(c.context));
  }
  std::vector<std::size_t> ids(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= c.vocab_size) {
      throw DataError("token id " + std::to_string(tokens[i]) + " at position " +
                      std::to_string(i) + " is outside the vocabulary");
    }
    ids[i] = static_cast<std::size_t>(tokens[i]);
  }

  const std::size_t t = tokens.size();
  const std::size_t head_dim = c.hidden_dim / c.heads;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  auto param = [&](std::string_view name) { return params[model.index_of(name)]; };

  Activations out;
  ad::Var x = ad::add(ad::gather_rows(param("embed"), ids), ad::slice_rows(param("pos"), 0, t));
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    const ad::Var xn = ad::rms_norm_rows(x);
    const ad::Var q = ad::matmul(xn, param(p + "wq"));
    const ad::Var k = ad::matmul(xn, param(p + "wk"));
    const ad::Var v = ad::matmul(xn, param(p + "wv"));
    std::vector<ad::Var> heads;
    for (std::size_t h = 0; h < c.heads; ++h) {
      const ad::Var qh = ad::slice_cols(q, h * head_dim, head_dim);
      const ad::Var kh = ad::slice_cols(k, h * head_dim, head_dim);
      const ad::Var vh = ad::slice_cols(v, h * head_dim, head_dim);
      const ad::Var attn = ad::softmax_causal(ad::scale(ad::matmul_nt(qh, kh), attn_scale));
      heads.push_back(ad::matmul(attn, vh));
    }
    x = ad::add(x, ad::matmul(ad::concat_cols(heads), param(p + "wo")));
    const ad::Var xn2 = ad::rms_norm_rows(x);
    x = ad::add(x, ad::matmul(ad::gelu(ad::matmul(xn2, param(p + "w1"))), param(p + "w2")));
    out.hidden.push_back(x);
  }
  out.unembedding = param(model.unembedding_name());
  out.logits = ad::matmul_nt(ad::rms_norm_rows(x), out.unembedding);
  return out;
}

ForwardOutput forward(const ToyLm& model, std::span<const TokenId> tokens) {
  ad::Tape tape;
  const auto params = bind_parameters(tape, model, false);
  const auto act = forward(model, params, tokens);
  ForwardOutput out;
  out.logits = act.logits.value_matrix();
  for (const auto& h : act.hidden) out.hidden.push_back(h.value_matrix());
  return out;
}

MatrixD virtual_logits(const ToyLm& model, const MatrixD& hidden) {
  ad::Tape tape;
  const ad::Var u = tape.constant(model.get(model.unembedding_name()));
  return ad::matmul_nt(ad::rms_norm_rows(tape.constant(hidden)), u).value_matrix();
}

std::size_t Corpus::positions() const {
  std::size_t n = 0;
  for (const auto& s : sequences) n += s.size() - 1;
  return n;
}

std::vector<TokenId> Corpus::targets() const {
  std::vector<TokenId> out;
  out.reserve(positions());
  for (const auto& s : sequences) out.insert(out.end(), s.begin() + 1, s.end());
  return out;
}

Corpus make_corpus(std::span<const TokenId> tokens, std::size_t context) {
  if (context < 2) throw UsageError("make_corpus: context must be at least 2");
  Corpus c;
  for (std::size_t i = 0; i + 1 < tokens.size(); i += context) {
    const std::size_t n = std::min(context, tokens.size() - i);
    if (n < 2) break;
    c.sequences.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                             tokens.begin() + static_cast<std::ptrdiff_t>(i + n));
  }
  return c;
}

namespace {

MatrixD leading_rows(const MatrixD& m, std::size_t count) {
  std::vector<double> v(m.values().begin(),
                        m.values().begin() + static_cast<std::ptrdiff_t>(count * m.cols()));
  return MatrixD(count, m.cols(), std::move(v));
}

double row_cross_entropy(std::span<const double> row, TokenId target) {
  double mx = row[0];
  for (double v : row) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : row) z += std::exp(v - mx);
  return mx + std::log(z) - row[static_cast<std::size_t>(target)];
}

}  // namespace

std::vector<MarginRecord> audit_model(const ToyLm& model, const Corpus& corpus) {
  std::vector<MarginRecord> out;
  out.reserve(corpus.positions());
  for (const auto& seq : corpus.sequences) {
    const auto fwd = forward(model, seq);
    const std::size_t n = seq.size() - 1;
    const auto recs = compute_margins(leading_rows(fwd.logits, n),
                                      std::span<const TokenId>(seq).subspan(1));
    for (auto r : recs) {
      r.position = out.size();
      out.push_back(r);
    }
  }
  return out;
}

std::vector<LayerScanRow> layer_scan_rows(const std::vector<std::vector<double>>& virtual_margins,
                                          std::span<const double> final_ce, double tau) {
  std::vector<LayerScanRow> rows;
  for (std::size_t l = 0; l < virtual_margins.size(); ++l) {
    const auto& m = virtual_margins[l];
    if (m.size() != final_ce.size()) {
      throw UsageError("layer_scan: layer " + std::to_string(l) + " has " +
                       std::to_string(m.size()) + " margins for " +
                       std::to_string(final_ce.size()) + " positions");
    }
    std::vector<double> penalty(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) penalty[i] = std::max(0.0, tau - m[i]);
    LayerScanRow row;
    row.layer = l;
    try {
      row.spearman_ce_mrp = spearman(final_ce, penalty);
    } catch (const NumericalError&) {
      row.spearman_ce_mrp.reset();
    }
    rows.push_back(row);
  }
  return rows;
}

std::vector<LayerScanRow> layer_scan(const ToyLm& model, const Corpus& corpus, double tau) {
  const std::size_t layers = model.config().layers;
  std::vector<std::vector<double>> margins(layers);
  std::vector<double> ce;
  for (const auto& seq : corpus.sequences) {
    const auto fwd = forward(model, seq);
    const std::size_t n = seq.size() - 1;
    const auto targets = std::span<const TokenId>(seq).subspan(1);
    for (std::size_t i = 0; i < n; ++i) ce.push_back(row_cross_entropy(fwd.logits.row(i), targets[i]));
    for (std::size_t l = 0; l < layers; ++l) {
      const auto logits = virtual_logits(model, leading_rows(fwd.hidden[l], n));
      for (const auto& r : compute_margins(logits, targets)) margins[l].push_back(r.margin);
    }
  }
  return layer_scan_rows(margins, ce, tau);
}

}  // namespace vmargin
