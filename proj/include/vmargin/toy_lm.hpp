#ifndef VMARGIN_TOY_LM_HPP
#define VMARGIN_TOY_LM_HPP

// Desk-scale causal transformer with optionally tied input/output embeddings.
//
// Each block is pre-norm: x += attn(rms(x)); x += mlp(rms(x)). Logits are
// rms(x_final) * E^T where E is the shared embedding matrix when tied. The
// logit row at position t predicts token t + 1.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vmargin/autodiff.hpp"
#include "vmargin/margin.hpp"
#include "vmargin/matrix.hpp"

namespace vmargin {

struct ToyLmConfig {
  std::size_t vocab_size = 512;
  std::size_t hidden_dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t context = 64;
  bool tied_embeddings = true;

  void validate() const;
  bool operator==(const ToyLmConfig&) const = default;
};

struct Parameter {
  std::string name;
  MatrixD value;
};

class ToyLm {
 public:
  ToyLm() = default;
  ToyLm(ToyLmConfig config, std::vector<Parameter> params);

  /// Fresh model with seeded scaled-normal initialization.
  static ToyLm init(const ToyLmConfig& config, std::uint64_t seed);

  const ToyLmConfig& config() const noexcept { return config_; }
  std::vector<Parameter>& parameters() noexcept { return params_; }
  const std::vector<Parameter>& parameters() const noexcept { return params_; }

  const MatrixD& get(std::string_view name) const;
  MatrixD& get(std::string_view name);
  std::size_t index_of(std::string_view name) const;

  /// Name of the matrix that maps hidden states to logits.
  std::string_view unembedding_name() const noexcept {
    return config_.tied_embeddings ? "embed" : "unembed";
  }

  bool operator==(const ToyLm&) const;

 private:
  ToyLmConfig config_;
  std::vector<Parameter> params_;
};

/// Parameter names in storage order for a configuration.
std::vector<std::string> parameter_names(const ToyLmConfig& config);

/// Records every parameter on `tape`, as trainable leaves or constants.
std::vector<ad::Var> bind_parameters(ad::Tape& tape, const ToyLm& model, bool trainable);

struct Activations {
  ad::Var logits;               // T x V
  std::vector<ad::Var> hidden;  // residual stream after each block, T x d
  ad::Var unembedding;          // V x d
};

Activations forward(const ToyLm& model, std::span<const ad::Var> params,
                    std::span<const TokenId> tokens);

/// Untracked forward pass.
struct ForwardOutput {
  MatrixD logits;
  std::vector<MatrixD> hidden;
};
ForwardOutput forward(const ToyLm& model, std::span<const TokenId> tokens);

/// Logits for hidden states of any layer via the final norm and unembedding.
MatrixD virtual_logits(const ToyLm& model, const MatrixD& hidden);

/// Token stream cut into non-overlapping sequences of `context` tokens; a
/// trailing fragment shorter than 2 tokens is dropped.
struct Corpus {
  std::vector<std::vector<TokenId>> sequences;

  /// Loss positions: sequence length - 1 per sequence.
  std::size_t positions() const;
  /// Targets of every loss position, in audit order.
  std::vector<TokenId> targets() const;
};

Corpus make_corpus(std::span<const TokenId> tokens, std::size_t context);

/// Margin records for every loss position of the corpus; positions are
/// numbered consecutively across sequences.
std::vector<MarginRecord> audit_model(const ToyLm& model, const Corpus& corpus);

struct LayerScanRow {
  std::size_t layer = 0;
  std::optional<double> spearman_ce_mrp;  // absent when undefined

  bool operator==(const LayerScanRow&) const = default;
};

/// Spearman correlation per layer between the virtual margin deficit
/// max(0, tau - m) and the final-layer cross-entropy of each position.
std::vector<LayerScanRow> layer_scan_rows(const std::vector<std::vector<double>>& virtual_margins,
                                          std::span<const double> final_ce, double tau);

std::vector<LayerScanRow> layer_scan(const ToyLm& model, const Corpus& corpus, double tau = 0.5);

}  // namespace vmargin

#endif  // VMARGIN_TOY_LM_HPP
