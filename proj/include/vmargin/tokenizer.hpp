#ifndef VMARGIN_TOKENIZER_HPP
#define VMARGIN_TOKENIZER_HPP

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vmargin/margin.hpp"

namespace vmargin {

/// Splits text into word pieces: runs of ASCII letters, runs of digits, and
/// single non-space characters (a multi-byte UTF-8 sequence counts as one).
/// Whitespace separates pieces and is dropped.
std::vector<std::string> split_words(std::string_view text);

/// Closed word-level vocabulary. Id 0 is the unknown token; the remaining
/// ids are the most frequent pieces of the training text, ordered by
/// descending count and then lexicographically.
class Tokenizer {
 public:
  static constexpr TokenId kUnknown = 0;
  static constexpr std::string_view kUnknownText = "<unk>";

  static Tokenizer build(std::string_view text, std::size_t vocab_size);
  static Tokenizer from_tokens(std::vector<std::string> tokens);

  std::vector<TokenId> encode(std::string_view text) const;
  const std::string& text(TokenId id) const;
  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Reads and concatenates text files, separated by a newline.
std::string read_text_files(const std::vector<std::string>& paths);

}  // namespace vmargin

#endif  // VMARGIN_TOKENIZER_HPP
