#include "vmargin/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "vmargin/error.hpp"

namespace vmargin {

namespace {

bool is_alpha(unsigned char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); }
bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }
bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead & 0xE0) == 0xC0) return 2;
  if ((lead & 0xF0) == 0xE0) return 3;
  if ((lead & 0xF8) == 0xF0) return 4;
  return 1;  // stray continuation byte
}

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (is_space(c)) {
      ++i;
      continue;
    }
    std::size_t j = i + 1;
    if (is_alpha(c)) {
      while (j < text.size() && is_alpha(static_cast<unsigned char>(text[j]))) ++j;
    } else if (is_digit(c)) {
      while (j < text.size() && is_digit(static_cast<unsigned char>(text[j]))) ++j;
    } else {
      j = std::min(text.size(), i + utf8_length(c));
    }
    out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

Tokenizer Tokenizer::build(std::string_view text, std::size_t vocab_size) {
  if (vocab_size < 2) throw UsageError("tokenizer vocabulary needs at least 2 entries");
  std::map<std::string, std::size_t> counts;
  for (auto& w : split_words(text)) ++counts[w];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens{std::string(kUnknownText)};
  for (auto& [word, n] : ranked) {
    if (tokens.size() == vocab_size) break;
    tokens.push_back(word);
  }
  return from_tokens(std::move(tokens));
}

Tokenizer Tokenizer::from_tokens(std::vector<std::string> tokens) {
  if (tokens.empty() || tokens[0] != kUnknownText) {
    throw DataError("tokenizer vocabulary must start with " + std::string(kUnknownText));
  }
  Tokenizer t;
  t.tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < t.tokens_.size(); ++i) {
    if (!t.index_.emplace(t.tokens_[i], static_cast<TokenId>(i)).second) {
      throw DataError("duplicate vocabulary entry '" + t.tokens_[i] + "'");
    }
  }
  return t;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (auto& w : split_words(text)) {
    auto it = index_.find(w);
    ids.push_back(it == index_.end() ? kUnknown : it->second);
  }
  return ids;
}

const std::string& Tokenizer::text(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DataError("token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::string read_text_files(const std::vector<std::string>& paths) {
  std::string out;
  for (const auto& p : paths) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError("cannot read corpus file '" + p + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    if (!out.empty()) out.push_back('\n');
    out += ss.str();
  }
  return out;
}

}  // namespace vmargin
