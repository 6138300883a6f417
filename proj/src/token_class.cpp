#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <string>

#include "vmargin/audit.hpp"

namespace vmargin {

namespace {

// articles, prepositions, pronouns, auxiliaries, conjunctions
constexpr std::array<std::string_view, 101> kFunctionWords = {
    "a",       "an",     "the",

    "of",      "in",     "to",      "for",     "with",   "on",     "at",      "by",
    "from",    "about",  "into",    "over",    "after",  "before", "between", "under",
    "through", "during", "without", "against", "among",  "upon",   "within",  "toward",
    "across",  "behind", "above",   "below",   "around", "off",    "up",      "down",
    "out",     "near",

    "i",       "me",     "my",      "mine",    "you",    "your",   "yours",   "he",
    "him",     "his",    "she",     "her",     "hers",   "it",     "its",     "we",
    "us",      "our",    "they",    "them",    "their",  "this",   "that",    "these",
    "those",   "who",    "whom",    "whose",   "which",  "what",

    "is",      "am",     "are",     "was",     "were",   "be",     "been",    "being",
    "have",    "has",    "had",     "do",      "does",   "did",    "will",    "would",
    "shall",   "should", "can",     "could",   "may",    "might",  "must",

    "and",     "or",     "but",     "nor",     "so",     "yet",    "if",      "because",
    "although", "while", "as",
};

/// Decodes one UTF-8 sequence at `i`; malformed bytes decode as themselves.
char32_t next_code_point(std::string_view s, std::size_t& i) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  std::size_t len = 1;
  char32_t cp = b0;
  if ((b0 & 0xE0) == 0xC0) {
    len = 2;
    cp = b0 & 0x1F;
  } else if ((b0 & 0xF0) == 0xE0) {
    len = 3;
    cp = b0 & 0x0F;
  } else if ((b0 & 0xF8) == 0xF0) {
    len = 4;
    cp = b0 & 0x07;
  }
  if (len == 1 || i + len > s.size()) {
    ++i;
    return b0;
  }
  for (std::size_t k = 1; k < len; ++k) {
    const auto b = static_cast<unsigned char>(s[i + k]);
    if ((b & 0xC0) != 0x80) {
      ++i;
      return b0;
    }
    cp = (cp << 6) | (b & 0x3F);
  }
  i += len;
  return cp;
}

bool is_space(char32_t c) {
  return c == ' ' || (c >= 0x09 && c <= 0x0D) || c == 0x85 || c == 0xA0 || c == 0x1680 ||
         (c >= 0x2000 && c <= 0x200A) || c == 0x2028 || c == 0x2029 || c == 0x202F ||
         c == 0x205F || c == 0x3000;
}

// Unicode P* and S* categories, approximated by block.
bool is_punct_or_symbol(char32_t c) {
  if (c < 0x80) {
    return (c >= 0x21 && c <= 0x2F) || (c >= 0x3A && c <= 0x40) || (c >= 0x5B && c <= 0x60) ||
           (c >= 0x7B && c <= 0x7E);
  }
  if (c >= 0xA1 && c <= 0xBF) return c != 0xAA && c != 0xB2 && c != 0xB3 && c != 0xB9 && c != 0xBA && c != 0xBC && c != 0xBD && c != 0xBE;
  if (c == 0xD7 || c == 0xF7) return true;
  if (c >= 0x2010 && c <= 0x2027) return true;
  if (c >= 0x2030 && c <= 0x205E) return true;
  if (c >= 0x20A0 && c <= 0x20CF) return true;
  if (c >= 0x2190 && c <= 0x2BFF) return true;
  if (c >= 0x2E00 && c <= 0x2E7F) return true;
  if (c >= 0x3001 && c <= 0x3003) return true;
  if (c >= 0x3008 && c <= 0x3011) return true;
  if (c >= 0x3014 && c <= 0x301F) return true;
  if (c >= 0xFF01 && c <= 0xFF0F) return true;
  if (c >= 0xFF1A && c <= 0xFF20) return true;
  if (c >= 0xFF3B && c <= 0xFF40) return true;
  if (c >= 0xFF5B && c <= 0xFF65) return true;
  if (c >= 0x1F000 && c <= 0x1FAFF) return true;
  return false;
}

bool is_upper(char c) { return c >= 'A' && c <= 'Z'; }
bool is_lower(char c) { return c >= 'a' && c <= 'z'; }
bool is_alpha(char c) { return is_upper(c) || is_lower(c); }
bool is_digit(char c) { return c >= '0' && c <= '9'; }

std::string_view trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  // ASCII and common multi-byte spaces
  while (b < e) {
    std::size_t i = b;
    if (!is_space(next_code_point(s, i))) break;
    b = i;
  }
  while (e > b) {
    std::size_t start = e - 1;
    while (start > b && (static_cast<unsigned char>(s[start]) & 0xC0) == 0x80) --start;
    std::size_t i = start;
    if (!is_space(next_code_point(s, i)) || i != e) break;
    e = start;
  }
  return s.substr(b, e - b);
}

bool all_structural(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    if (!is_punct_or_symbol(next_code_point(s, i))) return false;
  }
  return true;
}

bool numeric(std::string_view s) {
  if (!is_digit(s[0])) return false;
  return std::all_of(s.begin() + 1, s.end(), [](char c) {
    return is_digit(c) || std::string_view(",./:%+-").find(c) != std::string_view::npos;
  });
}

}  // namespace

std::string_view to_string(TokenClass c) {
  switch (c) {
    case TokenClass::kStructural: return "structural";
    case TokenClass::kNumeric: return "numeric";
    case TokenClass::kFunctionWord: return "function_word";
    case TokenClass::kEntityLike: return "entity_like";
    case TokenClass::kContentWord: return "content_word";
    case TokenClass::kFragment: return "fragment";
  }
  return "fragment";
}

std::span<const std::string_view> function_words() { return kFunctionWords; }

TokenClass classify_token(std::string_view text) {
  if (text.empty()) return TokenClass::kFragment;
  const std::string_view t = trim(text);
  if (t.empty() || all_structural(t)) return TokenClass::kStructural;
  if (numeric(t)) return TokenClass::kNumeric;
  if (!std::all_of(t.begin(), t.end(), is_alpha)) return TokenClass::kFragment;

  std::string lower(t);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](char c) { return is_upper(c) ? static_cast<char>(c - 'A' + 'a') : c; });
  if (std::find(kFunctionWords.begin(), kFunctionWords.end(), lower) != kFunctionWords.end()) {
    return TokenClass::kFunctionWord;
  }
  if (t.size() >= 2 && is_upper(t[0])) {
    // ^[A-Z][A-Za-z]+$ covers ^[A-Z]{2,}$ as well
    return TokenClass::kEntityLike;
  }
  return TokenClass::kContentWord;
}

}  // namespace vmargin
