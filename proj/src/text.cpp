#include "merl/text.hpp"

#include <cctype>

namespace merl {

namespace {

bool is_space(unsigned char c) { return c == ' ' || (c >= 0x09 && c <= 0x0d); }
bool is_edge_punct(unsigned char c) { return c < 0x80 && std::ispunct(c); }

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(static_cast<unsigned char>(text[j]))) ++j;
    std::size_t b = i, e = j;
    while (b < e && is_edge_punct(static_cast<unsigned char>(text[b]))) ++b;
    while (e > b && is_edge_punct(static_cast<unsigned char>(text[e - 1]))) --e;
    if (b < e) {
      std::string token(text.substr(b, e - b));
      for (char& c : token) {
        if (static_cast<unsigned char>(c) < 0x80) {
          c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        }
      }
      tokens.push_back(std::move(token));
    }
    i = j;
  }
  return tokens;
}

std::string normalize_term(std::string_view text) {
  std::string out;
  for (const auto& token : tokenize(text)) {
    if (!out.empty()) out.push_back(' ');
    out += token;
  }
  return out;
}

}  // namespace merl
