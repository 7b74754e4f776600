#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace merl {

// Term normalization shared by the text encoder and knowledge-base lookups:
// ASCII lower-casing, whitespace runs collapsed to one space, punctuation
// stripped from both ends of every token. Interior punctuation is kept
// ("st-t" stays "st-t").
std::string normalize_term(std::string_view text);

// Tokens of normalize_term(text), dropping tokens that were pure punctuation.
std::vector<std::string> tokenize(std::string_view text);

}  // namespace merl
