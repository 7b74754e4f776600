#pragma once

// Knowledge-enhanced prompt construction: ask an LLM for subtypes and
// attributes of a condition, keep only terms found in a trusted knowledge
// base, and assemble a structured prompt from the survivors.

#include "merl/common.hpp"
#include "merl/zeroshot.hpp"

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace merl {

enum class KbKind { web_snomed, local_scp };

std::string_view to_string(KbKind kind);
KbKind parse_kb_kind(std::string_view name);

struct KnowledgeBase {
  std::string name;
  KbKind kind = KbKind::local_scp;
  std::set<std::string> terms;                     // normalized canonical terms
  std::map<std::string, std::string> synonym_map;  // normalized synonym -> canonical

  // Canonical form of `term` if it or one of its synonyms is present.
  std::optional<std::string> lookup(std::string_view term) const;
};

// KB file: JSON array of {canonical, synonyms: [..]}. `name` defaults to the
// file stem.
KnowledgeBase load_kb(const std::filesystem::path& path, KbKind kind, std::string name = {});
KnowledgeBase make_kb(std::string name, KbKind kind,
                      const std::vector<std::pair<std::string, std::vector<std::string>>>& rows);

// ---------------------------------------------------------------------------
// LLM access

class LLMClient {
 public:
  virtual ~LLMClient() = default;
  virtual std::string send(const std::string& prompt) = 0;
};

// Replays recorded responses keyed by condition name.
class FixtureClient final : public LLMClient {
 public:
  explicit FixtureClient(std::map<std::string, std::string> responses);
  // JSON object {condition: response text}.
  static FixtureClient load(const std::filesystem::path& path);

  std::string send(const std::string& prompt) override;
  std::size_t calls() const { return calls_; }

 private:
  std::map<std::string, std::string> by_query_;
  std::size_t calls_ = 0;
};

// OpenAI-style chat-completions endpoint. The key is read from the named
// environment variable at send time and never stored in results.
struct LiveClientConfig {
  std::string endpoint = "https://api.openai.com/v1/chat/completions";
  std::string model = "gpt-4";
  std::string api_key_env = "MERL_LLM_API_KEY";
  double requests_per_minute = 20;
  int timeout_seconds = 120;
};

class LiveClient final : public LLMClient {
 public:
  explicit LiveClient(LiveClientConfig config);
  std::string send(const std::string& prompt) override;

 private:
  LiveClientConfig config_;
  std::optional<std::chrono::steady_clock::time_point> last_request_;
};

// ---------------------------------------------------------------------------
// Pipeline

inline constexpr const char* kPromptTemplateVersion = "merl-prompt-v1";

struct CandidateTerms {
  std::string condition;
  std::vector<std::string> subtypes;
  std::vector<std::string> attributes;
  std::string raw_response;
};

class ResponseParseError : public Error {
 public:
  ResponseParseError(const std::string& message, std::string raw_response)
      : Error(ErrorCode::llm_parse, message), raw_response_(std::move(raw_response)) {}
  const std::string& raw_response() const { return raw_response_; }

 private:
  std::string raw_response_;
};

// The literal question for `condition` followed by the response-format
// instructions.
std::string build_query(std::string_view condition);

// Response grammar: a line "Subtypes: t1; t2; ..." and a line
// "Attributes: t1; t2; ...", labels case-insensitive, "none" or nothing for
// an empty list, other lines ignored. A line reading "REFRAIN" yields empty
// lists. Terms are deduplicated case-insensitively, first spelling kept.
CandidateTerms parse_candidates(std::string condition, std::string raw_response);
CandidateTerms query_candidates(const std::string& condition, LLMClient& client);

struct DiscardedTerm {
  std::string term;
  std::string reason;
};

struct VerifiedPrompt {
  std::string condition;
  std::vector<std::string> kept_subtypes;    // canonical KB spelling
  std::vector<std::string> kept_attributes;  // canonical KB spelling
  std::vector<DiscardedTerm> discarded;
  std::vector<std::string> kb_hits;  // "<kb name>:<canonical>" per kept term
  std::string prompt_text;
};

VerifiedPrompt verify_against_kb(const CandidateTerms& candidates,
                                 std::span<const KnowledgeBase* const> kbs);

// "<condition>, subtypes: s1; s2, signal attributes: a1; a2" with empty
// sections omitted, or the name_only / fixed-template forms.
std::string assemble_prompt(std::string_view condition, const std::vector<std::string>& subtypes,
                            const std::vector<std::string>& attributes, PromptStyle style);
VerifiedPrompt assemble_prompt(VerifiedPrompt verified, PromptStyle style);

ClassPrompt to_class_prompt(const VerifiedPrompt& verified);

// Full pipeline over a list of conditions.
ClassPromptSet build_ckepe_prompts(const std::vector<std::string>& conditions, LLMClient& client,
                                   std::span<const KnowledgeBase* const> kbs,
                                   PromptStyle style = PromptStyle::ckepe);

}  // namespace merl
