#include "merl/ckepe.hpp"

#include "merl/text.hpp"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <fstream>
#include <regex>
#include <thread>

namespace merl {

using nlohmann::json;

std::string_view to_string(KbKind kind) {
  return kind == KbKind::web_snomed ? "web_snomed" : "local_scp";
}

KbKind parse_kb_kind(std::string_view name) {
  if (name == "web_snomed") return KbKind::web_snomed;
  if (name == "local_scp") return KbKind::local_scp;
  throw Error(ErrorCode::configuration, "unknown knowledge base kind '" + std::string(name) + "'");
}

std::optional<std::string> KnowledgeBase::lookup(std::string_view term) const {
  const std::string key = normalize_term(term);
  if (key.empty()) return std::nullopt;
  if (terms.count(key)) return key;
  const auto it = synonym_map.find(key);
  if (it != synonym_map.end()) return it->second;
  return std::nullopt;
}

KnowledgeBase make_kb(std::string name, KbKind kind,
                      const std::vector<std::pair<std::string, std::vector<std::string>>>& rows) {
  KnowledgeBase kb;
  kb.name = std::move(name);
  kb.kind = kind;
  std::map<std::string, std::set<std::string>> synonyms_of;
  std::vector<std::string> conflicts;
  for (const auto& [canonical_raw, synonyms_raw] : rows) {
    const std::string canonical = normalize_term(canonical_raw);
    if (canonical.empty()) continue;
    std::set<std::string> synonyms;
    for (const auto& s : synonyms_raw) {
      const std::string key = normalize_term(s);
      if (!key.empty() && key != canonical) synonyms.insert(key);
    }
    const auto [it, inserted] = synonyms_of.try_emplace(canonical, synonyms);
    if (!inserted && it->second != synonyms) {
      conflicts.push_back("'" + canonical + "' is listed twice with different synonyms");
    }
  }
  for (const auto& [canonical, synonyms] : synonyms_of) {
    kb.terms.insert(canonical);
    for (const auto& s : synonyms) {
      const auto [it, inserted] = kb.synonym_map.try_emplace(s, canonical);
      if (!inserted && it->second != canonical) {
        conflicts.push_back("synonym '" + s + "' maps to both '" + it->second + "' and '" + canonical + "'");
      }
    }
  }
  for (const auto& [s, canonical] : kb.synonym_map) {
    if (kb.terms.count(s)) {
      conflicts.push_back("'" + s + "' is both a canonical term and a synonym of '" + canonical + "'");
    }
  }
  if (!conflicts.empty()) {
    std::string message = "knowledge base '" + kb.name + "' has conflicting entries:";
    for (const auto& c : conflicts) message += "\n  " + c;
    throw Error(ErrorCode::kb_conflict, message);
  }
  if (kb.terms.empty()) throw Error(ErrorCode::empty_kb, "knowledge base '" + kb.name + "' has no terms");
  return kb;
}

KnowledgeBase load_kb(const std::filesystem::path& path, KbKind kind, std::string name) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open knowledge base " + path.string());
  std::vector<std::pair<std::string, std::vector<std::string>>> rows;
  try {
    const json doc = json::parse(in);
    if (!doc.is_array()) throw Error(ErrorCode::parse, path.string() + ": expected a JSON array");
    for (const auto& row : doc) {
      rows.emplace_back(row.at("canonical").get<std::string>(),
                        row.value("synonyms", std::vector<std::string>{}));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse, path.string() + ": " + e.what());
  }
  return make_kb(name.empty() ? path.stem().string() : std::move(name), kind, rows);
}

// ---------------------------------------------------------------------------

std::string build_query(std::string_view condition) {
  std::string q = "Which attributes and subtypes does ";
  q += condition;
  q +=
      " have? If this condition specifically describes symptoms or a subtype, please refrain from "
      "answering; otherwise, generate all possible scenarios.";
  q +=
      "\n\nFormat the answer as exactly two lines:\n"
      "Subtypes: <term>; <term>; ...\n"
      "Attributes: <term>; <term>; ...\n"
      "Write none for an empty list. If you refrain from answering, reply with the single word "
      "REFRAIN.";
  return q;
}

FixtureClient::FixtureClient(std::map<std::string, std::string> responses) {
  for (auto& [condition, response] : responses) by_query_[build_query(condition)] = std::move(response);
}

FixtureClient FixtureClient::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open LLM fixture " + path.string());
  try {
    return FixtureClient(json::parse(in).get<std::map<std::string, std::string>>());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse, path.string() + ": " + e.what());
  }
}

std::string FixtureClient::send(const std::string& prompt) {
  ++calls_;
  const auto it = by_query_.find(prompt);
  if (it == by_query_.end()) {
    throw Error(ErrorCode::capability, "no recorded LLM response for this query");
  }
  return it->second;
}

LiveClient::LiveClient(LiveClientConfig config) : config_(std::move(config)) {}

std::string LiveClient::send(const std::string& prompt) {
  static const std::regex url_re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(config_.endpoint, m, url_re)) {
    throw Error(ErrorCode::configuration, "LLM endpoint is not an http(s) URL: " + config_.endpoint);
  }
  const std::string host = m[1].str();
  const std::string target = m[2].matched ? m[2].str() : "/";

  if (config_.requests_per_minute > 0 && last_request_) {
    const auto gap = std::chrono::duration<double>(60.0 / config_.requests_per_minute);
    const auto ready = *last_request_ + std::chrono::duration_cast<std::chrono::steady_clock::duration>(gap);
    std::this_thread::sleep_until(ready);
  }
  last_request_ = std::chrono::steady_clock::now();

  httplib::Client client(host);
  client.set_read_timeout(config_.timeout_seconds, 0);
  client.set_connection_timeout(config_.timeout_seconds, 0);
  httplib::Headers headers;
  if (const char* key = std::getenv(config_.api_key_env.c_str()); key && *key) {
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }
  const json body{{"model", config_.model},
                  {"temperature", 0},
                  {"messages", json::array({{{"role", "user"}, {"content", prompt}}})}};
  auto res = client.Post(target, headers, body.dump(), "application/json");
  if (!res) {
    throw Error(ErrorCode::io, "LLM request failed: " + httplib::to_string(res.error()));
  }
  if (res->status != 200) {
    throw Error(ErrorCode::io, "LLM endpoint returned HTTP " + std::to_string(res->status));
  }
  try {
    return json::parse(res->body).at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw ResponseParseError(std::string("unexpected LLM endpoint payload: ") + e.what(), res->body);
  }
}

// ---------------------------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::string lower_ascii(std::string s) {
  for (char& c : s) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return s;
}

// Strips list decorations such as "- ", "* " or "**" around a line.
std::string strip_decoration(std::string line) {
  line = trim(line);
  while (!line.empty() && (line.front() == '-' || line.front() == '*' || line.front() == '#')) {
    line = trim(std::string_view(line).substr(1));
  }
  while (!line.empty() && line.back() == '*') line.pop_back();
  return line;
}

std::vector<std::string> split_terms(std::string_view body) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  std::size_t start = 0;
  while (start <= body.size()) {
    const auto end = std::min(body.find(';', start), body.size());
    std::string term = trim(body.substr(start, end - start));
    // Markdown emphasis left over from "**Subtypes:** ..." labels.
    while (!term.empty() && term.front() == '*') term.erase(0, 1);
    while (!term.empty() && (term.back() == '.' || term.back() == '*')) term.pop_back();
    term = trim(term);
    const std::string key = normalize_term(term);
    if (!key.empty() && key != "none" && seen.insert(key).second) out.push_back(term);
    start = end + 1;
  }
  return out;
}

}  // namespace

CandidateTerms parse_candidates(std::string condition, std::string raw_response) {
  CandidateTerms out;
  out.condition = std::move(condition);
  bool saw_subtypes = false, saw_attributes = false, refrained = false;
  std::size_t pos = 0;
  const std::string& text = raw_response;
  while (pos <= text.size()) {
    const auto nl = std::min(text.find('\n', pos), text.size());
    const std::string line = strip_decoration(text.substr(pos, nl - pos));
    pos = nl + 1;
    const std::string lowered = lower_ascii(line);
    if (lowered == "refrain" || lowered == "refrain.") {
      refrained = true;
    } else if (lowered.rfind("subtypes:", 0) == 0) {
      if (saw_subtypes) throw ResponseParseError("response has two Subtypes lines", raw_response);
      saw_subtypes = true;
      out.subtypes = split_terms(std::string_view(line).substr(9));
    } else if (lowered.rfind("attributes:", 0) == 0) {
      if (saw_attributes) throw ResponseParseError("response has two Attributes lines", raw_response);
      saw_attributes = true;
      out.attributes = split_terms(std::string_view(line).substr(11));
    }
  }
  if (refrained && !saw_subtypes && !saw_attributes) {
    out.raw_response = std::move(raw_response);
    return out;
  }
  if (!saw_subtypes || !saw_attributes) {
    throw ResponseParseError("LLM response for '" + out.condition +
                                 "' lacks a Subtypes: or Attributes: line",
                             raw_response);
  }
  // The same term listed as both subtype and attribute is kept as a subtype.
  std::set<std::string> subtype_keys;
  for (const auto& s : out.subtypes) subtype_keys.insert(normalize_term(s));
  std::erase_if(out.attributes, [&](const std::string& a) { return subtype_keys.count(normalize_term(a)) > 0; });
  out.raw_response = std::move(raw_response);
  return out;
}

CandidateTerms query_candidates(const std::string& condition, LLMClient& client) {
  if (normalize_term(condition).empty()) {
    throw Error(ErrorCode::invalid_argument, "condition name is empty");
  }
  return parse_candidates(condition, client.send(build_query(condition)));
}

VerifiedPrompt verify_against_kb(const CandidateTerms& candidates,
                                 std::span<const KnowledgeBase* const> kbs) {
  VerifiedPrompt out;
  out.condition = candidates.condition;
  std::string checked;
  for (const auto* kb : kbs) checked += (checked.empty() ? "" : ", ") + kb->name;
  if (checked.empty()) checked = "(no knowledge base enabled)";
  std::set<std::string> kept_keys;
  auto process = [&](const std::vector<std::string>& terms, std::vector<std::string>& kept) {
    for (const auto& term : terms) {
      std::optional<std::string> canonical;
      for (const auto* kb : kbs) {
        if (auto hit = kb->lookup(term)) {
          if (!canonical) canonical = hit;
          out.kb_hits.push_back(kb->name + ":" + *hit);
        }
      }
      if (!canonical) {
        out.discarded.push_back({term, "not found in " + checked});
      } else if (kept_keys.insert(*canonical).second) {
        kept.push_back(*canonical);
      }
    }
  };
  process(candidates.subtypes, out.kept_subtypes);
  process(candidates.attributes, out.kept_attributes);
  return out;
}

namespace {

std::string join(const std::vector<std::string>& items, std::string_view sep) {
  std::string out;
  for (const auto& s : items) {
    if (!out.empty()) out += sep;
    out += s;
  }
  return out;
}

}  // namespace

std::string assemble_prompt(std::string_view condition, const std::vector<std::string>& subtypes,
                            const std::vector<std::string>& attributes, PromptStyle style) {
  std::string text(condition);
  switch (style) {
    case PromptStyle::name_only: return text;
    case PromptStyle::fixed_template: return "ECG showing " + text;
    case PromptStyle::ckepe: break;
  }
  if (!subtypes.empty()) text += ", subtypes: " + join(subtypes, "; ");
  if (!attributes.empty()) text += ", signal attributes: " + join(attributes, "; ");
  return text;
}

VerifiedPrompt assemble_prompt(VerifiedPrompt verified, PromptStyle style) {
  verified.prompt_text =
      assemble_prompt(verified.condition, verified.kept_subtypes, verified.kept_attributes, style);
  return verified;
}

ClassPrompt to_class_prompt(const VerifiedPrompt& verified) {
  return {verified.condition, verified.prompt_text, verified.kept_subtypes, verified.kept_attributes,
          verified.kb_hits};
}

ClassPromptSet build_ckepe_prompts(const std::vector<std::string>& conditions, LLMClient& client,
                                   std::span<const KnowledgeBase* const> kbs, PromptStyle style) {
  if (kbs.empty() && style == PromptStyle::ckepe) {
    throw Error(ErrorCode::empty_kb, "knowledge-enhanced prompts need at least one knowledge base");
  }
  ClassPromptSet set;
  set.style = style;
  for (const auto& condition : conditions) {
    VerifiedPrompt verified;
    if (style == PromptStyle::ckepe) {
      verified = verify_against_kb(query_candidates(condition, client), kbs);
    } else {
      verified.condition = condition;
    }
    set.entries.push_back(to_class_prompt(assemble_prompt(std::move(verified), style)));
  }
  set.validate();
  return set;
}

}  // namespace merl
