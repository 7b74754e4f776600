#include "merl/ckepe.hpp"
#include "merl/text.hpp"
#include "test_util.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <fstream>
#include <thread>

using namespace merl;
using merl::test::error_code_of;

namespace {

struct Fixtures {
  KnowledgeBase snomed = load_kb(test::data_dir() / "fixtures" / "kb_snomed_subset.json", KbKind::web_snomed);
  KnowledgeBase scp = load_kb(test::data_dir() / "fixtures" / "kb_scp_statements.json", KbKind::local_scp);
  FixtureClient client = FixtureClient::load(test::data_dir() / "fixtures" / "llm_responses.json");
};

// Membership straight from the KB file rows, bypassing KnowledgeBase::lookup.
bool in_kb_file(const std::filesystem::path& path, const std::string& term) {
  std::ifstream in(path);
  const auto doc = nlohmann::json::parse(in);
  const std::string key = normalize_term(term);
  for (const auto& row : doc) {
    if (normalize_term(row.at("canonical").get<std::string>()) == key) return true;
    for (const auto& s : row.at("synonyms")) {
      if (normalize_term(s.get<std::string>()) == key) return true;
    }
  }
  return false;
}

}  // namespace

TEST_CASE("knowledge base loading and lookup") {
  const auto kb = make_kb("t", KbKind::local_scp,
                          {{"Atrial Fibrillation", {"AFib"}}, {"st elevation", {}}, {"q waves", {}}});
  CHECK(kb.terms.size() == 3);
  CHECK(kb.lookup("atrial  fibrillation") == std::optional<std::string>("atrial fibrillation"));
  CHECK(kb.lookup("AFib") == std::optional<std::string>("atrial fibrillation"));
  CHECK(kb.lookup("(ST elevation).") == std::optional<std::string>("st elevation"));
  CHECK(!kb.lookup("atrial flutter"));

  CHECK(error_code_of([] { make_kb("e", KbKind::local_scp, {}); }) == ErrorCode::empty_kb);
  CHECK(error_code_of([] {
          make_kb("c", KbKind::local_scp, {{"afib", {"af"}}, {"afib", {"a fib"}}});
        }) == ErrorCode::kb_conflict);
  CHECK(error_code_of([] {
          make_kb("c", KbKind::local_scp, {{"afib", {"x"}}, {"flutter", {"x"}}});
        }) == ErrorCode::kb_conflict);
  // Identical duplicate rows are harmless.
  CHECK(make_kb("d", KbKind::local_scp, {{"afib", {"af"}}, {"AFIB", {"AF"}}}).terms.size() == 1);

  Fixtures f;
  CHECK(f.snomed.name == "kb_snomed_subset");
  CHECK(f.snomed.kind == KbKind::web_snomed);
  const auto dir = test::scratch_dir("ckepe_kb");
  std::ofstream(dir / "bad.json") << "{}";
  CHECK(error_code_of([&] { load_kb(dir / "bad.json", KbKind::local_scp); }) == ErrorCode::parse);
  CHECK(error_code_of([&] { load_kb(dir / "missing.json", KbKind::local_scp); }) == ErrorCode::io);
}

TEST_CASE("response grammar") {
  SUBCASE("two labelled lists") {
    const auto c = parse_candidates("x", "Here you go.\nSubtypes: a; b\n- **Attributes:** c; d; e\n");
    CHECK(c.subtypes == std::vector<std::string>{"a", "b"});
    CHECK(c.attributes == std::vector<std::string>{"c", "d", "e"});
    CHECK(c.raw_response.find("Here you go") == 0);
  }
  SUBCASE("refrain") {
    const auto c = parse_candidates("x", "REFRAIN");
    CHECK(c.subtypes.empty());
    CHECK(c.attributes.empty());
  }
  SUBCASE("duplicates appear once, first spelling kept") {
    const auto c = parse_candidates("x", "subtypes: Alpha; alpha; ALPHA ; beta\nattributes: none");
    CHECK(c.subtypes == std::vector<std::string>{"Alpha", "beta"});
    CHECK(c.attributes.empty());
  }
  SUBCASE("unparseable responses keep the raw text") {
    try {
      parse_candidates("x", "I am not sure.");
      FAIL("expected a parse error");
    } catch (const ResponseParseError& e) {
      CHECK(e.code() == ErrorCode::llm_parse);
      CHECK(e.raw_response() == "I am not sure.");
    }
    CHECK(error_code_of([] { parse_candidates("x", "Subtypes: a\nSubtypes: b\nAttributes: c"); }) ==
          ErrorCode::llm_parse);
  }
}

TEST_CASE("the query carries the question verbatim") {
  const auto q = build_query("atrial fibrillation");
  CHECK(q.rfind("Which attributes and subtypes does atrial fibrillation have?", 0) == 0);
  Fixtures f;
  const auto c = query_candidates("first degree av block", f.client);
  CHECK(c.subtypes.empty());
  CHECK(c.attributes.size() == 2);
  CHECK(f.client.calls() == 1);
  CHECK(error_code_of([&] { query_candidates("unknown condition", f.client); }) == ErrorCode::capability);
  CHECK(error_code_of([&] { query_candidates("  ", f.client); }) == ErrorCode::invalid_argument);
}

TEST_CASE("verification keeps exactly the terms present in a knowledge base") {
  Fixtures f;
  const KnowledgeBase* kbs[] = {&f.snomed, &f.scp};
  const auto snomed_path = test::data_dir() / "fixtures" / "kb_snomed_subset.json";
  const auto scp_path = test::data_dir() / "fixtures" / "kb_scp_statements.json";
  for (const std::string condition :
       {"atrial fibrillation", "first degree av block", "right bundle branch block", "normal sinus rhythm"}) {
    const auto c = query_candidates(condition, f.client);
    auto v = assemble_prompt(verify_against_kb(c, kbs), PromptStyle::ckepe);
    std::vector<std::string> all = c.subtypes;
    all.insert(all.end(), c.attributes.begin(), c.attributes.end());
    std::size_t present = 0;
    for (const auto& term : all) {
      const bool expected = in_kb_file(snomed_path, term) || in_kb_file(scp_path, term);
      const bool discarded = std::any_of(v.discarded.begin(), v.discarded.end(),
                                         [&](const DiscardedTerm& d) { return d.term == term; });
      INFO(condition << ": " << term);
      CHECK(discarded == !expected);
      present += expected;
    }
    CHECK(v.kept_subtypes.size() + v.kept_attributes.size() == present);
    CHECK(v.discarded.size() == all.size() - present);
    const std::string prompt = normalize_term(v.prompt_text);
    for (const auto& d : v.discarded) {
      CHECK(prompt.find(normalize_term(d.term)) == std::string::npos);
      CHECK(d.reason.find("kb_snomed_subset") != std::string::npos);
      CHECK(d.reason.find("kb_scp_statements") != std::string::npos);
    }
    if (condition == "atrial fibrillation") {
      CHECK(present == 5);
      CHECK(v.discarded.size() == 3);
    }
    if (condition == "normal sinus rhythm") CHECK(v.prompt_text == condition);
  }
}

TEST_CASE("disabling a knowledge base discards the terms only it holds") {
  Fixtures f;
  const auto c = query_candidates("atrial fibrillation", f.client);
  const KnowledgeBase* both[] = {&f.snomed, &f.scp};
  const KnowledgeBase* one[] = {&f.snomed};
  const auto with = verify_against_kb(c, both);
  const auto without = verify_against_kb(c, one);
  auto has = [](const std::vector<std::string>& v, const std::string& s) {
    return std::find(v.begin(), v.end(), s) != v.end();
  };
  CHECK(has(with.kept_attributes, "fibrillatory waves"));
  CHECK(!has(without.kept_attributes, "fibrillatory waves"));
  CHECK(without.discarded.size() == with.discarded.size() + 1);

  const CandidateTerms empty{"x", {}, {}, ""};
  const auto e = verify_against_kb(empty, both);
  CHECK(e.kept_subtypes.empty());
  CHECK(e.discarded.empty());
}

TEST_CASE("prompt assembly") {
  const auto p = assemble_prompt("myocardial infarction", {"anterior myocardial infarction"}, {"q waves"},
                                 PromptStyle::ckepe);
  CHECK(p == "myocardial infarction, subtypes: anterior myocardial infarction, signal attributes: q waves");
  CHECK(assemble_prompt("mi", {}, {"a", "b"}, PromptStyle::ckepe) == "mi, signal attributes: a; b");
  CHECK(assemble_prompt("mi", {}, {}, PromptStyle::ckepe) == "mi");
  CHECK(assemble_prompt("mi", {"x"}, {"y"}, PromptStyle::name_only) == "mi");
  CHECK(assemble_prompt("mi", {"x"}, {"y"}, PromptStyle::fixed_template) == "ECG showing mi");
}

TEST_CASE("the pipeline is a pure function of its inputs") {
  Fixtures f;
  const KnowledgeBase* kbs[] = {&f.snomed, &f.scp};
  const std::vector<std::string> conditions{"atrial fibrillation", "right bundle branch block"};
  const auto a = build_ckepe_prompts(conditions, f.client, kbs);
  Fixtures g;
  const auto b = build_ckepe_prompts(conditions, g.client, kbs);
  REQUIRE(a.entries.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(a.entries[i].prompt_text == b.entries[i].prompt_text);
    CHECK(a.entries[i].kb_hits == b.entries[i].kb_hits);
  }
  CHECK(a.class_names() == conditions);
  CHECK(error_code_of([&] { build_ckepe_prompts(conditions, f.client, {}); }) == ErrorCode::empty_kb);
  CHECK(build_ckepe_prompts(conditions, f.client, {}, PromptStyle::name_only).entries[1].prompt_text ==
        "right bundle branch block");
}

TEST_CASE("live client speaks the chat-completions protocol") {
  httplib::Server server;
  nlohmann::json seen;
  std::string auth;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    seen = nlohmann::json::parse(req.body);
    auth = req.get_header_value("Authorization");
    const nlohmann::json reply{
        {"choices", {{{"message", {{"role", "assistant"}, {"content", "Subtypes: a\nAttributes: none"}}}}}}};
    res.set_content(reply.dump(), "application/json");
  });
  server.Post("/broken", [](const httplib::Request&, httplib::Response& res) {
    res.set_content("{\"nope\": 1}", "application/json");
  });
  server.Post("/down", [](const httplib::Request&, httplib::Response& res) { res.status = 503; });
  const int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread thread([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  ::setenv("MERL_TEST_LLM_KEY", "secret", 1);
  LiveClientConfig cfg;
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  cfg.model = "test-model";
  cfg.api_key_env = "MERL_TEST_LLM_KEY";
  cfg.requests_per_minute = 0;
  cfg.timeout_seconds = 5;
  LiveClient client(cfg);
  const auto c = query_candidates("atrial fibrillation", client);
  CHECK(c.subtypes == std::vector<std::string>{"a"});
  CHECK(seen["model"] == "test-model");
  CHECK(seen["messages"][0]["content"] == build_query("atrial fibrillation"));
  CHECK(auth == "Bearer secret");

  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/broken";
  LiveClient broken(cfg);
  CHECK(error_code_of([&] { broken.send("q"); }) == ErrorCode::llm_parse);
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/down";
  LiveClient down(cfg);
  CHECK(error_code_of([&] { down.send("q"); }) == ErrorCode::io);
  cfg.endpoint = "ftp://example";
  LiveClient bad(cfg);
  CHECK(error_code_of([&] { bad.send("q"); }) == ErrorCode::configuration);

  server.stop();
  thread.join();
  ::unsetenv("MERL_TEST_LLM_KEY");
}
