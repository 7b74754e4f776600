#include "merl/ckepe.hpp"
#include "merl/experiment.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <fstream>
#include <iostream>

using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "INI configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "Override a configuration value (section.key=value)");
  cmd->add_option("--seed", c.seed, "Experiment seed");
}

merl::ExperimentConfig load(const Common& c, std::vector<std::string> extra = {}) {
  std::vector<std::string> overrides = std::move(extra);
  overrides.insert(overrides.end(), c.overrides.begin(), c.overrides.end());
  return c.config.empty() ? merl::parse_experiment_config("", overrides, c.seed)
                          : merl::load_experiment_config(c.config, overrides, c.seed);
}

int report_run(const merl::ExperimentReport& report) {
  if (!report.table.empty()) std::cout << report.table;
  if (report.failures.empty()) return 0;
  json failures = json::array();
  for (const auto& f : report.failures) {
    failures.push_back({{"subtask", f.subtask}, {"error", f.error_code}, {"message", f.message}});
  }
  std::cerr << json{{"error", "partial_failure"}, {"failures", failures}}.dump() << "\n";
  return 1;
}

int run_with_tasks(merl::ExperimentConfig cfg, std::vector<std::string> tasks,
                   const std::string& checkpoint) {
  cfg.tasks = std::move(tasks);
  if (!checkpoint.empty()) cfg.checkpoint = checkpoint;
  if (cfg.checkpoint.empty()) {
    throw merl::Error(merl::ErrorCode::configuration,
                      "a checkpoint is required (--checkpoint or experiment.checkpoint)");
  }
  return report_run(merl::run_experiment(cfg));
}

std::pair<std::filesystem::path, merl::KbKind> parse_kb_arg(const std::string& arg) {
  // path[:kind]
  const auto colon = arg.rfind(':');
  if (colon != std::string::npos) {
    const std::string kind = arg.substr(colon + 1);
    if (kind == "web_snomed" || kind == "local_scp") {
      return {arg.substr(0, colon), merl::parse_kb_kind(kind)};
    }
  }
  return {arg, merl::KbKind::local_scp};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal ECG representation learning: pretraining, zero-shot and probing"};
  app.require_subcommand(1);

  Common synth_c, pretrain_c, probe_c, zeroshot_c, transfer_c, run_c, export_c;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic ECG-report corpus");
  add_common(synth, synth_c);
  std::string synth_out;
  synth->add_option("--out", synth_out, "Output directory")->required();

  auto* pretrain = app.add_subcommand("pretrain", "Pretrain a model");
  add_common(pretrain, pretrain_c);

  std::string checkpoint;
  auto* probe = app.add_subcommand("probe", "Linear probing of a frozen checkpoint");
  add_common(probe, probe_c);
  probe->add_option("--checkpoint", checkpoint, "Model checkpoint");

  auto* zeroshot = app.add_subcommand("zeroshot", "Zero-shot classification with class prompts");
  add_common(zeroshot, zeroshot_c);
  zeroshot->add_option("--checkpoint", checkpoint, "Model checkpoint");

  auto* transfer = app.add_subcommand("transfer", "Domain-transfer evaluation through a category map");
  add_common(transfer, transfer_c);
  transfer->add_option("--checkpoint", checkpoint, "Model checkpoint");

  auto* run = app.add_subcommand("run", "Pretrain, then run every declared evaluation");
  add_common(run, run_c);

  auto* ckepe = app.add_subcommand("ckepe", "Build knowledge-verified class prompts");
  std::vector<std::string> conditions, kb_args;
  std::string fixture, ckepe_out, audit_out, style_name = "ckepe", endpoint, llm_model;
  std::optional<std::uint64_t> ckepe_seed;
  bool live = false;
  ckepe->add_option("--condition", conditions, "Condition name (repeatable, in class order)")->required();
  ckepe->add_option("--kb", kb_args, "Knowledge base file, optionally suffixed :web_snomed or :local_scp");
  ckepe->add_option("--fixture", fixture, "Recorded LLM responses (JSON object)");
  ckepe->add_flag("--live", live, "Query a live chat-completions endpoint");
  ckepe->add_option("--endpoint", endpoint, "Live endpoint URL");
  ckepe->add_option("--llm-model", llm_model, "Live model name");
  ckepe->add_option("--style", style_name, "ckepe, template or name_only");
  ckepe->add_option("--out", ckepe_out, "Prompt file to write")->required();
  ckepe->add_option("--audit", audit_out, "Per-term verification report (JSON)");
  ckepe->add_option("--seed", ckepe_seed, "Accepted for interface uniformity; prompts are deterministic");

  auto* report = app.add_subcommand("report", "Render results stores as a table");
  std::vector<std::string> stores;
  std::string csv_out;
  report->add_option("results", stores, "results.jsonl files")->required()->check(CLI::ExistingFile);
  report->add_option("--csv", csv_out, "Also write the CSV table here");

  auto* export_cmd = app.add_subcommand("export", "Export embeddings for visualization");
  add_common(export_cmd, export_c);
  std::string manifest, export_out, which = "projected";
  bool drop_multilabel = false;
  int min_class_count = 0;
  export_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  export_cmd->add_option("--manifest", manifest, "Corpus manifest")->required();
  export_cmd->add_option("--out", export_out, "CSV output")->required();
  export_cmd->add_option("--which", which, "z_e or projected");
  export_cmd->add_flag("--drop-multilabel", drop_multilabel, "Skip samples with several labels");
  export_cmd->add_option("--min-class-count", min_class_count, "Drop classes with fewer samples");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      auto cfg = load(synth_c);
      auto spec = cfg.corpus.synthetic;
      if (synth_c.seed) spec.seed = *synth_c.seed;
      auto corpus = merl::generate_synthetic_corpus(spec);
      corpus.manifest = merl::split_by_ratio(corpus.manifest, cfg.corpus.split, cfg.corpus.split_seed);
      merl::save_corpus(synth_out, corpus);
      std::cout << json{{"pairs", corpus.pairs.size()},
                        {"manifest", (std::filesystem::path(synth_out) / "manifest.csv").string()}}
                       .dump()
                << "\n";
      return 0;
    }
    if (pretrain->parsed()) {
      auto cfg = load(pretrain_c);
      cfg.tasks.clear();
      cfg.checkpoint.clear();
      const auto result = merl::run_experiment(cfg);
      for (const auto& r : result.pretrain_log) std::cout << r.to_json().dump() << "\n";
      return report_run(result);
    }
    if (probe->parsed()) return run_with_tasks(load(probe_c), {"probe"}, checkpoint);
    if (zeroshot->parsed()) return run_with_tasks(load(zeroshot_c), {"zeroshot"}, checkpoint);
    if (transfer->parsed()) return run_with_tasks(load(transfer_c), {"transfer"}, checkpoint);
    if (run->parsed()) return report_run(merl::run_experiment(load(run_c)));

    if (ckepe->parsed()) {
      std::vector<merl::KnowledgeBase> kbs;
      for (const auto& arg : kb_args) {
        const auto [path, kind] = parse_kb_arg(arg);
        kbs.push_back(merl::load_kb(path, kind));
      }
      std::vector<const merl::KnowledgeBase*> kb_ptrs;
      for (const auto& kb : kbs) kb_ptrs.push_back(&kb);
      std::unique_ptr<merl::LLMClient> client;
      if (live) {
        merl::LiveClientConfig lc;
        if (!endpoint.empty()) lc.endpoint = endpoint;
        if (!llm_model.empty()) lc.model = llm_model;
        client = std::make_unique<merl::LiveClient>(lc);
      } else if (!fixture.empty()) {
        client = std::make_unique<merl::FixtureClient>(merl::FixtureClient::load(fixture));
      } else {
        throw merl::Error(merl::ErrorCode::configuration, "ckepe needs --fixture or --live");
      }
      const auto style = merl::parse_prompt_style(style_name);
      if (style == merl::PromptStyle::ckepe && kb_ptrs.empty()) {
        throw merl::Error(merl::ErrorCode::empty_kb, "ckepe prompts need at least one --kb");
      }
      merl::ClassPromptSet set;
      set.style = style;
      json audit = json::array();
      for (const auto& condition : conditions) {
        auto verified = merl::verify_against_kb(merl::query_candidates(condition, *client), kb_ptrs);
        verified = merl::assemble_prompt(std::move(verified), style);
        json discarded = json::array();
        for (const auto& d : verified.discarded) discarded.push_back({{"term", d.term}, {"reason", d.reason}});
        audit.push_back({{"condition", condition},
                         {"prompt", verified.prompt_text},
                         {"kept_subtypes", verified.kept_subtypes},
                         {"kept_attributes", verified.kept_attributes},
                         {"kb_hits", verified.kb_hits},
                         {"discarded", discarded}});
        set.entries.push_back(merl::to_class_prompt(verified));
      }
      set.validate();
      merl::save_prompt_file(ckepe_out, set);
      if (!audit_out.empty()) {
        std::ofstream out(audit_out);
        if (!out) throw merl::Error(merl::ErrorCode::io, "cannot write " + audit_out);
        out << audit.dump(2) << "\n";
      }
      for (const auto& e : set.entries) std::cout << e.class_name << ": " << e.prompt_text << "\n";
      return 0;
    }

    if (report->parsed()) {
      std::vector<merl::EvalResult> results;
      for (const auto& path : stores) {
        auto loaded = merl::ResultsStore(path).load();
        results.insert(results.end(), loaded.begin(), loaded.end());
      }
      std::cout << merl::results_table(results);
      if (!csv_out.empty()) {
        std::ofstream out(csv_out);
        if (!out) throw merl::Error(merl::ErrorCode::io, "cannot write " + csv_out);
        out << merl::results_csv(results);
      }
      return 0;
    }

    if (export_cmd->parsed()) {
      (void)load(export_c);
      auto model = merl::Model::load(checkpoint);
      merl::ExportOptions options;
      options.which = merl::parse_embedding_kind(which);
      options.drop_multilabel = drop_multilabel;
      options.min_class_count = min_class_count;
      const auto rows = merl::export_embeddings(model, merl::load_manifest(manifest), export_out, options);
      std::cout << json{{"rows", rows}, {"out", export_out}}.dump() << "\n";
      return 0;
    }
  } catch (const merl::Error& e) {
    std::cerr << json{{"error", std::string(merl::to_string(e.code()))}, {"message", e.what()}}.dump()
              << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "internal"}, {"message", e.what()}}.dump() << "\n";
    return 3;
  }
  return 0;
}
