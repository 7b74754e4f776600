#include "merl/experiment.hpp"
#include "test_util.hpp"

#include <fstream>

using namespace merl;
using merl::test::error_code_of;

namespace {

// A run small enough for a unit test.
std::string tiny_ini(const std::filesystem::path& out) {
  return "[experiment]\n"
         "name = tiny\n"
         "tasks = zeroshot, probe\n"
         "output_dir = " + out.string() + "\n"
         "[corpus]\n"
         "pairs = 120\n"
         "classes = 3\n"
         "leads = 3\n"
         "samples = 64\n"
         "[encoder]\n"
         "resnet_width = 4\n"
         "text_embed_dim = 16\n"
         "shared_dim = 8\n"
         "projector_hidden = 12\n"
         "[pretrain]\n"
         "epochs = 1\n"
         "batch_size = 16\n"
         "learning_rate = 1e-3\n"
         "lr_batch_scaling = false\n"
         "[probe]\n"
         "ratios = 1.0\n"
         "epochs = 3\n";
}

std::vector<std::string> fingerprints(const ExperimentReport& r) {
  std::vector<std::string> out;
  for (const auto& e : r.results) out.push_back(e.config_fingerprint);
  return out;
}

}  // namespace

TEST_CASE("configuration parsing") {
  const auto cfg = parse_experiment_config(
      "; comment\n[experiment]\nseed = 4\ntasks = probe\n[corpus]\nleads = 2\nsamples = 50\n"
      "[encoder]\nbackbone = resnet1d_50\n[pretrain]\ndropout = 0.2\nvariant = decoupled\n"
      "[probe]\nratios = 0.01, 0.1\n[augmentation]\nkind = drop\n",
      {"pretrain.epochs=3", "probe.batch_size=8"});
  CHECK(cfg.seed == 4);
  CHECK(cfg.tasks == std::vector<std::string>{"probe"});
  CHECK(cfg.wants("probe"));
  CHECK(!cfg.wants("zeroshot"));
  CHECK(cfg.encoder.ecg_backbone == Backbone::resnet1d_50);
  CHECK(cfg.encoder.input_leads == 2);
  CHECK(cfg.encoder.input_samples == 50);
  CHECK(cfg.pretrain.dropout == 0.2);
  CHECK(cfg.pretrain.variant == DenominatorVariant::decoupled);
  CHECK(cfg.pretrain.epochs == 3);
  CHECK(cfg.pretrain.augmentation.kind == AugmentationKind::drop);
  CHECK(cfg.probe.ratios == std::vector<double>{0.01, 0.1});
  CHECK(cfg.probe.probe.batch_size == 8);
  // The experiment seed reaches every consumer.
  CHECK(cfg.encoder.init_seed == 4);
  CHECK(cfg.pretrain.seed == 4);
  CHECK(cfg.probe.probe.seed == 4);

  const auto reseeded = parse_experiment_config("[experiment]\nseed = 4\n", {}, 9);
  CHECK(reseeded.seed == 9);
  CHECK(reseeded.pretrain.seed == 9);

  const auto defaults = parse_experiment_config("");
  CHECK(defaults.corpus.source == "synthetic");
  CHECK(defaults.pretrain.temperature == 0.07);
}

TEST_CASE("configuration errors") {
  auto code = [](const std::string& ini, std::vector<std::string> overrides = {}) {
    return error_code_of([&] { parse_experiment_config(ini, overrides); });
  };
  CHECK(code("[bogus]\nx = 1\n") == ErrorCode::configuration);
  CHECK(code("[pretrain]\nepoch = 3\n") == ErrorCode::configuration);
  CHECK(code("[pretrain]\nepochs = three\n") == ErrorCode::configuration);
  CHECK(code("[pretrain]\nepochs = 0\n") == ErrorCode::configuration);
  CHECK(code("", {"pretrain.epochs"}) == ErrorCode::configuration);
  CHECK(code("", {"nosuch.key=1"}) == ErrorCode::configuration);
  CHECK(code("[corpus]\nleads = 2\n[encoder]\ninput_leads = 3\n") == ErrorCode::configuration);
  CHECK(code("[experiment]\ntasks = zeroshot, dance\n") == ErrorCode::configuration);
  CHECK(code("[pretrain]\nvariant = sideways\n") == ErrorCode::configuration);
  CHECK(error_code_of([] { load_experiment_config("/nonexistent/merl.ini"); }) == ErrorCode::io);
}

TEST_CASE("canonical configuration and fingerprints") {
  const auto a = parse_experiment_config("[experiment]\noutput_dir = x\n");
  const auto b = parse_experiment_config("[experiment]\noutput_dir = y\n");
  CHECK(a.to_json() == b.to_json());
  const auto c = parse_experiment_config("[pretrain]\ndropout = 0.2\n");
  CHECK(config_fingerprint(a.to_json()) != config_fingerprint(c.to_json()));
  const auto d = parse_experiment_config("", {}, 1);
  CHECK(config_fingerprint(a.to_json()) != config_fingerprint(d.to_json()));
}

TEST_CASE("synthetic corpus loading") {
  auto cfg = parse_experiment_config("[corpus]\npairs = 60\nclasses = 3\nleads = 2\nsamples = 32\n");
  const auto corpus = load_corpus(cfg.corpus);
  CHECK(corpus.pairs.size() == 60);
  CHECK(corpus.manifest.entries.size() == 60);
  const auto train = corpus.pairs_in(Split::train);
  const auto test = corpus.pairs_in(Split::test);
  CHECK(train.size() == 42);
  CHECK(test.size() == 12);
  CHECK(corpus.loader()(corpus.manifest.entries[5]).signal == corpus.pairs[5].ecg.signal);

  const auto prompts = synthetic_class_prompts(3, PromptStyle::ckepe);
  CHECK(prompts.class_names() == corpus.manifest.label_vocabulary);
  CHECK(synthetic_class_prompts(3, PromptStyle::name_only).entries[0].prompt_text ==
        synthetic_class_tokens(0).name);
}

TEST_CASE("an end-to-end run") {
  const auto dir = test::scratch_dir("experiment_run");
  const auto cfg = parse_experiment_config(tiny_ini(dir / "a"));
  const auto report = run_experiment(cfg);
  CHECK(report.failures.empty());
  REQUIRE(report.results.size() == 2);
  CHECK(report.results[0].mode == EvalMode::zeroshot);
  CHECK(report.results[1].mode == EvalMode::linear_probe);
  CHECK(report.pretrain_log.size() == 1);
  for (const char* f : {"config.json", "pretrain_log.jsonl", "checkpoint.merl", "results.jsonl", "results.csv",
                        "results.txt"}) {
    CHECK(std::filesystem::exists(dir / "a" / f));
  }
  CHECK(ResultsStore(dir / "a" / "results.jsonl").load().size() == 2);
  CHECK(report.table.find("synthetic") != std::string::npos);

  SUBCASE("rerunning reproduces results and fingerprints") {
    const auto again = run_experiment(parse_experiment_config(tiny_ini(dir / "b")));
    CHECK(fingerprints(again) == fingerprints(report));
    for (std::size_t i = 0; i < 2; ++i) CHECK(again.results[i].macro_auc == report.results[i].macro_auc);
  }
  SUBCASE("a different dropout ratio changes every fingerprint") {
    const auto other = run_experiment(parse_experiment_config(tiny_ini(dir / "c"), {"pretrain.dropout=0.2"}));
    REQUIRE(other.results.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
      CHECK(other.results[i].config_fingerprint != report.results[i].config_fingerprint);
    }
  }
  SUBCASE("evaluating an existing checkpoint") {
    auto eval = parse_experiment_config(tiny_ini(dir / "d"), {"experiment.tasks=probe"});
    eval.checkpoint = dir / "a" / "checkpoint.merl";
    const auto r = run_experiment(eval);
    REQUIRE(r.results.size() == 1);
    CHECK(r.pretrain_log.empty());
    CHECK(r.results[0].macro_auc == report.results[1].macro_auc);
  }
  SUBCASE("a failing subtask is recorded and the rest still run") {
    const auto bad = dir / "bad_prompts.json";
    std::ofstream(bad) << "[{\"class_name\": \"nope\", \"prompt_text\": \"x y\"}]";
    auto cfg2 = parse_experiment_config(tiny_ini(dir / "e"), {"zeroshot.prompts=" + bad.string()});
    const auto r = run_experiment(cfg2);
    REQUIRE(r.failures.size() == 1);
    CHECK(r.failures[0].subtask.find("zeroshot") != std::string::npos);
    CHECK(r.failures[0].error_code == to_string(ErrorCode::vocabulary));
    REQUIRE(r.results.size() == 1);
    CHECK(r.results[0].mode == EvalMode::linear_probe);
  }
}

TEST_CASE("transfer through a category map") {
  const auto dir = test::scratch_dir("experiment_transfer");
  // Target: a differently seeded synthetic corpus, saved as a manifest.
  SyntheticCorpusSpec spec;
  spec.num_pairs = 60;
  spec.num_classes = 3;
  spec.num_leads = 3;
  spec.num_samples = 64;
  spec.seed = 21;
  auto target = generate_synthetic_corpus(spec);
  // Target categories get their own names so the map genuinely rewrites them.
  for (auto& e : target.manifest.entries) {
    for (auto& l : e.labels) l = "t_" + l;
  }
  for (auto& l : target.manifest.label_vocabulary) l = "t_" + l;
  save_corpus(dir / "target", target);

  TransferMap map;
  map.source_task = "synthetic";
  map.target_task = "target";
  for (int k = 0; k < 3; ++k) {
    const auto name = synthetic_class_tokens(k).name;
    map.mapping.push_back({name, k < 2 ? std::vector<std::string>{"t_" + name} : std::vector<std::string>{}});
  }
  map.dropped_target_categories = {"t_" + synthetic_class_tokens(2).name};
  save_transfer_map(dir / "map.json", map);

  auto cfg = parse_experiment_config(tiny_ini(dir / "run"),
                                     {"experiment.tasks=transfer", "transfer.map=" + (dir / "map.json").string(),
                                      "transfer.target_manifest=" + (dir / "target" / "manifest.csv").string(),
                                      "transfer.ratios=1.0"});
  const auto report = run_experiment(cfg);
  CHECK(report.failures.empty());
  REQUIRE(report.results.size() == 2);
  for (const auto& r : report.results) {
    CHECK(r.mode == EvalMode::transfer);
    CHECK(r.task_id == "target");
    // The class with no target samples is excluded from the macro average.
    CHECK(!r.per_class_auc[2].has_value());
  }
  CHECK(report.results[0].training_ratio == 0);
  CHECK(report.results[1].training_ratio == 1.0);
}
