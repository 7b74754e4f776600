// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include "merl/alignment.hpp"
#include "merl/ckepe.hpp"
#include "merl/corpus.hpp"
#include "merl/experiment.hpp"
#include "merl/harness.hpp"
#include "merl/pretrain.hpp"
#include "merl/text.hpp"
#include "merl/zeroshot.hpp"
#include "reference.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace merl;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

Matrix<double> random_unit_rows(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix<double> m(rows, cols);
  for (Index k = 0; k < m.size(); ++k) m.data()[k] = n(rng);
  m.rowwise().normalize();
  return m;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("merl_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

const DenominatorVariant kVariants[] = {DenominatorVariant::standard, DenominatorVariant::decoupled};

Verdict loss_oracle() {
  const auto start = Clock::now();
  double worst = 0;
  long cases = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    for (Index L = 2; L <= 16; ++L) {
      for (Index d : {4, 32}) {
        const Matrix<double> E = random_unit_rows(L, d, rng);
        const Matrix<double> R = random_unit_rows(L, d, rng);
        const auto views = latent_dropout_views(E, 0.1, seed * 1000 + static_cast<std::uint64_t>(L));
        const auto v1 = test::naive_normalize(views.view1);
        const auto v2 = test::naive_normalize(views.view2);
        for (auto v : kVariants) {
          const bool dec = v == DenominatorVariant::decoupled;
          const double cma = cma_loss(similarity_matrix(E, R, 0.07), v);
          const double uma = uma_loss(views, 0.07, v);
          worst = std::max(worst, std::abs(cma - static_cast<double>(test::naive_contrastive(E, R, 0.07, dec))));
          worst = std::max(worst, std::abs(uma - static_cast<double>(test::naive_contrastive(v1, v2, 0.07, dec))));
          cases += 2;
        }
      }
    }
  }
  const double t = seconds_since(start);
  return {worst < 1e-6 && t < 30,
          fmt("%ld comparisons, max abs diff %.3g (tol 1e-6), %.2f s (limit 30 s)", cases, worst, t)};
}

Verdict closed_forms() {
  const double uniform = cma_loss(SimilarityMatrix<double>{Matrix<double>::Constant(2, 2, 0.4), 1.0});
  Matrix<double> diag(2, 2);
  diag << 5, 0, 0, 5;
  const double decoupled = cma_loss(SimilarityMatrix<double>{diag, 1.0}, DenominatorVariant::decoupled);
  const double e1 = std::abs(uniform - std::log(2.0));
  const double e2 = std::abs(decoupled + 5.0);
  return {e1 < 1e-9 && e2 < 1e-9,
          fmt("uniform standard %.12f vs ln 2 (err %.2g), decoupled %.12f vs -5 (err %.2g), tol 1e-9", uniform,
              e1, decoupled, e2)};
}

Verdict gradient_check() {
  const auto start = Clock::now();
  EncoderConfig cfg;
  cfg.input_leads = 3;
  cfg.input_samples = 64;
  cfg.resnet_width = 4;
  cfg.text_embed_dim = 16;
  cfg.shared_dim = 8;
  cfg.projector_hidden = 12;
  cfg.init_seed = 11;
  MerlModel<double> model(cfg);

  SyntheticCorpusSpec spec;
  spec.num_pairs = 8;
  spec.num_classes = 4;
  spec.num_leads = 3;
  spec.num_samples = 64;
  spec.seed = 12;
  const auto corpus = generate_synthetic_corpus(spec);
  std::vector<const ECGReportPair*> batch;
  for (const auto& p : corpus.pairs) batch.push_back(&p);

  PretrainConfig pc;
  pc.seed = 13;
  auto objective = [&] {
    const auto l = pretrain_objective(model, batch, pc, 0);
    return l.cma + l.uma;
  };

  nn::ParamList<double> params = model.ecg_projector().parameters("ecg_proj");
  for (auto& p : model.text_projector().parameters("text_proj")) params.push_back(p);
  std::vector<std::pair<nn::ParamRef<double>, Index>> entries;
  for (const auto& p : params) {
    if (!p.trainable()) continue;
    for (Index k = 0; k < p.value->size(); ++k) entries.emplace_back(p, k);
  }
  std::mt19937_64 rng(14);
  std::shuffle(entries.begin(), entries.end(), rng);
  entries.resize(20);

  objective();
  std::vector<double> analytic;
  for (const auto& [p, k] : entries) analytic.push_back(p.grad->data()[k]);

  // Relative error with a small absolute floor in the denominator so that a
  // gradient indistinguishable from zero is not judged by round-off alone.
  const double h = 1e-5, floor = 1e-6;
  double worst = 0, worst_raw = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    double& slot = entries[i].first.value->data()[entries[i].second];
    const double saved = slot;
    slot = saved + h;
    const double up = objective();
    slot = saved - h;
    const double down = objective();
    slot = saved;
    const double numeric = (up - down) / (2 * h);
    const double diff = std::abs(analytic[i] - numeric);
    const double scale = std::max(std::abs(analytic[i]), std::abs(numeric));
    worst = std::max(worst, diff / std::max(scale, floor));
    worst_raw = std::max(worst_raw, scale > 0 ? diff / scale : 0.0);
  }
  const double t = seconds_since(start);
  return {worst < 1e-3 && t < 60,
          fmt("20 projector parameters, L=8, h=1e-5: max relative error %.3g (tol 1e-3, floor 1e-6; "
              "without floor %.3g), %.2f s (limit 60 s)",
              worst, worst_raw, t)};
}

Verdict dropout_semantics() {
  const Matrix<double> Z = Matrix<double>::Ones(1000, 1000);
  const auto views = latent_dropout_views(Z, 0.1, 2024);
  const double zero = 1.0 - views.mask1.mean();
  std::mt19937_64 rng(7);
  const Matrix<double> X = random_unit_rows(64, 48, rng);
  const auto identity = latent_dropout_views(X, 0.0, 3);
  const bool exact = (identity.view1.array() == X.array()).all() && (identity.view2.array() == X.array()).all();
  const auto a = latent_dropout_views(X, 0.1, 99);
  const auto b = latent_dropout_views(X, 0.1, 99);
  const bool reproducible = (a.mask1.array() == b.mask1.array()).all() &&
                            (a.mask2.array() == b.mask2.array()).all() &&
                            (a.view1.array() == b.view1.array()).all();
  return {std::abs(zero - 0.1) <= 0.003 && exact && reproducible,
          fmt("zero fraction %.5f over 1e6 entries (0.1 +- 0.003), p=0 bit-exact: %s, fixed seed bit-exact: %s",
              zero, exact ? "yes" : "no", reproducible ? "yes" : "no")};
}

Verdict curation() {
  SyntheticCorpusSpec spec;
  spec.num_pairs = 300;
  spec.seed = 5;
  auto pairs = generate_synthetic_corpus(spec).pairs;
  const auto planted = plant_violations(pairs, 50, 10, 6);
  std::multiset<std::string> input;
  for (const auto& p : pairs) input.insert(p.ecg.record_id);
  std::size_t nonfinite_in = 0;
  for (const auto& p : pairs) nonfinite_in += static_cast<std::size_t>((!p.ecg.signal.array().isFinite()).count());

  const auto result = curate_pairs(pairs);
  std::size_t nonfinite = 0, short_reports = 0;
  std::multiset<std::string> output;
  for (const auto& p : result.kept) {
    nonfinite += static_cast<std::size_t>((!p.ecg.signal.array().isFinite()).count());
    short_reports += count_words(p.report.text) < 3;
    output.insert(p.ecg.record_id);
  }
  for (const auto& r : result.rejected) output.insert(r.pair.ecg.record_id);
  const bool partition = output == input && result.kept.size() + result.rejected.size() == pairs.size();
  return {planted.nonfinite_records.size() == 50 && planted.bad_report_records.size() == 10 && nonfinite == 0 &&
              short_reports == 0 && partition,
          fmt("planted %zu non-finite values and %zu bad reports; kept %zu, rejected %zu; non-finite after %zu, "
              "short reports after %zu, partition: %s",
              nonfinite_in, planted.bad_report_records.size(), result.kept.size(), result.rejected.size(),
              nonfinite, short_reports, partition ? "yes" : "no")};
}

Verdict macro_auc_oracle() {
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<int> size(2, 2000), classes(1, 5);
  std::uniform_real_distribution<double> prevalence(0.05, 0.6);
  std::normal_distribution<double> normal(0.0, 1.0);
  double worst = 0, worst_transform = 0;
  bool definedness = true;
  for (int inst = 0; inst < 50; ++inst) {
    const Index n = inst < 2 ? 2000 : size(rng);
    const Index c = classes(rng);
    Matrix<double> scores(n, c), labels(n, c);
    for (Index k = 0; k < scores.size(); ++k) {
      // Every third instance is quantized to produce ties.
      const double s = normal(rng);
      scores.data()[k] = inst % 3 == 0 ? std::round(s * 4) : s;
    }
    for (Index j = 0; j < c; ++j) {
      std::bernoulli_distribution b(prevalence(rng));
      for (Index i = 0; i < n; ++i) labels(i, j) = b(rng);
      labels(0, j) = 1;
      labels(1, j) = 0;
    }
    const auto got = macro_auc(scores, labels);
    double sum = 0;
    for (Index j = 0; j < c; ++j) {
      const auto want = test::naive_auc(scores.col(j), labels.col(j));
      const auto& have = got.per_class[static_cast<std::size_t>(j)];
      if (!want || !have) {
        definedness = definedness && !want && !have;
        continue;
      }
      worst = std::max(worst, std::abs(*have - *want));
      sum += *want;
    }
    worst = std::max(worst, std::abs(got.macro - sum / static_cast<double>(c)));

    // A random strictly increasing map: a positive-slope affine piece per
    // sorted score, accumulated so order is preserved.
    std::vector<double> values(scores.data(), scores.data() + scores.size());
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    std::map<double, double> mapped;
    std::exponential_distribution<double> step(1.0);
    double acc = normal(rng);
    for (double v : values) mapped[v] = acc += step(rng) + 1e-3;
    Matrix<double> transformed = scores;
    for (Index k = 0; k < transformed.size(); ++k) transformed.data()[k] = mapped[scores.data()[k]];
    worst_transform = std::max(worst_transform, std::abs(macro_auc(transformed, labels).macro - got.macro));
  }
  return {worst < 1e-9 && worst_transform < 1e-9 && definedness,
          fmt("50 instances up to n=2000: max diff vs pairwise oracle %.3g, after increasing transform %.3g "
              "(tol 1e-9)",
              worst, worst_transform)};
}

struct SyntheticRun {
  double zeroshot = 0;
  double probe = 0;
  double seconds = 0;
};

ExperimentConfig synthetic_config(const std::string& tag, std::vector<std::string> overrides,
                                  std::optional<std::uint64_t> seed = std::nullopt) {
  overrides.push_back("experiment.output_dir=" + scratch(tag).string());
  return load_experiment_config(fs::path(MERL_CONFIG_DIR) / "synthetic.ini", overrides, seed);
}

const EvalResult* find_result(const ExperimentReport& r, EvalMode mode) {
  for (const auto& e : r.results) {
    if (e.mode == mode) return &e;
  }
  return nullptr;
}

std::optional<SyntheticRun> seed0_uma;

Verdict synthetic_end_to_end() {
  const auto cfg = synthetic_config("synthetic", {"probe.ratios=1.0"});
  const auto start = Clock::now();
  const auto report = run_experiment(cfg);
  const double t = seconds_since(start);
  const auto* zs = find_result(report, EvalMode::zeroshot);
  const auto* probe = find_result(report, EvalMode::linear_probe);
  if (!report.failures.empty() || zs == nullptr || probe == nullptr) {
    return {false, "experiment did not produce both results"};
  }
  seed0_uma = SyntheticRun{zs->macro_auc, probe->macro_auc, t};

  const auto corpus = load_corpus(cfg.corpus);
  const auto task = make_task(corpus.manifest, "synthetic", corpus.loader());
  Model fresh(cfg.encoder);
  auto pc = cfg.probe.probe;
  pc.training_ratio = 1.0;
  const double random_init = linear_probe(fresh, task, pc).macro_auc;

  const bool ok = zs->macro_auc >= 0.85 && probe->macro_auc >= 0.90 && random_init < probe->macro_auc &&
                  t < 600 && cfg.pretrain.epochs <= 10;
  return {ok, fmt("zero-shot %.4f (>= 0.85), probe 1.0 %.4f (>= 0.90), random-init probe %.4f (< %.4f), "
                  "%d epochs, %.1f s for pretrain + evaluation (limit 600 s)",
                  zs->macro_auc, probe->macro_auc, random_init, probe->macro_auc, cfg.pretrain.epochs, t)};
}

Verdict ablation_direction() {
  std::string detail;
  bool ok = true;
  double sum_diff = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto zeroshot_auc = [&](const std::string& mode) {
      if (seed == 0 && mode == "latent_dropout" && seed0_uma) return seed0_uma->zeroshot;
      const auto cfg = synthetic_config("ablation_" + mode + std::to_string(seed),
                                        {"experiment.tasks=zeroshot", "pretrain.uma_mode=" + mode}, seed);
      const auto r = run_experiment(cfg);
      const auto* zs = find_result(r, EvalMode::zeroshot);
      if (zs == nullptr) throw Error(ErrorCode::numeric, "ablation run produced no zero-shot result");
      return zs->macro_auc;
    };
    const double both = zeroshot_auc("latent_dropout");
    const double cma_only = zeroshot_auc("none");
    const bool pass = both >= cma_only - 0.02;
    ok = ok && pass;
    sum_diff += both - cma_only;
    detail += fmt("seed %d: cma+uma %.4f vs cma %.4f (%+.4f)%s; ", static_cast<int>(seed), both, cma_only,
                  both - cma_only, pass ? "" : " below tolerance");
  }
  detail += fmt("mean difference %+.4f, tolerance -0.02 per seed", sum_diff / 3);
  return {ok, detail};
}

Verdict transfer_maps() {
  std::size_t fields = 0;
  std::string mismatch;
  for (const auto& [name, table] : test::kTransferTables) {
    const auto map = load_transfer_map(fs::path(MERL_DATA_DIR) / "transfer_maps" / (std::string(name) + ".json"));
    if (map.mapping.size() != table->size()) {
      mismatch += std::string(name) + " row count; ";
      continue;
    }
    for (std::size_t r = 0; r < table->size(); ++r) {
      fields += 2;
      if (map.mapping[r].first != (*table)[r].first) mismatch += std::string(name) + " row " + std::to_string(r) + " source; ";
      if (map.mapping[r].second != (*table)[r].second) mismatch += std::string(name) + " row " + std::to_string(r) + " targets; ";
    }
  }
  return {mismatch.empty(), mismatch.empty() ? fmt("3 maps, %zu fields equal the transcribed tables", fields)
                                             : "mismatch: " + mismatch};
}

Verdict ckepe_guarantee() {
  const fs::path fixtures = fs::path(MERL_DATA_DIR) / "fixtures";
  const auto snomed = load_kb(fixtures / "kb_snomed_subset.json", KbKind::web_snomed);
  const auto scp = load_kb(fixtures / "kb_scp_statements.json", KbKind::local_scp);
  auto client = FixtureClient::load(fixtures / "llm_responses.json");
  const auto candidates = query_candidates("atrial fibrillation", client);
  const KnowledgeBase* both[] = {&snomed, &scp};
  const KnowledgeBase* one[] = {&snomed};
  const auto v = assemble_prompt(verify_against_kb(candidates, both), PromptStyle::ckepe);
  const std::size_t kept = v.kept_subtypes.size() + v.kept_attributes.size();
  const std::string prompt = normalize_term(v.prompt_text);
  bool leaked = false;
  for (const auto& d : v.discarded) leaked = leaked || prompt.find(normalize_term(d.term)) != std::string::npos;

  // "fibrillatory waves" is only in the SCP knowledge base.
  const auto without = verify_against_kb(candidates, one);
  auto kept_in = [](const VerifiedPrompt& p, const std::string& term) {
    return std::find(p.kept_attributes.begin(), p.kept_attributes.end(), term) != p.kept_attributes.end();
  };
  const bool flips = kept_in(v, "fibrillatory waves") && !kept_in(without, "fibrillatory waves") &&
                     without.discarded.size() == v.discarded.size() + 1;
  return {kept == 5 && v.discarded.size() == 3 && !leaked && flips,
          fmt("kept %zu (want 5), discarded %zu (want 3), discarded term in prompt: %s, disabling the SCP "
              "knowledge base flips 'fibrillatory waves': %s",
              kept, v.discarded.size(), leaked ? "yes" : "no", flips ? "yes" : "no")};
}

Verdict determinism() {
  const std::string ini =
      "[experiment]\nname = determinism\ntasks = zeroshot, probe\n"
      "[corpus]\npairs = 200\nclasses = 4\nleads = 3\nsamples = 128\n"
      "[encoder]\nresnet_width = 8\ntext_embed_dim = 32\nshared_dim = 16\nprojector_hidden = 32\n"
      "[pretrain]\nepochs = 2\nbatch_size = 32\nlearning_rate = 1e-3\nlr_batch_scaling = false\n"
      "[probe]\nratios = 0.1, 1.0\nepochs = 5\n";
  std::vector<ExperimentReport> runs;
  std::vector<std::string> logs;
  for (const char* tag : {"det_a", "det_b"}) {
    const auto dir = scratch(tag);
    runs.push_back(run_experiment(parse_experiment_config(ini, {"experiment.output_dir=" + dir.string()})));
    logs.push_back(read_file(dir / "pretrain_log.jsonl"));
  }
  bool same = logs[0] == logs[1] && !logs[0].empty() && runs[0].results.size() == runs[1].results.size() &&
              runs[0].results.size() == 3;
  for (std::size_t i = 0; same && i < runs[0].results.size(); ++i) {
    same = runs[0].results[i].config_fingerprint == runs[1].results[i].config_fingerprint &&
           runs[0].results[i].macro_auc == runs[1].results[i].macro_auc;
  }
  return {same, fmt("loss logs byte-identical: %s, %zu results with identical fingerprints and AUCs: %s",
                    logs[0] == logs[1] ? "yes" : "no", runs[0].results.size(), same ? "yes" : "no")};
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<Verdict()>> criteria[] = {
      {"loss oracle equivalence", loss_oracle},
      {"closed-form losses", closed_forms},
      {"gradient correctness", gradient_check},
      {"dropout semantics", dropout_semantics},
      {"curation", curation},
      {"macro AUC", macro_auc_oracle},
      {"synthetic end-to-end", synthetic_end_to_end},
      {"ablation direction", ablation_direction},
      {"transfer-map fidelity", transfer_maps},
      {"CKEPE guarantee", ckepe_guarantee},
      {"determinism", determinism},
  };
  int failed = 0, index = 0;
  for (const auto& [name, check] : criteria) {
    ++index;
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " " << index << " " << name << ": " << v.detail << std::endl;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
