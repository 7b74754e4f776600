#include "merl/experiment.hpp"

#include "merl/ckepe.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

namespace merl {

using nlohmann::json;
namespace pt = boost::property_tree;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

[[noreturn]] void bad_value(const std::string& where, const std::string& value, const char* what) {
  throw Error(ErrorCode::configuration, where + ": '" + value + "' is not " + what);
}

template <typename T>
T parse_number(const std::string& where, const std::string& text) {
  T value{};
  const char* begin = text.data();
  const char* end = begin + text.size();
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end) {
    bad_value(where, text, std::is_floating_point_v<T> ? "a number" : "an integer");
  }
  return value;
}

bool parse_bool(const std::string& where, const std::string& text) {
  std::string t = text;
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  bad_value(where, text, "a boolean");
}

// Reads typed keys from one INI section and rejects keys nobody asked for.
class SectionReader {
 public:
  SectionReader(const pt::ptree& root, std::string name) : name_(std::move(name)) {
    if (const auto child = root.get_child_optional(pt::ptree::path_type(name_, '\0'))) {
      section_ = &*child;
    }
  }

  bool has(const char* key) const {
    return section_ && section_->get_child_optional(pt::ptree::path_type(key, '\0'));
  }

  std::optional<std::string> raw(const char* key) {
    known_.insert(key);
    if (!has(key)) return std::nullopt;
    return trim(section_->get<std::string>(pt::ptree::path_type(key, '\0')));
  }

  void read(const char* key, std::string& out) {
    if (auto v = raw(key)) out = *v;
  }
  void read(const char* key, std::filesystem::path& out) {
    if (auto v = raw(key)) out = *v;
  }
  void read(const char* key, bool& out) {
    if (auto v = raw(key)) out = parse_bool(where(key), *v);
  }
  template <typename T>
    requires std::is_arithmetic_v<T>
  void read(const char* key, T& out) {
    if (auto v = raw(key)) out = parse_number<T>(where(key), *v);
  }
  void read(const char* key, std::vector<double>& out) {
    if (auto v = raw(key)) {
      out.clear();
      for (const auto& item : split_list(*v)) out.push_back(parse_number<double>(where(key), item));
    }
  }
  void read(const char* key, std::vector<std::string>& out) {
    if (auto v = raw(key)) out = split_list(*v);
  }
  template <typename E, typename Parse>
  void read_enum(const char* key, E& out, Parse parse) {
    if (auto v = raw(key)) {
      try {
        out = parse(*v);
      } catch (const Error& e) {
        throw Error(ErrorCode::configuration, where(key) + ": " + e.what());
      }
    }
  }

  void finish() const {
    if (!section_) return;
    for (const auto& [key, value] : *section_) {
      if (!known_.count(key)) {
        throw Error(ErrorCode::configuration, "unknown configuration key '" + name_ + "." + key + "'");
      }
    }
  }

 private:
  std::string where(const char* key) const { return name_ + "." + key; }

  std::string name_;
  const pt::ptree* section_ = nullptr;
  std::set<std::string> known_;
};

const std::set<std::string> kSections = {"experiment", "corpus",   "encoder", "pretrain",
                                         "augmentation", "zeroshot", "probe",   "transfer"};

void apply_override(pt::ptree& root, const std::string& text) {
  const auto eq = text.find('=');
  const auto dot = text.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw Error(ErrorCode::configuration, "override '" + text + "' is not section.key=value");
  }
  const std::string section = trim(text.substr(0, dot));
  const std::string key = trim(text.substr(dot + 1, eq - dot - 1));
  if (section.empty() || key.empty()) {
    throw Error(ErrorCode::configuration, "override '" + text + "' is not section.key=value");
  }
  const pt::ptree::path_type section_path(section, '\0');
  if (!root.get_child_optional(section_path)) root.add_child(section_path, pt::ptree());
  root.get_child(section_path).put(pt::ptree::path_type(key, '\0'), trim(text.substr(eq + 1)));
}

ExperimentConfig from_ptree(const pt::ptree& root, std::optional<std::uint64_t> seed_override) {
  for (const auto& [name, section] : root) {
    if (!kSections.count(name)) {
      throw Error(ErrorCode::configuration, "unknown configuration section '" + name + "'");
    }
    if (!section.data().empty()) {
      throw Error(ErrorCode::configuration, "key '" + name + "' appears outside any section");
    }
  }

  ExperimentConfig cfg;

  SectionReader ex(root, "experiment");
  ex.read("name", cfg.name);
  ex.read("seed", cfg.seed);
  ex.read("tasks", cfg.tasks);
  ex.read("output_dir", cfg.output_dir);
  ex.read("checkpoint", cfg.checkpoint);
  ex.finish();
  if (seed_override) cfg.seed = *seed_override;
  for (const auto& t : cfg.tasks) {
    if (t != "zeroshot" && t != "probe" && t != "transfer") {
      throw Error(ErrorCode::configuration,
                  "experiment.tasks: unknown task '" + t + "' (expected zeroshot, probe, transfer)");
    }
  }

  SectionReader co(root, "corpus");
  auto& syn = cfg.corpus.synthetic;
  co.read("source", cfg.corpus.source);
  co.read("manifest", cfg.corpus.manifest);
  co.read("pairs", syn.num_pairs);
  co.read("classes", syn.num_classes);
  co.read("leads", syn.num_leads);
  co.read("samples", syn.num_samples);
  co.read("sampling_rate_hz", syn.sampling_rate_hz);
  co.read("noise_std", syn.noise_std);
  co.read("multilabel_prob", syn.multilabel_prob);
  co.read("amplitude_log_std", syn.amplitude_log_std);
  co.read("rate_jitter", syn.rate_jitter);
  co.read("phase_jitter", syn.phase_jitter);
  co.read("wander_amplitude", syn.wander_amplitude);
  co.read("seed", syn.seed);
  co.read("train", cfg.corpus.split.train);
  co.read("valid", cfg.corpus.split.valid);
  co.read("test", cfg.corpus.split.test);
  co.read("split_seed", cfg.corpus.split_seed);
  co.finish();
  if (cfg.corpus.source != "synthetic" && cfg.corpus.source != "manifest") {
    throw Error(ErrorCode::configuration,
                "corpus.source must be 'synthetic' or 'manifest', got '" + cfg.corpus.source + "'");
  }
  if (cfg.corpus.source == "manifest" && cfg.corpus.manifest.empty()) {
    throw Error(ErrorCode::configuration, "corpus.manifest is required when corpus.source = manifest");
  }
  if (cfg.corpus.source == "synthetic") syn.validate();

  SectionReader en(root, "encoder");
  auto& enc = cfg.encoder;
  en.read_enum("backbone", enc.ecg_backbone, parse_backbone);
  const bool leads_given = en.has("input_leads");
  const bool samples_given = en.has("input_samples");
  en.read("input_leads", enc.input_leads);
  en.read("input_samples", enc.input_samples);
  en.read("resnet_width", enc.resnet_width);
  en.read("vit_dim", enc.vit_dim);
  en.read("vit_depth", enc.vit_depth);
  en.read("vit_heads", enc.vit_heads);
  en.read("vit_mlp_ratio", enc.vit_mlp_ratio);
  en.read("patch_length", enc.patch_length);
  en.read("text_encoder", enc.text_encoder);
  en.read("text_embed_dim", enc.text_embed_dim);
  en.read("text_trainable", enc.text_trainable);
  en.read("shared_dim", enc.shared_dim);
  en.read("projector_hidden", enc.projector_hidden);
  en.finish();
  if (cfg.corpus.source == "synthetic") {
    // The encoder geometry follows the generated signals unless pinned.
    if (!leads_given) enc.input_leads = syn.num_leads;
    if (!samples_given) enc.input_samples = syn.num_samples;
    if (enc.input_leads != syn.num_leads || enc.input_samples != syn.num_samples) {
      throw Error(ErrorCode::configuration,
                  "encoder input geometry (" + std::to_string(enc.input_leads) + " x " +
                      std::to_string(enc.input_samples) + ") does not match the synthetic corpus (" +
                      std::to_string(syn.num_leads) + " x " + std::to_string(syn.num_samples) + ")");
    }
  }
  enc.init_seed = cfg.seed;
  enc.validate();

  SectionReader pr(root, "pretrain");
  auto& pre = cfg.pretrain;
  pr.read("epochs", pre.epochs);
  pr.read("learning_rate", pre.learning_rate);
  pr.read("weight_decay", pre.weight_decay);
  pr.read("batch_size", pre.batch_size);
  pr.read("lr_batch_scaling", pre.lr_batch_scaling);
  pr.read("temperature", pre.temperature);
  pr.read("dropout", pre.dropout);
  pr.read("dropout_rescale", pre.dropout_rescale);
  pr.read_enum("variant", pre.variant, parse_denominator_variant);
  pr.read_enum("uma_mode", pre.uma_mode, parse_uma_mode);
  pr.finish();

  SectionReader au(root, "augmentation");
  au.read_enum("kind", pre.augmentation.kind, parse_augmentation_kind);
  au.read("segment_fraction", pre.augmentation.segment_fraction);
  au.read("point_fraction", pre.augmentation.point_fraction);
  au.read("sigma", pre.augmentation.sigma);
  au.finish();
  pre.seed = cfg.seed;
  pre.augmentation.seed = cfg.seed;
  pre.validate();

  SectionReader zs(root, "zeroshot");
  zs.read("prompts", cfg.zeroshot.prompts);
  zs.read_enum("style", cfg.zeroshot.style, parse_prompt_style);
  zs.finish();

  SectionReader pb(root, "probe");
  auto& probe = cfg.probe.probe;
  pb.read("ratios", cfg.probe.ratios);
  pb.read("learning_rate", probe.learning_rate);
  pb.read("batch_size", probe.batch_size);
  pb.read("epochs", probe.epochs);
  pb.read("warmup_steps", probe.warmup_steps);
  pb.read("weight_decay", probe.weight_decay);
  pb.finish();
  probe.seed = cfg.seed;
  probe.validate();
  for (double r : cfg.probe.ratios) {
    if (!(r > 0 && r <= 1)) throw Error(ErrorCode::configuration, "probe.ratios must lie in (0, 1]");
  }

  SectionReader tr(root, "transfer");
  tr.read("map", cfg.transfer.map);
  tr.read("target_manifest", cfg.transfer.target_manifest);
  tr.read("ratios", cfg.transfer.ratios);
  tr.finish();
  for (double r : cfg.transfer.ratios) {
    if (!(r > 0 && r <= 1)) throw Error(ErrorCode::configuration, "transfer.ratios must lie in (0, 1]");
  }
  if (cfg.wants("transfer") && (cfg.transfer.map.empty() || cfg.transfer.target_manifest.empty())) {
    throw Error(ErrorCode::configuration, "transfer needs transfer.map and transfer.target_manifest");
  }
  return cfg;
}

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

}  // namespace

bool ExperimentConfig::wants(std::string_view task) const {
  return std::find(tasks.begin(), tasks.end(), task) != tasks.end();
}

json CorpusConfig::to_json() const {
  json j = {{"source", source},
            {"split", {{"train", split.train}, {"valid", split.valid}, {"test", split.test}}},
            {"split_seed", split_seed}};
  if (source == "synthetic") {
    j["synthetic"] = {{"pairs", synthetic.num_pairs},
                      {"classes", synthetic.num_classes},
                      {"leads", synthetic.num_leads},
                      {"samples", synthetic.num_samples},
                      {"sampling_rate_hz", synthetic.sampling_rate_hz},
                      {"noise_std", synthetic.noise_std},
                      {"multilabel_prob", synthetic.multilabel_prob},
                      {"amplitude_log_std", synthetic.amplitude_log_std},
                      {"rate_jitter", synthetic.rate_jitter},
                      {"phase_jitter", synthetic.phase_jitter},
                      {"wander_amplitude", synthetic.wander_amplitude},
                      {"seed", synthetic.seed}};
  } else {
    j["manifest_sha256"] = file_digest(manifest);
  }
  return j;
}

json ExperimentConfig::to_json() const {
  json j = {{"seed", seed},
            {"corpus", corpus.to_json()},
            {"encoder", encoder.to_json()},
            {"pretrain", pretrain.to_json()}};
  if (!checkpoint.empty()) j["checkpoint_sha256"] = file_digest(checkpoint);
  if (wants("zeroshot") || wants("transfer")) {
    j["zeroshot"] = {{"prompts", zeroshot.prompts == "synthetic" ? std::string("synthetic")
                                                                 : file_digest(zeroshot.prompts)},
                     {"style", std::string(to_string(zeroshot.style))}};
  }
  if (wants("transfer")) {
    j["transfer"] = {{"map_sha256", file_digest(transfer.map)},
                     {"target_manifest_sha256", file_digest(transfer.target_manifest)}};
  }
  return j;
}

ExperimentConfig parse_experiment_config(const std::string& ini_text,
                                         const std::vector<std::string>& overrides,
                                         std::optional<std::uint64_t> seed) {
  pt::ptree root;
  std::istringstream in(ini_text);
  try {
    pt::ini_parser::read_ini(in, root);
  } catch (const pt::ini_parser_error& e) {
    throw Error(ErrorCode::parse, std::string("configuration: ") + e.what());
  }
  for (const auto& o : overrides) apply_override(root, o);
  return from_ptree(root, seed);
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides,
                                        std::optional<std::uint64_t> seed) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot read configuration " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str(), overrides, seed);
}

// ---------------------------------------------------------------------------

RecordLoader LoadedCorpus::loader() const {
  return [this](const ManifestEntry& e) {
    const auto it = std::find_if(pairs.begin(), pairs.end(),
                                 [&](const ECGReportPair& p) { return p.ecg.record_id == e.record_id; });
    if (it == pairs.end()) throw Error(ErrorCode::io, "record '" + e.record_id + "' is not loaded");
    return it->ecg;
  };
}

std::vector<ECGReportPair> LoadedCorpus::pairs_in(Split split) const {
  std::vector<ECGReportPair> out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (manifest.split_of(manifest.entries[i].record_id) == split) out.push_back(pairs[i]);
  }
  return out;
}

namespace {

bool has_splits(const CorpusManifest& m) {
  return std::any_of(m.entries.begin(), m.entries.end(),
                     [&](const ManifestEntry& e) { return m.split_of(e.record_id) != Split::unassigned; });
}

LoadedCorpus curate_manifest(CorpusManifest manifest, std::vector<ECGReportPair> pairs) {
  auto curated = curate_pairs(std::move(pairs));
  std::set<std::string> kept_ids;
  for (const auto& p : curated.kept) kept_ids.insert(p.ecg.record_id);
  LoadedCorpus out;
  out.manifest = manifest;
  out.manifest.entries.clear();
  for (const auto& e : manifest.entries) {
    if (kept_ids.count(e.record_id)) out.manifest.entries.push_back(e);
  }
  out.pairs = std::move(curated.kept);
  out.rejected = std::move(curated.rejected);
  return out;
}

}  // namespace

LoadedCorpus load_corpus(const CorpusConfig& config) {
  CorpusManifest manifest;
  std::vector<ECGReportPair> pairs;
  if (config.source == "synthetic") {
    auto corpus = generate_synthetic_corpus(config.synthetic);
    manifest = std::move(corpus.manifest);
    pairs = std::move(corpus.pairs);
  } else {
    manifest = load_manifest(config.manifest);
    pairs.reserve(manifest.entries.size());
    for (const auto& e : manifest.entries) {
      pairs.push_back({load_record(manifest, e), ClinicalReport(e.report)});
    }
  }
  if (!has_splits(manifest)) manifest = split_by_ratio(manifest, config.split, config.split_seed);
  return curate_manifest(std::move(manifest), std::move(pairs));
}

ClassPromptSet synthetic_class_prompts(int num_classes, PromptStyle style) {
  ClassPromptSet set;
  set.style = style;
  for (int k = 0; k < num_classes; ++k) {
    const auto tokens = synthetic_class_tokens(k);
    ClassPrompt p;
    p.class_name = tokens.name;
    if (style == PromptStyle::ckepe) {
      p.subtypes = {tokens.subtype};
      p.attributes = {tokens.attribute};
    }
    p.prompt_text = assemble_prompt(tokens.name, p.subtypes, p.attributes, style);
    set.entries.push_back(std::move(p));
  }
  return set;
}

// ---------------------------------------------------------------------------

namespace {

std::string task_id_of(const CorpusConfig& c) {
  return c.source == "synthetic" ? "synthetic" : c.manifest.stem().string();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
  out << text;
}

Task target_task(const TransferMap& map, const std::filesystem::path& manifest_path) {
  CorpusManifest target = apply_transfer_map(load_manifest(manifest_path), map);
  // An unsplit target is evaluated in full.
  if (!has_splits(target)) {
    for (const auto& e : target.entries) target.split_assignment[e.record_id] = Split::test;
  }
  return make_task(target, map.target_task.empty() ? manifest_path.stem().string() : map.target_task);
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& config) {
  ExperimentReport report;
  std::filesystem::create_directories(config.output_dir);
  const json base = config.to_json();
  write_text(config.output_dir / "config.json", base.dump(2) + "\n");
  const ResultsStore store(config.output_dir / "results.jsonl");
  const std::string task_id = task_id_of(config.corpus);

  auto record_failure = [&](const std::string& subtask, const Error& e) {
    store.append_failure(task_id, subtask, e);
    report.failures.push_back({subtask, std::string(to_string(e.code())), e.what()});
  };
  auto finish = [&]() {
    write_text(config.output_dir / "results.csv", results_csv(report.results));
    report.table = results_table(report.results);
    write_text(config.output_dir / "results.txt", report.table);
    return report;
  };

  const LoadedCorpus corpus = load_corpus(config.corpus);
  std::optional<Model> model;
  if (!config.checkpoint.empty()) {
    model.emplace(Model::load(config.checkpoint));
  } else {
    model.emplace(config.encoder);
    PretrainConfig pre = config.pretrain;
    pre.log_path = config.output_dir / "pretrain_log.jsonl";
    pre.checkpoint_path = config.output_dir / "checkpoint.merl";
    try {
      const auto train = corpus.pairs_in(Split::train);
      report.pretrain_log = pretrain(*model, train, pre).log;
    } catch (const Error& e) {
      record_failure("pretrain", e);
      return finish();
    }
  }

  const bool need_task = config.wants("zeroshot") || config.wants("probe") || config.wants("transfer");
  if (!need_task) return finish();
  const Task task = make_task(corpus.manifest, task_id, corpus.loader());

  std::optional<ClassPromptSet> prompts;
  auto get_prompts = [&]() -> const ClassPromptSet& {
    if (!prompts) {
      prompts = config.zeroshot.prompts == "synthetic"
                    ? synthetic_class_prompts(static_cast<int>(task.label_vocabulary.size()),
                                              config.zeroshot.style)
                    : load_prompt_file(config.zeroshot.prompts, config.zeroshot.style);
    }
    return *prompts;
  };

  auto attempt = [&](const std::string& subtask, auto&& body) {
    try {
      EvalResult r = body();
      store.append(r);
      report.results.push_back(std::move(r));
    } catch (const Error& e) {
      record_failure(subtask, e);
    }
  };

  if (config.wants("zeroshot")) {
    attempt("zeroshot", [&] { return zeroshot_eval(*model, task, get_prompts(), base); });
  }
  if (config.wants("probe")) {
    for (double ratio : config.probe.ratios) {
      ProbeConfig p = config.probe.probe;
      p.training_ratio = ratio;
      attempt("probe@" + std::to_string(ratio), [&] { return linear_probe(*model, task, p, base); });
    }
  }
  if (config.wants("transfer")) {
    std::optional<Task> target;
    try {
      target = target_task(load_transfer_map(config.transfer.map), config.transfer.target_manifest);
    } catch (const Error& e) {
      record_failure("transfer", e);
    }
    if (target) {
      attempt("transfer@zeroshot", [&] { return zeroshot_transfer(*model, *target, get_prompts(), base); });
      for (double ratio : config.transfer.ratios) {
        ProbeConfig p = config.probe.probe;
        p.training_ratio = ratio;
        attempt("transfer@" + std::to_string(ratio),
                [&] { return transfer_probe(*model, task, *target, p, base); });
      }
    }
  }
  return finish();
}

}  // namespace merl
