#include "merl/harness.hpp"

#include "merl/ckepe.hpp"
#include "merl/optim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace merl {

using nlohmann::json;

LabeledSet LabeledSet::subset(const std::vector<Index>& rows) const {
  LabeledSet out;
  out.labels.resize(static_cast<Index>(rows.size()), labels.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = static_cast<std::size_t>(rows[i]);
    out.ids.push_back(ids[r]);
    out.records.push_back(records[r]);
    out.labels.row(static_cast<Index>(i)) = labels.row(rows[i]);
  }
  return out;
}

Task make_task(const CorpusManifest& manifest, std::string task_id, RecordLoader loader) {
  if (!loader) {
    loader = [&manifest](const ManifestEntry& e) {
      ECGRecord r = load_record(manifest, e);
      r.signal = repair_invalid(r.signal, r.record_id);
      return r;
    };
  }
  Task task;
  task.task_id = std::move(task_id);
  task.label_vocabulary = manifest.label_vocabulary;
  auto fill = [&](Split split, LabeledSet& set) {
    const auto rows = manifest.entries_in(split);
    set.labels = manifest.label_matrix(rows);
    for (const auto* e : rows) {
      set.ids.push_back(e->record_id);
      set.records.push_back(loader(*e));
    }
  };
  fill(Split::train, task.train);
  fill(Split::valid, task.valid);
  fill(Split::test, task.test);
  return task;
}

// ---------------------------------------------------------------------------

std::vector<Index> subsample_indices(const std::vector<std::string>& ids,
                                     const std::vector<std::string>& strata, double ratio,
                                     std::uint64_t seed) {
  if (ids.size() != strata.size()) {
    throw Error(ErrorCode::dimension_mismatch, "subsample: ids and strata differ in length");
  }
  if (!(ratio > 0 && ratio <= 1)) {
    throw Error(ErrorCode::configuration, "training ratio must lie in (0, 1], got " + std::to_string(ratio));
  }
  const auto n = static_cast<Index>(ids.size());
  std::vector<Index> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), Index{0});
  if (ratio == 1.0) return all;
  const auto count = static_cast<Index>(std::llround(ratio * static_cast<double>(n)));
  if (count < 1) {
    throw Error(ErrorCode::invalid_argument, "training ratio " + std::to_string(ratio) + " of " +
                                                 std::to_string(n) + " samples yields zero samples");
  }

  std::map<std::string, std::vector<Index>> groups;
  for (Index i = 0; i < n; ++i) groups[strata[static_cast<std::size_t>(i)]].push_back(i);
  struct Key {
    double position;
    std::size_t group;
    Index item;
  };
  std::vector<Key> keys;
  std::size_t g = 0;
  for (auto& [stratum, members] : groups) {
    std::sort(members.begin(), members.end(), [&](Index a, Index b) {
      return ids[static_cast<std::size_t>(a)] < ids[static_cast<std::size_t>(b)];
    });
    std::mt19937_64 rng(derive_seed(seed, fnv1a64(stratum)));
    std::shuffle(members.begin(), members.end(), rng);
    const auto size = static_cast<double>(members.size());
    for (std::size_t r = 0; r < members.size(); ++r) {
      keys.push_back({(static_cast<double>(r) + 0.5) / size, g, members[r]});
    }
    ++g;
  }
  // Every prefix of this order is close to proportional across strata, and
  // the order does not depend on the ratio, so subsets are nested.
  std::sort(keys.begin(), keys.end(), [](const Key& a, const Key& b) {
    if (a.position != b.position) return a.position < b.position;
    return a.group < b.group;
  });
  std::vector<Index> out;
  for (Index k = 0; k < count; ++k) out.push_back(keys[static_cast<std::size_t>(k)].item);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<const ManifestEntry*> subsample_split(std::span<const ManifestEntry* const> train,
                                                  double ratio, std::uint64_t seed) {
  std::vector<std::string> ids, strata;
  for (const auto* e : train) {
    ids.push_back(e->record_id);
    strata.push_back(e->labels.empty() ? std::string() : e->labels.front());
  }
  std::vector<const ManifestEntry*> out;
  for (Index i : subsample_indices(ids, strata, ratio, seed)) out.push_back(train[static_cast<std::size_t>(i)]);
  return out;
}

std::vector<Index> subsample_set(const LabeledSet& set, double ratio, std::uint64_t seed) {
  std::vector<std::string> strata;
  for (Index i = 0; i < set.labels.rows(); ++i) {
    std::string key;
    for (Index c = 0; c < set.labels.cols(); ++c) {
      if (set.labels(i, c) > 0.5) {
        key = std::to_string(c);
        break;
      }
    }
    strata.push_back(key);
  }
  return subsample_indices(set.ids, strata, ratio, seed);
}

// ---------------------------------------------------------------------------

std::string_view to_string(EvalMode mode) {
  switch (mode) {
    case EvalMode::zeroshot: return "zeroshot";
    case EvalMode::linear_probe: return "linear_probe";
    case EvalMode::transfer: return "transfer";
  }
  return "";
}

EvalMode parse_eval_mode(std::string_view name) {
  for (auto m : {EvalMode::zeroshot, EvalMode::linear_probe, EvalMode::transfer}) {
    if (to_string(m) == name) return m;
  }
  throw Error(ErrorCode::parse, "unknown evaluation mode '" + std::string(name) + "'");
}

std::string config_fingerprint(const json& config) { return sha256_hex(config.dump()); }

json EvalResult::to_json() const {
  json per_class = json::object();
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    per_class[class_names[c]] = per_class_auc[c] ? json(*per_class_auc[c]) : json(nullptr);
  }
  return {{"task_id", task_id},
          {"mode", std::string(to_string(mode))},
          {"training_ratio", training_ratio},
          {"macro_auc", macro_auc},
          {"class_names", class_names},
          {"per_class_auc", per_class},
          {"config", config},
          {"config_fingerprint", config_fingerprint}};
}

EvalResult EvalResult::from_json(const json& j) {
  EvalResult r;
  r.task_id = j.at("task_id").get<std::string>();
  r.mode = parse_eval_mode(j.at("mode").get<std::string>());
  r.training_ratio = j.at("training_ratio").get<double>();
  r.macro_auc = j.at("macro_auc").get<double>();
  r.class_names = j.at("class_names").get<std::vector<std::string>>();
  for (const auto& c : r.class_names) {
    const auto& v = j.at("per_class_auc").at(c);
    r.per_class_auc.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
  }
  r.config = j.at("config");
  r.config_fingerprint = j.at("config_fingerprint").get<std::string>();
  return r;
}

EvalResult make_result(std::string task_id, EvalMode mode, double ratio, const AucResult& auc,
                       std::vector<std::string> class_names, json config) {
  EvalResult r;
  r.task_id = std::move(task_id);
  r.mode = mode;
  r.training_ratio = ratio;
  r.macro_auc = auc.macro;
  r.class_names = std::move(class_names);
  r.per_class_auc = auc.per_class;
  config["task_id"] = r.task_id;
  config["mode"] = std::string(to_string(mode));
  config["training_ratio"] = ratio;
  r.config = std::move(config);
  r.config_fingerprint = config_fingerprint(r.config);
  return r;
}

// ---------------------------------------------------------------------------

void ProbeConfig::validate() const {
  if (!(training_ratio > 0 && training_ratio <= 1)) {
    throw Error(ErrorCode::configuration, "probe training_ratio must lie in (0, 1]");
  }
  if (!(learning_rate > 0)) throw Error(ErrorCode::configuration, "probe learning_rate must be positive");
  if (batch_size < 1) throw Error(ErrorCode::configuration, "probe batch_size must be positive");
  if (epochs < 1) throw Error(ErrorCode::configuration, "probe epochs must be positive");
  if (warmup_steps < 0) throw Error(ErrorCode::configuration, "probe warmup_steps must be >= 0");
  if (!(weight_decay >= 0)) throw Error(ErrorCode::configuration, "probe weight_decay must be >= 0");
}

json ProbeConfig::to_json() const {
  return {{"training_ratio", training_ratio}, {"learning_rate", learning_rate},
          {"batch_size", batch_size},         {"epochs", epochs},
          {"warmup_steps", warmup_steps},     {"weight_decay", weight_decay},
          {"seed", seed}};
}

double ProbeConfig::learning_rate_at(long step, long total_steps) const {
  if (step < warmup_steps) return learning_rate * static_cast<double>(step + 1) / (warmup_steps + 1);
  const double span = static_cast<double>(std::max<long>(1, total_steps - warmup_steps));
  const double progress = static_cast<double>(step - warmup_steps) / span;
  return learning_rate * 0.5 * (1.0 + std::cos(std::acos(-1.0) * progress));
}

Matrix<float> encode_features(Model& model, std::span<const ECGRecord> records) {
  constexpr std::size_t chunk = 256;
  Matrix<float> out(static_cast<Index>(records.size()), model.ecg().embed_dim());
  for (std::size_t start = 0; start < records.size(); start += chunk) {
    const auto part = records.subspan(start, std::min(chunk, records.size() - start));
    out.middleRows(static_cast<Index>(start), static_cast<Index>(part.size())) =
        encode_ecg_batch(part, model);
  }
  return out;
}

ProbeOutcome train_linear_probe(const Matrix<float>& train_x, const Matrix<double>& train_y,
                                const Matrix<float>& test_x, const Matrix<double>& test_y,
                                const ProbeConfig& config) {
  config.validate();
  if (train_x.rows() != train_y.rows() || test_x.rows() != test_y.rows() ||
      train_x.cols() != test_x.cols() || train_y.cols() != test_y.cols()) {
    throw Error(ErrorCode::dimension_mismatch, "probe features and labels disagree in shape");
  }
  if (train_x.rows() == 0) throw Error(ErrorCode::empty_manifest, "probe has no training samples");
  const Index n = train_x.rows();
  const Index classes = train_y.cols();
  std::mt19937_64 init_rng(derive_seed(config.seed, fnv1a64("probe_init")));
  nn::Linear<float> head(train_x.cols(), classes, true, init_rng);
  AdamW<float> optimizer({0.9, 0.999, 1e-8, config.weight_decay});
  nn::ParamList<float> params;
  head.collect("probe", params);

  const Index batch = std::min<Index>(config.batch_size, n);
  const long steps_per_epoch = static_cast<long>((n + batch - 1) / batch);
  const long total_steps = steps_per_epoch * config.epochs;
  const Matrix<float> y = train_y.cast<float>();
  std::vector<Index> order(static_cast<std::size_t>(n));
  long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Index{0});
    std::mt19937_64 rng(derive_seed(config.seed, fnv1a64("probe_order") + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    for (Index start = 0; start < n; start += batch) {
      const Index b = std::min(batch, n - start);
      Matrix<float> xb(b, train_x.cols()), yb(b, classes);
      for (Index i = 0; i < b; ++i) {
        xb.row(i) = train_x.row(order[static_cast<std::size_t>(start + i)]);
        yb.row(i) = y.row(order[static_cast<std::size_t>(start + i)]);
      }
      const Matrix<float> logits = head.forward(nn::Tensor<float>::from_rows(std::move(xb)), nn::Mode::train).data;
      // Mean binary cross-entropy over all (sample, class) entries.
      const Matrix<float> probs = (1.0f + (-logits.array()).exp()).inverse().matrix();
      const Matrix<float> grad = (probs - yb) / static_cast<float>(b * classes);
      head.weight_grad.setZero();
      head.bias_grad.setZero();
      head.backward(nn::Tensor<float>::from_rows(grad));
      optimizer.step(params, config.learning_rate_at(step, total_steps));
      ++step;
    }
  }

  ProbeOutcome out;
  out.test_scores = head.forward(nn::Tensor<float>::from_rows(test_x), nn::Mode::eval).data.cast<double>();
  out.auc = macro_auc(out.test_scores, test_y);
  out.weight = head.weight;
  out.bias = head.bias;
  return out;
}

namespace {

AucResult probe_frozen(Model& model, const LabeledSet& train_set, const LabeledSet& test_set,
                       const ProbeConfig& config) {
  config.validate();
  const std::string before = model.ecg_encoder_hash();
  const auto rows = subsample_set(train_set, config.training_ratio, config.seed);
  const LabeledSet train = train_set.subset(rows);
  const Matrix<float> train_x = encode_features(model, train.records);
  const Matrix<float> test_x = encode_features(model, test_set.records);
  const auto outcome = train_linear_probe(train_x, train.labels, test_x, test_set.labels, config);
  const std::string after = model.ecg_encoder_hash();
  if (before != after) {
    throw Error(ErrorCode::protocol_violation,
                "linear probing modified the frozen ECG encoder (hash " + before.substr(0, 12) +
                    " -> " + after.substr(0, 12) + ")");
  }
  return outcome.auc;
}

AucResult score_prompts(Model& model, const Task& task, const ClassPromptSet& prompts, json& cfg) {
  prompts.validate(&task.label_vocabulary);
  const Matrix<float> P = embed_class_prompts(prompts, model);
  const Matrix<float> scores = zero_shot_scores(std::span<const ECGRecord>(task.test.records), P, model);
  json prompt_texts = json::array();
  for (const auto& e : prompts.entries) prompt_texts.push_back({e.class_name, e.prompt_text});
  cfg["prompts"] = {{"style", std::string(to_string(prompts.style))},
                    {"template_version", kPromptTemplateVersion},
                    {"texts", prompt_texts}};
  return macro_auc(scores, task.test.labels);
}

}  // namespace

EvalResult linear_probe(Model& model, const Task& task, const ProbeConfig& config,
                        const json& base_config) {
  const auto auc = probe_frozen(model, task.train, task.test, config);
  json cfg = base_config;
  cfg["probe"] = config.to_json();
  return make_result(task.task_id, EvalMode::linear_probe, config.training_ratio, auc,
                     task.label_vocabulary, cfg);
}

EvalResult zeroshot_eval(Model& model, const Task& task, const ClassPromptSet& prompts,
                         const json& base_config) {
  json cfg = base_config;
  const auto auc = score_prompts(model, task, prompts, cfg);
  return make_result(task.task_id, EvalMode::zeroshot, 0.0, auc, task.label_vocabulary, cfg);
}

EvalResult zeroshot_transfer(Model& model, const Task& target, const ClassPromptSet& prompts,
                             const json& base_config) {
  json cfg = base_config;
  cfg["transfer"] = {{"kind", "zeroshot"}};
  const auto auc = score_prompts(model, target, prompts, cfg);
  return make_result(target.task_id, EvalMode::transfer, 0.0, auc, target.label_vocabulary, cfg);
}

EvalResult transfer_probe(Model& model, const Task& source, const Task& target,
                          const ProbeConfig& config, const json& base_config) {
  if (source.label_vocabulary != target.label_vocabulary) {
    throw Error(ErrorCode::vocabulary, "transfer probe: source task '" + source.task_id +
                                           "' and remapped target '" + target.task_id +
                                           "' use different label vocabularies");
  }
  const auto auc = probe_frozen(model, source.train, target.test, config);
  json cfg = base_config;
  cfg["probe"] = config.to_json();
  cfg["transfer"] = {{"kind", "linear_probe"}, {"source_task", source.task_id}};
  return make_result(target.task_id, EvalMode::transfer, config.training_ratio, auc,
                     target.label_vocabulary, cfg);
}

// ---------------------------------------------------------------------------

std::vector<std::string> TransferMap::source_categories() const {
  std::vector<std::string> out;
  for (const auto& [source, targets] : mapping) out.push_back(source);
  return out;
}

std::vector<std::string> TransferMap::multi_source_targets() const {
  std::map<std::string, int> count;
  for (const auto& [source, targets] : mapping) {
    for (const auto& t : std::set<std::string>(targets.begin(), targets.end())) ++count[t];
  }
  std::vector<std::string> out;
  for (const auto& [t, c] : count) {
    if (c > 1) out.push_back(t);
  }
  return out;
}

void TransferMap::validate(bool strict) const {
  std::set<std::string> sources, mapped;
  for (const auto& [source, targets] : mapping) {
    if (!sources.insert(source).second) {
      throw Error(ErrorCode::configuration, "transfer map lists source '" + source + "' twice");
    }
    mapped.insert(targets.begin(), targets.end());
  }
  for (const auto& d : dropped_target_categories) {
    if (mapped.count(d)) {
      throw Error(ErrorCode::configuration, "dropped category '" + d + "' also appears in the mapping");
    }
  }
  if (strict) {
    const auto multi = multi_source_targets();
    if (!multi.empty()) {
      throw Error(ErrorCode::configuration,
                  "target category '" + multi.front() + "' is mapped from more than one source category");
    }
  }
}

json TransferMap::to_json() const {
  json m = json::array();
  for (const auto& [source, targets] : mapping) m.push_back({{"source", source}, {"targets", targets}});
  return {{"source_task", source_task},
          {"target_task", target_task},
          {"mapping", m},
          {"dropped_target_categories", dropped_target_categories}};
}

TransferMap TransferMap::from_json(const json& j) {
  TransferMap map;
  map.source_task = j.at("source_task").get<std::string>();
  map.target_task = j.at("target_task").get<std::string>();
  for (const auto& row : j.at("mapping")) {
    map.mapping.emplace_back(row.at("source").get<std::string>(),
                             row.at("targets").get<std::vector<std::string>>());
  }
  map.dropped_target_categories = j.value("dropped_target_categories", std::vector<std::string>{});
  return map;
}

TransferMap load_transfer_map(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open transfer map " + path.string());
  TransferMap map;
  try {
    map = TransferMap::from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse, path.string() + ": " + e.what());
  }
  map.validate();
  return map;
}

void save_transfer_map(const std::filesystem::path& path, const TransferMap& map) {
  map.validate();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::io, "cannot write transfer map " + path.string());
  out << map.to_json().dump(2) << '\n';
}

CorpusManifest apply_transfer_map(const CorpusManifest& target, const TransferMap& map) {
  map.validate();
  const auto sources = map.source_categories();
  const std::set<std::string> source_set(sources.begin(), sources.end());

  // Already in the source vocabulary: nothing to rewrite.
  const bool already_remapped =
      target.label_vocabulary == sources &&
      std::all_of(target.entries.begin(), target.entries.end(), [&](const ManifestEntry& e) {
        return std::all_of(e.labels.begin(), e.labels.end(),
                           [&](const std::string& l) { return source_set.count(l) > 0; });
      });
  if (already_remapped) return target;

  std::map<std::string, std::vector<std::string>> sources_of;
  for (const auto& [source, targets] : map.mapping) {
    for (const auto& t : targets) sources_of[t].push_back(source);
  }
  const std::set<std::string> dropped(map.dropped_target_categories.begin(),
                                      map.dropped_target_categories.end());

  CorpusManifest out;
  out.label_vocabulary = sources;
  out.base_dir = target.base_dir;
  out.warnings = target.warnings;
  std::set<std::string> missing;
  for (const auto& entry : target.entries) {
    std::set<std::string> labels;
    for (const auto& label : entry.labels) {
      if (const auto it = sources_of.find(label); it != sources_of.end()) {
        labels.insert(it->second.begin(), it->second.end());
      } else if (!dropped.count(label)) {
        missing.insert(label);
      }
    }
    if (!entry.labels.empty() && labels.empty()) continue;
    ManifestEntry e = entry;
    e.labels.clear();
    for (const auto& s : sources) {
      if (labels.count(s)) e.labels.push_back(s);
    }
    out.entries.push_back(std::move(e));
    if (const auto it = target.split_assignment.find(entry.record_id); it != target.split_assignment.end()) {
      out.split_assignment[entry.record_id] = it->second;
    }
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw Error(ErrorCode::completeness, "target labels not covered by the " + map.source_task + " -> " +
                                             map.target_task + " map: " + list);
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string_view to_string(EmbeddingKind kind) {
  return kind == EmbeddingKind::z_e ? "z_e" : "projected";
}

EmbeddingKind parse_embedding_kind(std::string_view name) {
  if (name == "z_e") return EmbeddingKind::z_e;
  if (name == "projected") return EmbeddingKind::projected;
  throw Error(ErrorCode::configuration, "unknown embedding kind '" + std::string(name) + "'");
}

std::size_t export_embeddings(Model& model, const CorpusManifest& manifest,
                              const std::filesystem::path& out, const ExportOptions& options,
                              RecordLoader loader) {
  if (!loader) {
    loader = [&manifest](const ManifestEntry& e) {
      ECGRecord r = load_record(manifest, e);
      r.signal = repair_invalid(r.signal, r.record_id);
      return r;
    };
  }
  std::vector<const ManifestEntry*> rows;
  for (const auto& e : manifest.entries) {
    if (options.drop_multilabel && e.labels.size() > 1) continue;
    rows.push_back(&e);
  }
  if (options.min_class_count > 0) {
    std::map<std::string, int> count;
    for (const auto* e : rows) {
      for (const auto& l : e->labels) ++count[l];
    }
    std::erase_if(rows, [&](const ManifestEntry* e) {
      return std::any_of(e->labels.begin(), e->labels.end(),
                         [&](const std::string& l) { return count[l] < options.min_class_count; });
    });
  }

  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  std::ofstream file(out);
  if (!file) throw Error(ErrorCode::io, "cannot write " + out.string());
  const Index dim = options.which == EmbeddingKind::z_e ? model.ecg().embed_dim()
                                                        : model.config().shared_dim;
  file << "record_id,labels";
  for (Index k = 0; k < dim; ++k) file << ",e" << k;
  file << '\n';
  file << std::setprecision(9);

  constexpr std::size_t chunk = 256;
  for (std::size_t start = 0; start < rows.size(); start += chunk) {
    std::vector<ECGRecord> records;
    for (std::size_t i = start; i < std::min(rows.size(), start + chunk); ++i) records.push_back(loader(*rows[i]));
    Matrix<float> z = encode_ecg_batch(std::span<const ECGRecord>(records), model);
    if (options.which == EmbeddingKind::projected) z = project_and_normalize(z, Modality::ecg, model);
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto* e = rows[start + i];
      file << e->record_id << ',';
      for (std::size_t l = 0; l < e->labels.size(); ++l) file << (l ? "|" : "") << e->labels[l];
      for (Index k = 0; k < dim; ++k) file << ',' << z(static_cast<Index>(i), k);
      file << '\n';
    }
  }
  if (!file) throw Error(ErrorCode::io, "failed writing " + out.string());
  return rows.size();
}

// ---------------------------------------------------------------------------

void ResultsStore::append_line(const json& record) const {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  // One write call per record keeps lines whole.
  const std::string line = record.dump() + "\n";
  std::ofstream out(path_, std::ios::app | std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot append to results store " + path_.string());
  out.write(line.data(), static_cast<std::streamsize>(line.size()));
  out.flush();
}

void ResultsStore::append(const EvalResult& result) const {
  json record = result.to_json();
  record["status"] = "ok";
  append_line(record);
}

void ResultsStore::append_failure(const std::string& task_id, const std::string& subtask,
                                  const Error& error) const {
  append_line({{"status", "failed"},
               {"task_id", task_id},
               {"subtask", subtask},
               {"error", std::string(to_string(error.code()))},
               {"message", error.what()}});
}

std::vector<EvalResult> ResultsStore::load() const {
  std::vector<EvalResult> out;
  std::ifstream in(path_);
  if (!in) return out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      if (j.value("status", "ok") == "ok") out.push_back(EvalResult::from_json(j));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::parse, path_.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

namespace {

std::string format_auc(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << 100.0 * v;
  return s.str();
}

std::string format_ratio(double r) {
  std::ostringstream s;
  s << r * 100.0 << "%";
  return s.str();
}

}  // namespace

std::string results_csv(const std::vector<EvalResult>& results) {
  std::vector<std::string> classes;
  std::set<std::string> seen;
  for (const auto& r : results) {
    for (const auto& c : r.class_names) {
      if (seen.insert(c).second) classes.push_back(c);
    }
  }
  std::ostringstream out;
  out << std::setprecision(9) << "task_id,mode,training_ratio,macro_auc,fingerprint";
  for (const auto& c : classes) out << ',' << c;
  out << '\n';
  for (const auto& r : results) {
    out << r.task_id << ',' << to_string(r.mode) << ',' << r.training_ratio << ',' << r.macro_auc << ','
        << r.config_fingerprint;
    for (const auto& c : classes) {
      out << ',';
      const auto it = std::find(r.class_names.begin(), r.class_names.end(), c);
      if (it != r.class_names.end()) {
        const auto& v = r.per_class_auc[static_cast<std::size_t>(it - r.class_names.begin())];
        if (v) out << *v;
      }
    }
    out << '\n';
  }
  return out.str();
}

std::string results_table(const std::vector<EvalResult>& results) {
  std::vector<double> ratios;
  std::vector<std::pair<std::string, std::string>> rows;  // (mode, task)
  std::map<std::pair<std::pair<std::string, std::string>, double>, double> cell;
  for (const auto& r : results) {
    if (std::find(ratios.begin(), ratios.end(), r.training_ratio) == ratios.end()) ratios.push_back(r.training_ratio);
    const std::pair<std::string, std::string> key{std::string(to_string(r.mode)), r.task_id};
    if (std::find(rows.begin(), rows.end(), key) == rows.end()) rows.push_back(key);
    cell[{key, r.training_ratio}] = r.macro_auc;
  }
  std::sort(ratios.begin(), ratios.end());
  std::size_t w0 = 14, w1 = 8;
  for (const auto& [mode, task] : rows) {
    w0 = std::max(w0, mode.size() + 2);
    w1 = std::max(w1, task.size() + 2);
  }
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(w0)) << "mode" << std::setw(static_cast<int>(w1)) << "task";
  for (double r : ratios) out << std::right << std::setw(10) << format_ratio(r);
  out << '\n';
  for (const auto& key : rows) {
    out << std::left << std::setw(static_cast<int>(w0)) << key.first << std::setw(static_cast<int>(w1)) << key.second;
    for (double r : ratios) {
      const auto it = cell.find({key, r});
      out << std::right << std::setw(10) << (it == cell.end() ? std::string("-") : format_auc(it->second));
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace merl
