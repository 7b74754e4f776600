#pragma once

#include "merl/common.hpp"
#include "merl/corpus.hpp"
#include "merl/encoders.hpp"
#include "merl/zeroshot.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace merl {

// ---------------------------------------------------------------------------
// Evaluation tasks

struct LabeledSet {
  std::vector<std::string> ids;
  std::vector<ECGRecord> records;
  Matrix<double> labels;  // rows aligned with records, columns with the vocabulary

  Index size() const { return static_cast<Index>(records.size()); }
  LabeledSet subset(const std::vector<Index>& rows) const;
};

struct Task {
  std::string task_id;
  std::vector<std::string> label_vocabulary;
  LabeledSet train, valid, test;
};

using RecordLoader = std::function<ECGRecord(const ManifestEntry&)>;

// Loads every split of `manifest`. The default loader reads signal files
// relative to the manifest and repairs non-finite samples.
Task make_task(const CorpusManifest& manifest, std::string task_id, RecordLoader loader = {});

// ---------------------------------------------------------------------------
// Subsampling

// Deterministic stratified subsample of round(ratio * n) items, stratified
// on `strata` (one key per item). Subsets are nested: for a fixed seed the
// subset for a smaller ratio is contained in the one for a larger ratio.
// Returns indices in ascending order; ratio 1.0 returns every index.
std::vector<Index> subsample_indices(const std::vector<std::string>& ids,
                                     const std::vector<std::string>& strata, double ratio,
                                     std::uint64_t seed);

// Strata are each entry's first label.
std::vector<const ManifestEntry*> subsample_split(std::span<const ManifestEntry* const> train,
                                                  double ratio, std::uint64_t seed);

// Strata are each row's first positive class (or "" when unlabeled).
std::vector<Index> subsample_set(const LabeledSet& set, double ratio, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Results

enum class EvalMode { zeroshot, linear_probe, transfer };

std::string_view to_string(EvalMode mode);
EvalMode parse_eval_mode(std::string_view name);

struct EvalResult {
  std::string task_id;
  EvalMode mode = EvalMode::zeroshot;
  double training_ratio = 0;
  double macro_auc = 0;
  std::vector<std::string> class_names;
  std::vector<std::optional<double>> per_class_auc;
  // Canonical description of everything that produced this result; the
  // fingerprint is the SHA-256 of its compact serialization.
  nlohmann::json config;
  std::string config_fingerprint;

  nlohmann::json to_json() const;
  static EvalResult from_json(const nlohmann::json& j);
};

std::string config_fingerprint(const nlohmann::json& config);

EvalResult make_result(std::string task_id, EvalMode mode, double ratio, const AucResult& auc,
                       std::vector<std::string> class_names, nlohmann::json config);

// ---------------------------------------------------------------------------
// Linear probing

struct ProbeConfig {
  double training_ratio = 1.0;
  double learning_rate = 1e-3;
  int batch_size = 16;
  int epochs = 100;
  int warmup_steps = 5;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  // Linear warmup to learning_rate, then cosine annealing to zero.
  double learning_rate_at(long step, long total_steps) const;
};

// Frozen ECG encoder features (z_e) for a set of records, evaluation mode.
Matrix<float> encode_features(Model& model, std::span<const ECGRecord> records);

struct ProbeOutcome {
  Matrix<float> weight;  // classes x D_e
  RowVector<float> bias;
  Matrix<double> test_scores;
  AucResult auc;
};

// Trains one affine map with per-class binary cross-entropy on `train`
// features and scores `test` features.
ProbeOutcome train_linear_probe(const Matrix<float>& train_x, const Matrix<double>& train_y,
                                const Matrix<float>& test_x, const Matrix<double>& test_y,
                                const ProbeConfig& config);

// Probes the model's frozen encoder on the task. Throws protocol_violation
// if the encoder parameters changed.
EvalResult linear_probe(Model& model, const Task& task, const ProbeConfig& config,
                        const nlohmann::json& base_config = nlohmann::json::object());

EvalResult zeroshot_eval(Model& model, const Task& task, const ClassPromptSet& prompts,
                         const nlohmann::json& base_config = nlohmann::json::object());

// ---------------------------------------------------------------------------
// Domain transfer

// Zero-shot transfer: source-vocabulary prompts scored on the test split of
// a target task already remapped to the source vocabulary. Ratio 0.
EvalResult zeroshot_transfer(Model& model, const Task& target, const ClassPromptSet& prompts,
                             const nlohmann::json& base_config = nlohmann::json::object());

// Probe trained on the source task's training split and scored on the
// remapped target's test split.
EvalResult transfer_probe(Model& model, const Task& source, const Task& target,
                          const ProbeConfig& config,
                          const nlohmann::json& base_config = nlohmann::json::object());


struct TransferMap {
  std::string source_task;
  std::string target_task;
  // Source categories in table order, each with its target categories.
  std::vector<std::pair<std::string, std::vector<std::string>>> mapping;
  std::vector<std::string> dropped_target_categories;

  std::vector<std::string> source_categories() const;
  // Target categories listed under more than one source category.
  std::vector<std::string> multi_source_targets() const;
  // Dropped categories must not be mapped; with `strict`, a target category
  // may appear under at most one source category.
  void validate(bool strict = false) const;
  nlohmann::json to_json() const;
  static TransferMap from_json(const nlohmann::json& j);
};

TransferMap load_transfer_map(const std::filesystem::path& path);
void save_transfer_map(const std::filesystem::path& path, const TransferMap& map);

// Rewrites target labels into the source vocabulary. Samples whose labels
// are all dropped categories are removed. A manifest already expressed in
// the source vocabulary is returned unchanged.
CorpusManifest apply_transfer_map(const CorpusManifest& target, const TransferMap& map);

// ---------------------------------------------------------------------------
// Embedding export

enum class EmbeddingKind { z_e, projected };

std::string_view to_string(EmbeddingKind kind);
EmbeddingKind parse_embedding_kind(std::string_view name);

struct ExportOptions {
  EmbeddingKind which = EmbeddingKind::projected;
  bool drop_multilabel = false;
  // Classes with fewer samples than this are removed (0 disables).
  int min_class_count = 0;
};

// CSV "record_id,labels,e0,e1,..." with labels joined by '|'. Returns the
// number of rows written.
std::size_t export_embeddings(Model& model, const CorpusManifest& manifest,
                              const std::filesystem::path& out, const ExportOptions& options,
                              RecordLoader loader = {});

// ---------------------------------------------------------------------------
// Results store

class ResultsStore {
 public:
  explicit ResultsStore(std::filesystem::path path) : path_(std::move(path)) {}

  void append(const EvalResult& result) const;
  void append_failure(const std::string& task_id, const std::string& subtask, const Error& error) const;
  // Successful results in file order.
  std::vector<EvalResult> load() const;
  const std::filesystem::path& path() const { return path_; }

 private:
  void append_line(const nlohmann::json& record) const;
  std::filesystem::path path_;
};

// CSV: task_id,mode,training_ratio,macro_auc,fingerprint,<class>... with
// per-class AUCs (empty when undefined).
std::string results_csv(const std::vector<EvalResult>& results);
// Plain-text table with one row per (task, mode) and one column per ratio.
std::string results_table(const std::vector<EvalResult>& results);

}  // namespace merl
