#pragma once

#include "merl/corpus.hpp"
#include "merl/encoders.hpp"
#include "merl/harness.hpp"
#include "merl/pretrain.hpp"
#include "merl/zeroshot.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace merl {

struct CorpusConfig {
  // "synthetic" or "manifest".
  std::string source = "synthetic";
  std::filesystem::path manifest;
  SyntheticCorpusSpec synthetic;
  SplitRatios split;
  std::uint64_t split_seed = 0;

  nlohmann::json to_json() const;
};

struct ZeroshotSection {
  // "synthetic" builds prompts from the generator's class tokens; anything
  // else is a prompt file path.
  std::string prompts = "synthetic";
  PromptStyle style = PromptStyle::ckepe;
};

struct ProbeSection {
  std::vector<double> ratios{1.0};
  ProbeConfig probe;
};

struct TransferSection {
  std::filesystem::path map;
  std::filesystem::path target_manifest;
  std::vector<double> ratios;  // linear-probe ratios besides zero-shot
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  std::vector<std::string> tasks{"zeroshot", "probe"};
  std::filesystem::path output_dir = "runs/experiment";
  // Existing checkpoint to evaluate; empty means pretrain first.
  std::filesystem::path checkpoint;

  CorpusConfig corpus;
  EncoderConfig encoder;
  PretrainConfig pretrain;
  ZeroshotSection zeroshot;
  ProbeSection probe;
  TransferSection transfer;

  bool wants(std::string_view task) const;
  // Canonical configuration: every knob that can change a result, no output
  // locations. The basis of result fingerprints.
  nlohmann::json to_json() const;
};

// INI text with [experiment], [corpus], [encoder], [pretrain],
// [augmentation], [zeroshot], [probe] and [transfer] sections. Overrides are
// "section.key=value". A seed, when given, replaces experiment.seed. The
// experiment seed seeds model initialization, pretraining and probing. Paths
// are taken relative to the working directory.
ExperimentConfig parse_experiment_config(const std::string& ini_text,
                                         const std::vector<std::string>& overrides = {},
                                         std::optional<std::uint64_t> seed = std::nullopt);
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides = {},
                                        std::optional<std::uint64_t> seed = std::nullopt);

// ---------------------------------------------------------------------------

struct LoadedCorpus {
  CorpusManifest manifest;             // curated entries only, with splits
  std::vector<ECGReportPair> pairs;    // aligned with manifest.entries
  std::vector<RejectedPair> rejected;

  RecordLoader loader() const;
  std::vector<ECGReportPair> pairs_in(Split split) const;
};

LoadedCorpus load_corpus(const CorpusConfig& config);

// Prompts built from the synthetic generator's class tokens.
ClassPromptSet synthetic_class_prompts(int num_classes, PromptStyle style);

struct SubtaskFailure {
  std::string subtask;
  std::string error_code;
  std::string message;
};

struct ExperimentReport {
  std::vector<EvalResult> results;
  std::vector<SubtaskFailure> failures;
  std::vector<EpochRecord> pretrain_log;
  std::string table;
};

// pretrain (unless a checkpoint is given) -> the declared evaluations.
// Writes config.json, pretrain_log.jsonl, checkpoint.merl, results.jsonl,
// results.csv and results.txt under output_dir. A failing evaluation is
// recorded and the remaining ones still run.
ExperimentReport run_experiment(const ExperimentConfig& config);

}  // namespace merl
