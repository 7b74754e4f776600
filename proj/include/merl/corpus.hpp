#pragma once

#include "merl/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace merl {

// One multi-lead recording. `signal` is num_leads x num_samples.
struct ECGRecord {
  std::string record_id;
  Matrix<float> signal;
  int sampling_rate_hz = 500;
  std::vector<std::string> lead_names;

  Index num_leads() const { return signal.rows(); }
  Index num_samples() const { return signal.cols(); }
};

// Number of whitespace-separated words; Unicode space separators count as
// whitespace, punctuation stays attached to its word.
std::size_t count_words(std::string_view text);

struct ClinicalReport {
  std::string text;
  std::size_t word_count = 0;

  ClinicalReport() = default;
  explicit ClinicalReport(std::string t)
      : text(std::move(t)), word_count(count_words(text)) {}
};

struct ECGReportPair {
  ECGRecord ecg;
  ClinicalReport report;
};

enum class Split { unassigned, train, valid, test };

std::string_view to_string(Split split);
Split parse_split(std::string_view text);

struct ManifestEntry {
  std::string record_id;
  std::string signal_path;  // relative to the manifest directory
  std::string report;       // inline report text
  std::vector<std::string> labels;
};

struct CorpusManifest {
  std::vector<ManifestEntry> entries;
  std::vector<std::string> label_vocabulary;
  std::map<std::string, Split> split_assignment;
  std::filesystem::path base_dir;
  // Non-fatal notes produced while building this manifest (split fallbacks).
  std::vector<std::string> warnings;

  Split split_of(const std::string& record_id) const;
  std::vector<const ManifestEntry*> entries_in(Split split) const;
  // Dense 0/1 label matrix over `label_vocabulary`, one row per entry.
  Matrix<double> label_matrix(const std::vector<const ManifestEntry*>& rows) const;
};

// ---------------------------------------------------------------------------
// Invalid-value repair

// Replaces each non-finite entry by the mean of the six nearest finite
// values on the same lead: three on each side, borrowing from the opposite
// side when one side runs out. Only originally-finite values are used as
// neighbours, so the result does not depend on repair order. A lead needs at
// least six finite values.
template <typename Scalar>
Matrix<Scalar> repair_invalid(const Matrix<Scalar>& signal,
                              std::string_view record_id = {}) {
  Matrix<Scalar> out = signal;
  const Index n = signal.cols();
  std::vector<Index> finite_positions;
  for (Index lead = 0; lead < signal.rows(); ++lead) {
    finite_positions.clear();
    for (Index t = 0; t < n; ++t) {
      if (std::isfinite(signal(lead, t))) finite_positions.push_back(t);
    }
    if (static_cast<Index>(finite_positions.size()) == n) continue;
    if (finite_positions.size() < 6) {
      throw Error(ErrorCode::unrecoverable_lead,
                  "record '" + std::string(record_id) + "' lead " +
                      std::to_string(lead) + " has only " +
                      std::to_string(finite_positions.size()) +
                      " finite values (need >= 6)");
    }
    for (Index t = 0; t < n; ++t) {
      if (std::isfinite(signal(lead, t))) continue;
      // First finite position strictly after t.
      const auto upper = std::upper_bound(finite_positions.begin(),
                                          finite_positions.end(), t);
      const Index right_avail = finite_positions.end() - upper;
      const Index left_avail = upper - finite_positions.begin();
      Index take_left = std::min<Index>(3, left_avail);
      Index take_right = std::min<Index>(3, right_avail);
      Index missing = 6 - take_left - take_right;
      const Index extra_left = std::min(missing, left_avail - take_left);
      take_left += extra_left;
      missing -= extra_left;
      take_right += std::min(missing, right_avail - take_right);
      Scalar sum = 0;
      for (Index k = 0; k < take_left; ++k) sum += signal(lead, *(upper - 1 - k));
      for (Index k = 0; k < take_right; ++k) sum += signal(lead, *(upper + k));
      out(lead, t) = sum / static_cast<Scalar>(take_left + take_right);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Curation

enum class RejectReason { empty_report, short_report, unrecoverable_signal };
std::string_view to_string(RejectReason reason);

struct RejectedPair {
  ECGReportPair pair;
  RejectReason reason;
  std::string detail;
};

struct CurationResult {
  std::vector<ECGReportPair> kept;
  std::vector<RejectedPair> rejected;
};

// Kept pairs carry repaired signals. Input order is preserved in both lists.
CurationResult curate_pairs(std::vector<ECGReportPair> pairs);

// ---------------------------------------------------------------------------
// File formats

// Binary `ECG1` container (little-endian float32, lead-major, optional lead
// names) or, for a `.csv` extension, one lead per row.
ECGRecord read_signal(const std::filesystem::path& path,
                      int default_sampling_rate_hz = 500);
void write_signal(const std::filesystem::path& path, const ECGRecord& record);

struct ManifestOptions {
  // When set, every label must belong to this vocabulary (in this order).
  // Otherwise the vocabulary is every label seen, sorted.
  std::optional<std::vector<std::string>> label_vocabulary;
  // Skip the existence check on signal files.
  bool lazy = false;
};

CorpusManifest load_manifest(const std::filesystem::path& path,
                             const ManifestOptions& options = {});
void save_manifest(const std::filesystem::path& path,
                   const CorpusManifest& manifest);

// Reads the signal referenced by `entry`, resolving relative paths against
// the manifest directory.
ECGRecord load_record(const CorpusManifest& manifest, const ManifestEntry& entry,
                      int default_sampling_rate_hz = 500);

// ---------------------------------------------------------------------------
// Synthetic corpora

struct SyntheticCorpusSpec {
  int num_pairs = 2000;
  int num_classes = 4;
  int num_leads = 12;
  int num_samples = 250;
  int sampling_rate_hz = 100;
  double noise_std = 0.25;
  std::uint64_t seed = 0;
  // Probability that a record carries a second, distinct class.
  double multilabel_prob = 0.0;
  // Per-record nuisance variation that carries no label information:
  // log-normal amplitude scale, relative rate change, carrier phase shift
  // (uniform in +-phase_jitter radians) and a slow baseline wander whose
  // amplitude is uniform in [0, wander_amplitude].
  double amplitude_log_std = 0.35;
  double rate_jitter = 0.05;
  double phase_jitter = 3.14159265358979;
  double wander_amplitude = 1.0;

  void validate() const;
};

// Tokens the generator uses to describe class k in reports.
struct SyntheticClassTokens {
  std::string name;
  std::string subtype;
  std::string attribute;
};
SyntheticClassTokens synthetic_class_tokens(int k);

struct SyntheticVariation {
  double amplitude = 1.0;
  double rate_scale = 1.0;
  double phase_shift = 0.0;
};

// Noise-free waveform for a set of classes.
Matrix<float> synthetic_waveform(const SyntheticCorpusSpec& spec,
                                 const std::vector<int>& classes,
                                 const SyntheticVariation& variation = {});

struct SyntheticCorpus {
  CorpusManifest manifest;
  std::vector<ECGReportPair> pairs;  // aligned with manifest.entries
};

SyntheticCorpus generate_synthetic_corpus(const SyntheticCorpusSpec& spec);

// Writes signals under `dir/signals/` and the manifest to `dir/manifest.csv`.
void save_corpus(const std::filesystem::path& dir, SyntheticCorpus& corpus);

struct PlantedViolations {
  std::vector<std::string> nonfinite_records;  // one id per planted value
  std::vector<std::string> bad_report_records;
};

// Injects NaN/Inf values (repairable) and empty/short reports into a corpus.
PlantedViolations plant_violations(std::vector<ECGReportPair>& pairs,
                                   int num_nonfinite_values, int num_bad_reports,
                                   std::uint64_t seed);

// ---------------------------------------------------------------------------
// Splitting

struct SplitRatios {
  double train = 0.7;
  double valid = 0.1;
  double test = 0.2;
};

// Deterministic in (record ids, labels, ratios, seed); row order does not
// matter. Stratified on each record's first label.
CorpusManifest split_by_ratio(const CorpusManifest& manifest, SplitRatios ratios,
                              std::uint64_t seed);

}  // namespace merl
