#pragma once

#include "merl/common.hpp"
#include "merl/encoders.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace merl {

// name_only: the bare condition name. template: a fixed sentence around the
// name. ckepe: the structured knowledge-enhanced prompt.
enum class PromptStyle { name_only, fixed_template, ckepe };

std::string_view to_string(PromptStyle style);
PromptStyle parse_prompt_style(std::string_view name);

struct ClassPrompt {
  std::string class_name;
  std::string prompt_text;
  std::vector<std::string> subtypes;
  std::vector<std::string> attributes;
  std::vector<std::string> kb_hits;
};

struct ClassPromptSet {
  std::vector<ClassPrompt> entries;
  PromptStyle style = PromptStyle::ckepe;

  std::vector<std::string> class_names() const;
  // Class names must be unique; if `vocabulary` is given they must match it
  // in order.
  void validate(const std::vector<std::string>* vocabulary = nullptr) const;
};

// Prompt file: JSON array of {class_name, prompt_text, subtypes, attributes,
// provenance: {kb_hits}}.
ClassPromptSet load_prompt_file(const std::filesystem::path& path,
                                PromptStyle style = PromptStyle::ckepe);
void save_prompt_file(const std::filesystem::path& path, const ClassPromptSet& prompts);

// Encodes and projects every prompt to a unit-norm row (N_classes x d).
template <typename Scalar>
Matrix<Scalar> embed_class_prompts(const ClassPromptSet& prompts, MerlModel<Scalar>& model);

// score(i, c) = <E_i, P_c> for projected, unit-norm rows; no normalization
// across classes.
template <typename Scalar>
Matrix<Scalar> zero_shot_scores(const Matrix<Scalar>& projected_ecg,
                                const Matrix<Scalar>& prompt_embeddings);

// Encodes the records in evaluation mode, in chunks, and scores them.
template <typename Scalar>
Matrix<Scalar> zero_shot_scores(std::span<const ECGRecord> records,
                                const Matrix<Scalar>& prompt_embeddings, MerlModel<Scalar>& model);

struct AucResult {
  double macro = 0;
  // Empty for classes with no positives or no negatives.
  std::vector<std::optional<double>> per_class;

  Index defined_count() const;
};

// One-vs-rest ROC AUC per column with ties counted as half, averaged over
// the classes where it is defined.
AucResult macro_auc(const Matrix<double>& scores, const Matrix<double>& labels);

template <typename Scalar>
AucResult macro_auc(const Matrix<Scalar>& scores, const Matrix<double>& labels) {
  return macro_auc(Matrix<double>(scores.template cast<double>()), labels);
}

// CSV with header "record_id,<class names...>".
void write_scores_csv(const std::filesystem::path& path, const Matrix<double>& scores,
                      const std::vector<std::string>& class_names,
                      const std::vector<std::string>& record_ids);

}  // namespace merl
