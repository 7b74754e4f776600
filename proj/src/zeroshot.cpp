#include "merl/zeroshot.hpp"

#include "merl/text.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

namespace merl {

using nlohmann::json;

std::string_view to_string(PromptStyle style) {
  switch (style) {
    case PromptStyle::name_only: return "name_only";
    case PromptStyle::fixed_template: return "template";
    case PromptStyle::ckepe: return "ckepe";
  }
  return "";
}

PromptStyle parse_prompt_style(std::string_view name) {
  for (auto s : {PromptStyle::name_only, PromptStyle::fixed_template, PromptStyle::ckepe}) {
    if (to_string(s) == name) return s;
  }
  throw Error(ErrorCode::configuration, "unknown prompt style '" + std::string(name) + "'");
}

std::vector<std::string> ClassPromptSet::class_names() const {
  std::vector<std::string> names;
  names.reserve(entries.size());
  for (const auto& e : entries) names.push_back(e.class_name);
  return names;
}

void ClassPromptSet::validate(const std::vector<std::string>* vocabulary) const {
  std::set<std::string> seen;
  for (const auto& e : entries) {
    if (!seen.insert(e.class_name).second) {
      throw Error(ErrorCode::invalid_argument, "duplicate prompt for class '" + e.class_name + "'");
    }
  }
  if (vocabulary && class_names() != *vocabulary) {
    throw Error(ErrorCode::vocabulary, "prompt classes do not match the task label vocabulary order");
  }
}

ClassPromptSet load_prompt_file(const std::filesystem::path& path, PromptStyle style) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open prompt file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse, path.string() + ": " + e.what());
  }
  if (!doc.is_array()) throw Error(ErrorCode::parse, path.string() + ": expected a JSON array");
  ClassPromptSet set;
  set.style = style;
  for (const auto& item : doc) {
    ClassPrompt p;
    try {
      p.class_name = item.at("class_name").get<std::string>();
      p.prompt_text = item.at("prompt_text").get<std::string>();
      p.subtypes = item.value("subtypes", std::vector<std::string>{});
      p.attributes = item.value("attributes", std::vector<std::string>{});
      if (item.contains("provenance")) {
        p.kb_hits = item.at("provenance").value("kb_hits", std::vector<std::string>{});
      }
    } catch (const json::exception& e) {
      throw Error(ErrorCode::parse, path.string() + ": " + e.what());
    }
    set.entries.push_back(std::move(p));
  }
  set.validate();
  return set;
}

void save_prompt_file(const std::filesystem::path& path, const ClassPromptSet& prompts) {
  json doc = json::array();
  for (const auto& p : prompts.entries) {
    doc.push_back({{"class_name", p.class_name},
                   {"prompt_text", p.prompt_text},
                   {"subtypes", p.subtypes},
                   {"attributes", p.attributes},
                   {"provenance", {{"kb_hits", p.kb_hits}}}});
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::io, "cannot write prompt file " + path.string());
  out << doc.dump(2) << '\n';
}

template <typename Scalar>
Matrix<Scalar> embed_class_prompts(const ClassPromptSet& prompts, MerlModel<Scalar>& model) {
  std::vector<std::string> texts;
  for (const auto& p : prompts.entries) {
    if (tokenize(p.prompt_text).empty()) {
      throw Error(ErrorCode::empty_prompt, "prompt for class '" + p.class_name + "' is empty");
    }
    texts.push_back(p.prompt_text);
  }
  return model.text_projector().forward(model.text().forward(texts), nn::Mode::eval);
}

template <typename Scalar>
Matrix<Scalar> zero_shot_scores(const Matrix<Scalar>& projected_ecg,
                                const Matrix<Scalar>& prompt_embeddings) {
  if (projected_ecg.cols() != prompt_embeddings.cols()) {
    throw Error(ErrorCode::dimension_mismatch,
                "ECG embeddings are " + std::to_string(projected_ecg.cols()) +
                    "-d, prompt embeddings are " + std::to_string(prompt_embeddings.cols()) + "-d");
  }
  return projected_ecg * prompt_embeddings.transpose();
}

template <typename Scalar>
Matrix<Scalar> zero_shot_scores(std::span<const ECGRecord> records,
                                const Matrix<Scalar>& prompt_embeddings, MerlModel<Scalar>& model) {
  constexpr std::size_t chunk = 256;
  Matrix<Scalar> scores(static_cast<Index>(records.size()), prompt_embeddings.rows());
  for (std::size_t start = 0; start < records.size(); start += chunk) {
    const auto part = records.subspan(start, std::min(chunk, records.size() - start));
    const Matrix<Scalar> z = encode_ecg_batch(part, model);
    scores.middleRows(static_cast<Index>(start), static_cast<Index>(part.size())) =
        zero_shot_scores(project_and_normalize(z, Modality::ecg, model), prompt_embeddings);
  }
  return scores;
}

Index AucResult::defined_count() const {
  return static_cast<Index>(std::count_if(per_class.begin(), per_class.end(),
                                          [](const auto& v) { return v.has_value(); }));
}

AucResult macro_auc(const Matrix<double>& scores, const Matrix<double>& labels) {
  if (scores.rows() != labels.rows() || scores.cols() != labels.cols()) {
    throw Error(ErrorCode::dimension_mismatch, "scores and labels differ in shape");
  }
  if (!((labels.array() == 0.0) || (labels.array() == 1.0)).all()) {
    throw Error(ErrorCode::invalid_argument, "labels must be 0 or 1");
  }
  if (!scores.allFinite()) throw Error(ErrorCode::numeric, "scores contain non-finite values");
  const Index n = scores.rows();
  AucResult result;
  std::vector<Index> order(static_cast<std::size_t>(n));
  double sum = 0;
  for (Index c = 0; c < scores.cols(); ++c) {
    const double positives = labels.col(c).sum();
    const double negatives = static_cast<double>(n) - positives;
    if (positives == 0 || negatives == 0) {
      result.per_class.emplace_back();
      continue;
    }
    std::iota(order.begin(), order.end(), Index{0});
    std::sort(order.begin(), order.end(),
              [&](Index a, Index b) { return scores(a, c) < scores(b, c); });
    // Mann-Whitney U with mid-ranks for ties.
    double positive_rank_sum = 0;
    for (std::size_t i = 0; i < order.size();) {
      std::size_t j = i;
      while (j < order.size() && scores(order[j], c) == scores(order[i], c)) ++j;
      const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);
      for (std::size_t k = i; k < j; ++k) positive_rank_sum += labels(order[k], c) * mid_rank;
      i = j;
    }
    const double u = positive_rank_sum - positives * (positives + 1) / 2;
    const double auc = u / (positives * negatives);
    result.per_class.emplace_back(auc);
    sum += auc;
  }
  const Index defined = result.defined_count();
  if (defined == 0) {
    throw Error(ErrorCode::undefined_metric,
                "macro AUC is undefined: every class lacks positives or negatives");
  }
  result.macro = sum / static_cast<double>(defined);
  return result;
}

void write_scores_csv(const std::filesystem::path& path, const Matrix<double>& scores,
                      const std::vector<std::string>& class_names,
                      const std::vector<std::string>& record_ids) {
  if (static_cast<Index>(class_names.size()) != scores.cols() ||
      static_cast<Index>(record_ids.size()) != scores.rows()) {
    throw Error(ErrorCode::dimension_mismatch, "score matrix does not match its row/column names");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
  out << "record_id";
  for (const auto& c : class_names) out << ',' << c;
  out << '\n';
  out.precision(9);
  for (Index i = 0; i < scores.rows(); ++i) {
    out << record_ids[static_cast<std::size_t>(i)];
    for (Index c = 0; c < scores.cols(); ++c) out << ',' << scores(i, c);
    out << '\n';
  }
}

template Matrix<float> embed_class_prompts(const ClassPromptSet&, MerlModel<float>&);
template Matrix<double> embed_class_prompts(const ClassPromptSet&, MerlModel<double>&);
template Matrix<float> zero_shot_scores(const Matrix<float>&, const Matrix<float>&);
template Matrix<double> zero_shot_scores(const Matrix<double>&, const Matrix<double>&);
template Matrix<float> zero_shot_scores(std::span<const ECGRecord>, const Matrix<float>&, MerlModel<float>&);
template Matrix<double> zero_shot_scores(std::span<const ECGRecord>, const Matrix<double>&, MerlModel<double>&);

}  // namespace merl
