#include "merl/pretrain.hpp"
#include "merl/zeroshot.hpp"
#include "reference.hpp"
#include "test_util.hpp"

#include <fstream>

using namespace merl;
using merl::test::error_code_of;
using merl::test::naive_auc;
using merl::test::random_matrix;
using merl::test::random_unit_rows;

namespace {

Matrix<double> random_labels(Index n, Index c, double p, std::mt19937_64& rng) {
  std::bernoulli_distribution b(p);
  Matrix<double> y(n, c);
  for (Index k = 0; k < y.size(); ++k) y.data()[k] = b(rng) ? 1.0 : 0.0;
  return y;
}

ClassPromptSet prompts_for(const std::vector<std::string>& texts) {
  ClassPromptSet set;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    set.entries.push_back({"class" + std::to_string(i), texts[i], {}, {}, {}});
  }
  return set;
}

EncoderConfig small_encoder() {
  EncoderConfig cfg;
  cfg.input_leads = 3;
  cfg.input_samples = 64;
  cfg.resnet_width = 4;
  cfg.text_embed_dim = 16;
  cfg.shared_dim = 8;
  cfg.projector_hidden = 12;
  return cfg;
}

}  // namespace

TEST_CASE("macro auc examples") {
  Eigen::VectorXd y(4), s(4);
  y << 1, 0, 1, 0;
  s << 0.9, 0.8, 0.7, 0.1;
  CHECK(macro_auc(Matrix<double>(s), Matrix<double>(y)).macro == doctest::Approx(0.75));

  std::mt19937_64 rng(1);
  const Matrix<double> labels = random_labels(30, 4, 0.4, rng);
  CHECK(macro_auc(labels, labels).macro == 1.0);
  const auto flat = macro_auc(Matrix<double>(Matrix<double>::Constant(30, 4, 0.2)), labels);
  for (const auto& a : flat.per_class) CHECK(*a == 0.5);
}

TEST_CASE("macro auc matches pairwise counting") {
  std::mt19937_64 rng(2);
  for (Index n : {5, 50, 400, 2000}) {
    Matrix<double> scores = random_matrix(n, 3, rng);
    // Coarse rounding forces ties.
    scores.col(1) = (scores.col(1) * 2).array().round().matrix();
    const Matrix<double> labels = random_labels(n, 3, 0.3, rng);
    const auto got = macro_auc(scores, labels);
    double sum = 0;
    int defined = 0;
    for (Index c = 0; c < 3; ++c) {
      const auto want = naive_auc(scores.col(c), labels.col(c));
      REQUIRE(got.per_class[static_cast<std::size_t>(c)].has_value() == want.has_value());
      if (!want) continue;
      CHECK(std::abs(*got.per_class[static_cast<std::size_t>(c)] - *want) < 1e-9);
      sum += *want;
      ++defined;
    }
    CHECK(std::abs(got.macro - sum / defined) < 1e-9);
  }
}

TEST_CASE("macro auc rank properties") {
  std::mt19937_64 rng(3);
  const Matrix<double> scores = random_matrix(200, 4, rng);
  const Matrix<double> labels = random_labels(200, 4, 0.25, rng);
  const auto base = macro_auc(scores, labels);

  const Matrix<double> monotone = (scores.array() * 3.0).exp().matrix();
  CHECK(std::abs(macro_auc(monotone, labels).macro - base.macro) < 1e-12);

  const Matrix<double> flipped = (1.0 - labels.array()).matrix();
  const auto comp = macro_auc(Matrix<double>(-scores), flipped);
  for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(*comp.per_class[c] - *base.per_class[c]) < 1e-12);
}

TEST_CASE("classes without both outcomes are excluded") {
  Matrix<double> labels(4, 3);
  labels << 1, 0, 1,
            0, 0, 1,
            1, 0, 1,
            0, 0, 1;
  Matrix<double> scores(4, 3);
  scores << 0.9, 0.1, 0.2,
            0.1, 0.2, 0.3,
            0.8, 0.3, 0.4,
            0.2, 0.4, 0.5;
  const auto r = macro_auc(scores, labels);
  CHECK(r.defined_count() == 1);
  CHECK(!r.per_class[1].has_value());
  CHECK(!r.per_class[2].has_value());
  CHECK(r.macro == 1.0);

  labels.col(0).setZero();
  CHECK(error_code_of([&] { macro_auc(scores, labels); }) == ErrorCode::undefined_metric);
  CHECK(error_code_of([&] { macro_auc(scores, Matrix<double>(labels.leftCols(2))); }) ==
        ErrorCode::dimension_mismatch);
}

TEST_CASE("zero-shot scores are cosine similarities") {
  std::mt19937_64 rng(4);
  const Matrix<double> E = random_unit_rows(6, 8, rng);
  Matrix<double> P = random_unit_rows(3, 8, rng);
  P.row(1) = E.row(4);
  const auto S = zero_shot_scores(E, P);
  CHECK(S.rows() == 6);
  CHECK(S.cols() == 3);
  CHECK(S(4, 1) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(S.cwiseAbs().maxCoeff() <= 1 + 1e-12);

  const Matrix<double> Pswap = (Matrix<double>(3, 8) << P.row(2), P.row(0), P.row(1)).finished();
  const auto T = zero_shot_scores(E, Pswap);
  CHECK((T.col(0) - S.col(2)).cwiseAbs().maxCoeff() == 0);
  CHECK((T.col(2) - S.col(1)).cwiseAbs().maxCoeff() == 0);

  CHECK(error_code_of([&] { zero_shot_scores(E, Matrix<double>(random_unit_rows(3, 7, rng))); }) ==
        ErrorCode::dimension_mismatch);
}

TEST_CASE("prompt embeddings") {
  MerlModel<double> model(small_encoder());
  const auto set = prompts_for({"sinus rhythm", "atrial fibrillation", "sinus rhythm", "st elevation",
                                "wide qrs complex"});
  const auto P = embed_class_prompts(set, model);
  CHECK(P.rows() == 5);
  CHECK(P.cols() == 8);
  CHECK((P.rowwise().norm().array() - 1).abs().maxCoeff() < 1e-6);
  CHECK((P.row(0) - P.row(2)).norm() == 0);

  const auto reversed = prompts_for({"wide qrs complex", "st elevation", "sinus rhythm", "atrial fibrillation",
                                     "sinus rhythm"});
  const auto Q = embed_class_prompts(reversed, model);
  for (Index i = 0; i < 5; ++i) CHECK((Q.row(i) - P.row(4 - i)).norm() < 1e-12);

  auto empty = set;
  empty.entries[3].prompt_text = "  ";
  try {
    embed_class_prompts(empty, model);
    FAIL("expected an empty prompt error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::empty_prompt);
    CHECK(std::string(e.what()).find("class3") != std::string::npos);
  }
}

TEST_CASE("prompt sets validate names and vocabulary order") {
  auto set = prompts_for({"a b", "c d"});
  const std::vector<std::string> vocab{"class0", "class1"};
  set.validate(&vocab);
  const std::vector<std::string> swapped{"class1", "class0"};
  CHECK(error_code_of([&] { set.validate(&swapped); }) == ErrorCode::vocabulary);
  set.entries[1].class_name = "class0";
  CHECK(error_code_of([&] { set.validate(); }).has_value());
}

TEST_CASE("prompt files round-trip") {
  ClassPromptSet set;
  set.entries.push_back({"AFIB", "Atrial fibrillation: irregular rhythm.", {"paroxysmal"}, {"absent p waves"},
                         {"absent p waves"}});
  set.entries.push_back({"NORM", "Normal ECG.", {}, {}, {}});
  const auto dir = test::scratch_dir("zeroshot_prompts");
  save_prompt_file(dir / "p.json", set);
  const auto back = load_prompt_file(dir / "p.json");
  REQUIRE(back.entries.size() == 2);
  CHECK(back.entries[0].class_name == "AFIB");
  CHECK(back.entries[0].prompt_text == set.entries[0].prompt_text);
  CHECK(back.entries[0].subtypes == set.entries[0].subtypes);
  CHECK(back.entries[0].attributes == set.entries[0].attributes);
  CHECK(back.entries[0].kb_hits == set.entries[0].kb_hits);

  std::ofstream(dir / "bad.json") << "{\"not\": \"an array\"}";
  CHECK(error_code_of([&] { load_prompt_file(dir / "bad.json"); }) == ErrorCode::parse);
}

TEST_CASE("scores csv has a class-name header") {
  const auto dir = test::scratch_dir("zeroshot_csv");
  Matrix<double> s(2, 2);
  s << 0.5, -0.25, 0.125, 1;
  write_scores_csv(dir / "s.csv", s, {"A", "B"}, {"r1", "r2"});
  std::ifstream in(dir / "s.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "record_id,A,B");
  CHECK(row.rfind("r1,0.5,-0.25", 0) == 0);
}

TEST_CASE("a pretrained synthetic model ranks the true class highest") {
  SyntheticCorpusSpec spec;
  spec.num_pairs = 400;
  spec.num_classes = 4;
  spec.seed = 8;
  const auto corpus = generate_synthetic_corpus(spec);
  const std::span<const ECGReportPair> train(corpus.pairs.data(), 320);

  EncoderConfig ec;
  ec.input_samples = spec.num_samples;
  ec.resnet_width = 16;
  Model model(ec);
  PretrainConfig pc;
  pc.epochs = 10;
  pc.learning_rate = 1e-3;
  pc.batch_size = 64;
  pc.lr_batch_scaling = false;
  pretrain(model, train, pc);

  ClassPromptSet prompts;
  for (int k = 0; k < 4; ++k) {
    const auto t = synthetic_class_tokens(k);
    prompts.entries.push_back({corpus.manifest.label_vocabulary[static_cast<std::size_t>(k)],
                               t.name + " " + t.subtype + " " + t.attribute, {}, {}, {}});
  }
  const auto P = embed_class_prompts(prompts, model);
  std::vector<ECGRecord> held;
  Matrix<double> labels = Matrix<double>::Zero(80, 4);
  for (Index i = 0; i < 80; ++i) {
    const auto& entry = corpus.manifest.entries[static_cast<std::size_t>(320 + i)];
    held.push_back(corpus.pairs[static_cast<std::size_t>(320 + i)].ecg);
    for (const auto& l : entry.labels) {
      const auto& v = corpus.manifest.label_vocabulary;
      labels(i, std::find(v.begin(), v.end(), l) - v.begin()) = 1;
    }
  }
  const Matrix<double> S = zero_shot_scores<float>(held, P, model).cast<double>();
  const double true_mean = (S.array() * labels.array()).sum() / labels.sum();
  const double false_mean = (S.array() * (1 - labels.array())).sum() / (labels.size() - labels.sum());
  INFO("true " << true_mean << ", false " << false_mean);
  CHECK(true_mean > false_mean);
  CHECK(macro_auc(S, labels).macro > 0.5);
}
