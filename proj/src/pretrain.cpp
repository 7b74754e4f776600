#include "merl/pretrain.hpp"

#include "merl/optim.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace merl {

using nlohmann::json;

std::string_view to_string(DenominatorVariant variant) {
  return variant == DenominatorVariant::standard ? "standard" : "decoupled";
}

DenominatorVariant parse_denominator_variant(std::string_view name) {
  if (name == "standard") return DenominatorVariant::standard;
  if (name == "decoupled") return DenominatorVariant::decoupled;
  throw Error(ErrorCode::configuration, "unknown denominator variant '" + std::string(name) + "'");
}

std::string_view to_string(UmaMode mode) {
  switch (mode) {
    case UmaMode::latent_dropout: return "latent_dropout";
    case UmaMode::input_augmentation: return "input_augmentation";
    case UmaMode::none: return "none";
  }
  return "";
}

UmaMode parse_uma_mode(std::string_view name) {
  for (auto m : {UmaMode::latent_dropout, UmaMode::input_augmentation, UmaMode::none}) {
    if (to_string(m) == name) return m;
  }
  throw Error(ErrorCode::configuration, "unknown uma_mode '" + std::string(name) + "'");
}

double PretrainConfig::base_learning_rate() const {
  if (lr_batch_scaling && batch_size < 512) return learning_rate * batch_size / 512.0;
  return learning_rate;
}

double PretrainConfig::learning_rate_at(int epoch) const {
  const double pi = std::acos(-1.0);
  return base_learning_rate() * 0.5 * (1.0 + std::cos(pi * epoch / epochs));
}

void PretrainConfig::validate() const {
  if (epochs <= 0) throw Error(ErrorCode::configuration, "epochs must be positive");
  if (!(learning_rate > 0)) throw Error(ErrorCode::configuration, "learning_rate must be positive");
  if (!(weight_decay >= 0)) throw Error(ErrorCode::configuration, "weight_decay must be >= 0");
  if (batch_size < 2) throw Error(ErrorCode::configuration, "batch_size must be at least 2");
  if (!(temperature > 0)) throw Error(ErrorCode::configuration, "temperature must be positive");
  if (!(dropout >= 0 && dropout < 1)) throw Error(ErrorCode::configuration, "dropout must lie in [0, 1)");
  augmentation.validate();
}

json PretrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"learning_rate", learning_rate},
          {"weight_decay", weight_decay},
          {"batch_size", batch_size},
          {"lr_batch_scaling", lr_batch_scaling},
          {"temperature", temperature},
          {"dropout", dropout},
          {"dropout_rescale", dropout_rescale},
          {"variant", std::string(to_string(variant))},
          {"uma_mode", std::string(to_string(uma_mode))},
          {"augmentation", augmentation.to_json()},
          {"seed", seed}};
}

PretrainConfig PretrainConfig::from_json(const json& j) {
  PretrainConfig c;
  c.epochs = j.at("epochs").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.lr_batch_scaling = j.at("lr_batch_scaling").get<bool>();
  c.temperature = j.at("temperature").get<double>();
  c.dropout = j.at("dropout").get<double>();
  c.dropout_rescale = j.at("dropout_rescale").get<bool>();
  c.variant = parse_denominator_variant(j.at("variant").get<std::string>());
  c.uma_mode = parse_uma_mode(j.at("uma_mode").get<std::string>());
  c.augmentation = AugmentationSpec::from_json(j.at("augmentation"));
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

json EpochRecord::to_json() const {
  return {{"epoch", epoch}, {"step", step},    {"cma", loss.cma},
          {"uma", loss.uma}, {"total", loss.total}, {"lr", lr}};
}

template <typename Scalar>
BatchLoss pretrain_objective(MerlModel<Scalar>& model, std::span<const ECGReportPair* const> batch,
                             const PretrainConfig& config, long step_index) {
  const auto L = static_cast<Index>(batch.size());
  const auto tau = static_cast<Scalar>(config.temperature);
  model.zero_grad();

  // Clean signals first; in augmentation mode two augmented copies of the
  // batch ride along in the same forward pass.
  std::vector<const ECGRecord*> inputs;
  std::vector<ECGRecord> augmented;
  for (const auto* pair : batch) inputs.push_back(&pair->ecg);
  if (config.uma_mode == UmaMode::input_augmentation) {
    augmented.reserve(2 * batch.size());
    const std::uint64_t base = derive_seed(derive_seed(config.seed, config.augmentation.seed),
                                           static_cast<std::uint64_t>(step_index));
    for (int view = 0; view < 2; ++view) {
      for (std::size_t i = 0; i < batch.size(); ++i) {
        ECGRecord r = batch[i]->ecg;
        r.signal = augment(r.signal, config.augmentation, derive_seed(base, 2 * i + view));
        augmented.push_back(std::move(r));
      }
    }
    for (const auto& r : augmented) inputs.push_back(&r);
  }
  const Matrix<Scalar> z_all = model.ecg().forward(inputs, nn::Mode::train);
  const Matrix<Scalar> z_e = z_all.topRows(L);

  std::vector<std::string> texts;
  texts.reserve(batch.size());
  for (const auto* pair : batch) texts.push_back(pair->report.text);
  const Matrix<Scalar> z_t = model.text().forward(texts);

  const Matrix<Scalar> E = model.ecg_projector().forward(z_e, nn::Mode::train);
  const Matrix<Scalar> R = model.text_projector().forward(z_t, nn::Mode::train);
  const auto S = similarity_matrix(E, R, tau);
  const auto cma = cma_loss_with_grad(S, config.variant);

  Matrix<Scalar> dz_all = Matrix<Scalar>::Zero(z_all.rows(), z_all.cols());
  BatchLoss out{static_cast<double>(cma.loss), 0.0};
  if (config.uma_mode == UmaMode::latent_dropout) {
    const auto views = latent_dropout_views(
        z_e, static_cast<Scalar>(config.dropout),
        derive_seed(derive_seed(config.seed, fnv1a64("uma")), static_cast<std::uint64_t>(step_index)),
        config.dropout_rescale);
    const auto uma = uma_loss_with_grad(views, tau, config.variant);
    out.uma = static_cast<double>(uma.loss);
    dz_all.topRows(L) += uma.grad;
  } else if (config.uma_mode == UmaMode::input_augmentation) {
    const auto uma = view_contrast_with_grad<Scalar>(z_all.middleRows(L, L), z_all.bottomRows(L),
                                                     tau, config.variant);
    out.uma = static_cast<double>(uma.loss);
    dz_all.middleRows(L, L) = uma.grad1;
    dz_all.bottomRows(L) = uma.grad2;
  }
  if (!std::isfinite(out.cma) || !std::isfinite(out.uma)) return out;

  dz_all.topRows(L) += model.ecg_projector().backward(cma.grad * R);
  model.ecg().backward(dz_all);
  model.text().backward(model.text_projector().backward(cma.grad.transpose() * E));
  return out;
}

template BatchLoss pretrain_objective(MerlModel<float>&, std::span<const ECGReportPair* const>,
                                      const PretrainConfig&, long);
template BatchLoss pretrain_objective(MerlModel<double>&, std::span<const ECGReportPair* const>,
                                      const PretrainConfig&, long);

namespace {

struct Snapshot {
  std::vector<Matrix<float>> params;
  std::map<std::string, TextEncoder<float>::TokenState> tokens;

  static Snapshot take(Model& model) {
    Snapshot s;
    for (const auto& p : model.parameters()) s.params.push_back(*p.value);
    s.tokens = model.text().learned_tokens();
    return s;
  }

  void restore(Model& model) const {
    auto params_now = model.parameters();
    for (std::size_t i = 0; i < params_now.size(); ++i) *params_now[i].value = params[i];
    model.text().learned_tokens() = tokens;
  }
};

class Trainer {
 public:
  Trainer(Model& model, const PretrainConfig& config)
      : model_(model), config_(config), optimizer_({0.9, 0.999, 1e-8, config.weight_decay}) {}

  BatchLoss step(std::span<const ECGReportPair* const> batch, double lr, long step_index) {
    const BatchLoss out = pretrain_objective(model_, batch, config_, step_index);
    if (!std::isfinite(out.cma) || !std::isfinite(out.uma)) return out;
    auto params = model_.parameters();
    optimizer_.step(params, lr);
    optimizer_.step_tokens(model_.text(), lr);
    return out;
  }

 private:
  Model& model_;
  const PretrainConfig& config_;
  AdamW<float> optimizer_;
};

void append_line(const std::filesystem::path& path, const json& record) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error(ErrorCode::io, "cannot append to training log " + path.string());
  out << record.dump() << '\n';
}

json checkpoint_metadata(const PretrainConfig& config, const std::vector<EpochRecord>& log,
                         const char* status) {
  json entries = json::array();
  for (const auto& r : log) entries.push_back(r.to_json());
  return {{"pretrain", config.to_json()}, {"log", entries}, {"status", status}};
}

}  // namespace

PretrainResult pretrain(Model& model, std::span<const ECGReportPair> corpus,
                        const PretrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  const auto n = static_cast<Index>(corpus.size());
  if (config.batch_size > n) {
    throw Error(ErrorCode::configuration, "batch_size " + std::to_string(config.batch_size) +
                                              " exceeds the corpus size " + std::to_string(n));
  }
  if (!config.log_path.empty()) {
    if (config.log_path.has_parent_path()) {
      std::filesystem::create_directories(config.log_path.parent_path());
    }
    std::ofstream truncate(config.log_path, std::ios::trunc);
    if (!truncate) throw Error(ErrorCode::io, "cannot write training log " + config.log_path.string());
  }

  Trainer trainer(model, config);
  PretrainResult result;
  std::vector<std::size_t> order(corpus.size());
  long step_index = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const Snapshot last_good = Snapshot::take(model);
    const double lr = config.learning_rate_at(epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(derive_seed(config.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    double sum_cma = 0, sum_uma = 0;
    int batches = 0;
    std::vector<const ECGReportPair*> batch;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      // A trailing batch of one has no negatives.
      if (stop - start < 2) break;
      batch.clear();
      for (std::size_t k = start; k < stop; ++k) batch.push_back(&corpus[order[k]]);

      BatchLoss loss;
      bool diverged = false;
      try {
        loss = trainer.step(batch, lr, step_index);
        diverged = !std::isfinite(loss.cma) || !std::isfinite(loss.uma);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::numeric) throw;
        diverged = true;
      }
      if (diverged) {
        last_good.restore(model);
        std::string where = "epoch " + std::to_string(epoch + 1) + ", step " + std::to_string(step_index + 1);
        if (!config.checkpoint_path.empty()) {
          model.save(config.checkpoint_path, checkpoint_metadata(config, result.log, "diverged"));
          where += "; last-good weights saved to " + config.checkpoint_path.string();
        }
        throw Error(ErrorCode::divergence, "non-finite loss at " + where);
      }
      ++step_index;
      ++batches;
      sum_cma += loss.cma;
      sum_uma += loss.uma;
    }

    EpochRecord record;
    record.epoch = epoch + 1;
    record.step = step_index;
    record.loss = total_loss(sum_cma / batches, sum_uma / batches, config.batch_size);
    record.lr = lr;
    result.log.push_back(record);
    if (!config.log_path.empty()) append_line(config.log_path, record.to_json());
    if (on_epoch) on_epoch(record);
  }
  if (!config.checkpoint_path.empty()) {
    model.save(config.checkpoint_path, checkpoint_metadata(config, result.log, "complete"));
  }
  return result;
}

}  // namespace merl
