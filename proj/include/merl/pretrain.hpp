#pragma once

#include "merl/alignment.hpp"
#include "merl/augmentation.hpp"
#include "merl/corpus.hpp"
#include "merl/encoders.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <functional>
#include <span>
#include <vector>

namespace merl {

// What supplies the uni-modal term: two latent dropout views of z_e, two
// input-level augmentations of the raw signal, or nothing (CMA only).
enum class UmaMode { latent_dropout, input_augmentation, none };

std::string_view to_string(UmaMode mode);
UmaMode parse_uma_mode(std::string_view name);

struct PretrainConfig {
  int epochs = 50;
  double learning_rate = 2e-4;
  double weight_decay = 1e-5;
  int batch_size = 512;
  // Scale the learning rate by batch_size / 512 for batches below 512.
  bool lr_batch_scaling = true;
  double temperature = 0.07;
  double dropout = 0.1;
  bool dropout_rescale = false;
  DenominatorVariant variant = DenominatorVariant::standard;
  UmaMode uma_mode = UmaMode::latent_dropout;
  AugmentationSpec augmentation;
  std::uint64_t seed = 0;

  // Optional outputs. Not part of the fingerprinted configuration.
  std::filesystem::path log_path;
  std::filesystem::path checkpoint_path;

  double base_learning_rate() const;
  // Cosine-annealed learning rate for a 0-based epoch.
  double learning_rate_at(int epoch) const;
  void validate() const;
  nlohmann::json to_json() const;
  static PretrainConfig from_json(const nlohmann::json& j);
};

struct BatchLoss {
  double cma = 0;
  double uma = 0;
};

// Forward and backward pass of L_CMA + L_UMA on one batch. Parameter
// gradients are zeroed first and left in the model (token gradients in the
// text encoder); they are not computed when the loss is not finite.
// `step_index` selects the dropout / augmentation draws.
template <typename Scalar>
BatchLoss pretrain_objective(MerlModel<Scalar>& model, std::span<const ECGReportPair* const> batch,
                             const PretrainConfig& config, long step_index);

extern template BatchLoss pretrain_objective(MerlModel<float>&, std::span<const ECGReportPair* const>,
                                             const PretrainConfig&, long);
extern template BatchLoss pretrain_objective(MerlModel<double>&, std::span<const ECGReportPair* const>,
                                             const PretrainConfig&, long);

struct EpochRecord {
  int epoch = 0;  // 1-based
  long step = 0;  // optimizer steps taken so far
  LossBreakdown loss;  // means over the epoch's batches
  double lr = 0;

  nlohmann::json to_json() const;
};

struct PretrainResult {
  std::vector<EpochRecord> log;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Trains `model` in place. On a non-finite loss the weights from the start
// of the failing epoch are restored (and checkpointed if a path is set)
// before a divergence error is thrown.
PretrainResult pretrain(Model& model, std::span<const ECGReportPair> corpus,
                        const PretrainConfig& config, const EpochCallback& on_epoch = {});

}  // namespace merl
