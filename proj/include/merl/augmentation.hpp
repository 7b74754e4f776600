#pragma once

// Input-level ECG augmentations. Signals are leads x samples; every op
// returns a new signal of the same shape.

#include "merl/common.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace merl {

enum class AugmentationKind { cutout, drop, gaussian_noise };

std::string_view to_string(AugmentationKind kind);
AugmentationKind parse_augmentation_kind(std::string_view name);

struct AugmentationSpec {
  AugmentationKind kind = AugmentationKind::cutout;
  double segment_fraction = 0.1;  // cutout
  double point_fraction = 0.1;    // drop
  double sigma = 0.05;            // gaussian_noise, in units of each lead's std
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static AugmentationSpec from_json(const nlohmann::json& j);
};

namespace detail {

inline Index augmentation_count(Index num_samples, double fraction, const char* op) {
  if (!(fraction > 0) || !(fraction < 1)) {
    throw Error(ErrorCode::invalid_argument, std::string(op) + ": fraction must lie in (0, 1)");
  }
  const auto count = static_cast<Index>(std::floor(fraction * static_cast<double>(num_samples)));
  if (count < 1) {
    throw Error(ErrorCode::invalid_argument,
                std::string(op) + ": fraction " + std::to_string(fraction) + " of " +
                    std::to_string(num_samples) + " samples selects nothing");
  }
  return count;
}

}  // namespace detail

// Zeroes one contiguous window of floor(fraction * samples) per lead.
template <typename Scalar>
Matrix<Scalar> cutout(const Matrix<Scalar>& signal, double segment_fraction, std::uint64_t seed) {
  const Index n = signal.cols();
  const Index width = detail::augmentation_count(n, segment_fraction, "cutout");
  std::mt19937_64 rng(derive_seed(seed, fnv1a64("cutout")));
  std::uniform_int_distribution<Index> start(0, n - width);
  Matrix<Scalar> out = signal;
  for (Index lead = 0; lead < signal.rows(); ++lead) {
    out.row(lead).segment(start(rng), width).setZero();
  }
  return out;
}

// Zeroes floor(fraction * samples) distinct, uniformly chosen samples per lead.
template <typename Scalar>
Matrix<Scalar> random_drop(const Matrix<Scalar>& signal, double point_fraction, std::uint64_t seed) {
  const Index n = signal.cols();
  const Index count = detail::augmentation_count(n, point_fraction, "random_drop");
  std::mt19937_64 rng(derive_seed(seed, fnv1a64("random_drop")));
  Matrix<Scalar> out = signal;
  std::vector<Index> idx(static_cast<std::size_t>(n));
  for (Index lead = 0; lead < signal.rows(); ++lead) {
    std::iota(idx.begin(), idx.end(), Index{0});
    // Partial Fisher-Yates: the first `count` slots are a uniform sample.
    for (Index k = 0; k < count; ++k) {
      std::uniform_int_distribution<Index> pick(k, n - 1);
      std::swap(idx[static_cast<std::size_t>(k)], idx[static_cast<std::size_t>(pick(rng))]);
      out(lead, idx[static_cast<std::size_t>(k)]) = Scalar(0);
    }
  }
  return out;
}

// Adds N(0, (sigma * std(lead))^2) noise independently to every sample.
template <typename Scalar>
Matrix<Scalar> gaussian_noise(const Matrix<Scalar>& signal, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0)) throw Error(ErrorCode::invalid_argument, "gaussian_noise: sigma must be >= 0");
  Matrix<Scalar> out = signal;
  if (sigma == 0) return out;
  std::mt19937_64 rng(derive_seed(seed, fnv1a64("gaussian_noise")));
  for (Index lead = 0; lead < signal.rows(); ++lead) {
    const auto row = signal.row(lead).template cast<double>();
    const double mean = row.mean();
    const double sd = std::sqrt((row.array() - mean).square().mean());
    std::normal_distribution<double> noise(0.0, sigma * sd);
    for (Index t = 0; t < signal.cols(); ++t) out(lead, t) += static_cast<Scalar>(noise(rng));
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> augment(const Matrix<Scalar>& signal, const AugmentationSpec& spec, std::uint64_t seed) {
  switch (spec.kind) {
    case AugmentationKind::cutout: return cutout(signal, spec.segment_fraction, seed);
    case AugmentationKind::drop: return random_drop(signal, spec.point_fraction, seed);
    case AugmentationKind::gaussian_noise: return gaussian_noise(signal, spec.sigma, seed);
  }
  return signal;
}

}  // namespace merl
