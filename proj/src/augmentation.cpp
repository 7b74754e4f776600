#include "merl/augmentation.hpp"

#include <nlohmann/json.hpp>

namespace merl {

std::string_view to_string(AugmentationKind kind) {
  switch (kind) {
    case AugmentationKind::cutout: return "cutout";
    case AugmentationKind::drop: return "drop";
    case AugmentationKind::gaussian_noise: return "gaussian_noise";
  }
  return "";
}

AugmentationKind parse_augmentation_kind(std::string_view name) {
  for (auto k : {AugmentationKind::cutout, AugmentationKind::drop, AugmentationKind::gaussian_noise}) {
    if (to_string(k) == name) return k;
  }
  throw Error(ErrorCode::configuration, "unknown augmentation '" + std::string(name) + "'");
}

void AugmentationSpec::validate() const {
  if (!(segment_fraction > 0 && segment_fraction < 1)) {
    throw Error(ErrorCode::configuration, "cutout segment_fraction must lie in (0, 1)");
  }
  if (!(point_fraction > 0 && point_fraction < 1)) {
    throw Error(ErrorCode::configuration, "drop point_fraction must lie in (0, 1)");
  }
  if (!(sigma >= 0)) throw Error(ErrorCode::configuration, "gaussian_noise sigma must be >= 0");
}

nlohmann::json AugmentationSpec::to_json() const {
  return {{"kind", std::string(to_string(kind))},
          {"segment_fraction", segment_fraction},
          {"point_fraction", point_fraction},
          {"sigma", sigma},
          {"seed", seed}};
}

AugmentationSpec AugmentationSpec::from_json(const nlohmann::json& j) {
  AugmentationSpec s;
  s.kind = parse_augmentation_kind(j.at("kind").get<std::string>());
  s.segment_fraction = j.at("segment_fraction").get<double>();
  s.point_fraction = j.at("point_fraction").get<double>();
  s.sigma = j.at("sigma").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

}  // namespace merl
