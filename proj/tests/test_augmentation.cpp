#include "merl/augmentation.hpp"
#include "test_util.hpp"

#include <nlohmann/json.hpp>

#include <set>

using namespace merl;
using merl::test::error_code_of;
using merl::test::random_matrix;

namespace {

// Nonzero everywhere so zeros can only come from the augmentation.
Matrix<float> positive_signal(Index leads, Index samples, std::mt19937_64& rng) {
  Matrix<float> m = random_matrix<float>(leads, samples, rng);
  return (m.array().abs() + 1.0f).matrix();
}

std::vector<Index> zero_positions(const Matrix<float>& m, Index lead) {
  std::vector<Index> out;
  for (Index t = 0; t < m.cols(); ++t) {
    if (m(lead, t) == 0.0f) out.push_back(t);
  }
  return out;
}

}  // namespace

TEST_CASE("cutout zeroes one contiguous window per lead") {
  std::mt19937_64 rng(1);
  const auto x = positive_signal(12, 5000, rng);
  const auto y = cutout(x, 0.1, 7);
  for (Index lead = 0; lead < 12; ++lead) {
    const auto z = zero_positions(y, lead);
    REQUIRE(z.size() == 500);
    CHECK(z.back() - z.front() == 499);
    bool untouched = true;
    for (Index t = 0; t < 5000; ++t) untouched &= y(lead, t) == 0.0f || y(lead, t) == x(lead, t);
    CHECK(untouched);
  }
  CHECK((cutout(x, 0.1, 7).array() == y.array()).all());
  CHECK((cutout(x, 0.1, 8).array() != y.array()).any());

  const auto one = cutout(x, 1.0 / 5000, 3);
  for (Index lead = 0; lead < 12; ++lead) CHECK(zero_positions(one, lead).size() == 1);
}

TEST_CASE("cutout window start is uniform") {
  // Mean start position over many seeds: (n - w) / 2, checked at 5 sigma.
  std::mt19937_64 rng(2);
  const auto x = positive_signal(1, 100, rng);
  const int trials = 4000;
  double sum = 0;
  for (int s = 0; s < trials; ++s) sum += static_cast<double>(zero_positions(cutout(x, 0.1, s), 0).front());
  const double range = 90;  // starts 0..90
  const double sd = std::sqrt(((range + 1) * (range + 1) - 1) / 12.0);
  CHECK(std::abs(sum / trials - range / 2) < 5 * sd / std::sqrt(trials));
}

TEST_CASE("random drop zeroes distinct samples") {
  std::mt19937_64 rng(3);
  const auto x = positive_signal(12, 5000, rng);
  const auto y = random_drop(x, 0.1, 11);
  for (Index lead = 0; lead < 12; ++lead) {
    const auto z = zero_positions(y, lead);
    CHECK(z.size() == 500);
    CHECK(std::set<Index>(z.begin(), z.end()).size() == 500);
  }
  CHECK((random_drop(x, 0.1, 11).array() == y.array()).all());
  // Leads get independent draws.
  CHECK(zero_positions(y, 0) != zero_positions(y, 1));
}

TEST_CASE("random drop indices have the uniform mean") {
  // Each dropped index is marginally uniform on [0, n), so the mean of k
  // indices has variance (n^2 - 1)/12 / k times the finite-population factor.
  std::mt19937_64 rng(4);
  const Index n = 1000;
  const auto x = positive_signal(1, n, rng);
  const int seeds = 300;
  const Index k = 100;
  double sum = 0;
  for (int s = 0; s < seeds; ++s) {
    for (Index t : zero_positions(random_drop(x, 0.1, s), 0)) sum += static_cast<double>(t);
  }
  const double mean = sum / (seeds * k);
  const double var_one = (static_cast<double>(n) * n - 1) / 12.0;
  const double fpc = static_cast<double>(n - k) / static_cast<double>(n - 1);
  const double se = std::sqrt(var_one / k * fpc / seeds);
  CHECK(std::abs(mean - (n - 1) / 2.0) < 5 * se);
}

TEST_CASE("gaussian noise scales with each lead's spread") {
  std::mt19937_64 rng(5);
  Matrix<float> x = random_matrix<float>(3, 5000, rng);
  x.row(1) *= 10.0f;
  x.row(2) *= 0.1f;
  CHECK((gaussian_noise(x, 0.0, 1).array() == x.array()).all());
  const auto y = gaussian_noise(x, 0.05, 1);
  CHECK((gaussian_noise(x, 0.05, 1).array() == y.array()).all());
  for (Index lead = 0; lead < 3; ++lead) {
    const Eigen::ArrayXd in = x.row(lead).cast<double>().transpose().array();
    const Eigen::ArrayXd diff = (y.row(lead) - x.row(lead)).cast<double>().transpose().array();
    const double in_sd = std::sqrt((in - in.mean()).square().mean());
    const double diff_sd = std::sqrt((diff - diff.mean()).square().mean());
    CHECK(std::abs(diff_sd / in_sd - 0.05) < 0.05 * 0.05);
    CHECK(std::abs(diff.mean()) < 5 * 0.05 * in_sd / std::sqrt(5000.0));
  }
}

TEST_CASE("augmentation arguments are validated") {
  std::mt19937_64 rng(6);
  const auto x = positive_signal(2, 100, rng);
  CHECK(error_code_of([&] { cutout(x, 0.0, 1); }) == ErrorCode::invalid_argument);
  CHECK(error_code_of([&] { cutout(x, 1.0, 1); }) == ErrorCode::invalid_argument);
  CHECK(error_code_of([&] { cutout(x, 0.005, 1); }) == ErrorCode::invalid_argument);
  CHECK(error_code_of([&] { random_drop(x, 1.5, 1); }) == ErrorCode::invalid_argument);
  CHECK(error_code_of([&] { gaussian_noise(x, -0.1, 1); }) == ErrorCode::invalid_argument);
}

TEST_CASE("augment dispatches on the spec") {
  std::mt19937_64 rng(7);
  const auto x = positive_signal(2, 200, rng);
  AugmentationSpec spec;
  spec.kind = AugmentationKind::drop;
  spec.point_fraction = 0.2;
  CHECK((augment(x, spec, 4).array() == random_drop(x, 0.2, 4).array()).all());
  spec.kind = AugmentationKind::gaussian_noise;
  spec.sigma = 0.3;
  CHECK((augment(x, spec, 4).array() == gaussian_noise(x, 0.3, 4).array()).all());
  spec.kind = AugmentationKind::cutout;
  CHECK((augment(x, spec, 4).array() == cutout(x, 0.1, 4).array()).all());

  const auto round = AugmentationSpec::from_json(spec.to_json());
  CHECK(round.to_json() == spec.to_json());
  CHECK(parse_augmentation_kind("gaussian_noise") == AugmentationKind::gaussian_noise);
  spec.segment_fraction = 1.2;
  CHECK(error_code_of([&] { spec.validate(); }).has_value());
}
