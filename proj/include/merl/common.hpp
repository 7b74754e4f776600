#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace merl {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

// Machine-readable failure categories. The CLI reports these verbatim.
enum class ErrorCode {
  parse,
  io,
  duplicate_id,
  vocabulary,
  unrecoverable_lead,
  empty_manifest,
  invalid_argument,
  configuration,
  batch_shape,
  batch_too_small,
  capability,
  numeric,
  dimension_mismatch,
  undefined_metric,
  empty_prompt,
  empty_kb,
  kb_conflict,
  llm_parse,
  completeness,
  protocol_violation,
  divergence,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Non-fatal conditions (epsilon-guarded normalization, split fallbacks) are
// routed through a process-wide handler. Default writes to stderr.
using WarningHandler = std::function<void(std::string_view)>;
WarningHandler set_warning_handler(WarningHandler handler);
void warn(std::string_view message);

// Stable 64-bit FNV-1a, used wherever a hash must be identical across
// platforms and runs (token seeds, stream derivation).
constexpr std::uint64_t fnv1a64(std::string_view text) noexcept {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

// Independent RNG stream seed for (seed, stream); used so that distinct
// consumers of one user seed never share a generator.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// Lower-case hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

}  // namespace merl
