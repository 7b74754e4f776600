#include "merl/common.hpp"

#include <openssl/evp.h>

#include <array>
#include <iostream>
#include <mutex>
#include <random>

namespace merl {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::parse: return "parse_error";
    case ErrorCode::io: return "io_error";
    case ErrorCode::duplicate_id: return "duplicate_id";
    case ErrorCode::vocabulary: return "vocabulary_error";
    case ErrorCode::unrecoverable_lead: return "unrecoverable_lead";
    case ErrorCode::empty_manifest: return "empty_manifest";
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::configuration: return "configuration_error";
    case ErrorCode::batch_shape: return "batch_shape_error";
    case ErrorCode::batch_too_small: return "batch_too_small";
    case ErrorCode::capability: return "capability_error";
    case ErrorCode::numeric: return "numeric_error";
    case ErrorCode::dimension_mismatch: return "dimension_mismatch";
    case ErrorCode::undefined_metric: return "undefined_metric";
    case ErrorCode::empty_prompt: return "empty_prompt";
    case ErrorCode::empty_kb: return "empty_kb";
    case ErrorCode::kb_conflict: return "kb_conflict";
    case ErrorCode::llm_parse: return "llm_parse_error";
    case ErrorCode::completeness: return "completeness_error";
    case ErrorCode::protocol_violation: return "protocol_violation";
    case ErrorCode::divergence: return "divergence";
  }
  return "unknown";
}

namespace {

std::mutex& handler_mutex() {
  static std::mutex m;
  return m;
}

WarningHandler& handler_slot() {
  static WarningHandler h = [](std::string_view msg) {
    std::cerr << "warning: " << msg << '\n';
  };
  return h;
}

}  // namespace

WarningHandler set_warning_handler(WarningHandler handler) {
  std::lock_guard lock(handler_mutex());
  WarningHandler previous = std::move(handler_slot());
  handler_slot() = std::move(handler);
  return previous;
}

void warn(std::string_view message) {
  std::lock_guard lock(handler_mutex());
  if (handler_slot()) handler_slot()(message);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int length = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &length,
                 EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorCode::io, "sha256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(length * 2);
  for (unsigned int i = 0; i < length; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

}  // namespace merl
