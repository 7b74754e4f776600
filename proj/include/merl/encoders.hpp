#pragma once

#include "merl/common.hpp"
#include "merl/corpus.hpp"
#include "merl/nn/layers.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace merl {

enum class Backbone { resnet1d_18, resnet1d_50, resnet1d_101, vit1d_tiny };

std::string_view to_string(Backbone backbone);
Backbone parse_backbone(std::string_view name);

struct EncoderConfig {
  Backbone ecg_backbone = Backbone::resnet1d_18;
  int input_leads = 12;
  int input_samples = 5000;
  // Channel width of the first residual stage; 64 reproduces the usual
  // ResNet widths (512-d output for resnet1d_18, 2048-d for the bottleneck
  // variants).
  int resnet_width = 64;
  // ViT-Tiny geometry.
  int vit_dim = 192;
  int vit_depth = 12;
  int vit_heads = 3;
  int vit_mlp_ratio = 4;
  int patch_length = 50;
  // "stub_hash" or "adapter:<name>".
  std::string text_encoder = "stub_hash";
  int text_embed_dim = 256;
  bool text_trainable = true;
  int shared_dim = 256;
  int projector_hidden = 512;
  std::uint64_t init_seed = 0;

  // Output width D_e of the ECG backbone, implied by the backbone choice.
  int ecg_embed_dim() const;
  void validate() const;

  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
};

// ---------------------------------------------------------------------------
// ECG encoder

template <typename Scalar>
class EcgEncoder {
 public:
  explicit EcgEncoder(const EncoderConfig& config);

  // Records -> (batch x D_e). All records must share lead and sample counts.
  Matrix<Scalar> forward(std::span<const ECGRecord* const> records, nn::Mode mode);
  Matrix<Scalar> forward(std::span<const ECGRecord> records, nn::Mode mode);
  // Raw input tensor (batch*samples x leads) -> (batch x D_e).
  Matrix<Scalar> forward_tensor(const nn::Tensor<Scalar>& input, nn::Mode mode);
  void backward(const Matrix<Scalar>& grad);

  nn::ParamList<Scalar> parameters();
  std::size_t parameter_count();
  Index embed_dim() const { return embed_dim_; }
  // Number of tokens the ViT stem produces per record (0 for ResNets).
  Index token_count() const { return token_count_; }

  // Stacks records into the encoder's input layout, validating shapes.
  nn::Tensor<Scalar> make_input(std::span<const ECGRecord* const> records) const;

 private:
  EncoderConfig config_;
  nn::Sequential<Scalar> backbone_;
  Index embed_dim_ = 0;
  Index token_count_ = 0;
};

// ---------------------------------------------------------------------------
// Text encoder

// External text encoders (e.g. a clinical language model served elsewhere)
// plug in through this contract: raw text in, fixed-width vector out.
class TextAdapter {
 public:
  virtual ~TextAdapter() = default;
  virtual int dim() const = 0;
  virtual Vector<float> embed(const std::string& text) = 0;
  // Adapters are frozen unless they say otherwise.
  virtual bool supports_training() const { return false; }
};

using TextAdapterFactory = std::function<std::unique_ptr<TextAdapter>()>;
void register_text_adapter(const std::string& name, TextAdapterFactory factory);
void unregister_text_adapter(const std::string& name);

// `stub_hash` maps every token to a fixed pseudo-random vector seeded by the
// token's FNV-1a hash and mean-pools. When trainable, tokens seen in
// training get a learned vector initialised from the hash vector.
template <typename Scalar>
class TextEncoder {
 public:
  explicit TextEncoder(const EncoderConfig& config);

  Matrix<Scalar> forward(std::span<const std::string> texts);
  void backward(const Matrix<Scalar>& grad);

  Index dim() const { return dim_; }
  bool trainable() const { return trainable_; }
  Vector<Scalar> token_vector(const std::string& token) const;
  Vector<Scalar> hash_vector(const std::string& token) const;

  struct TokenState {
    Vector<Scalar> value, grad, m, v;
    bool touched = false;
  };
  std::map<std::string, TokenState>& learned_tokens() { return learned_; }
  const std::map<std::string, TokenState>& learned_tokens() const { return learned_; }
  void zero_grad();

 private:
  Index dim_;
  bool trainable_;
  std::unique_ptr<TextAdapter> adapter_;
  std::map<std::string, TokenState> learned_;
  std::vector<std::vector<std::string>> last_tokens_;
};

// ---------------------------------------------------------------------------
// Projector: in -> hidden -> relu -> shared_dim -> row L2 normalization.

template <typename Scalar>
class Projector {
 public:
  Projector(Index in_dim, Index hidden, Index out_dim, std::mt19937_64& rng);

  Matrix<Scalar> forward(const Matrix<Scalar>& z, nn::Mode mode);
  Matrix<Scalar> backward(const Matrix<Scalar>& grad);
  nn::ParamList<Scalar> parameters(const std::string& prefix);
  Index in_dim() const { return in_dim_; }
  Index out_dim() const { return out_dim_; }

 private:
  Index in_dim_, out_dim_;
  nn::Sequential<Scalar> layers_;
  nn::RowNormalizer<Scalar> normalizer_;
};

// ---------------------------------------------------------------------------
// Complete two-tower model.

template <typename Scalar>
class MerlModel {
 public:
  explicit MerlModel(const EncoderConfig& config);

  const EncoderConfig& config() const { return config_; }
  EcgEncoder<Scalar>& ecg() { return ecg_; }
  TextEncoder<Scalar>& text() { return text_; }
  Projector<Scalar>& ecg_projector() { return ecg_projector_; }
  Projector<Scalar>& text_projector() { return text_projector_; }

  // Every dense parameter and buffer, named "ecg.*", "ecg_proj.*", "text_proj.*".
  nn::ParamList<Scalar> parameters();
  void zero_grad();

  // SHA-256 over the ECG backbone's parameters and buffers.
  std::string ecg_encoder_hash();

  void save(const std::filesystem::path& path, const nlohmann::json& metadata) const;
  static MerlModel load(const std::filesystem::path& path, nlohmann::json* metadata = nullptr);

 private:
  EncoderConfig config_;
  EcgEncoder<Scalar> ecg_;
  TextEncoder<Scalar> text_;
  Projector<Scalar> ecg_projector_;
  Projector<Scalar> text_projector_;
};

using Model = MerlModel<float>;

// Evaluation-mode batch encoders.
template <typename Scalar>
Matrix<Scalar> encode_ecg_batch(std::span<const ECGRecord> records, MerlModel<Scalar>& model);
template <typename Scalar>
Matrix<Scalar> encode_report_batch(std::span<const ClinicalReport> reports, MerlModel<Scalar>& model);

enum class Modality { ecg, text };

// Projects embeddings of the given modality to unit-norm shared-space rows.
template <typename Scalar>
Matrix<Scalar> project_and_normalize(const Matrix<Scalar>& z, Modality which,
                                     MerlModel<Scalar>& model);

extern template class EcgEncoder<float>;
extern template class EcgEncoder<double>;
extern template class TextEncoder<float>;
extern template class TextEncoder<double>;
extern template class Projector<float>;
extern template class Projector<double>;
extern template class MerlModel<float>;
extern template class MerlModel<double>;

}  // namespace merl
