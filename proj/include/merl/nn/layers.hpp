#pragma once

// Minimal layer library with explicit forward/backward passes.
//
// Activations are stored position-major: a Tensor holds `batch` sequences of
// `length` positions, row `n * length + t` is position t of sample n and the
// columns are channels. Per-channel operations are therefore contiguous
// column operations and a pooled batch is simply a (batch x channels) matrix.
//
// Every module caches what its backward pass needs during the most recent
// forward call; backward() must follow the matching forward() and
// accumulates parameter gradients (callers zero them between steps).

#include "merl/common.hpp"

#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace merl::nn {

enum class Mode { train, eval };

template <typename Scalar>
struct Tensor {
  Matrix<Scalar> data;
  Index batch = 0;
  Index length = 0;

  Index channels() const { return data.cols(); }
  static Tensor zeros(Index batch, Index length, Index channels) {
    return {Matrix<Scalar>::Zero(batch * length, channels), batch, length};
  }
  // Wraps a (batch x features) matrix as length-1 sequences.
  static Tensor from_rows(Matrix<Scalar> rows) {
    const Index n = rows.rows();
    return {std::move(rows), n, 1};
  }
};

// A named view onto a parameter or buffer owned by a module. Buffers
// (running statistics) have no gradient and are not optimized.
template <typename Scalar>
struct ParamRef {
  std::string name;
  Matrix<Scalar>* value = nullptr;
  Matrix<Scalar>* grad = nullptr;

  bool trainable() const { return grad != nullptr; }
};

template <typename Scalar>
using ParamList = std::vector<ParamRef<Scalar>>;

template <typename Scalar>
class Module {
 public:
  virtual ~Module() = default;
  virtual Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) = 0;
  virtual Tensor<Scalar> backward(const Tensor<Scalar>& grad) = 0;
  virtual void collect(const std::string& prefix, ParamList<Scalar>& out) {
    (void)prefix;
    (void)out;
  }
};

template <typename Scalar>
using ModulePtr = std::unique_ptr<Module<Scalar>>;

std::string join_name(const std::string& prefix, const std::string& name);

template <typename Scalar>
class Conv1d final : public Module<Scalar> {
 public:
  Conv1d(Index in_channels, Index out_channels, Index kernel, Index stride,
         Index padding, bool bias, std::mt19937_64& rng);

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override;
  void collect(const std::string& prefix, ParamList<Scalar>& out) override;

  Index output_length(Index input_length) const {
    return (input_length + 2 * padding_ - kernel_) / stride_ + 1;
  }

  Matrix<Scalar> weight;  // out x (in * kernel), input-channel major
  Matrix<Scalar> bias;    // 1 x out, empty when disabled
  Matrix<Scalar> weight_grad;
  Matrix<Scalar> bias_grad;

 private:
  Index in_channels_, out_channels_, kernel_, stride_, padding_;
  Matrix<Scalar> columns_;
  Index in_batch_ = 0, in_length_ = 0;
};

template <typename Scalar>
class BatchNorm1d final : public Module<Scalar> {
 public:
  explicit BatchNorm1d(Index channels, Scalar momentum = Scalar(0.1),
                       Scalar eps = Scalar(1e-5));

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override;
  void collect(const std::string& prefix, ParamList<Scalar>& out) override;

  Matrix<Scalar> gamma, beta;              // 1 x C
  Matrix<Scalar> gamma_grad, beta_grad;
  Matrix<Scalar> running_mean, running_var;  // 1 x C

 private:
  Scalar momentum_, eps_;
  Mode last_mode_ = Mode::eval;
  Matrix<Scalar> normalized_;
  RowVector<Scalar> inv_std_;
  Index batch_ = 0, length_ = 0;
};

template <typename Scalar>
class ReLU final : public Module<Scalar> {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override;

 private:
  Matrix<Scalar> output_;
};

template <typename Scalar>
class GELU final : public Module<Scalar> {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override;

 private:
  Matrix<Scalar> input_;
};

template <typename Scalar>
class MaxPool1d final : public Module<Scalar> {
 public:
  MaxPool1d(Index kernel, Index stride, Index padding)
      : kernel_(kernel), stride_(stride), padding_(padding) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override;

 private:
  Index kernel_, stride_, padding_;
  Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic> argmax_;
  Index in_rows_ = 0, in_batch_ = 0, in_length_ = 0;
};

// Mean over positions: (batch*length x C) -> (batch x C).
template <typename Scalar>
class GlobalAvgPool final : public Module<Scalar> {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override;

 private:
  Index batch_ = 0, length_ = 0;
};

// Position-wise affine map.
template <typename Scalar>
class Linear final : public Module<Scalar> {
 public:
  Linear(Index in_features, Index out_features, bool bias, std::mt19937_64& rng);

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override;
  void collect(const std::string& prefix, ParamList<Scalar>& out) override;

  Matrix<Scalar> weight;  // out x in
  Matrix<Scalar> bias;    // 1 x out
  Matrix<Scalar> weight_grad, bias_grad;

 private:
  Tensor<Scalar> input_;
};

template <typename Scalar>
class LayerNorm final : public Module<Scalar> {
 public:
  explicit LayerNorm(Index channels, Scalar eps = Scalar(1e-5));

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override;
  void collect(const std::string& prefix, ParamList<Scalar>& out) override;

  Matrix<Scalar> gamma, beta;
  Matrix<Scalar> gamma_grad, beta_grad;

 private:
  Scalar eps_;
  Matrix<Scalar> normalized_;
  Vector<Scalar> inv_std_;
  Index batch_ = 0, length_ = 0;
};

template <typename Scalar>
class MultiHeadSelfAttention final : public Module<Scalar> {
 public:
  MultiHeadSelfAttention(Index dim, Index heads, std::mt19937_64& rng);

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override;
  void collect(const std::string& prefix, ParamList<Scalar>& out) override;

 private:
  Index dim_, heads_, head_dim_;
  Linear<Scalar> qkv_;
  Linear<Scalar> proj_;
  Matrix<Scalar> qkv_out_;
  std::vector<Matrix<Scalar>> probs_;  // (batch * heads) of length x length
  Index batch_ = 0, length_ = 0;
};

// Learned additive embedding, one row per position, shared across the batch.
template <typename Scalar>
class PositionalEmbedding final : public Module<Scalar> {
 public:
  PositionalEmbedding(Index length, Index dim, std::mt19937_64& rng);

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override;
  void collect(const std::string& prefix, ParamList<Scalar>& out) override;

  Matrix<Scalar> table, table_grad;
};

template <typename Scalar>
class Sequential final : public Module<Scalar> {
 public:
  Sequential& add(std::string name, ModulePtr<Scalar> module);

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override;
  void collect(const std::string& prefix, ParamList<Scalar>& out) override;

  std::size_t size() const { return layers_.size(); }

 private:
  std::vector<std::pair<std::string, ModulePtr<Scalar>>> layers_;
};

// conv3-bn-relu-conv3-bn plus (projected) shortcut, then relu.
template <typename Scalar>
class BasicBlock final : public Module<Scalar> {
 public:
  static constexpr Index expansion = 1;
  BasicBlock(Index in_channels, Index channels, Index stride, std::mt19937_64& rng);

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override;
  void collect(const std::string& prefix, ParamList<Scalar>& out) override;

 private:
  Sequential<Scalar> main_;
  std::unique_ptr<Sequential<Scalar>> shortcut_;
  ReLU<Scalar> out_relu_;
};

// 1x1 reduce, 3-wide conv, 1x1 expand (x4), plus shortcut, then relu.
template <typename Scalar>
class Bottleneck final : public Module<Scalar> {
 public:
  static constexpr Index expansion = 4;
  Bottleneck(Index in_channels, Index channels, Index stride, std::mt19937_64& rng);

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override;
  void collect(const std::string& prefix, ParamList<Scalar>& out) override;

 private:
  Sequential<Scalar> main_;
  std::unique_ptr<Sequential<Scalar>> shortcut_;
  ReLU<Scalar> out_relu_;
};

// Pre-norm transformer encoder block.
template <typename Scalar>
class TransformerBlock final : public Module<Scalar> {
 public:
  TransformerBlock(Index dim, Index heads, Index mlp_hidden, std::mt19937_64& rng);

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override;
  void collect(const std::string& prefix, ParamList<Scalar>& out) override;

 private:
  Sequential<Scalar> attention_;
  Sequential<Scalar> mlp_;
};

// Row-wise L2 normalization with an epsilon guard. Returns the number of
// rows whose norm fell below `eps`.
template <typename Scalar>
struct RowNormalizer {
  Scalar eps = Scalar(1e-12);
  Matrix<Scalar> output;
  Vector<Scalar> norms;

  Index forward(const Matrix<Scalar>& x);
  Matrix<Scalar> backward(const Matrix<Scalar>& grad) const;
};

#define MERL_NN_EXTERN(Scalar)                          \
  extern template class Conv1d<Scalar>;                 \
  extern template class BatchNorm1d<Scalar>;            \
  extern template class ReLU<Scalar>;                   \
  extern template class GELU<Scalar>;                   \
  extern template class MaxPool1d<Scalar>;              \
  extern template class GlobalAvgPool<Scalar>;          \
  extern template class Linear<Scalar>;                 \
  extern template class LayerNorm<Scalar>;              \
  extern template class MultiHeadSelfAttention<Scalar>; \
  extern template class PositionalEmbedding<Scalar>;    \
  extern template class Sequential<Scalar>;             \
  extern template class BasicBlock<Scalar>;             \
  extern template class Bottleneck<Scalar>;             \
  extern template class TransformerBlock<Scalar>;       \
  extern template struct RowNormalizer<Scalar>;

MERL_NN_EXTERN(float)
MERL_NN_EXTERN(double)
#undef MERL_NN_EXTERN

}  // namespace merl::nn
