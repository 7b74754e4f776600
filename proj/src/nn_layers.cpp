#include "merl/nn/layers.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace merl::nn {

std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

namespace {

template <typename Scalar>
Matrix<Scalar> normal_matrix(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix<Scalar> m(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) m(i, j) = static_cast<Scalar>(dist(rng));
  }
  return m;
}

template <typename Scalar>
Matrix<Scalar> uniform_matrix(Index rows, Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix<Scalar> m(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) m(i, j) = static_cast<Scalar>(dist(rng));
  }
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv1d

template <typename Scalar>
Conv1d<Scalar>::Conv1d(Index in_channels, Index out_channels, Index kernel, Index stride,
                       Index padding, bool with_bias, std::mt19937_64& rng)
    : in_channels_(in_channels),
      out_channels_(out_channels),
      kernel_(kernel),
      stride_(stride),
      padding_(padding) {
  // He initialisation (fan-out), as is conventional for residual networks.
  weight = normal_matrix<Scalar>(out_channels, in_channels * kernel,
                                 std::sqrt(2.0 / static_cast<double>(out_channels * kernel)), rng);
  weight_grad = Matrix<Scalar>::Zero(weight.rows(), weight.cols());
  if (with_bias) {
    bias = Matrix<Scalar>::Zero(1, out_channels);
    bias_grad = Matrix<Scalar>::Zero(1, out_channels);
  }
}

template <typename Scalar>
Tensor<Scalar> Conv1d<Scalar>::forward(const Tensor<Scalar>& x, Mode) {
  if (x.channels() != in_channels_) {
    throw Error(ErrorCode::dimension_mismatch,
                "conv1d expects " + std::to_string(in_channels_) + " channels, got " +
                    std::to_string(x.channels()));
  }
  const Index n_batch = x.batch, len = x.length, out_len = output_length(len);
  if (out_len < 1) {
    throw Error(ErrorCode::dimension_mismatch, "conv1d input of length " + std::to_string(len) +
                                                   " is shorter than its kernel");
  }
  in_batch_ = n_batch;
  in_length_ = len;
  columns_.resize(n_batch * out_len, in_channels_ * kernel_);
  for (Index c = 0; c < in_channels_; ++c) {
    const auto src = x.data.col(c);
    for (Index k = 0; k < kernel_; ++k) {
      auto dst = columns_.col(c * kernel_ + k);
      for (Index n = 0; n < n_batch; ++n) {
        for (Index t = 0; t < out_len; ++t) {
          const Index idx = t * stride_ - padding_ + k;
          dst(n * out_len + t) = (idx >= 0 && idx < len) ? src(n * len + idx) : Scalar(0);
        }
      }
    }
  }
  Tensor<Scalar> y{columns_ * weight.transpose(), n_batch, out_len};
  if (bias.size()) y.data.rowwise() += bias.row(0);
  return y;
}

template <typename Scalar>
Tensor<Scalar> Conv1d<Scalar>::backward(const Tensor<Scalar>& grad) {
  weight_grad.noalias() += grad.data.transpose() * columns_;
  if (bias.size()) bias_grad += grad.data.colwise().sum();
  const Matrix<Scalar> dcols = grad.data * weight;
  const Index out_len = grad.length;
  Tensor<Scalar> dx = Tensor<Scalar>::zeros(in_batch_, in_length_, in_channels_);
  for (Index c = 0; c < in_channels_; ++c) {
    auto dst = dx.data.col(c);
    for (Index k = 0; k < kernel_; ++k) {
      const auto src = dcols.col(c * kernel_ + k);
      for (Index n = 0; n < in_batch_; ++n) {
        for (Index t = 0; t < out_len; ++t) {
          const Index idx = t * stride_ - padding_ + k;
          if (idx >= 0 && idx < in_length_) dst(n * in_length_ + idx) += src(n * out_len + t);
        }
      }
    }
  }
  return dx;
}

template <typename Scalar>
void Conv1d<Scalar>::collect(const std::string& prefix, ParamList<Scalar>& out) {
  out.push_back({join_name(prefix, "weight"), &weight, &weight_grad});
  if (bias.size()) out.push_back({join_name(prefix, "bias"), &bias, &bias_grad});
}

// ---------------------------------------------------------------------------
// BatchNorm1d

template <typename Scalar>
BatchNorm1d<Scalar>::BatchNorm1d(Index channels, Scalar momentum, Scalar eps)
    : gamma(Matrix<Scalar>::Ones(1, channels)),
      beta(Matrix<Scalar>::Zero(1, channels)),
      gamma_grad(Matrix<Scalar>::Zero(1, channels)),
      beta_grad(Matrix<Scalar>::Zero(1, channels)),
      running_mean(Matrix<Scalar>::Zero(1, channels)),
      running_var(Matrix<Scalar>::Ones(1, channels)),
      momentum_(momentum),
      eps_(eps) {}

template <typename Scalar>
Tensor<Scalar> BatchNorm1d<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  last_mode_ = mode;
  batch_ = x.batch;
  length_ = x.length;
  const Index rows = x.data.rows();
  if (mode == Mode::train) {
    if (rows < 2) {
      throw Error(ErrorCode::batch_too_small, "batch norm needs at least 2 positions in training");
    }
    const RowVector<Scalar> mean = x.data.colwise().mean();
    normalized_ = x.data.rowwise() - mean;
    const RowVector<Scalar> var = normalized_.array().square().colwise().mean();
    inv_std_ = (var.array() + eps_).rsqrt();
    normalized_ = normalized_ * inv_std_.asDiagonal();
    const Scalar unbias = static_cast<Scalar>(rows) / static_cast<Scalar>(rows - 1);
    running_mean = (Scalar(1) - momentum_) * running_mean + momentum_ * mean;
    running_var = (Scalar(1) - momentum_) * running_var + (momentum_ * unbias) * var;
  } else {
    inv_std_ = (running_var.row(0).array() + eps_).rsqrt();
    normalized_ = (x.data.rowwise() - running_mean.row(0)) * inv_std_.asDiagonal();
  }
  Tensor<Scalar> y{normalized_ * gamma.row(0).asDiagonal(), x.batch, x.length};
  y.data.rowwise() += beta.row(0);
  return y;
}

template <typename Scalar>
Tensor<Scalar> BatchNorm1d<Scalar>::backward(const Tensor<Scalar>& grad) {
  gamma_grad += grad.data.cwiseProduct(normalized_).colwise().sum();
  beta_grad += grad.data.colwise().sum();
  const Matrix<Scalar> dnorm = grad.data * gamma.row(0).asDiagonal();
  Tensor<Scalar> dx{Matrix<Scalar>(), batch_, length_};
  if (last_mode_ == Mode::train) {
    const RowVector<Scalar> mean_d = dnorm.colwise().mean();
    const RowVector<Scalar> mean_dn = dnorm.cwiseProduct(normalized_).colwise().mean();
    dx.data = ((dnorm.rowwise() - mean_d) - normalized_ * mean_dn.asDiagonal()) *
              inv_std_.asDiagonal();
  } else {
    dx.data = dnorm * inv_std_.asDiagonal();
  }
  return dx;
}

template <typename Scalar>
void BatchNorm1d<Scalar>::collect(const std::string& prefix, ParamList<Scalar>& out) {
  out.push_back({join_name(prefix, "weight"), &gamma, &gamma_grad});
  out.push_back({join_name(prefix, "bias"), &beta, &beta_grad});
  out.push_back({join_name(prefix, "running_mean"), &running_mean, nullptr});
  out.push_back({join_name(prefix, "running_var"), &running_var, nullptr});
}

// ---------------------------------------------------------------------------
// Activations

template <typename Scalar>
Tensor<Scalar> ReLU<Scalar>::forward(const Tensor<Scalar>& x, Mode) {
  output_ = x.data.cwiseMax(Scalar(0));
  return {output_, x.batch, x.length};
}

template <typename Scalar>
Tensor<Scalar> ReLU<Scalar>::backward(const Tensor<Scalar>& grad) {
  return {(output_.array() > Scalar(0)).select(grad.data, Scalar(0)), grad.batch, grad.length};
}

template <typename Scalar>
Tensor<Scalar> GELU<Scalar>::forward(const Tensor<Scalar>& x, Mode) {
  input_ = x.data;
  const Scalar inv_sqrt2 = Scalar(1) / std::sqrt(Scalar(2));
  Matrix<Scalar> y = x.data.unaryExpr([&](Scalar v) {
    return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2));
  });
  return {std::move(y), x.batch, x.length};
}

template <typename Scalar>
Tensor<Scalar> GELU<Scalar>::backward(const Tensor<Scalar>& grad) {
  const Scalar inv_sqrt2 = Scalar(1) / std::sqrt(Scalar(2));
  const Scalar inv_sqrt2pi = Scalar(1) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
  Matrix<Scalar> d = input_.unaryExpr([&](Scalar v) {
    const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2));
    const Scalar pdf = inv_sqrt2pi * std::exp(Scalar(-0.5) * v * v);
    return cdf + v * pdf;
  });
  return {d.cwiseProduct(grad.data), grad.batch, grad.length};
}

// ---------------------------------------------------------------------------
// Pooling

template <typename Scalar>
Tensor<Scalar> MaxPool1d<Scalar>::forward(const Tensor<Scalar>& x, Mode) {
  const Index len = x.length, out_len = (len + 2 * padding_ - kernel_) / stride_ + 1;
  if (out_len < 1) throw Error(ErrorCode::dimension_mismatch, "max-pool input too short");
  in_rows_ = x.data.rows();
  in_batch_ = x.batch;
  in_length_ = len;
  Tensor<Scalar> y = Tensor<Scalar>::zeros(x.batch, out_len, x.channels());
  argmax_.resize(x.batch * out_len, x.channels());
  for (Index c = 0; c < x.channels(); ++c) {
    for (Index n = 0; n < x.batch; ++n) {
      for (Index t = 0; t < out_len; ++t) {
        Scalar best = -std::numeric_limits<Scalar>::infinity();
        Index best_row = -1;
        for (Index k = 0; k < kernel_; ++k) {
          const Index idx = t * stride_ - padding_ + k;
          if (idx < 0 || idx >= len) continue;
          const Index row = n * len + idx;
          if (best_row < 0 || x.data(row, c) > best) {
            best = x.data(row, c);
            best_row = row;
          }
        }
        y.data(n * out_len + t, c) = best;
        argmax_(n * out_len + t, c) = best_row;
      }
    }
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> MaxPool1d<Scalar>::backward(const Tensor<Scalar>& grad) {
  Tensor<Scalar> dx{Matrix<Scalar>::Zero(in_rows_, grad.channels()), in_batch_, in_length_};
  for (Index c = 0; c < grad.channels(); ++c) {
    for (Index r = 0; r < grad.data.rows(); ++r) dx.data(argmax_(r, c), c) += grad.data(r, c);
  }
  return dx;
}

template <typename Scalar>
Tensor<Scalar> GlobalAvgPool<Scalar>::forward(const Tensor<Scalar>& x, Mode) {
  batch_ = x.batch;
  length_ = x.length;
  Matrix<Scalar> y(x.batch, x.channels());
  for (Index n = 0; n < x.batch; ++n) {
    y.row(n) = x.data.middleRows(n * x.length, x.length).colwise().mean();
  }
  return Tensor<Scalar>::from_rows(std::move(y));
}

template <typename Scalar>
Tensor<Scalar> GlobalAvgPool<Scalar>::backward(const Tensor<Scalar>& grad) {
  Tensor<Scalar> dx{Matrix<Scalar>(batch_ * length_, grad.channels()), batch_, length_};
  const Scalar scale = Scalar(1) / static_cast<Scalar>(length_);
  for (Index n = 0; n < batch_; ++n) {
    dx.data.middleRows(n * length_, length_).rowwise() = grad.data.row(n) * scale;
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Linear

template <typename Scalar>
Linear<Scalar>::Linear(Index in_features, Index out_features, bool bias_enabled,
                       std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  weight = uniform_matrix<Scalar>(out_features, in_features, bound, rng);
  weight_grad = Matrix<Scalar>::Zero(out_features, in_features);
  if (bias_enabled) {
    bias = uniform_matrix<Scalar>(1, out_features, bound, rng);
    bias_grad = Matrix<Scalar>::Zero(1, out_features);
  }
}

template <typename Scalar>
Tensor<Scalar> Linear<Scalar>::forward(const Tensor<Scalar>& x, Mode) {
  if (x.channels() != weight.cols()) {
    throw Error(ErrorCode::dimension_mismatch,
                "linear layer expects " + std::to_string(weight.cols()) + " features, got " +
                    std::to_string(x.channels()));
  }
  input_ = x;
  Tensor<Scalar> y{x.data * weight.transpose(), x.batch, x.length};
  if (bias.size()) y.data.rowwise() += bias.row(0);
  return y;
}

template <typename Scalar>
Tensor<Scalar> Linear<Scalar>::backward(const Tensor<Scalar>& grad) {
  weight_grad.noalias() += grad.data.transpose() * input_.data;
  if (bias.size()) bias_grad += grad.data.colwise().sum();
  return {grad.data * weight, grad.batch, grad.length};
}

template <typename Scalar>
void Linear<Scalar>::collect(const std::string& prefix, ParamList<Scalar>& out) {
  out.push_back({join_name(prefix, "weight"), &weight, &weight_grad});
  if (bias.size()) out.push_back({join_name(prefix, "bias"), &bias, &bias_grad});
}

// ---------------------------------------------------------------------------
// LayerNorm

template <typename Scalar>
LayerNorm<Scalar>::LayerNorm(Index channels, Scalar eps)
    : gamma(Matrix<Scalar>::Ones(1, channels)),
      beta(Matrix<Scalar>::Zero(1, channels)),
      gamma_grad(Matrix<Scalar>::Zero(1, channels)),
      beta_grad(Matrix<Scalar>::Zero(1, channels)),
      eps_(eps) {}

template <typename Scalar>
Tensor<Scalar> LayerNorm<Scalar>::forward(const Tensor<Scalar>& x, Mode) {
  batch_ = x.batch;
  length_ = x.length;
  const Vector<Scalar> mean = x.data.rowwise().mean();
  normalized_ = x.data.colwise() - mean;
  const Vector<Scalar> var = normalized_.array().square().rowwise().mean();
  inv_std_ = (var.array() + eps_).rsqrt();
  normalized_ = inv_std_.asDiagonal() * normalized_;
  Tensor<Scalar> y{normalized_ * gamma.row(0).asDiagonal(), x.batch, x.length};
  y.data.rowwise() += beta.row(0);
  return y;
}

template <typename Scalar>
Tensor<Scalar> LayerNorm<Scalar>::backward(const Tensor<Scalar>& grad) {
  gamma_grad += grad.data.cwiseProduct(normalized_).colwise().sum();
  beta_grad += grad.data.colwise().sum();
  const Matrix<Scalar> dnorm = grad.data * gamma.row(0).asDiagonal();
  const Vector<Scalar> mean_d = dnorm.rowwise().mean();
  const Vector<Scalar> mean_dn = dnorm.cwiseProduct(normalized_).rowwise().mean();
  Matrix<Scalar> dx = (dnorm.colwise() - mean_d) - mean_dn.asDiagonal() * normalized_;
  return {inv_std_.asDiagonal() * dx, batch_, length_};
}

template <typename Scalar>
void LayerNorm<Scalar>::collect(const std::string& prefix, ParamList<Scalar>& out) {
  out.push_back({join_name(prefix, "weight"), &gamma, &gamma_grad});
  out.push_back({join_name(prefix, "bias"), &beta, &beta_grad});
}

// ---------------------------------------------------------------------------
// Self-attention

template <typename Scalar>
MultiHeadSelfAttention<Scalar>::MultiHeadSelfAttention(Index dim, Index heads,
                                                       std::mt19937_64& rng)
    : dim_(dim),
      heads_(heads),
      head_dim_(heads > 0 ? dim / heads : 0),
      qkv_(dim, 3 * dim, true, rng),
      proj_(dim, dim, true, rng) {
  if (heads <= 0 || dim % heads != 0) {
    throw Error(ErrorCode::configuration, "attention dim must be divisible by the head count");
  }
}

template <typename Scalar>
Tensor<Scalar> MultiHeadSelfAttention<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  batch_ = x.batch;
  length_ = x.length;
  qkv_out_ = qkv_.forward(x, mode).data;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(head_dim_));
  probs_.assign(static_cast<std::size_t>(batch_ * heads_), Matrix<Scalar>());
  Tensor<Scalar> attended = Tensor<Scalar>::zeros(batch_, length_, dim_);
  for (Index n = 0; n < batch_; ++n) {
    for (Index h = 0; h < heads_; ++h) {
      const auto q = qkv_out_.block(n * length_, h * head_dim_, length_, head_dim_);
      const auto k = qkv_out_.block(n * length_, dim_ + h * head_dim_, length_, head_dim_);
      const auto v = qkv_out_.block(n * length_, 2 * dim_ + h * head_dim_, length_, head_dim_);
      Matrix<Scalar> p = (q * k.transpose()) * scale;
      const Vector<Scalar> row_max = p.rowwise().maxCoeff();
      p = (p.colwise() - row_max).array().exp();
      const Vector<Scalar> row_sum = p.rowwise().sum();
      p = row_sum.cwiseInverse().asDiagonal() * p;
      attended.data.block(n * length_, h * head_dim_, length_, head_dim_).noalias() = p * v;
      probs_[static_cast<std::size_t>(n * heads_ + h)] = std::move(p);
    }
  }
  return proj_.forward(attended, mode);
}

template <typename Scalar>
Tensor<Scalar> MultiHeadSelfAttention<Scalar>::backward(const Tensor<Scalar>& grad) {
  const Tensor<Scalar> d_attended = proj_.backward(grad);
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(head_dim_));
  Tensor<Scalar> d_qkv = Tensor<Scalar>::zeros(batch_, length_, 3 * dim_);
  for (Index n = 0; n < batch_; ++n) {
    for (Index h = 0; h < heads_; ++h) {
      const auto& p = probs_[static_cast<std::size_t>(n * heads_ + h)];
      const auto q = qkv_out_.block(n * length_, h * head_dim_, length_, head_dim_);
      const auto k = qkv_out_.block(n * length_, dim_ + h * head_dim_, length_, head_dim_);
      const auto v = qkv_out_.block(n * length_, 2 * dim_ + h * head_dim_, length_, head_dim_);
      const auto d_out = d_attended.data.block(n * length_, h * head_dim_, length_, head_dim_);
      const Matrix<Scalar> dp = d_out * v.transpose();
      d_qkv.data.block(n * length_, 2 * dim_ + h * head_dim_, length_, head_dim_).noalias() =
          p.transpose() * d_out;
      const Vector<Scalar> inner = dp.cwiseProduct(p).rowwise().sum();
      const Matrix<Scalar> ds = p.cwiseProduct(dp.colwise() - inner) * scale;
      d_qkv.data.block(n * length_, h * head_dim_, length_, head_dim_).noalias() = ds * k;
      d_qkv.data.block(n * length_, dim_ + h * head_dim_, length_, head_dim_).noalias() =
          ds.transpose() * q;
    }
  }
  return qkv_.backward(d_qkv);
}

template <typename Scalar>
void MultiHeadSelfAttention<Scalar>::collect(const std::string& prefix, ParamList<Scalar>& out) {
  qkv_.collect(join_name(prefix, "qkv"), out);
  proj_.collect(join_name(prefix, "proj"), out);
}

// ---------------------------------------------------------------------------

template <typename Scalar>
PositionalEmbedding<Scalar>::PositionalEmbedding(Index length, Index dim, std::mt19937_64& rng)
    : table(normal_matrix<Scalar>(length, dim, 0.02, rng)),
      table_grad(Matrix<Scalar>::Zero(length, dim)) {}

template <typename Scalar>
Tensor<Scalar> PositionalEmbedding<Scalar>::forward(const Tensor<Scalar>& x, Mode) {
  if (x.length != table.rows() || x.channels() != table.cols()) {
    throw Error(ErrorCode::dimension_mismatch, "positional embedding expects " +
                                                   std::to_string(table.rows()) + " tokens");
  }
  Tensor<Scalar> y = x;
  for (Index n = 0; n < x.batch; ++n) y.data.middleRows(n * x.length, x.length) += table;
  return y;
}

template <typename Scalar>
Tensor<Scalar> PositionalEmbedding<Scalar>::backward(const Tensor<Scalar>& grad) {
  for (Index n = 0; n < grad.batch; ++n) {
    table_grad += grad.data.middleRows(n * grad.length, grad.length);
  }
  return grad;
}

template <typename Scalar>
void PositionalEmbedding<Scalar>::collect(const std::string& prefix, ParamList<Scalar>& out) {
  out.push_back({join_name(prefix, "table"), &table, &table_grad});
}

// ---------------------------------------------------------------------------
// Containers

template <typename Scalar>
Sequential<Scalar>& Sequential<Scalar>::add(std::string name, ModulePtr<Scalar> module) {
  layers_.emplace_back(std::move(name), std::move(module));
  return *this;
}

template <typename Scalar>
Tensor<Scalar> Sequential<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  if (layers_.empty()) return x;
  Tensor<Scalar> h = layers_.front().second->forward(x, mode);
  for (std::size_t i = 1; i < layers_.size(); ++i) h = layers_[i].second->forward(h, mode);
  return h;
}

template <typename Scalar>
Tensor<Scalar> Sequential<Scalar>::backward(const Tensor<Scalar>& grad) {
  if (layers_.empty()) return grad;
  Tensor<Scalar> g = layers_.back().second->backward(grad);
  for (std::size_t i = layers_.size() - 1; i-- > 0;) g = layers_[i].second->backward(g);
  return g;
}

template <typename Scalar>
void Sequential<Scalar>::collect(const std::string& prefix, ParamList<Scalar>& out) {
  for (auto& [name, layer] : layers_) layer->collect(join_name(prefix, name), out);
}

namespace {

template <typename Scalar>
std::unique_ptr<Sequential<Scalar>> make_shortcut(Index in_channels, Index out_channels,
                                                  Index stride, std::mt19937_64& rng) {
  if (stride == 1 && in_channels == out_channels) return nullptr;
  auto s = std::make_unique<Sequential<Scalar>>();
  s->add("conv", std::make_unique<Conv1d<Scalar>>(in_channels, out_channels, 1, stride, 0, false, rng));
  s->add("bn", std::make_unique<BatchNorm1d<Scalar>>(out_channels));
  return s;
}

}  // namespace

template <typename Scalar>
BasicBlock<Scalar>::BasicBlock(Index in_channels, Index channels, Index stride,
                               std::mt19937_64& rng) {
  main_.add("conv1", std::make_unique<Conv1d<Scalar>>(in_channels, channels, 3, stride, 1, false, rng))
      .add("bn1", std::make_unique<BatchNorm1d<Scalar>>(channels))
      .add("relu1", std::make_unique<ReLU<Scalar>>())
      .add("conv2", std::make_unique<Conv1d<Scalar>>(channels, channels, 3, 1, 1, false, rng))
      .add("bn2", std::make_unique<BatchNorm1d<Scalar>>(channels));
  shortcut_ = make_shortcut<Scalar>(in_channels, channels, stride, rng);
}

template <typename Scalar>
Tensor<Scalar> BasicBlock<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  Tensor<Scalar> h = main_.forward(x, mode);
  if (shortcut_) {
    h.data += shortcut_->forward(x, mode).data;
  } else {
    h.data += x.data;
  }
  return out_relu_.forward(h, mode);
}

template <typename Scalar>
Tensor<Scalar> BasicBlock<Scalar>::backward(const Tensor<Scalar>& grad) {
  const Tensor<Scalar> g = out_relu_.backward(grad);
  Tensor<Scalar> dx = main_.backward(g);
  dx.data += shortcut_ ? shortcut_->backward(g).data : g.data;
  return dx;
}

template <typename Scalar>
void BasicBlock<Scalar>::collect(const std::string& prefix, ParamList<Scalar>& out) {
  main_.collect(prefix, out);
  if (shortcut_) shortcut_->collect(join_name(prefix, "shortcut"), out);
}

template <typename Scalar>
Bottleneck<Scalar>::Bottleneck(Index in_channels, Index channels, Index stride,
                               std::mt19937_64& rng) {
  const Index out_channels = channels * expansion;
  main_.add("conv1", std::make_unique<Conv1d<Scalar>>(in_channels, channels, 1, 1, 0, false, rng))
      .add("bn1", std::make_unique<BatchNorm1d<Scalar>>(channels))
      .add("relu1", std::make_unique<ReLU<Scalar>>())
      .add("conv2", std::make_unique<Conv1d<Scalar>>(channels, channels, 3, stride, 1, false, rng))
      .add("bn2", std::make_unique<BatchNorm1d<Scalar>>(channels))
      .add("relu2", std::make_unique<ReLU<Scalar>>())
      .add("conv3", std::make_unique<Conv1d<Scalar>>(channels, out_channels, 1, 1, 0, false, rng))
      .add("bn3", std::make_unique<BatchNorm1d<Scalar>>(out_channels));
  shortcut_ = make_shortcut<Scalar>(in_channels, out_channels, stride, rng);
}

template <typename Scalar>
Tensor<Scalar> Bottleneck<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  Tensor<Scalar> h = main_.forward(x, mode);
  if (shortcut_) {
    h.data += shortcut_->forward(x, mode).data;
  } else {
    h.data += x.data;
  }
  return out_relu_.forward(h, mode);
}

template <typename Scalar>
Tensor<Scalar> Bottleneck<Scalar>::backward(const Tensor<Scalar>& grad) {
  const Tensor<Scalar> g = out_relu_.backward(grad);
  Tensor<Scalar> dx = main_.backward(g);
  dx.data += shortcut_ ? shortcut_->backward(g).data : g.data;
  return dx;
}

template <typename Scalar>
void Bottleneck<Scalar>::collect(const std::string& prefix, ParamList<Scalar>& out) {
  main_.collect(prefix, out);
  if (shortcut_) shortcut_->collect(join_name(prefix, "shortcut"), out);
}

template <typename Scalar>
TransformerBlock<Scalar>::TransformerBlock(Index dim, Index heads, Index mlp_hidden,
                                           std::mt19937_64& rng) {
  attention_.add("norm1", std::make_unique<LayerNorm<Scalar>>(dim))
      .add("attn", std::make_unique<MultiHeadSelfAttention<Scalar>>(dim, heads, rng));
  mlp_.add("norm2", std::make_unique<LayerNorm<Scalar>>(dim))
      .add("fc1", std::make_unique<Linear<Scalar>>(dim, mlp_hidden, true, rng))
      .add("act", std::make_unique<GELU<Scalar>>())
      .add("fc2", std::make_unique<Linear<Scalar>>(mlp_hidden, dim, true, rng));
}

template <typename Scalar>
Tensor<Scalar> TransformerBlock<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  Tensor<Scalar> h = attention_.forward(x, mode);
  h.data += x.data;
  Tensor<Scalar> out = mlp_.forward(h, mode);
  out.data += h.data;
  return out;
}

template <typename Scalar>
Tensor<Scalar> TransformerBlock<Scalar>::backward(const Tensor<Scalar>& grad) {
  Tensor<Scalar> dh = mlp_.backward(grad);
  dh.data += grad.data;
  Tensor<Scalar> dx = attention_.backward(dh);
  dx.data += dh.data;
  return dx;
}

template <typename Scalar>
void TransformerBlock<Scalar>::collect(const std::string& prefix, ParamList<Scalar>& out) {
  attention_.collect(prefix, out);
  mlp_.collect(prefix, out);
}

// ---------------------------------------------------------------------------

template <typename Scalar>
Index RowNormalizer<Scalar>::forward(const Matrix<Scalar>& x) {
  norms = x.rowwise().norm();
  Index guarded = 0;
  Vector<Scalar> inv(norms.size());
  for (Index i = 0; i < norms.size(); ++i) {
    if (norms(i) < eps) ++guarded;
    inv(i) = Scalar(1) / std::max(norms(i), eps);
  }
  output = inv.asDiagonal() * x;
  return guarded;
}

template <typename Scalar>
Matrix<Scalar> RowNormalizer<Scalar>::backward(const Matrix<Scalar>& grad) const {
  Matrix<Scalar> dx(grad.rows(), grad.cols());
  for (Index i = 0; i < grad.rows(); ++i) {
    if (norms(i) < eps) {
      dx.row(i) = grad.row(i) / eps;
    } else {
      const Scalar inner = output.row(i).dot(grad.row(i));
      dx.row(i) = (grad.row(i) - inner * output.row(i)) / norms(i);
    }
  }
  return dx;
}

#define MERL_NN_INSTANTIATE(Scalar)              \
  template class Conv1d<Scalar>;                 \
  template class BatchNorm1d<Scalar>;            \
  template class ReLU<Scalar>;                   \
  template class GELU<Scalar>;                   \
  template class MaxPool1d<Scalar>;              \
  template class GlobalAvgPool<Scalar>;          \
  template class Linear<Scalar>;                 \
  template class LayerNorm<Scalar>;              \
  template class MultiHeadSelfAttention<Scalar>; \
  template class PositionalEmbedding<Scalar>;    \
  template class Sequential<Scalar>;             \
  template class BasicBlock<Scalar>;             \
  template class Bottleneck<Scalar>;             \
  template class TransformerBlock<Scalar>;       \
  template struct RowNormalizer<Scalar>;

MERL_NN_INSTANTIATE(float)
MERL_NN_INSTANTIATE(double)

}  // namespace merl::nn
