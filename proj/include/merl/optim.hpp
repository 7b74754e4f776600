#pragma once

#include "merl/common.hpp"
#include "merl/encoders.hpp"
#include "merl/nn/layers.hpp"

#include <cmath>
#include <map>
#include <string>

namespace merl {

// Adam with decoupled weight decay. Moment buffers are keyed by parameter
// name so the parameter list may be rebuilt between steps.
template <typename Scalar>
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  explicit AdamW(Options options) : options_(options) {}

  void step(nn::ParamList<Scalar>& params, double lr) {
    ++t_;
    const auto [c1, c2] = corrections();
    for (auto& p : params) {
      if (!p.trainable()) continue;
      auto& state = state_[p.name];
      if (state.m.size() == 0) {
        state.m = Matrix<Scalar>::Zero(p.value->rows(), p.value->cols());
        state.v = Matrix<Scalar>::Zero(p.value->rows(), p.value->cols());
      }
      update(*p.value, *p.grad, state.m, state.v, lr, c1, c2);
    }
  }

  // Sparse step over learned text tokens: only tokens touched since the
  // last zero_grad are updated. Call after step() so both share `t`.
  void step_tokens(TextEncoder<Scalar>& text, double lr) {
    const auto [c1, c2] = corrections();
    for (auto& [token, state] : text.learned_tokens()) {
      if (!state.touched) continue;
      update(state.value, state.grad, state.m, state.v, lr, c1, c2);
    }
  }

  long step_count() const { return t_; }

 private:
  struct State {
    Matrix<Scalar> m, v;
  };

  std::pair<double, double> corrections() const {
    return {1.0 - std::pow(options_.beta1, static_cast<double>(t_)),
            1.0 - std::pow(options_.beta2, static_cast<double>(t_))};
  }

  template <typename Value, typename Grad, typename Moment>
  void update(Value& value, const Grad& grad, Moment& m, Moment& v, double lr, double c1,
              double c2) const {
    const auto b1 = static_cast<Scalar>(options_.beta1), b2 = static_cast<Scalar>(options_.beta2);
    if (options_.weight_decay > 0) value *= static_cast<Scalar>(1.0 - lr * options_.weight_decay);
    m = b1 * m + (Scalar(1) - b1) * grad;
    v = b2 * v + (Scalar(1) - b2) * grad.cwiseAbs2();
    const auto step_size = static_cast<Scalar>(lr / c1);
    const auto denom_scale = static_cast<Scalar>(1.0 / std::sqrt(c2));
    value.array() -= step_size * m.array() /
                     ((v.array().sqrt() * denom_scale) + static_cast<Scalar>(options_.eps));
  }

  Options options_;
  long t_ = 0;
  std::map<std::string, State> state_;
};

}  // namespace merl
