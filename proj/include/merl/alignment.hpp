#pragma once

// Contrastive alignment objectives. All functions are pure and templated on
// the scalar type; rows index batch samples.

#include "merl/common.hpp"
#include "merl/nn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <string_view>

namespace merl {

// `standard` keeps the positive in the softmax denominator; `decoupled`
// removes it, which makes the loss unbounded below.
enum class DenominatorVariant { standard, decoupled };

std::string_view to_string(DenominatorVariant variant);
DenominatorVariant parse_denominator_variant(std::string_view name);

template <typename Scalar>
struct SimilarityMatrix {
  Matrix<Scalar> values;  // values(i, j) = <E_i, R_j>
  Scalar temperature = Scalar(0.07);

  Index batch_size() const { return values.rows(); }
};

template <typename Scalar>
SimilarityMatrix<Scalar> similarity_matrix(const Matrix<Scalar>& E, const Matrix<Scalar>& R,
                                           Scalar temperature = Scalar(0.07)) {
  if (E.rows() != R.rows() || E.cols() != R.cols()) {
    throw Error(ErrorCode::dimension_mismatch,
                "similarity_matrix: E is " + std::to_string(E.rows()) + "x" +
                    std::to_string(E.cols()) + ", R is " + std::to_string(R.rows()) + "x" +
                    std::to_string(R.cols()));
  }
  if (E.rows() < 2) {
    throw Error(ErrorCode::batch_too_small,
                "contrastive loss needs at least 2 pairs per batch, got " + std::to_string(E.rows()));
  }
  if (!(temperature > 0)) throw Error(ErrorCode::configuration, "temperature must be positive");
  return {E * R.transpose(), temperature};
}

namespace detail {

template <typename Scalar>
void require_finite(const Matrix<Scalar>& S, std::string_view what) {
  if (S.allFinite()) return;
  std::string where;
  int shown = 0;
  for (Index j = 0; j < S.cols() && shown < 8; ++j) {
    for (Index i = 0; i < S.rows() && shown < 8; ++i) {
      if (!std::isfinite(S(i, j))) {
        where += (shown ? ", (" : "(") + std::to_string(i) + "," + std::to_string(j) + ")";
        ++shown;
      }
    }
  }
  throw Error(ErrorCode::numeric, std::string(what) + " has non-finite entries at " + where);
}

// Sum over rows i of  LSE_{k in D_i}(logits(i, k)) - logits(i, i), where D_i
// is every column (standard) or every column but i (decoupled). If `grad` is
// given it receives d(sum)/d(logits).
template <typename Scalar>
Scalar rowwise_infonce(const Matrix<Scalar>& logits, DenominatorVariant variant,
                       Matrix<Scalar>* grad) {
  const Index L = logits.rows();
  const bool skip_positive = variant == DenominatorVariant::decoupled;
  if (grad) grad->setZero(L, logits.cols());
  Scalar total = 0;
  for (Index i = 0; i < L; ++i) {
    Scalar m = -std::numeric_limits<Scalar>::infinity();
    for (Index k = 0; k < logits.cols(); ++k) {
      if (skip_positive && k == i) continue;
      m = std::max(m, logits(i, k));
    }
    Scalar z = 0;
    for (Index k = 0; k < logits.cols(); ++k) {
      if (skip_positive && k == i) continue;
      z += std::exp(logits(i, k) - m);
    }
    total += m + std::log(z) - logits(i, i);
    if (grad) {
      for (Index k = 0; k < logits.cols(); ++k) {
        if (skip_positive && k == i) continue;
        (*grad)(i, k) = std::exp(logits(i, k) - m) / z;
      }
      (*grad)(i, i) -= 1;
    }
  }
  return total;
}

}  // namespace detail

template <typename Scalar>
struct LossWithGrad {
  Scalar loss = 0;
  Matrix<Scalar> grad;  // d loss / d S.values
};

// Symmetric cross-modal loss with diagonal positives, averaged over the 2L
// directional terms.
template <typename Scalar>
LossWithGrad<Scalar> cma_loss_with_grad(const SimilarityMatrix<Scalar>& S,
                                        DenominatorVariant variant = DenominatorVariant::standard) {
  const Index L = S.values.rows();
  if (S.values.cols() != L) throw Error(ErrorCode::dimension_mismatch, "similarity matrix is not square");
  if (L < 2) throw Error(ErrorCode::batch_too_small, "contrastive loss needs at least 2 pairs per batch");
  detail::require_finite(S.values, "similarity matrix");
  const Scalar tau = S.temperature;
  const Matrix<Scalar> logits = S.values / tau;
  const Matrix<Scalar> logits_t = logits.transpose();
  Matrix<Scalar> g_e2r, g_r2e;
  const Scalar sum = detail::rowwise_infonce(logits, variant, &g_e2r) +
                     detail::rowwise_infonce(logits_t, variant, &g_r2e);
  const Scalar scale = Scalar(1) / Scalar(2 * L);
  return {sum * scale, (g_e2r + g_r2e.transpose()) * (scale / tau)};
}

template <typename Scalar>
Scalar cma_loss(const SimilarityMatrix<Scalar>& S,
                DenominatorVariant variant = DenominatorVariant::standard) {
  const Index L = S.values.rows();
  if (S.values.cols() != L) throw Error(ErrorCode::dimension_mismatch, "similarity matrix is not square");
  if (L < 2) throw Error(ErrorCode::batch_too_small, "contrastive loss needs at least 2 pairs per batch");
  detail::require_finite(S.values, "similarity matrix");
  const Matrix<Scalar> logits = S.values / S.temperature;
  const Matrix<Scalar> logits_t = logits.transpose();
  return (detail::rowwise_infonce<Scalar>(logits, variant, nullptr) +
          detail::rowwise_infonce<Scalar>(logits_t, variant, nullptr)) /
         Scalar(2 * L);
}

// ---------------------------------------------------------------------------
// Latent dropout views

template <typename Scalar>
struct DropoutViewPair {
  Matrix<Scalar> view1, view2;
  Matrix<Scalar> mask1, mask2;  // entries are exactly 0 or 1
  Scalar p = Scalar(0.1);
  bool rescaled = false;
};

// Two independent Bernoulli(keep = 1 - p) masks over Z. The masks come from
// disjoint seed streams of `seed`. Views are Z * M exactly unless `rescale`
// asks for inverted-dropout scaling by 1/(1-p).
template <typename Scalar>
DropoutViewPair<Scalar> latent_dropout_views(const Matrix<Scalar>& Z, Scalar p, std::uint64_t seed,
                                             bool rescale = false) {
  if (!(p >= 0) || !(p < 1)) {
    throw Error(ErrorCode::configuration,
                "dropout ratio must lie in [0, 1), got " + std::to_string(static_cast<double>(p)));
  }
  detail::require_finite(Z, "ECG embedding");
  DropoutViewPair<Scalar> out;
  out.p = p;
  out.rescaled = rescale;
  auto draw = [&](std::uint64_t stream) {
    Matrix<Scalar> mask(Z.rows(), Z.cols());
    if (p == 0) {
      mask.setOnes();
      return mask;
    }
    std::mt19937_64 rng(derive_seed(seed, stream));
    std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
    for (Index k = 0; k < mask.size(); ++k) mask.data()[k] = keep(rng) ? Scalar(1) : Scalar(0);
    return mask;
  };
  out.mask1 = draw(1);
  out.mask2 = draw(2);
  out.view1 = Z.cwiseProduct(out.mask1);
  out.view2 = Z.cwiseProduct(out.mask2);
  if (rescale && p > 0) {
    out.view1 /= (Scalar(1) - p);
    out.view2 /= (Scalar(1) - p);
  }
  return out;
}

template <typename Scalar>
struct ViewLossWithGrad {
  Scalar loss = 0;
  Matrix<Scalar> grad1, grad2;  // d loss / d view1, d loss / d view2
};

// Symmetrized contrastive loss between two views of the same batch. Rows
// are L2-normalized first; all-zero rows are epsilon-guarded with a warning.
template <typename Scalar>
ViewLossWithGrad<Scalar> view_contrast_with_grad(const Matrix<Scalar>& view1,
                                                 const Matrix<Scalar>& view2, Scalar temperature,
                                                 DenominatorVariant variant) {
  if (view1.rows() != view2.rows() || view1.cols() != view2.cols()) {
    throw Error(ErrorCode::dimension_mismatch, "views differ in shape");
  }
  nn::RowNormalizer<Scalar> n1, n2;
  const Index guarded = n1.forward(view1) + n2.forward(view2);
  if (guarded > 0) {
    warn("uni-modal alignment: " + std::to_string(guarded) +
         " all-zero view row(s) after masking; normalization was epsilon-guarded");
  }
  const auto S = similarity_matrix(n1.output, n2.output, temperature);
  const auto cma = cma_loss_with_grad(S, variant);
  return {cma.loss, n1.backward(cma.grad * n2.output),
          n2.backward(cma.grad.transpose() * n1.output)};
}

template <typename Scalar>
struct UmaLossWithGrad {
  Scalar loss = 0;
  Matrix<Scalar> grad;  // d loss / d Z (through both masks)
};

template <typename Scalar>
UmaLossWithGrad<Scalar> uma_loss_with_grad(const DropoutViewPair<Scalar>& views, Scalar temperature,
                                           DenominatorVariant variant = DenominatorVariant::standard) {
  const auto r = view_contrast_with_grad(views.view1, views.view2, temperature, variant);
  Matrix<Scalar> grad = r.grad1.cwiseProduct(views.mask1) + r.grad2.cwiseProduct(views.mask2);
  if (views.rescaled && views.p > 0) grad /= (Scalar(1) - views.p);
  return {r.loss, std::move(grad)};
}

template <typename Scalar>
Scalar uma_loss(const DropoutViewPair<Scalar>& views, Scalar temperature,
                DenominatorVariant variant = DenominatorVariant::standard) {
  return view_contrast_with_grad(views.view1, views.view2, temperature, variant).loss;
}

// ---------------------------------------------------------------------------

struct LossBreakdown {
  double cma = 0;
  double uma = 0;
  double total = 0;
  Index batch_size = 0;
};

inline LossBreakdown total_loss(double cma, double uma, Index batch_size = 0) {
  return {cma, uma, cma + uma, batch_size};
}

}  // namespace merl
