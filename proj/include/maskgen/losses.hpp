// SPDX-License-Identifier: Apache-2.0
//
// Training objective: focal loss on the coarse mask, BCE + Dice on the fine
// mask and label-smoothed cross-entropy on final logits.
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>

#include "maskgen/numerics.hpp"

namespace maskgen {

struct LossWeights {
  double coarse = 0.05;
  double fine = 0.2;
  double final = 1.0;

  void validate() const {
    if (coarse < 0 || fine < 0 || final < 0) throw std::invalid_argument("loss weights must be non-negative");
  }
};

struct FocalOptions {
  double gamma = 2.0;
  double alpha = 0.25;
  double clamp_eps = 1e-7;
};

struct DiceOptions {
  double smooth = 1.0;
  double clamp_eps = 1e-7;
};

struct SmoothingOptions {
  double epsilon = 0.1;
  std::int64_t ignore_index = 255;
};

namespace detail {

template <class T>
void require_same_shape(const Var<T>& pred, const Tensor<T>& target, const char* what) {
  if (pred.shape() != target.shape()) {
    throw DimensionError(std::string(what) + ": prediction " + pred.shape().to_string() + " vs target " +
                         target.shape().to_string());
  }
}

/// 1 - t elementwise, for binary targets.
template <class T>
Tensor<T> complement(const Tensor<T>& t) {
  Tensor<T> out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = T(1) - t[i];
  return out;
}

}  // namespace detail

/// mean(-alpha_t (1 - p_t)^gamma log p_t) with p clamped to [eps, 1 - eps].
template <class T>
Var<T> focal_loss(const Var<T>& pred, const Tensor<T>& target, const FocalOptions& opt = {}) {
  detail::require_same_shape(pred, target, "focal_loss");
  const Var<T> p = clamp(pred, opt.clamp_eps, 1.0 - opt.clamp_eps);
  Tensor<T> sign(target.shape());
  Tensor<T> alpha_t(target.shape());
  for (std::size_t i = 0; i < target.size(); ++i) {
    sign[i] = static_cast<T>(2.0 * target[i] - 1.0);
    alpha_t[i] = static_cast<T>(target[i] * opt.alpha + (1.0 - target[i]) * (1.0 - opt.alpha));
  }
  // p_t = t p + (1 - t)(1 - p) = (2t - 1) p + (1 - t)
  const Var<T> pt = add(mul(p, Var<T>::constant(std::move(sign))), Var<T>::constant(detail::complement(target)));
  const Var<T> modulator = pow_scalar(add_scalar(neg(pt), 1.0), opt.gamma);
  const Var<T> terms = mul(mul(modulator, log(pt)), Var<T>::constant(std::move(alpha_t)));
  return neg(mean_all(terms));
}

/// Mean binary cross-entropy with p clamped to [eps, 1 - eps].
template <class T>
Var<T> bce_loss(const Var<T>& pred, const Tensor<T>& target, double clamp_eps = 1e-7) {
  detail::require_same_shape(pred, target, "bce_loss");
  const Var<T> p = clamp(pred, clamp_eps, 1.0 - clamp_eps);
  const Var<T> pos = mul(log(p), Var<T>::constant(target));
  const Var<T> neg_part = mul(log(add_scalar(neg(p), 1.0)), Var<T>::constant(detail::complement(target)));
  return neg(mean_all(add(pos, neg_part)));
}

/// 1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s), over all elements.
template <class T>
Var<T> dice_loss(const Var<T>& pred, const Tensor<T>& target, const DiceOptions& opt = {}) {
  detail::require_same_shape(pred, target, "dice_loss");
  const Var<T> p = clamp(pred, opt.clamp_eps, 1.0 - opt.clamp_eps);
  const Var<T> t = Var<T>::constant(target);
  const Var<T> overlap = add_scalar(scale(sum_all(mul(p, t)), 2.0), opt.smooth);
  const Var<T> total = add_scalar(add(sum_all(p), sum_all(t)), opt.smooth);
  return add_scalar(neg(mul(overlap, reciprocal(total))), 1.0);
}

/// Equal-weight sum of BCE and Dice.
template <class T>
Var<T> bce_dice_loss(const Var<T>& pred, const Tensor<T>& target, const DiceOptions& opt = {}) {
  return add(bce_loss(pred, target, opt.clamp_eps), dice_loss(pred, target, opt));
}

/// Cross-entropy against (1 - eps) one-hot + eps / K uniform targets.
/// `logits` is B x K x H x W, `labels` holds B*H*W class ids; pixels equal to
/// the ignore index are left out of the mean.
template <class T>
Var<T> ce_label_smoothing(const Var<T>& logits, std::span<const std::int64_t> labels, const SmoothingOptions& opt = {}) {
  const Shape& s = logits.shape();
  if (s.rank() != 4) throw DimensionError("ce_label_smoothing expects B x K x H x W logits");
  const std::size_t b = s[0], k = s[1], h = s[2], w = s[3];
  if (labels.size() != b * h * w) {
    throw DimensionError("label map has " + std::to_string(labels.size()) + " entries, logits need " +
                         std::to_string(b * h * w));
  }
  Tensor<T> weight(Shape{b, h, w, k});
  std::size_t counted = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::int64_t y = labels[i];
    if (y == opt.ignore_index) continue;
    if (y < 0 || y >= static_cast<std::int64_t>(k)) {
      throw std::out_of_range("label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
    }
    ++counted;
    for (std::size_t c = 0; c < k; ++c) weight[i * k + c] = static_cast<T>(opt.epsilon / static_cast<double>(k));
    weight[i * k + static_cast<std::size_t>(y)] += static_cast<T>(1.0 - opt.epsilon);
  }
  const Var<T> logp = log_softmax_lastdim(permute(logits, {0, 2, 3, 1}));
  if (counted == 0) return scale(sum_all(mul(logp, Var<T>::constant(std::move(weight)))), 0.0);
  return scale(sum_all(mul(logp, Var<T>::constant(std::move(weight)))), -1.0 / static_cast<double>(counted));
}

inline double total_loss(double coarse, double fine, double final_loss, const LossWeights& w = {}) {
  w.validate();
  return w.coarse * coarse + w.fine * fine + w.final * final_loss;
}

template <class T>
Var<T> total_loss(const Var<T>& coarse, const Var<T>& fine, const Var<T>& final_loss, const LossWeights& w = {}) {
  w.validate();
  return add(add(scale(coarse, w.coarse), scale(fine, w.fine)), scale(final_loss, w.final));
}

}  // namespace maskgen
