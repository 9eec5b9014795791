#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "memreg/tensor.hpp"

namespace memreg {

inline constexpr double kLogEps = 1e-7;

/// Scalar weights combining the training objective's components.
struct LossWeights {
  double aux_seg = 0.5;
  double adv_primary = 0.001;
  double adv_aux = 0.0002;
  double lambda_mr = 0.1;
};

/// Per-class weights for balancing rare classes, clipped to [0.5, 5.0].
using ClassBalanceWeights = std::vector<double>;

/// Pixel-wise cross-entropy over a softmax map [C,H,W] against integer
/// labels [H*W], optionally class-weighted. Mean over pixels of
/// -w_y * log pred[y].
template <typename T>
Tensor<T> seg_ce(const Tensor<T>& pred, std::span<const std::uint8_t> labels,
                 const ClassBalanceWeights& weights = {}) {
  if (pred.ndim() != 3)
    throw ShapeError("seg_ce: pred must be [C,H,W], got " + shape_str(pred.shape()));
  std::size_t c = pred.dim(0), hw = pred.dim(1) * pred.dim(2);
  if (labels.size() != hw)
    throw ShapeError("seg_ce: label count " + std::to_string(labels.size()) +
                     " does not match " + std::to_string(hw) + " pixels");
  if (!weights.empty() && weights.size() != c)
    throw std::invalid_argument("seg_ce: weight count " + std::to_string(weights.size()) +
                                " does not match " + std::to_string(c) + " classes");
  std::vector<T> mask(pred.numel(), T(0));
  for (std::size_t i = 0; i < hw; ++i) {
    std::size_t y = labels[i];
    if (y >= c)
      throw std::invalid_argument("seg_ce: label " + std::to_string(y) + " out of range for " +
                                  std::to_string(c) + " classes");
    T w = weights.empty() ? T(1) : static_cast<T>(weights[y]);
    mask[y * hw + i] = w;
  }
  auto m = Tensor<T>::from_data(pred.shape(), std::move(mask));
  auto picked = mul(m, log(clamp_min(pred, static_cast<T>(kLogEps))));
  return mul_scalar(sum(picked), static_cast<T>(-1.0 / static_cast<double>(hw)));
}

namespace detail {

template <typename T>
Tensor<T> mean_neg_log(const Tensor<T>& scores) {
  return mul_scalar(mean(log(clamp_min(scores, static_cast<T>(kLogEps)))), T(-1));
}

template <typename T>
Tensor<T> mean_neg_log_one_minus(const Tensor<T>& scores) {
  auto one_minus = add_scalar(mul_scalar(scores, T(-1)), T(1));
  return mean_neg_log(one_minus);
}

template <typename T>
Tensor<T> average(std::vector<Tensor<T>> terms) {
  Tensor<T> acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return mul_scalar(acc, static_cast<T>(1.0 / static_cast<double>(terms.size())));
}

}  // namespace detail

/// Discriminator objective: -E[log D(src)] - E[log(1 - D(tgt))], averaged
/// over score maps (one per scale) and positions. Lower is better for D.
template <typename T>
Tensor<T> adv_d_loss(const std::vector<Tensor<T>>& d_src_scores,
                     const std::vector<Tensor<T>>& d_tgt_scores) {
  if (d_src_scores.empty() || d_src_scores.size() != d_tgt_scores.size())
    throw std::invalid_argument("adv_d_loss: need matching non-empty score lists");
  std::vector<Tensor<T>> terms;
  for (std::size_t s = 0; s < d_src_scores.size(); ++s)
    terms.push_back(add(detail::mean_neg_log(d_src_scores[s]),
                        detail::mean_neg_log_one_minus(d_tgt_scores[s])));
  return detail::average(std::move(terms));
}

template <typename T>
Tensor<T> adv_d_loss(const Tensor<T>& d_src, const Tensor<T>& d_tgt) {
  return adv_d_loss<T>(std::vector<Tensor<T>>{d_src}, std::vector<Tensor<T>>{d_tgt});
}

/// Non-saturating generator objective: -E[log D(tgt)], averaged over
/// scales and positions. Pushes target predictions toward source-like.
template <typename T>
Tensor<T> adv_g_loss(const std::vector<Tensor<T>>& d_tgt_scores) {
  if (d_tgt_scores.empty()) throw std::invalid_argument("adv_g_loss: no score maps");
  std::vector<Tensor<T>> terms;
  for (const auto& s : d_tgt_scores) terms.push_back(detail::mean_neg_log(s));
  return detail::average(std::move(terms));
}

template <typename T>
Tensor<T> adv_g_loss(const Tensor<T>& d_tgt) {
  return adv_g_loss<T>(std::vector<Tensor<T>>{d_tgt});
}

/// Symmetric cross-entropy between the two classifiers' softmax maps:
/// mean over pixels of -sum_c p_aux log p_primary - sum_c p_primary log p_aux.
/// With detach_teacher (default) each direction treats the weighting
/// distribution as a constant, so gradients only flow into the operand
/// inside the log; detach_teacher=false lets them flow through both.
template <typename T>
Tensor<T> memory_reg(const Tensor<T>& p_aux, const Tensor<T>& p_primary,
                     bool detach_teacher = true) {
  detail::check_same_shape(p_aux, p_primary, "memory_reg");
  if (p_aux.ndim() != 3)
    throw ShapeError("memory_reg: expected [C,H,W], got " + shape_str(p_aux.shape()));
  std::size_t hw = p_aux.dim(1) * p_aux.dim(2);
  Tensor<T> aux_t = detach_teacher ? p_aux.detach() : p_aux;
  Tensor<T> pri_t = detach_teacher ? p_primary.detach() : p_primary;
  auto log_pri = log(clamp_min(p_primary, static_cast<T>(kLogEps)));
  auto log_aux = log(clamp_min(p_aux, static_cast<T>(kLogEps)));
  auto cross = add(sum(mul(aux_t, log_pri)), sum(mul(pri_t, log_aux)));
  return mul_scalar(cross, static_cast<T>(-1.0 / static_cast<double>(hw)));
}

/// Per-pixel argmax of p_primary + 0.5 * p_aux; ties go to the lower
/// class index. Pure value computation, no gradient history.
template <typename T>
std::vector<std::uint8_t> fuse_pseudo_label(const Tensor<T>& p_primary, const Tensor<T>& p_aux) {
  detail::check_same_shape(p_primary, p_aux, "fuse_pseudo_label");
  if (p_primary.ndim() != 3)
    throw ShapeError("fuse_pseudo_label: expected [C,H,W], got " + shape_str(p_primary.shape()));
  std::size_t c = p_primary.dim(0), hw = p_primary.dim(1) * p_primary.dim(2);
  auto dp = p_primary.data();
  auto da = p_aux.data();
  std::vector<std::uint8_t> out(hw);
  for (std::size_t i = 0; i < hw; ++i) {
    std::size_t best = 0;
    T best_score = dp[i] + static_cast<T>(0.5) * da[i];
    for (std::size_t k = 1; k < c; ++k) {
      T s = dp[k * hw + i] + static_cast<T>(0.5) * da[k * hw + i];
      if (s > best_score) {
        best = k;
        best_score = s;
      }
    }
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

/// Median-frequency balancing with sqrt damping:
/// w_c = clip(sqrt(median_freq / freq_c), 0.5, 5.0); absent classes get
/// the ceiling. The median is taken over classes that actually occur.
inline ClassBalanceWeights class_balance_weights(const std::vector<std::vector<std::uint8_t>>& label_maps,
                                                 std::size_t num_classes) {
  std::vector<std::size_t> counts(num_classes, 0);
  std::size_t total = 0;
  for (const auto& m : label_maps)
    for (std::uint8_t y : m) {
      if (y >= num_classes)
        throw std::invalid_argument("class_balance_weights: label " + std::to_string(y) +
                                    " out of range");
      ++counts[y];
      ++total;
    }
  if (total == 0) throw std::invalid_argument("class_balance_weights: no labeled pixels");
  std::vector<double> present;
  for (auto n : counts)
    if (n > 0) present.push_back(static_cast<double>(n) / static_cast<double>(total));
  std::sort(present.begin(), present.end());
  double median;
  std::size_t k = present.size();
  if (k % 2 == 1)
    median = present[k / 2];
  else
    median = 0.5 * (present[k / 2 - 1] + present[k / 2]);
  ClassBalanceWeights w(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (counts[c] == 0) {
      w[c] = 5.0;
      continue;
    }
    double freq = static_cast<double>(counts[c]) / static_cast<double>(total);
    w[c] = std::clamp(std::sqrt(median / freq), 0.5, 5.0);
  }
  return w;
}

/// First-stage objective: supervised terms plus the adversarial generator
/// terms and the cross-classifier consistency term.
template <typename T>
Tensor<T> stage1_total(const Tensor<T>& seg_primary, const Tensor<T>& seg_aux,
                       const Tensor<T>& adv_g_primary, const Tensor<T>& adv_g_aux,
                       const Tensor<T>& mr, const LossWeights& w = {}) {
  auto total = add(seg_primary, mul_scalar(seg_aux, static_cast<T>(w.aux_seg)));
  total = add(total, mul_scalar(adv_g_primary, static_cast<T>(w.adv_primary)));
  total = add(total, mul_scalar(adv_g_aux, static_cast<T>(w.adv_aux)));
  return add(total, mul_scalar(mr, static_cast<T>(w.lambda_mr)));
}

/// Second-stage objective: pseudo-label supervision plus consistency; no
/// adversarial terms (the discriminators are not used in this stage).
template <typename T>
Tensor<T> stage2_total(const Tensor<T>& pseg_primary, const Tensor<T>& pseg_aux,
                       const Tensor<T>& mr, const LossWeights& w = {}) {
  auto total = add(pseg_primary, mul_scalar(pseg_aux, static_cast<T>(w.aux_seg)));
  return add(total, mul_scalar(mr, static_cast<T>(w.lambda_mr)));
}

}  // namespace memreg
