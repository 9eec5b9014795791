#include "memreg/metrics.hpp"

#include <stdexcept>
#include <string>

namespace memreg {

std::vector<std::uint8_t> argmax_map(const TensorF& probs) {
  if (probs.ndim() != 3)
    throw ShapeError("argmax_map expects [C,H,W], got " + shape_str(probs.shape()));
  const std::size_t c = probs.dim(0), hw = probs.dim(1) * probs.dim(2);
  auto d = probs.data();
  std::vector<std::uint8_t> out(hw);
  for (std::size_t i = 0; i < hw; ++i) {
    std::size_t best = 0;
    float best_v = d[i];
    for (std::size_t k = 1; k < c; ++k) {
      float v = d[k * hw + i];
      if (v > best_v) {
        best = k;
        best_v = v;
      }
    }
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes)
    : num_classes_(num_classes), counts_(num_classes * num_classes, 0) {
  if (num_classes < 2) throw std::invalid_argument("confusion matrix needs >= 2 classes");
}

void ConfusionMatrix::add(std::span<const std::uint8_t> truth,
                          std::span<const std::uint8_t> pred) {
  if (truth.size() != pred.size())
    throw std::invalid_argument("confusion add: " + std::to_string(truth.size()) +
                                " truth vs " + std::to_string(pred.size()) + " pred labels");
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= num_classes_ || pred[i] >= num_classes_)
      throw std::invalid_argument("confusion add: label out of range");
    ++counts_[truth[i] * num_classes_ + pred[i]];
  }
  pixels_ += truth.size();
}

std::vector<double> ConfusionMatrix::per_class_iou() const {
  std::vector<double> iou(num_classes_);
  for (std::size_t c = 0; c < num_classes_; ++c) {
    std::uint64_t inter = counts_[c * num_classes_ + c];
    std::uint64_t truth_total = 0, pred_total = 0;
    for (std::size_t k = 0; k < num_classes_; ++k) {
      truth_total += counts_[c * num_classes_ + k];
      pred_total += counts_[k * num_classes_ + c];
    }
    std::uint64_t uni = truth_total + pred_total - inter;
    iou[c] = uni == 0 ? -1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  }
  return iou;
}

double ConfusionMatrix::miou() const {
  auto iou = per_class_iou();
  double sum = 0.0;
  std::size_t n = 0;
  for (double v : iou)
    if (v >= 0.0) {
      sum += v;
      ++n;
    }
  if (n == 0) throw std::logic_error("mIoU undefined: no class has any pixel");
  return sum / static_cast<double>(n);
}

double disagreement(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size() || a.empty())
    throw std::invalid_argument("disagreement: need equal-length non-empty label maps");
  std::size_t diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) ++diff;
  return static_cast<double>(diff) / static_cast<double>(a.size());
}

}  // namespace memreg
