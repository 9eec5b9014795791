#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "memreg/tensor.hpp"

namespace memreg {

/// Per-pixel argmax over the class axis of a [C,H,W] map; ties break
/// toward the lower class index.
std::vector<std::uint8_t> argmax_map(const TensorF& probs);

/// Aggregated confusion counts; IoU is computed from the totals, so
/// accumulation over many images is exact.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes);

  void add(std::span<const std::uint8_t> truth, std::span<const std::uint8_t> pred);

  /// intersection / union per class. Classes absent from both truth and
  /// prediction (union zero) are reported as -1 and excluded from miou().
  std::vector<double> per_class_iou() const;
  double miou() const;

  std::uint64_t pixel_count() const { return pixels_; }
  std::size_t num_classes() const { return num_classes_; }

 private:
  std::size_t num_classes_;
  std::vector<std::uint64_t> counts_;  // [truth * C + pred]
  std::uint64_t pixels_ = 0;
};

/// Fraction of positions where the two label maps differ.
double disagreement(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);

}  // namespace memreg
