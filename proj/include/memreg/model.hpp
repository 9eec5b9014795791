#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "memreg/rng.hpp"
#include "memreg/tensor.hpp"

namespace memreg {

/// One convolution's parameters plus its geometry.
struct ConvLayer {
  TensorF weight;  // [Cout, Cin, kh, kw]
  TensorF bias;    // [Cout]
  std::size_t stride = 1;
  std::size_t pad = 0;
};

/// Segmentation network with two classifiers sharing one encoder.
///
/// Encoder: four 3x3 conv/relu blocks (16 -> 32 -> 64 -> 64 channels,
/// stride 2 in the first two), so features sit at 1/4 resolution. The
/// auxiliary classifier reads the third block, the primary classifier
/// the fourth; each is dropout + 1x1 conv, softmaxed and upsampled back
/// to input resolution.
class SegModel {
 public:
  static constexpr std::size_t kStride = 4;

  SegModel(std::size_t num_classes, std::uint64_t seed);

  /// Returns (p_aux, p_primary), both [C,H,W] softmax maps at input
  /// resolution. Dropout is live only when train is true.
  std::pair<TensorF, TensorF> forward(const TensorF& image, bool train);

  std::vector<std::pair<std::string, TensorF>> named_parameters();
  void zero_grad();
  std::size_t num_classes() const { return num_classes_; }
  std::size_t parameter_count();

  /// Reseed the dropout stream (used when restoring a checkpoint).
  void reset_dropout(std::uint64_t seed) { drop_rng_ = Rng(seed, 0xd0); }

 private:
  std::size_t num_classes_;
  ConvLayer enc1_, enc2_, enc3_, enc4_;
  ConvLayer aux_head_, primary_head_;
  Rng drop_rng_;
  static constexpr double kDropoutRate = 0.1;
};

/// Patch discriminator over class-probability maps with two sigmoid
/// score heads, one at 1/4 and one at 1/8 resolution.
class Discriminator {
 public:
  static constexpr std::size_t kStride = 8;

  Discriminator(std::size_t num_classes, std::uint64_t seed);

  /// Score maps in (0,1), one per scale, for a [C,H,W] probability map.
  std::vector<TensorF> forward(const TensorF& prob_map);

  std::vector<std::pair<std::string, TensorF>> named_parameters();
  void zero_grad();
  std::size_t parameter_count();

 private:
  std::size_t num_classes_;
  ConvLayer d1_, d2_, d3_;
  ConvLayer head4_, head8_;  // named by output stride
};

/// He fan-in normal init for a conv layer, deterministic in (seed, tag).
/// `gain` scales the weight std; classifier/score heads use a damped
/// gain so fresh models start near the uniform prediction.
ConvLayer make_conv(std::size_t cout, std::size_t cin, std::size_t k, std::size_t stride,
                    std::size_t pad, std::uint64_t seed, std::uint64_t tag, double gain = 1.0);

}  // namespace memreg
