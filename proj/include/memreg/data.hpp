#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "memreg/losses.hpp"
#include "memreg/rng.hpp"
#include "memreg/tensor.hpp"

namespace memreg {

/// Photometric parameters distinguishing a domain. Label semantics
/// (shape -> class) are shared by all domains; only style varies.
struct StyleParams {
  std::vector<std::array<float, 3>> palette;  // per-class base RGB
  float noise_sigma = 0.0f;                   // additive Gaussian noise
  float texture_freq = 0.0f;                  // low-frequency multiplicative texture
  float texture_amp = 0.0f;
  float illum_strength = 0.0f;                // linear illumination gradient
};

struct DomainSpec {
  std::uint64_t seed = 0;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t num_classes = 5;  // background + circle, square, triangle, bar
  StyleParams style;
};

/// Source domain: clean palette, mild noise, no texture/illumination.
DomainSpec source_domain(std::uint64_t seed);

/// Target domain: same geometry distribution, shifted style. `shift` in
/// [0,1] scales the whole gap (palette rotation mix, extra noise,
/// texture, illumination); 1.0 is the default experimental gap.
DomainSpec target_domain(std::uint64_t seed, double shift = 1.0);

struct SegSample {
  TensorF image;                    // [3,H,W] in [0,1]
  std::vector<std::uint8_t> label;  // [H*W], empty iff !has_label
  bool has_label = true;
};

/// Deterministic sample: same (spec, index) gives identical bytes.
/// Geometry (shape placement, hence labels) depends only on (seed,
/// index); style draws come from a separate stream so two specs that
/// share a seed produce identical label maps in different styles.
SegSample generate(const DomainSpec& spec, std::uint64_t index);

/// Index ranges reserved for the evaluation splits so training never
/// sees them.
inline constexpr std::uint64_t kHoldoutIndexBase = 1'000'000'000ULL;
inline constexpr std::uint64_t kEvalIndexBase = 2'000'000'000ULL;

struct PseudoLabelSet;

/// Seeded epoch-shuffled batch stream with optional random crop and
/// label stripping (target training data is unlabeled by contract).
/// An overlay substitutes stored pseudo labels for the generated ground
/// truth before cropping, so image and label crops stay aligned.
class BatchIterator {
 public:
  struct Options {
    std::size_t crop = 0;           // 0 = no crop
    bool strip_labels = false;
    std::uint64_t index_base = 0;
    std::size_t epoch_size = 200;   // distinct sample indices per epoch
    const PseudoLabelSet* overlay = nullptr;  // not owned; outlives the iterator
  };

  BatchIterator(DomainSpec spec, std::size_t batch_size, std::uint64_t shuffle_seed,
                Options opts);
  BatchIterator(DomainSpec spec, std::size_t batch_size, std::uint64_t shuffle_seed)
      : BatchIterator(std::move(spec), batch_size, shuffle_seed, Options()) {}

  std::vector<SegSample> next();

  /// Total samples handed out so far (the pipeline uses this to prove a
  /// stage never touched a stream).
  std::uint64_t draws() const { return draws_; }

 private:
  void reshuffle();

  DomainSpec spec_;
  std::size_t batch_size_;
  Options opts_;
  Rng rng_;
  std::vector<std::uint64_t> order_;
  std::size_t cursor_ = 0;
  std::uint64_t epoch_ = 0;
  std::uint64_t shuffle_seed_;
  std::uint64_t draws_ = 0;
};

/// A materialized dataset (for fixtures and cross-implementation reads).
struct Dataset {
  DomainSpec spec;
  std::vector<std::pair<std::uint64_t, SegSample>> samples;  // (index, sample)
};

/// Container layout (little-endian): magic "MRSEGDS1", u32 version,
/// spec echo (u64 seed, u32 H, u32 W, u32 C, C*3 f32 palette, 4 f32
/// style scalars), u32 sample count, then per sample: u64 index,
/// u8 has_label, 3*H*W f32 image, H*W u8 labels when present.
void export_dataset(const std::string& path, const DomainSpec& spec, std::uint64_t start_index,
                    std::size_t count, bool with_labels = true);
Dataset import_dataset(const std::string& path);

/// FNV-1a over the exact container bytes; pinned in tests so any change
/// to generation or serialization is caught.
std::uint64_t file_checksum(const std::string& path);

/// Frozen pseudo-labels for Stage-II, with the class-balance weights
/// computed from them. Layout: magic "MRSEGPL1", u32 version, u32 H,
/// u32 W, u32 C, C f32 weights, u32 count, then per record u64 index +
/// H*W u8 labels.
struct PseudoLabelSet {
  std::size_t height = 0, width = 0, num_classes = 0;
  ClassBalanceWeights weights;
  std::vector<std::pair<std::uint64_t, std::vector<std::uint8_t>>> labels;
};

void save_pseudo_labels(const std::string& path, const PseudoLabelSet& set);
PseudoLabelSet load_pseudo_labels(const std::string& path);

}  // namespace memreg
