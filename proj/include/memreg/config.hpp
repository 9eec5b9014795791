#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "memreg/losses.hpp"

namespace memreg {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// The full experiment knob set. Defaults are the published constants:
/// aux weight 0.5, adversarial weights 0.001/0.0002, lambda 0.1, batch 2,
/// SGD 2e-4 / Adam 1e-4 with poly(0.9) decay, consistency enabled after
/// a 40% warmup.
struct TrainConfig {
  std::size_t stage1_iters = 2500;
  std::size_t stage2_iters = 2500;
  double mr_warmup_frac = 0.4;  // fraction of stage1_iters without the consistency term
  std::size_t batch_size = 2;
  double seg_lr = 2e-4;
  double disc_lr = 1e-4;
  double sgd_momentum = 0.9;
  LossWeights weights;
  std::vector<double> lambda_sweep = {0.0, 0.01, 0.05, 0.1, 0.2, 0.5};
  std::uint64_t seed = 1;
  std::size_t eval_every = 250;
  bool mr_detach = true;   // stop-gradient on the teacher side of the consistency loss
  bool use_target = true;  // false = plain source-only training

  // Desk-scale data shape.
  std::size_t image_size = 64;
  std::size_t crop = 48;
  std::size_t num_classes = 5;
  double style_shift = 1.0;     // scales the whole source/target style gap
  std::size_t epoch_size = 200;  // training samples per domain
  std::size_t eval_count = 64;
  std::size_t holdout_count = 16;

  /// The poly schedule decays toward a horizon of lr_total_factor *
  /// stage iterations, so a stage uses only the early part of the
  /// curve (the published runs stop a quarter of the way in).
  double lr_total_factor = 4.0;

  std::size_t mr_warmup_iters() const {
    return static_cast<std::size_t>(mr_warmup_frac * static_cast<double>(stage1_iters));
  }

  void validate() const;

  /// Stable digest of every field; stamped into checkpoints.
  std::uint64_t hash() const;

  std::string to_string() const;
};

/// Applies one `key = value` assignment. Unknown keys and malformed
/// values raise ConfigError mentioning `where`.
void apply_config_entry(TrainConfig& cfg, const std::string& key, const std::string& value,
                        const std::string& where);

/// Parses flat key=value text ('#' starts a comment). Every setting is
/// validated; errors carry file/line positions.
TrainConfig parse_config(const std::string& text, const std::string& origin);

TrainConfig load_config(const std::string& path);

}  // namespace memreg
