#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "memreg/checkpoint.hpp"
#include "memreg/config.hpp"
#include "memreg/data.hpp"
#include "memreg/model.hpp"

namespace memreg {

struct PipelineError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// One training iteration's record. Loss fields are batch means; the
/// metric fields are filled only on iterations where a holdout
/// evaluation ran (has_eval).
struct IterTrace {
  std::size_t iter = 0;  // 1-based, matches the CSV
  double lr = 0.0;
  double seg_primary = 0.0;
  double seg_aux = 0.0;
  double adv_g_primary = 0.0;
  double adv_g_aux = 0.0;
  double mr = 0.0;
  double disc = 0.0;
  bool has_eval = false;
  double aux_miou = 0.0;
  double primary_miou = 0.0;
  double fused_miou = 0.0;
  double disagreement_rate = 0.0;
};

/// Evaluation result (and, for training runs, the trace that led to it).
/// All mIoU values are fractions in [0,1]; reports scale to percent.
struct RunMetrics {
  std::vector<double> per_class_iou;  // fused prediction; -1 marks class absent everywhere
  double miou = 0.0;                  // mean over live classes == fused_miou
  double aux_miou = 0.0;
  double primary_miou = 0.0;
  double fused_miou = 0.0;
  double disagreement_rate = 0.0;     // argmax F_p vs argmax F_a
  std::vector<IterTrace> trace;
  std::uint64_t source_draws = 0;
  std::uint64_t target_draws = 0;
  std::size_t best_iter = 0;          // iteration of the returned checkpoint
};

/// CSV trace: one row per iteration, metric columns only on eval rows.
void write_trace_csv(std::ostream& out, const std::vector<IterTrace>& trace);
std::string trace_csv_header();

/// Model <-> checkpoint plumbing. Discriminators are optional: absent
/// in source-only and Stage-II training.
Checkpoint snapshot_models(SegModel& seg, Discriminator* d_primary, Discriminator* d_aux,
                           std::uint64_t config_hash, std::uint64_t iteration);
void restore_seg_model(const Checkpoint& ck, SegModel& seg);
/// Class count recorded in a checkpoint (from the primary head shape).
std::size_t checkpoint_num_classes(const Checkpoint& ck);

struct TrainResult {
  Checkpoint checkpoint;  // snapshot with the best holdout fused mIoU
  RunMetrics metrics;     // best holdout metrics + full trace + draw counts
};

/// Stage I: joint source/target training. Per iteration, a
/// segmentation/generator step (source CE on both heads, generator
/// adversarial terms, consistency term on target once past warmup)
/// followed by a discriminator step on detached predictions. Evaluates
/// on a held-out target split every eval_every iterations and returns
/// the best snapshot.
TrainResult train_stage1(const TrainConfig& cfg, const DomainSpec& source,
                         const DomainSpec& target, std::ostream* log = nullptr);

/// Label every target training sample [0, count) with the fused
/// argmax(F_p + 0.5 F_a) rule at inference (dropout off) and compute
/// class-balance weights over the produced maps.
PseudoLabelSet generate_pseudo_labels(const Checkpoint& ck, const DomainSpec& target,
                                      std::size_t count);

/// Stage II: target-only fine-tuning on frozen pseudo labels with the
/// consistency term, fresh optimizer, restarted schedule. Never touches
/// source data (source_draws stays 0 by construction).
TrainResult train_stage2(const TrainConfig& cfg, const Checkpoint& stage1,
                         const DomainSpec& target, const PseudoLabelSet& pseudo,
                         std::ostream* log = nullptr);

/// Aux-only / primary-only / fused mIoU, fused per-class IoU, and the
/// head-disagreement rate over labeled samples. Dropout off.
RunMetrics evaluate_samples(SegModel& model, const std::vector<SegSample>& samples);
RunMetrics evaluate(SegModel& model, const DomainSpec& spec, std::size_t count,
                    std::uint64_t index_base = kEvalIndexBase);
RunMetrics evaluate(const Checkpoint& ck, const DomainSpec& spec, std::size_t count,
                    std::uint64_t index_base = kEvalIndexBase);

}  // namespace memreg
