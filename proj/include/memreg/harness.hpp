#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "memreg/config.hpp"
#include "memreg/data.hpp"
#include "memreg/pipeline.hpp"

namespace memreg {

/// A named experiment arm: a config delta over the plan's base config.
/// Stage-2 arms name the stage-1 arm whose checkpoint (and pseudo
/// labels) they start from.
struct ArmSpec {
  std::string name;
  int stage = 1;  // 1 or 2
  std::vector<std::pair<std::string, std::string>> overrides;  // config key -> value
  std::string from = "full_stage1";  // stage-2 only: upstream stage-1 arm
};

struct ExperimentPlan {
  TrainConfig base;
  std::vector<ArmSpec> arms;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string out_dir = "runs/ablation";
};

/// The standard ablation: the four stage-1 arms and two stage-2 arms
/// behind the published tables, plus one arm per sweep point of
/// base.lambda_sweep (named lambda_<value>).
ExperimentPlan default_plan(const TrainConfig& base = TrainConfig{});

/// Flat plan grammar, one statement per line ('#' comments):
///   seeds = 1,2,3
///   out = runs/tables
///   base <config-key> = <value>
///   arm <name> = defaults
///   arm <name> = key=value; key=value
/// Arm overrides accept two pseudo-keys: stage=2 marks a stage-2 arm,
/// from=<arm> names its upstream stage-1 arm. When a plan defines no
/// arms it inherits the default plan's arms.
ExperimentPlan parse_plan(const std::string& text, const std::string& origin);
ExperimentPlan load_plan(const std::string& path);

/// Shapes-world domains for a config (the config seed doubles as the
/// world seed, so each replication draws a fresh world).
DomainSpec source_for(const TrainConfig& cfg);
DomainSpec target_for(const TrainConfig& cfg);

/// The fully resolved config an arm runs with for a given seed.
TrainConfig resolve_arm(const ExperimentPlan& plan, const ArmSpec& arm, std::uint64_t seed);

/// One parsed row of a per-run metrics.csv (or a FAILED marker).
struct ReportRow {
  std::string arm;
  std::string seed;  // decimal, or "mean" in aggregate rows
  int stage = 0;
  double lambda_mr = 0.0;
  bool failed = false;
  double aux_miou = 0.0;
  double primary_miou = 0.0;
  double fused_miou = 0.0;
  double disagreement_rate = 0.0;
  // doubles so aggregate rows can carry fractional means
  double source_draws = 0.0;
  double target_draws = 0.0;
  double best_iter = 0.0;
  std::vector<double> per_class_iou;
  std::string raw_line;  // exact CSV row as stored on disk
};

/// Scan a run directory for completed and failed arm runs, in sorted
/// (arm, numeric seed) order.
std::vector<ReportRow> collect_rows(const std::string& out_dir);

/// The metrics.csv content (header plus one row) for a completed run;
/// `eval` supplies the quality numbers, `train` the draw/best-iter
/// bookkeeping. Shared by the plan runner and the single-run CLI paths.
std::string metrics_file_content(const std::string& arm, std::uint64_t seed, int stage,
                                 double lambda_mr, const RunMetrics& eval,
                                 const RunMetrics& train);

/// Execute every arm x seed (deduplicating arms that resolve to the
/// same configuration), then emit the report files. Returns 0 when all
/// arms succeeded, 1 when any arm failed (failures are recorded as
/// FAILED markers and the remaining arms still run). Honors
/// MEMREG_THREADS as a cap on concurrently running arms.
int run_plan(const ExperimentPlan& plan, std::ostream* log = nullptr);

/// (Re)derive report.csv, report.txt, and - when lambda arms exist -
/// lambda_sweep.csv from the per-run files. Idempotent: byte-identical
/// on re-runs over the same directory.
int write_report(const std::string& out_dir);

}  // namespace memreg
