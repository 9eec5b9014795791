#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "memreg/harness.hpp"

namespace fs = std::filesystem;
using namespace memreg;

namespace {

TrainConfig make_config(const std::string& config_path, std::optional<std::uint64_t> seed) {
  TrainConfig cfg;
  if (!config_path.empty()) cfg = load_config(config_path);
  if (seed) cfg.seed = *seed;
  cfg.validate();
  return cfg;
}

DomainSpec domain_for(const TrainConfig& cfg, const std::string& name) {
  return name == "source" ? source_for(cfg) : target_for(cfg);
}

// Single-run commands mirror one arm/seed cell of a plan directory.
void write_run_outputs(const fs::path& out, const TrainConfig& cfg, const char* arm, int stage,
                       const TrainResult& res) {
  fs::create_directories(out);
  std::ofstream(out / "config.cfg") << cfg.to_string();
  std::ofstream trace(out / "trace.csv");
  write_trace_csv(trace, res.metrics.trace);
  save_checkpoint((out / "checkpoint.bin").string(), res.checkpoint);
  RunMetrics ev = evaluate(res.checkpoint, target_for(cfg), cfg.eval_count);
  std::ofstream(out / "metrics.csv")
      << metrics_file_content(arm, cfg.seed, stage, cfg.weights.lambda_mr, ev, res.metrics);
  std::printf("best holdout iteration %zu\n", res.metrics.best_iter);
  std::printf("eval fused mIoU %.4f (aux %.4f, primary %.4f), disagreement %.4f\n",
              ev.fused_miou, ev.aux_miou, ev.primary_miou, ev.disagreement_rate);
  std::printf("wrote %s\n", (out / "metrics.csv").c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-stage scene adaptation for semantic segmentation"};
  app.require_subcommand(1);

  std::string config_path, out, checkpoint, plan_path, pseudo_path, domain = "target";
  std::optional<std::uint64_t> seed;
  std::size_t count = 0;
  std::uint64_t start = 0;
  bool unlabeled = false;
  int exit_code = 0;

  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "config file (defaults when omitted)")
        ->check(CLI::ExistingFile);
    cmd->add_option("--seed", seed, "override the config seed");
  };

  auto* gen = app.add_subcommand("gen-data", "materialize a dataset container");
  add_config(gen);
  gen->add_option("--domain", domain, "source|target")
      ->required()
      ->check(CLI::IsMember({"source", "target"}));
  gen->add_option("--count", count, "number of samples")->required()->check(CLI::PositiveNumber);
  gen->add_option("--start", start, "first sample index");
  gen->add_option("--out", out, "output file")->required();
  gen->add_flag("--unlabeled", unlabeled, "omit the label maps");
  gen->callback([&] {
    TrainConfig cfg = make_config(config_path, seed);
    export_dataset(out, domain_for(cfg, domain), start, count, !unlabeled);
    std::printf("wrote %zu %s samples to %s (checksum %016llx)\n", count, domain.c_str(),
                out.c_str(), static_cast<unsigned long long>(file_checksum(out)));
  });

  auto* s1 = app.add_subcommand("train-stage1", "train with adversarial alignment + consistency");
  add_config(s1);
  s1->add_option("--out", out, "run directory")->required();
  s1->callback([&] {
    TrainConfig cfg = make_config(config_path, seed);
    TrainResult res = train_stage1(cfg, source_for(cfg), target_for(cfg), &std::cout);
    write_run_outputs(out, cfg, "stage1", 1, res);
  });

  auto* pl = app.add_subcommand("pseudo-label", "freeze fused pseudo labels from a checkpoint");
  add_config(pl);
  pl->add_option("--checkpoint", checkpoint, "stage-1 checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  pl->add_option("--count", count, "label maps to generate (default: config epoch_size)");
  pl->add_option("--out", out, "output file")->required();
  pl->callback([&] {
    TrainConfig cfg = make_config(config_path, seed);
    Checkpoint ck = load_checkpoint(checkpoint);
    std::size_t n = count ? count : cfg.epoch_size;
    PseudoLabelSet set = generate_pseudo_labels(ck, target_for(cfg), n);
    save_pseudo_labels(out, set);
    std::printf("wrote %zu pseudo-label maps (%zux%zu, %zu classes) to %s\n", set.labels.size(),
                set.height, set.width, set.num_classes, out.c_str());
  });

  auto* s2 = app.add_subcommand("train-stage2", "self-train on frozen pseudo labels");
  add_config(s2);
  s2->add_option("--checkpoint", checkpoint, "stage-1 checkpoint to start from")
      ->required()
      ->check(CLI::ExistingFile);
  s2->add_option("--pseudo", pseudo_path, "pseudo-label file")
      ->required()
      ->check(CLI::ExistingFile);
  s2->add_option("--out", out, "run directory")->required();
  s2->callback([&] {
    TrainConfig cfg = make_config(config_path, seed);
    Checkpoint ck = load_checkpoint(checkpoint);
    PseudoLabelSet pseudo = load_pseudo_labels(pseudo_path);
    TrainResult res = train_stage2(cfg, ck, target_for(cfg), pseudo, &std::cout);
    write_run_outputs(out, cfg, "stage2", 2, res);
  });

  auto* ev = app.add_subcommand("eval", "score a checkpoint on a held-out split");
  add_config(ev);
  ev->add_option("--checkpoint", checkpoint, "checkpoint to score")
      ->required()
      ->check(CLI::ExistingFile);
  ev->add_option("--domain", domain, "source|target (default target)")
      ->check(CLI::IsMember({"source", "target"}));
  ev->add_option("--count", count, "samples to score (default: config eval_count)");
  ev->callback([&] {
    TrainConfig cfg = make_config(config_path, seed);
    Checkpoint ck = load_checkpoint(checkpoint);
    std::size_t n = count ? count : cfg.eval_count;
    RunMetrics m = evaluate(ck, domain_for(cfg, domain), n);
    std::printf("class  iou\n");
    for (std::size_t c = 0; c < m.per_class_iou.size(); ++c) {
      if (m.per_class_iou[c] < 0.0)
        std::printf("%5zu  absent\n", c);
      else
        std::printf("%5zu  %.4f\n", c, m.per_class_iou[c]);
    }
    std::printf("aux mIoU %.4f | primary mIoU %.4f | fused mIoU %.4f | disagreement %.4f\n",
                m.aux_miou, m.primary_miou, m.fused_miou, m.disagreement_rate);
  });

  auto* ab = app.add_subcommand("ablate", "run an experiment plan (default: the full ablation)");
  add_config(ab);
  ab->add_option("--plan", plan_path, "plan file (omit for the standard arms)")
      ->check(CLI::ExistingFile);
  ab->add_option("--out", out, "override the plan's output directory");
  ab->callback([&] {
    ExperimentPlan plan =
        plan_path.empty() ? default_plan(make_config(config_path, seed)) : load_plan(plan_path);
    if (!out.empty()) plan.out_dir = out;
    exit_code = run_plan(plan, &std::cout);
    std::printf("report: %s\n", (fs::path(plan.out_dir) / "report.txt").c_str());
  });

  auto* rep = app.add_subcommand("report", "rebuild report files from a run directory");
  rep->add_option("--out", out, "run directory")->required();
  rep->callback([&] {
    if (!fs::is_directory(out))
      throw ConfigError("'" + out + "' is not a run directory");
    write_report(out);
    std::printf("wrote %s and %s\n", (fs::path(out) / "report.csv").c_str(),
                (fs::path(out) / "report.txt").c_str());
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;  // 0 covers --help
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return exit_code;
}
