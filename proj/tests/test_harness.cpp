#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "memreg/harness.hpp"

using namespace memreg;
namespace fs = std::filesystem;

namespace {

// Small enough that a full default plan runs in seconds.
TrainConfig tiny_base() {
  TrainConfig cfg;
  cfg.stage1_iters = 4;
  cfg.stage2_iters = 4;
  cfg.mr_warmup_frac = 0.5;
  cfg.batch_size = 1;
  cfg.eval_every = 2;
  cfg.image_size = 32;
  cfg.crop = 24;
  cfg.epoch_size = 4;
  cfg.eval_count = 2;
  cfg.holdout_count = 2;
  cfg.lambda_sweep = {0.0, 0.1};
  return cfg;
}

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  REQUIRE(f.good());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string metrics_line(const fs::path& run_dir) {
  std::ifstream f(run_dir / "metrics.csv");
  REQUIRE(f.good());
  std::string header, line;
  std::getline(f, header);
  std::getline(f, line);
  return line;
}

}  // namespace

TEST_CASE("default plan covers the published tables") {
  ExperimentPlan p = default_plan();
  // four stage-1 arms, two stage-2 arms, then one arm per sweep point
  REQUIRE(p.arms.size() == 12);
  const char* expected[] = {"source_only", "adv_only",   "mr_only",     "full_stage1",
                            "pseudo_only", "full_stage2", "lambda_0",    "lambda_0.01",
                            "lambda_0.05", "lambda_0.1",  "lambda_0.2",  "lambda_0.5"};
  for (std::size_t i = 0; i < 12; ++i) CHECK(p.arms[i].name == expected[i]);
  for (const auto& a : p.arms) {
    bool stage2 = a.name == "pseudo_only" || a.name == "full_stage2";
    CHECK(a.stage == (stage2 ? 2 : 1));
    if (stage2) CHECK(a.from == "full_stage1");
  }
  CHECK(p.seeds == std::vector<std::uint64_t>{1, 2, 3});
  CHECK(p.out_dir == "runs/ablation");

  SUBCASE("arms resolve to the right config deltas") {
    TrainConfig src = resolve_arm(p, p.arms[0], 9);
    CHECK_FALSE(src.use_target);
    CHECK(src.seed == 9);
    TrainConfig adv = resolve_arm(p, p.arms[1], 1);
    CHECK(adv.weights.lambda_mr == 0.0);
    CHECK(adv.weights.adv_primary > 0.0);
    TrainConfig mr = resolve_arm(p, p.arms[2], 1);
    CHECK(mr.weights.adv_primary == 0.0);
    CHECK(mr.weights.adv_aux == 0.0);
    CHECK(mr.weights.lambda_mr == doctest::Approx(0.1));
    TrainConfig full = resolve_arm(p, p.arms[3], 1);
    CHECK(full.weights.lambda_mr == doctest::Approx(0.1));
    CHECK(full.use_target);
    TrainConfig sweep = resolve_arm(p, p.arms[8], 1);  // lambda_0.05
    CHECK(sweep.weights.lambda_mr == doctest::Approx(0.05));
  }

  SUBCASE("a broken override surfaces the arm name") {
    ArmSpec bad{"bad_lr", 1, {{"seg_lr", "-1"}}, ""};
    CHECK_THROWS_WITH_AS(resolve_arm(p, bad, 1), doctest::Contains("arm bad_lr"),
                         ConfigError);
  }

  SUBCASE("the sweep tracks the base config") {
    TrainConfig base;
    base.lambda_sweep = {0.0, 0.25};
    ExperimentPlan q = default_plan(base);
    REQUIRE(q.arms.size() == 8);
    CHECK(q.arms[6].name == "lambda_0");
    CHECK(q.arms[7].name == "lambda_0.25");
  }
}

TEST_CASE("plan files parse") {
  const std::string text =
      "# nightly ablation\n"
      "seeds = 5, 7\n"
      "out = runs/custom\n"
      "base stage1_iters = 12\n"
      "base lambda_mr = 0.2\n"
      "\n"
      "arm plain = defaults\n"
      "arm hot = seg_lr=0.001; lambda_mr=0\n"
      "arm second = stage=2; from=plain; lambda_mr=0.3\n";
  ExperimentPlan p = parse_plan(text, "plan");
  CHECK(p.seeds == std::vector<std::uint64_t>{5, 7});
  CHECK(p.out_dir == "runs/custom");
  CHECK(p.base.stage1_iters == 12);
  CHECK(p.base.weights.lambda_mr == doctest::Approx(0.2));
  REQUIRE(p.arms.size() == 3);
  CHECK(p.arms[0].name == "plain");
  CHECK(p.arms[0].stage == 1);
  CHECK(p.arms[0].overrides.empty());
  CHECK(p.arms[1].overrides.size() == 2);
  CHECK(p.arms[2].stage == 2);
  CHECK(p.arms[2].from == "plain");
  REQUIRE(p.arms[2].overrides.size() == 1);
  CHECK(p.arms[2].overrides[0].first == "lambda_mr");
  CHECK(resolve_arm(p, p.arms[1], 5).seg_lr == doctest::Approx(0.001));

  SUBCASE("a plan without arms inherits the default arms") {
    ExperimentPlan q = parse_plan("seeds = 4\nbase lambda_mr = 0.3\n", "plan");
    CHECK(q.seeds == std::vector<std::uint64_t>{4});
    CHECK(q.arms.size() == default_plan().arms.size());
    CHECK(q.arms[3].name == "full_stage1");
    // inherited full_stage1 runs with the overridden base
    CHECK(resolve_arm(q, q.arms[3], 4).weights.lambda_mr == doctest::Approx(0.3));
  }

  SUBCASE("errors carry the origin and line") {
    CHECK_THROWS_WITH_AS(parse_plan("seeds = 1,1\n", "p"), doctest::Contains("duplicate seed"),
                         ConfigError);
    CHECK_THROWS_WITH_AS(parse_plan("seeds = 1,x\n", "p"), doctest::Contains("bad seed"),
                         ConfigError);
    CHECK_THROWS_WITH_AS(parse_plan("seeds = \n", "p"), doctest::Contains("empty seed"),
                         ConfigError);
    CHECK_THROWS_WITH_AS(parse_plan("arm a\n", "p"), doctest::Contains("p:1"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_plan("\n\nweird = 1\n", "p"), doctest::Contains("p:3"),
                         ConfigError);
    CHECK_THROWS_WITH_AS(parse_plan("weird = 1\n", "p"),
                         doctest::Contains("unknown statement 'weird'"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_plan("arm bad name = defaults\n", "p"),
                         doctest::Contains("unexpected token"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_plan("arm a%b = defaults\n", "p"),
                         doctest::Contains("letters, digits"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_plan("arm a = defaults\narm a = defaults\n", "p"),
                         doctest::Contains("duplicate arm"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_plan("arm a = seg_lr\n", "p"),
                         doctest::Contains("not key=value"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_plan("arm a = stage=3\n", "p"),
                         doctest::Contains("stage must be 1 or 2"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_plan("arm a = banana=1\n", "p"),
                         doctest::Contains("banana"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_plan("base banana = 1\n", "p"), doctest::Contains("banana"),
                         ConfigError);
    // an invalid combination only surfaces once the whole base is known
    CHECK_THROWS_AS(parse_plan("base crop = 72\n", "p"), ConfigError);
  }

  SUBCASE("load_plan round-trips through a file") {
    fs::path dir = scratch_dir("memreg_plan_file");
    fs::create_directories(dir);
    std::ofstream(dir / "plan.cfg") << text;
    ExperimentPlan q = load_plan((dir / "plan.cfg").string());
    CHECK(q.arms.size() == 3);
    CHECK(q.out_dir == "runs/custom");
    CHECK_THROWS_WITH_AS(load_plan((dir / "nope.cfg").string()),
                         doctest::Contains("cannot open plan file"), ConfigError);
    fs::remove_all(dir);
  }
}

TEST_CASE("run_plan validates before running") {
  ExperimentPlan p;
  p.base = tiny_base();
  CHECK_THROWS_WITH_AS(run_plan(p), doctest::Contains("no arms"), ConfigError);
  p.arms = {{"a", 1, {}, ""}, {"a", 1, {}, ""}};
  CHECK_THROWS_WITH_AS(run_plan(p), doctest::Contains("duplicate arm"), ConfigError);
  p.arms = {{"a", 1, {}, ""}};
  p.seeds.clear();
  CHECK_THROWS_WITH_AS(run_plan(p), doctest::Contains("no seeds"), ConfigError);
  p.seeds = {1};
  p.arms = {{"a", 2, {}, "nope"}};
  CHECK_THROWS_WITH_AS(run_plan(p), doctest::Contains("unknown arm 'nope'"), ConfigError);
  p.arms = {{"s1", 1, {}, ""}, {"c", 2, {}, "d"}, {"d", 2, {}, "s1"}};
  CHECK_THROWS_WITH_AS(run_plan(p), doctest::Contains("must start from a stage-1 arm"),
                       ConfigError);
  // config errors surface before any directory is created
  p.out_dir = (fs::temp_directory_path() / "memreg_never_created").string();
  fs::remove_all(p.out_dir);
  p.arms = {{"a", 1, {{"seg_lr", "-5"}}, ""}};
  CHECK_THROWS_AS(run_plan(p), ConfigError);
  CHECK_FALSE(fs::exists(p.out_dir));
}

TEST_CASE("run_plan executes the default ablation end to end") {
  ExperimentPlan plan = default_plan(tiny_base());
  plan.seeds = {1, 2};
  fs::path out = scratch_dir("memreg_micro_ablation");
  plan.out_dir = out.string();

  std::ostringstream log;
  int rc = run_plan(plan, &log);
  CHECK(rc == 0);
  CHECK(log.str().find("[full_stage1/1] done") != std::string::npos);

  SUBCASE("every arm/seed directory is populated") {
    for (const auto& arm : plan.arms)
      for (auto seed : plan.seeds) {
        fs::path d = out / arm.name / std::to_string(seed);
        CAPTURE(d.string());
        CHECK(fs::exists(d / "config.cfg"));
        CHECK(fs::exists(d / "metrics.csv"));
        CHECK_FALSE(fs::exists(d / "FAILED"));
      }
    // canonical runs keep their artifacts
    CHECK(fs::exists(out / "full_stage1" / "1" / "trace.csv"));
    CHECK(fs::exists(out / "full_stage1" / "1" / "checkpoint.bin"));
    CHECK(fs::exists(out / "full_stage2" / "2" / "checkpoint.bin"));
    // pseudo labels are materialized once per stage-1 parent run
    CHECK(fs::exists(out / "pseudo_labels" / "full_stage1_1.bin"));
    CHECK(fs::exists(out / "pseudo_labels" / "full_stage1_2.bin"));
    auto set = load_pseudo_labels((out / "pseudo_labels" / "full_stage1_1.bin").string());
    CHECK(set.labels.size() == 4);  // epoch_size of the stage-2 config
  }

  SUBCASE("identical configurations share one training run") {
    // lambda_0 == adv_only and lambda_0.1 == full_stage1 by construction
    for (auto seed : plan.seeds) {
      std::string s = std::to_string(seed);
      CHECK(fs::exists(out / "lambda_0" / s / "alias.txt"));
      CHECK_FALSE(fs::exists(out / "lambda_0" / s / "checkpoint.bin"));
      std::string alias = metrics_line(out / "lambda_0" / s);
      std::string canon = metrics_line(out / "adv_only" / s);
      CHECK(alias == "lambda_0" + canon.substr(canon.find(',')));
      std::string alias2 = metrics_line(out / "lambda_0.1" / s);
      std::string canon2 = metrics_line(out / "full_stage1" / s);
      CHECK(alias2 == "lambda_0.1" + canon2.substr(canon2.find(',')));
    }
    CHECK(slurp(out / "lambda_0" / "1" / "alias.txt").find("adv_only/1") != std::string::npos);
  }

  SUBCASE("collected rows are complete, sorted, and typed") {
    auto rows = collect_rows(out.string());
    REQUIRE(rows.size() == plan.arms.size() * plan.seeds.size());
    CHECK(rows.front().arm == "adv_only");  // sorted by arm name
    CHECK(rows.front().seed == "1");
    CHECK(rows[1].seed == "2");
    CHECK(rows.back().arm == "source_only");
    for (const auto& r : rows) {
      CAPTURE(r.arm);
      CAPTURE(r.seed);
      CHECK_FALSE(r.failed);
      CHECK(r.fused_miou >= 0.0);
      CHECK(r.fused_miou <= 1.0);
      CHECK(r.per_class_iou.size() == 5);
      bool stage2 = r.arm == "pseudo_only" || r.arm == "full_stage2";
      CHECK(r.stage == (stage2 ? 2 : 1));
      if (stage2) {
        CHECK(r.source_draws == 0.0);  // no source data in stage 2
        CHECK(r.target_draws == 4.0);
      } else if (r.arm == "source_only") {
        CHECK(r.source_draws == 4.0);
        CHECK(r.target_draws == 0.0);
      } else {
        CHECK(r.source_draws == 4.0);
        CHECK(r.target_draws == 4.0);
      }
      if (r.arm == "mr_only" || r.arm == "full_stage1") CHECK(r.lambda_mr == 0.1);
      if (r.arm == "adv_only" || r.arm == "lambda_0") CHECK(r.lambda_mr == 0.0);
    }
  }

  SUBCASE("report files derive from the per-run rows") {
    std::string csv = slurp(out / "report.csv");
    std::size_t lines = 0;
    for (char c : csv) lines += c == '\n';
    // header + one row per run + one mean row per arm
    CHECK(lines == 1 + 16 + 8);
    CHECK(csv.rfind("arm,seed,stage,lambda_mr,status,", 0) == 0);
    CHECK(csv.find(",mean,") != std::string::npos);

    std::string txt = slurp(out / "report.txt");
    CHECK(txt.find("arm means over seeds") != std::string::npos);
    CHECK(txt.find("full_stage2") != std::string::npos);
    CHECK(txt.find("failed runs") == std::string::npos);

    std::string sweep = slurp(out / "lambda_sweep.csv");
    std::size_t sweep_lines = 0;
    for (char c : sweep) sweep_lines += c == '\n';
    CHECK(sweep_lines == 3);  // header + lambda 0 + lambda 0.1
    CHECK(sweep.rfind("lambda,", 0) == 0);
    CHECK(sweep.find("\n0,") != std::string::npos);
    CHECK(sweep.find("\n0.1,") != std::string::npos);

    SUBCASE("report emission is idempotent") {
      CHECK(write_report(out.string()) == 0);
      CHECK(slurp(out / "report.csv") == csv);
      CHECK(slurp(out / "report.txt") == txt);
      CHECK(slurp(out / "lambda_sweep.csv") == sweep);
    }

    SUBCASE("re-running the whole plan reproduces the report byte for byte") {
      CHECK(run_plan(plan) == 0);
      CHECK(slurp(out / "report.csv") == csv);
      CHECK(slurp(out / "report.txt") == txt);
    }
  }

  fs::remove_all(out);
}

TEST_CASE("failed arms are quarantined, the rest still run") {
  ExperimentPlan plan;
  plan.base = tiny_base();
  plan.seeds = {1};
  plan.arms = {
      {"ok_arm", 1, {}, ""},
      {"boom", 1, {{"seg_lr", "1e12"}}, ""},       // diverges -> non-finite loss
      {"boom_twin", 1, {{"seg_lr", "1e12"}}, ""},  // alias of a failed run
      {"downstream", 2, {}, "boom"},               // starves without a checkpoint
  };
  fs::path out = scratch_dir("memreg_failed_arms");
  plan.out_dir = out.string();

  CHECK(run_plan(plan) == 1);

  CHECK(fs::exists(out / "ok_arm" / "1" / "metrics.csv"));
  CHECK_FALSE(fs::exists(out / "ok_arm" / "1" / "FAILED"));

  CHECK(fs::exists(out / "boom" / "1" / "FAILED"));
  CHECK_FALSE(fs::exists(out / "boom" / "1" / "metrics.csv"));
  CHECK(slurp(out / "boom" / "1" / "FAILED").find("non-finite loss") != std::string::npos);

  CHECK(fs::exists(out / "boom_twin" / "1" / "FAILED"));
  CHECK(fs::exists(out / "boom_twin" / "1" / "alias.txt"));

  CHECK(fs::exists(out / "downstream" / "1" / "FAILED"));
  CHECK(slurp(out / "downstream" / "1" / "FAILED").find("no pseudo labels") !=
        std::string::npos);

  auto rows = collect_rows(out.string());
  REQUIRE(rows.size() == 4);
  std::size_t failed = 0;
  for (const auto& r : rows) failed += r.failed;
  CHECK(failed == 3);

  // the report still comes out, with failures marked, and exits clean
  CHECK(write_report(out.string()) == 0);
  std::string csv = slurp(out / "report.csv");
  CHECK(csv.find("boom,1,,,FAILED") != std::string::npos);
  std::string txt = slurp(out / "report.txt");
  CHECK(txt.find("failed runs") != std::string::npos);
  CHECK(txt.find("downstream seed 1 FAILED") != std::string::npos);

  fs::remove_all(out);
}

TEST_CASE("MEMREG_THREADS caps concurrency without changing results") {
  ExperimentPlan plan;
  plan.base = tiny_base();
  plan.seeds = {1, 2};
  plan.arms = {{"a", 1, {}, ""}, {"b", 1, {{"lambda_mr", "0"}}, ""}};

  fs::path serial = scratch_dir("memreg_serial");
  plan.out_dir = serial.string();
  CHECK(run_plan(plan) == 0);

  setenv("MEMREG_THREADS", "3", 1);
  fs::path parallel = scratch_dir("memreg_parallel");
  plan.out_dir = parallel.string();
  CHECK(run_plan(plan) == 0);
  unsetenv("MEMREG_THREADS");

  for (const char* arm : {"a", "b"})
    for (const char* seed : {"1", "2"}) {
      CAPTURE(arm);
      CAPTURE(seed);
      CHECK(slurp(serial / arm / seed / "metrics.csv") ==
            slurp(parallel / arm / seed / "metrics.csv"));
      CHECK(slurp(serial / arm / seed / "trace.csv") ==
            slurp(parallel / arm / seed / "trace.csv"));
    }
  CHECK(slurp(serial / "report.csv") == slurp(parallel / "report.csv"));

  SUBCASE("a broken cap is rejected up front") {
    setenv("MEMREG_THREADS", "banana", 1);
    fs::path never = scratch_dir("memreg_never");
    plan.out_dir = never.string();
    CHECK_THROWS_WITH_AS(run_plan(plan), doctest::Contains("MEMREG_THREADS"), ConfigError);
    setenv("MEMREG_THREADS", "0", 1);
    CHECK_THROWS_AS(run_plan(plan), ConfigError);
    unsetenv("MEMREG_THREADS");
  }

  fs::remove_all(serial);
  fs::remove_all(parallel);
}
