#include <string>

#include "doctest.h"
#include "memreg/config.hpp"

using namespace memreg;

TEST_CASE("empty config yields the published defaults") {
  auto cfg = parse_config("", "mem");
  CHECK(cfg.weights.lambda_mr == 0.1);
  CHECK(cfg.weights.aux_seg == 0.5);
  CHECK(cfg.weights.adv_primary == 0.001);
  CHECK(cfg.weights.adv_aux == 0.0002);
  CHECK(cfg.seg_lr == 2e-4);
  CHECK(cfg.disc_lr == 1e-4);
  CHECK(cfg.batch_size == 2);
  CHECK(cfg.mr_warmup_frac == 0.4);
  CHECK(cfg.stage1_iters == 2500);
  CHECK(cfg.mr_warmup_iters() == 1000);
  CHECK(cfg.mr_detach);
  REQUIRE(cfg.lambda_sweep.size() == 6);
  CHECK(cfg.lambda_sweep[0] == 0.0);
  CHECK(cfg.lambda_sweep[5] == 0.5);
}

TEST_CASE("overrides, comments, and whitespace") {
  auto cfg = parse_config(
      "# experiment overrides\n"
      "lambda_mr = 0.5\n"
      "  seed=9   # inline comment\n"
      "\n"
      "lambda_sweep = 0, 0.1 ,0.3\n"
      "mr_detach = false\n"
      "use_target = no\n",
      "t");
  CHECK(cfg.weights.lambda_mr == 0.5);
  CHECK(cfg.seed == 9);
  REQUIRE(cfg.lambda_sweep.size() == 3);
  CHECK(cfg.lambda_sweep[2] == 0.3);
  CHECK_FALSE(cfg.mr_detach);
  CHECK_FALSE(cfg.use_target);
}

TEST_CASE("parse errors name the key and the line") {
  auto expect_error = [](const std::string& text, const std::string& needle) {
    try {
      parse_config(text, "cfg");
      FAIL("expected ConfigError for: " << text);
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
    }
  };
  expect_error("lambda_mr = banana\n", "lambda_mr");
  expect_error("\n\nlambda_mr = banana\n", "cfg:3");
  expect_error("banana = 1\n", "unknown config key 'banana'");
  expect_error("stage1_iters = 2.5\n", "stage1_iters");
  expect_error("stage1_iters = -3\n", "stage1_iters");
  expect_error("mr_detach = maybe\n", "boolean");
  expect_error("just some text\n", "key = value");
  expect_error("= 5\n", "missing key");
  expect_error("seed =\n", "missing value");
  expect_error("lambda_sweep = 1,,2\n", "empty element");
}

TEST_CASE("validation rejects inconsistent settings") {
  CHECK_THROWS_AS(parse_config("stage1_iters = 0\n", "v"), ConfigError);
  CHECK_THROWS_AS(parse_config("mr_warmup_frac = 1.0\n", "v"), ConfigError);
  CHECK_THROWS_AS(parse_config("seg_lr = 0\n", "v"), ConfigError);
  CHECK_THROWS_AS(parse_config("seg_lr = -1e-4\n", "v"), ConfigError);
  CHECK_THROWS_AS(parse_config("lambda_mr = -0.1\n", "v"), ConfigError);
  CHECK_THROWS_AS(parse_config("crop = 50\n", "v"), ConfigError);       // not a multiple of 8
  CHECK_THROWS_AS(parse_config("crop = 72\n", "v"), ConfigError);       // larger than image
  CHECK_THROWS_AS(parse_config("style_shift = 1.5\n", "v"), ConfigError);
  CHECK_THROWS_AS(parse_config("num_classes = 1\n", "v"), ConfigError);
  CHECK_THROWS_AS(parse_config("batch_size = 0\n", "v"), ConfigError);
}

TEST_CASE("round trip through to_string is stable and hash tracks content") {
  TrainConfig cfg;
  cfg.weights.lambda_mr = 0.05;
  cfg.seed = 77;
  auto text = cfg.to_string();
  auto back = parse_config(text, "rt");
  CHECK(back.to_string() == text);
  CHECK(back.hash() == cfg.hash());
  TrainConfig other = cfg;
  other.seed = 78;
  CHECK(other.hash() != cfg.hash());
}

TEST_CASE("missing file is a config error") {
  CHECK_THROWS_AS(load_config("/nonexistent/path.cfg"), ConfigError);
}
