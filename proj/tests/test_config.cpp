#include <doctest.h>

#include <sstream>

#include "bcmda/config.hpp"

using namespace bcmda;

TEST_CASE("defaults validate and expose the documented values") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.lambda_fix == doctest::Approx(0.75));
  CHECK(cfg.alpha == doctest::Approx(0.70));
  CHECK(cfg.tau_temp == doctest::Approx(0.05));
  CHECK(cfg.tau == doctest::Approx(0.95));
  CHECK(cfg.w_prime_ratio == 4);
  CHECK(cfg.ema_decay == doctest::Approx(0.99));
  CHECK(cfg.lr0 == doctest::Approx(0.03));
  CHECK(cfg.momentum == doctest::Approx(0.9));
  CHECK(cfg.weight_decay == doctest::Approx(1e-4));
  CHECK(cfg.t_max == 2000);
  CHECK(cfg.ablation.fixmix);
  CHECK(cfg.ablation.pdmix);
  CHECK(cfg.ablation.avg);
  CHECK(cfg.ablation.bpa);
  CHECK(cfg.ablation.pplc);
  CHECK(cfg.lr_schedule == LrSchedule::kPoly);
  CHECK(cfg.same_domain == SameDomainMode::kAuto);
}

TEST_CASE("parse_config reads keys, comments, and blank lines") {
  std::istringstream in(
      "# experiment\n"
      "lambda_fix = 0.5\n"
      "\n"
      "t_max = 10   # short run\n"
      "lr_schedule = constant\n"
      "same_domain = always\n"
      "pdmix = off\n"
      "seed = 42\n");
  const TrainConfig cfg = parse_config(in, "inline");
  CHECK(cfg.lambda_fix == doctest::Approx(0.5));
  CHECK(cfg.t_max == 10);
  CHECK(cfg.lr_schedule == LrSchedule::kConstant);
  CHECK(cfg.same_domain == SameDomainMode::kAlways);
  CHECK_FALSE(cfg.ablation.pdmix);
  CHECK(cfg.ablation.fixmix);  // untouched keys keep defaults
  CHECK(cfg.seed == 42);
}

TEST_CASE("parse_config rejects malformed input") {
  SUBCASE("unknown key") {
    std::istringstream in("no_such_key = 1\n");
    CHECK_THROWS_AS(parse_config(in, "x"), FormatError);
  }
  SUBCASE("duplicate key") {
    std::istringstream in("seed = 1\nseed = 2\n");
    CHECK_THROWS_AS(parse_config(in, "x"), FormatError);
  }
  SUBCASE("missing equals") {
    std::istringstream in("seed 1\n");
    CHECK_THROWS_AS(parse_config(in, "x"), FormatError);
  }
  SUBCASE("bad number") {
    std::istringstream in("lr0 = fast\n");
    CHECK_THROWS_AS(parse_config(in, "x"), FormatError);
  }
  SUBCASE("bad enum value") {
    std::istringstream in("lr_schedule = cosine\n");
    CHECK_THROWS_AS(parse_config(in, "x"), FormatError);
  }
  SUBCASE("out-of-range value fails validation") {
    std::istringstream in("lambda_fix = 1.5\n");
    CHECK_THROWS_AS(parse_config(in, "x"), ParameterError);
  }
  SUBCASE("odd batch size") {
    std::istringstream in("batch_size = 3\n");
    CHECK_THROWS_AS(parse_config(in, "x"), ParameterError);
  }
}

TEST_CASE("canonical text round-trips every field") {
  TrainConfig cfg;
  cfg.lambda_fix = 0.33;
  cfg.alpha = 1.25;
  cfg.tau = 0.875;
  cfg.t_max = 77;
  cfg.batch_size = 6;
  cfg.seed = 1234567;
  cfg.ablation.bpa = false;
  cfg.ablation.pplc = false;
  cfg.lr_schedule = LrSchedule::kConstant;
  cfg.same_domain = SameDomainMode::kNever;
  cfg.checkpoint_interval = 11;
  cfg.levels = 2;
  cfg.base_channels = 4;
  cfg.feature_dim = 8;

  const std::string text = config_text(cfg);
  std::istringstream in(text);
  const TrainConfig back = parse_config(in, "roundtrip");
  CHECK(config_text(back) == text);
  CHECK(back.lambda_fix == cfg.lambda_fix);
  CHECK(back.alpha == cfg.alpha);
  CHECK(back.t_max == cfg.t_max);
  CHECK(back.batch_size == cfg.batch_size);
  CHECK(back.seed == cfg.seed);
  CHECK(back.ablation.bpa == cfg.ablation.bpa);
  CHECK(back.ablation.pplc == cfg.ablation.pplc);
  CHECK(back.lr_schedule == cfg.lr_schedule);
  CHECK(back.same_domain == cfg.same_domain);
}

TEST_CASE("fingerprint is stable and sensitive") {
  TrainConfig a;
  TrainConfig b;
  CHECK(config_fingerprint(a) == config_fingerprint(b));
  b.seed = 999;
  CHECK(config_fingerprint(a) != config_fingerprint(b));
  TrainConfig c;
  c.ablation.avg = false;
  CHECK(config_fingerprint(a) != config_fingerprint(c));
  CHECK(config_fingerprint(a).size() == 16);  // 64-bit hex
}

TEST_CASE("validate guards each range") {
  auto bad = [](auto mutate) {
    TrainConfig cfg;
    mutate(cfg);
    CHECK_THROWS_AS(cfg.validate(), ParameterError);
  };
  bad([](TrainConfig& c) { c.lambda_fix = -0.1; });
  bad([](TrainConfig& c) { c.alpha = 0.0; });
  bad([](TrainConfig& c) { c.tau_temp = 0.0; });
  bad([](TrainConfig& c) { c.tau = 1.0; });
  bad([](TrainConfig& c) { c.w_prime_ratio = 0; });
  bad([](TrainConfig& c) { c.ema_decay = 1.0; });
  bad([](TrainConfig& c) { c.lr0 = 0.0; });
  bad([](TrainConfig& c) { c.momentum = -0.5; });
  bad([](TrainConfig& c) { c.weight_decay = -1.0; });
  bad([](TrainConfig& c) { c.t_max = 0; });
  bad([](TrainConfig& c) { c.batch_size = 0; });
  bad([](TrainConfig& c) { c.batch_size = 5; });
  bad([](TrainConfig& c) { c.classes = 1; });
  bad([](TrainConfig& c) { c.levels = 0; });
  bad([](TrainConfig& c) { c.base_channels = 0; });
  bad([](TrainConfig& c) { c.feature_dim = 0; });
  bad([](TrainConfig& c) { c.checkpoint_interval = -1; });
}

TEST_CASE("load_config reports missing files") {
  CHECK_THROWS_AS(load_config("/nonexistent/path/run.cfg"), IoError);
}
