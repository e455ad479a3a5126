#include <doctest.h>

#include "nullbus/config.hpp"

using namespace nullbus;

TEST_CASE("presets expand to valid fully explicit configs") {
  const Config desk = desk_preset();
  desk.validate();
  CHECK(desk.data.image_size == 96);
  CHECK(desk.model.c_g == 64);
  CHECK(desk.model.width_multiplier == doctest::Approx(1.0 / 16.0));

  const Config paper = paper_preset();
  paper.validate();
  CHECK(paper.data.image_size == 352);
  CHECK(paper.model.c_g == 2048);
  CHECK(paper.model.c_l == 512);
  CHECK(paper.model.decoder_channels == std::vector<int64_t>{256, 128, 64, 32});
  CHECK(paper.model.aspp_rates == std::vector<int>{1, 6, 12, 18});

  CHECK_THROWS_AS(preset_for("cluster"), std::invalid_argument);
}

TEST_CASE("json parsing: preset base plus overrides") {
  const Config cfg = parse_config_json(R"({
    "scale": "desk",
    "seed": 9,
    "train": {"epochs": 3, "prompt_dropout": 0.5},
    "model": {"C_l": 48}
  })");
  CHECK(cfg.seed == 9);
  CHECK(cfg.train.epochs == 3);
  CHECK(cfg.train.prompt_dropout == 0.5);
  CHECK(cfg.model.c_l == 48);
  CHECK(cfg.data.image_size == 96);  // untouched preset value
}

TEST_CASE("unknown keys are rejected with their path") {
  CHECK_THROWS_WITH_AS(parse_config_json(R"({"scal": "desk"})"),
                       doctest::Contains("unknown config key: scal"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config_json(R"({"train": {"epoch": 3}})"),
                       doctest::Contains("train.epoch"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config_json(R"({"model": {"cg": 4}})"),
                       doctest::Contains("model.cg"), std::invalid_argument);
}

TEST_CASE("validation catches out-of-range settings") {
  CHECK_THROWS_AS(parse_config_json(R"({"train": {"prompt_dropout": 1.5}})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_config_json(R"({"train": {"fold_index": 7}})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config_json(R"({"data": {"image_size": 100}})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config_json(R"({"train": {"ablation": "zero_prompts"}})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_config_json(R"({"model": {"tcm_stages": [3]}})"), std::invalid_argument);
}

TEST_CASE("snapshot round trip is canonical and hash-stable") {
  Config cfg = desk_preset();
  cfg.seed = 77;
  cfg.data.manifest = "pool.csv";
  const std::string snap = config_to_json(cfg);
  const Config back = parse_config_json(snap);
  CHECK(config_to_json(back) == snap);
  CHECK(config_hash(back) == config_hash(cfg));

  Config other = cfg;
  other.train.learning_rate *= 2;
  CHECK(config_hash(other) != config_hash(cfg));
}

TEST_CASE("ablation name round trip") {
  for (const char* name : {"full", "zero_text", "zero_local", "zero_global"})
    CHECK(to_string(ablation_from_string(name)) == name);
}
