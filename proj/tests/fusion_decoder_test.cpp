#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "nullbus/fusion_decoder.hpp"
#include "nullbus/training.hpp"
#include "test_util.hpp"

using namespace nullbus;
using nbtest::random_tensor;

namespace {

// A narrow desk variant keeps per-test forwards cheap.
Config tiny_config(uint64_t seed = 1) {
  Config cfg = desk_preset();
  cfg.seed = seed;
  cfg.data.image_size = 64;
  cfg.text.dim = 16;
  cfg.model.patch_size = 8;
  cfg.model.token_dim = 16;
  cfg.model.c_g = 16;
  cfg.model.width_multiplier = 1.0 / 32.0;
  cfg.model.c_l = 16;
  cfg.model.c_f = 16;
  cfg.model.decoder_channels = {8, 8, 8, 8};
  cfg.validate();
  return cfg;
}

Tensor test_image(int64_t size, uint64_t seed) {
  Rng rng(seed);
  Tensor img({size, size});
  for (int64_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform();
  return img;
}

}  // namespace

TEST_CASE("upfusion stage doubles the resolution onto the skip grid") {
  Rng rng(3);
  UpFusionStage stage(6, 4, 8, 2, rng);
  ad::Var x = ad::Var::constant(random_tensor(rng, {6, 11, 11}));
  ad::Var skip = ad::Var::constant(random_tensor(rng, {4, 22, 22}));
  const ad::Var y = stage.forward(x, skip);
  CHECK(y.value().shape() == std::vector<int64_t>{8, 22, 22});

  ad::Var bad_skip = ad::Var::constant(random_tensor(rng, {4, 23, 23}));
  CHECK_THROWS_WITH_AS(stage.forward(x, bad_skip), doctest::Contains("spatial mismatch"),
                       std::invalid_argument);
}

TEST_CASE("squeeze-excitation gates lie in (0,1) and gate=1 is a no-op") {
  Rng rng(5);
  nn::SEBlock se(6, 2, rng);
  ad::Var x = ad::Var::constant(random_tensor(rng, {6, 4, 4}));
  const Tensor gates = se.gates(x).value();
  for (int64_t c = 0; c < 6; ++c) {
    REQUIRE(gates[c] > 0.0);
    REQUIRE(gates[c] < 1.0);
  }
  // Scaling by an all-ones gate leaves channels unchanged.
  ad::Var forced = ad::scale_channels(x, ad::Var::constant(Tensor::full({6}, 1.0)));
  CHECK(bitwise_equal(forced.value(), x.value()));
  // The block output equals channel-wise gate * input.
  const Tensor y = se.forward(x).value();
  for (int64_t c = 0; c < 6; ++c)
    for (int64_t i = 0; i < 16; ++i)
      REQUIRE(y[c * 16 + i] == doctest::Approx(gates[c] * x.value()[c * 16 + i]).epsilon(1e-15));
}

TEST_CASE("four chained stages climb 11 -> 176") {
  Rng rng(7);
  std::vector<std::unique_ptr<UpFusionStage>> stages;
  const int64_t skip_c[4] = {8, 6, 5, 4};
  int64_t in_c = 10;
  for (int i = 0; i < 4; ++i) {
    stages.push_back(std::make_unique<UpFusionStage>(in_c, skip_c[i], 8, 2, rng));
    in_c = 8;
  }
  ad::Var d = ad::Var::constant(random_tensor(rng, {10, 11, 11}));
  int64_t hw = 22;
  for (int i = 0; i < 4; ++i) {
    ad::Var skip = ad::Var::constant(random_tensor(rng, {skip_c[i], hw, hw}));
    d = stages[static_cast<size_t>(i)]->forward(d, skip);
    hw *= 2;
  }
  CHECK(d.value().shape() == std::vector<int64_t>{8, 176, 176});
}

TEST_CASE("fuse concatenates F_g first and is order-sensitive") {
  const Config cfg = tiny_config(11);
  auto model = build_model(cfg);
  Rng rng(13);
  ad::Var fg = ad::Var::constant(random_tensor(rng, {16, 2, 2}));
  ad::Var fl = ad::Var::constant(random_tensor(rng, {16, 2, 2}));
  const Tensor ab = model->fuse(fg, fl).value();
  CHECK(ab.shape() == std::vector<int64_t>{16, 2, 2});
  const Tensor ba = model->fuse(fl, fg).value();
  CHECK_FALSE(bitwise_equal(ab, ba));

  ad::Var small = ad::Var::constant(random_tensor(rng, {16, 1, 1}));
  CHECK_THROWS_WITH_AS(model->fuse(fg, small), doctest::Contains("misalignment"),
                       std::invalid_argument);
}

TEST_CASE("zeroing the F_g slice of the 1x1 fuse weights removes F_g influence") {
  const Config cfg = tiny_config(17);
  auto model = build_model(cfg);
  // Zero the first C_g input-channel block of the reduction conv.
  for (auto& p : model->named_params()) {
    if (p.name == "fuse_reduce.conv.w") {
      Tensor& w = p.var.value_mut();  // {C_f, C_g+C_l, 1, 1}
      for (int64_t o = 0; o < w.dim(0); ++o)
        for (int64_t c = 0; c < cfg.model.c_g; ++c) w[(o * w.dim(1) + c)] = 0.0;
    }
  }
  Rng rng(19);
  ad::Var fl = ad::Var::constant(random_tensor(rng, {16, 2, 2}));
  const Tensor a = model->fuse(ad::Var::constant(Tensor({16, 2, 2})), fl).value();
  const Tensor b = model->fuse(ad::Var::constant(random_tensor(rng, {16, 2, 2})), fl).value();
  CHECK(bitwise_equal(a, b));
}

TEST_CASE("forward emits the configured output size for all four regimes") {
  const Config cfg = tiny_config(23);
  auto model = build_model(cfg);
  const Tensor img = test_image(64, 2);
  const PromptPair regimes[4] = {
      {std::string("both prompts"), std::string("are here")},
      {std::string("global only"), std::nullopt},
      {std::nullopt, std::string("local only")},
      {std::nullopt, std::nullopt},
  };
  ad::NoGradGuard ng;
  for (const auto& pair : regimes) {
    ForwardTrace trace;
    const ad::Var out = model->forward(img, pair, Mode::eval, nullptr, "", &trace);
    REQUIRE(out.value().shape() == std::vector<int64_t>{1, 64, 64});
    REQUIRE(trace.fg_shape == std::vector<int64_t>{16, 2, 2});
    REQUIRE(trace.fl_shape == std::vector<int64_t>{16, 2, 2});
  }
  CHECK_THROWS_AS(model->forward(test_image(32, 3), regimes[0], Mode::eval, nullptr),
                  std::invalid_argument);
}

TEST_CASE("eval forward is bitwise deterministic") {
  const Config cfg = tiny_config(29);
  auto model = build_model(cfg);
  const Tensor img = test_image(64, 4);
  const PromptPair pair{std::string("a mass"), std::nullopt};
  ad::NoGradGuard ng;
  const Tensor a = model->forward(img, pair, Mode::eval, nullptr).value();
  const Tensor b = model->forward(img, pair, Mode::eval, nullptr).value();
  CHECK(bitwise_equal(a, b));
}

TEST_CASE("prompts reach the output") {
  const Config cfg = tiny_config(31);
  auto model = build_model(cfg);
  // Give the modulation heads non-identity weights; at init they are
  // zero-initialized and all regimes would collapse to the same output.
  Rng rng(37);
  for (auto& p : model->named_params()) {
    if (p.name.find("gamma.out.") != std::string::npos ||
        p.name.find("beta.out.") != std::string::npos ||
        p.name.find("tcm") != std::string::npos) {
      Tensor& v = p.var.value_mut();
      for (int64_t i = 0; i < v.numel(); ++i) v[i] += rng.normal(0.0, 0.2);
    }
  }
  const Tensor img = test_image(64, 5);
  ad::NoGradGuard ng;
  const Tensor with_g =
      model->forward(img, {std::string("bright oval lesion"), std::nullopt}, Mode::eval, nullptr)
          .value();
  const Tensor without =
      model->forward(img, {std::nullopt, std::nullopt}, Mode::eval, nullptr).value();
  CHECK_FALSE(bitwise_equal(with_g, without));
}

TEST_CASE("output shape is independent of the prompt regime") {
  const Config cfg = tiny_config(41);
  auto model = build_model(cfg);
  const Tensor img = test_image(64, 6);
  ad::NoGradGuard ng;
  std::set<std::string> shapes;
  for (const PromptPair& pair :
       {PromptPair{std::string("g"), std::string("l")}, PromptPair{std::nullopt, std::nullopt}}) {
    shapes.insert(model->forward(img, pair, Mode::eval, nullptr).value().shape_str());
  }
  CHECK(shapes.size() == 1);
}

TEST_CASE("trainable parameter sets per ablation") {
  Config cfg = tiny_config(43);

  cfg.train.ablation = "full";
  auto full = build_model(cfg);
  std::set<std::string> full_names;
  for (auto& p : full->trainable_params()) full_names.insert(p.name);
  CHECK(full_names.count("prompt.z_null_g") == 1);
  CHECK(full_names.count("prompt.z_null_l") == 1);

  cfg.train.ablation = "zero_global";
  auto zg = build_model(cfg);
  std::set<std::string> zg_names;
  for (auto& p : zg->trainable_params()) zg_names.insert(p.name);
  CHECK(zg_names.count("ablation.fg_const") == 1);
  CHECK(zg_names.count("prompt.z_null_g") == 0);
  for (const auto& n : zg_names) REQUIRE(n.rfind("global.", 0) != 0);

  cfg.train.ablation = "zero_local";
  auto zl = build_model(cfg);
  std::set<std::string> zl_names;
  for (auto& p : zl->trainable_params()) zl_names.insert(p.name);
  CHECK(zl_names.count("ablation.fl_const") == 1);
  CHECK(zl_names.count("prompt.z_null_l") == 0);
  for (const auto& n : zl_names) REQUIRE(n.rfind("local.", 0) != 0);

  // No variant ever exposes backbone weights: they are not parameters.
  for (const auto& n : full_names) REQUIRE(n.find("backbone") == std::string::npos);
}

TEST_CASE("zero_text output is independent of any supplied prompt") {
  Config cfg = tiny_config(47);
  cfg.train.ablation = "zero_text";
  auto model = build_model(cfg);
  const Tensor img = test_image(64, 7);
  ad::NoGradGuard ng;
  const Tensor a =
      model->forward(img, {std::string("loud words"), std::string("more words")}, Mode::eval,
                     nullptr)
          .value();
  const Tensor b = model->forward(img, {std::nullopt, std::nullopt}, Mode::eval, nullptr).value();
  CHECK(bitwise_equal(a, b));
}

TEST_CASE("full and zero_text differ on a prompted sample once heads are non-identity") {
  Config cfg = tiny_config(53);
  auto full = build_model(cfg);
  auto zt = build_ablation(Ablation::zero_text, cfg);
  Rng rng(59);
  auto perturb = [&rng](NullBusModel& m) {
    Rng local(59);
    for (auto& p : m.named_params())
      if (p.name.find("gamma.out.") != std::string::npos ||
          p.name.find("tcm5_gamma.out.") != std::string::npos) {
        Tensor& v = p.var.value_mut();
        for (int64_t i = 0; i < v.numel(); ++i) v[i] += local.normal(0.0, 0.2);
      }
  };
  perturb(*full);
  perturb(*zt);
  const Tensor img = test_image(64, 8);
  const PromptPair pair{std::string("hypoechoic lesion upper left"), std::string("upper left")};
  ad::NoGradGuard ng;
  const Tensor a = full->forward(img, pair, Mode::eval, nullptr).value();
  const Tensor b = zt->forward(img, pair, Mode::eval, nullptr).value();
  CHECK_FALSE(bitwise_equal(a, b));
}

TEST_CASE("checkpoint round trip restores bitwise-identical outputs") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "nullbus_test_ckpt";
  fs::create_directories(dir);
  const Config cfg = tiny_config(61);
  auto model = build_model(cfg);
  Rng rng(67);
  for (auto& p : model->named_params()) {
    Tensor& v = p.var.value_mut();
    for (int64_t i = 0; i < v.numel(); ++i) v[i] += rng.normal(0.0, 0.05);
  }
  const Tensor img = test_image(64, 9);
  ad::NoGradGuard ng;
  const Tensor before =
      model->forward(img, {std::nullopt, std::nullopt}, Mode::eval, nullptr).value();
  save_checkpoint(dir / "m.ckpt", *model);

  auto fresh = build_model(cfg);
  const Tensor untrained =
      fresh->forward(img, {std::nullopt, std::nullopt}, Mode::eval, nullptr).value();
  CHECK_FALSE(bitwise_equal(before, untrained));
  load_checkpoint(dir / "m.ckpt", *fresh);
  const Tensor after =
      fresh->forward(img, {std::nullopt, std::nullopt}, Mode::eval, nullptr).value();
  CHECK(bitwise_equal(before, after));

  // Mismatched config is refused unless forced.
  Config other = tiny_config(62);
  other.train.prompt_dropout = 0.9;
  auto wrong = build_model(other);
  CHECK_THROWS_WITH_AS(load_checkpoint(dir / "m.ckpt", *wrong),
                       doctest::Contains("different config"), std::runtime_error);
  CHECK_NOTHROW(load_checkpoint(dir / "m.ckpt", *wrong, /*force=*/true));

  const std::string snap = read_checkpoint_config(dir / "m.ckpt");
  CHECK(snap == config_to_json(cfg));
}

TEST_CASE("paper-preset bottleneck alignment is encoded in the config") {
  const Config paper = paper_preset();
  CHECK(paper.data.image_size / 32 == 11);
  CHECK(paper.data.image_size / paper.model.patch_size == 22);
}
