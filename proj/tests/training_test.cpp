#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "nullbus/training.hpp"
#include "test_util.hpp"

using namespace nullbus;
using nbtest::random_tensor;

namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("nullbus_train_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

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
  return cfg;
}

ad::Var logits_of(std::vector<int64_t> shape, std::vector<double> vals) {
  return ad::Var::param(Tensor(std::move(shape), std::move(vals)));
}

}  // namespace

TEST_CASE("dice loss: perfect overlap approaches zero") {
  // Saturating logits make probabilities exactly 0/1 in doubles.
  ad::Var logits = logits_of({1, 2, 2}, {1000, 1000, -1000, -1000});
  const Tensor mask({2, 2}, {1, 1, 0, 0});
  const double loss = dice_loss(logits, mask, 1e-6).value().item();
  CHECK(loss >= 0.0);
  CHECK(loss < 1e-6);
}

TEST_CASE("dice loss: both empty is exactly zero") {
  ad::Var logits = logits_of({1, 2, 2}, {-1000, -1000, -1000, -1000});
  const Tensor mask = Tensor::zeros({2, 2});
  CHECK(dice_loss(logits, mask, 1e-6).value().item() == 0.0);
}

TEST_CASE("dice loss: hand case 1/3 in the eps->0 limit") {
  ad::Var logits = logits_of({4}, {1000, 1000, -1000, -1000});
  const Tensor mask({4}, {1, 0, 0, 0});
  const double loss = dice_loss(logits, mask, 1e-9).value().item();
  CHECK(std::fabs(loss - 1.0 / 3.0) < 1e-5);
}

TEST_CASE("dice loss stays in [0,1) on random inputs") {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    ad::Var logits = ad::Var::param(random_tensor(rng, {1, 6, 6}, 3.0));
    Tensor mask({6, 6});
    for (int64_t i = 0; i < mask.numel(); ++i) mask[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    const double v = dice_loss(logits, mask, 1e-6).value().item();
    REQUIRE(v >= 0.0);
    REQUIRE(v < 1.0);
  }
}

TEST_CASE("dice loss gradient matches central finite differences on 8x8") {
  Rng rng(7);
  ad::Var logits = ad::Var::param(random_tensor(rng, {1, 8, 8}, 1.5));
  Tensor mask({8, 8});
  for (int64_t i = 0; i < mask.numel(); ++i) mask[i] = rng.bernoulli(0.4) ? 1.0 : 0.0;

  logits.zero_grad();
  ad::backward(dice_loss(logits, mask, 1e-6));
  auto f = [&] { return dice_loss(logits, mask, 1e-6).value().item(); };
  double worst = 0.0;
  for (int64_t i = 0; i < logits.value().numel(); ++i) {
    const double fd = nbtest::fd_central(f, logits.value_mut()[i], 1e-6);
    worst = std::max(worst, nbtest::rel_err(logits.grad()[i], fd));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("dice loss input validation") {
  ad::Var logits = logits_of({4}, {0, 0, 0, 0});
  CHECK_THROWS_AS(dice_loss(logits, Tensor::zeros({5}), 1e-6), std::invalid_argument);
  CHECK_THROWS_AS(dice_loss(logits, Tensor::full({4}, 0.5), 1e-6), std::invalid_argument);
  CHECK_THROWS_AS(dice_loss(logits, Tensor::zeros({4}), 0.0), std::invalid_argument);
}

TEST_CASE("adam minimizes a convex quadratic") {
  ad::Var p = ad::Var::param(Tensor({3}, {4.0, -3.0, 2.0}));
  Adam opt({{"p", p}}, 0.1);
  for (int step = 0; step < 300; ++step) {
    opt.zero_grad();
    ad::backward(ad::sum(ad::mul(p, p)));
    opt.step();
  }
  for (int64_t i = 0; i < 3; ++i) CHECK(std::fabs(p.value()[i]) < 1e-2);
}

TEST_CASE("build_ablation rejects nothing and tags the config") {
  const Config cfg = tiny_config(3);
  for (Ablation a : {Ablation::full, Ablation::zero_text, Ablation::zero_local,
                     Ablation::zero_global}) {
    auto m = build_ablation(a, cfg);
    CHECK(m->ablation() == a);
    CHECK(m->config().train.ablation == to_string(a));
  }
  CHECK_THROWS_AS(ablation_from_string("zero_everything"), std::invalid_argument);
}

TEST_CASE("fit produces run artifacts, fold hygiene, and reproducible history") {
  const auto dir = temp_dir("fit");
  Config cfg = tiny_config(11);
  cfg.data.k_folds = 2;
  cfg.train.epochs = 2;
  cfg.train.batch_size = 2;
  cfg.train.fold_index = 0;

  const DatasetPool pool = synth_pool(6, 21, 0.5, dir / "data", cfg.data.image_size);
  const FoldAssignment folds = stratified_folds(pool, 2, 5);

  const RunRecord rec = fit(cfg, pool, folds, dir / "run");
  REQUIRE(rec.history.size() == 2);
  CHECK(rec.best_epoch >= 0);
  CHECK(fs::exists(dir / "run" / "config.snapshot"));
  CHECK(fs::exists(dir / "run" / "history.rows"));
  CHECK(fs::exists(dir / "run" / "folds.map"));
  CHECK(fs::exists(dir / "run" / "best.ckpt"));

  // The snapshot reproduces the config bit-for-bit.
  std::ifstream snap(dir / "run" / "config.snapshot");
  std::stringstream ss;
  ss << snap.rdbuf();
  CHECK(parse_config_json(ss.str()).seed == cfg.seed);

  // Same config + seed => identical loss trajectory.
  const RunRecord rec2 = fit(cfg, pool, folds, dir / "run2");
  REQUIRE(rec2.history.size() == rec.history.size());
  for (size_t i = 0; i < rec.history.size(); ++i) {
    REQUIRE(rec.history[i].train_loss == rec2.history[i].train_loss);
    REQUIRE(rec.history[i].val.dice == rec2.history[i].val.dice);
  }
}

TEST_CASE("null embeddings move when promptless samples are present") {
  const auto dir = temp_dir("nulls");
  Config cfg = tiny_config(13);
  cfg.train.epochs = 1;
  cfg.train.batch_size = 4;
  const DatasetPool pool = synth_pool(8, 31, 0.0, dir / "data", cfg.data.image_size);

  auto model = build_model(cfg);
  const Tensor init_g = model->prompt_engine().null_global().value();
  const Tensor init_l = model->prompt_engine().null_local().value();

  std::vector<PreprocessedSample> samples;
  for (const auto& r : pool.records)
    samples.push_back(load_and_preprocess(r, cfg.data.image_size));
  Adam opt(model->trainable_params(), cfg.train.learning_rate);
  run_steps(*model, opt, samples, 6, 4, cfg.seed, cfg.train.epsilon);

  CHECK(max_abs_diff(model->prompt_engine().null_global().value(), init_g) > 0.0);
  CHECK(max_abs_diff(model->prompt_engine().null_local().value(), init_l) > 0.0);
}

TEST_CASE("frozen backbone never changes during optimization") {
  const auto dir = temp_dir("frozen");
  Config cfg = tiny_config(17);
  const DatasetPool pool = synth_pool(4, 41, 0.5, dir / "data", cfg.data.image_size);
  auto model = build_model(cfg);
  const uint64_t fp = model->backbone().fingerprint();
  std::vector<PreprocessedSample> samples;
  for (const auto& r : pool.records)
    samples.push_back(load_and_preprocess(r, cfg.data.image_size));
  Adam opt(model->trainable_params(), 1e-2);
  run_steps(*model, opt, samples, 5, 4, cfg.seed, 1e-6);
  CHECK(model->backbone().fingerprint() == fp);
}

TEST_CASE("run_steps aborts on empty splits") {
  Config cfg = tiny_config(19);
  auto model = build_model(cfg);
  Adam opt(model->trainable_params(), 1e-3);
  std::vector<PreprocessedSample> none;
  CHECK_THROWS_AS(run_steps(*model, opt, none, 1, 1, 0, 1e-6), std::invalid_argument);
}
