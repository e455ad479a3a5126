#include <doctest.h>

#include <cmath>

#include "nullbus/local_path.hpp"
#include "test_util.hpp"

using namespace nullbus;
using nbtest::random_tensor;

namespace {

LocalPath desk_path(Rng& rng, int64_t text_dim = 16) {
  return LocalPath(StageWidths::from_multiplier(1.0 / 16.0), text_dim, 32, {1, 6, 12, 18},
                   {4, 5}, rng);
}

ad::Var image_var(int64_t size, uint64_t seed) {
  Rng rng(seed);
  return ad::Var::constant(random_tensor(rng, {1, size, size}, 0.5));
}

}  // namespace

TEST_CASE("stage widths scale with the multiplier") {
  const StageWidths paper = StageWidths::from_multiplier(1.0);
  CHECK(paper.c1 == 64);
  CHECK(paper.c2 == 256);
  CHECK(paper.c3 == 512);
  CHECK(paper.c4 == 1024);
  CHECK(paper.c5 == 2048);
  const StageWidths desk = StageWidths::from_multiplier(1.0 / 16.0);
  CHECK(desk.c1 == 4);
  CHECK(desk.c5 == 128);
  CHECK_THROWS_AS(StageWidths::from_multiplier(0.0), std::invalid_argument);
}

TEST_CASE("stage features halve spatially with the configured channels") {
  Rng rng(3);
  LocalPath path = desk_path(rng);
  const StageFeatures f = path.encode_stages(image_var(96, 1));
  CHECK(f.e1.value().shape() == std::vector<int64_t>{4, 48, 48});
  CHECK(f.e2.value().shape() == std::vector<int64_t>{16, 24, 24});
  CHECK(f.e3.value().shape() == std::vector<int64_t>{32, 12, 12});
  CHECK(f.e4.value().shape() == std::vector<int64_t>{64, 6, 6});
  CHECK(f.e5.value().shape() == std::vector<int64_t>{128, 3, 3});

  CHECK_THROWS_WITH_AS(path.encode_stages(image_var(100, 2)), doctest::Contains("divisible"),
                       std::invalid_argument);
}

TEST_CASE("tcm identity at initialization and elementwise oracle after perturbation") {
  Rng rng(5);
  LocalPath path = desk_path(rng);
  ad::Var z = ad::Var::param(random_tensor(rng, {16}));
  ad::Var e4 = ad::Var::constant(random_tensor(rng, {64, 6, 6}));

  // Zero-initialized last layers make modulation exactly the identity.
  CHECK(bitwise_equal(path.tcm(e4, z, 4).value(), e4.value()));

  for (auto& p : path.named_params()) {
    if (p.name.rfind("tcm4_", 0) == 0) {
      Tensor& v = p.var.value_mut();
      for (int64_t i = 0; i < v.numel(); ++i) v[i] += rng.normal(0.0, 0.4);
    }
  }
  const Tensor got = path.tcm(e4, z, 4).value();
  // Direct scalar-loop oracle over the same coefficient vectors.
  const auto [gamma, beta] = path.tcm_coefficients(z, 4);
  double max_dev = 0.0;
  for (int64_t c = 0; c < 64; ++c)
    for (int64_t i = 0; i < 36; ++i) {
      const double expect = gamma.value()[c] * e4.value()[c * 36 + i] + beta.value()[c];
      max_dev = std::max(max_dev, std::fabs(got[c * 36 + i] - expect));
    }
  CHECK(max_dev == 0.0);

  CHECK_THROWS_AS(path.tcm(e4, z, 3), std::invalid_argument);
  // Stage-channel mismatch: e5-shaped map against the stage-4 heads.
  ad::Var e5 = ad::Var::constant(Tensor({128, 3, 3}));
  CHECK_THROWS_WITH_AS(path.tcm(e5, z, 4), doctest::Contains("mismatch"),
                       std::invalid_argument);
}

TEST_CASE("tcm positional uniformity: scale is constant over positions") {
  Rng rng(7);
  LocalPath path = desk_path(rng);
  for (auto& p : path.named_params())
    if (p.name.rfind("tcm5_", 0) == 0) {
      Tensor& v = p.var.value_mut();
      for (int64_t i = 0; i < v.numel(); ++i) v[i] += rng.normal(0.0, 0.3);
    }
  ad::Var z = ad::Var::param(random_tensor(rng, {16}));
  Tensor e5v = random_tensor(rng, {128, 3, 3});
  for (int64_t i = 0; i < e5v.numel(); ++i)
    if (std::fabs(e5v[i]) < 1e-3) e5v[i] = 1.0;  // keep the ratio well-defined
  ad::Var e5 = ad::Var::constant(e5v);
  const Tensor out = path.tcm(e5, z, 5).value();
  const Tensor beta = path.tcm(ad::Var::constant(Tensor({128, 3, 3})), z, 5).value();
  for (int64_t c = 0; c < 128; ++c) {
    const double ref = (out[c * 9] - beta[c * 9]) / e5v[c * 9];
    for (int64_t i = 1; i < 9; ++i) {
      const double ratio = (out[c * 9 + i] - beta[c * 9 + i]) / e5v[c * 9 + i];
      REQUIRE(ratio == doctest::Approx(ref).epsilon(1e-9));
    }
  }
}

TEST_CASE("null embedding routes through the same transform, never zero-fill") {
  Rng rng(9);
  LocalPath path = desk_path(rng);
  for (auto& p : path.named_params())
    if (p.name.rfind("tcm4_", 0) == 0 || p.name.rfind("tcm5_", 0) == 0) {
      Tensor& v = p.var.value_mut();
      for (int64_t i = 0; i < v.numel(); ++i) v[i] += rng.normal(0.0, 0.2);
    }
  ad::Var z_null = ad::Var::param(random_tensor(rng, {16}));
  ad::Var e4 = ad::Var::constant(random_tensor(rng, {64, 6, 6}));
  const Tensor got = path.tcm(e4, z_null, 4).value();
  // Same transform with the learned null, not zeros:
  const Tensor beta = path.tcm(ad::Var::constant(Tensor({64, 6, 6})), z_null, 4).value();
  const Tensor gpb = path.tcm(ad::Var::constant(Tensor::full({64, 6, 6}, 1.0)), z_null, 4).value();
  bool nontrivial = false;
  for (int64_t c = 0; c < 64 && !nontrivial; ++c)
    if (std::fabs(gpb[c * 36] - beta[c * 36] - 1.0) > 1e-6 || std::fabs(beta[c * 36]) > 1e-6)
      nontrivial = true;
  CHECK(nontrivial);
  CHECK_FALSE(bitwise_equal(got, Tensor({64, 6, 6})));
}

TEST_CASE("stages 1-3 are independent of the prompt embedding") {
  Rng rng(11);
  LocalPath path = desk_path(rng);
  // Give the TCM heads real weights so modulation is not the identity.
  for (auto& p : path.named_params())
    if (p.name.rfind("tcm", 0) == 0) {
      Tensor& v = p.var.value_mut();
      for (int64_t i = 0; i < v.numel(); ++i) v[i] += rng.normal(0.0, 0.3);
    }
  ad::Var img = image_var(64, 21);
  ad::Var za = ad::Var::param(random_tensor(rng, {16}));
  ad::Var zb = ad::Var::param(random_tensor(rng, {16}));
  const StageFeatures fa = path.forward_features(img, za);
  const StageFeatures fb = path.forward_features(img, zb);
  CHECK(bitwise_equal(fa.e1.value(), fb.e1.value()));
  CHECK(bitwise_equal(fa.e2.value(), fb.e2.value()));
  CHECK(bitwise_equal(fa.e3.value(), fb.e3.value()));
  // The modulated deep path does depend on z.
  CHECK_FALSE(bitwise_equal(fa.e4_mod.value(), fb.e4_mod.value()));
  CHECK_FALSE(bitwise_equal(fa.e5_mod.value(), fb.e5_mod.value()));
}

TEST_CASE("aspp preserves spatial size and hits the configured channels") {
  Rng rng(13);
  LocalPath path = desk_path(rng);
  const StageFeatures f = path.encode_stages(image_var(96, 23));
  const ad::Var fl = path.bottleneck(f);
  CHECK(fl.value().shape() == std::vector<int64_t>{32, 3, 3});

  // Larger spatial input through the standalone ASPP block.
  nn::Aspp aspp(8, 16, {1, 6, 12, 18}, rng);
  ad::Var x = ad::Var::constant(random_tensor(rng, {8, 24, 24}));
  CHECK(aspp.forward(x).value().shape() == std::vector<int64_t>{16, 24, 24});
}

TEST_CASE("aspp on all-zero input with zero-init biases is exactly zero") {
  Rng rng(17);
  nn::Aspp aspp(8, 16, {1, 6, 12, 18}, rng);
  ad::Var x = ad::Var::constant(Tensor({8, 5, 5}));
  const Tensor out = aspp.forward(x).value();
  for (int64_t i = 0; i < out.numel(); ++i) REQUIRE(out[i] == 0.0);
}

TEST_CASE("aspp rejects non-positive rates") {
  Rng rng(19);
  CHECK_THROWS_AS(nn::Aspp(4, 8, {0, 6}, rng), std::invalid_argument);
  CHECK_THROWS_AS(nn::Aspp(4, 8, {}, rng), std::invalid_argument);
}

TEST_CASE("gradients reach the stem through the deep stack") {
  Rng rng(23);
  // A narrower net keeps the finite-difference loop cheap.
  LocalPath path(StageWidths::from_multiplier(1.0 / 32.0), 8, 16, {1, 3}, {4, 5}, rng);
  Rng ir(29);
  const Tensor img_v = random_tensor(ir, {1, 32, 32}, 0.5);
  ad::Var z = ad::Var::param(random_tensor(ir, {8}));

  ad::Var stem_w;
  for (auto& p : path.named_params())
    if (p.name == "stem.conv.w") stem_w = p.var;
  REQUIRE(stem_w.defined());

  auto loss_of = [&]() {
    const StageFeatures f = path.forward_features(ad::Var::constant(img_v), z);
    return ad::sum(ad::mul(f.e5_mod, f.e5_mod)).value().item();
  };
  stem_w.zero_grad();
  {
    const StageFeatures f = path.forward_features(ad::Var::constant(img_v), z);
    ad::backward(ad::sum(ad::mul(f.e5_mod, f.e5_mod)));
  }
  REQUIRE(stem_w.has_grad());
  // Spot-check a handful of stem weights by central differences.
  Rng pick(31);
  double worst = 0.0;
  for (int t = 0; t < 5; ++t) {
    const int64_t idx = pick.uniform_int(stem_w.value().numel());
    const double fd = nbtest::fd_central(loss_of, stem_w.value_mut()[idx], 1e-5);
    if (std::fabs(fd) < 1e-8 && std::fabs(stem_w.grad()[idx]) < 1e-8) continue;
    worst = std::max(worst, nbtest::rel_err(stem_w.grad()[idx], fd));
  }
  CHECK(worst < 1e-2);
}
