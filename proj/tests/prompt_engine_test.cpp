#include <doctest.h>

#include <cmath>
#include <fstream>

#include "nullbus/prompt_engine.hpp"
#include "nullbus/training.hpp"
#include "test_util.hpp"

using namespace nullbus;

TEST_CASE("presence mask") {
  CHECK(presence_mask(std::nullopt) == 0);
  CHECK(presence_mask(std::string("hypoechoic oval mass")) == 1);
  CHECK(presence_mask(std::string("   ")) == 0);
  CHECK(presence_mask(std::string("\t\r\n")) == 0);
  CHECK(presence_mask(std::string("")) == 0);
}

TEST_CASE("hash encoder: bag-of-tokens symmetry and unit norm") {
  const HashTextEncoder enc(64, 9);
  CHECK(bitwise_equal(enc.encode("a b"), enc.encode("b a")));
  for (const char* text : {"x", "hypoechoic oval mass", "a a a", "small benign lesion"}) {
    const Tensor v = enc.encode(text);
    double n2 = 0.0;
    for (int64_t i = 0; i < v.numel(); ++i) n2 += v[i] * v[i];
    CHECK(std::fabs(std::sqrt(n2) - 1.0) < 1e-12);
  }
  CHECK_THROWS_AS(enc.encode(""), std::invalid_argument);
  CHECK_THROWS_AS(enc.encode("   "), std::invalid_argument);
}

TEST_CASE("hash encoder: distinct tokens are nearly orthogonal at dim 64") {
  const HashTextEncoder enc(64, 31);
  Rng rng(17);
  int ok = 0;
  const int trials = 1000;
  for (int t = 0; t < trials; ++t) {
    const std::string a = "tok" + std::to_string(rng.uniform_int(100000));
    const std::string b = "tok" + std::to_string(100000 + rng.uniform_int(100000));
    const Tensor va = enc.encode(a), vb = enc.encode(b);
    double cos = 0.0;
    for (int64_t i = 0; i < va.numel(); ++i) cos += va[i] * vb[i];
    if (std::fabs(cos) < 0.5) ++ok;
  }
  CHECK(ok >= 990);
}

TEST_CASE("hash encoder determinism across instances") {
  const HashTextEncoder a(48, 77), b(48, 77), c(48, 78);
  CHECK(bitwise_equal(a.encode("spiculated margin"), b.encode("spiculated margin")));
  CHECK_FALSE(bitwise_equal(a.encode("spiculated margin"), c.encode("spiculated margin")));
}

TEST_CASE("external encoder looks up by exact prompt text") {
  const auto dir = std::filesystem::temp_directory_path() / "nullbus_test_ext";
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "emb.tsv");
    out << "oval mass\t1.0,0.0,0.0\n";
    out << "round mass\t0.0,1.0,0.0\n";
  }
  const ExternalTextEncoder enc(dir / "emb.tsv", 3);
  CHECK(enc.encode("oval mass")[0] == 1.0);
  CHECK(enc.encode("round mass")[1] == 1.0);
  CHECK_THROWS_WITH_AS(enc.encode("unknown"), doctest::Contains("unknown"), std::runtime_error);
}

TEST_CASE("all four presence regimes route through one code path") {
  auto enc = std::make_shared<HashTextEncoder>(32, 5);
  Rng init(5);
  const PromptEngine engine(enc, 0.3, init);
  const Tensor tg = enc->encode("global words");
  const Tensor tl = enc->encode("local words");

  // (i) both present
  auto both = engine.encode({std::string("global words"), std::string("local words")},
                            Mode::eval, nullptr);
  CHECK(both.alpha_g == 1);
  CHECK(both.alpha_l == 1);
  CHECK(bitwise_equal(both.z_g.value(), tg));
  CHECK(bitwise_equal(both.z_l.value(), tl));

  // (ii) global only -> z_l is the learned local null, exactly
  auto gonly = engine.encode({std::string("global words"), std::nullopt}, Mode::eval, nullptr);
  CHECK(bitwise_equal(gonly.z_g.value(), tg));
  CHECK(bitwise_equal(gonly.z_l.value(), engine.null_local().value()));

  // (iii) local only
  auto lonly = engine.encode({std::nullopt, std::string("local words")}, Mode::eval, nullptr);
  CHECK(bitwise_equal(lonly.z_g.value(), engine.null_global().value()));
  CHECK(bitwise_equal(lonly.z_l.value(), tl));

  // (iv) neither
  auto none = engine.encode({std::nullopt, std::nullopt}, Mode::eval, nullptr);
  CHECK(bitwise_equal(none.z_g.value(), engine.null_global().value()));
  CHECK(bitwise_equal(none.z_l.value(), engine.null_local().value()));
  CHECK(none.m_g == 0);
  CHECK(none.alpha_g == 0);

  // Whitespace-only behaves as absent.
  auto ws = engine.encode({std::string("  "), std::nullopt}, Mode::eval, nullptr);
  CHECK(bitwise_equal(ws.z_g.value(), engine.null_global().value()));
}

TEST_CASE("eval mode ignores dropout rate and rng") {
  auto enc = std::make_shared<HashTextEncoder>(16, 3);
  Rng init1(3), init2(3);
  const PromptEngine hi(enc, 1.0, init1);
  const PromptEngine lo(enc, 0.0, init2);
  const PromptPair pair{std::string("a prompt"), std::string("b prompt")};
  auto a = hi.encode(pair, Mode::eval, nullptr);
  auto b = lo.encode(pair, Mode::eval, nullptr);
  CHECK(a.d_g == 1);
  CHECK(a.d_l == 1);
  CHECK(bitwise_equal(a.z_g.value(), b.z_g.value()));
  CHECK(bitwise_equal(a.z_l.value(), b.z_l.value()));
}

TEST_CASE("train mode with p=1 always uses nulls") {
  auto enc = std::make_shared<HashTextEncoder>(16, 3);
  Rng init(3);
  const PromptEngine engine(enc, 1.0, init);
  Rng rng(123);
  for (int i = 0; i < 50; ++i) {
    auto e = engine.encode({std::string("present"), std::string("present too")}, Mode::train,
                           &rng);
    REQUIRE(e.d_g == 0);
    REQUIRE(e.d_l == 0);
    REQUIRE(bitwise_equal(e.z_g.value(), engine.null_global().value()));
    REQUIRE(bitwise_equal(e.z_l.value(), engine.null_local().value()));
  }
  CHECK_THROWS_AS(engine.encode({std::string("x"), std::nullopt}, Mode::train, nullptr),
                  std::invalid_argument);
}

TEST_CASE("dropout keep frequency approaches 1-p") {
  auto enc = std::make_shared<HashTextEncoder>(16, 3);
  Rng init(3);
  const PromptEngine engine(enc, 0.5, init);
  const Tensor t = enc->encode("present");
  int kept = 0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    Rng rng = derive_rng(901, {static_cast<uint64_t>(i)});
    auto e = engine.encode({std::string("present"), std::nullopt}, Mode::train, &rng);
    if (bitwise_equal(e.z_g.value(), t)) ++kept;
  }
  const double frac = static_cast<double>(kept) / draws;
  CHECK(std::fabs(frac - 0.5) <= 0.02);
}

TEST_CASE("independent dropout draws for global and local") {
  auto enc = std::make_shared<HashTextEncoder>(16, 3);
  Rng init(3);
  const PromptEngine engine(enc, 0.5, init);
  int agree = 0;
  const int draws = 4000;
  for (int i = 0; i < draws; ++i) {
    Rng rng = derive_rng(77, {static_cast<uint64_t>(i)});
    auto e = engine.encode({std::string("g text"), std::string("l text")}, Mode::train, &rng);
    if (e.d_g == e.d_l) ++agree;
  }
  // Independent fair coins agree about half the time; perfectly coupled
  // draws would agree always.
  CHECK(agree > 1700);
  CHECK(agree < 2300);
}

TEST_CASE("Eq.(1) algebra: z - z_null = alpha*(T - z_null)") {
  auto enc = std::make_shared<HashTextEncoder>(24, 13);
  Rng init(13);
  const PromptEngine engine(enc, 0.3, init);
  const Tensor t = enc->encode("some words");
  for (int alpha_case = 0; alpha_case < 2; ++alpha_case) {
    const PromptPair pair{alpha_case ? std::optional<std::string>("some words") : std::nullopt,
                          std::nullopt};
    auto e = engine.encode(pair, Mode::eval, nullptr);
    for (int64_t i = 0; i < t.numel(); ++i) {
      const double lhs = e.z_g.value()[i] - engine.null_global().value()[i];
      const double rhs = e.alpha_g * (t[i] - engine.null_global().value()[i]);
      REQUIRE(lhs == doctest::Approx(rhs).epsilon(1e-15));
    }
  }
}

TEST_CASE("null embeddings receive gradient only from null-routed samples") {
  auto enc = std::make_shared<HashTextEncoder>(8, 21);
  Rng init(21);
  PromptEngine engine(enc, 0.3, init);
  ad::Var z_null = engine.null_global();

  // Absent prompt: loss = sum(z_g^2) must push gradient into the null.
  auto absent = engine.encode({std::nullopt, std::nullopt}, Mode::eval, nullptr);
  z_null.zero_grad();
  ad::Var loss = ad::sum(ad::mul(absent.z_g, absent.z_g));
  ad::backward(loss);
  double norm = 0.0;
  for (int64_t i = 0; i < z_null.grad().numel(); ++i) norm += std::fabs(z_null.grad()[i]);
  CHECK(norm > 0.0);

  // Finite-difference cross-check on one coordinate.
  auto loss_value = [&] {
    auto e = engine.encode({std::nullopt, std::nullopt}, Mode::eval, nullptr);
    return ad::sum(ad::mul(e.z_g, e.z_g)).value().item();
  };
  const double fd = nbtest::fd_central(loss_value, z_null.value_mut()[0]);
  CHECK(nbtest::rel_err(z_null.grad()[0], fd) < 1e-6);

  // Present prompt (alpha=1): exactly zero contribution.
  z_null.zero_grad();
  auto present = engine.encode({std::string("text here"), std::nullopt}, Mode::eval, nullptr);
  ad::Var loss2 = ad::sum(ad::mul(present.z_g, present.z_g));
  ad::backward(loss2);
  double total = 0.0;
  for (int64_t i = 0; i < z_null.grad().numel(); ++i) total += std::fabs(z_null.grad()[i]);
  CHECK(total == 0.0);
}

TEST_CASE("encoder failure names the offending prompt") {
  const auto dir = std::filesystem::temp_directory_path() / "nullbus_test_ext2";
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "emb.tsv");
    out << "known\t1.0,0.0\n";
  }
  auto enc = std::make_shared<ExternalTextEncoder>(dir / "emb.tsv", 2);
  Rng init(1);
  const PromptEngine engine(enc, 0.0, init);
  CHECK_THROWS_WITH_AS(
      engine.encode({std::string("not in table"), std::nullopt}, Mode::eval, nullptr),
      doctest::Contains("not in table"), std::runtime_error);
}
