#include "nullbus/local_path.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nullbus {

StageWidths StageWidths::from_multiplier(double m) {
  if (m <= 0.0) throw std::invalid_argument("width multiplier must be positive");
  auto scale = [m](int64_t base) { return std::max<int64_t>(1, std::llround(base * m)); };
  return {scale(64), scale(256), scale(512), scale(1024), scale(2048)};
}

LocalPath::LocalPath(const StageWidths& widths, int64_t text_dim, int64_t c_l,
                     const std::vector<int>& aspp_rates, std::vector<int> tcm_stages, Rng& rng)
    : widths_(widths),
      c_l_(c_l),
      tcm_stages_(std::move(tcm_stages)),
      stem(1, widths.c1, 7, 2, 3, rng),
      stage2(widths.c1, widths.c2, 2, rng),
      stage3(widths.c2, widths.c3, 2, rng),
      stage4(widths.c3, widths.c4, 2, rng),
      stage5(widths.c4, widths.c5, 2, rng),
      attn4(widths.c4, rng),
      attn5(widths.c5, rng),
      tcm4_gamma(text_dim, widths.c4, nn::ModulationHead::Kind::gamma, rng),
      tcm4_beta(text_dim, widths.c4, nn::ModulationHead::Kind::beta, rng),
      tcm5_gamma(text_dim, widths.c5, nn::ModulationHead::Kind::gamma, rng),
      tcm5_beta(text_dim, widths.c5, nn::ModulationHead::Kind::beta, rng),
      aspp(widths.c5, c_l, aspp_rates, rng) {
  for (int k : tcm_stages_)
    if (k != 4 && k != 5)
      throw std::invalid_argument("tcm_stages: only stages 4 and 5 carry modulation heads");
  register_child("stem", &stem);
  register_child("stage2", &stage2);
  register_child("stage3", &stage3);
  register_child("stage4", &stage4);
  register_child("stage5", &stage5);
  register_child("attn4", &attn4);
  register_child("attn5", &attn5);
  register_child("tcm4_gamma", &tcm4_gamma);
  register_child("tcm4_beta", &tcm4_beta);
  register_child("tcm5_gamma", &tcm5_gamma);
  register_child("tcm5_beta", &tcm5_beta);
  register_child("aspp", &aspp);
}

bool LocalPath::tcm_enabled(int k) const {
  return std::find(tcm_stages_.begin(), tcm_stages_.end(), k) != tcm_stages_.end();
}

std::pair<ad::Var, ad::Var> LocalPath::tcm_coefficients(const ad::Var& z_l, int k) const {
  if (k == 4) return {tcm4_gamma.forward(z_l), tcm4_beta.forward(z_l)};
  if (k == 5) return {tcm5_gamma.forward(z_l), tcm5_beta.forward(z_l)};
  throw std::invalid_argument("tcm: k must be 4 or 5");
}

ad::Var LocalPath::tcm(const ad::Var& e_k, const ad::Var& z_l, int k) const {
  const auto [gamma, beta] = tcm_coefficients(z_l, k);
  return ad::film_channels(e_k, gamma, beta);
}

StageFeatures LocalPath::run(const ad::Var& image, const ad::Var* z_l) const {
  const auto& shape = image.value().shape();
  if (shape.size() != 3 || shape[0] != 1)
    throw std::invalid_argument("LocalPath: expected {1,H,W} input");
  if (shape[1] % 32 != 0 || shape[2] % 32 != 0)
    throw std::invalid_argument("LocalPath: input size " + image.value().shape_str() +
                                " must be divisible by 32");
  StageFeatures f;
  f.e1 = stem.forward(image);
  f.e2 = stage2.forward(f.e1);
  f.e3 = stage3.forward(f.e2);
  f.e4 = attn4.forward(stage4.forward(f.e3));
  f.e4_mod = (z_l && tcm_enabled(4)) ? tcm(f.e4, *z_l, 4) : f.e4;
  f.e5 = attn5.forward(stage5.forward(f.e4_mod));
  f.e5_mod = (z_l && tcm_enabled(5)) ? tcm(f.e5, *z_l, 5) : f.e5;
  return f;
}

StageFeatures LocalPath::encode_stages(const ad::Var& image) const { return run(image, nullptr); }

StageFeatures LocalPath::forward_features(const ad::Var& image, const ad::Var& z_l) const {
  return run(image, &z_l);
}

ad::Var LocalPath::bottleneck(const StageFeatures& f) const { return aspp.forward(f.e5_mod); }

}  // namespace nullbus
