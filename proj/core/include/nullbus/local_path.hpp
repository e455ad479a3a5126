#pragma once

#include <vector>

#include "nullbus/nn.hpp"
#include "nullbus/rng.hpp"

namespace nullbus {

/// Encoder stage widths. Base widths follow the usual 5-stage layout
/// (64,256,512,1024,2048); the multiplier produces desk-scale variants of
/// the same topology.
struct StageWidths {
  int64_t c1, c2, c3, c4, c5;
  static StageWidths from_multiplier(double m);
};

/// Stage maps at strides 2..32 plus the TCM-modulated deep stages. e4/e5
/// are post-attention; e4_mod feeds both stage 5 and the decoder skip,
/// e5_mod feeds the ASPP bottleneck.
struct StageFeatures {
  ad::Var e1, e2, e3, e4, e5;
  ad::Var e4_mod, e5_mod;
};

/// Trainable local encoder: stem + four bottleneck stages with strict
/// factor-2 halving, self-attention after stages 4 and 5, channel-wise
/// text-conditioned modulation (TCM) at the deep stages, and an ASPP
/// bottleneck.
class LocalPath : public nn::Module {
 public:
  LocalPath(const StageWidths& widths, int64_t text_dim, int64_t c_l,
            const std::vector<int>& aspp_rates, std::vector<int> tcm_stages, Rng& rng);

  /// Raw stage features only (modulation disabled); z_l never enters.
  StageFeatures encode_stages(const ad::Var& image) const;

  /// Full conditioned pass: TCM applied in-trunk at the configured deep
  /// stages.
  StageFeatures forward_features(const ad::Var& image, const ad::Var& z_l) const;

  /// Channel-wise scale and shift of a deep stage map by the local prompt
  /// embedding; k selects the per-stage heads.
  ad::Var tcm(const ad::Var& e_k, const ad::Var& z_l, int k) const;

  /// The (gamma, beta) coefficient vectors the stage-k heads produce.
  std::pair<ad::Var, ad::Var> tcm_coefficients(const ad::Var& z_l, int k) const;

  /// ASPP over the modulated deepest stage.
  ad::Var bottleneck(const StageFeatures& f) const;

  const StageWidths& widths() const { return widths_; }
  int64_t c_l() const { return c_l_; }
  const std::vector<int>& tcm_stage_list() const { return tcm_stages_; }

 private:
  StageFeatures run(const ad::Var& image, const ad::Var* z_l) const;
  bool tcm_enabled(int k) const;

  StageWidths widths_;
  int64_t c_l_;
  std::vector<int> tcm_stages_;
  nn::ConvBlock stem;
  nn::Bottleneck stage2, stage3, stage4, stage5;
  nn::SelfAttention2d attn4, attn5;
  nn::ModulationHead tcm4_gamma, tcm4_beta, tcm5_gamma, tcm5_beta;
  nn::Aspp aspp;
};

}  // namespace nullbus
