#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "nullbus/config.hpp"
#include "nullbus/global_path.hpp"
#include "nullbus/local_path.hpp"
#include "nullbus/nn.hpp"
#include "nullbus/prompt_engine.hpp"

namespace nullbus {

/// Intermediate shapes captured during forward; used by shape checks.
struct ForwardTrace {
  int64_t token_n = 0, token_grid_h = 0, token_grid_w = 0;
  std::vector<int64_t> fg_shape, fl_shape, fused_shape;
  std::vector<std::vector<int64_t>> decoder_shapes;
};

/// Decoder stage: 2x upsample, concat with the skip, squeeze-excitation
/// over the concatenated channels, then a depthwise-pointwise residual
/// refinement.
class UpFusionStage : public nn::Module {
 public:
  UpFusionStage(int64_t in_c, int64_t skip_c, int64_t out_c, int se_reduction, Rng& rng);
  ad::Var forward(const ad::Var& x, const ad::Var& skip) const;

  nn::SEBlock se;
  nn::DepthwiseConv2d dw;
  nn::GroupNorm dw_norm;
  nn::Conv2d pw;
  nn::GroupNorm pw_norm;
  nn::Conv2d shortcut;
  nn::GroupNorm shortcut_norm;
};

/// The assembled network: prompt engine, global and local paths, fused
/// bottleneck, four UpFusion stages and the prediction head. Ablation
/// variants replace a path's output by a learned constant map (and, for
/// zero_local, the skips by zeros) so parameter counts stay comparable.
class NullBusModel : public nn::Module {
 public:
  NullBusModel(const Config& cfg, std::shared_ptr<TextEncoder> text_encoder,
               std::shared_ptr<TokenBackbone> backbone);

  ad::Var forward(const Tensor& image, const PromptPair& prompts, Mode mode, Rng* rng,
                  const std::string& sample_id = "", ForwardTrace* trace = nullptr) const;

  /// ASPP(Conv1x1([F_g || F_l])); F_g occupies the leading channels.
  ad::Var fuse(const ad::Var& f_g, const ad::Var& f_l) const;

  /// Parameters that the optimizer may update under this ablation.
  std::vector<nn::NamedParam> trainable_params() const;

  PromptEngine& prompt_engine() { return prompt_; }
  const PromptEngine& prompt_engine() const { return prompt_; }
  GlobalPath& global_path() { return global_; }
  LocalPath& local_path() { return local_; }
  const Config& config() const { return cfg_; }
  Ablation ablation() const { return ablation_; }
  const TokenBackbone& backbone() const { return global_.backbone(); }
  int64_t bottleneck_size() const { return cfg_.data.image_size / 32; }

 private:
  Config cfg_;
  Ablation ablation_;
  Rng init_rng_;  // consumed in member declaration order during construction
  PromptEngine prompt_;
  GlobalPath global_;
  LocalPath local_;
  nn::ConvBlock fuse_reduce;
  nn::Aspp fuse_aspp;
  std::vector<std::unique_ptr<UpFusionStage>> decoder_;
  nn::Conv2d head;
  ad::Var fg_const_, fl_const_;  // learned constant maps for the ablations
};

/// Builds the text encoder / token backbone named by the config and
/// assembles the model.
std::unique_ptr<NullBusModel> build_model(const Config& cfg);

// ---- checkpoints ----
// Versioned binary container: config snapshot + named parameter tensors.
// Loading refuses a mismatched config hash unless force is set.
void save_checkpoint(const std::filesystem::path& path, const NullBusModel& model);
void load_checkpoint(const std::filesystem::path& path, NullBusModel& model, bool force = false);
/// Config snapshot embedded in a checkpoint, without building a model.
std::string read_checkpoint_config(const std::filesystem::path& path);

}  // namespace nullbus
