#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "nullbus/data_pool.hpp"
#include "nullbus/eval_metrics.hpp"
#include "nullbus/fusion_decoder.hpp"

namespace nullbus {

/// Soft Dice loss on sigmoid probabilities:
///   L = 1 - (2<p,y> + eps) / (|p|_1 + |y|_1 + eps).
/// Differentiable everywhere; value lies in [0,1).
ad::Var dice_loss(const ad::Var& logits, const Tensor& mask, double epsilon);

/// Adaptive-moment gradient descent over a fixed parameter list.
class Adam {
 public:
  Adam(std::vector<nn::NamedParam> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);

  void zero_grad();
  /// Applies one update using grad * grad_scale (grad_scale folds in the
  /// 1/batch averaging of per-sample backward passes).
  void step(double grad_scale = 1.0);
  const std::vector<nn::NamedParam>& params() const { return params_; }
  double learning_rate() const { return lr_; }

 private:
  std::vector<nn::NamedParam> params_;
  std::vector<Tensor> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

/// Model variant for the ablation table. zero_text never encodes text
/// (both paths always use the learned nulls); zero_local / zero_global
/// replace the respective path output with a learned constant map.
std::unique_ptr<NullBusModel> build_ablation(Ablation variant, const Config& base_config);

struct EpochRow {
  int epoch = 0;
  double train_loss = 0.0;
  MetricRow val;
};

struct RunRecord {
  std::vector<EpochRow> history;
  std::string checkpoint_path;
  std::string config_snapshot;
  uint64_t seed = 0;
  int best_epoch = -1;
  double best_val_dice = -1.0;
};

/// One optimization pass over `samples` for `steps` optimizer steps,
/// batches drawn by seeded shuffle, per-sample prompt-dropout rng derived
/// from (seed, sample id, step). Returns the mean loss of the last step.
double run_steps(NullBusModel& model, Adam& opt, const std::vector<PreprocessedSample>& samples,
                 int steps, int batch_size, uint64_t seed, double epsilon, int step_offset = 0);

/// Eval-mode forward + thresholded metrics for each sample (fold is left
/// at 0 for callers that do not care).
std::vector<PerImageResult> evaluate_samples(const NullBusModel& model,
                                             const std::vector<PreprocessedSample>& samples);

/// Full fold-filtered training run: optimizes Dice on the training folds,
/// evaluates the held-out fold each epoch, persists config.snapshot,
/// history.rows, folds.map and the best-validation-Dice checkpoint under
/// run_dir.
RunRecord fit(const Config& config, const DatasetPool& pool, const FoldAssignment& folds,
              const std::filesystem::path& run_dir);

}  // namespace nullbus
