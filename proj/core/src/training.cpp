#include "nullbus/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace nullbus {

using ad::Var;

Var dice_loss(const Var& logits, const Tensor& mask, double epsilon) {
  if (epsilon <= 0.0) throw std::invalid_argument("dice_loss: epsilon must be positive");
  if (logits.value().numel() != mask.numel())
    throw std::invalid_argument("dice_loss: shape mismatch, logits " +
                                logits.value().shape_str() + " vs mask " + mask.shape_str());
  double mask_sum = 0.0;
  for (int64_t i = 0; i < mask.numel(); ++i) {
    if (mask[i] != 0.0 && mask[i] != 1.0)
      throw std::invalid_argument("dice_loss: mask is not binary");
    mask_sum += mask[i];
  }
  Var flat = ad::reshape(logits, {mask.numel()});
  Var prob = ad::sigmoid(flat);
  Var inter = ad::sum(ad::mul(prob, Var::constant(mask.reshaped({mask.numel()}))));
  Var p_l1 = ad::sum(prob);
  Var num = ad::add_scalar(ad::mul_scalar(inter, 2.0), epsilon);
  Var den = ad::add_scalar(p_l1, mask_sum + epsilon);
  return ad::add_scalar(ad::mul_scalar(ad::div(num, den), -1.0), 1.0);
}

Adam::Adam(std::vector<nn::NamedParam> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.push_back(Tensor::zeros(p.var.value().shape()));
    v_.push_back(Tensor::zeros(p.var.value().shape()));
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

void Adam::step(double grad_scale) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.var.has_grad()) continue;
    Tensor& g = p.var.grad();
    Tensor& val = p.var.value_mut();
    for (int64_t j = 0; j < val.numel(); ++j) {
      const double gj = g[j] * grad_scale;
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * gj;
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * gj * gj;
      val[j] -= lr_ * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + eps_);
    }
  }
}

std::unique_ptr<NullBusModel> build_ablation(Ablation variant, const Config& base_config) {
  Config cfg = base_config;
  cfg.train.ablation = to_string(variant);
  return build_model(cfg);
}

double run_steps(NullBusModel& model, Adam& opt, const std::vector<PreprocessedSample>& samples,
                 int steps, int batch_size, uint64_t seed, double epsilon, int step_offset) {
  if (samples.empty()) throw std::invalid_argument("run_steps: empty training split");
  std::vector<size_t> order(samples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  double last_loss = 0.0;
  size_t cursor = order.size();  // forces a shuffle on the first step
  uint64_t shuffle_round = 0;
  for (int step = 0; step < steps; ++step) {
    const int global_step = step_offset + step;
    opt.zero_grad();
    double batch_loss = 0.0;
    const int bs = std::min<int>(batch_size, static_cast<int>(samples.size()));
    for (int b = 0; b < bs; ++b) {
      if (cursor >= order.size()) {
        Rng shuffle_rng = derive_rng(seed, {0x0EDEu, shuffle_round++});
        shuffle_rng.shuffle(order);
        cursor = 0;
      }
      const PreprocessedSample& s = samples[order[cursor++]];
      Rng sample_rng = derive_rng(seed, {fnv1a64(s.id), static_cast<uint64_t>(global_step)});
      Var logits = model.forward(s.image, s.prompts, Mode::train, &sample_rng, s.id);
      Var loss = dice_loss(logits, s.mask, epsilon);
      const double lv = loss.value().item();
      if (!std::isfinite(lv))
        throw std::runtime_error("non-finite training loss at step " +
                                 std::to_string(global_step) + " on sample " + s.id);
      batch_loss += lv;
      ad::backward(loss);
    }
    opt.step(1.0 / bs);
    last_loss = batch_loss / bs;
  }
  return last_loss;
}

std::vector<PerImageResult> evaluate_samples(const NullBusModel& model,
                                             const std::vector<PreprocessedSample>& samples) {
  ad::NoGradGuard ng;
  std::vector<PerImageResult> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    Var logits = model.forward(s.image, s.prompts, Mode::eval, nullptr, s.id);
    Tensor prob = logits.value().reshaped({s.mask.dim(0), s.mask.dim(1)});
    for (int64_t i = 0; i < prob.numel(); ++i) prob[i] = 1.0 / (1.0 + std::exp(-prob[i]));
    out.push_back({s.id, 0, metric_row(confusion(prob, s.mask, 0.5))});
  }
  return out;
}

RunRecord fit(const Config& config, const DatasetPool& pool, const FoldAssignment& folds,
              const std::filesystem::path& run_dir) {
  config.validate();
  const int fold = config.train.fold_index;

  std::vector<PreprocessedSample> train_set, val_set;
  std::set<std::string> train_ids, val_ids;
  for (const auto& r : pool.records) {
    PreprocessedSample s = load_and_preprocess(r, config.data.image_size);
    if (folds.fold_of(r.id) == fold) {
      val_set.push_back(std::move(s));
      val_ids.insert(r.id);
    } else {
      train_set.push_back(std::move(s));
      train_ids.insert(r.id);
    }
  }
  if (train_set.empty()) throw std::runtime_error("fit: empty training split");
  if (val_set.empty()) throw std::runtime_error("fit: empty validation split");
  for (const auto& id : val_ids)
    if (train_ids.count(id)) throw std::logic_error("fit: sample " + id + " in both splits");

  std::filesystem::create_directories(run_dir);
  auto model = build_model(config);
  Adam opt(model->trainable_params(), config.train.learning_rate);

  RunRecord rec;
  rec.seed = config.seed;
  rec.config_snapshot = config_to_json(config);
  {
    std::ofstream snap(run_dir / "config.snapshot");
    snap << rec.config_snapshot << "\n";
  }
  save_folds(run_dir / "folds.map", folds);

  const int steps_per_epoch =
      std::max<int>(1, static_cast<int>((train_set.size() + config.train.batch_size - 1) /
                                        config.train.batch_size));
  const auto ckpt_path = run_dir / "best.ckpt";

  std::ofstream hist(run_dir / "history.rows");
  hist << "epoch,loss,IoU,Dice,FPR,FNR\n";
  for (int epoch = 0; epoch < config.train.epochs; ++epoch) {
    const double loss =
        run_steps(*model, opt, train_set, steps_per_epoch, config.train.batch_size, config.seed,
                  config.train.epsilon, epoch * steps_per_epoch);
    std::vector<MetricRow> rows;
    for (auto& r : evaluate_samples(*model, val_set)) rows.push_back(r.metrics);
    EpochRow er;
    er.epoch = epoch;
    er.train_loss = loss;
    er.val = mean_of(rows);
    rec.history.push_back(er);
    hist << epoch << "," << er.train_loss << "," << format_metric(er.val.iou) << ","
         << format_metric(er.val.dice) << "," << format_metric(er.val.fpr) << ","
         << format_metric(er.val.fnr) << "\n";
    if (er.val.dice > rec.best_val_dice) {
      rec.best_val_dice = er.val.dice;
      rec.best_epoch = epoch;
      save_checkpoint(ckpt_path, *model);
    }
  }
  rec.checkpoint_path = ckpt_path.string();
  return rec;
}

}  // namespace nullbus
