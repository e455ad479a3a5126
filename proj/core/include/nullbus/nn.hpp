#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "nullbus/autodiff.hpp"
#include "nullbus/rng.hpp"
#include "nullbus/tensor.hpp"

namespace nullbus::nn {

struct NamedParam {
  std::string name;
  ad::Var var;
};

/// Base for anything owning parameters. Children are registered by
/// pointer, so modules are pinned in memory (no copy/move).
class Module {
 public:
  Module() = default;
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  void collect_params(const std::string& prefix, std::vector<NamedParam>& out) const {
    for (const auto& p : params_)
      out.push_back({prefix.empty() ? p.name : prefix + "." + p.name, p.var});
    for (const auto& [name, child] : children_)
      child->collect_params(prefix.empty() ? name : prefix + "." + name, out);
  }

  std::vector<NamedParam> named_params() const {
    std::vector<NamedParam> out;
    collect_params("", out);
    return out;
  }

 protected:
  ad::Var register_param(const std::string& name, Tensor init, bool trainable = true) {
    ad::Var v = ad::Var::param(std::move(init), trainable);
    params_.push_back({name, v});
    return v;
  }
  void register_child(const std::string& name, Module* child) {
    children_.emplace_back(name, child);
  }

 private:
  std::vector<NamedParam> params_;
  std::vector<std::pair<std::string, Module*>> children_;
};

// ---- initializers ----
Tensor he_normal(Rng& rng, std::vector<int64_t> shape, int64_t fan_in);
Tensor normal_init(Rng& rng, std::vector<int64_t> shape, double stddev);

/// Largest group count that is <= min(32, C) and divides C. GroupNorm is
/// used in every convolutional block; channel counts are not always
/// multiples of 32 (e.g. rounded ASPP branch widths).
int gn_groups(int64_t channels);

class Linear : public Module {
 public:
  Linear(int64_t in, int64_t out, Rng& rng, bool zero_init = false);
  ad::Var forward(const ad::Var& x) const;  // {N,in} -> {N,out}

  ad::Var w, b;
};

class Conv2d : public Module {
 public:
  Conv2d(int64_t cin, int64_t cout, int k, int stride, int pad, Rng& rng, int dilation = 1);
  ad::Var forward(const ad::Var& x) const;

  ad::Var w, b;
  int stride, pad, dilation;
};

class GroupNorm : public Module {
 public:
  explicit GroupNorm(int64_t channels);
  ad::Var forward(const ad::Var& x) const;

  ad::Var w, b;
  int groups;
};

/// Conv -> GroupNorm -> optional ReLU.
class ConvBlock : public Module {
 public:
  ConvBlock(int64_t cin, int64_t cout, int k, int stride, int pad, Rng& rng, int dilation = 1,
            bool relu = true);
  ad::Var forward(const ad::Var& x) const;

  Conv2d conv;
  GroupNorm norm;
  bool use_relu;
};

/// 1x1 -> 3x3(stride) -> 1x1 with a projected shortcut; GroupNorm and
/// ReLU throughout. mid = out/4 as in the usual bottleneck layout.
class Bottleneck : public Module {
 public:
  Bottleneck(int64_t cin, int64_t cout, int stride, Rng& rng);
  ad::Var forward(const ad::Var& x) const;

  ConvBlock reduce, spatial;
  ConvBlock expand;    // no relu before the residual add
  ConvBlock shortcut;  // no relu
};

/// Single-head spatial self-attention over flattened positions with a
/// residual add. The output projection starts at zero so the layer is the
/// identity at initialization.
class SelfAttention2d : public Module {
 public:
  SelfAttention2d(int64_t channels, Rng& rng);
  ad::Var forward(const ad::Var& x) const;  // {C,H,W} -> {C,H,W}

  Linear q, k, v, out;
  int64_t channels;
};

/// Per-channel 3x3 convolution (stride 1, padding preserves size).
class DepthwiseConv2d : public Module {
 public:
  DepthwiseConv2d(int64_t channels, int k, Rng& rng);
  ad::Var forward(const ad::Var& x) const;

  ad::Var w, b;
  int pad;
};

/// Squeeze-excitation channel gate.
class SEBlock : public Module {
 public:
  SEBlock(int64_t channels, int reduction, Rng& rng);
  ad::Var forward(const ad::Var& x) const;
  ad::Var gates(const ad::Var& x) const;  // sigmoid gate vector {C}

  Linear fc1, fc2;
};

/// Two-layer MLP head producing per-channel modulation coefficients from
/// a prompt embedding. Gamma heads emit 1 + tanh(mlp) so modulation is
/// exactly the identity at initialization; beta heads emit the raw mlp.
class ModulationHead : public Module {
 public:
  enum class Kind { gamma, beta };
  ModulationHead(int64_t in_dim, int64_t out_dim, Kind kind, Rng& rng);
  ad::Var forward(const ad::Var& z) const;  // {D} -> {out}

  Linear hidden, out;
  Kind kind;
};

/// Parallel dilated branches plus a global-pooling branch, concatenated
/// and projected 1x1. Rate 1 is a 1x1 branch; rate r>1 a 3x3 with
/// dilation r. Spatial size is preserved.
class Aspp : public Module {
 public:
  Aspp(int64_t cin, int64_t cout, const std::vector<int>& rates, Rng& rng);
  ad::Var forward(const ad::Var& x) const;

  std::vector<std::unique_ptr<ConvBlock>> branches;
  Conv2d pool_proj;
  ConvBlock project;
  std::vector<int> rates;
};

}  // namespace nullbus::nn
