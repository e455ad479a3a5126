#include "nullbus/nn.hpp"

#include <cmath>

namespace nullbus::nn {

using ad::Var;

Tensor he_normal(Rng& rng, std::vector<int64_t> shape, int64_t fan_in) {
  Tensor t(std::move(shape));
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, stddev);
  return t;
}

Tensor normal_init(Rng& rng, std::vector<int64_t> shape, double stddev) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, stddev);
  return t;
}

int gn_groups(int64_t channels) {
  int64_t best = 1;
  const int64_t cap = std::min<int64_t>(32, channels);
  for (int64_t g = 1; g <= cap; ++g)
    if (channels % g == 0) best = g;
  return static_cast<int>(best);
}

Linear::Linear(int64_t in, int64_t out, Rng& rng, bool zero_init) {
  Tensor wt = zero_init ? Tensor::zeros({out, in})
                        : normal_init(rng, {out, in}, std::sqrt(1.0 / static_cast<double>(in)));
  w = register_param("w", std::move(wt));
  b = register_param("b", Tensor::zeros({out}));
}

Var Linear::forward(const Var& x) const { return ad::linear_rows(x, w, b); }

Conv2d::Conv2d(int64_t cin, int64_t cout, int k, int stride_, int pad_, Rng& rng, int dilation_)
    : stride(stride_), pad(pad_), dilation(dilation_) {
  const int64_t fan_in = cin * k * k;
  w = register_param("w", he_normal(rng, {cout, cin, k, k}, fan_in));
  b = register_param("b", Tensor::zeros({cout}));
}

Var Conv2d::forward(const Var& x) const { return ad::conv2d(x, w, b, stride, pad, dilation); }

GroupNorm::GroupNorm(int64_t channels) : groups(gn_groups(channels)) {
  w = register_param("w", Tensor::full({channels}, 1.0));
  b = register_param("b", Tensor::zeros({channels}));
}

Var GroupNorm::forward(const Var& x) const { return ad::group_norm(x, w, b, groups); }

ConvBlock::ConvBlock(int64_t cin, int64_t cout, int k, int stride, int pad, Rng& rng,
                     int dilation, bool relu)
    : conv(cin, cout, k, stride, pad, rng, dilation), norm(cout), use_relu(relu) {
  register_child("conv", &conv);
  register_child("norm", &norm);
}

Var ConvBlock::forward(const Var& x) const {
  Var y = norm.forward(conv.forward(x));
  return use_relu ? ad::relu(y) : y;
}

Bottleneck::Bottleneck(int64_t cin, int64_t cout, int stride, Rng& rng)
    : reduce(cin, std::max<int64_t>(1, cout / 4), 1, 1, 0, rng),
      spatial(std::max<int64_t>(1, cout / 4), std::max<int64_t>(1, cout / 4), 3, stride, 1, rng),
      expand(std::max<int64_t>(1, cout / 4), cout, 1, 1, 0, rng, 1, /*relu=*/false),
      shortcut(cin, cout, 1, stride, 0, rng, 1, /*relu=*/false) {
  register_child("reduce", &reduce);
  register_child("spatial", &spatial);
  register_child("expand", &expand);
  register_child("shortcut", &shortcut);
}

Var Bottleneck::forward(const Var& x) const {
  Var main = expand.forward(spatial.forward(reduce.forward(x)));
  Var skip = shortcut.forward(x);
  return ad::relu(ad::add(main, skip));
}

SelfAttention2d::SelfAttention2d(int64_t channels_, Rng& rng)
    : q(channels_, channels_, rng),
      k(channels_, channels_, rng),
      v(channels_, channels_, rng),
      out(channels_, channels_, rng, /*zero_init=*/true),
      channels(channels_) {
  register_child("q", &q);
  register_child("k", &k);
  register_child("v", &v);
  register_child("out", &out);
}

Var SelfAttention2d::forward(const Var& x) const {
  const int64_t C = x.value().dim(0), H = x.value().dim(1), W = x.value().dim(2);
  Var tokens = ad::transpose(ad::reshape(x, {C, H * W}));  // {P,C}
  Var scores = ad::mul_scalar(ad::matmul_nt(q.forward(tokens), k.forward(tokens)),
                              1.0 / std::sqrt(static_cast<double>(C)));
  Var attended = ad::matmul(ad::softmax_rows(scores), v.forward(tokens));
  Var y = ad::reshape(ad::transpose(out.forward(attended)), {C, H, W});
  return ad::add(x, y);
}

DepthwiseConv2d::DepthwiseConv2d(int64_t channels, int k, Rng& rng) : pad(k / 2) {
  w = register_param("w", he_normal(rng, {channels, k, k}, k * k));
  b = register_param("b", Tensor::zeros({channels}));
}

Var DepthwiseConv2d::forward(const Var& x) const {
  return ad::depthwise_conv2d(x, w, b, pad);
}

SEBlock::SEBlock(int64_t channels, int reduction, Rng& rng)
    : fc1(channels, std::max<int64_t>(1, channels / reduction), rng),
      fc2(std::max<int64_t>(1, channels / reduction), channels, rng) {
  register_child("fc1", &fc1);
  register_child("fc2", &fc2);
}

Var SEBlock::gates(const Var& x) const {
  const int64_t C = x.value().dim(0);
  Var s = ad::reshape(ad::global_avg_pool(x), {1, C});
  Var g = ad::sigmoid(fc2.forward(ad::relu(fc1.forward(s))));
  return ad::reshape(g, {C});
}

Var SEBlock::forward(const Var& x) const { return ad::scale_channels(x, gates(x)); }

ModulationHead::ModulationHead(int64_t in_dim, int64_t out_dim, Kind kind_, Rng& rng)
    : hidden(in_dim, in_dim, rng), out(in_dim, out_dim, rng, /*zero_init=*/true), kind(kind_) {
  register_child("hidden", &hidden);
  register_child("out", &out);
}

Var ModulationHead::forward(const Var& z) const {
  const int64_t d = z.value().dim(0);
  Var h = ad::tanh(hidden.forward(ad::reshape(z, {1, d})));
  Var o = out.forward(h);
  if (kind == Kind::gamma) o = ad::add_scalar(ad::tanh(o), 1.0);
  return ad::reshape(o, {o.value().dim(1)});
}

namespace {
int64_t aspp_branch_channels(int64_t cout, size_t n_rates) {
  const int64_t n = static_cast<int64_t>(n_rates) + 1;  // dilated branches + pooling branch
  return std::max<int64_t>(1, (cout + n / 2) / n);
}
}  // namespace

Aspp::Aspp(int64_t cin, int64_t cout, const std::vector<int>& rates_, Rng& rng)
    : pool_proj(cin, aspp_branch_channels(cout, rates_.size()), 1, 1, 0, rng),
      project(aspp_branch_channels(cout, rates_.size()) *
                  static_cast<int64_t>(rates_.size() + 1),
              cout, 1, 1, 0, rng),
      rates(rates_) {
  if (rates.empty()) throw std::invalid_argument("aspp: need at least one rate");
  const int64_t bc = aspp_branch_channels(cout, rates.size());
  for (int r : rates) {
    if (r <= 0) throw std::invalid_argument("aspp: dilation rates must be positive");
    if (r == 1)
      branches.push_back(std::make_unique<ConvBlock>(cin, bc, 1, 1, 0, rng));
    else
      branches.push_back(std::make_unique<ConvBlock>(cin, bc, 3, 1, r, rng, r));
  }
  for (size_t i = 0; i < branches.size(); ++i)
    register_child("branch" + std::to_string(rates[i]), branches[i].get());
  register_child("pool_proj", &pool_proj);
  register_child("project", &project);
}

Var Aspp::forward(const Var& x) const {
  const int64_t C = x.value().dim(0), H = x.value().dim(1), W = x.value().dim(2);
  std::vector<Var> feats;
  feats.reserve(branches.size() + 1);
  for (const auto& br : branches) feats.push_back(br->forward(x));
  Var pooled = ad::reshape(ad::global_avg_pool(x), {C, 1, 1});
  Var pb = ad::relu(pool_proj.forward(pooled));
  feats.push_back(ad::bilinear_resize(pb, H, W));
  return project.forward(ad::concat_channels(feats));
}

}  // namespace nullbus::nn
