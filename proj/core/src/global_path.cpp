#include "nullbus/global_path.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <fstream>

namespace nullbus {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapC = Eigen::Map<const MatRM>;

// Plain-tensor transformer kernels for the frozen backbone (no tape).

void layer_norm_rows(Tensor& x, const Tensor& w, const Tensor& b) {
  const int64_t n = x.dim(0), d = x.dim(1);
  for (int64_t r = 0; r < n; ++r) {
    double* row = x.data() + r * d;
    double mu = 0.0;
    for (int64_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      const double dv = row[i] - mu;
      var += dv * dv;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (int64_t i = 0; i < d; ++i) row[i] = (row[i] - mu) * inv * w[i] + b[i];
  }
}

// y = x * W^T + b for row-major {n,in} x {out,in}.
Tensor affine_rows(const Tensor& x, const Tensor& w, const Tensor& b) {
  const int64_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
  Tensor y({n, out});
  MapM(y.data(), n, out).noalias() = MapC(x.data(), n, in) * MapC(w.data(), out, in).transpose();
  for (int64_t r = 0; r < n; ++r)
    for (int64_t c = 0; c < out; ++c) y.at(r, c) += b[c];
  return y;
}

void softmax_rows_inplace(Tensor& x) {
  const int64_t n = x.dim(0), m = x.dim(1);
  for (int64_t r = 0; r < n; ++r) {
    double* row = x.data() + r * m;
    double mx = row[0];
    for (int64_t i = 1; i < m; ++i) mx = std::max(mx, row[i]);
    double s = 0.0;
    for (int64_t i = 0; i < m; ++i) {
      row[i] = std::exp(row[i] - mx);
      s += row[i];
    }
    for (int64_t i = 0; i < m; ++i) row[i] /= s;
  }
}

void gelu_inplace(Tensor& x) {
  for (int64_t i = 0; i < x.numel(); ++i)
    x[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * 0.7071067811865475244));
}

Tensor rand_matrix(Rng& rng, int64_t rows, int64_t cols, double scale) {
  Tensor t({rows, cols});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, scale);
  return t;
}

}  // namespace

ToyViT::ToyViT(int patch_size, int64_t dim, int blocks, int block_index, uint64_t seed)
    : patch_(patch_size), dim_(dim), block_index_(block_index), seed_(seed) {
  if (patch_size < 1 || dim < 1 || blocks < 1)
    throw std::invalid_argument("ToyViT: bad configuration");
  if (block_index < 0 || block_index >= blocks)
    throw std::invalid_argument("ToyViT: token_block_index out of range");
  Rng rng = derive_rng(seed, {0xB1Bu});
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  patch_proj_ = rand_matrix(rng, dim, static_cast<int64_t>(patch_size) * patch_size, s);
  patch_bias_ = Tensor::zeros({dim});
  cls_ = rand_matrix(rng, 1, dim, 0.02).reshaped({dim});
  blocks_.resize(static_cast<size_t>(blocks));
  for (auto& blk : blocks_) {
    blk.ln1_w = Tensor::full({dim}, 1.0);
    blk.ln1_b = Tensor::zeros({dim});
    blk.ln2_w = Tensor::full({dim}, 1.0);
    blk.ln2_b = Tensor::zeros({dim});
    blk.wq = rand_matrix(rng, dim, dim, s);
    blk.bq = Tensor::zeros({dim});
    blk.wk = rand_matrix(rng, dim, dim, s);
    blk.bk = Tensor::zeros({dim});
    blk.wv = rand_matrix(rng, dim, dim, s);
    blk.bv = Tensor::zeros({dim});
    blk.wo = rand_matrix(rng, dim, dim, s);
    blk.bo = Tensor::zeros({dim});
    blk.w1 = rand_matrix(rng, 4 * dim, dim, s);
    blk.b1 = Tensor::zeros({4 * dim});
    blk.w2 = rand_matrix(rng, dim, 4 * dim, 0.5 * s);
    blk.b2 = Tensor::zeros({dim});
  }
}

const Tensor& ToyViT::pos_embedding(int64_t n_tokens) const {
  auto it = pos_cache_.find(n_tokens);
  if (it != pos_cache_.end()) return it->second;
  Rng rng = derive_rng(seed_, {0x905u, static_cast<uint64_t>(n_tokens)});
  Tensor pos = rand_matrix(rng, n_tokens, dim_, 0.02);
  return pos_cache_.emplace(n_tokens, std::move(pos)).first->second;
}

TokenGrid ToyViT::encode(const Tensor& image, const std::string&) const {
  if (image.rank() != 2) throw std::invalid_argument("ToyViT: expected {H,W} image");
  const int64_t h = image.dim(0), w = image.dim(1);
  if (h % patch_ != 0 || w % patch_ != 0)
    throw std::invalid_argument("ToyViT: image size " + image.shape_str() +
                                " not divisible by patch size " + std::to_string(patch_));
  const int64_t ht = h / patch_, wt = w / patch_;
  const int64_t n = ht * wt;

  Tensor patches({n, static_cast<int64_t>(patch_) * patch_});
  for (int64_t py = 0; py < ht; ++py)
    for (int64_t px = 0; px < wt; ++px) {
      double* dst = patches.data() + (py * wt + px) * patch_ * patch_;
      for (int64_t iy = 0; iy < patch_; ++iy)
        for (int64_t ix = 0; ix < patch_; ++ix)
          dst[iy * patch_ + ix] = image.at(py * patch_ + iy, px * patch_ + ix);
    }

  Tensor x({n + 1, dim_});
  Tensor emb = affine_rows(patches, patch_proj_, patch_bias_);
  const Tensor& pos = pos_embedding(n + 1);
  for (int64_t c = 0; c < dim_; ++c) x.at(0, c) = cls_[c] + pos.at(0, c);
  for (int64_t r = 0; r < n; ++r)
    for (int64_t c = 0; c < dim_; ++c) x.at(r + 1, c) = emb.at(r, c) + pos.at(r + 1, c);

  Tensor tapped;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim_));
  for (size_t bi = 0; bi < blocks_.size(); ++bi) {
    const Block& blk = blocks_[bi];
    Tensor normed = x;
    layer_norm_rows(normed, blk.ln1_w, blk.ln1_b);
    Tensor q = affine_rows(normed, blk.wq, blk.bq);
    Tensor k = affine_rows(normed, blk.wk, blk.bk);
    Tensor v = affine_rows(normed, blk.wv, blk.bv);
    Tensor scores({n + 1, n + 1});
    MapM(scores.data(), n + 1, n + 1).noalias() =
        MapC(q.data(), n + 1, dim_) * MapC(k.data(), n + 1, dim_).transpose() * scale;
    softmax_rows_inplace(scores);
    Tensor mixed({n + 1, dim_});
    MapM(mixed.data(), n + 1, dim_).noalias() =
        MapC(scores.data(), n + 1, n + 1) * MapC(v.data(), n + 1, dim_);
    Tensor attn_out = affine_rows(mixed, blk.wo, blk.bo);
    axpy(x, 1.0, attn_out);

    Tensor normed2 = x;
    layer_norm_rows(normed2, blk.ln2_w, blk.ln2_b);
    Tensor hiddenv = affine_rows(normed2, blk.w1, blk.b1);
    gelu_inplace(hiddenv);
    Tensor mlp_out = affine_rows(hiddenv, blk.w2, blk.b2);
    axpy(x, 1.0, mlp_out);

    if (static_cast<int>(bi) == block_index_) tapped = x;
  }

  TokenGrid out;
  out.grid_h = ht;
  out.grid_w = wt;
  out.tokens = Tensor({n, dim_});
  for (int64_t r = 0; r < n; ++r)
    for (int64_t c = 0; c < dim_; ++c) out.tokens.at(r, c) = tapped.at(r + 1, c);
  if (!out.tokens.all_finite()) throw std::runtime_error("ToyViT: non-finite token features");
  return out;
}

uint64_t ToyViT::fingerprint() const {
  uint64_t h = fnv1a64(patch_proj_.data(), sizeof(double) * patch_proj_.numel());
  h = fnv1a64(cls_.data(), sizeof(double) * cls_.numel(), h);
  for (const auto& blk : blocks_) {
    for (const Tensor* t : {&blk.wq, &blk.wk, &blk.wv, &blk.wo, &blk.w1, &blk.w2})
      h = fnv1a64(t->data(), sizeof(double) * t->numel(), h);
  }
  return h;
}

ExternalTokenBackbone::ExternalTokenBackbone(std::filesystem::path dir, int64_t dim)
    : dir_(std::move(dir)), dim_(dim) {}

TokenGrid ExternalTokenBackbone::encode(const Tensor&, const std::string& sample_id) const {
  if (sample_id.empty())
    throw std::invalid_argument("external backbone requires a sample id to look up tokens");
  const auto path = dir_ / (sample_id + ".tok");
  TokenGrid grid = read_token_file(path);
  if (grid.tokens.dim(1) != dim_)
    throw std::runtime_error("token file " + path.string() + ": dim " +
                             std::to_string(grid.tokens.dim(1)) + " != configured " +
                             std::to_string(dim_));
  return grid;
}

void write_token_file(const std::filesystem::path& path, const TokenGrid& grid) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write token file: " + path.string());
  const uint32_t h = static_cast<uint32_t>(grid.grid_h);
  const uint32_t w = static_cast<uint32_t>(grid.grid_w);
  const uint32_t d = static_cast<uint32_t>(grid.tokens.dim(1));
  out.write(reinterpret_cast<const char*>(&h), 4);
  out.write(reinterpret_cast<const char*>(&w), 4);
  out.write(reinterpret_cast<const char*>(&d), 4);
  out.write(reinterpret_cast<const char*>(grid.tokens.data()),
            static_cast<std::streamsize>(sizeof(double) * grid.tokens.numel()));
}

TokenGrid read_token_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open token file: " + path.string());
  uint32_t h = 0, w = 0, d = 0;
  in.read(reinterpret_cast<char*>(&h), 4);
  in.read(reinterpret_cast<char*>(&w), 4);
  in.read(reinterpret_cast<char*>(&d), 4);
  if (!in || h == 0 || w == 0 || d == 0)
    throw std::runtime_error("bad token file header: " + path.string());
  TokenGrid grid;
  grid.grid_h = h;
  grid.grid_w = w;
  grid.tokens = Tensor({static_cast<int64_t>(h) * w, static_cast<int64_t>(d)});
  in.read(reinterpret_cast<char*>(grid.tokens.data()),
          static_cast<std::streamsize>(sizeof(double) * grid.tokens.numel()));
  if (!in) throw std::runtime_error("truncated token file: " + path.string());
  return grid;
}

GlobalPath::GlobalPath(std::shared_ptr<TokenBackbone> backbone, int64_t text_dim, int64_t c_g,
                       Rng& rng)
    : backbone_(std::move(backbone)),
      c_g_(c_g),
      gamma_head(text_dim, backbone_->token_dim(), nn::ModulationHead::Kind::gamma, rng),
      beta_head(text_dim, backbone_->token_dim(), nn::ModulationHead::Kind::beta, rng),
      proj(backbone_->token_dim(), c_g, 1, 1, 0, rng),
      norm(c_g) {
  register_child("gamma", &gamma_head);
  register_child("beta", &beta_head);
  register_child("proj", &proj);
  register_child("norm", &norm);
}

TokenGrid GlobalPath::encode_tokens(const Tensor& image, const std::string& sample_id) const {
  return backbone_->encode(image, sample_id);
}

std::pair<ad::Var, ad::Var> GlobalPath::blend_coefficients(const ad::Var& z_g) const {
  return {gamma_head.forward(z_g), beta_head.forward(z_g)};
}

ad::Var GlobalPath::blend_tokens(const TokenGrid& grid, const ad::Var& z_g) const {
  const auto [gamma, beta] = blend_coefficients(z_g);
  return ad::film_rows(ad::Var::constant(grid.tokens), gamma, beta);
}

ad::Var GlobalPath::spatialize_project(const ad::Var& blended, int64_t grid_h, int64_t grid_w,
                                       int64_t target_h, int64_t target_w) const {
  const int64_t d = blended.value().dim(1);
  ad::Var spatial = ad::reshape(ad::transpose(blended), {d, grid_h, grid_w});
  ad::Var resized = ad::bilinear_resize(spatial, target_h, target_w);
  return norm.forward(proj.forward(resized));
}

ad::Var GlobalPath::forward(const Tensor& image, const ad::Var& z_g,
                            const std::string& sample_id, int64_t target_h, int64_t target_w,
                            TokenGrid* token_trace) const {
  TokenGrid grid = backbone_->encode(image, sample_id);
  if (token_trace) *token_trace = grid;
  ad::Var blended = blend_tokens(grid, z_g);
  return spatialize_project(blended, grid.grid_h, grid.grid_w, target_h, target_w);
}

}  // namespace nullbus
