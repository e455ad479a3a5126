#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>

#include "nullbus/nn.hpp"
#include "nullbus/rng.hpp"
#include "nullbus/tensor.hpp"

namespace nullbus {

/// Patch tokens from the frozen vision backbone; the class token is
/// already dropped. tokens is {N, d_tok} with N = grid_h * grid_w.
struct TokenGrid {
  Tensor tokens;
  int64_t grid_h = 0;
  int64_t grid_w = 0;
};

/// Frozen token producer. Weights never receive gradients; encode runs
/// outside the tape entirely.
class TokenBackbone {
 public:
  virtual ~TokenBackbone() = default;
  virtual TokenGrid encode(const Tensor& image, const std::string& sample_id) const = 0;
  virtual int64_t token_dim() const = 0;
  /// Hash over all frozen weights; lets tests assert zero drift.
  virtual uint64_t fingerprint() const = 0;
};

/// Small frozen randomly-initialized patch-embedding transformer standing
/// in for a pretrained CLIP ViT at desk scale. Pre-LN blocks, single-head
/// attention, GELU MLP; intermediate token features are taken from the
/// configured block (default: penultimate).
class ToyViT : public TokenBackbone {
 public:
  ToyViT(int patch_size, int64_t dim, int blocks, int block_index, uint64_t seed);
  TokenGrid encode(const Tensor& image, const std::string& sample_id) const override;
  int64_t token_dim() const override { return dim_; }
  uint64_t fingerprint() const override;
  int patch_size() const { return patch_; }

 private:
  struct Block {
    Tensor ln1_w, ln1_b, ln2_w, ln2_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor w1, b1, w2, b2;
  };

  const Tensor& pos_embedding(int64_t n_tokens) const;

  int patch_;
  int64_t dim_;
  int block_index_;
  uint64_t seed_;
  Tensor patch_proj_, patch_bias_, cls_;
  std::vector<Block> blocks_;
  mutable std::map<int64_t, Tensor> pos_cache_;
};

/// Reads precomputed token grids from `<dir>/<sample_id>.tok`; the hook
/// for attaching a real pretrained backbone at paper scale.
class ExternalTokenBackbone : public TokenBackbone {
 public:
  ExternalTokenBackbone(std::filesystem::path dir, int64_t dim);
  TokenGrid encode(const Tensor& image, const std::string& sample_id) const override;
  int64_t token_dim() const override { return dim_; }
  uint64_t fingerprint() const override { return 0; }

 private:
  std::filesystem::path dir_;
  int64_t dim_;
};

void write_token_file(const std::filesystem::path& path, const TokenGrid& grid);
TokenGrid read_token_file(const std::filesystem::path& path);

/// Text-conditioned global feature producer: conditional blend of the
/// frozen tokens by z_g, spatialization, and a 1x1 projection with
/// GroupNorm aligned to the local bottleneck resolution.
class GlobalPath : public nn::Module {
 public:
  GlobalPath(std::shared_ptr<TokenBackbone> backbone, int64_t text_dim, int64_t c_g, Rng& rng);

  TokenGrid encode_tokens(const Tensor& image, const std::string& sample_id) const;

  /// gamma(z_g) (.) tokens + beta(z_g), broadcast over tokens.
  ad::Var blend_tokens(const TokenGrid& grid, const ad::Var& z_g) const;

  /// The (gamma, beta) vectors the blend heads produce for z_g.
  std::pair<ad::Var, ad::Var> blend_coefficients(const ad::Var& z_g) const;

  /// Reshape to the token grid, bilinear-resample to the target size,
  /// project 1x1 to C_g and group-normalize.
  ad::Var spatialize_project(const ad::Var& blended, int64_t grid_h, int64_t grid_w,
                             int64_t target_h, int64_t target_w) const;

  ad::Var forward(const Tensor& image, const ad::Var& z_g, const std::string& sample_id,
                  int64_t target_h, int64_t target_w, TokenGrid* token_trace = nullptr) const;

  const TokenBackbone& backbone() const { return *backbone_; }
  int64_t c_g() const { return c_g_; }

 private:
  std::shared_ptr<TokenBackbone> backbone_;
  int64_t c_g_;
  nn::ModulationHead gamma_head, beta_head;
  nn::Conv2d proj;
  nn::GroupNorm norm;
};

}  // namespace nullbus
