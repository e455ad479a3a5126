#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include "nullbus/nn.hpp"
#include "nullbus/rng.hpp"
#include "nullbus/tensor.hpp"

namespace nullbus {

enum class Mode { train, eval };

/// Optional global and local text descriptors for one image. Absence is a
/// first-class state; empty or whitespace-only strings normalize to absent.
struct PromptPair {
  std::optional<std::string> global_text;
  std::optional<std::string> local_text;
};

std::optional<std::string> normalize_prompt(const std::optional<std::string>& text);
PromptPair normalize_pair(const PromptPair& pair);

/// 1 iff the prompt is present after whitespace normalization.
int presence_mask(const std::optional<std::string>& prompt);

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual Tensor encode(const std::string& text) const = 0;  // -> {dim}
  virtual int64_t dim() const = 0;
};

/// Deterministic bag-of-tokens embedding: whitespace tokens are hashed to
/// seeded pseudo-random unit vectors, averaged and L2-normalized. A
/// desk-scale stand-in for a pretrained text tower.
class HashTextEncoder : public TextEncoder {
 public:
  HashTextEncoder(int64_t dim, uint64_t seed);
  Tensor encode(const std::string& text) const override;
  int64_t dim() const override { return dim_; }

 private:
  int64_t dim_;
  uint64_t seed_;
};

/// Looks embeddings up in a sidecar table keyed by the exact prompt text.
/// Format: one record per line, `key<TAB>v1,v2,...,vd`. Intended for
/// attaching embeddings from a real pretrained text tower.
class ExternalTextEncoder : public TextEncoder {
 public:
  ExternalTextEncoder(const std::filesystem::path& table_path, int64_t dim);
  Tensor encode(const std::string& text) const override;
  int64_t dim() const override { return dim_; }

 private:
  int64_t dim_;
  std::map<std::string, Tensor> table_;
};

/// Outputs of the nullable encoding for one sample: the embeddings fed to
/// the network plus the presence/dropout/blend indicators. Always
/// satisfies z = alpha*T(text) + (1-alpha)*z_null with alpha = m*d.
struct EncodedPrompts {
  ad::Var z_g;
  ad::Var z_l;
  int m_g = 0, m_l = 0;
  int d_g = 1, d_l = 1;
  int alpha_g = 0, alpha_l = 0;
};

/// Owns the learnable null embeddings and applies the nullable blend: the
/// text encoder output when a prompt is present (and not dropped), the
/// learned null otherwise. One code path covers all four presence regimes.
class PromptEngine : public nn::Module {
 public:
  PromptEngine(std::shared_ptr<TextEncoder> encoder, double dropout_rate, Rng& init_rng);

  /// In train mode, d_g and d_l are independent Bernoulli(1-p) draws from
  /// rng (required). In eval mode d_g = d_l = 1 and rng is ignored.
  EncodedPrompts encode(const PromptPair& pair, Mode mode, Rng* rng) const;

  /// Both paths forced to the learned nulls; no text is ever encoded.
  /// Used by the zero-text ablation.
  EncodedPrompts encode_nulls_only() const;

  const ad::Var& null_global() const { return z_null_g_; }
  const ad::Var& null_local() const { return z_null_l_; }
  double dropout_rate() const { return p_; }
  const TextEncoder& encoder() const { return *encoder_; }

 private:
  ad::Var encode_one(const std::optional<std::string>& text, const ad::Var& z_null, int mask,
                     int drop_keep, const char* which) const;

  std::shared_ptr<TextEncoder> encoder_;
  double p_;
  ad::Var z_null_g_;
  ad::Var z_null_l_;
};

}  // namespace nullbus
