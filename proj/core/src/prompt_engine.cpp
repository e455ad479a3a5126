#include "nullbus/prompt_engine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace nullbus {

std::optional<std::string> normalize_prompt(const std::optional<std::string>& text) {
  if (!text) return std::nullopt;
  const auto first = text->find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return std::nullopt;
  const auto last = text->find_last_not_of(" \t\r\n");
  return text->substr(first, last - first + 1);
}

PromptPair normalize_pair(const PromptPair& pair) {
  return {normalize_prompt(pair.global_text), normalize_prompt(pair.local_text)};
}

int presence_mask(const std::optional<std::string>& prompt) {
  return normalize_prompt(prompt).has_value() ? 1 : 0;
}

HashTextEncoder::HashTextEncoder(int64_t dim, uint64_t seed) : dim_(dim), seed_(seed) {
  if (dim < 1) throw std::invalid_argument("HashTextEncoder: dim must be >= 1");
}

Tensor HashTextEncoder::encode(const std::string& text) const {
  std::istringstream ss(text);
  std::vector<std::string> tokens;
  for (std::string tok; ss >> tok;) tokens.push_back(tok);
  if (tokens.empty())
    throw std::invalid_argument("HashTextEncoder: cannot encode an absent/empty prompt");
  // Sorting makes the bag-of-tokens average independent of word order at
  // the bit level, not just mathematically.
  std::sort(tokens.begin(), tokens.end());

  Tensor acc({dim_});
  for (const auto& tok : tokens) {
    Rng rng = derive_rng(seed_, {0x70CEu, fnv1a64(tok)});
    Tensor v({dim_});
    double norm2 = 0.0;
    for (int64_t i = 0; i < dim_; ++i) {
      v[i] = rng.normal();
      norm2 += v[i] * v[i];
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (int64_t i = 0; i < dim_; ++i) acc[i] += v[i] * inv;
  }
  double norm2 = 0.0;
  for (int64_t i = 0; i < dim_; ++i) norm2 += acc[i] * acc[i];
  if (norm2 < 1e-24)
    throw std::runtime_error("HashTextEncoder: degenerate embedding for \"" + text + "\"");
  const double inv = 1.0 / std::sqrt(norm2);
  for (int64_t i = 0; i < dim_; ++i) acc[i] *= inv;
  return acc;
}

ExternalTextEncoder::ExternalTextEncoder(const std::filesystem::path& table_path, int64_t dim)
    : dim_(dim) {
  std::ifstream in(table_path);
  if (!in)
    throw std::runtime_error("cannot open external embedding table: " + table_path.string());
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error("external embedding table line " + std::to_string(lineno) +
                               ": expected key<TAB>values");
    const std::string key = line.substr(0, tab);
    Tensor v({dim_});
    std::istringstream vs(line.substr(tab + 1));
    std::string cell;
    int64_t i = 0;
    while (std::getline(vs, cell, ',')) {
      if (i >= dim_) break;
      v[i++] = std::stod(cell);
    }
    if (i != dim_)
      throw std::runtime_error("external embedding table line " + std::to_string(lineno) +
                               ": expected " + std::to_string(dim_) + " values");
    table_[key] = std::move(v);
  }
}

Tensor ExternalTextEncoder::encode(const std::string& text) const {
  const auto it = table_.find(text);
  if (it == table_.end())
    throw std::runtime_error("no external embedding for prompt \"" + text + "\"");
  return it->second;
}

PromptEngine::PromptEngine(std::shared_ptr<TextEncoder> encoder, double dropout_rate,
                           Rng& init_rng)
    : encoder_(std::move(encoder)), p_(dropout_rate) {
  if (p_ < 0.0 || p_ > 1.0)
    throw std::invalid_argument("PromptEngine: dropout rate must lie in [0,1]");
  const int64_t d = encoder_->dim();
  // Nulls start at the encoding of a class-neutral descriptor, with small
  // noise to break the symmetry between the global and local null.
  Tensor base({d});
  try {
    base = encoder_->encode("breast ultrasound image");
  } catch (const std::exception&) {
    // External tables may not carry the neutral key; start at noise only.
  }
  Tensor g = base, l = base;
  for (int64_t i = 0; i < d; ++i) {
    g[i] += init_rng.normal(0.0, 0.01);
    l[i] += init_rng.normal(0.0, 0.01);
  }
  z_null_g_ = register_param("z_null_g", std::move(g));
  z_null_l_ = register_param("z_null_l", std::move(l));
}

ad::Var PromptEngine::encode_one(const std::optional<std::string>& text, const ad::Var& z_null,
                                 int mask, int drop_keep, const char* which) const {
  const int alpha = mask * drop_keep;
  if (alpha == 0) return z_null;
  try {
    return ad::Var::constant(encoder_->encode(*text));
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("failed to encode ") + which + " prompt \"" + *text +
                             "\": " + e.what());
  }
}

EncodedPrompts PromptEngine::encode(const PromptPair& pair, Mode mode, Rng* rng) const {
  if (mode == Mode::train && rng == nullptr)
    throw std::invalid_argument("PromptEngine::encode: train mode requires an rng");
  const PromptPair p = normalize_pair(pair);
  EncodedPrompts out;
  out.m_g = presence_mask(p.global_text);
  out.m_l = presence_mask(p.local_text);
  if (mode == Mode::train) {
    out.d_g = rng->bernoulli(1.0 - p_) ? 1 : 0;
    out.d_l = rng->bernoulli(1.0 - p_) ? 1 : 0;
  } else {
    out.d_g = 1;
    out.d_l = 1;
  }
  out.alpha_g = out.m_g * out.d_g;
  out.alpha_l = out.m_l * out.d_l;
  out.z_g = encode_one(p.global_text, z_null_g_, out.m_g, out.d_g, "global");
  out.z_l = encode_one(p.local_text, z_null_l_, out.m_l, out.d_l, "local");
  return out;
}

EncodedPrompts PromptEngine::encode_nulls_only() const {
  EncodedPrompts out;
  out.z_g = z_null_g_;
  out.z_l = z_null_l_;
  return out;
}

}  // namespace nullbus
