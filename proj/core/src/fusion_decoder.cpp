#include "nullbus/fusion_decoder.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>

namespace nullbus {

using ad::Var;

UpFusionStage::UpFusionStage(int64_t in_c, int64_t skip_c, int64_t out_c, int se_reduction,
                             Rng& rng)
    : se(in_c + skip_c, se_reduction, rng),
      dw(in_c + skip_c, 3, rng),
      dw_norm(in_c + skip_c),
      pw(in_c + skip_c, out_c, 1, 1, 0, rng),
      pw_norm(out_c),
      shortcut(in_c + skip_c, out_c, 1, 1, 0, rng),
      shortcut_norm(out_c) {
  register_child("se", &se);
  register_child("dw", &dw);
  register_child("dw_norm", &dw_norm);
  register_child("pw", &pw);
  register_child("pw_norm", &pw_norm);
  register_child("shortcut", &shortcut);
  register_child("shortcut_norm", &shortcut_norm);
}

Var UpFusionStage::forward(const Var& x, const Var& skip) const {
  const int64_t sh = skip.value().dim(1), sw = skip.value().dim(2);
  if (sh != 2 * x.value().dim(1) || sw != 2 * x.value().dim(2))
    throw std::invalid_argument("UpFusionStage: spatial mismatch after upsample, x " +
                                x.value().shape_str() + " vs skip " + skip.value().shape_str());
  Var up = ad::bilinear_resize(x, sh, sw);
  Var z = se.forward(ad::concat_channels({up, skip}));
  Var h = pw_norm.forward(pw.forward(ad::relu(dw_norm.forward(dw.forward(z)))));
  Var s = shortcut_norm.forward(shortcut.forward(z));
  return ad::relu(ad::add(h, s));
}

namespace {

Config validated(Config cfg) {
  cfg.validate();
  return cfg;
}

std::shared_ptr<TextEncoder> make_text_encoder(const Config& cfg) {
  if (cfg.text.encoder == "hash") {
    const uint64_t enc_seed = derive_rng(cfg.seed, {0x7E27u}).next_u64();
    return std::make_shared<HashTextEncoder>(cfg.text.dim, enc_seed);
  }
  if (cfg.text.external_embeddings.empty())
    throw std::invalid_argument("text.encoder=external requires text.external_embeddings");
  return std::make_shared<ExternalTextEncoder>(cfg.text.external_embeddings, cfg.text.dim);
}

std::shared_ptr<TokenBackbone> make_backbone(const Config& cfg) {
  if (cfg.model.backbone == "toy") {
    const uint64_t vit_seed = derive_rng(cfg.seed, {0xF02Eu}).next_u64();
    return std::make_shared<ToyViT>(cfg.model.patch_size, cfg.model.token_dim,
                                    cfg.model.token_blocks, cfg.model.token_block_index,
                                    vit_seed);
  }
  if (cfg.model.backbone_tokens_dir.empty())
    throw std::invalid_argument("model.backbone=external requires model.backbone_tokens_dir");
  return std::make_shared<ExternalTokenBackbone>(cfg.model.backbone_tokens_dir,
                                                 cfg.model.token_dim);
}

}  // namespace

NullBusModel::NullBusModel(const Config& cfg, std::shared_ptr<TextEncoder> text_encoder,
                           std::shared_ptr<TokenBackbone> backbone)
    : cfg_(validated(cfg)),
      ablation_(ablation_from_string(cfg_.train.ablation)),
      init_rng_(derive_rng(cfg_.seed, {0xA0DE1u})),
      prompt_(std::move(text_encoder), cfg_.train.prompt_dropout, init_rng_),
      global_(std::move(backbone), cfg_.text.dim, cfg_.model.c_g, init_rng_),
      local_(StageWidths::from_multiplier(cfg_.model.width_multiplier), cfg_.text.dim,
             cfg_.model.c_l, cfg_.model.aspp_rates, cfg_.model.tcm_stages, init_rng_),
      fuse_reduce(cfg_.model.c_g + cfg_.model.c_l, cfg_.model.c_f, 1, 1, 0, init_rng_),
      fuse_aspp(cfg_.model.c_f, cfg_.model.c_f, cfg_.model.aspp_rates, init_rng_),
      head(cfg_.model.decoder_channels.back(), 1, 1, 1, 0, init_rng_) {
  register_child("prompt", &prompt_);
  register_child("global", &global_);
  register_child("local", &local_);
  register_child("fuse_reduce", &fuse_reduce);
  register_child("fuse_aspp", &fuse_aspp);

  const auto& w = local_.widths();
  const std::array<int64_t, 4> skip_c = {w.c4, w.c3, w.c2, w.c1};
  int64_t in_c = cfg_.model.c_f;
  for (int i = 0; i < 4; ++i) {
    decoder_.push_back(std::make_unique<UpFusionStage>(
        in_c, skip_c[static_cast<size_t>(i)], cfg_.model.decoder_channels[static_cast<size_t>(i)],
        cfg_.model.se_reduction, init_rng_));
    register_child("dec" + std::to_string(i + 1), decoder_.back().get());
    in_c = cfg_.model.decoder_channels[static_cast<size_t>(i)];
  }
  register_child("head", &head);

  // The constant maps are zero-init and registered after everything else,
  // so all variants of one seed share identical initial weights.
  const int64_t hb = bottleneck_size();
  if (ablation_ == Ablation::zero_global)
    fg_const_ = register_param("ablation.fg_const", Tensor::zeros({cfg_.model.c_g, hb, hb}));
  if (ablation_ == Ablation::zero_local)
    fl_const_ = register_param("ablation.fl_const", Tensor::zeros({cfg_.model.c_l, hb, hb}));

  const int max_rate = *std::max_element(cfg_.model.aspp_rates.begin(),
                                         cfg_.model.aspp_rates.end());
  if (hb < 2 * max_rate + 1)
    std::cerr << "[nullbus] note: ASPP rate " << max_rate << " exceeds the " << hb << "x" << hb
              << " bottleneck; dilated branches fall back to padding\n";
}

Var NullBusModel::fuse(const Var& f_g, const Var& f_l) const {
  if (f_g.value().dim(1) != f_l.value().dim(1) || f_g.value().dim(2) != f_l.value().dim(2))
    throw std::invalid_argument(
        "fuse: global/local bottleneck misalignment (build-time bug): F_g " +
        f_g.value().shape_str() + " vs F_l " + f_l.value().shape_str());
  return fuse_aspp.forward(fuse_reduce.forward(ad::concat_channels({f_g, f_l})));
}

Var NullBusModel::forward(const Tensor& image, const PromptPair& prompts, Mode mode, Rng* rng,
                          const std::string& sample_id, ForwardTrace* trace) const {
  const int64_t S = cfg_.data.image_size;
  if (image.rank() != 2 || image.dim(0) != S || image.dim(1) != S)
    throw std::invalid_argument("forward: expected a " + std::to_string(S) + "x" +
                                std::to_string(S) + " image, got " + image.shape_str());

  const EncodedPrompts ep = ablation_ == Ablation::zero_text
                                ? prompt_.encode_nulls_only()
                                : prompt_.encode(prompts, mode, rng);
  const int64_t hb = bottleneck_size();

  Var f_l;
  std::array<Var, 4> skips;  // consumed in order e4, e3, e2, e1
  if (ablation_ == Ablation::zero_local) {
    f_l = fl_const_;
    const auto& w = local_.widths();
    skips = {Var::constant(Tensor::zeros({w.c4, S / 16, S / 16})),
             Var::constant(Tensor::zeros({w.c3, S / 8, S / 8})),
             Var::constant(Tensor::zeros({w.c2, S / 4, S / 4})),
             Var::constant(Tensor::zeros({w.c1, S / 2, S / 2}))};
  } else {
    Var img = Var::constant(image.reshaped({1, S, S}));
    const StageFeatures f = local_.forward_features(img, ep.z_l);
    f_l = local_.bottleneck(f);
    skips = {f.e4_mod, f.e3, f.e2, f.e1};
  }

  Var f_g;
  if (ablation_ == Ablation::zero_global) {
    f_g = fg_const_;
  } else {
    TokenGrid tg;
    f_g = global_.forward(image, ep.z_g, sample_id, hb, hb, trace ? &tg : nullptr);
    if (trace) {
      trace->token_n = tg.tokens.dim(0);
      trace->token_grid_h = tg.grid_h;
      trace->token_grid_w = tg.grid_w;
    }
  }

  Var fused = fuse(f_g, f_l);
  if (trace) {
    trace->fg_shape = f_g.value().shape();
    trace->fl_shape = f_l.value().shape();
    trace->fused_shape = fused.value().shape();
    trace->decoder_shapes.clear();
  }

  Var d = fused;
  for (size_t i = 0; i < decoder_.size(); ++i) {
    d = decoder_[i]->forward(d, skips[i]);
    if (trace) trace->decoder_shapes.push_back(d.value().shape());
  }

  Var up = ad::bilinear_resize(d, 2 * d.value().dim(1), 2 * d.value().dim(2));
  Var logits = head.forward(up);
  if (logits.value().dim(1) != S || logits.value().dim(2) != S)
    logits = ad::bilinear_resize(logits, S, S);
  return logits;
}

std::vector<nn::NamedParam> NullBusModel::trainable_params() const {
  std::vector<nn::NamedParam> all = named_params();
  std::vector<nn::NamedParam> out;
  out.reserve(all.size());
  for (auto& p : all) {
    const bool local_dead = ablation_ == Ablation::zero_local &&
                            (p.name.rfind("local.", 0) == 0 || p.name == "prompt.z_null_l");
    const bool global_dead = ablation_ == Ablation::zero_global &&
                             (p.name.rfind("global.", 0) == 0 || p.name == "prompt.z_null_g");
    if (!local_dead && !global_dead && p.var.requires_grad()) out.push_back(std::move(p));
  }
  return out;
}

std::unique_ptr<NullBusModel> build_model(const Config& cfg) {
  return std::make_unique<NullBusModel>(cfg, make_text_encoder(cfg), make_backbone(cfg));
}

// ------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[8] = {'N', 'B', 'C', 'K', 'P', 'T', '0', '1'};

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("truncated checkpoint: " + path);
  return v;
}

std::string read_header_config(std::istream& in, const std::string& path, uint64_t* hash_out) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("not a nullbus checkpoint: " + path);
  const auto len = read_pod<uint64_t>(in, path);
  std::string cfg_json(len, '\0');
  in.read(cfg_json.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("truncated checkpoint: " + path);
  *hash_out = read_pod<uint64_t>(in, path);
  return cfg_json;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const NullBusModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
  out.write(kMagic, 8);
  const std::string cfg_json = config_to_json(model.config());
  write_pod<uint64_t>(out, cfg_json.size());
  out.write(cfg_json.data(), static_cast<std::streamsize>(cfg_json.size()));
  write_pod<uint64_t>(out, config_hash(model.config()));
  const auto params = model.named_params();
  write_pod<uint64_t>(out, params.size());
  for (const auto& p : params) {
    write_pod<uint32_t>(out, static_cast<uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const Tensor& t = p.var.value();
    write_pod<uint32_t>(out, static_cast<uint32_t>(t.rank()));
    for (int64_t d : t.shape()) write_pod<uint64_t>(out, static_cast<uint64_t>(d));
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(sizeof(double) * t.numel()));
  }
  if (!out) throw std::runtime_error("short write to checkpoint: " + path.string());
}

void load_checkpoint(const std::filesystem::path& path, NullBusModel& model, bool force) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  uint64_t stored_hash = 0;
  (void)read_header_config(in, path.string(), &stored_hash);
  if (stored_hash != config_hash(model.config()) && !force)
    throw std::runtime_error("checkpoint " + path.string() +
                             " was written under a different config (pass force to override)");
  const auto count = read_pod<uint64_t>(in, path.string());
  std::map<std::string, Tensor> loaded;
  for (uint64_t i = 0; i < count; ++i) {
    const auto name_len = read_pod<uint32_t>(in, path.string());
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rank = read_pod<uint32_t>(in, path.string());
    std::vector<int64_t> shape(rank);
    for (auto& d : shape) d = static_cast<int64_t>(read_pod<uint64_t>(in, path.string()));
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(sizeof(double) * t.numel()));
    if (!in) throw std::runtime_error("truncated checkpoint: " + path.string());
    loaded.emplace(std::move(name), std::move(t));
  }
  for (auto& p : model.named_params()) {
    const auto it = loaded.find(p.name);
    if (it == loaded.end())
      throw std::runtime_error("checkpoint " + path.string() + " is missing parameter " + p.name);
    if (it->second.shape() != p.var.value().shape())
      throw std::runtime_error("checkpoint " + path.string() + ": shape mismatch for " + p.name);
    p.var.value_mut() = it->second;
  }
}

std::string read_checkpoint_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  uint64_t h = 0;
  return read_header_config(in, path.string(), &h);
}

}  // namespace nullbus
