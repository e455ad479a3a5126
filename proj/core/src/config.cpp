#include "nullbus/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "nullbus/rng.hpp"

namespace nullbus {

using nlohmann::json;

Ablation ablation_from_string(const std::string& s) {
  if (s == "full") return Ablation::full;
  if (s == "zero_text") return Ablation::zero_text;
  if (s == "zero_local") return Ablation::zero_local;
  if (s == "zero_global") return Ablation::zero_global;
  throw std::invalid_argument("unknown ablation variant: " + s +
                              " (expected full|zero_text|zero_local|zero_global)");
}

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::zero_text: return "zero_text";
    case Ablation::zero_local: return "zero_local";
    case Ablation::zero_global: return "zero_global";
  }
  return "full";
}

void Config::validate() const {
  if (scale != "desk" && scale != "paper")
    throw std::invalid_argument("scale must be desk or paper, got " + scale);
  if (data.image_size <= 0 || data.image_size % 32 != 0)
    throw std::invalid_argument("data.image_size must be a positive multiple of 32");
  if (data.k_folds < 2) throw std::invalid_argument("data.k_folds must be >= 2");
  if (text.encoder != "hash" && text.encoder != "external")
    throw std::invalid_argument("text.encoder must be hash or external");
  if (text.dim < 1) throw std::invalid_argument("text.dim must be >= 1");
  if (model.backbone != "toy" && model.backbone != "external")
    throw std::invalid_argument("model.backbone must be toy or external");
  if (data.image_size % model.patch_size != 0)
    throw std::invalid_argument("data.image_size must be divisible by model.patch_size");
  if (model.decoder_channels.size() != 4)
    throw std::invalid_argument("model.decoder_channels must list exactly 4 stages");
  if (model.width_multiplier <= 0.0)
    throw std::invalid_argument("model.width_multiplier must be positive");
  for (int r : model.aspp_rates)
    if (r <= 0) throw std::invalid_argument("model.aspp_rates must be positive");
  for (int k : model.tcm_stages)
    if (k != 4 && k != 5) throw std::invalid_argument("model.tcm_stages entries must be 4 or 5");
  if (train.prompt_dropout < 0.0 || train.prompt_dropout > 1.0)
    throw std::invalid_argument("train.prompt_dropout must lie in [0,1]");
  if (train.epsilon <= 0.0) throw std::invalid_argument("train.epsilon must be positive");
  if (train.epochs < 1) throw std::invalid_argument("train.epochs must be >= 1");
  if (train.batch_size < 1) throw std::invalid_argument("train.batch_size must be >= 1");
  if (train.fold_index < 0 || train.fold_index >= data.k_folds)
    throw std::invalid_argument("train.fold_index must lie in [0," +
                                std::to_string(data.k_folds) + ")");
  ablation_from_string(train.ablation);
}

Config desk_preset() {
  Config c;
  c.scale = "desk";
  c.data.image_size = 96;
  c.text.dim = 64;
  c.model.patch_size = 8;
  c.model.token_dim = 64;
  c.model.c_g = 64;
  c.model.width_multiplier = 1.0 / 16.0;
  c.model.c_l = 32;
  c.model.c_f = 32;
  c.model.decoder_channels = {16, 8, 8, 8};
  c.train.learning_rate = 1e-3;
  return c;
}

Config paper_preset() {
  Config c;
  c.scale = "paper";
  c.data.image_size = 352;
  c.text.dim = 512;
  c.model.patch_size = 16;
  c.model.token_dim = 768;
  c.model.c_g = 2048;
  c.model.width_multiplier = 1.0;
  c.model.c_l = 512;
  c.model.c_f = 512;
  c.model.decoder_channels = {256, 128, 64, 32};
  c.train.learning_rate = 1e-4;
  return c;
}

Config preset_for(const std::string& scale) {
  if (scale == "desk") return desk_preset();
  if (scale == "paper") return paper_preset();
  throw std::invalid_argument("unknown scale preset: " + scale);
}

namespace {

void reject_unknown(const json& obj, const std::set<std::string>& known,
                    const std::string& path) {
  for (const auto& [key, _] : obj.items()) {
    if (!known.count(key))
      throw std::invalid_argument("unknown config key: " + (path.empty() ? key : path + "." + key));
  }
}

template <typename T>
void maybe(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

}  // namespace

Config parse_config_json(const std::string& text) {
  json root = json::parse(text);
  if (!root.is_object()) throw std::invalid_argument("config root must be a JSON object");

  std::string scale = "desk";
  if (root.contains("scale")) scale = root.at("scale").get<std::string>();
  Config cfg = preset_for(scale);

  reject_unknown(root, {"scale", "seed", "output_dir", "data", "text", "model", "train"}, "");
  maybe(root, "seed", cfg.seed);
  maybe(root, "output_dir", cfg.output_dir);

  if (root.contains("data")) {
    const json& d = root.at("data");
    reject_unknown(d, {"manifest", "image_size", "k_folds"}, "data");
    maybe(d, "manifest", cfg.data.manifest);
    maybe(d, "image_size", cfg.data.image_size);
    maybe(d, "k_folds", cfg.data.k_folds);
  }
  if (root.contains("text")) {
    const json& t = root.at("text");
    reject_unknown(t, {"encoder", "dim", "external_embeddings"}, "text");
    maybe(t, "encoder", cfg.text.encoder);
    maybe(t, "dim", cfg.text.dim);
    maybe(t, "external_embeddings", cfg.text.external_embeddings);
  }
  if (root.contains("model")) {
    const json& m = root.at("model");
    reject_unknown(m,
                   {"backbone", "backbone_tokens_dir", "patch_size", "token_dim", "token_blocks",
                    "token_block_index", "C_g", "width_multiplier", "C_l", "aspp_rates",
                    "tcm_stages", "C_f", "decoder_channels", "se_reduction"},
                   "model");
    maybe(m, "backbone", cfg.model.backbone);
    maybe(m, "backbone_tokens_dir", cfg.model.backbone_tokens_dir);
    maybe(m, "patch_size", cfg.model.patch_size);
    maybe(m, "token_dim", cfg.model.token_dim);
    maybe(m, "token_blocks", cfg.model.token_blocks);
    maybe(m, "token_block_index", cfg.model.token_block_index);
    maybe(m, "C_g", cfg.model.c_g);
    maybe(m, "width_multiplier", cfg.model.width_multiplier);
    maybe(m, "C_l", cfg.model.c_l);
    maybe(m, "aspp_rates", cfg.model.aspp_rates);
    maybe(m, "tcm_stages", cfg.model.tcm_stages);
    maybe(m, "C_f", cfg.model.c_f);
    maybe(m, "decoder_channels", cfg.model.decoder_channels);
    maybe(m, "se_reduction", cfg.model.se_reduction);
  }
  if (root.contains("train")) {
    const json& t = root.at("train");
    reject_unknown(t,
                   {"epochs", "batch_size", "learning_rate", "prompt_dropout", "epsilon",
                    "fold_index", "ablation"},
                   "train");
    maybe(t, "epochs", cfg.train.epochs);
    maybe(t, "batch_size", cfg.train.batch_size);
    maybe(t, "learning_rate", cfg.train.learning_rate);
    maybe(t, "prompt_dropout", cfg.train.prompt_dropout);
    maybe(t, "epsilon", cfg.train.epsilon);
    maybe(t, "fold_index", cfg.train.fold_index);
    maybe(t, "ablation", cfg.train.ablation);
  }
  cfg.validate();
  return cfg;
}

Config load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config_json(ss.str());
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
}

std::string config_to_json(const Config& cfg) {
  json root;
  root["scale"] = cfg.scale;
  root["seed"] = cfg.seed;
  root["output_dir"] = cfg.output_dir;
  root["data"] = {{"manifest", cfg.data.manifest},
                  {"image_size", cfg.data.image_size},
                  {"k_folds", cfg.data.k_folds}};
  root["text"] = {{"encoder", cfg.text.encoder},
                  {"dim", cfg.text.dim},
                  {"external_embeddings", cfg.text.external_embeddings}};
  root["model"] = {{"backbone", cfg.model.backbone},
                   {"backbone_tokens_dir", cfg.model.backbone_tokens_dir},
                   {"patch_size", cfg.model.patch_size},
                   {"token_dim", cfg.model.token_dim},
                   {"token_blocks", cfg.model.token_blocks},
                   {"token_block_index", cfg.model.token_block_index},
                   {"C_g", cfg.model.c_g},
                   {"width_multiplier", cfg.model.width_multiplier},
                   {"C_l", cfg.model.c_l},
                   {"aspp_rates", cfg.model.aspp_rates},
                   {"tcm_stages", cfg.model.tcm_stages},
                   {"C_f", cfg.model.c_f},
                   {"decoder_channels", cfg.model.decoder_channels},
                   {"se_reduction", cfg.model.se_reduction}};
  root["train"] = {{"epochs", cfg.train.epochs},
                   {"batch_size", cfg.train.batch_size},
                   {"learning_rate", cfg.train.learning_rate},
                   {"prompt_dropout", cfg.train.prompt_dropout},
                   {"epsilon", cfg.train.epsilon},
                   {"fold_index", cfg.train.fold_index},
                   {"ablation", cfg.train.ablation}};
  return root.dump(2);
}

uint64_t config_hash(const Config& cfg) { return fnv1a64(config_to_json(cfg)); }

}  // namespace nullbus
