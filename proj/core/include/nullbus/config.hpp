#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace nullbus {

enum class Ablation { full, zero_text, zero_local, zero_global };

Ablation ablation_from_string(const std::string& s);
std::string to_string(Ablation a);

struct DataConfig {
  std::string manifest;
  int64_t image_size = 96;
  int k_folds = 5;
};

struct TextConfig {
  std::string encoder = "hash";  // hash | external
  int64_t dim = 64;
  std::string external_embeddings;
};

struct ModelConfig {
  std::string backbone = "toy";  // toy | external
  std::string backbone_tokens_dir;
  int patch_size = 8;
  int64_t token_dim = 64;
  int token_blocks = 2;
  int token_block_index = 0;
  int64_t c_g = 64;
  double width_multiplier = 0.0625;
  int64_t c_l = 32;
  std::vector<int> aspp_rates = {1, 6, 12, 18};
  std::vector<int> tcm_stages = {4, 5};
  int64_t c_f = 32;
  std::vector<int64_t> decoder_channels = {16, 8, 8, 8};
  int se_reduction = 4;
};

struct TrainSettings {
  int epochs = 20;
  int batch_size = 4;
  double learning_rate = 1e-3;
  double prompt_dropout = 0.3;
  double epsilon = 1e-6;
  int fold_index = 0;
  std::string ablation = "full";
};

/// Fully explicit run configuration. `scale` names the preset the
/// remaining fields were expanded from; explicit keys override preset
/// values. Snapshots always serialize every field.
struct Config {
  std::string scale = "desk";  // desk | paper
  uint64_t seed = 1;
  std::string output_dir = "runs/run";
  DataConfig data;
  TextConfig text;
  ModelConfig model;
  TrainSettings train;

  void validate() const;
};

Config desk_preset();
Config paper_preset();
Config preset_for(const std::string& scale);

/// Parses a JSON config document. Missing keys fall back to the preset
/// selected by "scale"; unknown keys are rejected with their path named.
Config parse_config_json(const std::string& text);
Config load_config(const std::filesystem::path& path);

/// Canonical snapshot (sorted keys, every field explicit).
std::string config_to_json(const Config& cfg);
uint64_t config_hash(const Config& cfg);

}  // namespace nullbus
