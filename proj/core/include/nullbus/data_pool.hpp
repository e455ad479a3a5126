#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "nullbus/image.hpp"
#include "nullbus/prompt_engine.hpp"
#include "nullbus/tensor.hpp"

namespace nullbus {

enum class ClassLabel { benign, malignant };

ClassLabel class_label_from_string(const std::string& s);
std::string to_string(ClassLabel c);

struct SampleRecord {
  std::string id;
  std::string image_path;
  std::string mask_path;
  ClassLabel label = ClassLabel::benign;
  std::optional<std::string> global_prompt;
  std::optional<std::string> local_prompt;
  std::string source;

  PromptPair prompts() const { return {global_prompt, local_prompt}; }
};

/// Unified multi-source pool. Construction validates id uniqueness and
/// tallies class counts.
struct DatasetPool {
  std::vector<SampleRecord> records;
  std::map<ClassLabel, int64_t> class_counts;

  static DatasetPool from_records(std::vector<SampleRecord> records);
  int64_t size() const { return static_cast<int64_t>(records.size()); }
};

struct FoldAssignment {
  int k = 5;
  uint64_t seed = 0;
  std::unordered_map<std::string, int> assignment;  // id -> fold in [0,k)

  int fold_of(const std::string& id) const;
};

/// Manifest: delimited text, UTF-8, header row
/// `id,image_path,mask_path,class_label,global_prompt,local_prompt,source`.
/// Empty or whitespace-only prompt cells mean "absent".
DatasetPool load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const DatasetPool& pool);

/// Class-stratified fold assignment: per-class seeded shuffle, then
/// round-robin. Deterministic in (pool, k, seed).
FoldAssignment stratified_folds(const DatasetPool& pool, int k, uint64_t seed);

void save_folds(const std::filesystem::path& path, const FoldAssignment& folds);
FoldAssignment load_folds(const std::filesystem::path& path);

struct PreprocessedSample {
  std::string id;
  Tensor image;  // {S,S} in [0,1]
  Tensor mask;   // {S,S} in {0,1}
  PromptPair prompts;
  ClassLabel label = ClassLabel::benign;
};

/// Grayscale min-max normalization to [0,1] (constant images map to
/// zeros), bilinear image resize, nearest-neighbor mask resize after
/// binarization.
PreprocessedSample preprocess(const Raster& image, const Raster& mask, int64_t size);

/// Reads the record's rasters from disk and preprocesses them.
PreprocessedSample load_and_preprocess(const SampleRecord& record, int64_t size);

/// Generates n synthetic speckle images with elliptical lesions under
/// out_dir (images/, masks/), returning the pool. Exactly
/// round(prompt_fraction*n) records carry templated prompts describing
/// the generated shape; everything is deterministic in the seed.
DatasetPool synth_pool(int64_t n, uint64_t seed, double prompt_fraction,
                       const std::filesystem::path& out_dir, int64_t image_size = 96);

}  // namespace nullbus
