#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "nullbus/tensor.hpp"

namespace nullbus {

/// Single-channel 8-bit raster. The on-disk format is binary PGM (P5),
/// maxval 255; masks use 0 = background, any nonzero = foreground.
struct Raster {
  int64_t h = 0;
  int64_t w = 0;
  std::vector<uint8_t> px;

  uint8_t at(int64_t y, int64_t x) const { return px[static_cast<size_t>(y * w + x)]; }
  uint8_t& at(int64_t y, int64_t x) { return px[static_cast<size_t>(y * w + x)]; }
};

Raster read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Raster& img);

/// Raster -> {H,W} tensor in raw 0..255 intensity.
Tensor raster_to_tensor(const Raster& img);
/// Quantizes a [0,1] {H,W} tensor to 8 bits.
Raster tensor_to_raster(const Tensor& t);

/// Half-pixel-center bilinear resample of an {H,W} tensor (identity when
/// sizes already match).
Tensor resize_bilinear_hw(const Tensor& x, int64_t out_h, int64_t out_w);
/// Nearest-neighbor resample; preserves the value set exactly.
Tensor resize_nearest_hw(const Tensor& x, int64_t out_h, int64_t out_w);

}  // namespace nullbus
