#include "nullbus/image.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

#include "nullbus/autodiff.hpp"

namespace nullbus {

namespace {

// Skips whitespace and '#' comment lines between PGM header fields.
int next_header_int(std::istream& in, const std::string& path) {
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = in.get();
  }
  if (c == EOF) throw std::runtime_error("truncated PGM header: " + path);
  int v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    c = in.get();
  }
  return v;
}

}  // namespace

Raster read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image: " + path.string());
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || m1 != '5')
    throw std::runtime_error("unsupported image format (expected binary PGM P5): " +
                             path.string());
  const int w = next_header_int(in, path.string());
  const int h = next_header_int(in, path.string());
  const int maxval = next_header_int(in, path.string());
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
    throw std::runtime_error("bad PGM header in " + path.string());
  Raster img;
  img.w = w;
  img.h = h;
  img.px.resize(static_cast<size_t>(w) * static_cast<size_t>(h));
  in.read(reinterpret_cast<char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.px.size()))
    throw std::runtime_error("truncated PGM payload in " + path.string());
  return img;
}

void write_pgm(const std::filesystem::path& path, const Raster& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write image: " + path.string());
  out << "P5\n" << img.w << " " << img.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.px.data()),
            static_cast<std::streamsize>(img.px.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

Tensor raster_to_tensor(const Raster& img) {
  Tensor t({img.h, img.w});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(img.px[static_cast<size_t>(i)]);
  return t;
}

Raster tensor_to_raster(const Tensor& t) {
  if (t.rank() != 2) throw std::invalid_argument("tensor_to_raster: expected {H,W}");
  Raster img;
  img.h = t.dim(0);
  img.w = t.dim(1);
  img.px.resize(static_cast<size_t>(t.numel()));
  for (int64_t i = 0; i < t.numel(); ++i) {
    const double v = std::clamp(t[i], 0.0, 1.0);
    img.px[static_cast<size_t>(i)] = static_cast<uint8_t>(std::lround(v * 255.0));
  }
  return img;
}

Tensor resize_bilinear_hw(const Tensor& x, int64_t out_h, int64_t out_w) {
  if (x.rank() != 2) throw std::invalid_argument("resize_bilinear_hw: expected {H,W}");
  ad::NoGradGuard ng;
  ad::Var v = ad::Var::constant(x.reshaped({1, x.dim(0), x.dim(1)}));
  return ad::bilinear_resize(v, out_h, out_w).value().reshaped({out_h, out_w});
}

Tensor resize_nearest_hw(const Tensor& x, int64_t out_h, int64_t out_w) {
  if (x.rank() != 2) throw std::invalid_argument("resize_nearest_hw: expected {H,W}");
  const int64_t in_h = x.dim(0), in_w = x.dim(1);
  Tensor out({out_h, out_w});
  const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
  for (int64_t oy = 0; oy < out_h; ++oy) {
    int64_t iy = static_cast<int64_t>(std::floor((static_cast<double>(oy) + 0.5) * sy));
    iy = std::clamp<int64_t>(iy, 0, in_h - 1);
    for (int64_t ox = 0; ox < out_w; ++ox) {
      int64_t ix = static_cast<int64_t>(std::floor((static_cast<double>(ox) + 0.5) * sx));
      ix = std::clamp<int64_t>(ix, 0, in_w - 1);
      out.at(oy, ox) = x.at(iy, ix);
    }
  }
  return out;
}

}  // namespace nullbus
