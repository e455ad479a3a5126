#include "nullbus/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace nullbus {

int64_t Tensor::checked_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) throw std::invalid_argument("Tensor: non-positive dimension");
    n *= d;
  }
  return shape.empty() ? 0 : n;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << ",";
    os << shape_[i];
  }
  os << ")";
  return os.str();
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

void fill(Tensor& t, double v) {
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = v;
}

void axpy(Tensor& dst, double a, const Tensor& src) {
  if (!dst.same_shape(src)) throw std::invalid_argument("axpy: shape mismatch");
  const double* s = src.data();
  double* d = dst.data();
  for (int64_t i = 0; i < dst.numel(); ++i) d[i] += a * s[i];
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw std::invalid_argument("dot: size mismatch");
  double acc = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) acc += a[i] * b[i];
  return acc;
}

double sum(const Tensor& t) {
  double acc = 0.0;
  for (int64_t i = 0; i < t.numel(); ++i) acc += t[i];
  return acc;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw std::invalid_argument("max_abs_diff: size mismatch");
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.numel())) == 0;
}

}  // namespace nullbus
