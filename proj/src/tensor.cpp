#include "bevkd/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "bevkd/util.hpp"

namespace bevkd {

Tensor::Tensor(std::vector<std::int64_t> shape) : shape_(std::move(shape)) {
  std::int64_t n = 1;
  for (std::int64_t d : shape_) n *= d;
  if (n < 0) throw Error(ErrorKind::kRuntime, "negative tensor dimension");
  data_.assign(static_cast<std::size_t>(n), 0.0);
}

Tensor Tensor::full(std::vector<std::int64_t> shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

void Tensor::fill(double v) {
  for (auto& x : data_) x = v;
}

bool Tensor::all_finite() const {
  for (double x : data_)
    if (!std::isfinite(x)) return false;
  return true;
}

Tensor Tensor::reshaped(std::vector<std::int64_t> shape) const {
  Tensor t;
  t.shape_ = std::move(shape);
  std::int64_t n = 1;
  for (std::int64_t d : t.shape_) n *= d;
  if (n != numel()) throw Error(ErrorKind::kRuntime, "reshape numel mismatch");
  t.data_ = data_;
  return t;
}

void Tensor::add_scaled(const Tensor& other, double scale) {
  if (!same_shape(other)) throw Error(ErrorKind::kRuntime, "add_scaled shape mismatch");
  const double* src = other.data();
  double* dst = data();
  const std::int64_t n = numel();
  for (std::int64_t i = 0; i < n; ++i) dst[i] += src[i] * scale;
}

void Tensor::scale(double s) {
  for (auto& x : data_) x *= s;
}

double Tensor::sum() const {
  double acc = 0.0;
  for (double x : data_) acc += x;
  return acc;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double x : data_) m = std::max(m, std::abs(x));
  return m;
}

std::string Tensor::shape_str() const {
  std::ostringstream ss;
  ss << "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) ss << (i ? "," : "") << shape_[i];
  ss << "]";
  return ss.str();
}

}  // namespace bevkd
