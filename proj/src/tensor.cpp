#include "rknet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace rknet {

std::string to_string(DType dtype) {
  return dtype == DType::Float32 ? "float32" : "float64";
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)), dtype_(dtype) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_to_string(shape_));
  }
  const auto n = shape_numel(shape_);
  if (dtype == DType::Float32) {
    storage_ = std::vector<float>(n, 0.0f);
  } else {
    storage_ = std::vector<double>(n, 0.0);
  }
}

Tensor Tensor::full(const Shape& shape, double value, DType dtype) {
  Tensor t(shape, dtype);
  t.fill(value);
  return t;
}

Tensor Tensor::from_values(const Shape& shape, std::span<const double> values, DType dtype) {
  Tensor t(shape, dtype);
  if (values.size() != t.numel()) {
    throw ShapeError("from_values: " + std::to_string(values.size()) +
                     " values for shape " + shape_to_string(shape));
  }
  visit_dtype(dtype, [&]<typename T>(std::type_identity<T>) {
    auto out = t.data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = static_cast<T>(values[i]);
  });
  return t;
}

double Tensor::at(std::size_t flat) const {
  return visit_dtype(dtype_, [&]<typename T>(std::type_identity<T>) {
    return static_cast<double>(data<T>()[flat]);
  });
}

void Tensor::set(std::size_t flat, double value) {
  visit_dtype(dtype_, [&]<typename T>(std::type_identity<T>) {
    data<T>()[flat] = static_cast<T>(value);
  });
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() needs a single-element tensor, got " + shape_to_string(shape_));
  }
  return at(0);
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = at(i);
  return out;
}

Tensor Tensor::to(DType dtype) const {
  if (dtype == dtype_) return *this;
  Tensor out(shape_, dtype);
  for (std::size_t i = 0; i < numel(); ++i) out.set(i, at(i));
  return out;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_to_string(shape_) + " to " +
                     shape_to_string(shape));
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

void Tensor::fill(double value) {
  visit_dtype(dtype_, [&]<typename T>(std::type_identity<T>) {
    auto d = data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
}

void Tensor::add_inplace(const Tensor& other) {
  require_same_shape(*this, other, "add_inplace");
  require_same_dtype(*this, other, "add_inplace");
  visit_dtype(dtype_, [&]<typename T>(std::type_identity<T>) {
    auto a = data<T>();
    auto b = other.data<T>();
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  });
}

bool Tensor::all_finite() const {
  return visit_dtype(dtype_, [&]<typename T>(std::type_identity<T>) {
    auto d = data<T>();
    return std::all_of(d.begin(), d.end(), [](T v) { return std::isfinite(v); });
  });
}

bool operator==(const Tensor& a, const Tensor& b) {
  if (a.shape_ != b.shape_ || a.dtype_ != b.dtype_) return false;
  return visit_dtype(a.dtype_, [&]<typename T>(std::type_identity<T>) {
    auto x = a.data<T>();
    auto y = b.data<T>();
    return x.size() == y.size() &&
           (x.empty() || std::memcmp(x.data(), y.data(), x.size_bytes()) == 0);
  });
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_to_string(a.shape()) +
                     " vs " + shape_to_string(b.shape()));
  }
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* what) {
  if (a.dtype() != b.dtype()) {
    throw std::invalid_argument(std::string(what) + ": dtype mismatch " +
                                to_string(a.dtype()) + " vs " + to_string(b.dtype()));
  }
}

}  // namespace rknet
