#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

namespace rknet {

enum class DType : std::uint8_t { Float32 = 0, Float64 = 1 };

using Shape = std::vector<std::size_t>;

std::string to_string(DType dtype);
std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "only float and double tensors are supported");
  return std::is_same_v<T, float> ? DType::Float32 : DType::Float64;
}

// Calls fn(std::type_identity<T>{}) with T matching the runtime dtype.
template <typename Fn>
decltype(auto) visit_dtype(DType dtype, Fn&& fn) {
  if (dtype == DType::Float32) {
    return fn(std::type_identity<float>{});
  }
  return fn(std::type_identity<double>{});
}

/// Dense row-major array of float32 or float64 values.
///
/// Value semantic: copying a Tensor copies its storage.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, DType dtype);

  static Tensor zeros(const Shape& shape, DType dtype) { return Tensor(shape, dtype); }
  static Tensor full(const Shape& shape, double value, DType dtype);
  static Tensor from_values(const Shape& shape, std::span<const double> values,
                            DType dtype);
  static Tensor from_values(const Shape& shape, std::initializer_list<double> values,
                            DType dtype) {
    return from_values(shape, std::span<const double>(values.begin(), values.size()),
                       dtype);
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return shape_numel(shape_); }
  DType dtype() const { return dtype_; }
  bool empty() const { return shape_.empty(); }

  template <typename T>
  std::span<T> data() {
    check_type<T>();
    return std::get<std::vector<T>>(storage_);
  }
  template <typename T>
  std::span<const T> data() const {
    check_type<T>();
    return std::get<std::vector<T>>(storage_);
  }

  double at(std::size_t flat) const;
  void set(std::size_t flat, double value);
  double item() const;

  std::vector<double> to_vector() const;
  Tensor to(DType dtype) const;
  Tensor reshaped(Shape shape) const;

  void fill(double value);
  // this += other, shapes must match exactly.
  void add_inplace(const Tensor& other);
  bool all_finite() const;

  // Bitwise equality of shape, dtype and stored values.
  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  template <typename T>
  void check_type() const {
    if (dtype_of<T>() != dtype_) {
      throw std::invalid_argument("tensor dtype is " + to_string(dtype_) +
                                  ", requested " + to_string(dtype_of<T>()));
    }
  }

  Shape shape_;
  DType dtype_ = DType::Float32;
  std::variant<std::vector<float>, std::vector<double>> storage_;
};

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);
void require_same_dtype(const Tensor& a, const Tensor& b, const char* what);

}  // namespace rknet
