#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ipat {

/// Base error type for everything thrown by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised when an operation produces NaN or infinity.
struct NumericsError : Error {
  using Error::Error;
};

struct ShapeError : Error {
  using Error::Error;
};

/// Dense row-major float64 array. Rank is arbitrary, but almost everything in
/// this code base uses rank 1 (vectors) or rank 2 (matrices).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor vector(std::vector<double> values);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> row(std::size_t r);
  std::span<const double> row(std::size_t r) const;
  Tensor row_copy(std::size_t r) const;

  bool all_finite() const;
  bool operator==(const Tensor& other) const = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

double dot(std::span<const double> a, std::span<const double> b);
/// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);
double max_abs(std::span<const double> a);
/// max_i |a_i - b_i| / max(max_i |b_i|, floor)
double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-300);
double relative_error(double a, double b, double floor = 1e-300);

}  // namespace ipat
