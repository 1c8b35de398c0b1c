#pragma once

#include <array>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace clsr {

// Shape of a rank 0, 1 or 2 tensor. Unused trailing dims are 1.
struct Shape {
  std::size_t rank = 0;
  std::array<std::size_t, 2> dims{1, 1};

  static Shape scalar() { return {}; }
  static Shape vector(std::size_t n) { return {1, {n, 1}}; }
  static Shape matrix(std::size_t rows, std::size_t cols) { return {2, {rows, cols}}; }

  std::size_t size() const { return dims[0] * dims[1]; }
  std::size_t rows() const { return dims[0]; }
  std::size_t cols() const { return dims[1]; }

  bool operator==(const Shape&) const = default;
  std::string str() const;
};

// Dense row-major tensor of doubles.
class Tensor {
 public:
  Tensor() : shape_(Shape::scalar()), data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape::scalar(), std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v);
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.rank; }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const { return shape_.rows(); }
  std::size_t cols() const { return shape_.cols(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_.cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_.cols() + c]; }
  double item() const;

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  void fill(double v);
  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

}  // namespace clsr
