#include "clsr/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "clsr/errors.hpp"

namespace clsr {

std::string Shape::str() const {
  switch (rank) {
    case 0:
      return "()";
    case 1:
      return "(" + std::to_string(dims[0]) + ")";
    default:
      return "(" + std::to_string(dims[0]) + "x" + std::to_string(dims[1]) + ")";
  }
}

Tensor::Tensor(Shape shape, double fill) : shape_(shape), data_(shape.size(), fill) {
  if (shape.rank > 2) throw ShapeError("tensor rank must be <= 2");
  if (shape.size() == 0) throw ShapeError("tensor dims must be positive, got " + shape.str());
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
  if (shape.rank > 2) throw ShapeError("tensor rank must be <= 2");
  if (shape.size() == 0) throw ShapeError("tensor dims must be positive, got " + shape.str());
  if (data_.size() != shape.size()) {
    throw ShapeError("tensor payload has " + std::to_string(data_.size()) +
                     " values, shape " + shape.str() + " needs " +
                     std::to_string(shape.size()));
  }
}

Tensor Tensor::vector(std::vector<double> v) {
  const auto n = v.size();
  return Tensor(Shape::vector(n), std::move(v));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
  return Tensor(Shape::matrix(rows, cols), std::move(v));
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_.str());
  return data_[0];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace clsr
