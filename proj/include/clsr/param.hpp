#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "clsr/tensor.hpp"

namespace clsr {

// A named learnable (or tracked) tensor. `regularized` marks tensors that
// enter the L2 penalty: weight matrices and embedding tables, not biases or
// batch-norm scale/shift.
struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
  bool regularized = true;
};

// Owns every parameter of a model in creation order. Addresses are stable.
class ParamStore {
 public:
  Parameter& create(std::string name, Tensor value, bool trainable = true, bool regularized = true);

  // Uniform in +-sqrt(6 / (fan_in + fan_out)).
  Parameter& create_glorot(std::string name, Shape shape, std::size_t fan_in, std::size_t fan_out,
                           std::mt19937_64& rng);

  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  Parameter& at(const std::string& name);

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.cbegin(); }
  auto end() const { return params_.cend(); }

  // Sum of squared entries of all regularized parameters.
  double l2_norm_squared() const;
  std::size_t scalar_count() const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

}  // namespace clsr
