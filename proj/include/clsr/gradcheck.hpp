#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "clsr/graph.hpp"
#include "clsr/param.hpp"

namespace clsr {

struct GradCheckOptions {
  double eps = 1e-5;
  // Entries checked per parameter; 0 checks all of them.
  std::size_t max_entries = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

// Builds the scalar loss on a fresh graph. Must be a deterministic function
// of the parameter values.
using LossBuilder = std::function<ad::Var(ad::Graph&)>;

// Compares reverse-mode gradients of every trainable parameter in `store`
// with central differences (f(x+eps) - f(x-eps)) / 2eps. The relative error
// of an entry is |a - n| / max(|a|, |n|, 1e-4).
GradCheckResult grad_check(ParamStore& store, const LossBuilder& loss, const GradCheckOptions& opts = {});

double relative_error(double analytic, double numeric);

// Redraws every trainable bias and batch-norm shift uniformly in
// [-scale, scale]. Zero biases can put a ReLU input exactly on its kink,
// where a central difference does not estimate the gradient.
void jitter_biases(ParamStore& store, std::uint64_t seed, double scale = 0.5);

}  // namespace clsr
