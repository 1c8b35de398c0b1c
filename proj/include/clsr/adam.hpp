#pragma once

#include <cstdint>
#include <vector>

#include "clsr/graph.hpp"
#include "clsr/param.hpp"

namespace clsr {

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment estimates, one pair per parameter of a ParamStore,
// in store order.
struct AdamState {
  std::uint64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  static AdamState for_params(const ParamStore& params);
};

// One bias-corrected Adam update over every trainable parameter that has a
// gradient. Parameters without a gradient entry are left untouched.
void adam_step(ParamStore& params, const ad::Gradients& grads, AdamState& state,
               const AdamConfig& cfg);

}  // namespace clsr
