#include "clsr/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "clsr/rng.hpp"

namespace clsr {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-4});
  return std::abs(analytic - numeric) / denom;
}

void jitter_biases(ParamStore& store, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(derive_seed(seed, "jitter-biases"));
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& p : store) {
    const auto& n = p->name;
    if (!p->trainable || !(n.ends_with(".b") || n.ends_with(".beta") || n.ends_with(".b_time"))) continue;
    for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] = u(rng);
  }
}

GradCheckResult grad_check(ParamStore& store, const LossBuilder& loss, const GradCheckOptions& opts) {
  ad::Gradients grads;
  {
    ad::Graph g;
    grads = g.backward(loss(g));
  }
  auto eval = [&] {
    ad::Graph g;
    return loss(g).value()[0];
  };

  GradCheckResult r;
  std::mt19937_64 rng(derive_seed(opts.seed, "grad-check"));
  for (auto& p : store) {
    if (!p->trainable) continue;
    const Tensor* analytic = grads.find(*p);
    const std::size_t n = p->value.size();
    std::vector<std::size_t> entries(n);
    std::iota(entries.begin(), entries.end(), 0);
    if (opts.max_entries > 0 && n > opts.max_entries) {
      for (std::size_t i = 0; i < opts.max_entries; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(entries[i], entries[pick(rng)]);
      }
      entries.resize(opts.max_entries);
    }
    for (auto idx : entries) {
      const double saved = p->value[idx];
      p->value[idx] = saved + opts.eps;
      const double up = eval();
      p->value[idx] = saved - opts.eps;
      const double down = eval();
      p->value[idx] = saved;
      const double numeric = (up - down) / (2.0 * opts.eps);
      const double a = analytic != nullptr ? (*analytic)[idx] : 0.0;
      const double err = relative_error(a, numeric);
      ++r.checked;
      if (r.checked == 1 || err > r.max_rel_error) {
        r.max_rel_error = err;
        r.worst_param = p->name;
        r.worst_index = idx;
      }
    }
  }
  return r;
}

}  // namespace clsr
