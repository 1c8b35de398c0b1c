#include "clsr/param.hpp"

#include <cmath>

#include "clsr/errors.hpp"

namespace clsr {

Parameter& ParamStore::create(std::string name, Tensor value, bool trainable, bool regularized) {
  if (find(name) != nullptr) throw ConfigError("duplicate parameter name: " + name);
  params_.push_back(std::make_unique<Parameter>(
      Parameter{std::move(name), std::move(value), trainable, regularized}));
  return *params_.back();
}

Parameter& ParamStore::create_glorot(std::string name, Shape shape, std::size_t fan_in,
                                     std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor t(shape);
  for (auto& v : t.values()) v = dist(rng);
  return create(std::move(name), std::move(t), true, true);
}

Parameter* ParamStore::find(const std::string& name) {
  for (auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

const Parameter* ParamStore::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

Parameter& ParamStore::at(const std::string& name) {
  auto* p = find(name);
  if (p == nullptr) throw ConfigError("unknown parameter: " + name);
  return *p;
}

double ParamStore::l2_norm_squared() const {
  double s = 0.0;
  for (const auto& p : params_) {
    if (!p->trainable || !p->regularized) continue;
    for (double v : p->value.values()) s += v * v;
  }
  return s;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

}  // namespace clsr
