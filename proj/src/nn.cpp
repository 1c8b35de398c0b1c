#include "clsr/nn.hpp"

#include <cmath>

#include "clsr/errors.hpp"

namespace clsr::nn {

namespace {

Parameter& glorot(ParamStore& store, const std::string& name, std::size_t rows, std::size_t cols,
                  std::mt19937_64& rng) {
  return store.create_glorot(name, Shape::matrix(rows, cols), rows, cols, rng);
}

Parameter& zeros(ParamStore& store, const std::string& name, std::size_t n, bool trainable = true) {
  return store.create(name, Tensor(Shape::vector(n)), trainable, false);
}

void require_width(const char* what, const Shape& s, std::size_t width) {
  if (s.rank != 1 || s.size() != width) {
    throw ShapeError(std::string(what) + ": expected a vector of width " + std::to_string(width) +
                     ", got " + s.str());
  }
}

void require_sequence(const char* what, const Shape& s, std::size_t width) {
  if (s.rank != 2 || s.cols() != width) {
    throw ShapeError(std::string(what) + ": expected a (t x " + std::to_string(width) +
                     ") sequence, got " + s.str());
  }
}

// x W + b for a vector or each row of a matrix.
Var affine(Graph& g, Var x, Parameter& w, Parameter& b) {
  Var y = ad::matmul(x, g.param(w));
  return x.shape().rank == 2 ? ad::add_row(y, g.param(b)) : ad::add(y, g.param(b));
}

Var one_minus(Var x) { return ad::add_const(ad::neg(x), 1.0); }

}  // namespace

Var apply_activation(Var x, Activation a) {
  switch (a) {
    case Activation::kRelu: return ad::relu(x);
    case Activation::kTanh: return ad::tanh(x);
    case Activation::kSigmoid: return ad::sigmoid(x);
    case Activation::kIdentity: return x;
  }
  return x;
}

// ---------------------------------------------------------------------------

Linear::Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
               std::mt19937_64& rng)
    : weight_(&glorot(store, name + ".w", in, out, rng)),
      bias_(&zeros(store, name + ".b", out)),
      in_(in),
      out_(out) {}

Var Linear::forward(Graph& g, Var x) const {
  const auto& s = x.shape();
  const std::size_t width = s.rank == 2 ? s.cols() : s.size();
  if (s.rank == 0 || width != in_) {
    throw ShapeError("linear: expected input width " + std::to_string(in_) + ", got " + s.str());
  }
  return affine(g, x, *weight_, *bias_);
}

// ---------------------------------------------------------------------------

BatchNorm::BatchNorm(ParamStore& store, const std::string& name, std::size_t width) {
  gamma_ = &store.create(name + ".gamma", Tensor(Shape::vector(width), 1.0), true, false);
  beta_ = &zeros(store, name + ".beta", width);
  running_mean_ = &zeros(store, name + ".running_mean", width, false);
  running_var_ = &store.create(name + ".running_var", Tensor(Shape::vector(width), 1.0), false, false);
}

Var BatchNorm::forward(Graph& g, Var x, Mode mode) const {
  const std::size_t width = gamma_->value.size();
  if (mode == Mode::kEval) {
    const Tensor& rm = running_mean_->value;
    const Tensor& rv = running_var_->value;
    Tensor inv_std(Shape::vector(width));
    for (std::size_t i = 0; i < width; ++i) inv_std[i] = 1.0 / std::sqrt(rv[i] + kEps);
    Var scale = ad::mul(g.param(*gamma_), g.constant(std::move(inv_std)));
    Var shift = ad::sub(g.param(*beta_), ad::mul(scale, g.constant(rm)));
    if (x.shape().rank == 1) {
      require_width("batch_norm", x.shape(), width);
      return ad::add(ad::mul(x, scale), shift);
    }
    require_sequence("batch_norm", x.shape(), width);
    return ad::add_row(ad::mul_row(x, scale), shift);
  }

  require_sequence("batch_norm", x.shape(), width);
  const std::size_t batch = x.shape().rows();
  if (batch < 2) throw ShapeError("batch_norm: train mode needs a batch of at least 2 rows");
  Var mu = ad::mean(x, 0);
  Var centered = ad::add_row(x, ad::neg(mu));
  Var var = ad::mean(ad::mul(centered, centered), 0);
  Var inv_std = ad::pow(ad::add_const(var, kEps), -0.5);
  Var y = ad::add_row(ad::mul_row(ad::mul_row(centered, inv_std), g.param(*gamma_)), g.param(*beta_));

  // Running statistics are bookkeeping outside the differentiated path.
  const Tensor& mu_v = mu.value();
  const Tensor& var_v = var.value();
  const double bessel = static_cast<double>(batch) / static_cast<double>(batch - 1);
  for (std::size_t i = 0; i < width; ++i) {
    running_mean_->value[i] = kMomentum * running_mean_->value[i] + (1.0 - kMomentum) * mu_v[i];
    running_var_->value[i] = kMomentum * running_var_->value[i] + (1.0 - kMomentum) * var_v[i] * bessel;
  }
  return y;
}

// ---------------------------------------------------------------------------

Mlp::Mlp(ParamStore& store, const std::string& name, const MlpSpec& spec, std::mt19937_64& rng)
    : spec_(spec) {
  if (spec.input == 0 || spec.output == 0) throw ConfigError("mlp " + name + ": widths must be positive");
  std::size_t in = spec.input;
  for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
    if (spec.hidden[i] == 0) throw ConfigError("mlp " + name + ": widths must be positive");
    layers_.emplace_back(store, name + ".l" + std::to_string(i), in, spec.hidden[i], rng);
    if (spec.batch_norm) norms_.emplace_back(store, name + ".bn" + std::to_string(i), spec.hidden[i]);
    in = spec.hidden[i];
  }
  layers_.emplace_back(store, name + ".out", in, spec.output, rng);
}

Var Mlp::forward(Graph& g, Var x, Mode mode) const {
  Var h = x;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
    h = layers_[i].forward(g, h);
    if (spec_.batch_norm) h = norms_[i].forward(g, h, mode);
    h = apply_activation(h, spec_.activation);
  }
  return layers_.back().forward(g, h);
}

// ---------------------------------------------------------------------------

EmbeddingTable::EmbeddingTable(ParamStore& store, const std::string& name, std::size_t rows,
                               std::size_t dim, std::mt19937_64& rng)
    : table_(&glorot(store, name, rows, dim, rng)), rows_(rows), dim_(dim) {}

Var EmbeddingTable::lookup(Graph& g, std::span<const std::size_t> ids) const {
  for (auto id : ids) {
    if (id >= rows_) throw DataError("embedding lookup: id " + std::to_string(id) + " outside [0, " +
                                     std::to_string(rows_) + ")");
  }
  return ad::gather(g.param(*table_), ids);
}

Var EmbeddingTable::lookup_one(Graph& g, std::size_t id) const {
  if (id >= rows_) throw DataError("embedding lookup: id " + std::to_string(id) + " outside [0, " +
                                   std::to_string(rows_) + ")");
  return ad::gather_row(g.param(*table_), id);
}

// ---------------------------------------------------------------------------

GruCell::GruCell(ParamStore& store, const std::string& name, std::size_t input, std::size_t hidden,
                 std::mt19937_64& rng)
    : w_input_(&glorot(store, name + ".w_input", input, 3 * hidden, rng)),
      w_gates_(&glorot(store, name + ".w_gates", hidden, 2 * hidden, rng)),
      w_cand_(&glorot(store, name + ".w_cand", hidden, hidden, rng)),
      bias_(&zeros(store, name + ".b", 3 * hidden)),
      input_(input),
      hidden_(hidden) {
  if (input == 0 || hidden == 0) throw ConfigError("gru " + name + ": widths must be positive");
}

Var GruCell::step_projected(Graph& g, Var x_proj, Var h) const {
  const std::size_t H = hidden_;
  Var hg = ad::matmul(h, g.param(*w_gates_));
  Var z = ad::sigmoid(ad::add(ad::slice(x_proj, 0, H), ad::slice(hg, 0, H)));
  Var r = ad::sigmoid(ad::add(ad::slice(x_proj, H, H), ad::slice(hg, H, H)));
  Var cand = ad::tanh(ad::add(ad::slice(x_proj, 2 * H, H), ad::matmul(ad::mul(r, h), g.param(*w_cand_))));
  return ad::add(ad::mul(one_minus(z), h), ad::mul(z, cand));
}

Var GruCell::step(Graph& g, Var x, Var h) const {
  require_width("gru_step input", x.shape(), input_);
  require_width("gru_step hidden", h.shape(), hidden_);
  return step_projected(g, affine(g, x, *w_input_, *bias_), h);
}

Var GruCell::run(Graph& g, Var inputs, std::span<const TimeFeatures>) const {
  require_sequence("gru", inputs.shape(), input_);
  Var proj = affine(g, inputs, *w_input_, *bias_);
  Var h = g.constant(Tensor(Shape::vector(hidden_)));
  std::vector<Var> outputs;
  outputs.reserve(inputs.shape().rows());
  for (std::size_t t = 0; t < inputs.shape().rows(); ++t) {
    h = step_projected(g, ad::row(proj, t), h);
    outputs.push_back(h);
  }
  return ad::stack_rows(outputs);
}

Var GruCell::run_final(Graph& g, Var inputs) const {
  require_sequence("gru", inputs.shape(), input_);
  Var proj = affine(g, inputs, *w_input_, *bias_);
  Var h = g.constant(Tensor(Shape::vector(hidden_)));
  for (std::size_t t = 0; t < inputs.shape().rows(); ++t) h = step_projected(g, ad::row(proj, t), h);
  return h;
}

// ---------------------------------------------------------------------------

LstmCell::LstmCell(ParamStore& store, const std::string& name, std::size_t input, std::size_t hidden,
                   std::mt19937_64& rng)
    : w_input_(&glorot(store, name + ".w_input", input, 4 * hidden, rng)),
      w_hidden_(&glorot(store, name + ".w_hidden", hidden, 4 * hidden, rng)),
      bias_(&zeros(store, name + ".b", 4 * hidden)),
      input_(input),
      hidden_(hidden) {
  if (input == 0 || hidden == 0) throw ConfigError("lstm " + name + ": widths must be positive");
}

LstmState LstmCell::step_projected(Graph& g, Var x_proj, LstmState state, Var t1, Var t2) const {
  const std::size_t H = hidden_;
  Var pre = ad::add(x_proj, ad::matmul(state.h, g.param(*w_hidden_)));
  Var i = ad::sigmoid(ad::slice(pre, 0, H));
  Var f = ad::sigmoid(ad::slice(pre, H, H));
  Var o = ad::sigmoid(ad::slice(pre, 2 * H, H));
  Var cand = ad::tanh(ad::slice(pre, 3 * H, H));
  Var carry = ad::mul(f, state.c);
  Var write = ad::mul(i, cand);
  if (t1.valid()) {
    carry = ad::mul(carry, t2);
    write = ad::mul(write, t1);
  }
  Var c = ad::add(carry, write);
  return {ad::mul(o, ad::tanh(c)), c};
}

LstmState LstmCell::step(Graph& g, Var x, LstmState state) const {
  require_width("lstm_step input", x.shape(), input_);
  require_width("lstm_step hidden", state.h.shape(), hidden_);
  require_width("lstm_step cell", state.c.shape(), hidden_);
  return step_projected(g, affine(g, x, *w_input_, *bias_), state, {}, {});
}

Var LstmCell::run(Graph& g, Var inputs, std::span<const TimeFeatures>) const {
  require_sequence("lstm", inputs.shape(), input_);
  Var proj = affine(g, inputs, *w_input_, *bias_);
  LstmState s{g.constant(Tensor(Shape::vector(hidden_))), g.constant(Tensor(Shape::vector(hidden_)))};
  std::vector<Var> outputs;
  for (std::size_t t = 0; t < inputs.shape().rows(); ++t) {
    s = step_projected(g, ad::row(proj, t), s, {}, {});
    outputs.push_back(s.h);
  }
  return ad::stack_rows(outputs);
}

// ---------------------------------------------------------------------------

TimeLstmCell::TimeLstmCell(ParamStore& store, const std::string& name, std::size_t input,
                           std::size_t hidden, std::mt19937_64& rng)
    : LstmCell(store, name, input, hidden, rng) {
  w_time_ = &glorot(store, name + ".w_time", input, 2 * hidden, rng);
  v_prev_ = &store.create_glorot(name + ".v_prev", Shape::vector(hidden), 1, hidden, rng);
  v_target_ = &store.create_glorot(name + ".v_target", Shape::vector(hidden), 1, hidden, rng);
  b_time_ = &zeros(store, name + ".b_time", 2 * hidden);
}

std::pair<Var, Var> TimeLstmCell::time_gates(Graph& g, Var t_proj, const TimeFeatures& dt) const {
  if (!(dt.since_prev >= 0.0) || !(dt.until_target >= 0.0))
    throw DataError("time_lstm: time-interval features must be nonnegative");
  const std::size_t H = hidden_;
  Var s1 = ad::sigmoid(ad::scale(g.param(*v_prev_), dt.since_prev));
  Var s2 = ad::sigmoid(ad::scale(g.param(*v_target_), dt.until_target));
  Var t1 = ad::sigmoid(ad::add(ad::slice(t_proj, 0, H), s1));
  Var t2 = ad::sigmoid(ad::add(ad::slice(t_proj, H, H), s2));
  return {t1, t2};
}

LstmState TimeLstmCell::step(Graph& g, Var x, const TimeFeatures& dt, LstmState state) const {
  require_width("time_lstm_step input", x.shape(), input_);
  require_width("time_lstm_step hidden", state.h.shape(), hidden_);
  require_width("time_lstm_step cell", state.c.shape(), hidden_);
  auto [t1, t2] = time_gates(g, affine(g, x, *w_time_, *b_time_), dt);
  return step_projected(g, affine(g, x, *w_input_, *bias_), state, t1, t2);
}

Var TimeLstmCell::run(Graph& g, Var inputs, std::span<const TimeFeatures> times) const {
  require_sequence("time_lstm", inputs.shape(), input_);
  if (times.size() != inputs.shape().rows())
    throw DataError("time_lstm: " + std::to_string(times.size()) + " time features for " +
                    std::to_string(inputs.shape().rows()) + " steps");
  Var proj = affine(g, inputs, *w_input_, *bias_);
  Var tproj = affine(g, inputs, *w_time_, *b_time_);
  LstmState s{g.constant(Tensor(Shape::vector(hidden_))), g.constant(Tensor(Shape::vector(hidden_)))};
  std::vector<Var> outputs;
  for (std::size_t t = 0; t < inputs.shape().rows(); ++t) {
    auto [t1, t2] = time_gates(g, ad::row(tproj, t), times[t]);
    s = step_projected(g, ad::row(proj, t), s, t1, t2);
    outputs.push_back(s.h);
  }
  return ad::stack_rows(outputs);
}

std::unique_ptr<RecurrentCell> make_cell(const RnnCellSpec& spec, ParamStore& store,
                                         const std::string& name, std::mt19937_64& rng) {
  switch (spec.kind) {
    case CellKind::kGru: return std::make_unique<GruCell>(store, name, spec.input, spec.hidden, rng);
    case CellKind::kLstm: return std::make_unique<LstmCell>(store, name, spec.input, spec.hidden, rng);
    case CellKind::kTimeLstm:
      return std::make_unique<TimeLstmCell>(store, name, spec.input, spec.hidden, rng);
  }
  throw ConfigError("unknown cell kind");
}

// ---------------------------------------------------------------------------

AttentionPooling::AttentionPooling(ParamStore& store, const std::string& name, AttentionKind kind,
                                   std::size_t dim, std::mt19937_64& rng)
    : kind_(kind), transform_(&glorot(store, name + ".w", dim, dim, rng)) {
  if (kind == AttentionKind::kMlp) {
    MlpSpec spec;
    spec.input = 4 * dim;
    spec.hidden = {dim};
    spec.output = 1;
    scorer_ = Mlp(store, name + ".tau", spec, rng);
  }
}

Var AttentionPooling::scores(Graph& g, Var keys, Var query) const {
  const std::size_t dim = transform_->value.rows();
  require_sequence("attention keys", keys.shape(), dim);
  require_width("attention query", query.shape(), dim);
  Var v = ad::matmul(keys, g.param(*transform_));
  if (kind_ == AttentionKind::kInnerProduct) return ad::matmul(v, query);
  const std::size_t t = keys.shape().rows();
  Var q = ad::repeat_rows(query, t);
  const Var parts[] = {v, q, ad::sub(v, q), ad::mul(v, q)};
  Var s = scorer_.forward(g, ad::concat(parts, 1), Mode::kEval);
  return ad::reshape(s, Shape::vector(t));
}

AttentionPooling::Result AttentionPooling::pool(Graph& g, Var keys, Var values, Var query) const {
  if (values.shape().rank != 2 || values.shape().rows() != keys.shape().rows())
    throw ShapeError("attention: keys " + keys.shape().str() + " and values " + values.shape().str() +
                     " disagree on length");
  Var w = ad::softmax(scores(g, keys, query));
  return {w, ad::matmul(w, values)};
}

}  // namespace clsr::nn
