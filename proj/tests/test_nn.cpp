#include <cmath>
#include <random>
#include <vector>

#include "clsr/errors.hpp"
#include "clsr/gradcheck.hpp"
#include "clsr/nn.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace clsr;
using namespace clsr::nn;
using test::probe;
using test::random_tensor;

namespace {

void zero_all(ParamStore& store) {
  for (auto& p : store) p->value.fill(0.0);
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Row-vector times matrix, plus bias, on plain tensors.
std::vector<double> affine(const std::vector<double>& x, const Tensor& w, const Tensor& b) {
  std::vector<double> y(w.cols());
  for (std::size_t c = 0; c < w.cols(); ++c) {
    double s = b[c];
    for (std::size_t r = 0; r < w.rows(); ++r) s += x[r] * w.at(r, c);
    y[c] = s;
  }
  return y;
}

std::vector<double> values(const Var& v) { return v.value().raw(); }

constexpr std::size_t kIn = 3;
constexpr std::size_t kHidden = 4;
constexpr std::size_t kSteps = 5;

std::vector<TimeFeatures> random_times(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 8.0);
  std::vector<TimeFeatures> t(kSteps);
  for (auto& f : t) f = {u(rng), u(rng)};
  return t;
}

// Checks every cell parameter and the input sequence through `run`.
double cell_grad_error(CellKind kind) {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    ParamStore store;
    auto cell = make_cell({kind, kIn, kHidden}, store, "cell", rng);
    for (auto& p : store) {
      if (p->name.find(".b") != std::string::npos) p->value = random_tensor(p->value.shape(), rng);
    }
    Parameter& x = store.create("x", random_tensor(Shape::matrix(kSteps, kIn), rng));
    const auto times = random_times(rng);
    auto loss = [&](Graph& g) { return probe(g, cell->run(g, g.param(x), times), seed); };
    worst = std::max(worst, grad_check(store, loss).max_rel_error);
  }
  return worst;
}

}  // namespace

TEST_CASE("gru step zero-parameter cases") {
  std::mt19937_64 rng(1);
  ParamStore store;
  GruCell cell(store, "gru", kIn, kHidden, rng);
  zero_all(store);
  Graph g;
  Var x = g.constant(random_tensor(Shape::vector(kIn), rng));
  const Tensor h0 = random_tensor(Shape::vector(kHidden), rng);
  const auto h1 = values(cell.step(g, x, g.constant(h0)));
  for (std::size_t i = 0; i < kHidden; ++i) CHECK(h1[i] == 0.5 * h0[i]);
  const auto z = values(cell.step(g, x, g.constant(Tensor(Shape::vector(kHidden)))));
  for (double v : z) CHECK(v == 0.0);
}

TEST_CASE("gru step width mismatch") {
  std::mt19937_64 rng(1);
  ParamStore store;
  GruCell cell(store, "gru", kIn, kHidden, rng);
  Graph g;
  CHECK_THROWS_AS(cell.step(g, g.constant(Tensor(Shape::vector(kIn + 1))), g.constant(Tensor(Shape::vector(kHidden)))),
                  ShapeError);
}

TEST_CASE("lstm step") {
  std::mt19937_64 rng(2);
  ParamStore store;
  LstmCell cell(store, "lstm", kIn, kHidden, rng);
  Graph g;
  const Tensor x = random_tensor(Shape::vector(kIn), rng);
  const Tensor h0 = random_tensor(Shape::vector(kHidden), rng, -0.5, 0.5);

  SUBCASE("all params zero with c = 0") {
    zero_all(store);
    auto s = cell.step(g, g.constant(x), {g.constant(h0), g.constant(Tensor(Shape::vector(kHidden)))});
    for (double v : values(s.c)) CHECK(v == 0.0);
    for (double v : values(s.h)) CHECK(v == 0.0);
  }

  SUBCASE("saturated forget gate carries the cell state") {
    Tensor& b = cell.bias().value;
    for (std::size_t i = 0; i < kHidden; ++i) b[kHidden + i] = 50.0;
    const Tensor c0 = random_tensor(Shape::vector(kHidden), rng);
    auto s = cell.step(g, g.constant(x), {g.constant(h0), g.constant(c0)});

    const Parameter& wx = *store.find("lstm.w_input");
    const Parameter& wh = *store.find("lstm.w_hidden");
    auto pre = affine(x.raw(), wx.value, b);
    const auto rec = affine(h0.raw(), wh.value, Tensor(Shape::vector(4 * kHidden)));
    for (std::size_t i = 0; i < pre.size(); ++i) pre[i] += rec[i];
    for (std::size_t i = 0; i < kHidden; ++i) {
      const double expected = c0[i] + sig(pre[i]) * std::tanh(pre[3 * kHidden + i]);
      CHECK(std::abs(s.c.value()[i] - expected) < 1e-12);
    }
  }
}

TEST_CASE("time-lstm step matches direct evaluation") {
  std::mt19937_64 rng(3);
  ParamStore store;
  TimeLstmCell cell(store, "tl", kIn, kHidden, rng);
  cell.time_weight().value.fill(0.0);
  cell.time_scale_prev().value.fill(0.0);
  cell.time_scale_target().value.fill(0.0);
  cell.time_bias().value.fill(0.0);
  cell.bias().value = random_tensor(cell.bias().value.shape(), rng);

  const Tensor x = random_tensor(Shape::vector(kIn), rng);
  const Tensor h0 = random_tensor(Shape::vector(kHidden), rng, -0.5, 0.5);
  const Tensor c0 = random_tensor(Shape::vector(kHidden), rng);
  Graph g;
  auto s = cell.step(g, g.constant(x), TimeFeatures{0.0, 0.0}, {g.constant(h0), g.constant(c0)});

  // Zero time-gate parameters: T1 = T2 = s(0 + s(0)) = s(0.5).
  const double gate = sig(0.5);
  auto pre = affine(x.raw(), store.find("tl.w_input")->value, cell.bias().value);
  const auto rec = affine(h0.raw(), store.find("tl.w_hidden")->value, Tensor(Shape::vector(4 * kHidden)));
  for (std::size_t i = 0; i < pre.size(); ++i) pre[i] += rec[i];
  for (std::size_t i = 0; i < kHidden; ++i) {
    const double in = sig(pre[i]), forget = sig(pre[kHidden + i]), out = sig(pre[2 * kHidden + i]);
    const double cand = std::tanh(pre[3 * kHidden + i]);
    const double c = forget * gate * c0[i] + in * gate * cand;
    CHECK(std::abs(s.c.value()[i] - c) < 1e-14);
    CHECK(std::abs(s.h.value()[i] - out * std::tanh(c)) < 1e-14);
  }
}

TEST_CASE("time-lstm carried contribution grows with the target interval") {
  std::mt19937_64 rng(4);
  ParamStore store;
  TimeLstmCell cell(store, "tl", kIn, kHidden, rng);
  for (std::size_t i = 0; i < kHidden; ++i) cell.time_scale_target().value[i] = 0.3 + 0.1 * static_cast<double>(i);
  const Tensor x = random_tensor(Shape::vector(kIn), rng);
  const Tensor h0 = random_tensor(Shape::vector(kHidden), rng, -0.5, 0.5);
  const Tensor c0(Shape::vector(kHidden), 1.0);
  Graph g;
  auto small = cell.step(g, g.constant(x), TimeFeatures{1.0, 0.5}, {g.constant(h0), g.constant(c0)});
  auto large = cell.step(g, g.constant(x), TimeFeatures{1.0, 4.0}, {g.constant(h0), g.constant(c0)});
  // The write path does not depend on the target interval, so the cell
  // difference is f * c * (T2(large) - T2(small)).
  for (std::size_t i = 0; i < kHidden; ++i) CHECK(large.c.value()[i] > small.c.value()[i]);
}

TEST_CASE("time-lstm rejects negative interval features") {
  std::mt19937_64 rng(5);
  ParamStore store;
  TimeLstmCell cell(store, "tl", kIn, kHidden, rng);
  Graph g;
  LstmState s{g.constant(Tensor(Shape::vector(kHidden))), g.constant(Tensor(Shape::vector(kHidden)))};
  CHECK_THROWS_AS(cell.step(g, g.constant(Tensor(Shape::vector(kIn))), TimeFeatures{-0.1, 0.0}, s), DataError);
  CHECK_THROWS_AS(cell.step(g, g.constant(Tensor(Shape::vector(kIn))), TimeFeatures{0.0, -1.0}, s), DataError);
}

TEST_CASE("recurrent cells pass gradient checks") {
  CHECK(cell_grad_error(CellKind::kGru) < 1e-4);
  CHECK(cell_grad_error(CellKind::kLstm) < 1e-4);
  CHECK(cell_grad_error(CellKind::kTimeLstm) < 1e-4);
}

TEST_CASE("recurrent hidden states stay in [-1, 1]") {
  std::mt19937_64 rng(6);
  for (CellKind kind : {CellKind::kGru, CellKind::kLstm, CellKind::kTimeLstm}) {
    ParamStore store;
    auto cell = make_cell({kind, kIn, kHidden}, store, "cell", rng);
    for (auto& p : store) p->value = random_tensor(p->value.shape(), rng, -5.0, 5.0);
    Graph g;
    const auto times = random_times(rng);
    Var out = cell->run(g, g.constant(random_tensor(Shape::matrix(kSteps, kIn), rng, -100.0, 100.0)), times);
    for (double v : out.value().values()) CHECK(std::abs(v) <= 1.0);
  }
}

TEST_CASE("mlp") {
  std::mt19937_64 rng(7);

  SUBCASE("identity single layer without batch norm") {
    ParamStore store;
    Mlp mlp(store, "m", MlpSpec{3, {}, 3, Activation::kRelu, false}, rng);
    Tensor& w = mlp.layers()[0].weight().value;
    w.fill(0.0);
    for (std::size_t i = 0; i < 3; ++i) w.at(i, i) = 1.0;
    Graph g;
    const Tensor x = random_tensor(Shape::matrix(2, 3), rng);
    CHECK(mlp.forward(g, g.constant(x), Mode::kEval).value().raw() == x.raw());
  }

  SUBCASE("batch norm zero-variance feature normalises to zero") {
    ParamStore store;
    BatchNorm bn(store, "bn", 2);
    Graph g;
    Var y = bn.forward(g, g.constant(Tensor::matrix(3, 2, {4.0, 1.0, 4.0, 2.0, 4.0, 6.0})), Mode::kTrain);
    for (std::size_t r = 0; r < 3; ++r) CHECK(y.value().at(r, 0) == 0.0);
    CHECK(std::isfinite(y.value().at(0, 1)));
  }

  SUBCASE("train-mode batch norm rejects a single row") {
    ParamStore store;
    Mlp mlp(store, "m", MlpSpec{3, {4}, 1, Activation::kRelu, true}, rng);
    Graph g;
    CHECK_THROWS_AS(mlp.forward(g, g.constant(Tensor(Shape::matrix(1, 3))), Mode::kTrain), ShapeError);
    CHECK_NOTHROW(mlp.forward(g, g.constant(Tensor(Shape::matrix(1, 3))), Mode::kEval));
  }

  SUBCASE("eval mode is pure, train mode updates running statistics") {
    ParamStore store;
    Mlp mlp(store, "m", MlpSpec{3, {5, 4}, 2, Activation::kRelu, true}, rng);
    const Tensor x = random_tensor(Shape::matrix(6, 3), rng);
    const Parameter& rm = *store.find("m.bn0.running_mean");
    const auto before = rm.value.raw();
    Graph g;
    const auto a = mlp.forward(g, g.constant(x), Mode::kEval).value().raw();
    const auto b = mlp.forward(g, g.constant(x), Mode::kEval).value().raw();
    CHECK(a == b);
    CHECK(rm.value.raw() == before);
    mlp.forward(g, g.constant(x), Mode::kTrain);
    CHECK(rm.value.raw() != before);
    for (double v : store.find("m.bn0.running_var")->value.values()) CHECK(v >= 0.0);
  }

  SUBCASE("gradient checks in both batch-norm modes") {
    for (Mode mode : {Mode::kEval, Mode::kTrain}) {
      double worst = 0.0;
      for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 r(seed);
        ParamStore store;
        Mlp mlp(store, "m", MlpSpec{4, {6, 5}, 2, Activation::kRelu, true}, r);
        for (auto& p : store) {
          if (p->trainable && p->value.rank() == 1) p->value = random_tensor(p->value.shape(), r, 0.5, 1.5);
        }
        store.find("m.bn0.running_var")->value = random_tensor(Shape::vector(6), r, 0.5, 2.0);
        store.find("m.bn0.running_mean")->value = random_tensor(Shape::vector(6), r);
        Parameter& x = store.create("x", random_tensor(Shape::matrix(5, 4), r));
        auto loss = [&](Graph& g) { return probe(g, mlp.forward(g, g.param(x), mode), seed); };
        worst = std::max(worst, grad_check(store, loss).max_rel_error);
      }
      CHECK(worst < 1e-4);
    }
  }
}

TEST_CASE("embedding lookup bounds") {
  std::mt19937_64 rng(8);
  ParamStore store;
  EmbeddingTable emb(store, "e", 5, 3, rng);
  Graph g;
  CHECK(emb.lookup_one(g, 4).value().size() == 3);
  CHECK_THROWS_AS(emb.lookup_one(g, 5), DataError);
  const std::size_t bad[] = {0, 7};
  CHECK_THROWS_AS(emb.lookup(g, bad), DataError);
}

TEST_CASE("attention pooling") {
  for (AttentionKind kind : {AttentionKind::kMlp, AttentionKind::kInnerProduct}) {
    SUBCASE("single step gets weight one") {
      std::mt19937_64 rng(9);
      ParamStore store;
      AttentionPooling att(store, "att", kind, 4, rng);
      Graph g;
      Var keys = g.constant(random_tensor(Shape::matrix(1, 4), rng));
      auto r = att.pool(g, keys, keys, g.constant(random_tensor(Shape::vector(4), rng)));
      CHECK(r.weights.value()[0] == 1.0);
      CHECK(r.pooled.value().raw() == keys.value().raw());
    }
    SUBCASE("gradient check") {
      double worst = 0.0;
      for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(seed);
        ParamStore store;
        AttentionPooling att(store, "att", kind, 4, rng);
        Parameter& keys = store.create("keys", random_tensor(Shape::matrix(5, 4), rng));
        Parameter& q = store.create("q", random_tensor(Shape::vector(4), rng));
        auto loss = [&](Graph& g) {
          Var k = g.param(keys);
          return probe(g, att.pool(g, k, k, g.param(q)).pooled, seed);
        };
        worst = std::max(worst, grad_check(store, loss).max_rel_error);
      }
      CHECK(worst < 1e-4);
    }
  }
}
