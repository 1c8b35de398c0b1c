#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>

#include "clsr/adam.hpp"
#include "clsr/errors.hpp"
#include "clsr/gradcheck.hpp"
#include "clsr/graph.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace clsr;
using ad::Graph;
using ad::Var;
using test::probe;
using test::random_tensor;

namespace {

using Builder = std::function<Var(Graph&, Var, Var)>;

// Gradient check of `op(a, b)` for 10 seeds with a (ra x ca) and b (rb x cb)
// parameter. Rank-1 shapes are passed as cols = 0.
double worst_error(const Builder& op, Shape sa, Shape sb) {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    ParamStore store;
    Parameter& a = store.create("a", random_tensor(sa, rng));
    Parameter& b = store.create("b", random_tensor(sb, rng));
    auto loss = [&](Graph& g) { return probe(g, op(g, g.param(a), g.param(b)), seed + 1000); };
    worst = std::max(worst, grad_check(store, loss).max_rel_error);
  }
  return worst;
}

}  // namespace

TEST_CASE("forward examples") {
  Graph g;
  Var x = g.constant(Tensor::vector({3.0}));
  CHECK(ad::mul(x, x).value()[0] == 9.0);
  CHECK(ad::softplus(g.constant(Tensor::scalar(0.0))).value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  for (double c : {-700.0, 0.0, 3.5, 800.0}) {
    Var s = ad::softmax(g.constant(Tensor::vector({c, c, c})));
    for (std::size_t i = 0; i < 3; ++i) CHECK(s.value()[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }
}

TEST_CASE("analytic derivatives") {
  ParamStore store;
  Parameter& x = store.create("x", Tensor::scalar(3.0));
  {
    Graph g;
    Var v = g.param(x);
    CHECK(g.backward(ad::mul(v, v)).at(x)[0] == 6.0);
  }
  x.value[0] = 0.0;
  {
    Graph g;
    CHECK(g.backward(ad::softplus(g.param(x))).at(x)[0] == 0.5);
  }
}

TEST_CASE("primitive gradients match finite differences") {
  const Shape m23 = Shape::matrix(2, 3), m34 = Shape::matrix(3, 4), v3 = Shape::vector(3);
  const Shape m43 = Shape::matrix(4, 3), m53 = Shape::matrix(5, 3);
  const double tol = 1e-4;
  CHECK(worst_error([](Graph&, Var a, Var b) { return ad::matmul(a, b); }, m23, m34) < tol);
  CHECK(worst_error([](Graph&, Var a, Var b) { return ad::matmul(a, b); }, m23, v3) < tol);
  CHECK(worst_error([](Graph&, Var a, Var b) { return ad::matmul(b, a); }, m34, v3) < tol);
  CHECK(worst_error([](Graph&, Var a, Var b) { return ad::add(a, b); }, m23, m23) < tol);
  CHECK(worst_error([](Graph&, Var a, Var b) { return ad::sub(a, b); }, m23, m23) < tol);
  CHECK(worst_error([](Graph&, Var a, Var b) { return ad::mul(a, b); }, m23, m23) < tol);
  CHECK(worst_error([](Graph&, Var a, Var b) { return ad::mul(a, b); }, m23, Shape::scalar()) < tol);
  CHECK(worst_error(
            [](Graph&, Var a, Var b) {
              const Var parts[] = {a, b};
              return ad::concat(parts, 0);
            },
            m23, Shape::matrix(4, 3)) < tol);
  CHECK(worst_error(
            [](Graph&, Var a, Var b) {
              const Var parts[] = {a, b};
              return ad::concat(parts, 1);
            },
            m23, Shape::matrix(2, 5)) < tol);
  CHECK(worst_error(
            [](Graph&, Var a, Var b) {
              const Var parts[] = {a, b};
              return ad::concat(parts, 0);
            },
            v3, Shape::vector(2)) < tol);
  CHECK(worst_error([](Graph&, Var a, Var b) { return ad::mul(ad::slice(a, 1, 2), b); }, Shape::vector(5),
                    Shape::vector(2)) < tol);
  CHECK(worst_error([](Graph&, Var a, Var) { return ad::mean(a, 0); }, m43, v3) < tol);
  CHECK(worst_error([](Graph&, Var a, Var) { return ad::mean(a, 1); }, m43, v3) < tol);
  CHECK(worst_error([](Graph&, Var a, Var) { return ad::sum(a); }, m43, v3) < tol);
  CHECK(worst_error([](Graph&, Var a, Var) { return ad::sigmoid(a); }, m43, v3) < tol);
  CHECK(worst_error([](Graph&, Var a, Var) { return ad::tanh(a); }, m43, v3) < tol);
  CHECK(worst_error([](Graph&, Var a, Var) { return ad::relu(a); }, m43, v3) < tol);
  CHECK(worst_error([](Graph&, Var a, Var) { return ad::softplus(a); }, m43, v3) < tol);
  CHECK(worst_error([](Graph&, Var a, Var) { return ad::softmax(a, 0); }, Shape::vector(6), v3) < tol);
  CHECK(worst_error([](Graph&, Var a, Var) { return ad::softmax(a, 1); }, m43, v3) < tol);
  CHECK(worst_error([](Graph&, Var a, Var) { return ad::softmax(a, 0); }, m43, v3) < tol);
  CHECK(worst_error(
            [](Graph&, Var a, Var) {
              const std::size_t ids[] = {4, 0, 4, 2};
              return ad::gather(a, ids);
            },
            m53, v3) < tol);
  CHECK(worst_error([](Graph&, Var a, Var) { return ad::gather_row(a, 3); }, m53, v3) < tol);
  CHECK(worst_error([](Graph&, Var a, Var) { return ad::l2_norm(a); }, Shape::vector(5), v3) < tol);
  CHECK(worst_error([](Graph&, Var a, Var b) { return ad::distance(a, b); }, v3, v3) < tol);
  CHECK(worst_error([](Graph&, Var a, Var b) { return ad::dot(a, b); }, v3, v3) < tol);
  CHECK(worst_error([](Graph&, Var a, Var b) { return ad::outer(a, b); }, Shape::vector(2), v3) < tol);
  CHECK(worst_error([](Graph&, Var a, Var) { return ad::broadcast(a, Shape::matrix(2, 2)); }, Shape::scalar(),
                    v3) < tol);
  CHECK(worst_error([](Graph&, Var a, Var b) { return ad::add_row(a, b); }, m43, v3) < tol);
  CHECK(worst_error([](Graph&, Var a, Var b) { return ad::mul_row(a, b); }, m43, v3) < tol);
  CHECK(worst_error([](Graph&, Var a, Var) { return ad::transpose(a); }, m23, v3) < tol);
  CHECK(worst_error([](Graph&, Var a, Var) { return ad::row_range(a, 1, 3); }, m53, v3) < tol);
  CHECK(worst_error([](Graph&, Var a, Var) { return ad::repeat_rows(a, 3); }, v3, v3) < tol);
  CHECK(worst_error(
            [](Graph&, Var a, Var b) {
              const Var rows[] = {a, b, a};
              return ad::stack_rows(rows);
            },
            v3, v3) < tol);
  CHECK(worst_error([](Graph&, Var a, Var) { return ad::log(ad::add_const(ad::mul(a, a), 0.5)); }, m23, v3) <
        tol);
  CHECK(worst_error([](Graph&, Var a, Var) { return ad::pow(ad::add_const(ad::mul(a, a), 0.5), 1.5); }, m23, v3) <
        tol);
}

TEST_CASE("softmax rows are distributions") {
  std::mt19937_64 rng(5);
  Graph g;
  Var s = ad::softmax(g.constant(random_tensor(Shape::matrix(4, 7), rng, -30.0, 30.0)), 1);
  for (std::size_t r = 0; r < 4; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 7; ++c) {
      CHECK(s.value().at(r, c) >= 0.0);
      total += s.value().at(r, c);
    }
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }
}

TEST_CASE("shape mismatch names the op and both shapes") {
  Graph g;
  Var a = g.constant(Tensor(Shape::matrix(2, 3)));
  Var b = g.constant(Tensor(Shape::matrix(2, 2)));
  try {
    ad::add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find(a.shape().str()) != std::string::npos);
    CHECK(msg.find(b.shape().str()) != std::string::npos);
  }
  CHECK_THROWS_AS(ad::matmul(a, b), ShapeError);
}

TEST_CASE("backward needs a scalar root") {
  ParamStore store;
  Parameter& p = store.create("p", Tensor::vector({1.0, 2.0}));
  Graph g;
  CHECK_THROWS(g.backward(ad::tanh(g.param(p))));
}

TEST_CASE("unreached and non-trainable leaves") {
  ParamStore store;
  Parameter& used = store.create("used", Tensor::vector({1.0, -2.0}));
  Parameter& unused = store.create("unused", Tensor::matrix(2, 2, {1, 2, 3, 4}));
  Parameter& frozen = store.create("frozen", Tensor::vector({0.5, 0.5}), false);
  Graph g;
  g.param(unused);
  auto grads = g.backward(ad::sum(ad::mul(g.param(used), g.param(frozen))));
  REQUIRE(grads.find(unused) != nullptr);
  for (double v : grads.at(unused).values()) CHECK(v == 0.0);
  CHECK(grads.find(frozen) == nullptr);
  CHECK(grads.at(used)[0] == 0.5);
}

TEST_CASE("gather scatter-adds into touched rows only") {
  ParamStore store;
  Parameter& table = store.create("t", Tensor(Shape::matrix(4, 2), 1.0));
  Graph g;
  const std::size_t ids[] = {1, 3, 1};
  auto grads = g.backward(ad::sum(ad::gather(g.param(table), ids)));
  const Tensor& gt = grads.at(table);
  CHECK(gt.at(0, 0) == 0.0);
  CHECK(gt.at(2, 1) == 0.0);
  CHECK(gt.at(1, 0) == 2.0);
  CHECK(gt.at(3, 1) == 1.0);
}

TEST_CASE("repeated forward and backward are bit-identical") {
  std::mt19937_64 rng(3);
  ParamStore store;
  Parameter& w = store.create("w", random_tensor(Shape::matrix(5, 4), rng));
  Parameter& x = store.create("x", random_tensor(Shape::matrix(3, 5), rng));
  auto run = [&] {
    Graph g;
    Var y = ad::softmax(ad::tanh(ad::matmul(g.param(x), g.param(w))), 1);
    Var loss = probe(g, y);
    auto grads = g.backward(loss);
    return std::make_pair(loss.value()[0], grads.at(w).raw());
  };
  auto a = run();
  auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("adam") {
  AdamConfig cfg;
  cfg.lr = 0.1;

  SUBCASE("zero gradient leaves params unchanged") {
    ParamStore store;
    Parameter& p = store.create("p", Tensor::vector({1.5, -2.0}));
    AdamState st = AdamState::for_params(store);
    Graph g;
    auto grads = g.backward(ad::scale(ad::sum(g.param(p)), 0.0));
    adam_step(store, grads, st, cfg);
    CHECK(st.step == 1);
    CHECK(p.value[0] == 1.5);
    CHECK(p.value[1] == -2.0);
  }

  SUBCASE("unit gradient moves the first step by -lr") {
    ParamStore store;
    Parameter& p = store.create("p", Tensor::scalar(0.0));
    AdamState st = AdamState::for_params(store);
    Graph g;
    auto grads = g.backward(g.param(p));
    adam_step(store, grads, st, cfg);
    CHECK(p.value[0] == doctest::Approx(-0.1).epsilon(1e-6));
  }

  SUBCASE("identical params stay identical") {
    ParamStore store;
    Parameter& a = store.create("a", Tensor::vector({0.3, -0.7}));
    Parameter& b = store.create("b", Tensor::vector({0.3, -0.7}));
    AdamState st = AdamState::for_params(store);
    for (int i = 0; i < 25; ++i) {
      Graph g;
      Var loss = ad::add(ad::sum(ad::tanh(g.param(a))), ad::sum(ad::tanh(g.param(b))));
      adam_step(store, g.backward(loss), st, cfg);
      CHECK(a.value.raw() == b.value.raw());
    }
  }
}
