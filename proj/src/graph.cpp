#include "clsr/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include "clsr/errors.hpp"

namespace clsr::ad {

namespace {

[[noreturn]] void shape_error(Op op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op_name(op)) + ": incompatible shapes " + a.str() + " and " +
                   b.str());
}

[[noreturn]] void shape_error(Op op, const Shape& a, const std::string& what) {
  throw ShapeError(std::string(op_name(op)) + ": " + what + " (got " + a.str() + ")");
}

Graph& same_graph(Var a, Var b) {
  if (&a.graph() != &b.graph()) throw ShapeError("operands belong to different graphs");
  return a.graph();
}

bool is_scalar(const Shape& s) { return s.rank == 0; }

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

template <class F>
Var elementwise_binary(Op op, Var a, Var b, F f) {
  auto& g = same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out;
  if (av.shape() == bv.shape()) {
    out = Tensor(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  } else if (is_scalar(av.shape())) {
    out = Tensor(bv.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[0], bv[i]);
  } else if (is_scalar(bv.shape())) {
    out = Tensor(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[0]);
  } else {
    shape_error(op, av.shape(), bv.shape());
  }
  Graph::Node n;
  n.op = op;
  n.parents = {a.id(), b.id()};
  n.value = std::move(out);
  return g.record(std::move(n));
}

template <class F>
Var elementwise_unary(Op op, Var a, F f, double c0 = 0.0, double c1 = 0.0) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  Graph::Node n;
  n.op = op;
  n.parents = {a.id()};
  n.value = std::move(out);
  n.c0 = c0;
  n.c1 = c1;
  return a.graph().record(std::move(n));
}

// Accumulate `g` into a parent whose shape may be rank-0 (broadcast case).
void accumulate_broadcast(Tensor& dst, const Tensor& g, std::size_t i, double v) {
  if (dst.size() == 1 && g.size() != 1) {
    dst[0] += v;
  } else {
    dst[i] += v;
  }
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kNeg: return "neg";
    case Op::kScale: return "scale";
    case Op::kAddConst: return "add_const";
    case Op::kBroadcast: return "broadcast";
    case Op::kMatMul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kReshape: return "reshape";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kRow: return "row";
    case Op::kRowRange: return "row_range";
    case Op::kStackRows: return "stack_rows";
    case Op::kRepeatRows: return "repeat_rows";
    case Op::kAddRow: return "add_row";
    case Op::kMulRow: return "mul_row";
    case Op::kMean: return "mean";
    case Op::kSum: return "sum";
    case Op::kSigmoid: return "sigmoid";
    case Op::kTanh: return "tanh";
    case Op::kRelu: return "relu";
    case Op::kSoftplus: return "softplus";
    case Op::kLog: return "log";
    case Op::kPow: return "pow";
    case Op::kSoftmax: return "softmax";
    case Op::kGather: return "gather";
    case Op::kGatherRow: return "gather_row";
    case Op::kL2Norm: return "l2_norm";
    case Op::kDistance: return "distance";
    case Op::kDot: return "dot";
    case Op::kOuter: return "outer";
    case Op::kClamp: return "clamp";
  }
  return "?";
}

const Tensor& Var::value() const { return graph_->value(*this); }

const Tensor* Gradients::find(const Parameter& p) const {
  auto it = grads_.find(&p);
  return it == grads_.end() ? nullptr : &it->second;
}

const Tensor& Gradients::at(const Parameter& p) const {
  const auto* t = find(p);
  if (t == nullptr) throw ShapeError("no gradient recorded for parameter " + p.name);
  return *t;
}

Var Graph::record(Node node) {
  if (node.op == Op::kLeaf) {
    node.requires_grad = node.param != nullptr && node.param->trainable;
  } else {
    node.requires_grad = false;
    for (auto p : node.parents) node.requires_grad = node.requires_grad || nodes_[p].requires_grad;
  }
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::constant(Tensor t) {
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(t);
  return record(std::move(n));
}

Var Graph::param(Parameter& p) {
  if (auto it = param_leaf_.find(&p); it != param_leaf_.end()) return Var(this, it->second);
  Node n;
  n.op = Op::kLeaf;
  n.value = p.value;
  n.param = &p;
  auto v = record(std::move(n));
  param_leaf_[&p] = v.id();
  return v;
}

// ---------------------------------------------------------------------------
// Forward ops
// ---------------------------------------------------------------------------

Var add(Var a, Var b) { return elementwise_binary(Op::kAdd, a, b, [](double x, double y) { return x + y; }); }
Var sub(Var a, Var b) { return elementwise_binary(Op::kSub, a, b, [](double x, double y) { return x - y; }); }
Var mul(Var a, Var b) { return elementwise_binary(Op::kMul, a, b, [](double x, double y) { return x * y; }); }
Var neg(Var a) { return elementwise_unary(Op::kNeg, a, [](double x) { return -x; }); }

Var scale(Var a, double c) {
  return elementwise_unary(Op::kScale, a, [c](double x) { return x * c; }, c);
}

Var add_const(Var a, double c) {
  return elementwise_unary(Op::kAddConst, a, [c](double x) { return x + c; }, c);
}

Var broadcast(Var s, Shape shape) {
  if (!is_scalar(s.shape())) shape_error(Op::kBroadcast, s.shape(), "expects a rank-0 input");
  Graph::Node n;
  n.op = Op::kBroadcast;
  n.parents = {s.id()};
  n.value = Tensor(shape, s.value()[0]);
  return s.graph().record(std::move(n));
}

Var matmul(Var a, Var b) {
  auto& g = same_graph(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  Tensor out;
  if (A.rank() == 2 && B.rank() == 2) {
    if (A.cols() != B.rows()) shape_error(Op::kMatMul, A.shape(), B.shape());
    const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
    out = Tensor(Shape::matrix(m, n));
    for (std::size_t i = 0; i < m; ++i) {
      double* o = &out.at(i, 0);
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = A.at(i, p);
        if (aip == 0.0) continue;
        const double* brow = &B.raw()[p * n];
        for (std::size_t j = 0; j < n; ++j) o[j] += aip * brow[j];
      }
    }
  } else if (A.rank() == 2 && B.rank() == 1) {
    if (A.cols() != B.size()) shape_error(Op::kMatMul, A.shape(), B.shape());
    const std::size_t m = A.rows(), k = A.cols();
    out = Tensor(Shape::vector(m));
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      const double* arow = &A.raw()[i * k];
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * B[p];
      out[i] = s;
    }
  } else if (A.rank() == 1 && B.rank() == 2) {
    if (A.size() != B.rows()) shape_error(Op::kMatMul, A.shape(), B.shape());
    const std::size_t k = B.rows(), n = B.cols();
    out = Tensor(Shape::vector(n));
    for (std::size_t p = 0; p < k; ++p) {
      const double ap = A[p];
      if (ap == 0.0) continue;
      const double* brow = &B.raw()[p * n];
      for (std::size_t j = 0; j < n; ++j) out[j] += ap * brow[j];
    }
  } else {
    shape_error(Op::kMatMul, A.shape(), B.shape());
  }
  Graph::Node n;
  n.op = Op::kMatMul;
  n.parents = {a.id(), b.id()};
  n.value = std::move(out);
  return g.record(std::move(n));
}

Var transpose(Var a) {
  const Tensor& A = a.value();
  if (A.rank() != 2) shape_error(Op::kTranspose, A.shape(), "expects a matrix");
  Tensor out(Shape::matrix(A.cols(), A.rows()));
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < A.cols(); ++j) out.at(j, i) = A.at(i, j);
  Graph::Node n;
  n.op = Op::kTranspose;
  n.parents = {a.id()};
  n.value = std::move(out);
  return a.graph().record(std::move(n));
}

Var reshape(Var a, Shape shape) {
  const Tensor& A = a.value();
  if (shape.size() != A.size()) shape_error(Op::kReshape, A.shape(), shape);
  Graph::Node n;
  n.op = Op::kReshape;
  n.parents = {a.id()};
  n.value = Tensor(shape, A.raw());
  return a.graph().record(std::move(n));
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  auto& g = parts[0].graph();
  const Shape& first = parts[0].shape();
  Graph::Node n;
  n.op = Op::kConcat;
  n.c0 = axis;
  if (first.rank == 1 && axis == 0) {
    std::vector<double> data;
    for (const auto& p : parts) {
      if (p.shape().rank != 1) shape_error(Op::kConcat, first, p.shape());
      data.insert(data.end(), p.value().raw().begin(), p.value().raw().end());
      n.parents.push_back(p.id());
    }
    n.value = Tensor::vector(std::move(data));
  } else if (first.rank == 2 && axis == 0) {
    std::vector<double> data;
    std::size_t rows = 0;
    for (const auto& p : parts) {
      if (p.shape().rank != 2 || p.shape().cols() != first.cols())
        shape_error(Op::kConcat, first, p.shape());
      data.insert(data.end(), p.value().raw().begin(), p.value().raw().end());
      rows += p.shape().rows();
      n.parents.push_back(p.id());
    }
    n.value = Tensor::matrix(rows, first.cols(), std::move(data));
  } else if (first.rank == 2 && axis == 1) {
    std::size_t cols = 0;
    for (const auto& p : parts) {
      if (p.shape().rank != 2 || p.shape().rows() != first.rows())
        shape_error(Op::kConcat, first, p.shape());
      cols += p.shape().cols();
      n.parents.push_back(p.id());
    }
    Tensor out(Shape::matrix(first.rows(), cols));
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const Tensor& v = p.value();
      for (std::size_t r = 0; r < v.rows(); ++r)
        for (std::size_t c = 0; c < v.cols(); ++c) out.at(r, offset + c) = v.at(r, c);
      offset += v.cols();
    }
    n.value = std::move(out);
  } else {
    shape_error(Op::kConcat, first, "unsupported rank/axis combination");
  }
  return g.record(std::move(n));
}

Var slice(Var a, std::size_t begin, std::size_t length) {
  const Tensor& A = a.value();
  if (A.rank() != 1 || length == 0 || begin + length > A.size())
    shape_error(Op::kSlice, A.shape(), "slice [" + std::to_string(begin) + ", " +
                                           std::to_string(begin + length) + ") out of range");
  Graph::Node n;
  n.op = Op::kSlice;
  n.parents = {a.id()};
  n.value = Tensor::vector(std::vector<double>(A.raw().begin() + static_cast<std::ptrdiff_t>(begin),
                                               A.raw().begin() + static_cast<std::ptrdiff_t>(begin + length)));
  n.c0 = static_cast<double>(begin);
  return a.graph().record(std::move(n));
}

Var row(Var a, std::size_t r) {
  const Tensor& A = a.value();
  if (A.rank() != 2 || r >= A.rows()) shape_error(Op::kRow, A.shape(), "row " + std::to_string(r) + " out of range");
  Graph::Node n;
  n.op = Op::kRow;
  n.parents = {a.id()};
  const auto off = static_cast<std::ptrdiff_t>(r * A.cols());
  n.value = Tensor::vector(std::vector<double>(A.raw().begin() + off,
                                               A.raw().begin() + off + static_cast<std::ptrdiff_t>(A.cols())));
  n.c0 = static_cast<double>(r);
  return a.graph().record(std::move(n));
}

Var row_range(Var a, std::size_t begin, std::size_t count) {
  const Tensor& A = a.value();
  if (A.rank() != 2 || count == 0 || begin + count > A.rows())
    shape_error(Op::kRowRange, A.shape(), "row range out of bounds");
  Graph::Node n;
  n.op = Op::kRowRange;
  n.parents = {a.id()};
  const auto off = static_cast<std::ptrdiff_t>(begin * A.cols());
  n.value = Tensor::matrix(count, A.cols(),
                           std::vector<double>(A.raw().begin() + off,
                                               A.raw().begin() + off + static_cast<std::ptrdiff_t>(count * A.cols())));
  n.c0 = static_cast<double>(begin);
  return a.graph().record(std::move(n));
}

Var stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw ShapeError("stack_rows: no inputs");
  const Shape& first = rows[0].shape();
  Graph::Node n;
  n.op = Op::kStackRows;
  std::vector<double> data;
  data.reserve(first.size() * rows.size());
  for (const auto& r : rows) {
    if (r.shape().rank != 1 || r.shape() != first) shape_error(Op::kStackRows, first, r.shape());
    data.insert(data.end(), r.value().raw().begin(), r.value().raw().end());
    n.parents.push_back(r.id());
  }
  n.value = Tensor::matrix(rows.size(), first.size(), std::move(data));
  return rows[0].graph().record(std::move(n));
}

Var repeat_rows(Var v, std::size_t count) {
  const Tensor& V = v.value();
  if (V.rank() != 1 || count == 0) shape_error(Op::kRepeatRows, V.shape(), "expects a vector");
  Tensor out(Shape::matrix(count, V.size()));
  for (std::size_t r = 0; r < count; ++r) std::copy(V.raw().begin(), V.raw().end(), &out.at(r, 0));
  Graph::Node n;
  n.op = Op::kRepeatRows;
  n.parents = {v.id()};
  n.value = std::move(out);
  return v.graph().record(std::move(n));
}

namespace {
template <class F>
Var rowwise(Op op, Var m, Var v, F f) {
  auto& g = same_graph(m, v);
  const Tensor& M = m.value();
  const Tensor& V = v.value();
  if (M.rank() != 2 || V.rank() != 1 || V.size() != M.cols()) shape_error(op, M.shape(), V.shape());
  Tensor out(M.shape());
  for (std::size_t r = 0; r < M.rows(); ++r)
    for (std::size_t c = 0; c < M.cols(); ++c) out.at(r, c) = f(M.at(r, c), V[c]);
  Graph::Node n;
  n.op = op;
  n.parents = {m.id(), v.id()};
  n.value = std::move(out);
  return g.record(std::move(n));
}
}  // namespace

Var add_row(Var m, Var v) { return rowwise(Op::kAddRow, m, v, [](double x, double y) { return x + y; }); }
Var mul_row(Var m, Var v) { return rowwise(Op::kMulRow, m, v, [](double x, double y) { return x * y; }); }

Var mean(Var a, int axis) {
  const Tensor& A = a.value();
  Graph::Node n;
  n.op = Op::kMean;
  n.parents = {a.id()};
  n.c0 = axis;
  if (A.rank() <= 1) {
    double s = 0.0;
    for (double x : A.values()) s += x;
    n.value = Tensor::scalar(s / static_cast<double>(A.size()));
  } else if (axis == 0) {
    Tensor out(Shape::vector(A.cols()));
    for (std::size_t r = 0; r < A.rows(); ++r)
      for (std::size_t c = 0; c < A.cols(); ++c) out[c] += A.at(r, c);
    for (auto& x : out.values()) x /= static_cast<double>(A.rows());
    n.value = std::move(out);
  } else if (axis == 1) {
    Tensor out(Shape::vector(A.rows()));
    for (std::size_t r = 0; r < A.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < A.cols(); ++c) s += A.at(r, c);
      out[r] = s / static_cast<double>(A.cols());
    }
    n.value = std::move(out);
  } else {
    shape_error(Op::kMean, A.shape(), "axis must be 0 or 1");
  }
  return a.graph().record(std::move(n));
}

Var sum(Var a) {
  double s = 0.0;
  for (double x : a.value().values()) s += x;
  Graph::Node n;
  n.op = Op::kSum;
  n.parents = {a.id()};
  n.value = Tensor::scalar(s);
  return a.graph().record(std::move(n));
}

Var sigmoid(Var a) { return elementwise_unary(Op::kSigmoid, a, stable_sigmoid); }
Var tanh(Var a) { return elementwise_unary(Op::kTanh, a, [](double x) { return std::tanh(x); }); }
Var relu(Var a) { return elementwise_unary(Op::kRelu, a, [](double x) { return x > 0.0 ? x : 0.0; }); }
Var softplus(Var a) { return elementwise_unary(Op::kSoftplus, a, stable_softplus); }
Var log(Var a) { return elementwise_unary(Op::kLog, a, [](double x) { return std::log(x); }); }

Var pow(Var a, double p) {
  return elementwise_unary(Op::kPow, a, [p](double x) { return std::pow(x, p); }, p);
}

Var clamp(Var a, double lo, double hi) {
  return elementwise_unary(Op::kClamp, a, [lo, hi](double x) { return std::clamp(x, lo, hi); }, lo, hi);
}

Var softmax(Var a, int axis) {
  const Tensor& A = a.value();
  Tensor out(A.shape());
  auto normalise = [&](std::size_t count, auto index) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < count; ++i) mx = std::max(mx, A[index(i)]);
    double s = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
      const double e = std::exp(A[index(i)] - mx);
      out[index(i)] = e;
      s += e;
    }
    for (std::size_t i = 0; i < count; ++i) out[index(i)] /= s;
  };
  if (A.rank() <= 1) {
    normalise(A.size(), [](std::size_t i) { return i; });
  } else if (axis == 1) {
    for (std::size_t r = 0; r < A.rows(); ++r)
      normalise(A.cols(), [&](std::size_t i) { return r * A.cols() + i; });
  } else if (axis == 0) {
    for (std::size_t c = 0; c < A.cols(); ++c)
      normalise(A.rows(), [&](std::size_t i) { return i * A.cols() + c; });
  } else {
    shape_error(Op::kSoftmax, A.shape(), "axis must be 0 or 1");
  }
  Graph::Node n;
  n.op = Op::kSoftmax;
  n.parents = {a.id()};
  n.value = std::move(out);
  n.c0 = axis;
  return a.graph().record(std::move(n));
}

Var gather(Var table, std::span<const std::size_t> indices) {
  const Tensor& T = table.value();
  if (T.rank() != 2) shape_error(Op::kGather, T.shape(), "expects a 2-D table");
  if (indices.empty()) shape_error(Op::kGather, T.shape(), "empty index list");
  Tensor out(Shape::matrix(indices.size(), T.cols()));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= T.rows())
      shape_error(Op::kGather, T.shape(), "index " + std::to_string(indices[i]) + " out of range");
    std::copy_n(&T.raw()[indices[i] * T.cols()], T.cols(), &out.at(i, 0));
  }
  Graph::Node n;
  n.op = Op::kGather;
  n.parents = {table.id()};
  n.value = std::move(out);
  n.index.assign(indices.begin(), indices.end());
  return table.graph().record(std::move(n));
}

Var gather_row(Var table, std::size_t index) {
  const Tensor& T = table.value();
  if (T.rank() != 2 || index >= T.rows())
    shape_error(Op::kGatherRow, T.shape(), "index " + std::to_string(index) + " out of range");
  Graph::Node n;
  n.op = Op::kGatherRow;
  n.parents = {table.id()};
  const auto off = static_cast<std::ptrdiff_t>(index * T.cols());
  n.value = Tensor::vector(std::vector<double>(T.raw().begin() + off,
                                               T.raw().begin() + off + static_cast<std::ptrdiff_t>(T.cols())));
  n.index = {index};
  return table.graph().record(std::move(n));
}

Var l2_norm(Var a) {
  double s = 0.0;
  for (double x : a.value().values()) s += x * x;
  Graph::Node n;
  n.op = Op::kL2Norm;
  n.parents = {a.id()};
  n.value = Tensor::scalar(std::sqrt(s));
  return a.graph().record(std::move(n));
}

Var distance(Var a, Var b) {
  auto& g = same_graph(a, b);
  if (a.shape() != b.shape()) shape_error(Op::kDistance, a.shape(), b.shape());
  double s = 0.0;
  for (std::size_t i = 0; i < a.value().size(); ++i) {
    const double d = a.value()[i] - b.value()[i];
    s += d * d;
  }
  Graph::Node n;
  n.op = Op::kDistance;
  n.parents = {a.id(), b.id()};
  n.value = Tensor::scalar(std::sqrt(s));
  return g.record(std::move(n));
}

Var dot(Var a, Var b) {
  auto& g = same_graph(a, b);
  if (a.shape() != b.shape()) shape_error(Op::kDot, a.shape(), b.shape());
  double s = 0.0;
  for (std::size_t i = 0; i < a.value().size(); ++i) s += a.value()[i] * b.value()[i];
  Graph::Node n;
  n.op = Op::kDot;
  n.parents = {a.id(), b.id()};
  n.value = Tensor::scalar(s);
  return g.record(std::move(n));
}

Var outer(Var a, Var b) {
  auto& g = same_graph(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 1 || B.rank() != 1) shape_error(Op::kOuter, A.shape(), B.shape());
  Tensor out(Shape::matrix(A.size(), B.size()));
  for (std::size_t i = 0; i < A.size(); ++i)
    for (std::size_t j = 0; j < B.size(); ++j) out.at(i, j) = A[i] * B[j];
  Graph::Node n;
  n.op = Op::kOuter;
  n.parents = {a.id(), b.id()};
  n.value = std::move(out);
  return g.record(std::move(n));
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

Gradients Graph::backward(Var root) const {
  if (&root.graph() != this) throw ShapeError("backward: root belongs to another graph");
  const Node& rn = nodes_[root.id()];
  if (rn.value.rank() != 0) throw ShapeError("backward: root must be a scalar, got " + rn.value.shape().str());

  std::vector<std::optional<Tensor>> grads(root.id() + 1);
  std::vector<char> live(root.id() + 1, 0);
  grads[root.id()].emplace(Tensor::scalar(1.0));
  live[root.id()] = 1;

  // Nodes that no trainable leaf feeds get a throwaway buffer, so their
  // subgraphs are never visited.
  Tensor scratch;
  auto grad_of = [&](std::uint32_t id) -> Tensor& {
    if (!nodes_[id].requires_grad) {
      scratch = Tensor(nodes_[id].value.shape());
      return scratch;
    }
    if (!live[id]) {
      grads[id].emplace(nodes_[id].value.shape());
      live[id] = 1;
    }
    return *grads[id];
  };

  for (std::int64_t idx = root.id(); idx >= 0; --idx) {
    const auto id = static_cast<std::uint32_t>(idx);
    if (!live[id]) continue;
    const Node& n = nodes_[id];
    if (n.op == Op::kLeaf) continue;
    const Tensor& G = *grads[id];
    const Tensor& Y = n.value;

    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kAdd:
      case Op::kSub: {
        const double sign_b = n.op == Op::kAdd ? 1.0 : -1.0;
        Tensor& ga = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < G.size(); ++i) accumulate_broadcast(ga, G, i, G[i]);
        Tensor& gb = grad_of(n.parents[1]);
        for (std::size_t i = 0; i < G.size(); ++i) accumulate_broadcast(gb, G, i, sign_b * G[i]);
        break;
      }
      case Op::kMul: {
        const Tensor& A = nodes_[n.parents[0]].value;
        const Tensor& B = nodes_[n.parents[1]].value;
        auto av = [&](std::size_t i) { return A.size() == 1 ? A[0] : A[i]; };
        auto bv = [&](std::size_t i) { return B.size() == 1 ? B[0] : B[i]; };
        {
          Tensor& ga = grad_of(n.parents[0]);
          for (std::size_t i = 0; i < G.size(); ++i) accumulate_broadcast(ga, G, i, G[i] * bv(i));
        }
        {
          Tensor& gb = grad_of(n.parents[1]);
          for (std::size_t i = 0; i < G.size(); ++i) accumulate_broadcast(gb, G, i, G[i] * av(i));
        }
        break;
      }
      case Op::kNeg: {
        Tensor& ga = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < G.size(); ++i) ga[i] -= G[i];
        break;
      }
      case Op::kScale: {
        Tensor& ga = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < G.size(); ++i) ga[i] += n.c0 * G[i];
        break;
      }
      case Op::kAddConst:
      case Op::kReshape: {
        Tensor& ga = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i];
        break;
      }
      case Op::kBroadcast: {
        Tensor& ga = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < G.size(); ++i) ga[0] += G[i];
        break;
      }
      case Op::kMatMul: {
        const Tensor& A = nodes_[n.parents[0]].value;
        const Tensor& B = nodes_[n.parents[1]].value;
        if (A.rank() == 2 && B.rank() == 2) {
          const std::size_t m = A.rows(), k = A.cols(), nn = B.cols();
          const double* g = G.raw().data();
          const double* a = A.raw().data();
          const double* b = B.raw().data();
          if (nodes_[n.parents[0]].requires_grad) {
            // dA = G B^T, accumulated row by row against B^T.
            std::vector<double> bt(nn * k);
            for (std::size_t p = 0; p < k; ++p)
              for (std::size_t j = 0; j < nn; ++j) bt[j * k + p] = b[p * nn + j];
            double* ga = grad_of(n.parents[0]).raw().data();
            for (std::size_t i = 0; i < m; ++i) {
              double* gai = ga + i * k;
              for (std::size_t j = 0; j < nn; ++j) {
                const double gij = g[i * nn + j];
                if (gij == 0.0) continue;
                const double* btj = bt.data() + j * k;
                for (std::size_t p = 0; p < k; ++p) gai[p] += gij * btj[p];
              }
            }
          }
          if (nodes_[n.parents[1]].requires_grad) {
            double* gb = grad_of(n.parents[1]).raw().data();
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                const double aip = a[i * k + p];
                if (aip == 0.0) continue;
                double* gbp = gb + p * nn;
                const double* gi = g + i * nn;
                for (std::size_t j = 0; j < nn; ++j) gbp[j] += aip * gi[j];
              }
          }
        } else if (A.rank() == 2) {
          const std::size_t m = A.rows(), k = A.cols();
          Tensor& ga = grad_of(n.parents[0]);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) ga.at(i, p) += G[i] * B[p];
          Tensor& gb = grad_of(n.parents[1]);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) gb[p] += A.at(i, p) * G[i];
        } else {
          const std::size_t k = B.rows(), nn = B.cols();
          Tensor& ga = grad_of(n.parents[0]);
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            for (std::size_t j = 0; j < nn; ++j) s += B.at(p, j) * G[j];
            ga[p] += s;
          }
          Tensor& gb = grad_of(n.parents[1]);
          for (std::size_t p = 0; p < k; ++p) {
            const double ap = A[p];
            if (ap == 0.0) continue;
            for (std::size_t j = 0; j < nn; ++j) gb.at(p, j) += ap * G[j];
          }
        }
        break;
      }
      case Op::kTranspose: {
        Tensor& ga = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < G.rows(); ++i)
          for (std::size_t j = 0; j < G.cols(); ++j) ga.at(j, i) += G.at(i, j);
        break;
      }
      case Op::kConcat: {
        const int axis = static_cast<int>(n.c0);
        if (Y.rank() == 2 && axis == 1) {
          std::size_t offset = 0;
          for (auto p : n.parents) {
            Tensor& gp = grad_of(p);
            for (std::size_t r = 0; r < gp.rows(); ++r)
              for (std::size_t c = 0; c < gp.cols(); ++c) gp.at(r, c) += G.at(r, offset + c);
            offset += gp.cols();
          }
        } else {
          std::size_t offset = 0;
          for (auto p : n.parents) {
            Tensor& gp = grad_of(p);
            for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += G[offset + i];
            offset += gp.size();
          }
        }
        break;
      }
      case Op::kSlice: {
        Tensor& ga = grad_of(n.parents[0]);
        const auto begin = static_cast<std::size_t>(n.c0);
        for (std::size_t i = 0; i < G.size(); ++i) ga[begin + i] += G[i];
        break;
      }
      case Op::kRow:
      case Op::kRowRange: {
        Tensor& ga = grad_of(n.parents[0]);
        const auto begin = static_cast<std::size_t>(n.c0) * ga.cols();
        for (std::size_t i = 0; i < G.size(); ++i) ga[begin + i] += G[i];
        break;
      }
      case Op::kStackRows: {
        const std::size_t width = Y.cols();
        for (std::size_t r = 0; r < n.parents.size(); ++r) {
          Tensor& gp = grad_of(n.parents[r]);
          for (std::size_t c = 0; c < width; ++c) gp[c] += G.at(r, c);
        }
        break;
      }
      case Op::kRepeatRows: {
        Tensor& ga = grad_of(n.parents[0]);
        for (std::size_t r = 0; r < G.rows(); ++r)
          for (std::size_t c = 0; c < G.cols(); ++c) ga[c] += G.at(r, c);
        break;
      }
      case Op::kAddRow: {
        Tensor& gm = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < G.size(); ++i) gm[i] += G[i];
        Tensor& gv = grad_of(n.parents[1]);
        for (std::size_t r = 0; r < G.rows(); ++r)
          for (std::size_t c = 0; c < G.cols(); ++c) gv[c] += G.at(r, c);
        break;
      }
      case Op::kMulRow: {
        const Tensor& M = nodes_[n.parents[0]].value;
        const Tensor& V = nodes_[n.parents[1]].value;
        Tensor& gm = grad_of(n.parents[0]);
        for (std::size_t r = 0; r < G.rows(); ++r)
          for (std::size_t c = 0; c < G.cols(); ++c) gm.at(r, c) += G.at(r, c) * V[c];
        Tensor& gv = grad_of(n.parents[1]);
        for (std::size_t r = 0; r < G.rows(); ++r)
          for (std::size_t c = 0; c < G.cols(); ++c) gv[c] += G.at(r, c) * M.at(r, c);
        break;
      }
      case Op::kMean: {
        Tensor& ga = grad_of(n.parents[0]);
        if (ga.rank() <= 1) {
          const double share = G[0] / static_cast<double>(ga.size());
          for (auto& x : ga.values()) x += share;
        } else if (static_cast<int>(n.c0) == 0) {
          const double inv = 1.0 / static_cast<double>(ga.rows());
          for (std::size_t r = 0; r < ga.rows(); ++r)
            for (std::size_t c = 0; c < ga.cols(); ++c) ga.at(r, c) += G[c] * inv;
        } else {
          const double inv = 1.0 / static_cast<double>(ga.cols());
          for (std::size_t r = 0; r < ga.rows(); ++r)
            for (std::size_t c = 0; c < ga.cols(); ++c) ga.at(r, c) += G[r] * inv;
        }
        break;
      }
      case Op::kSum: {
        Tensor& ga = grad_of(n.parents[0]);
        for (auto& x : ga.values()) x += G[0];
        break;
      }
      case Op::kSigmoid: {
        Tensor& ga = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i] * Y[i] * (1.0 - Y[i]);
        break;
      }
      case Op::kTanh: {
        Tensor& ga = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i] * (1.0 - Y[i] * Y[i]);
        break;
      }
      case Op::kRelu: {
        const Tensor& X = nodes_[n.parents[0]].value;
        Tensor& ga = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < G.size(); ++i)
          if (X[i] > 0.0) ga[i] += G[i];
        break;
      }
      case Op::kSoftplus: {
        const Tensor& X = nodes_[n.parents[0]].value;
        Tensor& ga = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i] * stable_sigmoid(X[i]);
        break;
      }
      case Op::kLog: {
        const Tensor& X = nodes_[n.parents[0]].value;
        Tensor& ga = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i] / X[i];
        break;
      }
      case Op::kPow: {
        const Tensor& X = nodes_[n.parents[0]].value;
        Tensor& ga = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i] * n.c0 * std::pow(X[i], n.c0 - 1.0);
        break;
      }
      case Op::kClamp: {
        const Tensor& X = nodes_[n.parents[0]].value;
        Tensor& ga = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < G.size(); ++i)
          if (X[i] >= n.c0 && X[i] <= n.c1) ga[i] += G[i];
        break;
      }
      case Op::kSoftmax: {
        Tensor& ga = grad_of(n.parents[0]);
        auto backprop = [&](std::size_t count, auto index) {
          double s = 0.0;
          for (std::size_t i = 0; i < count; ++i) s += G[index(i)] * Y[index(i)];
          for (std::size_t i = 0; i < count; ++i) ga[index(i)] += Y[index(i)] * (G[index(i)] - s);
        };
        const int axis = static_cast<int>(n.c0);
        if (Y.rank() <= 1) {
          backprop(Y.size(), [](std::size_t i) { return i; });
        } else if (axis == 1) {
          for (std::size_t r = 0; r < Y.rows(); ++r)
            backprop(Y.cols(), [&](std::size_t i) { return r * Y.cols() + i; });
        } else {
          for (std::size_t c = 0; c < Y.cols(); ++c)
            backprop(Y.rows(), [&](std::size_t i) { return i * Y.cols() + c; });
        }
        break;
      }
      case Op::kGather: {
        Tensor& gt = grad_of(n.parents[0]);
        const std::size_t width = gt.cols();
        for (std::size_t i = 0; i < n.index.size(); ++i) {
          double* dst = &gt.raw()[n.index[i] * width];
          for (std::size_t c = 0; c < width; ++c) dst[c] += G.at(i, c);
        }
        break;
      }
      case Op::kGatherRow: {
        Tensor& gt = grad_of(n.parents[0]);
        double* dst = &gt.raw()[n.index[0] * gt.cols()];
        for (std::size_t c = 0; c < G.size(); ++c) dst[c] += G[c];
        break;
      }
      case Op::kL2Norm: {
        const Tensor& X = nodes_[n.parents[0]].value;
        Tensor& ga = grad_of(n.parents[0]);
        const double norm = Y[0];
        if (norm > 0.0)
          for (std::size_t i = 0; i < X.size(); ++i) ga[i] += G[0] * X[i] / norm;
        break;
      }
      case Op::kDistance: {
        const Tensor& A = nodes_[n.parents[0]].value;
        const Tensor& B = nodes_[n.parents[1]].value;
        const double d = Y[0];
        Tensor& ga = grad_of(n.parents[0]);
        Tensor& gb = grad_of(n.parents[1]);
        if (d > 0.0) {
          for (std::size_t i = 0; i < A.size(); ++i) {
            const double v = G[0] * (A[i] - B[i]) / d;
            ga[i] += v;
            gb[i] -= v;
          }
        }
        break;
      }
      case Op::kDot: {
        const Tensor& A = nodes_[n.parents[0]].value;
        const Tensor& B = nodes_[n.parents[1]].value;
        {
          Tensor& ga = grad_of(n.parents[0]);
          for (std::size_t i = 0; i < A.size(); ++i) ga[i] += G[0] * B[i];
        }
        {
          Tensor& gb = grad_of(n.parents[1]);
          for (std::size_t i = 0; i < B.size(); ++i) gb[i] += G[0] * A[i];
        }
        break;
      }
      case Op::kOuter: {
        const Tensor& A = nodes_[n.parents[0]].value;
        const Tensor& B = nodes_[n.parents[1]].value;
        {
          Tensor& ga = grad_of(n.parents[0]);
          for (std::size_t i = 0; i < A.size(); ++i)
            for (std::size_t j = 0; j < B.size(); ++j) ga[i] += G.at(i, j) * B[j];
        }
        {
          Tensor& gb = grad_of(n.parents[1]);
          for (std::size_t i = 0; i < A.size(); ++i)
            for (std::size_t j = 0; j < B.size(); ++j) gb[j] += G.at(i, j) * A[i];
        }
        break;
      }
    }
  }

  Gradients out;
  for (const auto& [param, leaf] : param_leaf_) {
    if (!param->trainable) continue;
    if (leaf <= root.id() && live[leaf]) {
      out.set(param, std::move(*grads[leaf]));
    } else {
      out.set(param, Tensor(param->value.shape()));
    }
  }
  return out;
}

}  // namespace clsr::ad
