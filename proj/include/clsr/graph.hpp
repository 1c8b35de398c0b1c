#pragma once

// Define-by-run reverse-mode automatic differentiation over rank <= 2
// tensors. Every op evaluates eagerly when it is recorded, so node values
// are always available; `Graph::backward` walks the tape in reverse
// creation order, which is a reverse topological order of the DAG.
//
// Broadcasting is limited to rank-0 scalars against tensors. Row-wise bias
// and scale are explicit ops (`add_row`, `mul_row`).

#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "clsr/param.hpp"
#include "clsr/tensor.hpp"

namespace clsr::ad {

class Graph;

enum class Op : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kNeg,
  kScale,
  kAddConst,
  kBroadcast,
  kMatMul,
  kTranspose,
  kReshape,
  kConcat,
  kSlice,
  kRow,
  kRowRange,
  kStackRows,
  kRepeatRows,
  kAddRow,
  kMulRow,
  kMean,
  kSum,
  kSigmoid,
  kTanh,
  kRelu,
  kSoftplus,
  kLog,
  kPow,
  kSoftmax,
  kGather,
  kGatherRow,
  kL2Norm,
  kDistance,
  kDot,
  kOuter,
  kClamp,
};

const char* op_name(Op op);

// Handle to a node of a graph. Cheap to copy.
class Var {
 public:
  Var() = default;
  Var(Graph* g, std::uint32_t id) : graph_(g), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Graph* graph_ = nullptr;
  std::uint32_t id_ = 0;
};

// Gradient of the root with respect to every trainable parameter leaf.
class Gradients {
 public:
  const Tensor* find(const Parameter& p) const;
  const Tensor& at(const Parameter& p) const;
  std::size_t size() const { return grads_.size(); }

  void set(const Parameter* p, Tensor t) { grads_[p] = std::move(t); }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }

 private:
  std::unordered_map<const Parameter*, Tensor> grads_;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor t);
  // Leaf bound to a parameter; the same parameter always maps to one leaf.
  Var param(Parameter& p);

  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  std::size_t size() const { return nodes_.size(); }

  // Requires a rank-0 root. Trainable leaves the root does not reach get
  // exact zero gradients; non-trainable leaves are omitted.
  Gradients backward(Var root) const;

  // Internal: record an evaluated node.
  struct Node {
    Op op = Op::kLeaf;
    std::vector<std::uint32_t> parents;
    Tensor value;
    double c0 = 0.0;
    double c1 = 0.0;
    std::vector<std::size_t> index;
    Parameter* param = nullptr;
    bool requires_grad = false;  // set by record()
  };
  Var record(Node node);
  const Node& node(std::uint32_t id) const { return nodes_[id]; }

 private:
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::uint32_t> param_leaf_;
};

// Elementwise arithmetic (rank-0 operands broadcast).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double c);
Var add_const(Var a, double c);
Var broadcast(Var scalar, Shape shape);

// (m x k)(k x n), (m x k)(k) and (k)(k x n) products.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, Shape shape);

// axis 0: stack 1-D vectors end to end or 2-D matrices by rows;
// axis 1: join 2-D matrices side by side.
Var concat(std::span<const Var> parts, int axis = 0);
Var slice(Var a, std::size_t begin, std::size_t length);
Var row(Var a, std::size_t r);
Var row_range(Var a, std::size_t begin, std::size_t count);
Var stack_rows(std::span<const Var> rows);
Var repeat_rows(Var v, std::size_t n);
Var add_row(Var m, Var v);
Var mul_row(Var m, Var v);

// Reductions. For 2-D input axis 0 averages over rows, axis 1 over columns.
Var mean(Var a, int axis = 0);
Var sum(Var a);

Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);
Var softplus(Var a);
Var log(Var a);
Var pow(Var a, double p);
Var clamp(Var a, double lo, double hi);
// 1-D: whole vector. 2-D: axis 1 normalises each row, axis 0 each column.
Var softmax(Var a, int axis = 0);

// Rows of a 2-D table; the gradient scatter-adds into touched rows.
Var gather(Var table, std::span<const std::size_t> indices);
Var gather_row(Var table, std::size_t index);

Var l2_norm(Var a);
Var distance(Var a, Var b);
Var dot(Var a, Var b);
Var outer(Var a, Var b);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator-(Var a) { return neg(a); }

}  // namespace clsr::ad
