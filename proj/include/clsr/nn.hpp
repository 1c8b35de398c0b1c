#pragma once

#include <cstddef>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "clsr/graph.hpp"
#include "clsr/param.hpp"

namespace clsr::nn {

using ad::Graph;
using ad::Var;

enum class Mode { kTrain, kEval };

enum class Activation { kRelu, kTanh, kSigmoid, kIdentity };

// Affine map y = x W + b with W stored (in x out). Works on a single
// vector or on a batch of rows.
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
         std::mt19937_64& rng);

  Var forward(Graph& g, Var x) const;

  std::size_t in() const { return in_; }
  std::size_t out() const { return out_; }
  Parameter& weight() const { return *weight_; }
  Parameter& bias() const { return *bias_; }

 private:
  Parameter* weight_ = nullptr;
  Parameter* bias_ = nullptr;
  std::size_t in_ = 0;
  std::size_t out_ = 0;
};

// Per-feature batch normalisation. Train mode normalises with batch
// statistics (biased variance) and folds them into the running estimates
// with the unbiased variance; eval mode uses the running estimates only.
class BatchNorm {
 public:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.99;

  BatchNorm() = default;
  BatchNorm(ParamStore& store, const std::string& name, std::size_t width);

  Var forward(Graph& g, Var x, Mode mode) const;

  Parameter& running_mean() const { return *running_mean_; }
  Parameter& running_var() const { return *running_var_; }

 private:
  Parameter* gamma_ = nullptr;
  Parameter* beta_ = nullptr;
  Parameter* running_mean_ = nullptr;
  Parameter* running_var_ = nullptr;
};

struct MlpSpec {
  std::size_t input = 0;
  std::vector<std::size_t> hidden;
  std::size_t output = 1;
  Activation activation = Activation::kRelu;
  bool batch_norm = false;
};

// Hidden layers are affine -> batch-norm (optional) -> activation; the
// final layer is affine only.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore& store, const std::string& name, const MlpSpec& spec, std::mt19937_64& rng);

  Var forward(Graph& g, Var x, Mode mode) const;

  const MlpSpec& spec() const { return spec_; }
  const std::vector<Linear>& layers() const { return layers_; }

 private:
  MlpSpec spec_;
  std::vector<Linear> layers_;
  std::vector<BatchNorm> norms_;
};

class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(ParamStore& store, const std::string& name, std::size_t rows, std::size_t dim,
                 std::mt19937_64& rng);

  Var lookup(Graph& g, std::span<const std::size_t> ids) const;
  Var lookup_one(Graph& g, std::size_t id) const;

  std::size_t rows() const { return rows_; }
  std::size_t dim() const { return dim_; }
  Parameter& table() const { return *table_; }

 private:
  Parameter* table_ = nullptr;
  std::size_t rows_ = 0;
  std::size_t dim_ = 0;
};

Var apply_activation(Var x, Activation a);

// Log-scaled time-interval features attached to each sequence step.
struct TimeFeatures {
  double since_prev = 0.0;
  double until_target = 0.0;
};

enum class CellKind { kGru, kLstm, kTimeLstm };

struct RnnCellSpec {
  CellKind kind = CellKind::kTimeLstm;
  std::size_t input = 0;
  std::size_t hidden = 0;
};

// Sequence encoder interface shared by the three recurrent cells. `run`
// returns the (t x hidden) matrix of per-step outputs from a zero state.
class RecurrentCell {
 public:
  virtual ~RecurrentCell() = default;
  virtual Var run(Graph& g, Var inputs, std::span<const TimeFeatures> times) const = 0;
  virtual CellKind kind() const = 0;
  virtual std::size_t hidden() const = 0;
};

// GRU with z = s(W_z[x,h] + b_z), r = s(W_r[x,h] + b_r),
// h~ = tanh(W_h[x, r*h] + b_h), h' = (1 - z) * h + z * h~.
// Each W_*[x, .] is stored split into its input and recurrent blocks.
class GruCell : public RecurrentCell {
 public:
  GruCell() = default;
  GruCell(ParamStore& store, const std::string& name, std::size_t input, std::size_t hidden,
          std::mt19937_64& rng);

  Var step(Graph& g, Var x, Var h) const;
  Var run(Graph& g, Var inputs, std::span<const TimeFeatures> times = {}) const override;
  // Final hidden state after consuming every row of `inputs`.
  Var run_final(Graph& g, Var inputs) const;

  CellKind kind() const override { return CellKind::kGru; }
  std::size_t hidden() const override { return hidden_; }

 private:
  Var step_projected(Graph& g, Var x_proj, Var h) const;

  Parameter* w_input_ = nullptr;   // input x (z | r | h~)
  Parameter* w_gates_ = nullptr;   // hidden x (z | r)
  Parameter* w_cand_ = nullptr;    // hidden x hidden, applied to r * h
  Parameter* bias_ = nullptr;      // z | r | h~
  std::size_t input_ = 0;
  std::size_t hidden_ = 0;
};

struct LstmState {
  Var h;
  Var c;
};

// Standard LSTM: i, f, o = s(W_*[x,h] + b_*), g = tanh(W_g[x,h] + b_g),
// c' = f * c + i * g, h' = o * tanh(c').
class LstmCell : public RecurrentCell {
 public:
  LstmCell() = default;
  LstmCell(ParamStore& store, const std::string& name, std::size_t input, std::size_t hidden,
           std::mt19937_64& rng);

  LstmState step(Graph& g, Var x, LstmState state) const;
  Var run(Graph& g, Var inputs, std::span<const TimeFeatures> times = {}) const override;

  CellKind kind() const override { return CellKind::kLstm; }
  std::size_t hidden() const override { return hidden_; }

  Parameter& bias() const { return *bias_; }

 protected:
  LstmState step_projected(Graph& g, Var x_proj, LstmState state, Var t1, Var t2) const;

  Parameter* w_input_ = nullptr;  // input x (i | f | o | g)
  Parameter* w_hidden_ = nullptr; // hidden x (i | f | o | g)
  Parameter* bias_ = nullptr;
  std::size_t input_ = 0;
  std::size_t hidden_ = 0;
};

// Time-aware LSTM with two extra time gates:
//   T1 = s(W_t1 x + s(V_t1 * dt1) + b_t1)   dt1 = since_prev
//   T2 = s(W_t2 x + s(V_t2 * dt2) + b_t2)   dt2 = until_target
//   c' = f * T2 * c + i * T1 * g,  h' = o * tanh(c')
// T1 scales what enters the cell, T2 scales what the cell carries over.
// With zero time features and zero time-gate parameters both gates equal
// s(s(0)) = s(0.5), not 0.5.
class TimeLstmCell : public LstmCell {
 public:
  TimeLstmCell() = default;
  TimeLstmCell(ParamStore& store, const std::string& name, std::size_t input, std::size_t hidden,
               std::mt19937_64& rng);

  LstmState step(Graph& g, Var x, const TimeFeatures& dt, LstmState state) const;
  Var run(Graph& g, Var inputs, std::span<const TimeFeatures> times) const override;

  CellKind kind() const override { return CellKind::kTimeLstm; }

  Parameter& time_weight() const { return *w_time_; }
  Parameter& time_scale_prev() const { return *v_prev_; }
  Parameter& time_scale_target() const { return *v_target_; }
  Parameter& time_bias() const { return *b_time_; }

 private:
  std::pair<Var, Var> time_gates(Graph& g, Var t_proj, const TimeFeatures& dt) const;

  Parameter* w_time_ = nullptr;   // input x (T1 | T2)
  Parameter* v_prev_ = nullptr;   // hidden
  Parameter* v_target_ = nullptr; // hidden
  Parameter* b_time_ = nullptr;   // T1 | T2
};

std::unique_ptr<RecurrentCell> make_cell(const RnnCellSpec& spec, ParamStore& store,
                                         const std::string& name, std::mt19937_64& rng);

enum class AttentionKind { kMlp, kInnerProduct };

// Attention pooling over a sequence. Keys are projected, v_j = W k_j, then
// scored against the query either by an MLP over
// [v_j, q, v_j - q, v_j * q] or by <v_j, q>; the softmax weights pool the
// value rows.
class AttentionPooling {
 public:
  struct Result {
    Var weights;  // (t)
    Var pooled;   // (dim)
  };

  AttentionPooling() = default;
  AttentionPooling(ParamStore& store, const std::string& name, AttentionKind kind, std::size_t dim,
                   std::mt19937_64& rng);

  Var scores(Graph& g, Var keys, Var query) const;
  Result pool(Graph& g, Var keys, Var values, Var query) const;

  AttentionKind kind() const { return kind_; }
  Parameter& transform() const { return *transform_; }
  const Mlp& scorer() const { return scorer_; }

 private:
  AttentionKind kind_ = AttentionKind::kMlp;
  Parameter* transform_ = nullptr;
  Mlp scorer_;
};

}  // namespace clsr::nn
