#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clsr/data.hpp"
#include "clsr/graph.hpp"
#include "clsr/nn.hpp"
#include "clsr/param.hpp"

namespace clsr::model {

using ad::Graph;
using ad::Var;

enum class ContrastiveKind { kBpr, kTriplet };

struct ClsrConfig {
  std::size_t dim = 40;
  std::size_t proxy_k = 3;          // recent-window size of the short-term proxy
  std::size_t proxy_threshold = 5;  // proxies exist only for prefixes longer than this
  double beta = 0.1;
  double lambda = 1e-6;
  double margin = 1.0;
  ContrastiveKind contrastive = ContrastiveKind::kTriplet;
  nn::CellKind rnn_cell = nn::CellKind::kTimeLstm;
  nn::AttentionKind attention = nn::AttentionKind::kMlp;
  bool evolution = true;
  bool fusion_gru = true;
  std::size_t max_seq_len = 50;
  std::vector<std::size_t> mlp_hidden{100, 64};

  // Throws ConfigError on the first violated constraint.
  void validate() const;
};

// Kuaishou-style long-sequence defaults: k=5, l_t=10, max length 250.
ClsrConfig long_sequence_defaults();

const char* to_string(ContrastiveKind k);
const char* to_string(nn::CellKind k);
const char* to_string(nn::AttentionKind k);
ContrastiveKind parse_contrastive(const std::string& s);
nn::CellKind parse_cell(const std::string& s);
nn::AttentionKind parse_attention(const std::string& s);

struct Queries {
  Var long_query;
  Var short_query;
};

struct Proxies {
  Var long_proxy;
  Var short_proxy;
};

// Graph handles for one (user, prefix) pair.
struct InterestBundle {
  Var items;         // (t x d) item embeddings of the prefix
  Var long_interest;
  Var short_interest;
  Var long_weights;  // attention weights of the long encoder
  Var short_weights;
  Var history_state; // fusion GRU final state; invalid when that GRU is disabled
  std::optional<Proxies> proxies;
};

struct Fusion {
  Var alpha;  // (n)
  Var fused;  // (n x d)
};

// Contrastive pair losses on three vectors: anchor, positive, negative.
Var bpr_pair_loss(Var anchor, Var pos, Var neg);
Var triplet_pair_loss(Var anchor, Var pos, Var neg, double margin);
Var contrastive_loss(Var u_long, Var u_short, Var p_long, Var p_short, ContrastiveKind kind,
                     double margin);

// Mean binary cross-entropy over one candidate set; probabilities are
// clamped to [1e-12, 1 - 1e-12] before the log.
Var rec_loss(Var probs, std::span<const double> labels);

inline constexpr double kProbClamp = 1e-12;

struct LossTerms {
  Var total;
  double rec = 0.0;          // summed over the batch
  double contrastive = 0.0;  // summed over the batch, before beta
  double l2 = 0.0;           // ||theta||^2, before lambda
  std::size_t contrastive_examples = 0;
};

struct ScoreOptions {
  std::optional<double> fixed_alpha;  // overrides the learned fusion weight
};

struct ScoreResult {
  std::vector<double> probs;   // one per candidate, positive first
  std::vector<double> alphas;  // fusion weight used per candidate
  std::vector<double> long_interest;
  std::vector<double> short_interest;
  std::optional<std::pair<std::vector<double>, std::vector<double>>> proxies;
};

class ClsrModel {
 public:
  ClsrModel(const ClsrConfig& config, std::size_t n_users, std::size_t n_items, std::uint64_t seed);

  ClsrModel(const ClsrModel&) = delete;
  ClsrModel& operator=(const ClsrModel&) = delete;

  const ClsrConfig& config() const { return config_; }
  std::size_t n_users() const { return n_users_; }
  std::size_t n_items() const { return n_items_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  Queries make_queries(Graph& g, std::size_t user, Var items) const;
  Var encode_long(Graph& g, Var long_query, Var items, Var* weights = nullptr) const;
  Var encode_short(Graph& g, Var short_query, Var items, std::span<const nn::TimeFeatures> times,
                   Var* weights = nullptr) const;
  std::optional<Proxies> compute_proxies(Var items) const;

  // Encoders, proxies and the fusion GRU state for one prefix.
  InterestBundle interests(Graph& g, std::size_t user, std::span<const std::size_t> prefix,
                           std::span<const nn::TimeFeatures> times) const;

  Fusion fuse(Graph& g, const InterestBundle& b, std::span<const std::size_t> targets,
              std::optional<double> fixed_alpha = std::nullopt) const;

  // Interaction probability for each row of `fused` against its target.
  Var predict(Graph& g, Var fused, std::span<const std::size_t> targets, nn::Mode mode) const;

  // Sum over the batch of (L_rec + beta * L_con) plus lambda * ||theta||^2.
  LossTerms joint_loss(Graph& g, std::span<const data::Example> batch, nn::Mode mode) const;

  // Forward-only scoring of one example with eval-mode batch norm. Pure over
  // the parameters, so callers may run it concurrently.
  ScoreResult score(const data::Example& ex, const ScoreOptions& opts = {}) const;

  const nn::EmbeddingTable& item_embeddings() const { return items_; }
  const nn::EmbeddingTable& user_embeddings() const { return users_; }
  const nn::GruCell& query_gru() const { return query_gru_; }
  const nn::GruCell& fusion_gru() const { return fusion_gru_; }
  const nn::RecurrentCell& short_rnn() const { return *short_rnn_; }
  const nn::AttentionPooling& long_attention() const { return long_att_; }
  const nn::AttentionPooling& short_attention() const { return short_att_; }
  const nn::Mlp& fusion_mlp() const { return fusion_mlp_; }
  const nn::Mlp& predict_mlp() const { return predict_mlp_; }

 private:
  void check_item(std::size_t item) const;

  ClsrConfig config_;
  std::size_t n_users_;
  std::size_t n_items_;
  ParamStore params_;
  nn::EmbeddingTable items_;
  nn::EmbeddingTable users_;
  nn::EmbeddingTable static_short_queries_;
  nn::GruCell query_gru_;
  std::unique_ptr<nn::RecurrentCell> short_rnn_;
  nn::AttentionPooling long_att_;
  nn::AttentionPooling short_att_;
  nn::GruCell fusion_gru_;
  nn::Mlp fusion_mlp_;
  nn::Mlp predict_mlp_;
};

}  // namespace clsr::model
