#include "clsr/model.hpp"

#include <cmath>

#include "clsr/errors.hpp"

namespace clsr::model {

void ClsrConfig::validate() const {
  if (dim == 0) throw ConfigError("d must be positive");
  if (proxy_k < 1) throw ConfigError("k must be >= 1");
  if (proxy_threshold < proxy_k) throw ConfigError("l_t must be >= k");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be >= 0");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be >= 0");
  if (!(margin > 0.0) || !std::isfinite(margin)) throw ConfigError("margin must be > 0");
  if (max_seq_len == 0) throw ConfigError("max_seq_len must be >= 1");
  if (mlp_hidden.empty()) throw ConfigError("mlp_hidden needs at least one layer");
  for (auto w : mlp_hidden)
    if (w == 0) throw ConfigError("mlp_hidden widths must be positive");
}

ClsrConfig long_sequence_defaults() {
  ClsrConfig c;
  c.proxy_k = 5;
  c.proxy_threshold = 10;
  c.max_seq_len = 250;
  c.contrastive = ContrastiveKind::kBpr;
  return c;
}

const char* to_string(ContrastiveKind k) { return k == ContrastiveKind::kBpr ? "bpr" : "triplet"; }

const char* to_string(nn::CellKind k) {
  switch (k) {
    case nn::CellKind::kGru: return "gru";
    case nn::CellKind::kLstm: return "lstm";
    case nn::CellKind::kTimeLstm: return "time_lstm";
  }
  return "?";
}

const char* to_string(nn::AttentionKind k) { return k == nn::AttentionKind::kMlp ? "mlp" : "inner_product"; }

ContrastiveKind parse_contrastive(const std::string& s) {
  if (s == "bpr") return ContrastiveKind::kBpr;
  if (s == "triplet") return ContrastiveKind::kTriplet;
  throw ConfigError("contrastive must be bpr or triplet, got '" + s + "'");
}

nn::CellKind parse_cell(const std::string& s) {
  if (s == "gru") return nn::CellKind::kGru;
  if (s == "lstm") return nn::CellKind::kLstm;
  if (s == "time_lstm") return nn::CellKind::kTimeLstm;
  throw ConfigError("rnn_cell must be gru, lstm or time_lstm, got '" + s + "'");
}

nn::AttentionKind parse_attention(const std::string& s) {
  if (s == "mlp") return nn::AttentionKind::kMlp;
  if (s == "inner_product") return nn::AttentionKind::kInnerProduct;
  throw ConfigError("attention must be mlp or inner_product, got '" + s + "'");
}

// ---------------------------------------------------------------------------

Var bpr_pair_loss(Var anchor, Var pos, Var neg) {
  return ad::softplus(ad::sub(ad::dot(anchor, neg), ad::dot(anchor, pos)));
}

Var triplet_pair_loss(Var anchor, Var pos, Var neg, double margin) {
  if (!(margin > 0.0)) throw ConfigError("triplet margin must be > 0");
  return ad::relu(ad::add_const(ad::sub(ad::distance(anchor, pos), ad::distance(anchor, neg)), margin));
}

Var contrastive_loss(Var u_long, Var u_short, Var p_long, Var p_short, ContrastiveKind kind,
                     double margin) {
  auto f = [&](Var a, Var p, Var q) {
    return kind == ContrastiveKind::kBpr ? bpr_pair_loss(a, p, q) : triplet_pair_loss(a, p, q, margin);
  };
  return f(u_long, p_long, p_short) + f(p_long, u_long, u_short) + f(u_short, p_short, p_long) +
         f(p_short, u_short, u_long);
}

Var rec_loss(Var probs, std::span<const double> labels) {
  const auto& s = probs.shape();
  if (s.rank != 1 || s.size() == 0) throw ShapeError("rec_loss: expects a nonempty probability vector");
  if (labels.size() != s.size())
    throw ShapeError("rec_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(s.size()) +
                     " candidates");
  auto& g = probs.graph();
  Var p = ad::clamp(probs, kProbClamp, 1.0 - kProbClamp);
  Var y = g.constant(Tensor::vector(std::vector<double>(labels.begin(), labels.end())));
  Var not_y = ad::add_const(ad::neg(y), 1.0);
  Var ll = ad::add(ad::mul(y, ad::log(p)), ad::mul(not_y, ad::log(ad::add_const(ad::neg(p), 1.0))));
  return ad::scale(ad::sum(ll), -1.0 / static_cast<double>(s.size()));
}

// ---------------------------------------------------------------------------

ClsrModel::ClsrModel(const ClsrConfig& config, std::size_t n_users, std::size_t n_items, std::uint64_t seed)
    : config_(config), n_users_(n_users), n_items_(n_items) {
  config_.validate();
  if (n_users == 0 || n_items == 0) throw DataError("model needs at least one user and one item");
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.dim;

  items_ = nn::EmbeddingTable(params_, "item_emb", n_items, d, rng);
  users_ = nn::EmbeddingTable(params_, "user_emb", n_users, d, rng);
  if (config_.evolution) {
    query_gru_ = nn::GruCell(params_, "query_gru", d, d, rng);
  } else {
    static_short_queries_ = nn::EmbeddingTable(params_, "user_short_query", n_users, d, rng);
  }
  short_rnn_ = nn::make_cell({config_.rnn_cell, d, d}, params_, "short_rnn", rng);
  long_att_ = nn::AttentionPooling(params_, "long_att", config_.attention, d, rng);
  short_att_ = nn::AttentionPooling(params_, "short_att", config_.attention, d, rng);
  if (config_.fusion_gru) fusion_gru_ = nn::GruCell(params_, "fusion_gru", d, d, rng);

  nn::MlpSpec fusion;
  fusion.input = (config_.fusion_gru ? 4 : 3) * d;
  fusion.hidden = {d};
  fusion.output = 1;
  fusion_mlp_ = nn::Mlp(params_, "fusion_mlp", fusion, rng);

  nn::MlpSpec predict;
  predict.input = 2 * d;
  predict.hidden = config_.mlp_hidden;
  predict.output = 1;
  predict.batch_norm = true;
  predict_mlp_ = nn::Mlp(params_, "predict_mlp", predict, rng);
}

void ClsrModel::check_item(std::size_t item) const {
  if (item >= n_items_) throw DataError("unknown item index " + std::to_string(item));
}

Queries ClsrModel::make_queries(Graph& g, std::size_t user, Var items) const {
  if (user >= n_users_) throw DataError("unknown user index " + std::to_string(user));
  if (items.shape().rank != 2 || items.shape().rows() == 0) throw DataError("make_queries: empty prefix");
  Queries q;
  q.long_query = users_.lookup_one(g, user);
  q.short_query = config_.evolution ? query_gru_.run_final(g, items) : static_short_queries_.lookup_one(g, user);
  return q;
}

Var ClsrModel::encode_long(Graph& g, Var long_query, Var items, Var* weights) const {
  auto r = long_att_.pool(g, items, items, long_query);
  if (weights != nullptr) *weights = r.weights;
  return r.pooled;
}

Var ClsrModel::encode_short(Graph& g, Var short_query, Var items, std::span<const nn::TimeFeatures> times,
                            Var* weights) const {
  if (times.size() != items.shape().rows())
    throw DataError("encode_short: " + std::to_string(times.size()) + " time features for a prefix of " +
                    std::to_string(items.shape().rows()));
  Var outputs = short_rnn_->run(g, items, times);
  auto r = short_att_.pool(g, outputs, outputs, short_query);
  if (weights != nullptr) *weights = r.weights;
  return r.pooled;
}

std::optional<Proxies> ClsrModel::compute_proxies(Var items) const {
  const std::size_t t = items.shape().rows();
  if (t <= config_.proxy_threshold) return std::nullopt;
  const std::size_t k = std::min(config_.proxy_k, t);
  return Proxies{ad::mean(items, 0), ad::mean(ad::row_range(items, t - k, k), 0)};
}

InterestBundle ClsrModel::interests(Graph& g, std::size_t user, std::span<const std::size_t> prefix,
                                    std::span<const nn::TimeFeatures> times) const {
  if (prefix.empty()) throw DataError("empty history prefix");
  for (auto it : prefix) check_item(it);
  InterestBundle b;
  b.items = items_.lookup(g, prefix);
  const auto q = make_queries(g, user, b.items);
  b.long_interest = encode_long(g, q.long_query, b.items, &b.long_weights);
  b.short_interest = encode_short(g, q.short_query, b.items, times, &b.short_weights);
  b.proxies = compute_proxies(b.items);
  if (config_.fusion_gru) b.history_state = fusion_gru_.run_final(g, b.items);
  return b;
}

Fusion ClsrModel::fuse(Graph& g, const InterestBundle& b, std::span<const std::size_t> targets,
                       std::optional<double> fixed_alpha) const {
  const std::size_t n = targets.size();
  if (n == 0) throw DataError("fuse: no target items");
  for (auto it : targets) check_item(it);
  Var alpha;
  if (fixed_alpha) {
    if (!(*fixed_alpha >= 0.0 && *fixed_alpha <= 1.0)) throw ConfigError("fixed alpha must lie in [0, 1]");
    alpha = g.constant(Tensor(Shape::vector(n), *fixed_alpha));
  } else {
    std::vector<Var> parts;
    if (config_.fusion_gru) parts.push_back(ad::repeat_rows(b.history_state, n));
    parts.push_back(items_.lookup(g, targets));
    parts.push_back(ad::repeat_rows(b.long_interest, n));
    parts.push_back(ad::repeat_rows(b.short_interest, n));
    Var logits = fusion_mlp_.forward(g, ad::concat(parts, 1), nn::Mode::kEval);
    alpha = ad::sigmoid(ad::reshape(logits, Shape::vector(n)));
  }
  Var one_minus = ad::add_const(ad::neg(alpha), 1.0);
  Var fused = ad::add(ad::outer(alpha, b.long_interest), ad::outer(one_minus, b.short_interest));
  return {alpha, fused};
}

Var ClsrModel::predict(Graph& g, Var fused, std::span<const std::size_t> targets, nn::Mode mode) const {
  const auto& s = fused.shape();
  if (s.rank != 2 || s.cols() != config_.dim || s.rows() != targets.size())
    throw ShapeError("predict: fused " + s.str() + " does not match " + std::to_string(targets.size()) +
                     " targets of width " + std::to_string(config_.dim));
  for (auto it : targets) check_item(it);
  const Var parts[] = {fused, items_.lookup(g, targets)};
  Var logits = predict_mlp_.forward(g, ad::concat(parts, 1), mode);
  return ad::sigmoid(ad::reshape(logits, Shape::vector(targets.size())));
}

LossTerms ClsrModel::joint_loss(Graph& g, std::span<const data::Example> batch, nn::Mode mode) const {
  if (batch.empty()) throw DataError("joint_loss: empty batch");
  LossTerms out;
  std::vector<Var> fused_rows;
  std::vector<std::size_t> targets;
  std::vector<std::size_t> offsets;
  Var con_total;

  for (const auto& ex : batch) {
    const auto times = data::time_features(ex);
    const auto b = interests(g, ex.user, ex.items, times);
    const auto cands = ex.candidates();
    offsets.push_back(targets.size());
    targets.insert(targets.end(), cands.begin(), cands.end());
    fused_rows.push_back(fuse(g, b, cands).fused);

    // With beta = 0 the contrastive branch is never built.
    if (config_.beta > 0.0 && b.proxies) {
      Var c = contrastive_loss(b.long_interest, b.short_interest, b.proxies->long_proxy, b.proxies->short_proxy,
                               config_.contrastive, config_.margin);
      con_total = con_total.valid() ? ad::add(con_total, c) : c;
      out.contrastive_examples += 1;
    }
  }

  Var probs = predict(g, ad::concat(fused_rows, 0), targets, mode);
  Var rec_total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::size_t n = batch[i].candidate_count();
    std::vector<double> labels(n, 0.0);
    labels[0] = 1.0;
    Var l = rec_loss(ad::slice(probs, offsets[i], n), labels);
    rec_total = rec_total.valid() ? ad::add(rec_total, l) : l;
  }
  out.rec = rec_total.value()[0];
  Var total = rec_total;
  if (con_total.valid()) {
    out.contrastive = con_total.value()[0];
    total = ad::add(total, ad::scale(con_total, config_.beta));
  }
  if (config_.lambda > 0.0) {
    Var l2;
    for (const auto& p : params_) {
      if (!p->trainable || !p->regularized) continue;
      Var leaf = g.param(*p);
      Var sq = ad::sum(ad::mul(leaf, leaf));
      l2 = l2.valid() ? ad::add(l2, sq) : sq;
    }
    if (l2.valid()) {
      out.l2 = l2.value()[0];
      total = ad::add(total, ad::scale(l2, config_.lambda));
    }
  }
  out.total = total;
  return out;
}

ScoreResult ClsrModel::score(const data::Example& ex, const ScoreOptions& opts) const {
  Graph g;
  const auto times = data::time_features(ex);
  const auto b = interests(g, ex.user, ex.items, times);
  const auto cands = ex.candidates();
  const auto f = fuse(g, b, cands, opts.fixed_alpha);
  Var probs = predict(g, f.fused, cands, nn::Mode::kEval);

  ScoreResult r;
  r.probs = probs.value().raw();
  r.alphas = f.alpha.value().raw();
  r.long_interest = b.long_interest.value().raw();
  r.short_interest = b.short_interest.value().raw();
  if (b.proxies) r.proxies.emplace(b.proxies->long_proxy.value().raw(), b.proxies->short_proxy.value().raw());
  return r;
}

}  // namespace clsr::model
