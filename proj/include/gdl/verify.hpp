#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "gdl/common.hpp"
#include "gdl/corpus.hpp"
#include "gdl/graph.hpp"
#include "gdl/model.hpp"
#include "gdl/rng.hpp"
#include "gdl/vocab.hpp"

namespace gdl {

/// Exact walk kernel: row-stochastic matrix with P[i][j] = 1/deg(i) for
/// neighbors, built directly from adjacency as the brute-force ground truth.
struct TransitionOracle {
  std::vector<std::vector<double>> rows;  // dense, node_count x node_count
  std::vector<bool> isolated;
};

inline TransitionOracle exact_transition_matrix(const Graph& g) {
  const NodeId n = g.node_count();
  TransitionOracle oracle;
  oracle.rows.assign(n, std::vector<double>(n, 0.0));
  oracle.isolated.assign(n, false);
  for (NodeId i = 0; i < n; ++i) {
    const auto& nbrs = g.neighbors(i);
    if (nbrs.empty()) {
      oracle.isolated[i] = true;
      continue;
    }
    const double p = 1.0 / static_cast<double>(nbrs.size());
    for (NodeId j : nbrs) oracle.rows[i][j] = p;
  }
  return oracle;
}

/// Model's next-node distribution after `context`: softmax over the
/// graph-token logits only (specials and text tokens masked out).
inline std::vector<double> model_next_distribution(Model& m, const GraphSentence& context,
                                                   const Vocab& vocab) {
  if (context.empty()) throw DataError("model_next_distribution: empty context");
  const TokenSeq seq = encode_sentence(vocab, context);
  const Mat H = m.forward_hidden(seq, nullptr, nullptr);
  const Mat logits = m.logits_pretrain(H);
  const double* row = logits.row(logits.rows - 1);
  const NodeId n = vocab.graph_token_count();
  std::vector<double> dist(n);
  double mx = -std::numeric_limits<double>::infinity();
  for (NodeId v = 0; v < n; ++v) mx = std::max(mx, row[vocab.graph_token(v)]);
  double sum = 0;
  for (NodeId v = 0; v < n; ++v) {
    dist[v] = std::exp(row[vocab.graph_token(v)] - mx);
    sum += dist[v];
  }
  for (auto& p : dist) p /= sum;
  return dist;
}

inline double kl_divergence(const std::vector<double>& p, const std::vector<double>& q) {
  double kl = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0) kl += p[i] * std::log(p[i] / q[i]);
  return kl;
}

struct KlSummary {
  std::vector<NodeId> nodes;      // non-isolated conditioning nodes
  std::vector<double> kl;         // KL(oracle row || model row) per node
  double mean = 0;
  double max = 0;
};

inline KlSummary kl_rows(const TransitionOracle& oracle,
                         const std::vector<std::vector<double>>& model_rows,
                         const std::vector<NodeId>& nodes) {
  KlSummary s;
  s.nodes = nodes;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const double kl = kl_divergence(oracle.rows[nodes[i]], model_rows[i]);
    s.kl.push_back(kl);
    s.mean += kl;
    s.max = std::max(s.max, kl);
  }
  if (!s.kl.empty()) s.mean /= static_cast<double>(s.kl.size());
  return s;
}

/// KL(oracle || model) for every non-isolated node, conditioning the model
/// on the single-token context [u].
inline KlSummary kl_vs_oracle(Model& m, const Graph& g, const Vocab& vocab) {
  const auto oracle = exact_transition_matrix(g);
  std::vector<NodeId> nodes;
  std::vector<std::vector<double>> rows;
  for (NodeId u = 0; u < g.node_count(); ++u) {
    if (oracle.isolated[u]) continue;
    nodes.push_back(u);
    rows.push_back(model_next_distribution(m, {u}, vocab));
  }
  return kl_rows(oracle, rows, nodes);
}

// ---- correlation helpers ----

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

inline std::vector<double> average_ranks(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(average_ranks(x), average_ranks(y));
}

// One-sided permutation p-value for "observed Spearman > 0".
inline double spearman_perm_pvalue(const std::vector<double>& x, const std::vector<double>& y,
                                   std::size_t n_perm, std::uint64_t seed) {
  const auto rx = average_ranks(x);
  auto ry = average_ranks(y);
  const double observed = pearson(rx, ry);
  Rng rng(seed);
  std::size_t ge = 0;
  for (std::size_t p = 0; p < n_perm; ++p) {
    shuffle(ry, rng);
    if (pearson(rx, ry) >= observed) ++ge;
  }
  return static_cast<double>(ge + 1) / static_cast<double>(n_perm + 1);
}

struct Theorem1Pair {
  NodeId u, q;
  double inner;
  double pred_dq;      // log(sum_A / d_q); -inf for non-edges
  double pred_dq_dq1;  // log(sum_A / (d_q * d_u)); -inf for non-edges
  bool is_edge;
};

struct Theorem1Report {
  std::vector<Theorem1Pair> pairs;  // all ordered pairs u != q (or edge-focused subset)
  std::size_t edges_evaluated = 0;
  bool degenerate = false;          // constant predictor (e.g. regular graph)
  std::string degenerate_reason;
  std::optional<double> spearman_dq, pearson_dq, perm_p_dq;
  std::optional<double> spearman_dq_dq1, pearson_dq_dq1, perm_p_dq_dq1;
  double edge_mean_inner = 0;
  double nonedge_mean_inner = 0;
};

struct VerifyReport {
  KlSummary kl;
  Theorem1Report theorem1;
};

/// Empirical Theorem-1 check: per directed edge (u, q), the inner product
/// between the head row of q and the hidden state of context [u], against
/// the degree-law predictors. Correlations are computed over edges; all
/// ordered pairs are tabulated so non-edge separation can be inspected.
inline Theorem1Report theorem1_check(Model& m, const Graph& g, const Vocab& vocab,
                                     std::size_t n_perm = 10000, std::uint64_t perm_seed = 17) {
  Theorem1Report rep;
  const NodeId n = g.node_count();
  const double sum_a = 2.0 * static_cast<double>(g.edge_count());
  const double neg_inf = -std::numeric_limits<double>::infinity();

  std::vector<std::vector<double>> hidden(n);
  for (NodeId u = 0; u < n; ++u) {
    const TokenSeq seq = encode_sentence(vocab, {u});
    const Mat H = m.forward_hidden(seq, nullptr, nullptr);
    hidden[u].assign(H.row(H.rows - 1), H.row(H.rows - 1) + H.cols);
  }

  std::vector<double> edge_inner, edge_pred_dq, edge_pred_dq_dq1;
  double edge_sum = 0, nonedge_sum = 0;
  std::size_t nonedge_count = 0;
  for (NodeId u = 0; u < n; ++u) {
    for (NodeId q = 0; q < n; ++q) {
      if (u == q) continue;
      double inner = 0;
      const TokenId qa = vocab.graph_token(q);
      for (int e = 0; e < m.cfg.embed_dim; ++e)
        inner += hidden[u][static_cast<std::size_t>(e)] * m.head_pre.val.at(e, static_cast<int>(qa));
      const bool is_edge = g.has_edge(u, q);
      Theorem1Pair pair;
      pair.u = u;
      pair.q = q;
      pair.inner = inner;
      pair.is_edge = is_edge;
      if (is_edge) {
        pair.pred_dq = std::log(sum_a / static_cast<double>(g.degree(q)));
        pair.pred_dq_dq1 =
            std::log(sum_a / (static_cast<double>(g.degree(q)) * static_cast<double>(g.degree(u))));
        edge_inner.push_back(inner);
        edge_pred_dq.push_back(pair.pred_dq);
        edge_pred_dq_dq1.push_back(pair.pred_dq_dq1);
        edge_sum += inner;
      } else {
        pair.pred_dq = neg_inf;
        pair.pred_dq_dq1 = neg_inf;
        nonedge_sum += inner;
        ++nonedge_count;
      }
      rep.pairs.push_back(pair);
    }
  }
  rep.edges_evaluated = edge_inner.size();
  if (rep.edges_evaluated > 0) rep.edge_mean_inner = edge_sum / static_cast<double>(rep.edges_evaluated);
  if (nonedge_count > 0) rep.nonedge_mean_inner = nonedge_sum / static_cast<double>(nonedge_count);

  auto constant = [](const std::vector<double>& v) {
    for (double x : v)
      if (x != v.front()) return false;
    return true;
  };
  if (rep.edges_evaluated < 3 || constant(edge_pred_dq)) {
    rep.degenerate = true;
    rep.degenerate_reason = "degenerate predictor, correlation undefined";
    return rep;
  }
  rep.spearman_dq = spearman(edge_inner, edge_pred_dq);
  rep.pearson_dq = pearson(edge_inner, edge_pred_dq);
  rep.perm_p_dq = spearman_perm_pvalue(edge_inner, edge_pred_dq, n_perm, perm_seed);
  if (!constant(edge_pred_dq_dq1)) {
    rep.spearman_dq_dq1 = spearman(edge_inner, edge_pred_dq_dq1);
    rep.pearson_dq_dq1 = pearson(edge_inner, edge_pred_dq_dq1);
    rep.perm_p_dq_dq1 = spearman_perm_pvalue(edge_inner, edge_pred_dq_dq1, n_perm, perm_seed);
  }
  return rep;
}

/// Flat table for external plotting: u, q, inner product, both predictors,
/// edge flag. Non-edge predictors print as -inf.
inline void write_theorem1_table(const Theorem1Report& rep, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  out << "u\tq\tinner\tpred_dq\tpred_dqdq1\tis_edge\n";
  char buf[192];
  for (const auto& p : rep.pairs) {
    auto fmt = [](double v, char* s, std::size_t cap) {
      if (std::isinf(v))
        std::snprintf(s, cap, "-inf");
      else
        std::snprintf(s, cap, "%.6f", v);
    };
    char i1[32], p1[32], p2[32];
    fmt(p.inner, i1, sizeof(i1));
    fmt(p.pred_dq, p1, sizeof(p1));
    fmt(p.pred_dq_dq1, p2, sizeof(p2));
    std::snprintf(buf, sizeof(buf), "%u\t%u\t%s\t%s\t%s\t%d\n", p.u, p.q, i1, p1, p2,
                  p.is_edge ? 1 : 0);
    out << buf;
  }
}

}  // namespace gdl
