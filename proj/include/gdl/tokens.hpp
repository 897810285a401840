#pragma once

#include <cstdio>
#include <deque>
#include <fstream>
#include <string>
#include <vector>

#include "gdl/common.hpp"
#include "gdl/corpus.hpp"
#include "gdl/graph.hpp"
#include "gdl/vocab.hpp"

namespace gdl {

/// Prompt length of a graph-language context (the encoded context length:
/// graph tokens, separators, CLS, and attribute text when given).
inline std::size_t gdl_token_count(const std::vector<GraphSentence>& ctx, const Vocab& v,
                                   const std::map<NodeId, std::string>* attrs = nullptr,
                                   std::size_t max_attr_tokens = 16) {
  return encode_context(v, ctx, attrs, max_attr_tokens).size();
}

/// Deterministic description-style rendering of the BFS neighborhood up to
/// `order` hops: one "Node i is connected to nodes j1 j2 ..." line per
/// expanded node, neighbors capped per line. Node mentions count as one
/// token each and punctuation is not counted, which favors the baseline.
inline TokenSeq description_render(const Graph& g, NodeId v0, std::uint32_t order, const Vocab& v,
                                   std::size_t neighbor_cap = 10) {
  if (order < 1) throw ConfigError("description_render: order must be >= 1");
  static const char* kTemplate[] = {"node", "", "is", "connected", "to", "nodes"};
  TokenSeq seq;
  std::vector<std::uint32_t> depth(g.node_count(), UINT32_MAX);
  std::deque<NodeId> frontier;
  depth[v0] = 0;
  frontier.push_back(v0);
  while (!frontier.empty()) {
    const NodeId u = frontier.front();
    frontier.pop_front();
    if (depth[u] >= order) continue;
    for (std::size_t w = 0; w < 6; ++w) {
      if (w == 1)
        seq.push(v.graph_token(u), TokenKind::Graph);
      else
        seq.push(v.text_or_unk(kTemplate[w]), TokenKind::Text);
    }
    std::size_t listed = 0;
    for (NodeId nb : g.neighbors(u)) {
      if (listed++ >= neighbor_cap) break;
      seq.push(v.graph_token(nb), TokenKind::Graph);
      if (depth[nb] == UINT32_MAX) {
        depth[nb] = depth[u] + 1;
        frontier.push_back(nb);
      }
    }
  }
  return seq;
}

inline double reduction_pct(double gdl_tokens, double desc_tokens) {
  if (desc_tokens <= 0) return 0.0;
  return 100.0 * (1.0 - gdl_tokens / desc_tokens);
}

struct TokenReport {
  struct Row {
    NodeId node;
    std::size_t gdl_tokens;
    std::size_t desc_tokens;
    std::uint32_t order;
    double reduction;
  };
  std::vector<Row> rows;
  double mean_gdl = 0;
  double mean_desc = 0;
  double reduction = 0;  // 100 * (1 - mean_gdl / mean_desc)
  std::uint32_t order = 0;
};

/// Per-node and aggregate token accounting: graph-language context of
/// (k, l) walks versus a description rendering of the same structure order
/// (l - 1 hops).
inline TokenReport token_report(const Graph& g, const std::vector<NodeId>& nodes,
                                const WalkConfig& cfg, std::uint32_t order, const Vocab& v,
                                std::size_t neighbor_cap = 10) {
  cfg.validate();
  if (nodes.empty()) throw ConfigError("token_report: empty node set");
  TokenReport rep;
  rep.order = order;
  double sum_gdl = 0, sum_desc = 0;
  for (NodeId u : nodes) {
    Rng rng(stream_seed(cfg.seed, 0x70CEull, u));
    const auto ctx = sample_node_context(g, u, cfg, rng);
    const std::size_t n_gdl = gdl_token_count(ctx, v);
    const std::size_t n_desc = description_render(g, u, order, v, neighbor_cap).size();
    rep.rows.push_back({u, n_gdl, n_desc, order,
                        reduction_pct(static_cast<double>(n_gdl), static_cast<double>(n_desc))});
    sum_gdl += static_cast<double>(n_gdl);
    sum_desc += static_cast<double>(n_desc);
  }
  rep.mean_gdl = sum_gdl / static_cast<double>(nodes.size());
  rep.mean_desc = sum_desc / static_cast<double>(nodes.size());
  rep.reduction = reduction_pct(rep.mean_gdl, rep.mean_desc);
  return rep;
}

inline void write_token_report(const TokenReport& rep, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  out << "node\tgdl_tokens\tdesc_tokens\torder\treduction_pct\n";
  char buf[128];
  for (const auto& r : rep.rows) {
    std::snprintf(buf, sizeof(buf), "%u\t%zu\t%zu\t%u\t%.2f\n", r.node, r.gdl_tokens,
                  r.desc_tokens, r.order, r.reduction);
    out << buf;
  }
  std::snprintf(buf, sizeof(buf), "#aggregate mean_gdl=%.2f mean_desc=%.2f reduction_pct=%.2f\n",
                rep.mean_gdl, rep.mean_desc, rep.reduction);
  out << buf;
}

}  // namespace gdl
