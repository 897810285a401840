#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include "gdl/common.hpp"
#include "gdl/graph.hpp"
#include "gdl/rng.hpp"

namespace gdl {

struct WalkConfig {
  std::uint32_t walks_per_node = 10;  // k
  std::uint32_t walk_length = 5;      // l, tokens per sentence incl. start
  std::uint64_t seed = 1;

  void validate() const {
    if (walks_per_node < 1) throw ConfigError("walks_per_node (k) must be >= 1");
    if (walk_length < 1) throw ConfigError("walk_length (l) must be >= 1");
  }
};

// Ordered node sequence where every consecutive pair is an edge.
using GraphSentence = std::vector<NodeId>;

struct Corpus {
  std::vector<GraphSentence> sentences;
  WalkConfig config;
};

/// Unbiased walk kernel: probability that `vj` follows `vi`. Zero for
/// non-neighbors; an isolated `vi` has no defined distribution.
inline double transition_prob(const Graph& g, NodeId vi, NodeId vj) {
  const NodeId deg = g.degree(vi);
  if (deg == 0)
    throw DataError("transition distribution undefined: node " + std::to_string(vi) +
                    " is isolated");
  if (vj >= g.node_count() || !g.has_edge(vi, vj)) return 0.0;
  return 1.0 / static_cast<double>(deg);
}

/// Samples one walk of at most `length` tokens starting at `start`. Each
/// step is uniform over the current node's neighbors; a dead end truncates
/// the sentence.
inline GraphSentence sample_walk(const Graph& g, NodeId start, std::uint32_t length, Rng& rng) {
  if (start >= g.node_count())
    throw DataError("walk start " + std::to_string(start) + " out of range");
  GraphSentence s;
  s.reserve(length);
  s.push_back(start);
  NodeId cur = start;
  for (std::uint32_t q = 1; q < length; ++q) {
    const auto& nbrs = g.neighbors(cur);
    if (nbrs.empty()) break;
    cur = nbrs[rng.uniform_below(nbrs.size())];
    s.push_back(cur);
  }
  return s;
}

/// Builds the full pre-training corpus: k walks from every node, node-major
/// walk-minor order. Each walk draws from its own stream seeded by
/// (seed, start, walk index), so the result is independent of `workers`.
inline Corpus build_pretrain_corpus(const Graph& g, const WalkConfig& cfg,
                                    unsigned workers = 1) {
  cfg.validate();
  Corpus corpus;
  corpus.config = cfg;
  const std::size_t k = cfg.walks_per_node;
  corpus.sentences.resize(static_cast<std::size_t>(g.node_count()) * k);

  auto run_range = [&](NodeId lo, NodeId hi) {
    for (NodeId v = lo; v < hi; ++v) {
      for (std::size_t w = 0; w < k; ++w) {
        Rng rng(stream_seed(cfg.seed, v, w));
        corpus.sentences[v * k + w] = sample_walk(g, v, cfg.walk_length, rng);
      }
    }
  };

  if (workers <= 1 || g.node_count() < 2 * workers) {
    run_range(0, g.node_count());
  } else {
    std::vector<std::thread> pool;
    const NodeId chunk = (g.node_count() + workers - 1) / workers;
    for (unsigned t = 0; t < workers; ++t) {
      const NodeId lo = std::min<NodeId>(t * chunk, g.node_count());
      const NodeId hi = std::min<NodeId>(lo + chunk, g.node_count());
      if (lo < hi) pool.emplace_back(run_range, lo, hi);
    }
    for (auto& th : pool) th.join();
  }
  return corpus;
}

/// k walks restarting at `v`, consumed from a caller-provided stream. This
/// per-node restart is the periodic restart used for fine-tuning contexts.
inline std::vector<GraphSentence> sample_node_context(const Graph& g, NodeId v,
                                                      const WalkConfig& cfg, Rng& rng) {
  cfg.validate();
  std::vector<GraphSentence> ctx;
  ctx.reserve(cfg.walks_per_node);
  for (std::uint32_t w = 0; w < cfg.walks_per_node; ++w)
    ctx.push_back(sample_walk(g, v, cfg.walk_length, rng));
  return ctx;
}

inline void write_corpus(const Corpus& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  out << "#gdl-corpus k=" << c.config.walks_per_node << " l=" << c.config.walk_length
      << " seed=" << c.config.seed << "\n";
  for (const auto& s : c.sentences) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) out << ' ';
      out << "<node_" << s[i] << ">";
    }
    out << "\n";
  }
  if (!out) throw DataError("write failed: " + path);
}

inline Corpus read_corpus(const std::string& path) {
  auto in = detail::open_or_throw(path);
  Corpus c;
  std::string line;
  std::size_t lineno = 0;
  bool saw_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.rfind("#gdl-corpus", 0) == 0) {
      unsigned long long k = 0, l = 0, seed = 0;
      if (std::sscanf(line.c_str(), "#gdl-corpus k=%llu l=%llu seed=%llu", &k, &l, &seed) != 3)
        throw DataError(path + ":" + std::to_string(lineno) + ": malformed corpus header");
      c.config.walks_per_node = static_cast<std::uint32_t>(k);
      c.config.walk_length = static_cast<std::uint32_t>(l);
      c.config.seed = seed;
      saw_header = true;
      continue;
    }
    if (detail::blank_or_comment(line)) continue;
    GraphSentence s;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) {
      unsigned long long id = 0;
      int consumed = 0;
      if (std::sscanf(tok.c_str(), "<node_%llu>%n", &id, &consumed) != 1 ||
          static_cast<std::size_t>(consumed) != tok.size())
        throw DataError(path + ":" + std::to_string(lineno) + ": unknown token '" + tok + "'");
      s.push_back(static_cast<NodeId>(id));
    }
    if (!s.empty()) c.sentences.push_back(std::move(s));
  }
  if (!saw_header) throw DataError(path + ": missing #gdl-corpus header");
  return c;
}

}  // namespace gdl
