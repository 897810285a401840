#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gdl/common.hpp"
#include "gdl/rng.hpp"

namespace gdl {

/// Text-attributed graph: symmetric adjacency, optional per-node attribute
/// strings and class labels. Immutable after construction; safe to share
/// across readers.
class Graph {
 public:
  Graph() = default;

  // Programmatic constructor. Edges may be given in either orientation and
  // with duplicates; they are symmetrized and deduplicated. Self-loops are
  // rejected.
  static Graph from_edges(NodeId node_count,
                          const std::vector<std::pair<NodeId, NodeId>>& edges) {
    Graph g;
    g.node_count_ = node_count;
    std::set<std::pair<NodeId, NodeId>> uniq;
    for (const auto& [u, v] : edges) {
      if (u == v) throw DataError("self-loop on node " + std::to_string(u));
      if (u >= node_count || v >= node_count)
        throw DataError("edge endpoint " + std::to_string(std::max(u, v)) +
                        " out of range for node_count " + std::to_string(node_count));
      uniq.insert({std::min(u, v), std::max(u, v)});
    }
    g.edges_.assign(uniq.begin(), uniq.end());
    g.adj_.assign(node_count, {});
    for (const auto& [u, v] : g.edges_) {
      g.adj_[u].push_back(v);
      g.adj_[v].push_back(u);
    }
    for (auto& nbrs : g.adj_) std::sort(nbrs.begin(), nbrs.end());
    return g;
  }

  NodeId node_count() const { return node_count_; }
  std::size_t edge_count() const { return edges_.size(); }
  const std::vector<std::pair<NodeId, NodeId>>& edges() const { return edges_; }

  const std::vector<NodeId>& neighbors(NodeId v) const {
    check_node(v);
    return adj_[v];
  }

  NodeId degree(NodeId v) const {
    check_node(v);
    return static_cast<NodeId>(adj_[v].size());
  }

  bool has_edge(NodeId u, NodeId v) const {
    check_node(u);
    check_node(v);
    const auto& nbrs = adj_[u];
    return std::binary_search(nbrs.begin(), nbrs.end(), v);
  }

  bool has_labels() const { return !labels_.empty(); }
  bool has_attributes() const { return !attrs_.empty(); }
  NodeId class_count() const { return class_count_; }

  std::optional<NodeId> label(NodeId v) const {
    check_node(v);
    auto it = labels_.find(v);
    if (it == labels_.end()) return std::nullopt;
    return it->second;
  }

  const std::map<NodeId, NodeId>& labels() const { return labels_; }
  const std::map<NodeId, std::string>& attributes() const { return attrs_; }

  std::optional<std::string> attribute(NodeId v) const {
    check_node(v);
    auto it = attrs_.find(v);
    if (it == attrs_.end()) return std::nullopt;
    return it->second;
  }

  void set_labels(std::map<NodeId, NodeId> labels) {
    NodeId max_cls = 0;
    std::set<NodeId> used;
    for (const auto& [v, c] : labels) {
      if (v >= node_count_)
        throw DataError("label references unknown node " + std::to_string(v));
      used.insert(c);
      max_cls = std::max(max_cls, c);
    }
    if (!labels.empty() && used.size() != static_cast<std::size_t>(max_cls) + 1)
      throw DataError("class ids are not dense in [0, " + std::to_string(max_cls + 1) + ")");
    labels_ = std::move(labels);
    class_count_ = labels_.empty() ? 0 : max_cls + 1;
  }

  void set_attributes(std::map<NodeId, std::string> attrs) {
    for (const auto& [v, text] : attrs) {
      if (v >= node_count_)
        throw DataError("attribute references unknown node " + std::to_string(v));
      if (text.find('\t') != std::string::npos)
        throw DataError("attribute text for node " + std::to_string(v) + " contains a tab");
    }
    attrs_ = std::move(attrs);
  }

  std::string summary() const {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "nodes=%u edges=%zu classes=%u", node_count_,
                  edges_.size(), class_count_);
    return buf;
  }

 private:
  void check_node(NodeId v) const {
    if (v >= node_count_)
      throw DataError("node id " + std::to_string(v) + " out of range (node_count=" +
                      std::to_string(node_count_) + ")");
  }

  NodeId node_count_ = 0;
  std::vector<std::pair<NodeId, NodeId>> edges_;   // canonical (min,max), sorted
  std::vector<std::vector<NodeId>> adj_;           // sorted neighbor lists
  std::map<NodeId, NodeId> labels_;
  std::map<NodeId, std::string> attrs_;
  NodeId class_count_ = 0;
};

namespace detail {

inline std::ifstream open_or_throw(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open file: " + path);
  return in;
}

inline bool blank_or_comment(const std::string& line) {
  for (char c : line) {
    if (c == '#') return true;
    if (!std::isspace(static_cast<unsigned char>(c))) return false;
  }
  return true;
}

inline NodeId parse_node_id(const std::string& tok, const std::string& path, std::size_t lineno) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(tok, &pos);
    if (pos != tok.size() || v < 0)
      throw std::invalid_argument(tok);
    return static_cast<NodeId>(v);
  } catch (const std::exception&) {
    throw DataError(path + ":" + std::to_string(lineno) + ": malformed integer '" + tok + "'");
  }
}

}  // namespace detail

/// Loads a graph from an edge list plus optional labels/attributes files.
/// Directed input edges are symmetrized; duplicates are dropped; self-loops
/// are an error. Node count is max referenced id + 1.
inline Graph load_graph(const std::string& edge_path,
                        const std::string& labels_path = "",
                        const std::string& attrs_path = "") {
  auto in = detail::open_or_throw(edge_path);
  std::vector<std::pair<NodeId, NodeId>> edges;
  NodeId max_id = 0;
  bool any = false;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::blank_or_comment(line)) continue;
    std::istringstream ss(line);
    std::string a, b, extra;
    if (!(ss >> a >> b) || (ss >> extra))
      throw DataError(edge_path + ":" + std::to_string(lineno) +
                      ": expected two integers, got '" + line + "'");
    const NodeId u = detail::parse_node_id(a, edge_path, lineno);
    const NodeId v = detail::parse_node_id(b, edge_path, lineno);
    if (u == v)
      throw DataError(edge_path + ":" + std::to_string(lineno) + ": self-loop on node " + a);
    edges.emplace_back(u, v);
    max_id = std::max({max_id, u, v});
    any = true;
  }
  if (!any) throw DataError(edge_path + ": no edges found");
  Graph g = Graph::from_edges(max_id + 1, edges);

  if (!labels_path.empty()) {
    auto lin = detail::open_or_throw(labels_path);
    std::map<NodeId, NodeId> labels;
    lineno = 0;
    while (std::getline(lin, line)) {
      ++lineno;
      if (detail::blank_or_comment(line)) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos)
        throw DataError(labels_path + ":" + std::to_string(lineno) + ": expected node_id<TAB>class_id");
      const NodeId v = detail::parse_node_id(line.substr(0, tab), labels_path, lineno);
      const NodeId c = detail::parse_node_id(line.substr(tab + 1), labels_path, lineno);
      labels[v] = c;
    }
    g.set_labels(std::move(labels));
  }

  if (!attrs_path.empty()) {
    auto ain = detail::open_or_throw(attrs_path);
    std::map<NodeId, std::string> attrs;
    lineno = 0;
    while (std::getline(ain, line)) {
      ++lineno;
      if (detail::blank_or_comment(line)) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos)
        throw DataError(attrs_path + ":" + std::to_string(lineno) + ": expected node_id<TAB>text");
      const NodeId v = detail::parse_node_id(line.substr(0, tab), attrs_path, lineno);
      attrs[v] = line.substr(tab + 1);
    }
    g.set_attributes(std::move(attrs));
  }
  return g;
}

/// Writes the graph back out in the loader's formats (edges as "u v" with
/// u < v, one per line; labels/attrs tab-separated). Round-trips exactly.
inline void save_graph(const Graph& g, const std::string& edge_path,
                       const std::string& labels_path = "",
                       const std::string& attrs_path = "") {
  {
    std::ofstream out(edge_path);
    if (!out) throw DataError("cannot write file: " + edge_path);
    for (const auto& [u, v] : g.edges()) out << u << " " << v << "\n";
  }
  if (!labels_path.empty() && g.has_labels()) {
    std::ofstream out(labels_path);
    if (!out) throw DataError("cannot write file: " + labels_path);
    for (const auto& [v, c] : g.labels()) out << v << "\t" << c << "\n";
  }
  if (!attrs_path.empty() && g.has_attributes()) {
    std::ofstream out(attrs_path);
    if (!out) throw DataError("cannot write file: " + attrs_path);
    for (const auto& [v, t] : g.attributes()) out << v << "\t" << t << "\n";
  }
}

/// Disjoint train/validation/test node sets over labeled nodes.
struct Split {
  std::vector<NodeId> train, val, test;
};

/// Deterministic stratified split. Within each class, nodes are shuffled
/// with the seeded rng and apportioned to parts by largest remainder, so
/// per-class proportions stay within one node of the requested fractions.
inline Split make_split(const Graph& g, double train_frac, double val_frac,
                        double test_frac, std::uint64_t seed) {
  if (!(train_frac > 0 && val_frac > 0 && test_frac > 0))
    throw ConfigError("split fractions must be positive");
  if (train_frac + val_frac + test_frac > 1.0 + 1e-9)
    throw ConfigError("split fractions must sum to at most 1");
  if (!g.has_labels()) throw ConfigError("make_split requires a labeled graph");

  std::vector<std::vector<NodeId>> by_class(g.class_count());
  for (const auto& [v, c] : g.labels()) by_class[c].push_back(v);

  const double fracs[3] = {train_frac, val_frac, test_frac};
  Split split;
  std::vector<NodeId>* parts[3] = {&split.train, &split.val, &split.test};

  for (NodeId c = 0; c < g.class_count(); ++c) {
    auto& nodes = by_class[c];
    if (nodes.size() < 3)
      throw DataError("class " + std::to_string(c) + " has only " +
                      std::to_string(nodes.size()) + " labeled nodes, fewer than split parts");
    std::sort(nodes.begin(), nodes.end());
    Rng rng(stream_seed(seed, 0x5114Dull, c));
    shuffle(nodes, rng);

    std::size_t take[3];
    double frac_part[3];
    std::size_t assigned = 0;
    double total = 0;
    for (int p = 0; p < 3; ++p) {
      const double target = fracs[p] * static_cast<double>(nodes.size());
      take[p] = static_cast<std::size_t>(target);
      frac_part[p] = target - static_cast<double>(take[p]);
      assigned += take[p];
      total += target;
    }
    std::size_t want = static_cast<std::size_t>(total + 0.5);
    while (assigned < want) {
      int best = 0;
      for (int p = 1; p < 3; ++p)
        if (frac_part[p] > frac_part[best]) best = p;
      ++take[best];
      frac_part[best] = -1;
      ++assigned;
    }
    std::size_t off = 0;
    for (int p = 0; p < 3; ++p) {
      for (std::size_t i = 0; i < take[p]; ++i) parts[p]->push_back(nodes[off + i]);
      off += take[p];
    }
  }
  for (auto* part : parts) {
    if (part->empty()) throw DataError("split produced an empty part");
    std::sort(part->begin(), part->end());
  }
  return split;
}

}  // namespace gdl
