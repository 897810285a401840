#include <doctest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "gdl/graph.hpp"
#include "support/graphs.hpp"
#include "support/tmp.hpp"

using namespace gdl;
using testsup::TempDir;
using testsup::write_file;

TEST_CASE("load_graph parses a path graph") {
  TempDir dir;
  write_file(dir.file("edges.tsv"), "# comment\n0 1\n1 2\n");
  const Graph g = load_graph(dir.file("edges.tsv"));
  CHECK(g.node_count() == 3);
  CHECK(g.edge_count() == 2);
  CHECK(g.neighbors(1) == std::vector<NodeId>{0, 2});
  CHECK(g.summary() == "nodes=3 edges=2 classes=0");
}

TEST_CASE("load_graph rejects self-loops") {
  TempDir dir;
  write_file(dir.file("edges.tsv"), "0 0\n");
  CHECK_THROWS_WITH_AS(load_graph(dir.file("edges.tsv")),
                       doctest::Contains("self-loop"), DataError);
}

TEST_CASE("load_graph reports the malformed line number") {
  TempDir dir;
  write_file(dir.file("edges.tsv"), "0 1\nnot numbers\n");
  CHECK_THROWS_WITH_AS(load_graph(dir.file("edges.tsv")), doctest::Contains(":2"), DataError);
}

TEST_CASE("load_graph symmetrizes and deduplicates") {
  TempDir dir;
  write_file(dir.file("edges.tsv"), "0 1\n1 0\n0 1\n2 1\n");
  const Graph g = load_graph(dir.file("edges.tsv"));
  CHECK(g.edge_count() == 2);
  CHECK(g.has_edge(1, 0));
  CHECK(g.has_edge(0, 1));
}

TEST_CASE("label and attribute validation") {
  TempDir dir;
  write_file(dir.file("edges.tsv"), "0 1\n1 2\n");
  SUBCASE("label references unknown node") {
    write_file(dir.file("labels.tsv"), "9\t0\n");
    CHECK_THROWS_WITH_AS(load_graph(dir.file("edges.tsv"), dir.file("labels.tsv")),
                         doctest::Contains("unknown node"), DataError);
  }
  SUBCASE("non-dense class ids") {
    write_file(dir.file("labels.tsv"), "0\t0\n1\t2\n");
    CHECK_THROWS_WITH_AS(load_graph(dir.file("edges.tsv"), dir.file("labels.tsv")),
                         doctest::Contains("dense"), DataError);
  }
  SUBCASE("attribute references unknown node") {
    write_file(dir.file("attrs.tsv"), "7\tsome text\n");
    CHECK_THROWS_WITH_AS(load_graph(dir.file("edges.tsv"), "", dir.file("attrs.tsv")),
                         doctest::Contains("unknown node"), DataError);
  }
  SUBCASE("valid labels and attrs load") {
    write_file(dir.file("labels.tsv"), "0\t0\n1\t1\n2\t0\n");
    write_file(dir.file("attrs.tsv"), "0\tgraph model\n2\tdeep graph\n");
    const Graph g = load_graph(dir.file("edges.tsv"), dir.file("labels.tsv"), dir.file("attrs.tsv"));
    CHECK(g.class_count() == 2);
    CHECK(*g.label(1) == 1);
    CHECK(*g.attribute(2) == "deep graph");
    CHECK_FALSE(g.attribute(1).has_value());
  }
}

TEST_CASE("degree queries") {
  const Graph star = testsup::make_star(4, 1);  // node 5 isolated
  CHECK(star.degree(0) == 4);
  CHECK(star.degree(1) == 1);
  CHECK(star.degree(5) == 0);
  CHECK_THROWS_AS(star.degree(6), DataError);
}

TEST_CASE("sum of degrees equals twice the edge count") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    const Graph g = testsup::make_er(40, 0.1, seed);
    std::size_t total = 0;
    for (NodeId v = 0; v < g.node_count(); ++v) total += g.degree(v);
    CHECK(total == 2 * g.edge_count());
  }
}

TEST_CASE("graph save/load round trip") {
  TempDir dir;
  Graph g = testsup::make_er(25, 0.15, 9);
  std::map<NodeId, NodeId> labels;
  std::map<NodeId, std::string> attrs;
  for (NodeId v = 0; v < g.node_count(); ++v) {
    labels[v] = v % 3;
    if (v % 2 == 0) attrs[v] = "text for node " + std::to_string(v);
  }
  g.set_labels(labels);
  g.set_attributes(attrs);
  save_graph(g, dir.file("e.tsv"), dir.file("l.tsv"), dir.file("a.tsv"));
  const Graph h = load_graph(dir.file("e.tsv"), dir.file("l.tsv"), dir.file("a.tsv"));
  CHECK(h.node_count() == g.node_count());
  CHECK(h.edges() == g.edges());
  CHECK(h.labels() == g.labels());
  CHECK(h.attributes() == g.attributes());
}

TEST_CASE("stratified split: sizes, determinism, proportions") {
  Graph g = testsup::make_er(100, 0.05, 3, true);
  std::map<NodeId, NodeId> labels;
  for (NodeId v = 0; v < 100; ++v) labels[v] = v < 50 ? 0 : 1;
  g.set_labels(labels);

  const Split s1 = make_split(g, 0.6, 0.2, 0.2, 7);
  CHECK(s1.train.size() == 60);
  CHECK(s1.val.size() == 20);
  CHECK(s1.test.size() == 20);

  std::set<NodeId> seen;
  for (const auto* part : {&s1.train, &s1.val, &s1.test})
    for (NodeId v : *part) CHECK(seen.insert(v).second);

  const Split s2 = make_split(g, 0.6, 0.2, 0.2, 7);
  CHECK(s1.train == s2.train);
  CHECK(s1.val == s2.val);
  CHECK(s1.test == s2.test);

  const Split s3 = make_split(g, 0.6, 0.2, 0.2, 8);
  CHECK(s1.train != s3.train);

  // Per-class proportions within one node of the global fractions,
  // counted by brute force over the emitted split.
  const double fracs[3] = {0.6, 0.2, 0.2};
  const std::vector<NodeId>* parts[3] = {&s1.train, &s1.val, &s1.test};
  for (NodeId c = 0; c < g.class_count(); ++c) {
    std::size_t class_total = 0;
    for (const auto& [v, lab] : g.labels())
      if (lab == c) ++class_total;
    for (int p = 0; p < 3; ++p) {
      std::size_t count = 0;
      for (NodeId v : *parts[p])
        if (*g.label(v) == c) ++count;
      const double expected = fracs[p] * static_cast<double>(class_total);
      CHECK(std::abs(static_cast<double>(count) - expected) <= 1.0);
    }
  }
}

TEST_CASE("split rejects a class smaller than the number of parts") {
  Graph g = testsup::make_path(5);
  g.set_labels({{0, 0}, {1, 0}, {2, 0}, {3, 0}, {4, 1}});
  CHECK_THROWS_WITH_AS(make_split(g, 0.6, 0.2, 0.2, 1), doctest::Contains("class 1"), DataError);
}

TEST_CASE("split config validation") {
  Graph g = testsup::make_path(4);
  CHECK_THROWS_AS(make_split(g, 0.6, 0.2, 0.2, 1), ConfigError);  // unlabeled
  g.set_labels({{0, 0}, {1, 0}, {2, 0}, {3, 0}});
  CHECK_THROWS_AS(make_split(g, 0.0, 0.5, 0.5, 1), ConfigError);
  CHECK_THROWS_AS(make_split(g, 0.8, 0.2, 0.2, 1), ConfigError);
}

// Table-1 scale: a synthetic edge list with the ACM dataset's exact shape
// loads with the same counts echoed in the summary.
TEST_CASE("ACM-shaped file loads with exact counts") {
  const NodeId n = 48579;
  TempDir dir;
  {
    std::ostringstream edges;
    for (NodeId s = 1; s <= 3; ++s)
      for (NodeId i = 0; i < n; ++i) edges << i << " " << (i + s) % n << "\n";
    for (NodeId i = 0; i < 193034 - 3 * n; ++i) edges << i << " " << i + 4 << "\n";
    write_file(dir.file("edges.tsv"), edges.str());
    std::ostringstream labels;
    for (NodeId i = 0; i < n; ++i) labels << i << "\t" << i % 9 << "\n";
    write_file(dir.file("labels.tsv"), labels.str());
  }
  const Graph g = load_graph(dir.file("edges.tsv"), dir.file("labels.tsv"));
  CHECK(g.summary() == "nodes=48579 edges=193034 classes=9");
}
