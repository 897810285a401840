#include <doctest.h>

#include <cmath>

#include "gdl/model.hpp"
#include "gdl/train.hpp"
#include "support/graphs.hpp"
#include "support/tmp.hpp"

using namespace gdl;

namespace {

struct Fixture {
  Graph g;
  Vocab vocab;
  Model model;

  explicit Fixture(ModelConfig cfg = {}, std::uint64_t seed = 1)
      : g(testsup::make_karate()) {
    std::map<NodeId, NodeId> lab;
    for (NodeId v = 0; v < g.node_count(); ++v) lab[v] = v % 2;
    g.set_labels(lab);
    vocab = Vocab::build(g, false);
    model = Model::init(g, vocab, cfg, seed);
  }

  TokenSeq walk_seq(NodeId start, std::uint32_t len, std::uint64_t seed = 5) {
    Rng rng(seed);
    return encode_sentence(vocab, sample_walk(g, start, len, rng));
  }
};

bool mats_equal(const Mat& a, const Mat& b) {
  if (a.rows != b.rows || a.cols != b.cols) return false;
  for (std::size_t i = 0; i < a.a.size(); ++i)
    if (a.a[i] != b.a[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("class probabilities sum to one") {
  Fixture f;
  const TokenSeq seq = f.walk_seq(3, 6);
  const Mat H = f.model.forward_hidden(seq, nullptr, nullptr);
  Mat z = f.model.logits_class(H);
  softmax_inplace(z.row(0), z.cols);
  double sum = 0;
  for (int c = 0; c < z.cols; ++c) {
    sum += z.at(0, c);
    CHECK(z.at(0, c) >= 0.0);
  }
  CHECK(std::abs(sum - 1.0) < 1e-6);
}

TEST_CASE("causal mask: future tokens do not affect earlier logits") {
  Fixture f;
  TokenSeq seq = f.walk_seq(0, 8);
  REQUIRE(seq.size() == 8);
  const Mat base = f.model.logits_pretrain(f.model.forward_hidden(seq, nullptr, nullptr));

  TokenSeq permuted = seq;
  std::swap(permuted.ids[6], permuted.ids[7]);
  const Mat perm = f.model.logits_pretrain(f.model.forward_hidden(permuted, nullptr, nullptr));

  for (int t = 0; t < 6; ++t)
    for (int j = 0; j < base.cols; ++j) CHECK(base.at(t, j) == perm.at(t, j));
}

TEST_CASE("zeroed trunk gives position-independent logits with a known value") {
  ModelConfig cfg;
  cfg.embed_dim = 2;
  cfg.layers = 1;
  cfg.heads = 1;
  cfg.max_seq_len = 4;
  Fixture f(cfg);
  Model& m = f.model;
  m.pos.val.zero();
  for (LinearStack* s : m.all_stacks())
    if (s != &m.proj) s->base.val.zero();
  // token <node_0> embeds to (3, 4); head column for <node_1> is (1, 0.5)
  m.embed.val.zero();
  const TokenId t0 = f.vocab.graph_token(0);
  m.embed.val.at(static_cast<int>(t0), 0) = 3.0;
  m.embed.val.at(static_cast<int>(t0), 1) = 4.0;
  m.head_pre.val.zero();
  const TokenId t1 = f.vocab.graph_token(1);
  m.head_pre.val.at(0, static_cast<int>(t1)) = 1.0;
  m.head_pre.val.at(1, static_cast<int>(t1)) = 0.5;

  TokenSeq seq;
  for (int i = 0; i < 3; ++i) seq.push(t0, TokenKind::Graph);
  const Mat logits = m.logits_pretrain(m.forward_hidden(seq, nullptr, nullptr));

  // hand computation: rms = sqrt((9+16)/2 + 1e-5), logit = (3*1 + 4*0.5)/rms
  const double rms = std::sqrt(12.5 + 1e-5);
  const double expected = 5.0 / rms;
  for (int t = 0; t < 3; ++t) {
    CHECK(logits.at(t, static_cast<int>(t1)) == doctest::Approx(expected).epsilon(1e-12));
    for (int j = 0; j < logits.cols; ++j) CHECK(logits.at(t, j) == logits.at(0, j));
  }
}

TEST_CASE("forward rejects over-length sequences") {
  ModelConfig cfg;
  cfg.max_seq_len = 4;
  Fixture f(cfg);
  const TokenSeq seq = f.walk_seq(0, 5);
  CHECK_THROWS_WITH_AS(f.model.forward_hidden(seq, nullptr, nullptr),
                       doctest::Contains("max_seq_len"), DataError);
}

TEST_CASE("attach_adapter leaves outputs exactly unchanged") {
  Fixture f;
  const TokenSeq seq = f.walk_seq(5, 7);
  const Mat before = f.model.logits_pretrain(f.model.forward_hidden(seq, nullptr, nullptr));

  LoraConfig lcfg;
  const auto round = f.model.attach_adapter(lcfg, 11);
  CHECK(round == 1);
  const Mat after = f.model.logits_pretrain(f.model.forward_hidden(seq, nullptr, nullptr));
  CHECK(mats_equal(before, after));

  for (LinearStack* s : f.model.all_stacks()) {
    if (s == &f.model.proj) continue;
    REQUIRE(s->deltas.size() == 1);
    CHECK(s->deltas[0].B.val.checksum() == Mat(s->in_dim(), lcfg.rank).checksum());
  }
}

TEST_CASE("stacked adapters compose as base + delta1 + delta2") {
  Fixture f;
  LoraConfig lcfg;
  lcfg.rank = 4;
  lcfg.alpha = 8;
  lcfg.dropout = 0;
  f.model.attach_adapter(lcfg, 1);
  f.model.attach_adapter(lcfg, 2);

  LinearStack& s = f.model.blocks[0].wq;
  REQUIRE(s.deltas.size() == 2);
  Rng rng(3);
  for (auto& d : s.deltas) d.B.val.fill_gaussian(rng, 0.1);

  Mat x(3, s.in_dim());
  x.fill_gaussian(rng, 1.0);
  const Mat y = s.forward(x, nullptr, nullptr);

  // manual composition of the effective weight
  Mat w_eff = s.base.val;
  for (const auto& d : s.deltas) {
    Mat ba;
    matmul(d.B.val, d.A.val, ba);
    add_inplace(w_eff, ba, d.scale);
  }
  Mat y_manual;
  matmul(x, w_eff, y_manual);
  for (std::size_t i = 0; i < y.a.size(); ++i)
    CHECK(y.a[i] == doctest::Approx(y_manual.a[i]).epsilon(1e-12));
}

TEST_CASE("set_stage enforces prerequisites") {
  Fixture f;
  CHECK_THROWS_AS(f.model.set_stage(Stage::Pretrain), ConfigError);
  LoraConfig lcfg;
  f.model.attach_adapter(lcfg, 1);
  f.model.set_stage(Stage::Pretrain);
  CHECK(f.model.stage == Stage::Pretrain);

  CHECK_THROWS_AS(f.model.set_stage(Stage::Finetune), ConfigError);  // needs round 2
  LoraConfig l2 = lcfg;
  l2.targets.insert(AdapterTarget::Projector);
  f.model.attach_adapter(l2, 2);
  f.model.set_stage(Stage::Finetune);
  CHECK(f.model.stage == Stage::Finetune);
}

TEST_CASE("stage trainability sets match the freeze contract") {
  Fixture f;
  LoraConfig lcfg;
  f.model.attach_adapter(lcfg, 1);
  f.model.set_stage(Stage::Pretrain);

  CHECK(f.model.embed.trainable);
  CHECK(f.model.pos.trainable);
  CHECK(f.model.proj.base.trainable);
  CHECK(f.model.head_pre.trainable);
  CHECK_FALSE(f.model.head_cls.trainable);
  for (LinearStack* s : f.model.all_stacks()) {
    CHECK((s == &f.model.proj || !s->base.trainable));
    for (auto& d : s->deltas) {
      CHECK(d.B.trainable);
      CHECK(d.A.trainable);
    }
  }

  LoraConfig l2 = lcfg;
  l2.targets.insert(AdapterTarget::Projector);
  f.model.attach_adapter(l2, 2);
  f.model.set_stage(Stage::Finetune);
  CHECK_FALSE(f.model.embed.trainable);
  CHECK_FALSE(f.model.pos.trainable);
  CHECK_FALSE(f.model.proj.base.trainable);
  CHECK_FALSE(f.model.head_pre.trainable);
  CHECK(f.model.head_cls.trainable);
  CHECK(f.model.cls_bias.trainable);
  for (LinearStack* s : f.model.all_stacks()) {
    CHECK_FALSE(s->base.trainable);
    for (auto& d : s->deltas) {
      CHECK(d.B.trainable == (d.round == 2));
      CHECK(d.A.trainable == (d.round == 2));
    }
  }
}

TEST_CASE("switching to finetune resets the class head regardless of prior state") {
  Fixture f;
  LoraConfig lcfg;
  f.model.attach_adapter(lcfg, 1);
  LoraConfig l2 = lcfg;
  l2.targets.insert(AdapterTarget::Projector);
  f.model.attach_adapter(l2, 2);

  const auto initial = f.model.head_cls.val.checksum();
  f.model.set_stage(Stage::Finetune);
  const auto first = f.model.head_cls.val.checksum();
  CHECK(first != initial);
  f.model.head_cls.val.at(0, 0) = 42.0;
  f.model.set_stage(Stage::Finetune);
  CHECK(f.model.head_cls.val.at(0, 0) != 42.0);
}

TEST_CASE("finetune steps leave base and first-round adapters bitwise unchanged") {
  Fixture f;
  LoraConfig lcfg;
  lcfg.dropout = 0.0;
  f.model.attach_adapter(lcfg, 1);
  f.model.set_stage(Stage::Pretrain);
  // give the first-round adapters some nonzero state
  Rng rng(5);
  for (LinearStack* s : f.model.all_stacks())
    for (auto& d : s->deltas) d.B.val.fill_gaussian(rng, 0.05);

  LoraConfig l2 = lcfg;
  l2.targets.insert(AdapterTarget::Projector);
  f.model.attach_adapter(l2, 2);
  f.model.set_stage(Stage::Finetune);

  std::vector<std::uint64_t> frozen;
  for (LinearStack* s : f.model.all_stacks()) {
    frozen.push_back(s->base.val.checksum());
    for (auto& d : s->deltas)
      if (d.round == 1) {
        frozen.push_back(d.B.val.checksum());
        frozen.push_back(d.A.val.checksum());
      }
  }
  frozen.push_back(f.model.embed.val.checksum());
  frozen.push_back(f.model.head_pre.val.checksum());

  OptimConfig opt;
  opt.lr = 1e-2;
  AdamState state;
  const TokenSeq seq = f.walk_seq(2, 6);
  for (int step = 0; step < 100; ++step) {
    f.model.zero_grads();
    detail::class_loss(f.model, seq, 0, nullptr, 1.0);
    adam_step(f.model.trainable_params(), state, opt);
  }

  // gradient path: frozen tensors received exactly zero gradient
  for (LinearStack* s : f.model.all_stacks()) {
    CHECK(s->base.grad.checksum() == Mat(s->base.grad.rows, s->base.grad.cols).checksum());
    for (auto& d : s->deltas)
      if (d.round == 1) {
        CHECK(d.B.grad.checksum() == Mat(d.B.grad.rows, d.B.grad.cols).checksum());
        CHECK(d.A.grad.checksum() == Mat(d.A.grad.rows, d.A.grad.cols).checksum());
      }
  }

  std::vector<std::uint64_t> now;
  for (LinearStack* s : f.model.all_stacks()) {
    now.push_back(s->base.val.checksum());
    for (auto& d : s->deltas)
      if (d.round == 1) {
        now.push_back(d.B.val.checksum());
        now.push_back(d.A.val.checksum());
      }
  }
  now.push_back(f.model.embed.val.checksum());
  now.push_back(f.model.head_pre.val.checksum());
  CHECK(frozen == now);
}

TEST_CASE("one training step moves some second-round B off zero") {
  Fixture f;
  LoraConfig lcfg;
  lcfg.dropout = 0.0;
  f.model.attach_adapter(lcfg, 1);
  LoraConfig l2 = lcfg;
  l2.targets.insert(AdapterTarget::Projector);
  f.model.attach_adapter(l2, 2);
  f.model.set_stage(Stage::Finetune);

  OptimConfig opt;
  opt.lr = 1e-3;
  AdamState state;
  f.model.zero_grads();
  const TokenSeq seq = f.walk_seq(4, 6);
  const double loss = detail::class_loss(f.model, seq, 1, nullptr, 1.0).loss_sum;
  CHECK(loss > 0.0);
  adam_step(f.model.trainable_params(), state, opt);

  bool any_nonzero = false;
  for (LinearStack* s : f.model.all_stacks())
    for (auto& d : s->deltas)
      if (d.round == 2)
        for (double x : d.B.val.a) any_nonzero |= x != 0.0;
  CHECK(any_nonzero);
}

TEST_CASE("initial embeddings: hashing and seeded rows") {
  Graph g = testsup::make_path(4);
  g.set_attributes({{0, "graph neural network"},
                    {1, "graph neural network"},
                    {2, "graph network model"},
                    {3, "protein folding"}});
  const Vocab vocab = Vocab::build(g, false);
  ModelConfig cfg;
  cfg.vocab_size = static_cast<int>(vocab.size());

  const Mat e1 = Model::build_initial_embeddings(g, vocab, cfg, 9);
  const Mat e2 = Model::build_initial_embeddings(g, vocab, cfg, 9);
  for (std::size_t i = 0; i < e1.a.size(); ++i) CHECK(e1.a[i] == e2.a[i]);

  const int d = cfg.embed_dim;
  auto row = [&](NodeId v) {
    return std::vector<double>(e1.row(static_cast<int>(vocab.graph_token(v))),
                               e1.row(static_cast<int>(vocab.graph_token(v))) + d);
  };
  // identical attribute text -> identical initial rows
  CHECK(row(0) == row(1));

  auto cosine = [&](const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (int i = 0; i < d; ++i) {
      dot += a[i] * b[i];
      na += a[i] * a[i];
      nb += b[i] * b[i];
    }
    return dot / std::sqrt(na * nb);
  };
  CHECK(cosine(row(0), row(2)) > cosine(row(0), row(3)));
}

TEST_CASE("nodes without attributes get reproducible per-id gaussian rows") {
  Graph g = testsup::make_path(3);
  g.set_attributes({{0, "something here"}});
  const Vocab vocab = Vocab::build(g, false);
  ModelConfig cfg;
  cfg.vocab_size = static_cast<int>(vocab.size());
  const Mat a = Model::build_initial_embeddings(g, vocab, cfg, 4);
  const Mat b = Model::build_initial_embeddings(g, vocab, cfg, 4);
  const int r = static_cast<int>(vocab.graph_token(2));
  for (int j = 0; j < cfg.embed_dim; ++j) CHECK(a.at(r, j) == b.at(r, j));
  const Mat c = Model::build_initial_embeddings(g, vocab, cfg, 5);
  bool differs = false;
  for (int j = 0; j < cfg.embed_dim; ++j) differs |= a.at(r, j) != c.at(r, j);
  CHECK(differs);
}

TEST_CASE("checkpoint round trip is bitwise") {
  testsup::TempDir dir;
  Fixture f;
  LoraConfig lcfg;
  f.model.attach_adapter(lcfg, 1);
  f.model.set_stage(Stage::Pretrain);
  Rng rng(6);
  for (LinearStack* s : f.model.all_stacks())
    for (auto& d : s->deltas) d.B.val.fill_gaussian(rng, 0.02);

  const std::string path = dir.file("m.ckpt");
  f.model.save_checkpoint(path);
  Model loaded = Model::load_checkpoint(path);
  CHECK(loaded.stage == Stage::Pretrain);
  CHECK(loaded.attach_rounds == 1);

  const TokenSeq seq = f.walk_seq(9, 6);
  const Mat a = f.model.logits_pretrain(f.model.forward_hidden(seq, nullptr, nullptr));
  const Mat b = loaded.logits_pretrain(loaded.forward_hidden(seq, nullptr, nullptr));
  CHECK(mats_equal(a, b));
}

TEST_CASE("checkpoint corruption and version mismatch are explicit errors") {
  testsup::TempDir dir;
  Fixture f;
  const std::string path = dir.file("m.ckpt");
  f.model.save_checkpoint(path);

  SUBCASE("truncated file") {
    const std::string full = testsup::read_file(path);
    testsup::write_file(dir.file("trunc.ckpt"), full.substr(0, full.size() / 2));
    CHECK_THROWS_WITH_AS(Model::load_checkpoint(dir.file("trunc.ckpt")),
                         doctest::Contains("corrupt"), DataError);
  }
  SUBCASE("version mismatch") {
    std::string full = testsup::read_file(path);
    full[8] = 9;  // version field follows the 8-byte magic
    testsup::write_file(dir.file("vers.ckpt"), full);
    CHECK_THROWS_WITH_AS(Model::load_checkpoint(dir.file("vers.ckpt")),
                         doctest::Contains("version mismatch"), DataError);
  }
  SUBCASE("not a checkpoint") {
    testsup::write_file(dir.file("junk.ckpt"), "not a checkpoint at all");
    CHECK_THROWS_AS(Model::load_checkpoint(dir.file("junk.ckpt")), DataError);
  }
}
