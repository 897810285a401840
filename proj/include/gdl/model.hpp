#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "gdl/common.hpp"
#include "gdl/graph.hpp"
#include "gdl/mat.hpp"
#include "gdl/rng.hpp"
#include "gdl/vocab.hpp"

namespace gdl {

enum class Stage : std::uint32_t { None = 0, Pretrain = 1, Finetune = 2 };

struct ModelConfig {
  int embed_dim = 64;       // d
  int layers = 2;
  int heads = 2;
  int ff_dim = 0;           // 0 -> 4*d
  int max_seq_len = 128;
  int vocab_size = 0;
  int class_count = 0;

  int ff() const { return ff_dim > 0 ? ff_dim : 4 * embed_dim; }

  void validate() const {
    if (embed_dim < 1 || layers < 1 || heads < 1) throw ConfigError("model dims must be positive");
    if (embed_dim % heads != 0) throw ConfigError("embed_dim must be divisible by heads");
    if (max_seq_len < 1) throw ConfigError("max_seq_len must be >= 1");
    if (vocab_size < 1) throw ConfigError("vocab_size must be >= 1");
  }
};

enum class AdapterTarget : std::uint8_t { Attention, FeedForward, Projector };

struct LoraConfig {
  int rank = 8;
  double alpha = 16.0;
  double dropout = 0.2;
  std::set<AdapterTarget> targets = {AdapterTarget::Attention, AdapterTarget::FeedForward};

  void validate() const {
    if (rank < 1) throw ConfigError("lora rank must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("lora dropout must be in [0, 1)");
    if (targets.empty()) throw ConfigError("lora targets must not be empty");
  }
};

// One low-rank delta on a base weight: contribution scale * (x B) A, with
// B zero-initialized so attaching never changes outputs.
struct Delta {
  Param B;  // in x r
  Param A;  // r x out
  double scale = 1.0;
  double dropout = 0.0;
  std::uint32_t round = 0;
};

struct LinCache {
  Mat X;                   // stack input
  std::vector<Mat> Xd;     // per delta, after dropout (equals X in eval)
  std::vector<Mat> mask;   // per delta, empty when no dropout applied
  std::vector<Mat> XB;     // per delta, Xd * B
};

// Frozen-base weight with an ordered stack of low-rank deltas:
// effective W = base + sum(scale_i * B_i A_i).
struct LinearStack {
  std::string name;
  Param base;
  std::vector<Delta> deltas;

  int in_dim() const { return base.val.rows; }
  int out_dim() const { return base.val.cols; }

  Mat forward(const Mat& X, LinCache* cache, Rng* drop_rng) const {
    Mat Y;
    matmul(X, base.val, Y);
    if (cache) {
      cache->X = X;
      cache->Xd.resize(deltas.size());
      cache->mask.resize(deltas.size());
      cache->XB.resize(deltas.size());
    }
    for (std::size_t di = 0; di < deltas.size(); ++di) {
      const Delta& d = deltas[di];
      const Mat* Xin = &X;
      Mat dropped;
      Mat mask;
      if (drop_rng && d.dropout > 0.0) {
        const double keep_scale = 1.0 / (1.0 - d.dropout);
        mask = Mat(X.rows, X.cols);
        dropped = X;
        for (std::size_t i = 0; i < X.a.size(); ++i) {
          const double m = drop_rng->next_double() < d.dropout ? 0.0 : keep_scale;
          mask.a[i] = m;
          dropped.a[i] *= m;
        }
        Xin = &dropped;
      }
      Mat xb;
      matmul(*Xin, d.B.val, xb);
      Mat out;
      matmul(xb, d.A.val, out);
      add_inplace(Y, out, d.scale);
      if (cache) {
        cache->Xd[di] = *Xin;
        cache->mask[di] = std::move(mask);
        cache->XB[di] = std::move(xb);
      }
    }
    return Y;
  }

  // Accumulates parameter grads (trainable only) and returns dX.
  Mat backward(const LinCache& cache, const Mat& dY) {
    Mat dX;
    matmul_nt(dY, base.val, dX);
    if (base.trainable) matmul_tn_acc(cache.X, dY, base.grad);
    for (std::size_t di = 0; di < deltas.size(); ++di) {
      Delta& d = deltas[di];
      if (d.A.trainable) {
        Mat tmp(d.A.grad.rows, d.A.grad.cols);
        matmul_tn_acc(cache.XB[di], dY, tmp);
        add_inplace(d.A.grad, tmp, d.scale);
      }
      Mat dXB;
      matmul_nt(dY, d.A.val, dXB);
      for (auto& x : dXB.a) x *= d.scale;
      if (d.B.trainable) matmul_tn_acc(cache.Xd[di], dXB, d.B.grad);
      Mat dXd;
      matmul_nt(dXB, d.B.val, dXd);
      if (cache.mask[di].size() > 0)
        for (std::size_t i = 0; i < dXd.a.size(); ++i) dXd.a[i] *= cache.mask[di].a[i];
      add_inplace(dX, dXd);
    }
    return dX;
  }
};

namespace detail {

constexpr double kNormEps = 1e-5;

inline void rms_norm(const Mat& X, Mat& Y, std::vector<double>& inv) {
  Y = Mat(X.rows, X.cols);
  inv.resize(X.rows);
  for (int i = 0; i < X.rows; ++i) {
    const double* x = X.row(i);
    double ms = 0;
    for (int j = 0; j < X.cols; ++j) ms += x[j] * x[j];
    ms /= X.cols;
    const double s = 1.0 / std::sqrt(ms + kNormEps);
    inv[i] = s;
    double* y = Y.row(i);
    for (int j = 0; j < X.cols; ++j) y[j] = x[j] * s;
  }
}

inline void rms_norm_backward(const Mat& X, const std::vector<double>& inv, const Mat& dY,
                              Mat& dX) {
  dX = Mat(X.rows, X.cols);
  for (int i = 0; i < X.rows; ++i) {
    const double* x = X.row(i);
    const double* dy = dY.row(i);
    double dot = 0;
    for (int j = 0; j < X.cols; ++j) dot += dy[j] * x[j];
    const double s = inv[i];
    const double k = dot * s * s * s / X.cols;
    double* dx = dX.row(i);
    for (int j = 0; j < X.cols; ++j) dx[j] = dy[j] * s - k * x[j];
  }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475)); }
inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475));
  const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
  return cdf + x * pdf;
}

}  // namespace detail

struct BlockCache {
  Mat X;                       // block input
  std::vector<double> inv1;    // rms stats before attention
  Mat N1;
  LinCache cq, ck, cv, co;
  Mat Q, K, V;
  std::vector<Mat> att;        // per head, T x T rows softmaxed over <= i
  Mat Ccat;
  Mat X2;                      // after attention residual
  std::vector<double> inv2;
  Mat N2;
  LinCache c1, c2;
  Mat F1, G;
};

struct FwdCache {
  TokenSeq seq;
  std::vector<int> graph_pos;  // positions whose embedding passed the projector
  Mat Eg;                      // gathered graph-token embedding rows
  LinCache proj_cache;
  Mat X0;                      // embeddings + positions, decoder input
  std::vector<BlockCache> blocks;
  Mat Xf;                      // final block output
  std::vector<double> inv_f;
  Mat H;                       // final hidden states
};

struct Block {
  LinearStack wq, wk, wv, wo, w1, w2;
};

/// Decoder-only autoregressive model over the graph-token vocabulary.
/// Embedding rows for graph tokens pass through the projector stack before
/// entering the decoder; the pretrain head scores the full vocabulary and
/// the classification head reads the final (CLS) position.
class Model {
 public:
  ModelConfig cfg;
  Param embed;       // vocab x d
  Param pos;         // max_seq_len x d
  LinearStack proj;  // d x d, identity-initialized base
  std::vector<Block> blocks;
  Param head_pre;    // d x vocab
  Param head_cls;    // d x C
  Param cls_bias;    // 1 x C
  Stage stage = Stage::None;
  std::uint32_t attach_rounds = 0;
  std::uint32_t cls_reinit_count = 0;
  std::uint64_t model_seed = 0;

  static constexpr double kTrunkStd = 0.08;
  static constexpr double kHeadStd = 0.02;

  Model() = default;

  static Model init(const Graph& g, const Vocab& vocab, ModelConfig cfg, std::uint64_t seed) {
    cfg.vocab_size = static_cast<int>(vocab.size());
    if (cfg.class_count == 0) cfg.class_count = static_cast<int>(g.class_count());
    cfg.validate();
    Model m;
    m.cfg = cfg;
    m.model_seed = seed;
    const int d = cfg.embed_dim;

    m.embed = Param("embed", cfg.vocab_size, d);
    m.embed.val = build_initial_embeddings(g, vocab, cfg, seed);
    m.pos = Param("pos", cfg.max_seq_len, d);
    m.gauss_init(m.pos, kHeadStd);

    m.proj.name = "proj";
    m.proj.base = Param("proj.base", d, d);
    m.proj.base.val.set_identity();

    m.blocks.resize(cfg.layers);
    for (int i = 0; i < cfg.layers; ++i) {
      auto& b = m.blocks[i];
      const std::string p = "blocks." + std::to_string(i) + ".";
      auto mk = [&](LinearStack& s, const std::string& nm, int in, int out) {
        s.name = p + nm;
        s.base = Param(s.name + ".base", in, out);
        m.gauss_init(s.base, kTrunkStd);
      };
      mk(b.wq, "wq", d, d);
      mk(b.wk, "wk", d, d);
      mk(b.wv, "wv", d, d);
      mk(b.wo, "wo", d, d);
      mk(b.w1, "w1", d, cfg.ff());
      mk(b.w2, "w2", cfg.ff(), d);
    }

    m.head_pre = Param("head_pre", d, cfg.vocab_size);
    m.gauss_init(m.head_pre, kHeadStd);
    m.head_cls = Param("head_cls", d, std::max(1, cfg.class_count));
    m.gauss_init(m.head_cls, kHeadStd);
    m.cls_bias = Param("cls_bias", 1, std::max(1, cfg.class_count));
    m.cls_bias.is_bias = true;
    return m;
  }

  /// Initial embedding table: graph-token rows are L2-normalized hashed
  /// bag-of-words vectors of the node's attribute text; rows without text
  /// (and all special/text rows) are per-id seeded Gaussians at scale
  /// 1/sqrt(d).
  static Mat build_initial_embeddings(const Graph& g, const Vocab& vocab,
                                      const ModelConfig& cfg, std::uint64_t seed) {
    const int d = cfg.embed_dim;
    const double row_std = 1.0 / std::sqrt(static_cast<double>(d));
    Mat E(static_cast<int>(vocab.size()), d);
    for (TokenId id = 0; id < vocab.size(); ++id) {
      double* row = E.row(static_cast<int>(id));
      bool hashed = false;
      if (vocab.is_graph(id)) {
        const NodeId v = vocab.node_of(id);
        if (auto text = g.attribute(v)) {
          double norm2 = 0;
          for (const auto& w : split_words_lower(*text)) {
            const std::uint64_t h = fnv1a64_str(w);
            const int dim = static_cast<int>(h % static_cast<std::uint64_t>(d));
            row[dim] += ((h >> 32) & 1) ? 1.0 : -1.0;
          }
          for (int j = 0; j < d; ++j) norm2 += row[j] * row[j];
          if (norm2 > 0) {
            const double inv = 1.0 / std::sqrt(norm2);
            for (int j = 0; j < d; ++j) row[j] *= inv;
            hashed = true;
          }
        }
      }
      if (!hashed) {
        Rng rng(stream_seed(seed, 0xE3BEDull, id));
        for (int j = 0; j < d; ++j) row[j] = rng.gaussian() * row_std;
      }
    }
    return E;
  }

  /// Appends a zero-initialized delta to every stack named in cfg.targets.
  /// Outputs are unchanged until the delta trains. Returns the round id.
  std::uint32_t attach_adapter(const LoraConfig& lcfg, std::uint64_t seed) {
    lcfg.validate();
    auto stacks = stacks_for_targets(lcfg.targets);
    if (stacks.empty()) throw ConfigError("attach_adapter: no matching target matrices");
    const std::uint32_t round = attach_rounds + 1;
    for (LinearStack* s : stacks) {
      if (lcfg.rank > std::min(s->in_dim(), s->out_dim()))
        throw ConfigError("lora rank " + std::to_string(lcfg.rank) + " exceeds dims of " + s->name);
      Delta dlt;
      const std::string dn = s->name + ".d" + std::to_string(s->deltas.size());
      dlt.B = Param(dn + ".B", s->in_dim(), lcfg.rank);
      dlt.A = Param(dn + ".A", lcfg.rank, s->out_dim());
      Rng rng(stream_seed(seed, fnv1a64_str(dn)));
      dlt.A.val.fill_gaussian(rng, 1.0 / std::sqrt(static_cast<double>(lcfg.rank)));
      dlt.scale = lcfg.alpha / static_cast<double>(lcfg.rank);
      dlt.dropout = lcfg.dropout;
      dlt.round = round;
      s->deltas.push_back(std::move(dlt));
    }
    attach_rounds = round;
    return round;
  }

  /// Pretrain trains {first-round deltas, projector base, pretrain head,
  /// embeddings}; finetune trains {last-round deltas, projector delta,
  /// class head} and reinitializes the class head. Everything else freezes.
  void set_stage(Stage s) {
    if (s == Stage::Pretrain) {
      if (attach_rounds < 1) throw ConfigError("pretrain stage requires an attached adapter");
    } else if (s == Stage::Finetune) {
      if (attach_rounds < 2)
        throw ConfigError("finetune stage requires a second adapter round on top of pretraining");
      if (proj.deltas.empty())
        throw ConfigError("finetune stage requires an adapter on the projector");
      if (cfg.class_count < 1) throw ConfigError("finetune stage requires labeled classes");
      ++cls_reinit_count;
      Rng rng(stream_seed(model_seed, 0xC15FEADull, cls_reinit_count));
      head_cls.val.fill_gaussian(rng, kHeadStd);
      cls_bias.val.zero();
    } else {
      throw ConfigError("cannot set stage to none");
    }
    apply_stage_flags(s);
  }

  void apply_stage_flags(Stage s) {
    stage = s;
    for (Param* p : all_params()) p->trainable = false;
    if (s == Stage::Pretrain) {
      embed.trainable = pos.trainable = proj.base.trainable = head_pre.trainable = true;
      for (LinearStack* st : all_stacks())
        for (Delta& d : st->deltas)
          if (d.round == 1) d.B.trainable = d.A.trainable = true;
    } else if (s == Stage::Finetune) {
      head_cls.trainable = cls_bias.trainable = true;
      for (LinearStack* st : all_stacks())
        for (Delta& d : st->deltas)
          if (d.round == attach_rounds) d.B.trainable = d.A.trainable = true;
    }
  }

  // ---- forward / backward ----

  Mat forward_hidden(const TokenSeq& seq, FwdCache* cache, Rng* drop_rng) const {
    const int T = static_cast<int>(seq.size());
    if (T < 1) throw DataError("forward: empty sequence");
    if (T > cfg.max_seq_len)
      throw DataError("forward: sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
    const int d = cfg.embed_dim;

    Mat X(T, d);
    std::vector<int> graph_pos;
    for (int t = 0; t < T; ++t) {
      const TokenId id = seq.ids[t];
      if (id >= static_cast<TokenId>(cfg.vocab_size))
        throw DataError("forward: token id out of range");
      if (seq.kinds[t] == TokenKind::Graph) graph_pos.push_back(t);
    }

    Mat Eg(static_cast<int>(graph_pos.size()), d);
    for (std::size_t i = 0; i < graph_pos.size(); ++i)
      std::copy_n(embed.val.row(static_cast<int>(seq.ids[graph_pos[i]])), d, Eg.row(static_cast<int>(i)));
    LinCache proj_cache;
    Mat Ug = proj.forward(Eg, cache ? &proj_cache : nullptr, drop_rng);

    std::size_t gi = 0;
    for (int t = 0; t < T; ++t) {
      double* x = X.row(t);
      if (seq.kinds[t] == TokenKind::Graph) {
        std::copy_n(Ug.row(static_cast<int>(gi)), d, x);
        ++gi;
      } else {
        std::copy_n(embed.val.row(static_cast<int>(seq.ids[t])), d, x);
      }
      const double* p = pos.val.row(t);
      for (int j = 0; j < d; ++j) x[j] += p[j];
    }

    if (cache) {
      cache->seq = seq;
      cache->graph_pos = std::move(graph_pos);
      cache->Eg = std::move(Eg);
      cache->proj_cache = std::move(proj_cache);
      cache->X0 = X;
      cache->blocks.assign(blocks.size(), {});
    }

    const int H = cfg.heads;
    const int dh = d / H;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
      const Block& b = blocks[bi];
      BlockCache* bc = cache ? &cache->blocks[bi] : nullptr;
      if (bc) bc->X = X;

      Mat N1;
      std::vector<double> inv1;
      detail::rms_norm(X, N1, inv1);

      LinCache cq, ck, cv;
      Mat Q = b.wq.forward(N1, bc ? &cq : nullptr, drop_rng);
      Mat K = b.wk.forward(N1, bc ? &ck : nullptr, drop_rng);
      Mat V = b.wv.forward(N1, bc ? &cv : nullptr, drop_rng);

      Mat Ccat(T, d);
      std::vector<Mat> att(H);
      for (int h = 0; h < H; ++h) {
        Mat& A = att[h];
        A = Mat(T, T);
        const int off = h * dh;
        for (int i = 0; i < T; ++i) {
          double* arow = A.row(i);
          const double* qi = Q.row(i) + off;
          for (int j = 0; j <= i; ++j) {
            const double* kj = K.row(j) + off;
            double s = 0;
            for (int e = 0; e < dh; ++e) s += qi[e] * kj[e];
            arow[j] = s * inv_sqrt_dh;
          }
          softmax_inplace(arow, i + 1);
        }
        for (int i = 0; i < T; ++i) {
          double* out = Ccat.row(i) + off;
          const double* arow = A.row(i);
          for (int j = 0; j <= i; ++j) {
            const double* vj = V.row(j) + off;
            const double aij = arow[j];
            for (int e = 0; e < dh; ++e) out[e] += aij * vj[e];
          }
        }
      }

      LinCache co;
      Mat O = b.wo.forward(Ccat, bc ? &co : nullptr, drop_rng);
      Mat X2 = X;
      add_inplace(X2, O);

      Mat N2;
      std::vector<double> inv2;
      detail::rms_norm(X2, N2, inv2);
      LinCache c1, c2;
      Mat F1 = b.w1.forward(N2, bc ? &c1 : nullptr, drop_rng);
      Mat G(F1.rows, F1.cols);
      for (std::size_t i = 0; i < F1.a.size(); ++i) G.a[i] = detail::gelu(F1.a[i]);
      Mat FO = b.w2.forward(G, bc ? &c2 : nullptr, drop_rng);
      Mat X3 = X2;
      add_inplace(X3, FO);

      if (bc) {
        bc->inv1 = std::move(inv1);
        bc->N1 = std::move(N1);
        bc->cq = std::move(cq);
        bc->ck = std::move(ck);
        bc->cv = std::move(cv);
        bc->co = std::move(co);
        bc->Q = std::move(Q);
        bc->K = std::move(K);
        bc->V = std::move(V);
        bc->att = std::move(att);
        bc->Ccat = std::move(Ccat);
        bc->X2 = X2;
        bc->inv2 = std::move(inv2);
        bc->N2 = std::move(N2);
        bc->c1 = std::move(c1);
        bc->c2 = std::move(c2);
        bc->F1 = std::move(F1);
        bc->G = std::move(G);
      }
      X = std::move(X3);
    }

    Mat Hfin;
    std::vector<double> inv_f;
    detail::rms_norm(X, Hfin, inv_f);
    if (cache) {
      cache->Xf = std::move(X);
      cache->inv_f = std::move(inv_f);
      cache->H = Hfin;
    }
    return Hfin;
  }

  // Pretrain head: per-position scores over the full vocabulary.
  Mat logits_pretrain(const Mat& H) const {
    Mat L;
    matmul(H, head_pre.val, L);
    return L;
  }

  // Classification head: class scores read from the final (CLS) position.
  Mat logits_class(const Mat& H) const {
    Mat h(1, cfg.embed_dim);
    std::copy_n(H.row(H.rows - 1), cfg.embed_dim, h.row(0));
    Mat z;
    matmul(h, head_cls.val, z);
    for (int c = 0; c < z.cols; ++c) z.at(0, c) += cls_bias.val.at(0, c);
    return z;
  }

  void backward_pretrain(FwdCache& cache, const Mat& dlogits) {
    Mat dH;
    matmul_nt(dlogits, head_pre.val, dH);
    if (head_pre.trainable) matmul_tn_acc(cache.H, dlogits, head_pre.grad);
    backward_hidden(cache, dH);
  }

  void backward_class(FwdCache& cache, const Mat& dz) {
    const int T = cache.H.rows;
    Mat dH(T, cfg.embed_dim);
    Mat h(1, cfg.embed_dim);
    std::copy_n(cache.H.row(T - 1), cfg.embed_dim, h.row(0));
    if (head_cls.trainable) matmul_tn_acc(h, dz, head_cls.grad);
    if (cls_bias.trainable)
      for (int c = 0; c < dz.cols; ++c) cls_bias.grad.at(0, c) += dz.at(0, c);
    Mat dh;
    matmul_nt(dz, head_cls.val, dh);
    std::copy_n(dh.row(0), cfg.embed_dim, dH.row(T - 1));
    backward_hidden(cache, dH);
  }

  // ---- parameter plumbing ----

  std::vector<LinearStack*> all_stacks() {
    std::vector<LinearStack*> v{&proj};
    for (auto& b : blocks)
      for (LinearStack* s : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2}) v.push_back(s);
    return v;
  }

  std::vector<LinearStack*> stacks_for_targets(const std::set<AdapterTarget>& targets) {
    std::vector<LinearStack*> v;
    if (targets.count(AdapterTarget::Projector)) v.push_back(&proj);
    for (auto& b : blocks) {
      if (targets.count(AdapterTarget::Attention))
        for (LinearStack* s : {&b.wq, &b.wk, &b.wv, &b.wo}) v.push_back(s);
      if (targets.count(AdapterTarget::FeedForward))
        for (LinearStack* s : {&b.w1, &b.w2}) v.push_back(s);
    }
    return v;
  }

  std::vector<Param*> all_params() {
    std::vector<Param*> out{&embed, &pos};
    for (LinearStack* s : all_stacks()) {
      out.push_back(&s->base);
      for (Delta& d : s->deltas) {
        out.push_back(&d.B);
        out.push_back(&d.A);
      }
    }
    out.push_back(&head_pre);
    out.push_back(&head_cls);
    out.push_back(&cls_bias);
    return out;
  }

  std::vector<Param*> trainable_params() {
    std::vector<Param*> out;
    for (Param* p : all_params())
      if (p->trainable) out.push_back(p);
    return out;
  }

  void zero_grads() {
    for (Param* p : all_params()) p->zero_grad();
  }

  // ---- checkpoint io ----

  void save_checkpoint(const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary);
      if (!out) throw DataError("cannot write file: " + tmp);
      write_u64(out, kMagic);
      write_u32(out, kVersion);
      for (int v : {cfg.embed_dim, cfg.layers, cfg.heads, cfg.ff_dim, cfg.max_seq_len,
                    cfg.vocab_size, cfg.class_count})
        write_u32(out, static_cast<std::uint32_t>(v));
      write_u32(out, static_cast<std::uint32_t>(stage));
      write_u32(out, attach_rounds);
      write_u32(out, cls_reinit_count);
      write_u64(out, model_seed);
      auto stacks = all_stacks();
      write_u32(out, static_cast<std::uint32_t>(stacks.size()));
      for (LinearStack* s : stacks) {
        write_u32(out, static_cast<std::uint32_t>(s->deltas.size()));
        for (const Delta& d : s->deltas) {
          write_u32(out, static_cast<std::uint32_t>(d.B.val.cols));
          write_f64(out, d.scale);
          write_f64(out, d.dropout);
          write_u32(out, d.round);
        }
      }
      auto params = all_params();
      write_u32(out, static_cast<std::uint32_t>(params.size()));
      for (Param* p : params) write_tensor(out, *p);
      write_u64(out, kTrailer);
      if (!out) throw DataError("write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
      throw DataError("cannot rename " + tmp + " to " + path);
  }

  static Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    if (read_u64(in, path) != kMagic) throw DataError(path + ": not a gdl checkpoint");
    const std::uint32_t version = read_u32(in, path);
    if (version != kVersion)
      throw DataError(path + ": checkpoint version mismatch (got " + std::to_string(version) +
                      ", expected " + std::to_string(kVersion) + ")");
    Model m;
    m.cfg.embed_dim = static_cast<int>(read_u32(in, path));
    m.cfg.layers = static_cast<int>(read_u32(in, path));
    m.cfg.heads = static_cast<int>(read_u32(in, path));
    m.cfg.ff_dim = static_cast<int>(read_u32(in, path));
    m.cfg.max_seq_len = static_cast<int>(read_u32(in, path));
    m.cfg.vocab_size = static_cast<int>(read_u32(in, path));
    m.cfg.class_count = static_cast<int>(read_u32(in, path));
    const Stage stage = static_cast<Stage>(read_u32(in, path));
    m.attach_rounds = read_u32(in, path);
    m.cls_reinit_count = read_u32(in, path);
    m.model_seed = read_u64(in, path);

    // Rebuild structure with empty tensors, then fill by name.
    m.init_structure();
    auto stacks = m.all_stacks();
    const std::uint32_t n_stacks = read_u32(in, path);
    if (n_stacks != stacks.size()) throw DataError(path + ": stack count mismatch");
    for (LinearStack* s : stacks) {
      const std::uint32_t nd = read_u32(in, path);
      for (std::uint32_t i = 0; i < nd; ++i) {
        Delta d;
        const std::uint32_t rank = read_u32(in, path);
        d.scale = read_f64(in, path);
        d.dropout = read_f64(in, path);
        d.round = read_u32(in, path);
        const std::string dn = s->name + ".d" + std::to_string(i);
        d.B = Param(dn + ".B", s->in_dim(), static_cast<int>(rank));
        d.A = Param(dn + ".A", static_cast<int>(rank), s->out_dim());
        s->deltas.push_back(std::move(d));
      }
    }
    auto params = m.all_params();
    const std::uint32_t n_params = read_u32(in, path);
    if (n_params != params.size()) throw DataError(path + ": tensor count mismatch");
    for (Param* p : params) read_tensor(in, path, *p);
    if (read_u64(in, path) != kTrailer) throw DataError(path + ": corrupt checkpoint (bad trailer)");
    if (stage != Stage::None) m.apply_stage_flags(stage);
    return m;
  }

 private:
  static constexpr std::uint64_t kMagic = 0x31544B43444C4447ull;  // "GDLCKT1"
  static constexpr std::uint64_t kTrailer = 0x0A646E65646C6447ull;
  static constexpr std::uint32_t kVersion = 1;

  void gauss_init(Param& p, double std_dev) {
    Rng rng(stream_seed(model_seed, fnv1a64_str(p.name)));
    p.val.fill_gaussian(rng, std_dev);
  }

  void init_structure() {
    const int d = cfg.embed_dim;
    embed = Param("embed", cfg.vocab_size, d);
    pos = Param("pos", cfg.max_seq_len, d);
    proj.name = "proj";
    proj.base = Param("proj.base", d, d);
    blocks.assign(cfg.layers, {});
    for (int i = 0; i < cfg.layers; ++i) {
      auto& b = blocks[i];
      const std::string p = "blocks." + std::to_string(i) + ".";
      auto mk = [&](LinearStack& s, const std::string& nm, int in, int out) {
        s.name = p + nm;
        s.base = Param(s.name + ".base", in, out);
      };
      mk(b.wq, "wq", d, d);
      mk(b.wk, "wk", d, d);
      mk(b.wv, "wv", d, d);
      mk(b.wo, "wo", d, d);
      mk(b.w1, "w1", d, cfg.ff());
      mk(b.w2, "w2", cfg.ff(), d);
    }
    head_pre = Param("head_pre", d, cfg.vocab_size);
    head_cls = Param("head_cls", d, std::max(1, cfg.class_count));
    cls_bias = Param("cls_bias", 1, std::max(1, cfg.class_count));
    cls_bias.is_bias = true;
  }

  void backward_hidden(FwdCache& cache, const Mat& dHin) {
    Mat dX;
    detail::rms_norm_backward(cache.Xf, cache.inv_f, dHin, dX);

    const int d = cfg.embed_dim;
    const int H = cfg.heads;
    const int dh = d / H;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    for (int bi = static_cast<int>(blocks.size()) - 1; bi >= 0; --bi) {
      Block& b = blocks[bi];
      BlockCache& bc = cache.blocks[bi];
      const int T = bc.X.rows;

      // feed-forward sub-block
      Mat dG = b.w2.backward(bc.c2, dX);
      Mat dF1(dG.rows, dG.cols);
      for (std::size_t i = 0; i < dG.a.size(); ++i)
        dF1.a[i] = dG.a[i] * detail::gelu_grad(bc.F1.a[i]);
      Mat dN2 = b.w1.backward(bc.c1, dF1);
      Mat dX2;
      detail::rms_norm_backward(bc.X2, bc.inv2, dN2, dX2);
      add_inplace(dX2, dX);  // residual

      // attention sub-block
      Mat dCcat = b.wo.backward(bc.co, dX2);
      Mat dQ(T, d), dK(T, d), dV(T, d);
      for (int h = 0; h < H; ++h) {
        const int off = h * dh;
        const Mat& A = bc.att[h];
        for (int i = 0; i < T; ++i) {
          const double* dctx = dCcat.row(i) + off;
          const double* arow = A.row(i);
          // dV and dA
          std::vector<double> dArow(i + 1, 0.0);
          for (int j = 0; j <= i; ++j) {
            double* dvj = dV.row(j) + off;
            const double* vj = bc.V.row(j) + off;
            const double aij = arow[j];
            double s = 0;
            for (int e = 0; e < dh; ++e) {
              dvj[e] += aij * dctx[e];
              s += dctx[e] * vj[e];
            }
            dArow[j] = s;
          }
          // softmax backward over entries 0..i
          double dot = 0;
          for (int j = 0; j <= i; ++j) dot += dArow[j] * arow[j];
          double* dqi = dQ.row(i) + off;
          const double* qi = bc.Q.row(i) + off;
          for (int j = 0; j <= i; ++j) {
            const double ds = arow[j] * (dArow[j] - dot) * inv_sqrt_dh;
            const double* kj = bc.K.row(j) + off;
            double* dkj = dK.row(j) + off;
            for (int e = 0; e < dh; ++e) {
              dqi[e] += ds * kj[e];
              dkj[e] += ds * qi[e];
            }
          }
        }
      }
      Mat dN1 = b.wq.backward(bc.cq, dQ);
      add_inplace(dN1, b.wk.backward(bc.ck, dK));
      add_inplace(dN1, b.wv.backward(bc.cv, dV));
      Mat dXblk;
      detail::rms_norm_backward(bc.X, bc.inv1, dN1, dXblk);
      add_inplace(dXblk, dX2);  // residual
      dX = std::move(dXblk);
    }

    // embeddings and projector
    const int T = cache.X0.rows;
    Mat dEgo(static_cast<int>(cache.graph_pos.size()), d);
    std::size_t gi = 0;
    for (int t = 0; t < T; ++t) {
      const double* dx = dX.row(t);
      if (pos.trainable) {
        double* pg = pos.grad.row(t);
        for (int j = 0; j < d; ++j) pg[j] += dx[j];
      }
      if (gi < cache.graph_pos.size() && cache.graph_pos[gi] == t) {
        std::copy_n(dx, d, dEgo.row(static_cast<int>(gi)));
        ++gi;
      } else if (embed.trainable) {
        double* eg = embed.grad.row(static_cast<int>(cache.seq.ids[t]));
        for (int j = 0; j < d; ++j) eg[j] += dx[j];
      }
    }
    Mat dEg = proj.backward(cache.proj_cache, dEgo);
    if (embed.trainable) {
      for (std::size_t i = 0; i < cache.graph_pos.size(); ++i) {
        const TokenId id = cache.seq.ids[cache.graph_pos[i]];
        double* eg = embed.grad.row(static_cast<int>(id));
        const double* src = dEg.row(static_cast<int>(i));
        for (int j = 0; j < d; ++j) eg[j] += src[j];
      }
    }
  }

  static void write_u32(std::ofstream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }
  static void write_u64(std::ofstream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }
  static void write_f64(std::ofstream& out, double v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }
  static void write_tensor(std::ofstream& out, const Param& p) {
    const auto n = static_cast<std::uint16_t>(p.name.size());
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    out.write(p.name.data(), n);
    write_u32(out, static_cast<std::uint32_t>(p.val.rows));
    write_u32(out, static_cast<std::uint32_t>(p.val.cols));
    out.write(reinterpret_cast<const char*>(p.val.a.data()),
              static_cast<std::streamsize>(p.val.a.size() * sizeof(double)));
  }
  static std::uint32_t read_u32(std::ifstream& in, const std::string& path) {
    std::uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(v)))
      throw DataError(path + ": corrupt or truncated checkpoint");
    return v;
  }
  static std::uint64_t read_u64(std::ifstream& in, const std::string& path) {
    std::uint64_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(v)))
      throw DataError(path + ": corrupt or truncated checkpoint");
    return v;
  }
  static double read_f64(std::ifstream& in, const std::string& path) {
    double v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(v)))
      throw DataError(path + ": corrupt or truncated checkpoint");
    return v;
  }
  static void read_tensor(std::ifstream& in, const std::string& path, Param& p) {
    std::uint16_t n = 0;
    if (!in.read(reinterpret_cast<char*>(&n), sizeof(n)))
      throw DataError(path + ": corrupt or truncated checkpoint");
    std::string name(n, '\0');
    if (!in.read(name.data(), n)) throw DataError(path + ": corrupt or truncated checkpoint");
    if (name != p.name)
      throw DataError(path + ": tensor name mismatch: expected " + p.name + ", got " + name);
    const auto rows = read_u32(in, path);
    const auto cols = read_u32(in, path);
    if (static_cast<int>(rows) != p.val.rows || static_cast<int>(cols) != p.val.cols)
      throw DataError(path + ": tensor shape mismatch for " + p.name);
    if (!in.read(reinterpret_cast<char*>(p.val.a.data()),
                 static_cast<std::streamsize>(p.val.a.size() * sizeof(double))))
      throw DataError(path + ": corrupt or truncated checkpoint");
  }
};

}  // namespace gdl
