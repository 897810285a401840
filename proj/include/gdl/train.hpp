#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "gdl/common.hpp"
#include "gdl/corpus.hpp"
#include "gdl/graph.hpp"
#include "gdl/model.hpp"
#include "gdl/vocab.hpp"

namespace gdl {

struct OptimConfig {
  double lr = 1e-4;
  std::size_t batch_size = 32;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int max_epochs = 50;
  int patience = 3;
  std::uint64_t seed = 1;

  void validate() const {
    if (lr <= 0 || batch_size == 0 || beta1 <= 0 || beta2 <= 0 || eps <= 0)
      throw ConfigError("optimizer settings must be positive");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (max_epochs < 1 || patience < 1) throw ConfigError("max_epochs and patience must be >= 1");
  }
};

struct AdamSlot {
  Mat m, v;
  std::uint64_t t = 0;
};

using AdamState = std::map<std::string, AdamSlot>;

/// One AdamW update over the given parameters:
///   theta <- theta - lr * (mhat / (sqrt(vhat) + eps) + wd * theta_prev)
/// with decoupled decay skipped for bias parameters.
inline void adam_step(const std::vector<Param*>& params, AdamState& state,
                      const OptimConfig& opt) {
  for (Param* p : params) {
    AdamSlot& slot = state[p->name];
    if (slot.m.size() == 0) {
      slot.m = Mat(p->val.rows, p->val.cols);
      slot.v = Mat(p->val.rows, p->val.cols);
    }
    if (slot.m.rows != p->val.rows || slot.m.cols != p->val.cols)
      throw ConfigError("adam state shape mismatch for " + p->name);
    ++slot.t;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(slot.t));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(slot.t));
    const double wd = p->is_bias ? 0.0 : opt.weight_decay;
    for (std::size_t i = 0; i < p->val.a.size(); ++i) {
      const double g = p->grad.a[i];
      slot.m.a[i] = opt.beta1 * slot.m.a[i] + (1.0 - opt.beta1) * g;
      slot.v.a[i] = opt.beta2 * slot.v.a[i] + (1.0 - opt.beta2) * g * g;
      const double mhat = slot.m.a[i] / bc1;
      const double vhat = slot.v.a[i] / bc2;
      p->val.a[i] -= opt.lr * (mhat / (std::sqrt(vhat) + opt.eps) + wd * p->val.a[i]);
    }
  }
}

struct TrainReport {
  std::vector<double> train_loss, train_acc;  // index i -> epoch i+1
  std::vector<double> val_loss, val_acc;      // index i -> epoch i (epoch 0 = pre-run eval)
  int best_epoch = 0;
  std::string stop_reason;
  int epochs_run = 0;
  double wall_seconds = 0;  // never serialized; reports must be byte-deterministic
};

inline void write_train_report(const TrainReport& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  char buf[160];
  auto line = [&](int epoch, const char* split, double loss, double acc) {
    std::snprintf(buf, sizeof(buf), "epoch=%d split=%s loss=%.6f acc=%.6f\n", epoch, split, loss,
                  acc);
    out << buf;
  };
  for (std::size_t e = 0; e < r.val_loss.size(); ++e) {
    if (e >= 1 && e - 1 < r.train_loss.size())
      line(static_cast<int>(e), "train", r.train_loss[e - 1], r.train_acc[e - 1]);
    line(static_cast<int>(e), "val", r.val_loss[e], r.val_acc[e]);
  }
  out << "best_epoch=" << r.best_epoch << " stop=" << r.stop_reason << "\n";
}

namespace detail {

struct LossStats {
  double loss_sum = 0;
  std::size_t terms = 0;
  std::size_t correct = 0;

  double mean() const { return terms ? loss_sum / static_cast<double>(terms) : 0.0; }
  double acc() const { return terms ? static_cast<double>(correct) / static_cast<double>(terms) : 0.0; }
};

inline double logsumexp(const double* x, int n) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double s = 0;
  for (int i = 0; i < n; ++i) s += std::exp(x[i] - mx);
  return mx + std::log(s);
}

inline TokenSeq pretrain_sequence(const Vocab& v, const GraphSentence& s, bool learn_start_token) {
  TokenSeq seq;
  if (learn_start_token) seq.push(Vocab::kPad, TokenKind::Special);
  for (NodeId n : s) seq.push(v.graph_token(n), TokenKind::Graph);
  return seq;
}

// Next-token cross entropy over one encoded sentence. Positions predict
// their successor; with learn_start_token the leading PAD anchors a loss
// term for the first graph token. grad_scale > 0 also backpropagates.
inline LossStats pretrain_sentence_loss(Model& m, const TokenSeq& seq, Rng* drop_rng,
                                        double grad_scale) {
  LossStats st;
  const int T = static_cast<int>(seq.size());
  if (T < 2) return st;
  FwdCache cache;
  const Mat H = m.forward_hidden(seq, grad_scale > 0 ? &cache : nullptr, drop_rng);
  const Mat logits = m.logits_pretrain(H);
  Mat dlogits;
  if (grad_scale > 0) dlogits = Mat(logits.rows, logits.cols);
  const int V = logits.cols;
  for (int t = 0; t + 1 < T; ++t) {
    const TokenId target = seq.ids[t + 1];
    const double* row = logits.row(t);
    const double lse = logsumexp(row, V);
    st.loss_sum += lse - row[target];
    ++st.terms;
    int argmax = 0;
    for (int j = 1; j < V; ++j)
      if (row[j] > row[argmax]) argmax = j;
    if (static_cast<TokenId>(argmax) == target) ++st.correct;
    if (grad_scale > 0) {
      double* drow = dlogits.row(t);
      for (int j = 0; j < V; ++j) drow[j] = std::exp(row[j] - lse) * grad_scale;
      drow[target] -= grad_scale;
    }
  }
  if (grad_scale > 0) m.backward_pretrain(cache, dlogits);
  return st;
}

// Classification cross entropy for one encoded context.
inline LossStats class_loss(Model& m, const TokenSeq& seq, NodeId label, Rng* drop_rng,
                            double grad_scale) {
  LossStats st;
  FwdCache cache;
  const Mat H = m.forward_hidden(seq, grad_scale > 0 ? &cache : nullptr, drop_rng);
  const Mat z = m.logits_class(H);
  const int C = z.cols;
  if (static_cast<int>(label) >= C) throw DataError("label out of range");
  const double lse = logsumexp(z.row(0), C);
  st.loss_sum = lse - z.at(0, static_cast<int>(label));
  st.terms = 1;
  int argmax = 0;
  for (int j = 1; j < C; ++j)
    if (z.at(0, j) > z.at(0, argmax)) argmax = j;
  if (static_cast<NodeId>(argmax) == label) ++st.correct;
  if (grad_scale > 0) {
    Mat dz(1, C);
    for (int j = 0; j < C; ++j) dz.at(0, j) = std::exp(z.at(0, j) - lse) * grad_scale;
    dz.at(0, static_cast<int>(label)) -= grad_scale;
    m.backward_class(cache, dz);
  }
  return st;
}

inline std::vector<Mat> snapshot_values(const std::vector<Param*>& params) {
  std::vector<Mat> vals;
  vals.reserve(params.size());
  for (Param* p : params) vals.push_back(p->val);
  return vals;
}

inline void restore_values(const std::vector<Param*>& params, const std::vector<Mat>& vals) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->val = vals[i];
}

}  // namespace detail

/// Next-token pre-training over the corpus (mean cross entropy over all
/// predicted positions). 5% of sentences are held out for validation-loss
/// early stopping; the best-epoch weights are restored on return.
inline TrainReport pretrain(Model& m, const Corpus& corpus, const Vocab& vocab,
                            const OptimConfig& opt, bool learn_start_token = false) {
  opt.validate();
  if (m.stage != Stage::Pretrain) throw ConfigError("pretrain: model stage is not pretrain");
  if (corpus.sentences.empty()) throw ConfigError("pretrain: empty corpus");
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<TokenSeq> seqs;
  seqs.reserve(corpus.sentences.size());
  for (const auto& s : corpus.sentences)
    seqs.push_back(detail::pretrain_sequence(vocab, s, learn_start_token));

  std::vector<std::size_t> idx(seqs.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng split_rng(stream_seed(opt.seed, 0x5E1Dull));
  shuffle(idx, split_rng);
  std::size_t n_val = seqs.size() >= 2
                          ? std::clamp<std::size_t>(
                                static_cast<std::size_t>(0.05 * static_cast<double>(seqs.size()) + 0.5),
                                1, seqs.size() - 1)
                          : 0;
  std::vector<std::size_t> val_idx(idx.begin(), idx.begin() + static_cast<long>(n_val));
  std::vector<std::size_t> train_idx(idx.begin() + static_cast<long>(n_val), idx.end());

  auto eval_set = [&](const std::vector<std::size_t>& set) {
    detail::LossStats st;
    for (std::size_t i : set) {
      const auto s = detail::pretrain_sentence_loss(m, seqs[i], nullptr, 0.0);
      st.loss_sum += s.loss_sum;
      st.terms += s.terms;
      st.correct += s.correct;
    }
    return st;
  };
  const auto& watch_idx = val_idx.empty() ? train_idx : val_idx;

  TrainReport report;
  auto v0 = eval_set(watch_idx);
  report.val_loss.push_back(v0.mean());
  report.val_acc.push_back(v0.acc());

  auto params = m.trainable_params();
  AdamState state;
  double best_metric = v0.mean();
  report.best_epoch = 0;
  std::vector<Mat> best_vals = detail::snapshot_values(params);
  int bad = 0;
  report.stop_reason = "max_epochs";

  for (int epoch = 1; epoch <= opt.max_epochs; ++epoch) {
    Rng ep_rng(stream_seed(opt.seed, 0xE60Cull, static_cast<std::uint64_t>(epoch)));
    shuffle(train_idx, ep_rng);
    detail::LossStats ep_stats;
    std::size_t step = 0;
    for (std::size_t off = 0; off < train_idx.size(); off += opt.batch_size, ++step) {
      const std::size_t end = std::min(off + opt.batch_size, train_idx.size());
      std::size_t batch_terms = 0;
      for (std::size_t i = off; i < end; ++i)
        batch_terms += seqs[train_idx[i]].size() > 1 ? seqs[train_idx[i]].size() - 1 : 0;
      if (batch_terms == 0) continue;
      m.zero_grads();
      Rng drop_rng(stream_seed(opt.seed, 0xD80Full,
                               static_cast<std::uint64_t>(epoch) * 1000003ull + step));
      detail::LossStats batch_stats;
      for (std::size_t i = off; i < end; ++i) {
        const auto s = detail::pretrain_sentence_loss(m, seqs[train_idx[i]], &drop_rng,
                                                      1.0 / static_cast<double>(batch_terms));
        batch_stats.loss_sum += s.loss_sum;
        batch_stats.terms += s.terms;
        batch_stats.correct += s.correct;
      }
      if (!std::isfinite(batch_stats.loss_sum))
        throw NumericalError("pretrain loss diverged at epoch " + std::to_string(epoch) +
                             ", step " + std::to_string(step));
      adam_step(params, state, opt);
      ep_stats.loss_sum += batch_stats.loss_sum;
      ep_stats.terms += batch_stats.terms;
      ep_stats.correct += batch_stats.correct;
    }
    report.train_loss.push_back(ep_stats.mean());
    report.train_acc.push_back(ep_stats.acc());

    const auto v = eval_set(watch_idx);
    report.val_loss.push_back(v.mean());
    report.val_acc.push_back(v.acc());
    report.epochs_run = epoch;

    if (v.mean() < best_metric - 1e-12) {
      best_metric = v.mean();
      report.best_epoch = epoch;
      best_vals = detail::snapshot_values(params);
      bad = 0;
    } else if (++bad >= opt.patience) {
      report.stop_reason = "early_stop";
      break;
    }
  }
  detail::restore_values(params, best_vals);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

struct FinetuneConfig {
  WalkConfig walk;
  bool with_attrs = false;
  bool fixed_contexts = false;
  std::size_t max_attr_tokens = 16;
  std::uint64_t eval_seed = 4;
};

namespace detail {

inline TokenSeq node_context_seq(const Graph& g, const Vocab& vocab, NodeId v,
                                 const FinetuneConfig& fcfg, std::uint64_t ctx_seed) {
  Rng rng(ctx_seed);
  const auto ctx = sample_node_context(g, v, fcfg.walk, rng);
  const auto* attrs = (fcfg.with_attrs && g.has_attributes()) ? &g.attributes() : nullptr;
  return encode_context(vocab, ctx, attrs, fcfg.max_attr_tokens);
}

inline LossStats eval_nodes(Model& m, const Graph& g, const Vocab& vocab,
                            const std::vector<NodeId>& nodes, const FinetuneConfig& fcfg) {
  LossStats st;
  for (NodeId v : nodes) {
    const auto label = g.label(v);
    if (!label) throw DataError("evaluate: node " + std::to_string(v) + " is unlabeled");
    const auto seq = node_context_seq(g, vocab, v, fcfg, stream_seed(fcfg.eval_seed, 0xE7A1ull, v));
    const auto s = class_loss(m, seq, *label, nullptr, 0.0);
    st.loss_sum += s.loss_sum;
    st.terms += s.terms;
    st.correct += s.correct;
  }
  return st;
}

}  // namespace detail

/// Micro accuracy over a node set, with contexts drawn from the evaluation
/// seed so repeat calls are identical.
inline double evaluate(Model& m, const Graph& g, const std::vector<NodeId>& nodes,
                       const Vocab& vocab, const FinetuneConfig& fcfg) {
  if (m.stage != Stage::Finetune) throw ConfigError("evaluate: model stage is not finetune");
  if (nodes.empty()) throw ConfigError("evaluate: empty node set");
  return detail::eval_nodes(m, g, vocab, nodes, fcfg).acc();
}

/// Node-classification fine-tuning: per epoch, fresh contexts per train
/// node (unless fixed_contexts), cross entropy on the CLS-position class
/// logits, early stopping on validation micro accuracy, best weights
/// restored.
inline TrainReport finetune(Model& m, const Graph& g, const Split& split, const Vocab& vocab,
                            const OptimConfig& opt, const FinetuneConfig& fcfg) {
  opt.validate();
  fcfg.walk.validate();
  if (m.stage != Stage::Finetune) throw ConfigError("finetune: model stage is not finetune");
  if (split.train.empty() || split.val.empty()) throw ConfigError("finetune: empty split part");
  const auto t0 = std::chrono::steady_clock::now();

  TrainReport report;
  auto v0 = detail::eval_nodes(m, g, vocab, split.val, fcfg);
  report.val_loss.push_back(v0.mean());
  report.val_acc.push_back(v0.acc());

  auto params = m.trainable_params();
  AdamState state;
  double best_acc = v0.acc();
  report.best_epoch = 0;
  std::vector<Mat> best_vals = detail::snapshot_values(params);
  int bad = 0;
  report.stop_reason = "max_epochs";

  std::vector<NodeId> train_nodes = split.train;
  for (int epoch = 1; epoch <= opt.max_epochs; ++epoch) {
    Rng ep_rng(stream_seed(opt.seed, 0xF17Eull, static_cast<std::uint64_t>(epoch)));
    shuffle(train_nodes, ep_rng);
    const std::uint64_t ctx_epoch = fcfg.fixed_contexts ? 0 : static_cast<std::uint64_t>(epoch);
    detail::LossStats ep_stats;
    std::size_t step = 0;
    for (std::size_t off = 0; off < train_nodes.size(); off += opt.batch_size, ++step) {
      const std::size_t end = std::min(off + opt.batch_size, train_nodes.size());
      const double grad_scale = 1.0 / static_cast<double>(end - off);
      m.zero_grads();
      Rng drop_rng(stream_seed(opt.seed, 0xD80Full,
                               static_cast<std::uint64_t>(epoch) * 1000003ull + step));
      detail::LossStats batch_stats;
      for (std::size_t i = off; i < end; ++i) {
        const NodeId v = train_nodes[i];
        const auto label = g.label(v);
        if (!label) throw DataError("finetune: train node " + std::to_string(v) + " is unlabeled");
        const auto seq = detail::node_context_seq(
            g, vocab, v, fcfg, stream_seed(opt.seed, ctx_epoch * 0x9E3779B9ull + 0xC7Full, v));
        const auto s = detail::class_loss(m, seq, *label, &drop_rng, grad_scale);
        batch_stats.loss_sum += s.loss_sum;
        batch_stats.terms += s.terms;
        batch_stats.correct += s.correct;
      }
      if (!std::isfinite(batch_stats.loss_sum))
        throw NumericalError("finetune loss diverged at epoch " + std::to_string(epoch) +
                             ", step " + std::to_string(step));
      adam_step(params, state, opt);
      ep_stats.loss_sum += batch_stats.loss_sum;
      ep_stats.terms += batch_stats.terms;
      ep_stats.correct += batch_stats.correct;
    }
    report.train_loss.push_back(ep_stats.mean());
    report.train_acc.push_back(ep_stats.acc());

    const auto v = detail::eval_nodes(m, g, vocab, split.val, fcfg);
    report.val_loss.push_back(v.mean());
    report.val_acc.push_back(v.acc());
    report.epochs_run = epoch;

    if (v.acc() > best_acc + 1e-12) {
      best_acc = v.acc();
      report.best_epoch = epoch;
      best_vals = detail::snapshot_values(params);
      bad = 0;
    } else if (++bad >= opt.patience) {
      report.stop_reason = "early_stop";
      break;
    }
  }
  detail::restore_values(params, best_vals);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace gdl
