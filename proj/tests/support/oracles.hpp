#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "gdl/corpus.hpp"
#include "gdl/graph.hpp"
#include "gdl/mat.hpp"
#include "gdl/model.hpp"

namespace testsup {

// Central-difference gradient check, independent of the backprop path.
// Returns per-tensor relative error ||g_analytic - g_numeric|| /
// max(||g_analytic||, ||g_numeric||, tiny).
inline std::map<std::string, double> gradcheck(gdl::Model& m,
                                               const std::function<double()>& loss_with_backward,
                                               const std::function<double()>& loss_only,
                                               double h = 1e-5) {
  m.zero_grads();
  loss_with_backward();
  auto params = m.trainable_params();
  std::map<std::string, gdl::Mat> analytic;
  for (auto* p : params) analytic[p->name] = p->grad;

  std::map<std::string, double> rel_err;
  for (auto* p : params) {
    const gdl::Mat& ga = analytic[p->name];
    double diff2 = 0, na2 = 0, nn2 = 0;
    for (std::size_t i = 0; i < p->val.a.size(); ++i) {
      const double backup = p->val.a[i];
      p->val.a[i] = backup + h;
      const double lp = loss_only();
      p->val.a[i] = backup - h;
      const double lm = loss_only();
      p->val.a[i] = backup;
      const double gn = (lp - lm) / (2 * h);
      const double d = ga.a[i] - gn;
      diff2 += d * d;
      na2 += ga.a[i] * ga.a[i];
      nn2 += gn * gn;
    }
    const double denom = std::max({std::sqrt(na2), std::sqrt(nn2), 1e-10});
    rel_err[p->name] = std::sqrt(diff2) / denom;
  }
  return rel_err;
}

// Walk-histogram features: visit counts over node ids from k restarting
// walks, L1-normalized.
inline std::vector<double> walk_histogram(const gdl::Graph& g, gdl::NodeId v,
                                          const gdl::WalkConfig& cfg, std::uint64_t seed) {
  std::vector<double> h(g.node_count(), 0.0);
  gdl::Rng rng(gdl::stream_seed(seed, 0x8157ull, v));
  double total = 0;
  for (const auto& s : gdl::sample_node_context(g, v, cfg, rng)) {
    for (gdl::NodeId n : s) {
      h[n] += 1.0;
      total += 1.0;
    }
  }
  if (total > 0)
    for (auto& x : h) x /= total;
  return h;
}

// Multinomial logistic regression by full-batch gradient descent. The
// independent classification oracle for block-structured graphs.
class LogisticOracle {
 public:
  LogisticOracle(std::size_t dim, std::size_t classes)
      : dim_(dim), classes_(classes), w_(dim * classes, 0.0), b_(classes, 0.0) {}

  void fit(const std::vector<std::vector<double>>& x, const std::vector<gdl::NodeId>& y,
           int iters = 400, double lr = 2.0, double l2 = 1e-4) {
    const std::size_t n = x.size();
    std::vector<double> gw(w_.size()), gb(b_.size()), p(classes_);
    for (int it = 0; it < iters; ++it) {
      std::fill(gw.begin(), gw.end(), 0.0);
      std::fill(gb.begin(), gb.end(), 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        predict_proba(x[i], p);
        for (std::size_t c = 0; c < classes_; ++c) {
          const double err = p[c] - (y[i] == c ? 1.0 : 0.0);
          gb[c] += err;
          for (std::size_t d = 0; d < dim_; ++d) gw[d * classes_ + c] += err * x[i][d];
        }
      }
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t j = 0; j < w_.size(); ++j) w_[j] -= lr * (gw[j] * inv_n + l2 * w_[j]);
      for (std::size_t c = 0; c < classes_; ++c) b_[c] -= lr * gb[c] * inv_n;
    }
  }

  gdl::NodeId predict(const std::vector<double>& x) const {
    std::vector<double> p(classes_);
    predict_proba(x, p);
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes_; ++c)
      if (p[c] > p[best]) best = c;
    return static_cast<gdl::NodeId>(best);
  }

  double accuracy(const std::vector<std::vector<double>>& x,
                  const std::vector<gdl::NodeId>& y) const {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < x.size(); ++i) correct += predict(x[i]) == y[i];
    return static_cast<double>(correct) / static_cast<double>(x.size());
  }

 private:
  void predict_proba(const std::vector<double>& x, std::vector<double>& p) const {
    double mx = -1e300;
    for (std::size_t c = 0; c < classes_; ++c) {
      double z = b_[c];
      for (std::size_t d = 0; d < dim_; ++d) z += w_[d * classes_ + c] * x[d];
      p[c] = z;
      mx = std::max(mx, z);
    }
    double sum = 0;
    for (auto& z : p) {
      z = std::exp(z - mx);
      sum += z;
    }
    for (auto& z : p) z /= sum;
  }

  std::size_t dim_, classes_;
  std::vector<double> w_, b_;
};

}  // namespace testsup
