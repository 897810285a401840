#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "gdl/common.hpp"
#include "gdl/rng.hpp"

namespace gdl {

// Dense row-major matrix of doubles. Double precision keeps the
// finite-difference gradient contracts comfortably below 1e-4.
struct Mat {
  int rows = 0, cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {}

  double& at(int r, int c) { return a[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return a[static_cast<std::size_t>(r) * cols + c]; }
  double* row(int r) { return a.data() + static_cast<std::size_t>(r) * cols; }
  const double* row(int r) const { return a.data() + static_cast<std::size_t>(r) * cols; }
  std::size_t size() const { return a.size(); }

  void zero() { std::fill(a.begin(), a.end(), 0.0); }

  void fill_gaussian(Rng& rng, double std_dev) {
    for (auto& x : a) x = rng.gaussian() * std_dev;
  }

  void set_identity() {
    assert(rows == cols);
    zero();
    for (int i = 0; i < rows; ++i) at(i, i) = 1.0;
  }

  std::uint64_t checksum() const { return checksum_doubles(a); }
};

// C = A * B
inline void matmul(const Mat& A, const Mat& B, Mat& C) {
  assert(A.cols == B.rows);
  C = Mat(A.rows, B.cols);
  for (int i = 0; i < A.rows; ++i) {
    const double* ai = A.row(i);
    double* ci = C.row(i);
    for (int k = 0; k < A.cols; ++k) {
      const double aik = ai[k];
      if (aik == 0.0) continue;
      const double* bk = B.row(k);
      for (int j = 0; j < B.cols; ++j) ci[j] += aik * bk[j];
    }
  }
}

// C = A * B^T
inline void matmul_nt(const Mat& A, const Mat& B, Mat& C) {
  assert(A.cols == B.cols);
  C = Mat(A.rows, B.rows);
  for (int i = 0; i < A.rows; ++i) {
    const double* ai = A.row(i);
    for (int j = 0; j < B.rows; ++j) {
      const double* bj = B.row(j);
      double s = 0;
      for (int k = 0; k < A.cols; ++k) s += ai[k] * bj[k];
      C.at(i, j) = s;
    }
  }
}

// C += A^T * B
inline void matmul_tn_acc(const Mat& A, const Mat& B, Mat& C) {
  assert(A.rows == B.rows);
  assert(C.rows == A.cols && C.cols == B.cols);
  for (int k = 0; k < A.rows; ++k) {
    const double* ak = A.row(k);
    const double* bk = B.row(k);
    for (int i = 0; i < A.cols; ++i) {
      const double aki = ak[i];
      if (aki == 0.0) continue;
      double* ci = C.row(i);
      for (int j = 0; j < B.cols; ++j) ci[j] += aki * bk[j];
    }
  }
}

inline void add_inplace(Mat& A, const Mat& B, double scale = 1.0) {
  assert(A.rows == B.rows && A.cols == B.cols);
  for (std::size_t i = 0; i < A.a.size(); ++i) A.a[i] += scale * B.a[i];
}

// Numerically stable in-place softmax over a row segment.
inline void softmax_inplace(double* x, int n) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double sum = 0;
  for (int i = 0; i < n; ++i) {
    x[i] = std::exp(x[i] - mx);
    sum += x[i];
  }
  for (int i = 0; i < n; ++i) x[i] /= sum;
}

// Named parameter: value + gradient + trainability flag.
struct Param {
  std::string name;
  Mat val;
  Mat grad;
  bool trainable = false;
  bool is_bias = false;

  Param() = default;
  Param(std::string n, int r, int c) : name(std::move(n)), val(r, c), grad(r, c) {}

  void zero_grad() { grad.zero(); }
};

}  // namespace gdl
