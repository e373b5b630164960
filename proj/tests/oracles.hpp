#pragma once

// Straightforward reference implementations used as test oracles. They share
// no code with the library beyond the plain data types.

#include "icl/model.hpp"
#include "icl/taskgen.hpp"

#include <cmath>
#include <vector>

namespace oracle {

using icl::Index;
using icl::Matrix;
using icl::Vector;

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

/// e_j += sum_h P_h sum_{i in keys} (W_V e_i)(W_K e_i)^T (W_Q e_j), summing
/// term by term.
inline Matrix lsa_layer(const icl::LayerWeights& layer, const Matrix& e, Index query_index) {
  const Index t_len = e.cols();
  Matrix out = e;
  for (const icl::HeadWeights& h : layer.heads) {
    for (Index j = 0; j < t_len; ++j) {
      const Vector q = h.query * e.col(j);
      Vector acc = Vector::Zero(h.value.rows());
      for (Index i = 0; i < t_len; ++i) {
        if (!layer.full_self_attn && i == query_index) continue;
        const Vector k = h.key * e.col(i);
        const Vector v = h.value * e.col(i);
        acc += v * k.dot(q);
      }
      out.col(j) += h.proj * acc;
    }
  }
  return out;
}

/// Softmax attention over keys for every query token, explicit loops.
inline Matrix softmax_layer(const icl::LayerWeights& layer, const Matrix& e, Index query_index) {
  const Index t_len = e.cols();
  Matrix out = e;
  for (const icl::HeadWeights& h : layer.heads) {
    for (Index j = 0; j < t_len; ++j) {
      const Vector q = h.query * e.col(j);
      std::vector<double> s(static_cast<std::size_t>(t_len), -INFINITY);
      double mx = -INFINITY;
      for (Index i = 0; i < t_len; ++i) {
        if (!layer.full_self_attn && i == query_index) continue;
        s[i] = (h.key * e.col(i)).dot(q);
        mx = std::max(mx, s[i]);
      }
      double z = 0.0;
      for (double& v : s) z += (v = std::exp(v - mx));
      Vector acc = Vector::Zero(h.value.rows());
      for (Index i = 0; i < t_len; ++i) acc += (s[i] / z) * (h.value * e.col(i));
      out.col(j) += h.proj * acc;
    }
  }
  return out;
}

/// W - (eta / N) sum_i (W x_i - y_i) x_i^T.
inline Matrix gd_step(const Matrix& w, const Matrix& x, const Matrix& y, double eta) {
  Matrix grad = Matrix::Zero(w.rows(), w.cols());
  for (Index i = 0; i < x.cols(); ++i) grad += (w * x.col(i) - y.col(i)) * x.col(i).transpose();
  return w - eta / static_cast<double>(x.cols()) * grad;
}

inline double tanh_gelu(double x) {
  const double c = std::sqrt(2.0 / 3.14159265358979323846);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

}  // namespace oracle
