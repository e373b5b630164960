#include "icl/optim.hpp"

#include "icl/errors.hpp"

#include <cmath>

namespace icl {

AdamState make_adam(const ParamList& params, double lr) {
  AdamState s;
  s.lr = lr;
  for (const Matrix& p : params) {
    s.first_moment.push_back(Matrix::Zero(p.rows(), p.cols()));
    s.second_moment.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
  return s;
}

void adam_step(AdamState& state, ParamList& params, const ParamList& grads) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: params/grads count mismatch");
  if (state.first_moment.empty() && !params.empty()) {
    for (const Matrix& p : params) {
      state.first_moment.push_back(Matrix::Zero(p.rows(), p.cols()));
      state.second_moment.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }
  if (state.first_moment.size() != params.size())
    throw ShapeError("adam_step: state/params count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].rows() != grads[k].rows() || params[k].cols() != grads[k].cols() ||
        state.first_moment[k].rows() != params[k].rows() ||
        state.first_moment[k].cols() != params[k].cols())
      throw ShapeError("adam_step: shape mismatch at parameter " + std::to_string(k));
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& m = state.first_moment[k];
    Matrix& v = state.second_moment[k];
    m = state.beta1 * m + (1.0 - state.beta1) * grads[k];
    v = state.beta2 * v + (1.0 - state.beta2) * grads[k].cwiseProduct(grads[k]);
    params[k].array() -= state.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + state.eps);
  }
}

double global_norm(const ParamList& grads) {
  double total = 0.0;
  for (const Matrix& g : grads) total += g.squaredNorm();
  return std::sqrt(total);
}

ParamList clip_global_norm(ParamList grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_global_norm: max_norm must be positive");
  const double norm = global_norm(grads);
  if (norm > max_norm * (1.0 + 1e-12)) {
    const double factor = max_norm / norm;
    for (Matrix& g : grads) g *= factor;
  }
  return grads;
}

}  // namespace icl
