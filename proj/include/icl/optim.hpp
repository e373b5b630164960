#pragma once

#include "icl/matrix.hpp"

#include <cstdint>

namespace icl {

// Adam with bias correction. Defaults are the published ones.
struct AdamState {
  std::int64_t step = 0;
  ParamList first_moment;
  ParamList second_moment;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

AdamState make_adam(const ParamList& params, double lr);

/// One Adam update; moments are lazily shaped on the first call.
void adam_step(AdamState& state, ParamList& params, const ParamList& grads);

double global_norm(const ParamList& grads);

/// Rescales all entries by max_norm / norm when the global L2 norm exceeds
/// max_norm. Norms within 1e-12 relative of max_norm count as not
/// exceeding, which makes clipping idempotent bit for bit.
[[nodiscard]] ParamList clip_global_norm(ParamList grads, double max_norm);

}  // namespace icl
