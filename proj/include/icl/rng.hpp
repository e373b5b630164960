#pragma once

#include "icl/matrix.hpp"

#include <cstdint>
#include <random>

namespace icl {

struct Seed {
  std::uint64_t value = 0;
};

enum class DistKind { uniform, normal, exponential, laplace };

struct Distribution {
  DistKind kind = DistKind::uniform;
  double a = -1.0;  // uniform lower bound
  double b = 1.0;   // uniform upper bound

  static Distribution uniform(double lo, double hi) { return {DistKind::uniform, lo, hi}; }
  static Distribution standard_normal() { return {DistKind::normal, 0.0, 1.0}; }
  static Distribution standard_exponential() { return {DistKind::exponential, 0.0, 1.0}; }
  static Distribution standard_laplace() { return {DistKind::laplace, 0.0, 1.0}; }
};

// Sample stream backed by std::mt19937_64. Child streams are derived with
// split(tag): the child depends only on (seed, tag), never on how many
// draws the parent has made, so batches can be regenerated independently.
class SeedStream {
 public:
  explicit SeedStream(Seed seed);

  SeedStream split(std::uint64_t tag) const;
  Seed seed() const { return seed_; }

  double uniform(double lo, double hi);
  double normal();
  double exponential();
  double laplace();
  /// Standard normal truncated to [-bound, bound] by rejection.
  double truncated_normal(double bound);
  std::uint64_t next_u64() { return engine_(); }

  double draw(const Distribution& dist);

 private:
  Seed seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::exponential_distribution<double> exponential_{1.0};
};

/// rows x cols matrix of i.i.d. draws, filled column-major.
Matrix sample(SeedStream& stream, const Distribution& dist, Index rows, Index cols);

}  // namespace icl
