#include "icl/rng.hpp"

#include "icl/errors.hpp"

#include <cmath>

namespace icl {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

SeedStream::SeedStream(Seed seed) : seed_(seed), engine_(splitmix64(seed.value)) {}

SeedStream SeedStream::split(std::uint64_t tag) const {
  // Derive the child seed from (seed, tag) alone.
  return SeedStream(Seed{splitmix64(splitmix64(seed_.value) ^ splitmix64(~tag))});
}

double SeedStream::uniform(double lo, double hi) {
  if (!(lo < hi)) throw ConfigError("uniform distribution requires a < b");
  return std::uniform_real_distribution<double>(lo, hi)(engine_);
}

double SeedStream::normal() { return normal_(engine_); }

double SeedStream::exponential() { return exponential_(engine_); }

double SeedStream::laplace() {
  const double e = exponential_(engine_);
  return (engine_() & 1u) ? e : -e;
}

double SeedStream::truncated_normal(double bound) {
  if (!(bound > 0.0)) throw ConfigError("truncation bound must be positive");
  for (;;) {
    const double z = normal_(engine_);
    if (std::abs(z) <= bound) return z;
  }
}

double SeedStream::draw(const Distribution& dist) {
  switch (dist.kind) {
    case DistKind::uniform: return uniform(dist.a, dist.b);
    case DistKind::normal: return normal();
    case DistKind::exponential: return exponential();
    case DistKind::laplace: return laplace();
  }
  throw ConfigError("unknown distribution");
}

Matrix sample(SeedStream& stream, const Distribution& dist, Index rows, Index cols) {
  if (rows < 0 || cols < 0) throw ConfigError("negative sample shape");
  if (dist.kind == DistKind::uniform && !(dist.a < dist.b))
    throw ConfigError("uniform distribution requires a < b");
  Matrix out(rows, cols);
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) out(r, c) = stream.draw(dist);
  return out;
}

}  // namespace icl
