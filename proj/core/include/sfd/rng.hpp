#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "sfd/common.hpp"

namespace sfd {

/// Seeded pseudo-random generator. Not thread-safe; give each thread its own
/// stream via split() or stream().
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  /// Named sub-stream of a master seed. Different names give independent
  /// streams, so adding draws to one never perturbs another.
  static Rng stream(std::uint64_t master_seed, std::string_view name);

  /// Child generator keyed by an integer (per-chain or per-thread streams).
  Rng split(std::uint64_t index) const;

  double normal();
  double uniform();  // [0, 1)
  int uniform_int(int lo, int hi);  // inclusive
  Mat normal_matrix(Eigen::Index rows, Eigen::Index cols);

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace sfd
