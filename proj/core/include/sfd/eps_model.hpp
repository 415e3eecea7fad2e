#pragma once

#include <optional>
#include <vector>

#include "sfd/common.hpp"
#include "sfd/process.hpp"

namespace sfd {

/// Label value selecting the unconditional (null-class) branch.
inline constexpr int kNullLabel = -1;

struct Conditioning {
  /// One label per chain; absent means unconditional.
  std::optional<std::vector<int>> labels;
  /// Total sampling steps N for step-conditioned students.
  std::optional<int> step;
};

/// Noise-prediction model eps(x, t, c, step) evaluated on a batch of chains
/// sharing one noise level. Implementations must be pure.
class EpsModel {
 public:
  virtual ~EpsModel() = default;
  virtual int dim() const = 0;
  virtual Mat eps(const Mat& x, double t, const Conditioning& cond) const = 0;
  /// True when the model can evaluate the null class (needed for guidance).
  virtual bool has_null_class() const { return false; }
  virtual bool has_step_condition() const { return false; }
};

/// Ideal teacher: exact eps of a (conditional) Gaussian mixture. Labels index
/// classes by position; kNullLabel or absent labels use the marginal.
class MixtureOracle final : public EpsModel {
 public:
  explicit MixtureOracle(GaussianMixture mix);
  explicit MixtureOracle(ConditionalMixture mix);

  int dim() const override { return marginal_.dim(); }
  Mat eps(const Mat& x, double t, const Conditioning& cond) const override;
  bool has_null_class() const override { return conditional_.has_value(); }

 private:
  GaussianMixture marginal_;
  std::optional<ConditionalMixture> conditional_;
};

}  // namespace sfd
