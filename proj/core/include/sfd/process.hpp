#pragma once

#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "sfd/common.hpp"
#include "sfd/rng.hpp"

namespace sfd {

/// Variance-exploding diffusion with zero drift and g(t) = sqrt(2t), so the
/// marginal at noise level t is p_data convolved with N(0, t^2 I).
class DiffusionSpec {
 public:
  DiffusionSpec(double t_min = 0.006, double t_max = 80.0);

  double t_min() const { return t_min_; }
  double t_max() const { return t_max_; }

 private:
  double t_min_;
  double t_max_;
};

struct GaussianComponent {
  double weight = 0.0;
  Vec mean;
  Mat cov;
};

/// Finite Gaussian mixture in d <= 3 dimensions with closed-form scores of
/// every noised marginal.
class GaussianMixture {
 public:
  GaussianMixture() = default;
  explicit GaussianMixture(std::vector<GaussianComponent> components);

  static GaussianMixture standard_normal(int dim);
  static GaussianMixture isotropic(const Vec& mean, double sigma);
  /// `modes` equal-weight isotropic Gaussians evenly spaced on a circle.
  static GaussianMixture ring(int modes, double radius, double sigma);

  int dim() const { return dim_; }
  const std::vector<GaussianComponent>& components() const { return components_; }
  std::size_t size() const { return components_.size(); }

  /// log p_t(x) for p_t = sum_k w_k N(mu_k, Sigma_k + t^2 I).
  double log_density(const Vec& x, double t) const;
  /// Score of p_t at every column of x.
  Mat score(const Mat& x, double t) const;
  /// n draws from p_data (t = 0), one per column.
  Mat sample(Rng& rng, Eigen::Index n) const;

  nlohmann::json to_json() const;
  static GaussianMixture from_json(const nlohmann::json& doc);
  static GaussianMixture load(const std::string& path);

 private:
  int dim_ = 0;
  std::vector<GaussianComponent> components_;
  std::vector<Eigen::LLT<Mat>> chol_;  // factors of Sigma_k, kept for sampling
};

struct LabeledMixture {
  int label = 0;
  GaussianMixture mixture;
};

/// Class-conditional data: p(x | c) per label plus a class prior.
class ConditionalMixture {
 public:
  ConditionalMixture(std::vector<LabeledMixture> classes, std::vector<double> prior);

  /// One class per component of `mix`, prior equal to the component weights.
  static ConditionalMixture from_components(const GaussianMixture& mix);

  int dim() const { return marginal_.dim(); }
  int num_classes() const { return static_cast<int>(classes_.size()); }
  const std::vector<LabeledMixture>& classes() const { return classes_; }
  const std::vector<double>& prior() const { return prior_; }
  const GaussianMixture& marginal() const { return marginal_; }
  /// Mixture for the class at `index` (0-based position, not label).
  const GaussianMixture& class_mixture(int index) const;

  int sample_class(Rng& rng) const;

  /// {"classes": [{"label": l, "mixture": {...}}], "prior": [...]}
  nlohmann::json to_json() const;
  static ConditionalMixture from_json(const nlohmann::json& doc);
  static ConditionalMixture load(const std::string& path);

 private:
  std::vector<LabeledMixture> classes_;
  std::vector<double> prior_;
  GaussianMixture marginal_;
};

/// x0 + t * eps with eps ~ N(0, I). Columns are independent chains.
Mat perturb(const Mat& x0, double t, Rng& rng);

Mat mixture_score(const GaussianMixture& mix, const Mat& x, double t);

/// Ideal noise prediction eps = -t * score; requires t > 0.
Mat oracle_eps(const GaussianMixture& mix, const Mat& x, double t);

/// Closed-form probability-flow solution from noise level s to t for a single
/// isotropic Gaussian component.
Mat exact_flow(const GaussianMixture& gaussian, const Mat& x_s, double s, double t);

/// Draws from N(0, t_max^2 I), one chain per column.
Mat prior_sample(const DiffusionSpec& spec, int dim, Eigen::Index chains, Rng& rng);

}  // namespace sfd
