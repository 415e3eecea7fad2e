#include "sfd/process.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include <nlohmann/json.hpp>

namespace sfd {

DiffusionSpec::DiffusionSpec(double t_min, double t_max) : t_min_(t_min), t_max_(t_max) {
  require(std::isfinite(t_min) && std::isfinite(t_max), "DiffusionSpec: noise levels must be finite");
  require(t_min > 0.0 && t_min < t_max, "DiffusionSpec: require 0 < t_min < t_max");
}

GaussianMixture::GaussianMixture(std::vector<GaussianComponent> components)
    : components_(std::move(components)) {
  require(!components_.empty(), "GaussianMixture: at least one component required");
  dim_ = static_cast<int>(components_.front().mean.size());
  require(dim_ >= 1 && dim_ <= 3, "GaussianMixture: dimension must be 1, 2 or 3");
  double total = 0.0;
  for (const auto& c : components_) {
    require(c.weight > 0.0, "GaussianMixture: weights must be positive");
    require(c.mean.size() == dim_, "GaussianMixture: inconsistent mean dimension");
    require(c.cov.rows() == dim_ && c.cov.cols() == dim_, "GaussianMixture: covariance shape mismatch");
    require((c.cov - c.cov.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + c.cov.cwiseAbs().maxCoeff()),
            "GaussianMixture: covariance must be symmetric");
    total += c.weight;
  }
  require(std::abs(total - 1.0) <= 1e-12, "GaussianMixture: weights must sum to 1");
  chol_.reserve(components_.size());
  for (const auto& c : components_) {
    Eigen::LLT<Mat> llt(c.cov);
    require(llt.info() == Eigen::Success, "GaussianMixture: covariance must be positive definite");
    chol_.push_back(std::move(llt));
  }
}

GaussianMixture GaussianMixture::standard_normal(int dim) {
  return isotropic(Vec::Zero(dim), 1.0);
}

GaussianMixture GaussianMixture::isotropic(const Vec& mean, double sigma) {
  require(sigma > 0.0, "isotropic: sigma must be positive");
  const auto d = mean.size();
  return GaussianMixture({{1.0, mean, Mat::Identity(d, d) * (sigma * sigma)}});
}

GaussianMixture GaussianMixture::ring(int modes, double radius, double sigma) {
  require(modes >= 1, "ring: at least one mode");
  require(sigma > 0.0, "ring: sigma must be positive");
  std::vector<GaussianComponent> comps;
  for (int k = 0; k < modes; ++k) {
    const double angle = 2.0 * std::numbers::pi * k / modes;
    Vec mu(2);
    mu << radius * std::cos(angle), radius * std::sin(angle);
    comps.push_back({1.0 / modes, mu, Mat::Identity(2, 2) * (sigma * sigma)});
  }
  // Renormalize so 1/modes rounding never trips the sum check.
  double total = 0.0;
  for (const auto& c : comps) total += c.weight;
  for (auto& c : comps) c.weight /= total;
  return GaussianMixture(std::move(comps));
}

namespace {

struct NoisedComponent {
  double log_weight;  // log w_k - 0.5 log det(2 pi S_k)
  Eigen::LLT<Mat> llt;
};

std::vector<NoisedComponent> noised(const std::vector<GaussianComponent>& comps, double t) {
  std::vector<NoisedComponent> out;
  out.reserve(comps.size());
  for (const auto& c : comps) {
    const auto d = c.cov.rows();
    Mat s = c.cov + Mat::Identity(d, d) * (t * t);
    Eigen::LLT<Mat> llt(s);
    if (llt.info() != Eigen::Success) throw NumericalError("mixture: singular noised covariance");
    const double log_det = 2.0 * Mat(llt.matrixL()).diagonal().array().log().sum();
    out.push_back({std::log(c.weight) - 0.5 * (d * std::log(2.0 * std::numbers::pi) + log_det), std::move(llt)});
  }
  return out;
}

}  // namespace

double GaussianMixture::log_density(const Vec& x, double t) const {
  require(x.size() == dim_, "log_density: dimension mismatch");
  require(t >= 0.0, "log_density: t must be non-negative");
  const auto comps = noised(components_, t);
  std::vector<double> terms(comps.size());
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < comps.size(); ++k) {
    const Vec diff = x - components_[k].mean;
    const Vec z = comps[k].llt.matrixL().solve(diff);
    terms[k] = comps[k].log_weight - 0.5 * z.squaredNorm();
    hi = std::max(hi, terms[k]);
  }
  double acc = 0.0;
  for (double v : terms) acc += std::exp(v - hi);
  return hi + std::log(acc);
}

Mat GaussianMixture::score(const Mat& x, double t) const {
  require(x.rows() == dim_, "mixture_score: dimension mismatch");
  require(t >= 0.0, "mixture_score: t must be non-negative");
  const auto comps = noised(components_, t);
  const auto K = comps.size();
  Mat out = Mat::Zero(dim_, x.cols());
  std::vector<double> logp(K);
  std::vector<Vec> grads(K);
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      const Vec diff = x.col(j) - components_[k].mean;
      const Vec z = comps[k].llt.matrixL().solve(diff);
      logp[k] = comps[k].log_weight - 0.5 * z.squaredNorm();
      grads[k] = -comps[k].llt.solve(diff);
      hi = std::max(hi, logp[k]);
    }
    double norm = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      logp[k] = std::exp(logp[k] - hi);
      norm += logp[k];
    }
    for (std::size_t k = 0; k < K; ++k) out.col(j) += (logp[k] / norm) * grads[k];
  }
  return out;
}

Mat GaussianMixture::sample(Rng& rng, Eigen::Index n) const {
  Mat out(dim_, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double u = rng.uniform();
    std::size_t k = 0;
    while (k + 1 < components_.size() && u >= components_[k].weight) {
      u -= components_[k].weight;
      ++k;
    }
    Vec z(dim_);
    for (int i = 0; i < dim_; ++i) z(i) = rng.normal();
    out.col(j) = components_[k].mean + chol_[k].matrixL() * z;
  }
  return out;
}

nlohmann::json GaussianMixture::to_json() const {
  nlohmann::json comps = nlohmann::json::array();
  for (const auto& c : components_) {
    nlohmann::json cov = nlohmann::json::array();
    for (int i = 0; i < dim_; ++i) {
      nlohmann::json row = nlohmann::json::array();
      for (int k = 0; k < dim_; ++k) row.push_back(c.cov(i, k));
      cov.push_back(row);
    }
    nlohmann::json mean = nlohmann::json::array();
    for (int i = 0; i < dim_; ++i) mean.push_back(c.mean(i));
    comps.push_back({{"weight", c.weight}, {"mean", mean}, {"cov", cov}});
  }
  return {{"dim", dim_}, {"components", comps}};
}

GaussianMixture GaussianMixture::from_json(const nlohmann::json& doc) {
  try {
    const int dim = doc.at("dim").get<int>();
    std::vector<GaussianComponent> comps;
    for (const auto& jc : doc.at("components")) {
      GaussianComponent c;
      c.weight = jc.at("weight").get<double>();
      const auto mean = jc.at("mean").get<std::vector<double>>();
      if (static_cast<int>(mean.size()) != dim) throw FormatError("mixture: 'mean' length differs from 'dim'");
      c.mean = Eigen::Map<const Vec>(mean.data(), dim);
      const auto cov = jc.at("cov").get<std::vector<std::vector<double>>>();
      if (static_cast<int>(cov.size()) != dim) throw FormatError("mixture: 'cov' row count differs from 'dim'");
      c.cov.resize(dim, dim);
      for (int i = 0; i < dim; ++i) {
        if (static_cast<int>(cov[i].size()) != dim) throw FormatError("mixture: 'cov' is not square");
        for (int k = 0; k < dim; ++k) c.cov(i, k) = cov[i][k];
      }
      comps.push_back(std::move(c));
    }
    return GaussianMixture(std::move(comps));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("mixture: ") + e.what());
  }
}

GaussianMixture GaussianMixture::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("mixture: cannot open " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("mixture: " + path + ": " + e.what());
  }
  return from_json(doc);
}

ConditionalMixture::ConditionalMixture(std::vector<LabeledMixture> classes, std::vector<double> prior)
    : classes_(std::move(classes)), prior_(std::move(prior)) {
  require(!classes_.empty(), "ConditionalMixture: at least one class");
  require(classes_.size() == prior_.size(), "ConditionalMixture: prior length must match class count");
  double total = 0.0;
  for (double p : prior_) {
    require(p > 0.0, "ConditionalMixture: prior entries must be positive");
    total += p;
  }
  require(std::abs(total - 1.0) <= 1e-12, "ConditionalMixture: prior must sum to 1");
  std::vector<GaussianComponent> all;
  const int d = classes_.front().mixture.dim();
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    require(classes_[i].mixture.dim() == d, "ConditionalMixture: class dimensions differ");
    for (auto c : classes_[i].mixture.components()) {
      c.weight *= prior_[i];
      all.push_back(std::move(c));
    }
  }
  double sum = 0.0;
  for (const auto& c : all) sum += c.weight;
  for (auto& c : all) c.weight /= sum;
  marginal_ = GaussianMixture(std::move(all));
}

ConditionalMixture ConditionalMixture::from_components(const GaussianMixture& mix) {
  std::vector<LabeledMixture> classes;
  std::vector<double> prior;
  int label = 0;
  for (const auto& c : mix.components()) {
    classes.push_back({label++, GaussianMixture({{1.0, c.mean, c.cov}})});
    prior.push_back(c.weight);
  }
  return ConditionalMixture(std::move(classes), std::move(prior));
}

const GaussianMixture& ConditionalMixture::class_mixture(int index) const {
  require(index >= 0 && index < num_classes(), "ConditionalMixture: class index out of range");
  return classes_[static_cast<std::size_t>(index)].mixture;
}

int ConditionalMixture::sample_class(Rng& rng) const {
  double u = rng.uniform();
  for (std::size_t i = 0; i + 1 < prior_.size(); ++i) {
    if (u < prior_[i]) return static_cast<int>(i);
    u -= prior_[i];
  }
  return num_classes() - 1;
}

nlohmann::json ConditionalMixture::to_json() const {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : classes_) classes.push_back({{"label", c.label}, {"mixture", c.mixture.to_json()}});
  return {{"classes", classes}, {"prior", prior_}};
}

ConditionalMixture ConditionalMixture::from_json(const nlohmann::json& doc) {
  std::vector<LabeledMixture> classes;
  std::vector<double> prior;
  try {
    for (const auto& jc : doc.at("classes"))
      classes.push_back({jc.at("label").get<int>(), GaussianMixture::from_json(jc.at("mixture"))});
    prior = doc.at("prior").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("conditional mixture: ") + e.what());
  }
  return ConditionalMixture(std::move(classes), std::move(prior));
}

ConditionalMixture ConditionalMixture::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("conditional mixture: cannot open " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("conditional mixture: " + path + ": " + e.what());
  }
  return from_json(doc);
}

Mat perturb(const Mat& x0, double t, Rng& rng) {
  require(t >= 0.0, "perturb: t must be non-negative");
  return x0 + t * rng.normal_matrix(x0.rows(), x0.cols());
}

Mat mixture_score(const GaussianMixture& mix, const Mat& x, double t) { return mix.score(x, t); }

Mat oracle_eps(const GaussianMixture& mix, const Mat& x, double t) {
  require(t > 0.0, "oracle_eps: t must be positive");
  return -t * mix.score(x, t);
}

Mat exact_flow(const GaussianMixture& gaussian, const Mat& x_s, double s, double t) {
  require(gaussian.size() == 1, "exact_flow: requires a single-component mixture");
  const auto& c = gaussian.components().front();
  const double var = c.cov(0, 0);
  const auto d = c.cov.rows();
  require((c.cov - Mat::Identity(d, d) * var).cwiseAbs().maxCoeff() <= 1e-14 * var,
          "exact_flow: covariance must be isotropic");
  require(s >= 0.0 && t >= 0.0, "exact_flow: noise levels must be non-negative");
  require(x_s.rows() == d, "exact_flow: dimension mismatch");
  const double ratio = std::sqrt((var + t * t) / (var + s * s));
  return ((x_s.colwise() - c.mean) * ratio).colwise() + c.mean;
}

Mat prior_sample(const DiffusionSpec& spec, int dim, Eigen::Index chains, Rng& rng) {
  require(dim >= 1, "prior_sample: dimension must be positive");
  return spec.t_max() * rng.normal_matrix(dim, chains);
}

}  // namespace sfd
