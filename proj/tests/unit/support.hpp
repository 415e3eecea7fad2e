#pragma once

// Test-only oracles and generators.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <vector>

#include "sfd/sfd.hpp"

namespace sfd::test {

/// Least-squares slope of log(err) against log(h).
inline double loglog_slope(const std::vector<double>& h, const std::vector<double>& err) {
  const auto n = static_cast<double>(h.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double x = std::log(h[i]), y = std::log(err[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

/// Score of p_t at x by brute-force quadrature of p_data * N(x; y, t^2 I) on a
/// regular grid of `nodes` points per dimension spanning +-8 combined
/// standard deviations around every component.
inline Vec quadrature_score(const GaussianMixture& mix, const Vec& x, double t, int nodes = 1 << 12) {
  const int d = mix.dim();
  Vec lo = Vec::Constant(d, 1e300), hi = Vec::Constant(d, -1e300);
  for (const auto& c : mix.components())
    for (int i = 0; i < d; ++i) {
      const double r = 8.0 * std::sqrt(c.cov(i, i) + t * t);
      lo(i) = std::min(lo(i), c.mean(i) - r);
      hi(i) = std::max(hi(i), c.mean(i) + r);
    }
  const Vec h = (hi - lo) / (nodes - 1);
  // log p_data on the grid would cost nodes^d density evaluations through the
  // public API; use the explicit component formula instead.
  std::vector<Eigen::LLT<Mat>> chol;
  std::vector<double> lognorm;
  for (const auto& c : mix.components()) {
    chol.emplace_back(c.cov);
    const Mat L = chol.back().matrixL();
    lognorm.push_back(std::log(c.weight) - 0.5 * d * std::log(2 * M_PI) - L.diagonal().array().log().sum());
  }
  double z = 0.0;
  Vec num = Vec::Zero(d);
  Vec y(d);
  std::vector<int> idx(static_cast<std::size_t>(d), 0);
  const long total = static_cast<long>(std::pow(nodes, d));
  for (long k = 0; k < total; ++k) {
    long r = k;
    for (int i = 0; i < d; ++i) {
      y(i) = lo(i) + h(i) * static_cast<double>(r % nodes);
      r /= nodes;
    }
    double pd = 0.0;
    for (std::size_t c = 0; c < chol.size(); ++c) {
      const Vec u = chol[c].matrixL().solve(y - mix.components()[c].mean);
      pd += std::exp(lognorm[c] - 0.5 * u.squaredNorm());
    }
    const double kern = std::exp(-0.5 * (x - y).squaredNorm() / (t * t));
    const double w = pd * kern;
    z += w;
    num += w * (y - x) / (t * t);
  }
  return num / z;
}

/// Adaptive RK4 (step doubling) for dx/du = f(x, u) from u0 to u1.
inline Vec adaptive_rk4(const std::function<Vec(const Vec&, double)>& f, Vec x, double u0, double u1, double tol) {
  auto rk4 = [&](const Vec& y, double u, double h) {
    const Vec k1 = f(y, u), k2 = f(y + 0.5 * h * k1, u + 0.5 * h), k3 = f(y + 0.5 * h * k2, u + 0.5 * h),
              k4 = f(y + h * k3, u + h);
    return Vec(y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4));
  };
  double u = u0, h = (u1 - u0) / 64.0;
  while ((u1 - u) * (u1 - u0) > 0) {
    if ((u + h - u1) * (u1 - u0) > 0) h = u1 - u;
    const Vec full = rk4(x, u, h);
    const Vec half = rk4(rk4(x, u, 0.5 * h), u + 0.5 * h, 0.5 * h);
    const double e = (full - half).cwiseAbs().maxCoeff() / 15.0;
    if (e <= tol || std::abs(h) < 1e-12) {
      x = half + (half - full) / 15.0;
      u += h;
      if (e < tol / 64) h *= 2;
    } else {
      h *= 0.5;
    }
  }
  return x;
}

/// Random valid mixtures for property tests.
inline GaussianMixture random_mixture(Rng& rng, int dim = 0) {
  if (dim == 0) dim = rng.uniform_int(1, 3);
  const int k = rng.uniform_int(1, 4);
  std::vector<GaussianComponent> comps;
  double total = 0.0;
  for (int i = 0; i < k; ++i) {
    GaussianComponent c;
    c.weight = 0.2 + rng.uniform();
    total += c.weight;
    c.mean = Vec(dim);
    for (int j = 0; j < dim; ++j) c.mean(j) = 3.0 * (rng.uniform() - 0.5);
    const Mat a = rng.normal_matrix(dim, dim) * 0.5;
    c.cov = a * a.transpose() + 0.05 * Mat::Identity(dim, dim);
    comps.push_back(std::move(c));
  }
  for (auto& c : comps) c.weight /= total;
  // Renormalise exactly: the weights must sum to 1 within 1e-12.
  double s = 0.0;
  for (std::size_t i = 0; i + 1 < comps.size(); ++i) s += comps[i].weight;
  comps.back().weight = 1.0 - s;
  return GaussianMixture(std::move(comps));
}

/// eps(x, t) = a + b * t for every coordinate, independent of x.
class AffineInTimeEps final : public EpsModel {
 public:
  AffineInTimeEps(int dim, double a, double b) : dim_(dim), a_(a), b_(b) {}
  int dim() const override { return dim_; }
  Mat eps(const Mat& x, double t, const Conditioning&) const override {
    return Mat::Constant(x.rows(), x.cols(), a_ + b_ * t);
  }

 private:
  int dim_;
  double a_, b_;
};

/// Model whose data prediction x - t eps is the constant k.
class ConstantDataEps final : public EpsModel {
 public:
  ConstantDataEps(int dim, double k) : dim_(dim), k_(k) {}
  int dim() const override { return dim_; }
  Mat eps(const Mat& x, double t, const Conditioning&) const override { return (x.array() - k_) / t; }

 private:
  int dim_;
  double k_;
};

/// FNV-1a over the raw bits of v.
inline std::uint64_t checksum(const Vec& v) {
  std::uint64_t h = 1469598103934665603ULL;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    std::uint64_t bits;
    const double x = v(i);
    std::memcpy(&bits, &x, sizeof bits);
    h = (h ^ bits) * 1099511628211ULL;
  }
  return h;
}

}  // namespace sfd::test
