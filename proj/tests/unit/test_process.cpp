#include <doctest.h>

#include <nlohmann/json.hpp>

#include "support.hpp"

using namespace sfd;
using sfd::test::quadrature_score;
using sfd::test::random_mixture;

namespace {

Mat col(std::initializer_list<double> v) {
  Mat m(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

GaussianMixture two_component_1d() {
  return GaussianMixture({{0.3, col({-1.0}), Mat::Constant(1, 1, 0.25)}, {0.7, col({1.5}), Mat::Constant(1, 1, 0.5)}});
}

}  // namespace

TEST_CASE("perturb") {
  Rng rng(1);
  SUBCASE("zero noise is the identity") {
    const Mat x = col({1.0, 2.0});
    CHECK(perturb(x, 0.0, rng) == x);
  }
  SUBCASE("same seed, same output") {
    Rng a(42), b(42);
    CHECK(perturb(col({1.0, 2.0}), 1.0, a) == perturb(col({1.0, 2.0}), 1.0, b));
  }
  SUBCASE("variance follows t^2") {
    const Mat x = perturb(Mat::Zero(2, 100000), 3.0, rng);
    for (Eigen::Index i = 0; i < 2; ++i) {
      const double var = x.row(i).array().square().mean() - std::pow(x.row(i).mean(), 2);
      CHECK(var == doctest::Approx(9.0).epsilon(0.03));
    }
  }
  SUBCASE("negative t is rejected") { CHECK_THROWS_AS(perturb(col({0.0}), -0.1, rng), ArgumentError); }
}

TEST_CASE("mixture_score") {
  SUBCASE("standard normal closed form") {
    const auto g = GaussianMixture::standard_normal(1);
    CHECK(mixture_score(g, col({2.0}), 1.0)(0, 0) == doctest::Approx(-1.0).epsilon(1e-15));
  }
  SUBCASE("symmetric pair has zero score at the origin") {
    const Mat cov = 0.3 * Mat::Identity(2, 2);
    const GaussianMixture m({{0.5, col({1.0, -0.5}), cov}, {0.5, col({-1.0, 0.5}), cov}});
    for (double t : {0.0, 0.1, 1.0, 10.0}) CHECK(mixture_score(m, Mat::Zero(2, 1), t).norm() < 1e-15);
  }
  SUBCASE("two-component 1-D mixture against quadrature") {
    const auto m = two_component_1d();
    const double got = mixture_score(m, col({0.5}), 0.7)(0, 0);
    const double want = quadrature_score(m, col({0.5}), 0.7)(0);
    CHECK(std::abs(got - want) <= 1e-6 * std::abs(want));
  }
  SUBCASE("posterior-weighted combination equals the log-density gradient") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
      const auto m = random_mixture(rng);
      Vec x(m.dim());
      for (int i = 0; i < m.dim(); ++i) x(i) = 4.0 * (rng.uniform() - 0.5);
      const double t = 0.05 + 2.0 * rng.uniform();
      const Vec s = m.score(x, t);
      Vec fd(m.dim());
      const double h = 1e-5;
      for (int i = 0; i < m.dim(); ++i) {
        Vec xp = x, xm = x;
        xp(i) += h;
        xm(i) -= h;
        fd(i) = (m.log_density(xp, t) - m.log_density(xm, t)) / (2 * h);
      }
      CHECK((s - fd).norm() <= 1e-6 * std::max(1.0, s.norm()));
    }
  }
}

TEST_CASE("oracle_eps") {
  SUBCASE("standard normal identity") {
    const auto g = GaussianMixture::standard_normal(1);
    CHECK(oracle_eps(g, col({2.0}), 1.0)(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  }
  SUBCASE("equals -t * score exactly for random mixtures") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
      const auto m = random_mixture(rng);
      const Mat x = 3.0 * rng.normal_matrix(m.dim(), 4);
      const double t = std::exp(std::log(0.006) + rng.uniform() * std::log(80.0 / 0.006));
      const Mat e = oracle_eps(m, x, t);
      const Mat ref = -t * mixture_score(m, x, t);
      CHECK((e - ref).cwiseAbs().maxCoeff() == 0.0);
    }
  }
  SUBCASE("eight-mode ring against 2-D quadrature") {
    const auto ring = GaussianMixture::ring(8, 1.0, 0.1);
    const Vec x = col({1.0, 0.0});
    const Vec got = oracle_eps(ring, x, 0.5).col(0);
    const Vec want = -0.5 * quadrature_score(ring, x, 0.5);
    CHECK((got - want).norm() <= 1e-6 * want.norm());
  }
  SUBCASE("zero noise is rejected") {
    CHECK_THROWS_AS(oracle_eps(GaussianMixture::standard_normal(1), col({1.0}), 0.0), ArgumentError);
  }
}

TEST_CASE("exact_flow") {
  const auto g = GaussianMixture::standard_normal(1);
  SUBCASE("matches adaptive RK4 on the probability-flow ODE") {
    const double got = exact_flow(g, col({80.0}), 80.0, 0.006)(0, 0);
    CHECK(got == doctest::Approx(80.0 * std::sqrt(1.000036 / 6401.0)).epsilon(1e-12));
    // Integrate in u = ln t, where dx/du = t * eps(x, t).
    const auto f = [&](const Vec& x, double u) {
      const double t = std::exp(u);
      return Vec(t * oracle_eps(g, x, t).col(0));
    };
    const Vec rk = sfd::test::adaptive_rk4(f, col({80.0}), std::log(80.0), std::log(0.006), 1e-12);
    CHECK(std::abs(rk(0) - got) < 1e-8);
  }
  SUBCASE("t == s is the identity") {
    const Mat x = col({0.3});
    CHECK(exact_flow(g, x, 2.0, 2.0) == x);
  }
  SUBCASE("the mean is a fixed point") {
    const auto h = GaussianMixture::isotropic(col({3.0}), 2.0);
    for (double t : {0.006, 0.5, 7.0, 80.0}) CHECK(exact_flow(h, col({3.0}), 10.0, t)(0, 0) == doctest::Approx(3.0));
  }
  SUBCASE("multi-component input is rejected") {
    CHECK_THROWS_AS(exact_flow(two_component_1d(), col({0.0}), 1.0, 0.5), ArgumentError);
  }
  SUBCASE("finite-difference residual converges at first order") {
    const auto h2 = GaussianMixture::isotropic(col({0.5, -0.2}), 0.8);
    const Mat xs = col({3.0, -2.0});
    const double s = 5.0, t = 1.3;
    const Mat x = exact_flow(h2, xs, s, t);
    const Vec e = oracle_eps(h2, x, t).col(0);
    std::vector<double> hs, errs;
    for (double dh = 1e-2; dh > 1e-4; dh /= 2) {
      const Vec fd = (exact_flow(h2, xs, s, t + dh) - x).col(0) / dh;
      hs.push_back(dh);
      errs.push_back((fd - e).norm() / e.norm());
    }
    const double slope = sfd::test::loglog_slope(hs, errs);
    CHECK(slope == doctest::Approx(1.0).epsilon(0.1));
    CHECK(errs.back() < errs.front());
  }
}

TEST_CASE("prior_sample and DiffusionSpec") {
  const DiffusionSpec spec(0.006, 80.0);
  SUBCASE("reproducible") {
    Rng a(5), b(5);
    CHECK(prior_sample(spec, 2, 3, a) == prior_sample(spec, 2, 3, b));
  }
  SUBCASE("per-coordinate std is t_max") {
    Rng rng(9);
    const Mat x = prior_sample(spec, 1, 100000, rng);
    const double sd = std::sqrt(x.array().square().mean());
    CHECK(sd == doctest::Approx(80.0).epsilon(0.03));
  }
  SUBCASE("degenerate specs are rejected") {
    CHECK_THROWS_AS(DiffusionSpec(0.006, 0.0), ArgumentError);
    CHECK_THROWS_AS(DiffusionSpec(0.0, 80.0), ArgumentError);
    CHECK_THROWS_AS(DiffusionSpec(1.0, 0.5), ArgumentError);
  }
}

TEST_CASE("mixture validation and JSON") {
  SUBCASE("weights must sum to one") {
    CHECK_THROWS_AS(GaussianMixture({{0.5, col({0.0}), Mat::Identity(1, 1)}}), ArgumentError);
  }
  SUBCASE("covariance must be positive definite") {
    Mat bad(2, 2);
    bad << 1.0, 2.0, 2.0, 1.0;
    CHECK_THROWS_AS(GaussianMixture({{1.0, col({0.0, 0.0}), bad}}), ArgumentError);
  }
  SUBCASE("dimension is limited to 1..3") {
    CHECK_THROWS_AS(GaussianMixture::standard_normal(4), ArgumentError);
  }
  SUBCASE("round trip") {
    Rng rng(3);
    const auto m = random_mixture(rng, 3);
    const auto back = GaussianMixture::from_json(nlohmann::json::parse(m.to_json().dump()));
    const Mat x = rng.normal_matrix(3, 5);
    CHECK(back.score(x, 0.7) == m.score(x, 0.7));
  }
  SUBCASE("malformed documents name the problem") {
    const auto doc = nlohmann::json::parse(R"({"dim": 2, "components": [{"weight": 1, "mean": [0], "cov": [[1]]}]})");
    CHECK_THROWS_WITH_AS(GaussianMixture::from_json(doc), doctest::Contains("mean"), FormatError);
  }
}

TEST_CASE("ConditionalMixture") {
  const auto ring = GaussianMixture::ring(4, 2.0, 0.3);
  const auto cm = ConditionalMixture::from_components(ring);
  CHECK(cm.num_classes() == 4);
  SUBCASE("marginal equals the prior-weighted class mixtures") {
    Rng rng(2);
    const Mat x = rng.normal_matrix(2, 6);
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      double p = 0.0;
      for (int c = 0; c < cm.num_classes(); ++c)
        p += cm.prior()[static_cast<std::size_t>(c)] * std::exp(cm.class_mixture(c).log_density(x.col(j), 0.4));
      CHECK(std::exp(cm.marginal().log_density(x.col(j), 0.4)) == doctest::Approx(p).epsilon(1e-12));
    }
  }
  SUBCASE("prior must sum to one") {
    CHECK_THROWS_AS(ConditionalMixture({{0, ring}, {1, ring}}, {0.5, 0.6}), ArgumentError);
  }
  SUBCASE("round trip") {
    const auto back = ConditionalMixture::from_json(nlohmann::json::parse(cm.to_json().dump()));
    CHECK(back.prior() == cm.prior());
    CHECK(back.to_json() == cm.to_json());
  }
}
