#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "support.hpp"

using namespace sfd;

namespace {

NetArch tiny_arch() {
  NetArch a;
  a.dim = 2;
  a.hidden = {16, 16};
  a.time_features = 8;
  a.emb_width = 8;
  return a;
}

Mat permute_columns(const Mat& m, const std::vector<Eigen::Index>& perm) {
  Mat out(m.rows(), m.cols());
  for (std::size_t j = 0; j < perm.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = m.col(perm[j]);
  return out;
}

}  // namespace

TEST_CASE("sliced_wasserstein") {
  Rng rng(1);
  SUBCASE("identical sets give zero") {
    const Mat a = rng.normal_matrix(2, 500);
    Rng p(2);
    CHECK(sliced_wasserstein(a, a, 64, p) == 0.0);
  }
  SUBCASE("shifted 1-D Gaussians are one apart") {
    const Mat a = rng.normal_matrix(1, 200000);
    const Mat b = rng.normal_matrix(1, 200000).array() + 1.0;
    Rng p(3);
    CHECK(sliced_wasserstein(a, b, 4, p) == doctest::Approx(1.0).epsilon(0.05));
  }
  SUBCASE("permutations of both sets change nothing") {
    const Mat a = rng.normal_matrix(2, 300), b = 2.0 * rng.normal_matrix(2, 300);
    std::vector<Eigen::Index> perm(300);
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    std::rotate(perm.begin(), perm.begin() + 17, perm.end());
    Rng p1(4), p2(4);
    CHECK(sliced_wasserstein(a, b, 32, p1) == sliced_wasserstein(permute_columns(a, perm), permute_columns(b, perm), 32, p2));
  }
  SUBCASE("symmetric and non-negative") {
    for (int trial = 0; trial < 20; ++trial) {
      const Mat a = rng.normal_matrix(3, 120 + trial);
      const Mat b = (rng.normal_matrix(3, 150).array() * (0.5 + rng.uniform())).matrix();
      Rng p1(5 + trial), p2(5 + trial);
      const double ab = sliced_wasserstein(a, b, 16, p1), ba = sliced_wasserstein(b, a, 16, p2);
      CHECK(ab >= 0.0);
      CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
    }
  }
  SUBCASE("errors") {
    Rng p(6);
    CHECK_THROWS_AS(sliced_wasserstein(Mat(2, 0), rng.normal_matrix(2, 10), 4, p), ArgumentError);
    CHECK_THROWS_AS(sliced_wasserstein(rng.normal_matrix(1, 10), rng.normal_matrix(2, 10), 4, p), ArgumentError);
  }
}

TEST_CASE("wasserstein_1d") {
  CHECK(wasserstein_1d({0.0, 1.0}, {1.0, 2.0}) == doctest::Approx(1.0));
  CHECK(wasserstein_1d({3.0, 1.0}, {1.0, 3.0}) == 0.0);
  // Unequal sizes: {0} against {0, 2} moves half the mass a distance of 2.
  CHECK(wasserstein_1d({0.0}, {0.0, 2.0}) == doctest::Approx(std::sqrt(2.0)));
  CHECK_THROWS_AS(wasserstein_1d({}, {1.0}), ArgumentError);
}

TEST_CASE("trajectory_deviation") {
  const auto ring = GaussianMixture::ring(8, 1.0, 0.1);
  const MixtureOracle oracle(ring);
  const auto schedule = make_polynomial(4, 0.002, 80.0, 7.0);
  Rng rng(7);
  const Mat x_start = 80.0 * rng.normal_matrix(2, 1000);
  SUBCASE("the generating model's own Euler steps give an all-zero row") {
    const auto ref = generate_reference(oracle, schedule, SolverKind::euler, 1, x_start);
    for (double v : trajectory_deviation(ref, oracle, schedule)) CHECK(v == 0.0);
  }
  SUBCASE("fine references give a strictly positive local error profile") {
    const auto ref = generate_reference(oracle, schedule, SolverKind::dpm_2s, 3, x_start);
    const auto row = trajectory_deviation(ref, oracle, schedule);
    REQUIRE(row.size() == 4);
    for (std::size_t n = 0; n < row.size(); ++n) {
      // independent recomputation of the entry
      const Mat step = ref.points[n + 1] + (schedule[n] - schedule[static_cast<int>(n) + 1]) *
                                               oracle.eps(ref.points[n + 1], schedule[static_cast<int>(n) + 1], {});
      CHECK(row[n] > 0.0);
      CHECK(row[n] == doctest::Approx(mean_endpoint_error(ref.points[n], step)).epsilon(1e-12));
    }
  }
  SUBCASE("doubling the chain count moves entries by under 3%") {
    Rng r2(8);
    const Mat more = 80.0 * r2.normal_matrix(2, 2000);
    const auto a = trajectory_deviation(generate_reference(oracle, schedule, SolverKind::dpm_2s, 3, x_start), oracle,
                                        schedule);
    const auto b =
        trajectory_deviation(generate_reference(oracle, schedule, SolverKind::dpm_2s, 3, more), oracle, schedule);
    for (std::size_t n = 0; n < a.size(); ++n) CHECK(std::abs(a[n] - b[n]) < 0.03 * b[n]);
  }
  SUBCASE("schedule mismatch is rejected") {
    const auto ref = generate_reference(oracle, schedule, SolverKind::euler, 1, x_start);
    CHECK_THROWS_AS(trajectory_deviation(ref, oracle, make_polynomial(4, 0.006, 80.0, 7.0)), ArgumentError);
  }
}

TEST_CASE("smooth_modification_experiment") {
  Rng init(9);
  const EpsNet teacher(tiny_arch(), init);
  SmoothModificationConfig cfg;
  cfg.chains = 200;
  cfg.batch = 16;
  SUBCASE("zero-budget students reproduce the baseline exactly") {
    cfg.iterations = 0;
    Rng rng(10);
    const auto m = smooth_modification_experiment(teacher, cfg, rng);
    REQUIRE(m.rows.size() == 4);
    for (const auto& row : m.rows) CHECK(row == m.baseline);
    CHECK(m.off_target_improvement_fraction() == 0.0);
  }
  SUBCASE("shape, JSON and read-only teacher") {
    cfg.iterations = 2;
    const auto before = sfd::test::checksum(teacher.params());
    Rng rng(11);
    const auto m = smooth_modification_experiment(teacher, cfg, rng);
    CHECK(sfd::test::checksum(teacher.params()) == before);
    for (const auto& row : m.rows) {
      REQUIRE(row.size() == 4);
      for (double v : row) CHECK(v >= 0.0);
    }
    const auto doc = m.to_json();
    CHECK(doc.at("rows").size() == 4);
    CHECK(doc.at("baseline").size() == 4);
  }
}

TEST_CASE("DeviationMatrix statistics") {
  DeviationMatrix m;
  m.baseline = {1.0, 1.0, 1.0};
  m.rows = {{0.5, 0.9, 1.1}, {0.8, 0.5, 1.0}, {2.0, 0.7, 0.5}};
  // off-diagonal: 0.9 1.1 | 0.8 1.0 | 2.0 0.7 -> 3 of 6 strictly below
  CHECK(m.off_target_improvement_fraction() == doctest::Approx(0.5));
}

TEST_CASE("sample_quality and extrapolation_sweep") {
  const auto ring = GaussianMixture::ring(8, 1.0, 0.1);
  const MixtureOracle oracle(ring);
  Rng data_rng(12);
  const Mat reference = ring.sample(data_rng, 2000);
  SweepConfig cfg;
  cfg.quality.chains = 2000;
  cfg.quality.projections = 32;
  cfg.quality.seed = 13;
  SUBCASE("sweep entry at N equals a direct evaluation") {
    const auto rows = extrapolation_sweep(oracle, {2, 3, 4}, reference, cfg);
    REQUIRE(rows.size() == 3);
    for (const auto& row : rows) {
      SampleOptions opt;
      opt.afs = cfg.afs;
      const double direct =
          sample_quality(oracle, make_polynomial(row.steps, cfg.t_min, cfg.t_max, cfg.rho), opt, reference, cfg.quality);
      CHECK(row.metric == direct);
      CHECK(std::isfinite(row.metric));
      CHECK(row.metric > 0.0);
      CHECK(row.nfe == row.steps - 1);
    }
  }
  SUBCASE("same seed, same number; threads do not matter") {
    SampleOptions opt;
    const auto s = make_polynomial(4, cfg.t_min, cfg.t_max, cfg.rho);
    const double a = sample_quality(oracle, s, opt, reference, cfg.quality);
    QualityConfig q = cfg.quality;
    q.threads = 3;
    CHECK(sample_quality(oracle, s, opt, reference, q) == a);
  }
  SUBCASE("endpoint error of the teacher against itself is zero") {
    SampleOptions opt;
    opt.kind = SolverKind::heun;
    const auto s = make_polynomial(3, cfg.t_min, cfg.t_max, cfg.rho);
    CHECK(endpoint_error(oracle, s, opt, oracle, s, SolverKind::heun, 1, cfg.quality) == 0.0);
  }
  SUBCASE("CSV") {
    std::ostringstream out;
    write_sweep_csv(out, {{2, 1, 0.5}, {3, 2, 0.25}});
    CHECK(out.str().rfind("steps,nfe,sliced_wasserstein\n", 0) == 0);
    CHECK(out.str().find("3,2,") != std::string::npos);
  }
}

TEST_CASE("oracle_eps_error") {
  const auto ring = GaussianMixture::ring(8, 1.0, 0.1);
  const MixtureOracle oracle(ring);
  Rng rng(14);
  CHECK(oracle_eps_error(oracle, ring, 0.006, 80.0, 8, 64, rng) == 0.0);
  Rng init(15);
  const EpsNet untrained(tiny_arch(), init);
  CHECK(oracle_eps_error(untrained, ring, 0.006, 80.0, 8, 64, rng) > 0.0);
}

TEST_CASE("project_trajectories") {
  Rng rng(16);
  SUBCASE("points in a 2-D affine subspace are reproduced exactly") {
    Mat basis(3, 2);
    basis << 1, 0, 1, 1, 0, 2;
    const Vec offset = Vec::Constant(3, 0.7);
    std::vector<Mat> traces;
    for (int k = 0; k < 5; ++k) traces.push_back((basis * rng.normal_matrix(2, 6)).colwise() + offset);
    const auto p = project_trajectories(traces, 2);
    CHECK(p.explained_variance.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p.reconstruction_error < 1e-12);
    REQUIRE(p.traces.size() == 5);
    CHECK(p.traces[0].rows() == 2);
    CHECK(p.traces[0].cols() == 6);
  }
  SUBCASE("a straight line stays a straight line") {
    Vec dir(3);
    dir << 1, -2, 0.5;
    std::vector<Mat> traces(2, Mat(3, 8));
    for (int k = 0; k < 2; ++k)
      for (int i = 0; i < 8; ++i) traces[static_cast<std::size_t>(k)].col(i) = (i + 3.0 * k) * dir;
    traces[1].row(2).array() += 1e-3 * Vec::LinSpaced(8, 0, 1).transpose().array();  // keep the cloud non-degenerate
    const auto p = project_trajectories(traces, 2);
    const Mat& line = p.traces[0];
    // collinear: every point is an affine combination of the first two
    const Vec u = line.col(1) - line.col(0);
    for (int i = 2; i < 8; ++i) {
      const Vec w = line.col(i) - line.col(0);
      CHECK(std::abs(u(0) * w(1) - u(1) * w(0)) < 1e-9 * u.squaredNorm() * i);
    }
  }
  SUBCASE("two-dimensional sampler traces are lossless") {
    const MixtureOracle oracle(GaussianMixture::ring(8, 1.0, 0.1));
    SampleOptions opt;
    opt.chains = 64;
    const auto res = sample(oracle, make_polynomial(6, 0.006, 80.0, 7.0), opt, rng);
    const auto paths = chain_paths(res.trace);
    REQUIRE(paths.size() == 64);
    CHECK(paths[0].cols() == 7);
    const auto p = project_trajectories(paths, 3);
    CHECK(p.explained_variance.sum() > 0.99);
    CHECK(p.components.cols() == 2);
    std::ostringstream out;
    write_projection_csv(out, p);
    CHECK(!out.str().empty());
  }
  SUBCASE("errors") {
    const Mat same = Mat::Constant(2, 4, 1.5);
    CHECK_THROWS_AS(project_trajectories({same, same}, 2), NumericalError);
    CHECK_THROWS_AS(project_trajectories({same}, 2), ArgumentError);
    CHECK_THROWS_AS(project_trajectories({same, same}, 4), ArgumentError);
    CHECK_THROWS_AS(project_trajectories({same, Mat::Zero(3, 4)}, 2), ArgumentError);
  }
}
