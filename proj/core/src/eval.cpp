#include "sfd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <nlohmann/json.hpp>

namespace sfd {

double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
  require(!a.empty() && !b.empty(), "wasserstein_1d: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  if (a.size() == b.size()) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(acc / static_cast<double>(a.size()));
  }
  // Merge the two quantile step functions.
  const double wa = 1.0 / static_cast<double>(a.size()), wb = 1.0 / static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double ra = wa, rb = wb, acc = 0.0;
  while (i < a.size() && j < b.size()) {
    const double m = std::min(ra, rb);
    acc += m * (a[i] - b[j]) * (a[i] - b[j]);
    ra -= m;
    rb -= m;
    if (ra <= 1e-15) {
      ++i;
      ra = wa;
    }
    if (rb <= 1e-15) {
      ++j;
      rb = wb;
    }
  }
  return std::sqrt(acc);
}

double sliced_wasserstein(const Mat& a, const Mat& b, int projections, Rng& rng) {
  require(a.cols() > 0 && b.cols() > 0, "sliced_wasserstein: empty sample set");
  require(a.rows() == b.rows(), "sliced_wasserstein: dimension mismatch");
  require(projections >= 1, "sliced_wasserstein: need at least one projection");
  double total = 0.0;
  for (int p = 0; p < projections; ++p) {
    Vec dir(a.rows());
    do {
      for (Eigen::Index i = 0; i < dir.size(); ++i) dir(i) = rng.normal();
    } while (dir.norm() == 0.0);
    dir.normalize();
    const Eigen::RowVectorXd pa = dir.transpose() * a;
    const Eigen::RowVectorXd pb = dir.transpose() * b;
    total += wasserstein_1d({pa.data(), pa.data() + pa.size()}, {pb.data(), pb.data() + pb.size()});
  }
  return total / projections;
}

double mean_endpoint_error(const Mat& a, const Mat& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols() && a.cols() > 0, "mean_endpoint_error: shape mismatch");
  return (a - b).colwise().norm().mean();
}

double oracle_eps_error(const EpsModel& model, const GaussianMixture& data, double t_min, double t_max, int levels,
                        Eigen::Index points, Rng& rng) {
  require(levels >= 2 && points >= 1 && t_min > 0.0 && t_max > t_min, "oracle_eps_error: invalid probe grid");
  double total = 0.0;
  for (int i = 0; i < levels; ++i) {
    const double t = t_min * std::pow(t_max / t_min, static_cast<double>(i) / (levels - 1));
    const Mat x = perturb(data.sample(rng, points), t, rng);
    total += (model.eps(x, t, {}) - oracle_eps(data, x, t)).colwise().norm().mean();
  }
  return total / levels;
}

ReferenceTrajectories generate_reference(const EpsModel& teacher, const TimeSchedule& schedule, SolverKind kind,
                                         int sub_steps, const Mat& x_start) {
  const int N = schedule.steps();
  ReferenceTrajectories ref{schedule.values(), std::vector<Mat>(static_cast<std::size_t>(N) + 1)};
  ref.points[static_cast<std::size_t>(N)] = x_start;
  EpsFunction eps(teacher);
  MultistepHistory history;
  for (int n = N - 1; n >= 0; --n)
    ref.points[static_cast<std::size_t>(n)] =
        solve_segment(eps, ref.points[static_cast<std::size_t>(n) + 1], schedule[n + 1], schedule[n], sub_steps, kind,
                      history, schedule.rho())
            .x;
  return ref;
}

std::vector<double> trajectory_deviation(const ReferenceTrajectories& reference, const EpsModel& probe,
                                         const TimeSchedule& schedule) {
  require(reference.times == schedule.values(), "trajectory_deviation: reference was built on a different schedule");
  const int N = schedule.steps();
  std::vector<double> row(static_cast<std::size_t>(N));
  EpsFunction eps(probe);
  for (int n = 0; n < N; ++n) {
    const Mat& x_next = reference.points[static_cast<std::size_t>(n) + 1];
    const Mat step = step_euler(eps, x_next, schedule[n + 1], schedule[n]);
    row[static_cast<std::size_t>(n)] = mean_endpoint_error(reference.points[static_cast<std::size_t>(n)], step);
  }
  return row;
}

double DeviationMatrix::off_target_improvement_fraction() const {
  std::size_t improved = 0, total = 0;
  for (std::size_t k = 0; k < rows.size(); ++k)
    for (std::size_t n = 0; n < rows[k].size(); ++n) {
      if (n == k) continue;
      ++total;
      if (rows[k][n] < baseline[n]) ++improved;
    }
  return total ? static_cast<double>(improved) / static_cast<double>(total) : 0.0;
}

nlohmann::json DeviationMatrix::to_json() const {
  return {{"baseline", baseline},
          {"rows", rows},
          {"off_target_improvement_fraction", off_target_improvement_fraction()}};
}

DeviationMatrix smooth_modification_experiment(const EpsNet& teacher, const SmoothModificationConfig& cfg, Rng& rng) {
  const TimeSchedule schedule = make_polynomial(cfg.steps, cfg.t_min, cfg.t_max, cfg.rho);
  Rng eval_rng = rng.split(0);
  const Mat x_start = cfg.t_max * eval_rng.normal_matrix(teacher.dim(), cfg.chains);
  const auto reference = generate_reference(teacher, schedule, cfg.teacher_kind, cfg.sub_steps, x_start);

  DeviationMatrix m;
  m.baseline = trajectory_deviation(reference, teacher, schedule);

  DistillConfig dc;
  dc.steps = cfg.steps;
  dc.sub_steps = cfg.sub_steps;
  dc.teacher_kind = cfg.teacher_kind;
  dc.afs = false;
  dc.loss = cfg.loss;
  dc.lr = cfg.lr;
  dc.lr_decay = false;
  dc.batch = cfg.batch;
  dc.budget = cfg.iterations * cfg.batch;
  dc.rho = cfg.rho;
  dc.t_min = cfg.t_min;
  dc.t_max = cfg.t_max;
  for (int k = 0; k < cfg.steps; ++k) {
    Rng train_rng = rng.split(static_cast<std::uint64_t>(k) + 1);
    const auto trained = distill_single_segment(teacher, teacher, dc, k, train_rng);
    m.rows.push_back(trajectory_deviation(reference, trained.student, schedule));
  }
  return m;
}

double sample_quality(const EpsModel& model, const TimeSchedule& schedule, SampleOptions options, const Mat& reference,
                      const QualityConfig& cfg) {
  Rng rng(cfg.seed);
  Rng noise_rng = rng.split(1), proj_rng = rng.split(2);
  options.chains = cfg.chains;
  options.threads = cfg.threads;
  const auto result = sample(model, schedule, options, noise_rng);
  return sliced_wasserstein(result.samples, reference, cfg.projections, proj_rng);
}

double endpoint_error(const EpsModel& model, const TimeSchedule& schedule, SampleOptions options,
                      const EpsModel& teacher, const TimeSchedule& teacher_schedule, SolverKind teacher_kind,
                      int sub_steps, const QualityConfig& cfg) {
  require(schedule.t_max() == teacher_schedule.t_max() && schedule.t_min() == teacher_schedule.t_min(),
          "endpoint_error: schedules must share their endpoints");
  Rng rng(cfg.seed);
  Rng noise_rng = rng.split(1);
  const Mat x_start = schedule.t_max() * noise_rng.normal_matrix(model.dim(), cfg.chains);
  options.chains = cfg.chains;
  options.threads = cfg.threads;
  const Mat x = sample_from(model, schedule, options, x_start).samples;
  const auto ref = generate_reference(teacher, teacher_schedule, teacher_kind, sub_steps, x_start);
  return mean_endpoint_error(x, ref.points.front());
}

std::vector<SweepRow> extrapolation_sweep(const EpsModel& model, const std::vector<int>& steps, const Mat& reference,
                                          const SweepConfig& cfg) {
  std::vector<SweepRow> rows;
  for (int n : steps) {
    const TimeSchedule schedule = make_polynomial(n, cfg.t_min, cfg.t_max, cfg.rho);
    SampleOptions o;
    o.kind = cfg.kind;
    o.afs = cfg.afs;
    if (model.has_step_condition()) o.step = n;
    const std::int64_t nfe = static_cast<std::int64_t>(n) * nfe_per_step(cfg.kind) - (cfg.afs ? 1 : 0);
    rows.push_back({n, nfe, sample_quality(model, schedule, o, reference, cfg.quality)});
  }
  return rows;
}

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  const auto old = out.precision(17);
  out << "steps,nfe,sliced_wasserstein\n";
  for (const auto& r : rows) out << r.steps << ',' << r.nfe << ',' << r.metric << '\n';
  out.precision(old);
}

Projection project_trajectories(const std::vector<Mat>& traces, int dims) {
  require(traces.size() >= 2, "project_trajectories: need at least two traces");
  require(dims == 2 || dims == 3, "project_trajectories: target dimension must be 2 or 3");
  const Eigen::Index d = traces.front().rows();
  Eigen::Index total = 0;
  for (const auto& t : traces) {
    require(t.rows() == d, "project_trajectories: inconsistent dimensions");
    total += t.cols();
  }
  Mat pooled(d, total);
  Eigen::Index at = 0;
  for (const auto& t : traces) {
    pooled.middleCols(at, t.cols()) = t;
    at += t.cols();
  }
  Projection p;
  p.mean = pooled.rowwise().mean();
  const Mat centered = pooled.colwise() - p.mean;
  const Mat cov = centered * centered.transpose() / static_cast<double>(total);
  const double total_var = cov.trace();
  if (!(total_var > 0.0)) throw NumericalError("project_trajectories: all points are identical");
  Eigen::SelfAdjointEigenSolver<Mat> es(cov);
  const Eigen::Index keep = std::min<Eigen::Index>(dims, d);
  p.components.resize(d, keep);
  p.explained_variance.resize(keep);
  for (Eigen::Index k = 0; k < keep; ++k) {
    // Eigenvalues come in increasing order.
    const Eigen::Index idx = d - 1 - k;
    Vec v = es.eigenvectors().col(idx);
    // Sign convention: largest-magnitude entry positive.
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    p.components.col(k) = v;
    p.explained_variance(k) = std::max(0.0, es.eigenvalues()(idx)) / total_var;
  }
  const Mat coords = p.components.transpose() * centered;
  p.reconstruction_error = std::sqrt((centered - p.components * coords).squaredNorm() / static_cast<double>(total));
  at = 0;
  for (const auto& t : traces) {
    p.traces.push_back(coords.middleCols(at, t.cols()));
    at += t.cols();
  }
  return p;
}

std::vector<Mat> chain_paths(const SolveTrace& trace) {
  require(!trace.states.empty(), "chain_paths: empty trace");
  const Eigen::Index d = trace.states.front().rows(), chains = trace.states.front().cols();
  const auto T = static_cast<Eigen::Index>(trace.states.size());
  std::vector<Mat> out(static_cast<std::size_t>(chains), Mat(d, T));
  for (Eigen::Index c = 0; c < chains; ++c)
    for (Eigen::Index s = 0; s < T; ++s) out[static_cast<std::size_t>(c)].col(s) = trace.states[static_cast<std::size_t>(s)].col(c);
  return out;
}

void write_projection_csv(std::ostream& out, const Projection& p) {
  const auto old = out.precision(17);
  out << "trace_id,point_index";
  for (Eigen::Index k = 0; k < p.components.cols(); ++k) out << ",pc_" << k;
  out << '\n';
  for (std::size_t i = 0; i < p.traces.size(); ++i)
    for (Eigen::Index s = 0; s < p.traces[i].cols(); ++s) {
      out << i << ',' << s;
      for (Eigen::Index k = 0; k < p.traces[i].rows(); ++k) out << ',' << p.traces[i](k, s);
      out << '\n';
    }
  out.precision(old);
}

}  // namespace sfd
