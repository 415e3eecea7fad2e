#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "sfd/common.hpp"
#include "sfd/model.hpp"
#include "sfd/rng.hpp"
#include "sfd/schedule.hpp"
#include "sfd/solver.hpp"
#include "sfd/trainer.hpp"

namespace sfd {

/// Mean over P random unit directions of the 1-D 2-Wasserstein distance
/// between the projected empirical distributions of the columns of a and b.
double sliced_wasserstein(const Mat& a, const Mat& b, int projections, Rng& rng);

/// Exact 2-Wasserstein distance between two 1-D empirical distributions.
double wasserstein_1d(std::vector<double> a, std::vector<double> b);

/// Mean Euclidean distance between matching columns.
double mean_endpoint_error(const Mat& a, const Mat& b);

/// Mean || eps_model - oracle_eps || over noised data points at `levels`
/// log-spaced noise levels in [t_min, t_max], `points` per level.
double oracle_eps_error(const EpsModel& model, const GaussianMixture& data, double t_min, double t_max, int levels,
                        Eigen::Index points, Rng& rng);

/// Teacher trajectory sampled on a schedule; points[n] holds the chains at t_n.
struct ReferenceTrajectories {
  std::vector<double> times;  // ascending, equals the schedule values
  std::vector<Mat> points;
};

/// Runs the teacher from x_start (at t_max) with `sub_steps` solver steps per
/// schedule segment, carrying multistep history across segments.
ReferenceTrajectories generate_reference(const EpsModel& teacher, const TimeSchedule& schedule, SolverKind kind,
                                         int sub_steps, const Mat& x_start);

/// Per-segment mean over chains of || x_n - Euler(x_{n+1}, t_{n+1}, t_n; probe) ||
/// with x_n, x_{n+1} taken from the reference trajectories.
std::vector<double> trajectory_deviation(const ReferenceTrajectories& reference, const EpsModel& probe,
                                         const TimeSchedule& schedule);

struct DeviationMatrix {
  std::vector<double> baseline;           // untouched teacher
  std::vector<std::vector<double>> rows;  // rows[k][n]: student fine-tuned on segment k

  /// Fraction of off-diagonal entries below the baseline.
  double off_target_improvement_fraction() const;
  nlohmann::json to_json() const;
};

struct SmoothModificationConfig {
  int steps = 4;
  int sub_steps = 3;
  SolverKind teacher_kind = SolverKind::dpm_2s;
  std::int64_t iterations = 100;  // fine-tuning budget per student
  int batch = 128;
  double lr = 5e-5;
  LossMetric loss{LossKind::l2sq, std::nullopt};
  int chains = 1000;
  double rho = 7.0;
  double t_min = 0.002;
  double t_max = 80.0;
};

/// Fine-tunes one student per segment (only on that segment) and evaluates
/// every student on every segment against the teacher's trajectories.
DeviationMatrix smooth_modification_experiment(const EpsNet& teacher, const SmoothModificationConfig& cfg, Rng& rng);

struct QualityConfig {
  std::int64_t chains = 10000;
  int projections = 128;
  std::uint64_t seed = 0;  // fixes prior noise and projections
  int threads = 1;
};

/// Sliced-Wasserstein distance between samples of `model` on `schedule` and
/// the reference data. Same seed, same number.
double sample_quality(const EpsModel& model, const TimeSchedule& schedule, SampleOptions options,
                      const Mat& reference, const QualityConfig& cfg);

/// Mean distance between the model's samples and the teacher's fine solution
/// (sub_steps steps of teacher_kind per segment of teacher_schedule) started
/// from the same prior draws as sample_quality with the same seed.
double endpoint_error(const EpsModel& model, const TimeSchedule& schedule, SampleOptions options,
                      const EpsModel& teacher, const TimeSchedule& teacher_schedule, SolverKind teacher_kind,
                      int sub_steps, const QualityConfig& cfg);

struct SweepRow {
  int steps = 0;
  std::int64_t nfe = 0;
  double metric = 0.0;
};

struct SweepConfig {
  SolverKind kind = SolverKind::euler;
  bool afs = true;
  double rho = 7.0;
  double t_min = 0.006;
  double t_max = 80.0;
  QualityConfig quality;
};

/// Samples the model at each step count (rebuilding the schedule; the step
/// condition follows N for step-conditioned models) and reports sample_quality.
std::vector<SweepRow> extrapolation_sweep(const EpsModel& model, const std::vector<int>& steps,
                                          const Mat& reference, const SweepConfig& cfg);

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows);

struct Projection {
  std::vector<Mat> traces;  // each dims x T
  Vec explained_variance;   // ratio per kept component
  Mat components;           // d x dims
  Vec mean;
  double reconstruction_error = 0.0;  // RMS distance of points to the kept subspace
};

/// PCA on all points of all traces pooled; each trace is d x T (one column per
/// time point). Components beyond d are dropped.
Projection project_trajectories(const std::vector<Mat>& traces, int dims);

/// Per-chain paths (d x T) from a batched trace.
std::vector<Mat> chain_paths(const SolveTrace& trace);

void write_projection_csv(std::ostream& out, const Projection& projection);

}  // namespace sfd
