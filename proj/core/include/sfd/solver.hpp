#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string_view>
#include <vector>

#include "sfd/common.hpp"
#include "sfd/eps_model.hpp"
#include "sfd/rng.hpp"
#include "sfd/schedule.hpp"

namespace sfd {

enum class SolverKind { euler, heun, dpm_2s, dpm_pp_2m, dpm_pp_3m };

std::string_view to_string(SolverKind kind);
SolverKind solver_kind_from_string(std::string_view name);
/// Model evaluations per step.
int nfe_per_step(SolverKind kind);
bool is_multistep(SolverKind kind);

/// Analytical first step: eps ~= x / sqrt(1 + t^2), the exact noise prediction
/// for unit-variance data at large t. Costs no model evaluation.
Mat afs_eps(const Mat& x, double t);

/// A model bound to its conditioning, with an evaluation counter. Solvers only
/// see this interface.
class EpsFunction {
 public:
  explicit EpsFunction(const EpsModel& model, Conditioning cond = {}, std::optional<double> guidance_scale = {});

  Mat operator()(const Mat& x, double t);
  std::int64_t nfe() const { return nfe_; }
  /// The next evaluation returns afs_eps instead of calling the model.
  void substitute_next_with_afs() { afs_pending_ = true; }
  const Conditioning& conditioning() const { return cond_; }

 private:
  const EpsModel* model_;
  Conditioning cond_;
  std::optional<double> guidance_;
  std::int64_t nfe_ = 0;
  bool afs_pending_ = false;
};

/// Past data predictions of a multistep solver, oldest first (at most two).
struct MultistepHistory {
  struct Entry {
    double lambda;  // -ln t
    Mat data_pred;  // x - t * eps
  };
  std::vector<Entry> entries;

  void push(double lambda, Mat data_pred);
  void clear() { entries.clear(); }
  std::size_t size() const { return entries.size(); }
};

/// x + (t_next - t) eps(x, t)
Mat step_euler(EpsFunction& eps, const Mat& x, double t, double t_next);
/// Euler predictor, trapezoidal corrector at t_next; needs t_next > 0.
Mat step_heun(EpsFunction& eps, const Mat& x, double t, double t_next);
/// Exponential-integrator midpoint step at t_mid = sqrt(t t_next); needs t_next > 0.
Mat step_dpm_2s(EpsFunction& eps, const Mat& x, double t, double t_next);
/// Multistep exponential integrator in lambda = -ln t. Extrapolates the data
/// prediction with up to order-1 previous points from `history` (fewer while
/// warming up) and pushes the current one.
Mat step_dpm_pp_multistep(EpsFunction& eps, const Mat& x, double t, double t_next, MultistepHistory& history,
                          int order);

Mat solver_step(SolverKind kind, EpsFunction& eps, const Mat& x, double t, double t_next, MultistepHistory& history);

/// Visited states of a batch of chains, in sampling order (decreasing t).
struct SolveTrace {
  std::vector<double> times;
  std::vector<Mat> states;
  std::int64_t nfe = 0;

  void append(double t, const Mat& x);
  /// Columns: chain_id, step_index, t, x_0 ... x_{d-1}.
  void write_csv(std::ostream& out) const;
};

struct SegmentResult {
  Mat x;
  SolveTrace trace;
};

/// Steps through descending `times` with one solver step per interval.
/// Multistep history is read from and written back to `history`.
SegmentResult solve_times(EpsFunction& eps, const Mat& x, const std::vector<double>& times, SolverKind kind,
                          MultistepHistory& history);

/// K steps from t_from to t_to over polynomial sub-times (see segment_times).
SegmentResult solve_segment(EpsFunction& eps, const Mat& x, double t_from, double t_to, int sub_steps,
                            SolverKind kind, MultistepHistory& history, double rho = 7.0);

struct SampleOptions {
  SolverKind kind = SolverKind::euler;
  bool afs = false;
  Eigen::Index chains = 1;
  std::optional<std::vector<int>> labels;
  std::optional<double> guidance_scale;
  std::optional<int> step;
  int threads = 1;
};

struct SampleResult {
  Mat samples;
  SolveTrace trace;
};

/// Draws x_N ~ N(0, t_max^2 I) and solves the schedule from t_max to t_min,
/// one solver step per segment.
SampleResult sample(const EpsModel& model, const TimeSchedule& schedule, const SampleOptions& options, Rng& rng);

/// Same as sample() from a given starting batch at t_max.
SampleResult sample_from(const EpsModel& model, const TimeSchedule& schedule, const SampleOptions& options,
                         const Mat& x_start);

}  // namespace sfd
