#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string_view>
#include <vector>

#include "sfd/common.hpp"
#include "sfd/model.hpp"
#include "sfd/process.hpp"
#include "sfd/rng.hpp"
#include "sfd/schedule.hpp"
#include "sfd/solver.hpp"

namespace sfd {

struct AdamState {
  explicit AdamState(Eigen::Index size);

  Vec m;
  Vec v;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam update. Non-finite gradients raise NumericalError and
/// leave both state and parameters untouched.
void adam_step(AdamState& state, Vec& params, const Vec& grads, double lr);

/// base_lr for the first half of training, base_lr / 10 afterwards.
double lr_schedule(double base_lr, std::int64_t iteration, std::int64_t total);

enum class LossKind { l2sq, l1, pseudo_huber };

std::string_view to_string(LossKind kind);
LossKind loss_kind_from_string(std::string_view name);

struct LossMetric {
  LossKind kind = LossKind::l1;
  /// Pseudo-Huber constant; defaults to 0.03 sqrt(d).
  std::optional<double> huber_c;

  double huber_constant(Eigen::Index dim) const;
};

struct LossValue {
  double value = 0.0;
  Mat adjoint;  // d value / d a
};

/// Batch-mean distance between matching columns of a and b. Adjoints are exact
/// (sub)gradients with respect to a; |.| uses sign 0 at ties.
LossValue loss_distance(const LossMetric& metric, const Mat& a, const Mat& b);

struct TrainLogEntry {
  std::int64_t iteration = 0;
  double loss = 0.0;
  double lr = 0.0;
  double wall_time = 0.0;  // seconds since the routine started
  const EpsNet* model = nullptr;  // parameters after this iteration's update
};
using TrainLogger = std::function<void(const TrainLogEntry&)>;

/// Training produced a non-finite loss; `last_good` holds the parameters
/// before the failing update.
class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(const std::string& what, EpsNet last_good, std::int64_t iteration)
      : NumericalError(what), last_good(std::move(last_good)), iteration(iteration) {}
  EpsNet last_good;
  std::int64_t iteration;
};

struct PretrainConfig {
  std::int64_t iterations = 5000;
  int batch = 128;
  double lr = 1e-3;
  bool lr_decay = true;
  double t_min = 0.006;  // noise levels drawn log-uniform on [t_min, t_max]
  double t_max = 80.0;
  double label_dropout = 0.1;

  void validate() const;
};

/// Noise-prediction regression with constant weighting.
EpsNet pretrain(const GaussianMixture& data, EpsNet init, const PretrainConfig& cfg, Rng& rng,
                const TrainLogger& log = {});
/// Class-conditional variant; labels are replaced by the null class with
/// probability cfg.label_dropout.
EpsNet pretrain(const ConditionalMixture& data, EpsNet init, const PretrainConfig& cfg, Rng& rng,
                const TrainLogger& log = {});

struct DistillConfig {
  int steps = 3;      // student steps N
  int sub_steps = 4;  // teacher steps K per student step
  SolverKind teacher_kind = SolverKind::dpm_pp_3m;
  bool afs = true;
  LossMetric loss{LossKind::l1, std::nullopt};
  double lr = 5e-5;
  bool lr_decay = true;
  std::int64_t budget = 200000;  // teacher trajectories
  int batch = 128;
  std::vector<int> step_list{2, 3, 4, 5};
  double rho = 7.0;
  double t_min = 0.006;
  double t_max = 80.0;
  /// Non-empty for class-conditional distillation: labels are drawn from this
  /// prior and both networks run at guidance scale 1.
  std::vector<double> class_prior;

  std::int64_t iterations() const { return budget / batch; }
  TimeSchedule schedule(int steps_override = 0) const;
  void validate() const;
};

struct DistillResult {
  EpsNet student;
  std::int64_t iterations = 0;
  std::int64_t updates = 0;
  /// Model evaluations per trajectory in the last iteration.
  std::int64_t teacher_nfe = 0;
  std::int64_t student_nfe = 0;
  std::vector<double> losses;  // mean loss per iteration
};

/// Local trajectory distillation: x_{n+1} drawn from the noised data marginal,
/// one student Euler step against K teacher steps, n uniform per chain.
DistillResult distill_vanilla(const EpsModel& teacher, EpsNet student, const DistillConfig& cfg,
                              const GaussianMixture& data, Rng& rng, const TrainLogger& log = {});

/// Global distillation: the student follows its own trajectory from the prior
/// while the teacher generates the whole reference trajectory; one update per
/// student step, the carried point detached and computed before the update.
DistillResult distill_sfd(const EpsModel& teacher, EpsNet student, const DistillConfig& cfg, Rng& rng,
                          const TrainLogger& log = {});
DistillResult distill_sfd(const EpsNet& teacher, const DistillConfig& cfg, Rng& rng, const TrainLogger& log = {});

/// Variable-step distillation: N ~ U(step_list) each iteration, the schedule is
/// rebuilt and N is fed to every student call. The student needs a step head.
DistillResult distill_sfd_v(const EpsModel& teacher, EpsNet student, const DistillConfig& cfg, Rng& rng,
                            const TrainLogger& log = {});
DistillResult distill_sfd_v(const EpsNet& teacher, const DistillConfig& cfg, Rng& rng, const TrainLogger& log = {});

/// One-step refinement of a first-stage model. Teacher and student start from
/// the same point at t_1 (the AFS point when cfg.afs, else a prior draw on a
/// two-point schedule); the teacher is the frozen first-stage model run with
/// cfg.sub_steps Euler steps; the learning rate is 10x cfg.lr.
DistillResult distill_second_stage(const EpsNet& first_stage, const DistillConfig& cfg, Rng& rng,
                                   const TrainLogger& log = {});

/// Fine-tunes only the segment t_{n+1} -> t_n of cfg.schedule(): the teacher
/// solves from the prior to t_{n+1} and the student's Euler step starts from
/// the teacher's point there.
DistillResult distill_single_segment(const EpsModel& teacher, EpsNet student, const DistillConfig& cfg, int segment,
                                     Rng& rng, const TrainLogger& log = {});

}  // namespace sfd
