#include "sfd/trainer.hpp"

#include <chrono>
#include <cmath>
#include <map>

namespace sfd {

AdamState::AdamState(Eigen::Index size) : m(Vec::Zero(size)), v(Vec::Zero(size)) {}

void adam_step(AdamState& s, Vec& params, const Vec& grads, double lr) {
  require(params.size() == s.m.size() && grads.size() == params.size(), "adam_step: shape mismatch");
  if (!grads.allFinite()) throw NumericalError("adam_step: non-finite gradient");
  ++s.step;
  s.m = s.beta1 * s.m + (1.0 - s.beta1) * grads;
  s.v = s.beta2 * s.v + (1.0 - s.beta2) * grads.cwiseAbs2();
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  params.array() -= lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + s.eps);
}

double lr_schedule(double base_lr, std::int64_t iteration, std::int64_t total) {
  require(total >= 1 && iteration >= 0 && iteration < total, "lr_schedule: require 0 <= iteration < total");
  return 2 * iteration < total ? base_lr : base_lr / 10.0;
}

std::string_view to_string(LossKind kind) {
  switch (kind) {
    case LossKind::l2sq: return "l2sq";
    case LossKind::l1: return "l1";
    case LossKind::pseudo_huber: return "pseudo_huber";
  }
  throw ArgumentError("unknown loss kind");
}

LossKind loss_kind_from_string(std::string_view name) {
  if (name == "l2sq" || name == "l2") return LossKind::l2sq;
  if (name == "l1") return LossKind::l1;
  if (name == "pseudo_huber" || name == "ph") return LossKind::pseudo_huber;
  throw ArgumentError("unknown loss metric '" + std::string(name) + "'");
}

double LossMetric::huber_constant(Eigen::Index dim) const {
  return huber_c ? *huber_c : 0.03 * std::sqrt(static_cast<double>(dim));
}

LossValue loss_distance(const LossMetric& metric, const Mat& a, const Mat& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "loss_distance: shape mismatch");
  require(a.cols() >= 1, "loss_distance: empty batch");
  const double inv_b = 1.0 / static_cast<double>(a.cols());
  const Mat diff = a - b;
  LossValue out;
  switch (metric.kind) {
    case LossKind::l2sq:
      out.value = diff.squaredNorm() * inv_b;
      out.adjoint = (2.0 * inv_b) * diff;
      break;
    case LossKind::l1:
      out.value = diff.cwiseAbs().sum() * inv_b;
      out.adjoint = inv_b * diff.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
      break;
    case LossKind::pseudo_huber: {
      const double c = metric.huber_constant(a.rows());
      require(c > 0.0, "loss_distance: pseudo-Huber constant must be positive");
      const Eigen::RowVectorXd root = (diff.colwise().squaredNorm().array() + c * c).sqrt().matrix();
      out.value = (root.array() - c).sum() * inv_b;
      out.adjoint = inv_b * (diff.array().rowwise() / root.array()).matrix();
      break;
    }
  }
  return out;
}

void PretrainConfig::validate() const {
  require(iterations >= 0, "PretrainConfig: iterations must be non-negative");
  require(batch >= 1, "PretrainConfig: batch must be >= 1");
  require(lr > 0.0, "PretrainConfig: lr must be positive");
  require(t_min > 0.0 && t_min < t_max, "PretrainConfig: require 0 < t_min < t_max");
  require(label_dropout >= 0.0 && label_dropout <= 1.0, "PretrainConfig: label_dropout must lie in [0, 1]");
}

TimeSchedule DistillConfig::schedule(int steps_override) const {
  return make_polynomial(steps_override > 0 ? steps_override : steps, t_min, t_max, rho);
}

void DistillConfig::validate() const {
  require(steps >= 1, "DistillConfig: N must be >= 1");
  require(sub_steps >= 1, "DistillConfig: K must be >= 1");
  require(lr >= 0.0, "DistillConfig: lr must be non-negative");
  require(batch >= 1, "DistillConfig: batch must be >= 1");
  require(budget >= 0, "DistillConfig: budget must be non-negative");
  require(t_min > 0.0 && t_min < t_max, "DistillConfig: require 0 < t_min < t_max");
  require(rho > 0.0, "DistillConfig: rho must be positive");
  double total = 0.0;
  for (double p : class_prior) total += p;
  require(class_prior.empty() || std::abs(total - 1.0) < 1e-9, "DistillConfig: class prior must sum to 1");
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

double current_lr(double base, bool decay, std::int64_t it, std::int64_t total) {
  return decay ? lr_schedule(base, it, total) : base;
}

std::optional<std::vector<int>> draw_labels(const std::vector<double>& prior, int count, Rng& rng) {
  if (prior.empty()) return std::nullopt;
  std::vector<int> labels(static_cast<std::size_t>(count));
  for (auto& label : labels) {
    double u = rng.uniform();
    label = static_cast<int>(prior.size()) - 1;
    for (std::size_t k = 0; k + 1 < prior.size(); ++k) {
      if (u < prior[k]) {
        label = static_cast<int>(k);
        break;
      }
      u -= prior[k];
    }
  }
  return labels;
}

struct PretrainBatch {
  Mat x0;
  std::optional<std::vector<int>> labels;
};

template <typename Draw>
EpsNet pretrain_loop(EpsNet net, const PretrainConfig& cfg, Rng& rng, const TrainLogger& log, Draw draw) {
  cfg.validate();
  AdamState adam(net.param_count());
  const auto start = Clock::now();
  const double log_lo = std::log(cfg.t_min), log_hi = std::log(cfg.t_max);
  Vec grad(net.param_count());
  for (std::int64_t it = 0; it < cfg.iterations; ++it) {
    PretrainBatch batch = draw(rng);
    Vec t(cfg.batch);
    for (int j = 0; j < cfg.batch; ++j) t(j) = std::exp(log_lo + (log_hi - log_lo) * rng.uniform());
    const Mat noise = rng.normal_matrix(net.dim(), cfg.batch);
    const Mat x = batch.x0 + noise * t.asDiagonal();
    ForwardCache cache;
    const Mat pred = net.forward(x, t, {batch.labels, std::nullopt}, &cache);
    const LossValue lv = loss_distance({LossKind::l2sq, std::nullopt}, pred, noise);
    if (!std::isfinite(lv.value))
      throw TrainingDiverged("pretrain: non-finite loss at iteration " + std::to_string(it), net, it);
    grad.setZero();
    net.backward(cache, lv.adjoint, grad);
    const double lr = current_lr(cfg.lr, cfg.lr_decay, it, cfg.iterations);
    adam_step(adam, net.params(), grad, lr);
    if (log) log({it, lv.value, lr, seconds_since(start), &net});
  }
  return net;
}

}  // namespace

EpsNet pretrain(const GaussianMixture& data, EpsNet init, const PretrainConfig& cfg, Rng& rng, const TrainLogger& log) {
  require(init.dim() == data.dim(), "pretrain: network and data dimensions differ");
  require(!init.has_step_condition(), "pretrain: teacher networks take no step condition");
  return pretrain_loop(std::move(init), cfg, rng, log,
                       [&](Rng& r) { return PretrainBatch{data.sample(r, cfg.batch), std::nullopt}; });
}

EpsNet pretrain(const ConditionalMixture& data, EpsNet init, const PretrainConfig& cfg, Rng& rng,
                const TrainLogger& log) {
  require(init.dim() == data.dim(), "pretrain: network and data dimensions differ");
  require(init.arch().num_classes == data.num_classes(), "pretrain: class count mismatch");
  require(!init.has_step_condition(), "pretrain: teacher networks take no step condition");
  return pretrain_loop(std::move(init), cfg, rng, log, [&](Rng& r) {
    PretrainBatch b{Mat(data.dim(), cfg.batch), std::vector<int>(static_cast<std::size_t>(cfg.batch))};
    for (int j = 0; j < cfg.batch; ++j) {
      const int cls = data.sample_class(r);
      b.x0.col(j) = data.class_mixture(cls).sample(r, 1).col(0);
      (*b.labels)[static_cast<std::size_t>(j)] = r.uniform() < cfg.label_dropout ? kNullLabel : cls;
    }
    return b;
  });
}

namespace {

struct StudentStep {
  double loss;
  Mat x_next;  // student point computed before the update
};

// One Euler step of the student from x at t_hi to t_lo against `target`,
// followed by one Adam update.
StudentStep student_update(EpsNet& student, AdamState& adam, const LossMetric& metric, const Mat& x, double t_hi,
                           double t_lo, const Mat& target, const Conditioning& cond, double lr, std::int64_t it) {
  ForwardCache cache;
  const Mat e = student.forward(x, Vec::Constant(1, t_hi), cond, &cache);
  const double dt = t_lo - t_hi;
  Mat xs = x + dt * e;
  const LossValue lv = loss_distance(metric, xs, target);
  if (!std::isfinite(lv.value))
    throw TrainingDiverged("distill: non-finite loss at iteration " + std::to_string(it), student, it);
  Vec grad = Vec::Zero(student.param_count());
  student.backward(cache, dt * lv.adjoint, grad);
  adam_step(adam, student.params(), grad, lr);
  return {lv.value, std::move(xs)};
}

struct IterationOutcome {
  double loss = 0.0;
  std::int64_t updates = 0;
  std::int64_t teacher_nfe = 0;
  std::int64_t student_nfe = 0;
};

IterationOutcome sfd_iteration(const EpsModel& teacher, EpsNet& student, AdamState& adam, const DistillConfig& cfg,
                               const TimeSchedule& schedule, std::optional<int> step, double lr, std::int64_t it,
                               Rng& rng) {
  const int N = schedule.steps();
  require(!cfg.afs || N >= 2, "distill: AFS needs N >= 2");
  const auto labels = draw_labels(cfg.class_prior, cfg.batch, rng);
  Mat x = schedule.t_max() * rng.normal_matrix(student.dim(), cfg.batch);
  Mat x_teacher = x;
  EpsFunction teacher_eps(teacher, {labels, std::nullopt});
  const Conditioning student_cond{labels, step};
  MultistepHistory history;
  IterationOutcome out;
  double loss_sum = 0.0;
  for (int n = N - 1; n >= 0; --n) {
    const double t_hi = schedule[n + 1], t_lo = schedule[n];
    x_teacher = solve_segment(teacher_eps, x_teacher, t_hi, t_lo, cfg.sub_steps, cfg.teacher_kind, history, cfg.rho).x;
    if (cfg.afs && n == N - 1) {
      x = x + (t_lo - t_hi) * afs_eps(x, t_hi);
      continue;
    }
    auto s = student_update(student, adam, cfg.loss, x, t_hi, t_lo, x_teacher, student_cond, lr, it);
    ++out.student_nfe;
    ++out.updates;
    loss_sum += s.loss;
    x = std::move(s.x_next);
  }
  out.loss = out.updates > 0 ? loss_sum / static_cast<double>(out.updates) : 0.0;
  out.teacher_nfe = teacher_eps.nfe();
  return out;
}

template <typename Iterate>
DistillResult distill_loop(EpsNet student, const DistillConfig& cfg, double base_lr, const TrainLogger& log,
                           Iterate iterate) {
  cfg.validate();
  DistillResult r{std::move(student), 0, 0, 0, 0, {}};
  AdamState adam(r.student.param_count());
  const auto total = cfg.iterations();
  const auto start = Clock::now();
  for (std::int64_t it = 0; it < total; ++it) {
    const double lr = current_lr(base_lr, cfg.lr_decay, it, total);
    const IterationOutcome o = iterate(r.student, adam, lr, it);
    r.updates += o.updates;
    r.teacher_nfe = o.teacher_nfe;
    r.student_nfe = o.student_nfe;
    r.losses.push_back(o.loss);
    if (log) log({it, o.loss, lr, seconds_since(start), &r.student});
  }
  r.iterations = total;
  return r;
}

}  // namespace

DistillResult distill_vanilla(const EpsModel& teacher, EpsNet student, const DistillConfig& cfg,
                              const GaussianMixture& data, Rng& rng, const TrainLogger& log) {
  require(teacher.dim() == student.dim() && data.dim() == student.dim(), "distill_vanilla: dimension mismatch");
  require(!student.has_step_condition(), "distill_vanilla: student must not be step-conditioned");
  const TimeSchedule schedule = cfg.schedule();
  const int N = schedule.steps();
  return distill_loop(std::move(student), cfg, cfg.lr, log, [&](EpsNet& s, AdamState& adam, double lr, std::int64_t it) {
    const Mat x0 = data.sample(rng, cfg.batch);
    std::vector<int> seg(static_cast<std::size_t>(cfg.batch));
    for (auto& n : seg) n = rng.uniform_int(0, N - 1);
    const Mat noise = rng.normal_matrix(s.dim(), cfg.batch);
    Mat x(s.dim(), cfg.batch), target(s.dim(), cfg.batch);
    Vec t_hi(cfg.batch), dt(cfg.batch);
    std::map<int, std::vector<Eigen::Index>> groups;
    for (Eigen::Index j = 0; j < cfg.batch; ++j) {
      const int n = seg[static_cast<std::size_t>(j)];
      t_hi(j) = schedule[n + 1];
      dt(j) = schedule[n] - schedule[n + 1];
      x.col(j) = x0.col(j) + t_hi(j) * noise.col(j);
      groups[n].push_back(j);
    }
    IterationOutcome o;
    for (const auto& [n, cols] : groups) {
      Mat xin(s.dim(), static_cast<Eigen::Index>(cols.size()));
      for (std::size_t i = 0; i < cols.size(); ++i) xin.col(static_cast<Eigen::Index>(i)) = x.col(cols[i]);
      EpsFunction teacher_eps(teacher);
      MultistepHistory history;
      const Mat y = solve_segment(teacher_eps, xin, schedule[n + 1], schedule[n], cfg.sub_steps, cfg.teacher_kind,
                                  history, cfg.rho).x;
      for (std::size_t i = 0; i < cols.size(); ++i) target.col(cols[i]) = y.col(static_cast<Eigen::Index>(i));
      o.teacher_nfe = teacher_eps.nfe();
    }
    ForwardCache cache;
    const Mat e = s.forward(x, t_hi, {}, &cache);
    const Mat xs = x + e * dt.asDiagonal();
    const LossValue lv = loss_distance(cfg.loss, xs, target);
    if (!std::isfinite(lv.value))
      throw TrainingDiverged("distill_vanilla: non-finite loss at iteration " + std::to_string(it), s, it);
    Vec grad = Vec::Zero(s.param_count());
    s.backward(cache, lv.adjoint * dt.asDiagonal(), grad);
    adam_step(adam, s.params(), grad, lr);
    o.loss = lv.value;
    o.updates = 1;
    o.student_nfe = 1;
    return o;
  });
}

DistillResult distill_sfd(const EpsModel& teacher, EpsNet student, const DistillConfig& cfg, Rng& rng,
                          const TrainLogger& log) {
  require(teacher.dim() == student.dim(), "distill_sfd: dimension mismatch");
  require(!cfg.afs || cfg.steps >= 2, "distill_sfd: AFS needs N >= 2");
  const TimeSchedule schedule = cfg.schedule();
  const std::optional<int> step = student.has_step_condition() ? std::optional<int>(cfg.steps) : std::nullopt;
  return distill_loop(std::move(student), cfg, cfg.lr, log, [&](EpsNet& s, AdamState& adam, double lr, std::int64_t it) {
    return sfd_iteration(teacher, s, adam, cfg, schedule, step, lr, it, rng);
  });
}

DistillResult distill_sfd(const EpsNet& teacher, const DistillConfig& cfg, Rng& rng, const TrainLogger& log) {
  return distill_sfd(teacher, EpsNet(teacher), cfg, rng, log);
}

DistillResult distill_sfd_v(const EpsModel& teacher, EpsNet student, const DistillConfig& cfg, Rng& rng,
                            const TrainLogger& log) {
  require(!cfg.step_list.empty(), "distill_sfd_v: step list must not be empty");
  require(student.has_step_condition(), "distill_sfd_v: student needs a step head");
  require(teacher.dim() == student.dim(), "distill_sfd_v: dimension mismatch");
  for (int n : cfg.step_list) {
    require(n >= 1, "distill_sfd_v: step counts must be >= 1");
    require(!cfg.afs || n >= 2, "distill_sfd_v: AFS needs every N >= 2");
  }
  // Step counts come from their own stream so the trajectory draws match
  // distill_sfd when L holds a single value.
  Rng picker = rng.split(0x5f1);
  return distill_loop(std::move(student), cfg, cfg.lr, log, [&](EpsNet& s, AdamState& adam, double lr, std::int64_t it) {
    const int pick = picker.uniform_int(0, static_cast<int>(cfg.step_list.size()) - 1);
    const int N = cfg.step_list[static_cast<std::size_t>(pick)];
    return sfd_iteration(teacher, s, adam, cfg, cfg.schedule(N), N, lr, it, rng);
  });
}

DistillResult distill_sfd_v(const EpsNet& teacher, const DistillConfig& cfg, Rng& rng, const TrainLogger& log) {
  Rng init = rng.split(0x5fd);
  return distill_sfd_v(teacher, init_student_from_teacher(teacher, true, init), cfg, rng, log);
}

DistillResult distill_second_stage(const EpsNet& first_stage, const DistillConfig& cfg, Rng& rng,
                                   const TrainLogger& log) {
  const EpsNet teacher = first_stage;
  const int N = cfg.afs ? 2 : 1;
  const TimeSchedule schedule = cfg.schedule(N);
  const std::optional<int> step = first_stage.has_step_condition() ? std::optional<int>(N) : std::nullopt;
  return distill_loop(EpsNet(first_stage), cfg, 10.0 * cfg.lr, log,
                      [&](EpsNet& s, AdamState& adam, double lr, std::int64_t it) {
                        const auto labels = draw_labels(cfg.class_prior, cfg.batch, rng);
                        Mat x = schedule.t_max() * rng.normal_matrix(s.dim(), cfg.batch);
                        if (cfg.afs) x = x + (schedule[1] - schedule[2]) * afs_eps(x, schedule[2]);
                        EpsFunction teacher_eps(teacher, {labels, step});
                        MultistepHistory history;
                        const Mat target = solve_segment(teacher_eps, x, schedule[1], schedule[0], cfg.sub_steps,
                                                         SolverKind::euler, history, cfg.rho).x;
                        const auto st = student_update(s, adam, cfg.loss, x, schedule[1], schedule[0], target,
                                                       {labels, step}, lr, it);
                        return IterationOutcome{st.loss, 1, teacher_eps.nfe(), 1};
                      });
}

DistillResult distill_single_segment(const EpsModel& teacher, EpsNet student, const DistillConfig& cfg, int segment,
                                     Rng& rng, const TrainLogger& log) {
  const TimeSchedule schedule = cfg.schedule();
  require(segment >= 0 && segment < schedule.steps(), "distill_single_segment: segment out of range");
  const std::optional<int> step = student.has_step_condition() ? std::optional<int>(cfg.steps) : std::nullopt;
  return distill_loop(std::move(student), cfg, cfg.lr, log, [&](EpsNet& s, AdamState& adam, double lr, std::int64_t it) {
    Mat x = schedule.t_max() * rng.normal_matrix(s.dim(), cfg.batch);
    EpsFunction teacher_eps(teacher);
    MultistepHistory history;
    for (int n = schedule.steps() - 1; n > segment; --n)
      x = solve_segment(teacher_eps, x, schedule[n + 1], schedule[n], cfg.sub_steps, cfg.teacher_kind, history,
                        cfg.rho).x;
    const double t_hi = schedule[segment + 1], t_lo = schedule[segment];
    const Mat target = solve_segment(teacher_eps, x, t_hi, t_lo, cfg.sub_steps, cfg.teacher_kind, history, cfg.rho).x;
    const auto st = student_update(s, adam, cfg.loss, x, t_hi, t_lo, target, {std::nullopt, step}, lr, it);
    return IterationOutcome{st.loss, 1, teacher_eps.nfe(), 1};
  });
}

}  // namespace sfd
