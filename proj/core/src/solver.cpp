#include "sfd/solver.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <thread>

#include "sfd/model.hpp"

namespace sfd {

namespace {

// Chains are solved in fixed-size chunks so results do not depend on the thread count.
constexpr Eigen::Index kChunk = 1024;

}  // namespace

std::string_view to_string(SolverKind kind) {
  switch (kind) {
    case SolverKind::euler: return "euler";
    case SolverKind::heun: return "heun";
    case SolverKind::dpm_2s: return "dpm_2s";
    case SolverKind::dpm_pp_2m: return "dpm_pp_2m";
    case SolverKind::dpm_pp_3m: return "dpm_pp_3m";
  }
  throw ArgumentError("unknown solver kind");
}

SolverKind solver_kind_from_string(std::string_view name) {
  for (auto k : {SolverKind::euler, SolverKind::heun, SolverKind::dpm_2s, SolverKind::dpm_pp_2m, SolverKind::dpm_pp_3m})
    if (to_string(k) == name) return k;
  if (name == "ddim") return SolverKind::euler;
  throw ArgumentError("unknown solver '" + std::string(name) + "'");
}

int nfe_per_step(SolverKind kind) {
  return (kind == SolverKind::heun || kind == SolverKind::dpm_2s) ? 2 : 1;
}

bool is_multistep(SolverKind kind) { return kind == SolverKind::dpm_pp_2m || kind == SolverKind::dpm_pp_3m; }

Mat afs_eps(const Mat& x, double t) { return x / std::sqrt(1.0 + t * t); }

EpsFunction::EpsFunction(const EpsModel& model, Conditioning cond, std::optional<double> guidance_scale)
    : model_(&model), cond_(std::move(cond)), guidance_(guidance_scale) {
  if (guidance_) require(cond_.labels.has_value(), "EpsFunction: guidance needs class labels");
}

Mat EpsFunction::operator()(const Mat& x, double t) {
  if (afs_pending_) {
    afs_pending_ = false;
    return afs_eps(x, t);
  }
  if (guidance_) {
    std::int64_t used = 0;
    Mat out = guided_eps(*model_, x, t, *cond_.labels, *guidance_, cond_.step, &used);
    nfe_ += used;
    return out;
  }
  ++nfe_;
  return model_->eps(x, t, cond_);
}

void MultistepHistory::push(double lambda, Mat data_pred) {
  if (entries.size() == 2) entries.erase(entries.begin());
  entries.push_back({lambda, std::move(data_pred)});
}

Mat step_euler(EpsFunction& eps, const Mat& x, double t, double t_next) {
  require(t > 0.0, "step_euler: t must be positive");
  require(t_next >= 0.0, "step_euler: t_next must be non-negative");
  return x + (t_next - t) * eps(x, t);
}

Mat step_heun(EpsFunction& eps, const Mat& x, double t, double t_next) {
  require(t > 0.0, "step_heun: t must be positive");
  require(t_next > 0.0, "step_heun: corrector needs t_next > 0");
  const Mat d0 = eps(x, t);
  const Mat x_pred = x + (t_next - t) * d0;
  const Mat d1 = eps(x_pred, t_next);
  return x + (0.5 * (t_next - t)) * (d0 + d1);
}

Mat step_dpm_2s(EpsFunction& eps, const Mat& x, double t, double t_next) {
  require(t > 0.0, "step_dpm_2s: t must be positive");
  require(t_next > 0.0, "step_dpm_2s: needs t_next > 0");
  const double t_mid = std::sqrt(t * t_next);
  const Mat x0 = x - t * eps(x, t);
  const double r_mid = t_mid / t;
  const Mat u = r_mid * x + (1.0 - r_mid) * x0;
  const Mat x0_mid = u - t_mid * eps(u, t_mid);
  const double r = t_next / t;
  return r * x + (1.0 - r) * x0_mid;
}

Mat step_dpm_pp_multistep(EpsFunction& eps, const Mat& x, double t, double t_next, MultistepHistory& history,
                          int order) {
  require(order == 2 || order == 3, "step_dpm_pp_multistep: order must be 2 or 3");
  require(t > 0.0, "step_dpm_pp_multistep: t must be positive");
  require(t_next > 0.0, "step_dpm_pp_multistep: needs t_next > 0");
  const double lambda = -std::log(t);
  const double h = -std::log(t_next) - lambda;
  Mat x0 = x - t * eps(x, t);

  const std::size_t used = std::min<std::size_t>(static_cast<std::size_t>(order - 1), history.size());
  const double em1 = std::expm1(h);
  const double i0 = em1;
  const double i1 = h * (em1 + 1.0) - em1;                          // e^h (h - 1) + 1
  const double i2 = (em1 + 1.0) * (h * h - 2.0 * h + 2.0) - 2.0;   // e^h (h^2 - 2h + 2) - 2

  Mat acc = x + i0 * x0;
  if (used >= 1) {
    const auto& prev = history.entries[history.size() - 1];
    const double h0 = lambda - prev.lambda;
    const Mat D0 = (x0 - prev.data_pred) / h0;
    if (used == 1) {
      acc += i1 * D0;
    } else {
      const auto& prev2 = history.entries[history.size() - 2];
      const double h1 = prev.lambda - prev2.lambda;
      const Mat D1 = (prev.data_pred - prev2.data_pred) / h1;
      const Mat d2 = (2.0 / (h0 + h1)) * (D0 - D1);
      const Mat d1 = D0 + (0.5 * h0) * d2;
      acc += i1 * d1 + (0.5 * i2) * d2;
    }
  }
  history.push(lambda, std::move(x0));
  return (t_next / t) * acc;
}

Mat solver_step(SolverKind kind, EpsFunction& eps, const Mat& x, double t, double t_next, MultistepHistory& history) {
  switch (kind) {
    case SolverKind::euler: return step_euler(eps, x, t, t_next);
    case SolverKind::heun: return step_heun(eps, x, t, t_next);
    case SolverKind::dpm_2s: return step_dpm_2s(eps, x, t, t_next);
    case SolverKind::dpm_pp_2m: return step_dpm_pp_multistep(eps, x, t, t_next, history, 2);
    case SolverKind::dpm_pp_3m: return step_dpm_pp_multistep(eps, x, t, t_next, history, 3);
  }
  throw ArgumentError("solver_step: unknown solver kind");
}

void SolveTrace::append(double t, const Mat& x) {
  times.push_back(t);
  states.push_back(x);
}

void SolveTrace::write_csv(std::ostream& out) const {
  const int d = states.empty() ? 0 : static_cast<int>(states.front().rows());
  out << "chain_id,step_index,t";
  for (int i = 0; i < d; ++i) out << ",x_" << i;
  out << '\n';
  if (states.empty()) return;
  const auto old_precision = out.precision(17);
  for (Eigen::Index c = 0; c < states.front().cols(); ++c)
    for (std::size_t s = 0; s < states.size(); ++s) {
      out << c << ',' << s << ',' << times[s];
      for (int i = 0; i < d; ++i) out << ',' << states[s](i, c);
      out << '\n';
    }
  out.precision(old_precision);
}

SegmentResult solve_times(EpsFunction& eps, const Mat& x, const std::vector<double>& times, SolverKind kind,
                          MultistepHistory& history) {
  require(times.size() >= 2, "solve_times: need at least two times");
  for (std::size_t i = 1; i < times.size(); ++i)
    require(times[i] < times[i - 1], "solve_times: times must be strictly decreasing");
  const auto nfe0 = eps.nfe();
  SegmentResult r{x, {}};
  r.trace.append(times.front(), x);
  for (std::size_t i = 1; i < times.size(); ++i) {
    r.x = solver_step(kind, eps, r.x, times[i - 1], times[i], history);
    r.trace.append(times[i], r.x);
  }
  r.trace.nfe = eps.nfe() - nfe0;
  return r;
}

SegmentResult solve_segment(EpsFunction& eps, const Mat& x, double t_from, double t_to, int sub_steps,
                            SolverKind kind, MultistepHistory& history, double rho) {
  require(sub_steps >= 1, "solve_segment: K must be >= 1");
  require(t_from > t_to, "solve_segment: t_from must exceed t_to");
  return solve_times(eps, x, segment_times(t_from, t_to, sub_steps, rho), kind, history);
}

namespace {

SampleResult sample_chunk(const EpsModel& model, const std::vector<double>& times, const SampleOptions& o,
                          const Mat& x_start, Eigen::Index first) {
  Conditioning cond;
  if (o.labels)
    cond.labels = std::vector<int>(o.labels->begin() + first, o.labels->begin() + first + x_start.cols());
  cond.step = o.step;
  EpsFunction eps(model, std::move(cond), o.guidance_scale);
  if (o.afs) eps.substitute_next_with_afs();
  MultistepHistory history;
  auto seg = solve_times(eps, x_start, times, o.kind, history);
  seg.trace.nfe = eps.nfe();
  return {std::move(seg.x), std::move(seg.trace)};
}

}  // namespace

SampleResult sample_from(const EpsModel& model, const TimeSchedule& schedule, const SampleOptions& o,
                         const Mat& x_start) {
  require(!o.afs || schedule.steps() >= 2, "sample: AFS needs at least two segments");
  require(x_start.rows() == model.dim(), "sample: starting batch has the wrong dimension");
  if (o.labels) require(static_cast<Eigen::Index>(o.labels->size()) == x_start.cols(), "sample: need one label per chain");
  const auto times = schedule.descending();
  const Eigen::Index n = x_start.cols();
  const Eigen::Index chunks = std::max<Eigen::Index>(1, (n + kChunk - 1) / kChunk);
  std::vector<SampleResult> parts(static_cast<std::size_t>(chunks));
  auto run = [&](Eigen::Index c) {
    const Eigen::Index first = c * kChunk;
    const Eigen::Index count = std::min(kChunk, n - first);
    parts[static_cast<std::size_t>(c)] = sample_chunk(model, times, o, x_start.middleCols(first, count), first);
  };
  const int threads = std::max(1, std::min<int>(o.threads, static_cast<int>(chunks)));
  if (threads == 1) {
    for (Eigen::Index c = 0; c < chunks; ++c) run(c);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w)
      pool.emplace_back([&, w] {
        for (Eigen::Index c = w; c < chunks; c += threads) run(c);
      });
    for (auto& th : pool) th.join();
  }
  if (chunks == 1) return std::move(parts.front());
  SampleResult out;
  out.samples.resize(x_start.rows(), n);
  out.trace.times = parts.front().trace.times;
  out.trace.nfe = parts.front().trace.nfe;
  out.trace.states.assign(out.trace.times.size(), Mat(x_start.rows(), n));
  for (Eigen::Index c = 0; c < chunks; ++c) {
    const auto& p = parts[static_cast<std::size_t>(c)];
    out.samples.middleCols(c * kChunk, p.samples.cols()) = p.samples;
    for (std::size_t s = 0; s < out.trace.states.size(); ++s)
      out.trace.states[s].middleCols(c * kChunk, p.samples.cols()) = p.trace.states[s];
  }
  return out;
}

SampleResult sample(const EpsModel& model, const TimeSchedule& schedule, const SampleOptions& o, Rng& rng) {
  require(o.chains >= 1, "sample: need at least one chain");
  const Mat x_start = schedule.t_max() * rng.normal_matrix(model.dim(), o.chains);
  return sample_from(model, schedule, o, x_start);
}

}  // namespace sfd
