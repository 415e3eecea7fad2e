#include "sfd/model.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

namespace sfd {

namespace {

constexpr double kMinFrequency = 0.1;
constexpr double kMaxFrequency = 10.0;

Mat silu(const Mat& a) { return (a.array() / (1.0 + (-a.array()).exp())).matrix(); }

// d silu / da = s (1 + a (1 - s)), s = sigmoid(a)
Mat silu_grad(const Mat& a) {
  const Eigen::ArrayXXd s = 1.0 / (1.0 + (-a.array()).exp());
  return (s * (1.0 + a.array() * (1.0 - s))).matrix();
}

void add_broadcast(Mat& target, const Mat& source) {
  if (source.cols() == 1)
    target.colwise() += source.col(0);
  else
    target += source;
}

}  // namespace

void NetArch::validate() const {
  require(dim >= 1 && dim <= 3, "NetArch: dim must be 1..3");
  require(!hidden.empty(), "NetArch: at least one hidden layer");
  for (int h : hidden) require(h >= 1, "NetArch: hidden widths must be positive");
  require(time_features >= 4 && time_features % 2 == 0, "NetArch: time_features must be even and >= 4");
  require(emb_width >= 1, "NetArch: emb_width must be positive");
  require(num_classes >= 0, "NetArch: num_classes must be non-negative");
}

nlohmann::json NetArch::to_json() const {
  return {{"dim", dim},
          {"hidden", hidden},
          {"time_features", time_features},
          {"emb_width", emb_width},
          {"num_classes", num_classes},
          {"step_condition", step_condition}};
}

NetArch NetArch::from_json(const nlohmann::json& doc) {
  static const char* const kKeys[] = {"dim", "hidden", "time_features", "emb_width", "num_classes", "step_condition"};
  if (!doc.is_object()) throw FormatError("arch: expected an object");
  for (const auto& [key, _] : doc.items()) {
    bool known = false;
    for (const char* k : kKeys) known = known || key == k;
    if (!known) throw FormatError("arch: unknown field '" + key + "'");
  }
  NetArch a;
  for (const char* k : kKeys)
    if (!doc.contains(k)) throw FormatError(std::string("arch: missing field '") + k + "'");
  try {
    a.dim = doc.at("dim").get<int>();
    a.hidden = doc.at("hidden").get<std::vector<int>>();
    a.time_features = doc.at("time_features").get<int>();
    a.emb_width = doc.at("emb_width").get<int>();
    a.num_classes = doc.at("num_classes").get<int>();
    a.step_condition = doc.at("step_condition").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("arch: ") + e.what());
  }
  try {
    a.validate();
  } catch (const ArgumentError& e) {
    throw FormatError(e.what());
  }
  return a;
}

Vec sinusoidal_features(double value, int width) {
  const int half = width / 2;
  Vec out(width);
  for (int i = 0; i < half; ++i) {
    const double frac = half > 1 ? static_cast<double>(i) / (half - 1) : 0.0;
    const double f = kMinFrequency * std::pow(kMaxFrequency / kMinFrequency, frac);
    out(i) = std::cos(f * value);
    out(half + i) = std::sin(f * value);
  }
  return out;
}

namespace {

std::vector<ParamBlock> layout_for(const NetArch& a) {
  std::vector<ParamBlock> out;
  Eigen::Index offset = 0;
  auto add = [&](std::string name, Eigen::Index rows, Eigen::Index cols) {
    out.push_back({std::move(name), offset, rows, cols});
    offset += rows * cols;
  };
  const int F = a.time_features, E = a.emb_width;
  add("time.l0.w", E, F);
  add("time.l0.b", E, 1);
  add("time.l1.w", E, E);
  add("time.l1.b", E, 1);
  if (a.num_classes > 0) add("class.table", F, a.num_classes + 1);
  int in = a.dim;
  for (std::size_t l = 0; l < a.hidden.size(); ++l) {
    const std::string p = "hidden" + std::to_string(l);
    add(p + ".w", a.hidden[l], in);
    add(p + ".b", a.hidden[l], 1);
    add(p + ".emb.w", a.hidden[l], E);
    add(p + ".emb.b", a.hidden[l], 1);
    in = a.hidden[l];
  }
  add("out.w", a.dim, in);
  add("out.b", a.dim, 1);
  // Step head last: a teacher's layout is a prefix of its student's.
  if (a.step_condition) {
    add("step.l0.w", E, F);
    add("step.l0.b", E, 1);
    add("step.l1.w", E, E);
    add("step.l1.b", E, 1);
    for (std::size_t l = 0; l < a.hidden.size(); ++l) {
      const std::string p = "hidden" + std::to_string(l);
      add(p + ".step.w", a.hidden[l], E);
      add(p + ".step.b", a.hidden[l], 1);
    }
  }
  return out;
}

Eigen::Index layout_size(const std::vector<ParamBlock>& l) { return l.back().offset + l.back().size(); }

bool is_bias(const std::string& name) { return name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0; }

}  // namespace

std::vector<ParamBlock> EpsNet::build_layout(const NetArch& arch) { return layout_for(arch); }

Eigen::Index step_head_size(const NetArch& arch) {
  NetArch with = arch, without = arch;
  with.step_condition = true;
  without.step_condition = false;
  return layout_size(layout_for(with)) - layout_size(layout_for(without));
}

EpsNet::EpsNet(NetArch arch, Rng& rng) : arch_(std::move(arch)) {
  arch_.validate();
  layout_ = build_layout(arch_);
  params_ = Vec::Zero(layout_size(layout_));
  for (const auto& b : layout_) init_block(b, rng);
}

EpsNet::EpsNet(NetArch arch, Vec params) : arch_(std::move(arch)), params_(std::move(params)) {
  arch_.validate();
  layout_ = build_layout(arch_);
  require(params_.size() == layout_size(layout_), "EpsNet: parameter vector length does not match architecture");
}

void EpsNet::init_block(const ParamBlock& b, Rng& rng) {
  auto v = params_.segment(b.offset, b.size());
  if (is_bias(b.name)) {
    v.setZero();
  } else if (b.name == "class.table") {
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.normal();
  } else {
    // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    const double bound = 1.0 / std::sqrt(static_cast<double>(b.cols));
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = bound * (2.0 * rng.uniform() - 1.0);
  }
}

const ParamBlock& EpsNet::block(std::string_view name) const {
  for (const auto& b : layout_)
    if (b.name == name) return b;
  throw ArgumentError("EpsNet: no parameter block named '" + std::string(name) + "'");
}

bool EpsNet::has_block(std::string_view name) const {
  for (const auto& b : layout_)
    if (b.name == name) return true;
  return false;
}

Eigen::Map<Mat> EpsNet::block_map(std::string_view name) {
  const auto& b = block(name);
  return {params_.data() + b.offset, b.rows, b.cols};
}

Eigen::Map<const Mat> EpsNet::block_map(std::string_view name) const {
  const auto& b = block(name);
  return {params_.data() + b.offset, b.rows, b.cols};
}

Mat EpsNet::forward(const Mat& x, const Vec& t, const Conditioning& cond, ForwardCache* cache) const {
  const Eigen::Index B = x.cols();
  require(x.rows() == arch_.dim, "EpsNet: input dimension mismatch");
  require(t.size() == 1 || t.size() == B, "EpsNet: need one noise level or one per chain");
  require((t.array() > 0.0).all(), "EpsNet: noise level must be positive");
  if (cond.labels) {
    require(arch_.num_classes > 0, "EpsNet: class label given to an unconditional network");
    require(static_cast<Eigen::Index>(cond.labels->size()) == B, "EpsNet: need one label per chain");
  }
  require(cond.step.has_value() == arch_.step_condition,
          arch_.step_condition ? "EpsNet: step-conditioned network needs a step count"
                               : "EpsNet: step count given to a network without a step head");

  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  const int F = arch_.time_features;
  const Eigen::Index C = (cond.labels || t.size() > 1) ? B : 1;

  c.feats.resize(F, C);
  c.labels.assign(static_cast<std::size_t>(C), arch_.num_classes);
  for (Eigen::Index j = 0; j < C; ++j) c.feats.col(j) = sinusoidal_features(std::log(t(t.size() > 1 ? j : 0)), F);
  if (arch_.num_classes > 0) {
    const auto table = block_map("class.table");
    for (Eigen::Index j = 0; j < C; ++j) {
      int label = cond.labels ? (*cond.labels)[static_cast<std::size_t>(j)] : kNullLabel;
      require(label == kNullLabel || (label >= 0 && label < arch_.num_classes), "EpsNet: class label out of range");
      if (label == kNullLabel) label = arch_.num_classes;
      c.labels[static_cast<std::size_t>(j)] = label;
      c.feats.col(j) += table.col(label);
    }
  }

  c.t0_pre = block_map("time.l0.w") * c.feats;
  c.t0_pre.colwise() += block_map("time.l0.b").col(0);
  c.t0_act = silu(c.t0_pre);
  c.t1_pre = block_map("time.l1.w") * c.t0_act;
  c.t1_pre.colwise() += block_map("time.l1.b").col(0);
  c.emb = silu(c.t1_pre);

  c.has_step = arch_.step_condition;
  if (c.has_step) {
    c.step_feats = sinusoidal_features(static_cast<double>(*cond.step), F);
    c.s0_pre = block_map("step.l0.w") * c.step_feats + block_map("step.l0.b");
    c.s0_act = silu(c.s0_pre);
    c.s1_pre = block_map("step.l1.w") * c.s0_act + block_map("step.l1.b");
    c.step_emb = silu(c.s1_pre);
  }

  const std::size_t L = arch_.hidden.size();
  c.inputs.resize(L);
  c.pre.resize(L);
  Mat h(x.rows(), B);
  for (Eigen::Index j = 0; j < B; ++j) {
    const double tj = t(t.size() > 1 ? j : 0);
    h.col(j) = x.col(j) / std::sqrt(1.0 + tj * tj);
  }
  for (std::size_t l = 0; l < L; ++l) {
    const std::string p = "hidden" + std::to_string(l);
    c.inputs[l] = std::move(h);
    Mat pre(arch_.hidden[l], B);
    pre.noalias() = block_map(p + ".w") * c.inputs[l];
    pre.colwise() += block_map(p + ".b").col(0);
    Mat inj = block_map(p + ".emb.w") * c.emb;
    inj.colwise() += block_map(p + ".emb.b").col(0);
    add_broadcast(pre, inj);
    if (c.has_step) {
      const Vec inj_s = block_map(p + ".step.w") * c.step_emb + block_map(p + ".step.b");
      pre.colwise() += inj_s;
    }
    h = silu(pre);
    c.pre[l] = std::move(pre);
  }
  Mat out(arch_.dim, B);
  out.noalias() = block_map("out.w") * h;
  out.colwise() += block_map("out.b").col(0);
  c.last = std::move(h);
  return out;
}

void EpsNet::backward(const ForwardCache& c, const Mat& adjoint, Vec& grad) const {
  require(grad.size() == params_.size(), "EpsNet: gradient buffer size mismatch");
  require(adjoint.rows() == arch_.dim && adjoint.cols() == c.last.cols(), "EpsNet: adjoint shape mismatch");
  if (!adjoint.allFinite()) throw NumericalError("EpsNet: non-finite adjoint");
  auto g = [&](const std::string& name) {
    const auto& b = block(name);
    return Eigen::Map<Mat>(grad.data() + b.offset, b.rows, b.cols);
  };

  g("out.w").noalias() += adjoint * c.last.transpose();
  g("out.b").col(0) += adjoint.rowwise().sum();
  Mat dh = block_map("out.w").transpose() * adjoint;

  const Eigen::Index C = c.emb.cols();
  Mat demb = Mat::Zero(arch_.emb_width, C);
  Vec dstep_emb = c.has_step ? Vec::Zero(arch_.emb_width) : Vec();
  for (std::size_t l = arch_.hidden.size(); l-- > 0;) {
    const std::string p = "hidden" + std::to_string(l);
    const Mat dpre = (dh.array() * silu_grad(c.pre[l]).array()).matrix();
    g(p + ".w").noalias() += dpre * c.inputs[l].transpose();
    const Vec dbias = dpre.rowwise().sum();
    g(p + ".b").col(0) += dbias;
    const Mat dinj = C == 1 ? Mat(dbias) : dpre;
    g(p + ".emb.w").noalias() += dinj * c.emb.transpose();
    g(p + ".emb.b").col(0) += dbias;
    demb.noalias() += block_map(p + ".emb.w").transpose() * dinj;
    if (c.has_step) {
      g(p + ".step.w").noalias() += dbias * c.step_emb.transpose();
      g(p + ".step.b").col(0) += dbias;
      dstep_emb.noalias() += block_map(p + ".step.w").transpose() * dbias;
    }
    if (l > 0) dh = block_map(p + ".w").transpose() * dpre;
  }

  const Mat dt1 = (demb.array() * silu_grad(c.t1_pre).array()).matrix();
  g("time.l1.w").noalias() += dt1 * c.t0_act.transpose();
  g("time.l1.b").col(0) += dt1.rowwise().sum();
  const Mat dt0 = ((block_map("time.l1.w").transpose() * dt1).array() * silu_grad(c.t0_pre).array()).matrix();
  g("time.l0.w").noalias() += dt0 * c.feats.transpose();
  g("time.l0.b").col(0) += dt0.rowwise().sum();
  if (arch_.num_classes > 0) {
    const Mat dfeats = block_map("time.l0.w").transpose() * dt0;
    auto table = g("class.table");
    for (Eigen::Index j = 0; j < C; ++j) table.col(c.labels[static_cast<std::size_t>(j)]) += dfeats.col(j);
  }

  if (c.has_step) {
    const Vec ds1 = (dstep_emb.array() * silu_grad(c.s1_pre).array()).matrix();
    g("step.l1.w").noalias() += ds1 * c.s0_act.transpose();
    g("step.l1.b").col(0) += ds1;
    const Vec ds0 = ((block_map("step.l1.w").transpose() * ds1).array() * silu_grad(c.s0_pre).array()).matrix();
    g("step.l0.w").noalias() += ds0 * c.step_feats.transpose();
    g("step.l0.b").col(0) += ds0;
  }
  if (!grad.allFinite()) throw NumericalError("EpsNet: non-finite gradient");
}

Mat EpsNet::eps(const Mat& x, double t, const Conditioning& cond) const {
  return forward(x, Vec::Constant(1, t), cond);
}

void EpsNet::zero_output_layer() {
  block_map("out.w").setZero();
  block_map("out.b").setZero();
}

void EpsNet::zero_step_outputs() {
  require(arch_.step_condition, "EpsNet: network has no step head");
  for (std::size_t l = 0; l < arch_.hidden.size(); ++l) {
    const std::string p = "hidden" + std::to_string(l);
    block_map(p + ".step.w").setZero();
    block_map(p + ".step.b").setZero();
  }
}

EpsNet init_student_from_teacher(const EpsNet& teacher, bool add_step_condition, Rng& rng) {
  if (!add_step_condition || teacher.arch().step_condition) return teacher;
  NetArch arch = teacher.arch();
  arch.step_condition = true;
  EpsNet fresh(arch, rng);
  fresh.params().head(teacher.param_count()) = teacher.params();
  fresh.zero_step_outputs();
  return fresh;
}

Mat guided_eps(const EpsModel& model, const Mat& x, double t, const std::vector<int>& labels, double omega,
               std::optional<int> step, std::int64_t* nfe) {
  require(model.has_null_class(), "guided_eps: model has no null class");
  Conditioning cond{labels, step};
  Mat out = model.eps(x, t, cond);
  if (omega == 1.0) {
    if (nfe) *nfe = 1;
    return out;
  }
  Conditioning null_cond{std::vector<int>(labels.size(), kNullLabel), step};
  const Mat uncond = model.eps(x, t, null_cond);
  if (nfe) *nfe = 2;
  return omega * out + (1.0 - omega) * uncond;
}

MixtureOracle::MixtureOracle(GaussianMixture mix) : marginal_(std::move(mix)) {}

MixtureOracle::MixtureOracle(ConditionalMixture mix) : marginal_(mix.marginal()), conditional_(std::move(mix)) {}

Mat MixtureOracle::eps(const Mat& x, double t, const Conditioning& cond) const {
  if (!cond.labels) return oracle_eps(marginal_, x, t);
  require(conditional_.has_value(), "MixtureOracle: labels given to an unconditional oracle");
  require(static_cast<Eigen::Index>(cond.labels->size()) == x.cols(), "MixtureOracle: need one label per chain");
  Mat out(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const int label = (*cond.labels)[static_cast<std::size_t>(j)];
    const auto& mix = label == kNullLabel ? marginal_ : conditional_->class_mixture(label);
    out.col(j) = oracle_eps(mix, x.col(j), t);
  }
  return out;
}

}  // namespace sfd
