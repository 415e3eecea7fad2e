#include "cli.hpp"

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sfd/sfd.hpp"

namespace sfd::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Keys whose default is null, with the type a flag value parses to.
const std::map<std::string, json::value_t> kOptionalKeys = {
    {"guidance_scale", json::value_t::number_float},
    {"huber_c", json::value_t::number_float},
    {"label", json::value_t::number_integer},
    {"step", json::value_t::number_integer},
};

json defaults_for(const std::string& command, const std::string& variant) {
  json d = {{"seed", 0}, {"out", "."}, {"threads", 1}};
  if (command == "pretrain") {
    d.update({{"data", "builtin:ring8"},
              {"iterations", 5000},
              {"batch", 128},
              {"lr", 1e-3},
              {"tmin", 0.002},
              {"tmax", 80.0},
              {"hidden", {128, 128, 128}},
              {"time_features", 32},
              {"emb_width", 64},
              {"label_dropout", 0.1},
              {"checkpoint_every", 0}});
  } else if (command == "distill") {
    d.update({{"mode", "sfd"},
              {"checkpoint", ""},
              {"data", "builtin:ring8"},
              {"steps", 3},
              {"K", variant == "second-stage" ? 2 : 4},
              {"rho", 7.0},
              {"tmin", 0.006},
              {"tmax", 80.0},
              {"teacher_solver", "dpm_pp_3m"},
              {"afs", true},
              {"loss", "l1"},
              {"huber_c", nullptr},
              {"lr", 5e-5},
              {"budget", 200000},
              {"batch", 128},
              {"step_list", {2, 3, 4, 5}},
              {"checkpoint_every", 0}});
  } else if (command == "sample") {
    d.update({{"checkpoint", ""},
              {"steps", 3},
              {"rho", 7.0},
              {"tmin", 0.006},
              {"tmax", 80.0},
              {"solver", "euler"},
              {"afs", false},
              {"chains", 1000},
              {"guidance_scale", nullptr},
              {"label", nullptr},
              {"step", nullptr},
              {"trace", false}});
  } else if (command == "eval") {
    d.update({{"checkpoint", ""},
              {"data", "builtin:ring8"},
              {"step_list", {2, 3, 4, 5}},
              {"solver", "euler"},
              {"afs", false},
              {"rho", 7.0},
              {"tmin", 0.006},
              {"tmax", 80.0},
              {"chains", 10000},
              {"projections", 128}});
  } else if (command == "reproduce") {
    d.update({{"target", "schedule-table"}});
    if (variant == "schedule-table") {
      d.update({{"steps", 3}, {"tmin", 0.006}, {"tmax", 80.0}, {"rho_list", {5, 6, 7, 8, 9, 10}}});
    } else {
      d.update({{"checkpoint", ""},
                {"data", "builtin:ring8"},
                {"pretrain_iterations", 5000},
                {"rho", 7.0},
                {"tmax", 80.0},
                {"lr", 5e-5}});
      if (variant == "fig2") {
        d.update({{"steps", 4},
                  {"K", 3},
                  {"teacher_solver", "dpm_2s"},
                  {"tmin", 0.002},
                  {"chains", 1000},
                  {"iterations", 100},
                  {"loss", "l2sq"}});
      } else {
        d.update({{"K", 4},
                  {"teacher_solver", "dpm_pp_3m"},
                  {"tmin", 0.006},
                  {"budget", 200000},
                  {"chains", 10000},
                  {"projections", 128}});
        if (variant == "fig3") d.update({{"step_list", {2, 3, 4}}});
        if (variant == "fig4") d.update({{"steps", 4}, {"afs", true}, {"step_list", {2, 3, 4, 5, 6}}});
      }
    }
  }
  return d;
}

std::string key_to_flag(const std::string& key) {
  std::string f = key;
  std::replace(f.begin(), f.end(), '_', '-');
  return "--" + f;
}

json parse_flag_value(const std::string& key, const json& def, const std::string& text) {
  try {
    auto type = def.type();
    if (def.is_null()) type = kOptionalKeys.at(key);
    switch (type) {
      case json::value_t::number_integer:
      case json::value_t::number_unsigned: {
        std::size_t used = 0;
        const long long v = std::stoll(text, &used);
        if (used != text.size()) break;
        return v;
      }
      case json::value_t::number_float: {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used != text.size()) break;
        return v;
      }
      case json::value_t::string:
        return text;
      case json::value_t::array: {
        json arr = json::array();
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ',')) {
          const bool is_float = !def.empty() && def.front().is_number_float();
          std::size_t used = 0;
          if (is_float) {
            arr.push_back(std::stod(item, &used));
          } else {
            arr.push_back(std::stoll(item, &used));
          }
          if (used != item.size()) throw std::invalid_argument(item);
        }
        return arr;
      }
      default:
        break;
    }
  } catch (const std::logic_error&) {
  }
  throw ConfigError("invalid value '" + text + "' for " + key_to_flag(key));
}

json read_json_file(const std::string& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw ConfigError(std::string(what) + ": cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(std::string(what) + ": " + path + ": " + e.what());
  }
}

// Typed access to the resolved config; type mismatches are config errors.
class Config {
 public:
  explicit Config(json values) : v_(std::move(values)) {}

  template <typename T>
  T get(const std::string& key) const {
    try {
      return v_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config key '" + key + "' has the wrong type");
    }
  }
  template <typename T>
  std::optional<T> opt(const std::string& key) const {
    if (!v_.contains(key) || v_.at(key).is_null()) return std::nullopt;
    return get<T>(key);
  }
  std::string path(const std::string& key, const char* what) const {
    const auto p = get<std::string>(key);
    if (p.empty()) throw ConfigError(std::string(what) + ": --" + key + " is required");
    if (!fs::exists(p)) throw ConfigError(std::string(what) + ": " + key + " path does not exist: " + p);
    return p;
  }
  const json& raw() const { return v_; }

 private:
  json v_;
};

std::string config_hash(const json& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : cfg.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

struct DataSource {
  std::optional<GaussianMixture> plain;
  std::optional<ConditionalMixture> conditional;

  const GaussianMixture& marginal() const { return plain ? *plain : conditional->marginal(); }
  int dim() const { return marginal().dim(); }
};

DataSource load_data(const std::string& spec) {
  const std::string prefix = "builtin:";
  if (spec.rfind(prefix, 0) == 0) {
    const std::string name = spec.substr(prefix.size());
    const auto ring = GaussianMixture::ring(8, 1.0, 0.1);
    if (name == "ring8") return {ring, std::nullopt};
    if (name == "ring8-conditional") return {std::nullopt, ConditionalMixture::from_components(ring)};
    if (name == "normal1d") return {GaussianMixture::standard_normal(1), std::nullopt};
    if (name == "normal2d") return {GaussianMixture::standard_normal(2), std::nullopt};
    throw ConfigError("unknown builtin data set '" + name + "'");
  }
  if (!fs::exists(spec)) throw ConfigError("data file does not exist: " + spec);
  const json doc = read_json_file(spec, "data");
  if (doc.contains("classes")) return {std::nullopt, ConditionalMixture::from_json(doc)};
  return {GaussianMixture::from_json(doc), std::nullopt};
}

class RunContext {
 public:
  RunContext(std::string command, Config cfg) : command_(std::move(command)), cfg_(std::move(cfg)) {
    dir_ = cfg_.get<std::string>("out");
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec || !fs::is_directory(dir_)) throw ConfigError("cannot create output directory " + dir_.string());
  }

  const Config& cfg() const { return cfg_; }
  std::uint64_t seed() const { return cfg_.get<std::uint64_t>("seed"); }
  Rng stream(const char* name) const { return Rng::stream(seed(), name); }
  int threads() const {
    const int t = cfg_.get<int>("threads");
    if (t < 1) throw ConfigError("--threads must be >= 1");
    return t;
  }

  std::ofstream open(const std::string& name) {
    outputs_.push_back(name);
    std::ofstream f(dir_ / name, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + (dir_ / name).string());
    return f;
  }
  std::string file(const std::string& name) {
    outputs_.push_back(name);
    return (dir_ / name).string();
  }
  json& results() { return results_; }

  void write_manifest(const std::string& status, const std::string& error = {}) const {
    json m = {{"command", command_},
              {"version", SFD_VERSION},
              {"seed", cfg_.raw().value("seed", json(0))},
              {"config", cfg_.raw()},
              {"outputs", outputs_},
              {"results", results_},
              {"status", status}};
    if (!error.empty()) m["error"] = error;
    std::ofstream f(dir_ / "manifest.json", std::ios::binary);
    f << m.dump(2) << '\n';
  }

 private:
  std::string command_;
  Config cfg_;
  fs::path dir_;
  std::vector<std::string> outputs_;
  json results_ = json::object();
};

class TrainLogWriter {
 public:
  TrainLogWriter(RunContext& ctx, std::int64_t checkpoint_every)
      : ctx_(ctx), every_(checkpoint_every), csv_(ctx.open("train_log.csv")) {
    csv_ << "iteration,loss,lr,wall_time\n";
    csv_.precision(17);
  }

  TrainLogger logger() {
    return [this](const TrainLogEntry& e) {
      csv_ << e.iteration << ',' << e.loss << ',' << e.lr << ',' << std::fixed << std::setprecision(6) << e.wall_time
           << std::defaultfloat << std::setprecision(17) << '\n';
      if (every_ > 0 && e.model && (e.iteration + 1) % every_ == 0) {
        const std::string name = "checkpoint-" + std::to_string(e.iteration + 1) + ".json";
        save_checkpoint(ctx_.file(name), *e.model, {ctx_.seed(), e.iteration + 1, {{"periodic", true}}});
      }
    };
  }

 private:
  RunContext& ctx_;
  std::int64_t every_;
  std::ofstream csv_;
};

DistillConfig distill_config(const Config& c, const std::string& mode) {
  DistillConfig d;
  d.steps = c.get<int>("steps");
  d.sub_steps = c.get<int>("K");
  d.teacher_kind = solver_kind_from_string(c.get<std::string>("teacher_solver"));
  d.afs = c.get<bool>("afs");
  d.loss = {loss_kind_from_string(c.get<std::string>("loss")), c.opt<double>("huber_c")};
  d.lr = c.get<double>("lr");
  d.budget = c.get<std::int64_t>("budget");
  d.batch = c.get<int>("batch");
  d.step_list = c.get<std::vector<int>>("step_list");
  d.rho = c.get<double>("rho");
  d.t_min = c.get<double>("tmin");
  d.t_max = c.get<double>("tmax");
  if (mode == "second-stage") d.steps = d.afs ? 2 : 1;
  d.validate();
  return d;
}

std::vector<double> uniform_prior(int classes) {
  return std::vector<double>(static_cast<std::size_t>(classes), 1.0 / classes);
}

int cmd_pretrain(RunContext& ctx) {
  const Config& c = ctx.cfg();
  const DataSource data = load_data(c.get<std::string>("data"));
  NetArch arch;
  arch.dim = data.dim();
  arch.hidden = c.get<std::vector<int>>("hidden");
  arch.time_features = c.get<int>("time_features");
  arch.emb_width = c.get<int>("emb_width");
  arch.num_classes = data.conditional ? data.conditional->num_classes() : 0;
  arch.validate();
  PretrainConfig pc;
  pc.iterations = c.get<std::int64_t>("iterations");
  pc.batch = c.get<int>("batch");
  pc.lr = c.get<double>("lr");
  pc.t_min = c.get<double>("tmin");
  pc.t_max = c.get<double>("tmax");
  pc.label_dropout = c.get<double>("label_dropout");
  pc.validate();

  Rng init = ctx.stream("init");
  Rng train = ctx.stream("training");
  TrainLogWriter log(ctx, c.get<std::int64_t>("checkpoint_every"));
  EpsNet net(arch, init);
  const json extra = {{"command", "pretrain"}, {"data", c.get<std::string>("data")}};
  try {
    net = data.conditional ? pretrain(*data.conditional, std::move(net), pc, train, log.logger())
                           : pretrain(*data.plain, std::move(net), pc, train, log.logger());
  } catch (const TrainingDiverged& e) {
    json meta = extra;
    meta["diverged"] = true;
    save_checkpoint(ctx.file("checkpoint.json"), e.last_good, {ctx.seed(), e.iteration, meta});
    throw;
  }
  save_checkpoint(ctx.file("checkpoint.json"), net, {ctx.seed(), pc.iterations, extra});
  Rng eval = ctx.stream("eval");
  ctx.results()["eps_error"] = oracle_eps_error(net, data.marginal(), pc.t_min, pc.t_max, 16, 256, eval);
  ctx.results()["parameters"] = net.param_count();
  return kOk;
}

int cmd_distill(RunContext& ctx) {
  const Config& c = ctx.cfg();
  const std::string mode = c.get<std::string>("mode");
  if (mode != "vanilla" && mode != "sfd" && mode != "sfd-v" && mode != "second-stage")
    throw ConfigError("unknown --mode '" + mode + "' (vanilla, sfd, sfd-v, second-stage)");
  const Checkpoint teacher_ckpt = load_checkpoint(c.path("checkpoint", "distill"));
  const EpsNet& teacher = teacher_ckpt.net;
  DistillConfig dc = distill_config(c, mode);
  if (teacher.arch().num_classes > 0) {
    const DataSource data = load_data(c.get<std::string>("data"));
    dc.class_prior = data.conditional && data.conditional->num_classes() == teacher.arch().num_classes
                         ? data.conditional->prior()
                         : uniform_prior(teacher.arch().num_classes);
  }
  Rng train = ctx.stream("training");
  TrainLogWriter log(ctx, c.get<std::int64_t>("checkpoint_every"));
  json extra = {{"command", "distill"}, {"mode", mode}, {"steps", dc.steps}, {"afs", dc.afs}};
  if (mode == "sfd-v") extra["step_list"] = dc.step_list;
  try {
    DistillResult r = [&] {
      if (mode == "vanilla") {
        const DataSource data = load_data(c.get<std::string>("data"));
        return distill_vanilla(teacher, EpsNet(teacher), dc, data.marginal(), train, log.logger());
      }
      if (mode == "sfd") return distill_sfd(teacher, dc, train, log.logger());
      if (mode == "sfd-v") return distill_sfd_v(teacher, dc, train, log.logger());
      return distill_second_stage(teacher, dc, train, log.logger());
    }();
    save_checkpoint(ctx.file("checkpoint.json"), r.student, {ctx.seed(), r.iterations, extra});
    ctx.results() = {{"iterations", r.iterations},
                     {"updates", r.updates},
                     {"teacher_nfe_per_trajectory", r.teacher_nfe},
                     {"student_nfe_per_trajectory", r.student_nfe},
                     {"final_loss", r.losses.empty() ? 0.0 : r.losses.back()}};
  } catch (const TrainingDiverged& e) {
    extra["diverged"] = true;
    save_checkpoint(ctx.file("checkpoint.json"), e.last_good, {ctx.seed(), e.iteration, extra});
    throw;
  }
  return kOk;
}

void write_samples_csv(std::ostream& out, const Mat& x) {
  out.precision(17);
  out << "chain_id";
  for (Eigen::Index i = 0; i < x.rows(); ++i) out << ",x_" << i;
  out << '\n';
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    out << j;
    for (Eigen::Index i = 0; i < x.rows(); ++i) out << ',' << x(i, j);
    out << '\n';
  }
}

int cmd_sample(RunContext& ctx) {
  const Config& c = ctx.cfg();
  const EpsNet net = load_checkpoint(c.path("checkpoint", "sample")).net;
  const int steps = c.get<int>("steps");
  const TimeSchedule schedule = make_polynomial(steps, c.get<double>("tmin"), c.get<double>("tmax"), c.get<double>("rho"));
  SampleOptions o;
  o.kind = solver_kind_from_string(c.get<std::string>("solver"));
  o.afs = c.get<bool>("afs");
  o.chains = c.get<std::int64_t>("chains");
  o.threads = ctx.threads();
  if (const auto label = c.opt<int>("label")) o.labels = std::vector<int>(static_cast<std::size_t>(o.chains), *label);
  o.guidance_scale = c.opt<double>("guidance_scale");
  if (o.guidance_scale && !o.labels) throw ConfigError("--guidance-scale needs --label");
  if (net.has_step_condition()) o.step = c.opt<int>("step").value_or(steps);
  else if (c.opt<int>("step")) throw ConfigError("--step given but the checkpoint has no step condition");
  Rng rng = ctx.stream("eval");
  const SampleResult r = sample(net, schedule, o, rng);
  {
    auto f = ctx.open("samples.csv");
    write_samples_csv(f, r.samples);
  }
  if (c.get<bool>("trace")) {
    auto f = ctx.open("trace.csv");
    r.trace.write_csv(f);
  }
  ctx.results() = {{"nfe", r.trace.nfe}, {"chains", o.chains}, {"schedule", schedule.values()}};
  return kOk;
}

int cmd_eval(RunContext& ctx) {
  const Config& c = ctx.cfg();
  const EpsNet net = load_checkpoint(c.path("checkpoint", "eval")).net;
  const DataSource data = load_data(c.get<std::string>("data"));
  if (data.dim() != net.dim()) throw ConfigError("eval: data and checkpoint dimensions differ");
  Rng data_rng = ctx.stream("data");
  const auto chains = c.get<std::int64_t>("chains");
  const Mat reference = data.marginal().sample(data_rng, chains);
  SweepConfig sc;
  sc.kind = solver_kind_from_string(c.get<std::string>("solver"));
  sc.afs = c.get<bool>("afs");
  sc.rho = c.get<double>("rho");
  sc.t_min = c.get<double>("tmin");
  sc.t_max = c.get<double>("tmax");
  sc.quality = {chains, c.get<int>("projections"), ctx.stream("eval").seed(), ctx.threads()};
  const auto rows = extrapolation_sweep(net, c.get<std::vector<int>>("step_list"), reference, sc);
  auto f = ctx.open("eval-" + config_hash(c.raw()) + ".csv");
  write_sweep_csv(f, rows);
  json table = json::array();
  for (const auto& r : rows) table.push_back({{"steps", r.steps}, {"nfe", r.nfe}, {"sliced_wasserstein", r.metric}});
  ctx.results()["sweep"] = table;
  return kOk;
}

EpsNet obtain_teacher(RunContext& ctx, const DataSource& data) {
  const Config& c = ctx.cfg();
  if (!c.get<std::string>("checkpoint").empty()) return load_checkpoint(c.path("checkpoint", "reproduce")).net;
  if (data.conditional) throw ConfigError("reproduce: figures use unconditional data");
  NetArch arch;
  arch.dim = data.dim();
  PretrainConfig pc;
  pc.iterations = c.get<std::int64_t>("pretrain_iterations");
  pc.t_min = c.get<double>("tmin");
  pc.t_max = c.get<double>("tmax");
  Rng init = ctx.stream("init");
  Rng train = ctx.stream("training").split(0);
  EpsNet teacher = pretrain(*data.plain, EpsNet(arch, init), pc, train);
  save_checkpoint(ctx.file("teacher.json"), teacher, {ctx.seed(), pc.iterations, {{"command", "reproduce"}}});
  return teacher;
}

int reproduce_schedule_table(RunContext& ctx) {
  const Config& c = ctx.cfg();
  const int steps = c.get<int>("steps");
  auto f = ctx.open("schedule_table.csv");
  f << "rho";
  for (int n = steps; n >= 0; --n) f << ",t_" << n;
  f << '\n' << std::fixed << std::setprecision(2);
  for (const double rho : c.get<std::vector<double>>("rho_list")) {
    const auto s = make_polynomial(steps, c.get<double>("tmin"), c.get<double>("tmax"), rho);
    f << std::setprecision(0) << rho << std::setprecision(2);
    for (int n = steps; n >= 1; --n) f << ',' << s[n];
    f << ',' << std::setprecision(3) << s[0] << std::setprecision(2) << '\n';
  }
  return kOk;
}

int reproduce_fig2(RunContext& ctx) {
  const Config& c = ctx.cfg();
  const DataSource data = load_data(c.get<std::string>("data"));
  const EpsNet teacher = obtain_teacher(ctx, data);
  SmoothModificationConfig sm;
  sm.steps = c.get<int>("steps");
  sm.sub_steps = c.get<int>("K");
  sm.teacher_kind = solver_kind_from_string(c.get<std::string>("teacher_solver"));
  sm.iterations = c.get<std::int64_t>("iterations");
  sm.lr = c.get<double>("lr");
  sm.loss = {loss_kind_from_string(c.get<std::string>("loss")), std::nullopt};
  sm.chains = c.get<int>("chains");
  sm.rho = c.get<double>("rho");
  sm.t_min = c.get<double>("tmin");
  sm.t_max = c.get<double>("tmax");
  Rng rng = ctx.stream("training").split(1);
  const DeviationMatrix m = smooth_modification_experiment(teacher, sm, rng);
  json doc = m.to_json();
  doc["config"] = c.raw();
  auto f = ctx.open("fig2-" + config_hash(c.raw()) + ".json");
  f << doc.dump(2) << '\n';
  ctx.results()["off_target_improvement_fraction"] = m.off_target_improvement_fraction();
  return kOk;
}

struct VariantResult {
  int steps;
  std::int64_t nfe;
  double sw;
  double endpoint;
};

int reproduce_fig3(RunContext& ctx) {
  const Config& c = ctx.cfg();
  const DataSource data = load_data(c.get<std::string>("data"));
  const EpsNet teacher = obtain_teacher(ctx, data);
  Rng data_rng = ctx.stream("data");
  const auto chains = c.get<std::int64_t>("chains");
  const Mat reference = data.marginal().sample(data_rng, chains);
  const QualityConfig q{chains, c.get<int>("projections"), ctx.stream("eval").seed(), ctx.threads()};

  DistillConfig base;
  base.sub_steps = c.get<int>("K");
  base.teacher_kind = solver_kind_from_string(c.get<std::string>("teacher_solver"));
  base.lr = c.get<double>("lr");
  base.budget = c.get<std::int64_t>("budget");
  base.rho = c.get<double>("rho");
  base.t_min = c.get<double>("tmin");
  base.t_max = c.get<double>("tmax");

  std::map<std::string, VariantResult> cache;
  auto run_variant = [&](const std::string& mode, DistillConfig dc) {
    const std::string key = mode + "/" + std::string(to_string(dc.loss.kind)) + "/" +
                            std::string(to_string(dc.teacher_kind)) + "/" + std::to_string(dc.steps) + "/" +
                            std::to_string(dc.afs);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
    Rng train = ctx.stream("training").split(cache.size() + 1);
    const DistillResult r = mode == "vanilla" ? distill_vanilla(teacher, EpsNet(teacher), dc, data.marginal(), train)
                                              : distill_sfd(teacher, dc, train);
    const TimeSchedule schedule = dc.schedule();
    SampleOptions o;
    o.afs = dc.afs;
    const VariantResult v{dc.steps, dc.steps - (dc.afs ? 1 : 0), sample_quality(r.student, schedule, o, reference, q),
                          endpoint_error(r.student, schedule, o, teacher, schedule, dc.teacher_kind, dc.sub_steps, q)};
    cache.emplace(key, v);
    return v;
  };

  auto f = ctx.open("fig3-" + config_hash(c.raw()) + ".csv");
  f << "panel,variant,steps,nfe,sliced_wasserstein,endpoint_error\n" << std::setprecision(17);
  auto row = [&](const std::string& panel, const std::string& variant, const VariantResult& v) {
    f << panel << ',' << variant << ',' << v.steps << ',' << v.nfe << ',' << v.sw << ',' << v.endpoint << '\n';
  };
  for (const int nfe : c.get<std::vector<int>>("step_list")) {
    DistillConfig plain = base;
    plain.steps = nfe;
    plain.afs = false;
    row("global-vs-local", "vanilla", run_variant("vanilla", plain));
    row("global-vs-local", "sfd", run_variant("sfd", plain));
    DistillConfig afs = plain;
    afs.steps = nfe + 1;
    afs.afs = true;
    row("afs", "without", run_variant("sfd", plain));
    row("afs", "with", run_variant("sfd", afs));
  }
  DistillConfig two_nfe = base;
  two_nfe.steps = 3;
  two_nfe.afs = true;
  for (const LossKind k : {LossKind::l2sq, LossKind::l1, LossKind::pseudo_huber}) {
    DistillConfig dc = two_nfe;
    dc.loss.kind = k;
    row("loss", std::string(to_string(k)), run_variant("sfd", dc));
  }
  for (const SolverKind k : {SolverKind::euler, SolverKind::heun, SolverKind::dpm_2s, SolverKind::dpm_pp_3m}) {
    DistillConfig dc = two_nfe;
    dc.teacher_kind = k;
    row("teacher", std::string(to_string(k)), run_variant("sfd", dc));
  }
  return kOk;
}

int reproduce_fig4(RunContext& ctx) {
  const Config& c = ctx.cfg();
  const DataSource data = load_data(c.get<std::string>("data"));
  const EpsNet teacher = obtain_teacher(ctx, data);
  Rng data_rng = ctx.stream("data");
  const auto chains = c.get<std::int64_t>("chains");
  const Mat reference = data.marginal().sample(data_rng, chains);
  DistillConfig dc;
  dc.steps = c.get<int>("steps");
  dc.sub_steps = c.get<int>("K");
  dc.teacher_kind = solver_kind_from_string(c.get<std::string>("teacher_solver"));
  dc.afs = c.get<bool>("afs");
  dc.lr = c.get<double>("lr");
  dc.budget = c.get<std::int64_t>("budget");
  dc.rho = c.get<double>("rho");
  dc.t_min = c.get<double>("tmin");
  dc.t_max = c.get<double>("tmax");
  Rng train = ctx.stream("training").split(1);
  const DistillResult r = distill_sfd(teacher, dc, train);
  SweepConfig sc;
  sc.afs = dc.afs;
  sc.rho = dc.rho;
  sc.t_min = dc.t_min;
  sc.t_max = dc.t_max;
  sc.quality = {chains, c.get<int>("projections"), ctx.stream("eval").seed(), ctx.threads()};
  const auto steps = c.get<std::vector<int>>("step_list");
  const auto student = extrapolation_sweep(r.student, steps, reference, sc);
  sc.afs = false;
  const auto baseline = extrapolation_sweep(teacher, steps, reference, sc);
  auto f = ctx.open("fig4-" + config_hash(c.raw()) + ".csv");
  f << "steps,student_nfe,student_sliced_wasserstein,teacher_euler_nfe,teacher_euler_sliced_wasserstein\n"
    << std::setprecision(17);
  for (std::size_t i = 0; i < steps.size(); ++i)
    f << steps[i] << ',' << student[i].nfe << ',' << student[i].metric << ',' << baseline[i].nfe << ','
      << baseline[i].metric << '\n';
  return kOk;
}

int cmd_reproduce(RunContext& ctx) {
  const auto target = ctx.cfg().get<std::string>("target");
  if (target == "schedule-table") return reproduce_schedule_table(ctx);
  if (target == "fig2") return reproduce_fig2(ctx);
  if (target == "fig3") return reproduce_fig3(ctx);
  if (target == "fig4") return reproduce_fig4(ctx);
  throw ConfigError("unknown reproduce target '" + target + "' (fig2, fig3, fig4, schedule-table)");
}

// Which key selects command-specific defaults.
const char* variant_key(const std::string& command) {
  if (command == "distill") return "mode";
  if (command == "reproduce") return "target";
  return nullptr;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const std::vector<std::string> commands = {"pretrain", "distill", "sample", "eval", "reproduce"};
  if (args.empty() || std::find(commands.begin(), commands.end(), args.front()) == commands.end()) {
    if (!args.empty() && (args.front() == "--help" || args.front() == "-h")) {
      out << "usage: sfd <pretrain|distill|sample|eval|reproduce> [options]\n"
             "       sfd <command> --help lists the options of a command\n";
      return kOk;
    }
    err << "sfd: expected a command: pretrain, distill, sample, eval, reproduce\n";
    return kInvalidConfig;
  }
  const std::string command = args.front();
  std::unique_ptr<RunContext> ctx;
  json cfg = json::object();
  auto fail = [&](const std::string& status, const std::string& message, int code) {
    err << "sfd " << command << ": " << message << '\n';
    try {
      if (!ctx) {
        // Parsing may not have got as far as --out; look for it directly.
        json where = cfg.contains("out") ? cfg : json{{"out", "."}};
        for (std::size_t i = 1; i < args.size(); ++i) {
          if (args[i] == "--out" && i + 1 < args.size()) where["out"] = args[i + 1];
          if (args[i].rfind("--out=", 0) == 0) where["out"] = args[i].substr(6);
        }
        ctx = std::make_unique<RunContext>(command, Config(where));
      }
      ctx->write_manifest(status, message);
    } catch (const std::exception&) {
      // No usable output directory; the diagnostic above is all we can give.
    }
    return code;
  };
  try {
    // The variant (distill mode, reproduce target) decides the defaults, so
    // find it in the flags or config file before building the parser.
    json file_cfg = json::object();
    std::string variant;
    {
      const char* vk = variant_key(command);
      for (std::size_t i = 1; i < args.size(); ++i) {
        const std::string& a = args[i];
        auto value_of = [&](const std::string& flag) -> std::optional<std::string> {
          if (a == flag && i + 1 < args.size()) return args[i + 1];
          if (a.rfind(flag + "=", 0) == 0) return a.substr(flag.size() + 1);
          return std::nullopt;
        };
        if (auto v = value_of("--config")) {
          file_cfg = read_json_file(*v, "config");
          if (!file_cfg.is_object()) throw ConfigError("config: top level must be an object");
        }
        if (vk) {
          if (auto v = value_of(key_to_flag(vk))) variant = *v;
        }
      }
      if (vk && variant.empty()) variant = file_cfg.value(vk, defaults_for(command, "").value(vk, ""));
    }
    cfg = defaults_for(command, variant);
    for (const auto& [key, value] : file_cfg.items()) {
      if (key == "command") {
        if (value != command) throw ConfigError("config: 'command' is " + value.dump() + " but ran " + command);
        continue;
      }
      if (!cfg.contains(key)) throw ConfigError("config: unknown key '" + key + "' for " + command);
      cfg[key] = value;
    }

    CLI::App app("sfd " + command);
    app.set_help_flag("-h,--help");
    std::string config_path;
    app.add_option("--config", config_path, "JSON config file; flags override its values");
    std::map<std::string, std::string> text;
    std::map<std::string, bool> flags;
    std::vector<std::pair<std::string, CLI::Option*>> options;
    for (const auto& [key, value] : cfg.items()) {
      if (value.is_boolean()) {
        flags[key] = value.get<bool>();
        const std::string f = key_to_flag(key);
        options.emplace_back(key, app.add_flag(f + ",!--no-" + f.substr(2), flags[key]));
      } else {
        options.emplace_back(key, app.add_option(key_to_flag(key), text[key]));
      }
    }
    std::vector<std::string> rest(args.rbegin(), args.rend() - 1);
    try {
      app.parse(rest);
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return kOk;
    } catch (const CLI::ParseError& e) {
      return fail("invalid-config", e.what(), kInvalidConfig);
    }
    for (const auto& [key, opt] : options) {
      if (opt->count() == 0) continue;
      cfg[key] = cfg[key].is_boolean() ? json(flags[key]) : parse_flag_value(key, cfg[key], text[key]);
    }

    ctx = std::make_unique<RunContext>(command, Config(cfg));
    int code = kOk;
    if (command == "pretrain") code = cmd_pretrain(*ctx);
    if (command == "distill") code = cmd_distill(*ctx);
    if (command == "sample") code = cmd_sample(*ctx);
    if (command == "eval") code = cmd_eval(*ctx);
    if (command == "reproduce") code = cmd_reproduce(*ctx);
    ctx->write_manifest("ok");
    out << ctx->results().dump() << '\n';
    return code;
  } catch (const TrainingDiverged& e) {
    return fail("diverged", std::string(e.what()) + " (last good parameters kept in checkpoint.json)", kDiverged);
  } catch (const ConfigError& e) {
    return fail("invalid-config", e.what(), kInvalidConfig);
  } catch (const ArgumentError& e) {
    return fail("invalid-config", e.what(), kInvalidConfig);
  } catch (const FormatError& e) {
    return fail("invalid-config", e.what(), kInvalidConfig);
  } catch (const json::exception& e) {
    return fail("invalid-config", e.what(), kInvalidConfig);
  } catch (const std::exception& e) {
    return fail("error", e.what(), kFailure);
  }
}

}  // namespace sfd::cli
