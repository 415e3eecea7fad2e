#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "sfd/common.hpp"
#include "sfd/eps_model.hpp"
#include "sfd/rng.hpp"

namespace sfd {

struct NetArch {
  int dim = 2;
  std::vector<int> hidden{128, 128, 128};
  int time_features = 32;  // sinusoidal width, even
  int emb_width = 64;
  int num_classes = 0;  // 0: unconditional; otherwise one extra null row
  bool step_condition = false;

  void validate() const;
  nlohmann::json to_json() const;
  static NetArch from_json(const nlohmann::json& doc);
  friend bool operator==(const NetArch&, const NetArch&) = default;
};

/// Named slice of the flat parameter vector. Matrices are column-major.
struct ParamBlock {
  std::string name;
  Eigen::Index offset = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 1;
  Eigen::Index size() const { return rows * cols; }
};

/// Activations kept by forward() for backward().
struct ForwardCache {
  Mat feats, t0_pre, t0_act, t1_pre, emb;
  Mat step_feats, s0_pre, s0_act, s1_pre, step_emb;
  std::vector<int> labels;  // resolved per embedding column
  std::vector<Mat> inputs;  // input to each hidden layer
  std::vector<Mat> pre;     // pre-activation of each hidden layer
  Mat last;                 // output of the final hidden layer
  bool has_step = false;
};

/// Sinusoidal features of a scalar: [cos(f_i s), sin(f_i s)] over a geometric
/// frequency ladder. Used for log-time and for the step count.
Vec sinusoidal_features(double value, int width);

/// Noise-prediction MLP.
///
/// Input chains are scaled by 1/sqrt(1 + t^2), then pass through SiLU hidden
/// layers. Each hidden layer receives an additive projection of the time
/// embedding (sinusoids of ln t through two SiLU affines, plus an optional
/// class-table row) and, when step-conditioned, an additive projection of a
/// separate step embedding built the same way from the integer step count.
/// The step head lives at the end of the parameter vector, so a teacher's
/// layout is a prefix of its step-conditioned student's.
class EpsNet final : public EpsModel {
 public:
  EpsNet(NetArch arch, Rng& rng);
  EpsNet(NetArch arch, Vec params);

  const NetArch& arch() const { return arch_; }
  const Vec& params() const { return params_; }
  Vec& params() { return params_; }
  Eigen::Index param_count() const { return params_.size(); }
  const std::vector<ParamBlock>& layout() const { return layout_; }
  const ParamBlock& block(std::string_view name) const;
  bool has_block(std::string_view name) const;
  Eigen::Map<Mat> block_map(std::string_view name);
  Eigen::Map<const Mat> block_map(std::string_view name) const;

  /// `t` holds one noise level per chain, or a single level for all chains.
  Mat forward(const Mat& x, const Vec& t, const Conditioning& cond, ForwardCache* cache = nullptr) const;

  /// Adds d(loss)/d(params) into `grad` given d(loss)/d(output) for the
  /// forward pass recorded in `cache`.
  void backward(const ForwardCache& cache, const Mat& adjoint, Vec& grad) const;

  int dim() const override { return arch_.dim; }
  Mat eps(const Mat& x, double t, const Conditioning& cond) const override;
  bool has_null_class() const override { return arch_.num_classes > 0; }
  bool has_step_condition() const override { return arch_.step_condition; }

  void zero_output_layer();
  /// Zeroes the per-layer projections of the step embedding.
  void zero_step_outputs();

 private:
  static std::vector<ParamBlock> build_layout(const NetArch& arch);
  void init_block(const ParamBlock& b, Rng& rng);

  NetArch arch_;
  std::vector<ParamBlock> layout_;
  Vec params_;
};

/// Size of the step head appended by init_student_from_teacher.
Eigen::Index step_head_size(const NetArch& arch);

/// Copy of the teacher. With `add_step_condition`, a step head is appended
/// whose per-layer output projections start at zero, so the student's first
/// forward matches the teacher's exactly.
EpsNet init_student_from_teacher(const EpsNet& teacher, bool add_step_condition, Rng& rng);

/// Classifier-free guidance w * eps(x,t,c) + (1-w) * eps(x,t,null). At w == 1
/// only the conditional branch is evaluated. `nfe` receives the number of
/// model evaluations (1 or 2).
Mat guided_eps(const EpsModel& model, const Mat& x, double t, const std::vector<int>& labels, double omega,
               std::optional<int> step = std::nullopt, std::int64_t* nfe = nullptr);

}  // namespace sfd
