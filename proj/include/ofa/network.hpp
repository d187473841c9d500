#pragma once

#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ofa/arch.hpp"
#include "ofa/ops.hpp"
#include "ofa/tensor.hpp"

namespace ofa {

struct NormWeights {
  Tensor gamma;
  Tensor beta;
  ops::RunningStats stats;
};

struct SqueezeExcite {
  Tensor reduce_w, reduce_b;  // (mid, C), (mid)
  Tensor expand_w, expand_b;  // (C, mid), (C)
};

/// Inverted (residual) bottleneck: 1x1 expand, kxk depthwise, optional SE,
/// 1x1 project. The residual is applied by the enclosing level.
struct MobileBlock {
  Tensor expand_w;
  NormWeights expand_norm;
  Tensor dw_w;
  NormWeights dw_norm;
  std::optional<SqueezeExcite> se;
  Tensor project_w;
  NormWeights project_norm;
  int stride = 1;
};

struct PointwiseBlock {
  Tensor w;
  NormWeights norm;
  int stride = 1;
};

struct LightBlock {
  bool pool = false;
  Tensor w;  // undefined when the channel count is unchanged
  NormWeights norm;
};

/// Blocks executed in parallel at one depth of a stage. Output is the mean of
/// the present branches, plus the input when `residual` is set.
struct Level {
  std::optional<MobileBlock> mobile;
  std::optional<PointwiseBlock> pointwise;
  std::optional<LightBlock> light;
  bool residual = false;
  Activation act = Activation::relu;
};

struct StageWeights {
  std::vector<Level> levels;
};

/// GAP -> 1x1 conv -> hswish -> linear.
struct ExitHead {
  Tensor feature_w;
  Tensor fc_w, fc_b;
};

/// 1x1 conv + BN + hswish -> GAP -> 1x1 conv + hswish -> linear.
struct TailHead {
  Tensor expand_w;
  NormWeights expand_norm;
  Tensor feature_w;
  Tensor fc_w, fc_b;
};

/// Concrete weights of one network with no elastic dimension left. Produced
/// either as autograd views of a supernet or as an owning standalone copy.
struct NetworkWeights {
  Tensor stem_w;
  NormWeights stem_norm;
  Tensor head_dw_w;
  NormWeights head_dw_norm;
  Tensor head_pw_w;
  NormWeights head_pw_norm;
  std::vector<StageWeights> stages;
  /// exits[s] is the head after stage s, for s < n_stages - 1 (early-exit nets).
  std::vector<ExitHead> exits;
  std::optional<TailHead> tail;
  bool dense_skips = false;
};

struct ExecOptions {
  ops::NormMode mode = ops::NormMode::eval;
  int calibration_step = 0;
  float bn_momentum = 0.1f;
  float bn_eps = 1e-5f;
  /// Called with the path of every block as it executes.
  std::function<void(std::string_view)> trace;
};

/// x * hsigmoid(W2 relu(W1 GAP(x) + b1) + b2), per channel.
Tensor squeeze_excite(const SqueezeExcite& se, const Tensor& x);
/// Mean of the present branches, plus the input when `residual` is set.
Tensor run_level(const Level& level, const Tensor& x, const ExecOptions& opt);

/// Runs the network and returns logits for each produced exit, in order.
std::vector<Tensor> run_network(const NetworkWeights& net, const Tensor& x, const ExecOptions& opt);

enum class TensorRole { trainable, buffer };

/// Visits every tensor with a stable hierarchical name.
void visit_tensors(NetworkWeights& net, const std::function<void(const std::string&, Tensor&, TensorRole)>& fn);

/// Deep copy with running statistics gathered into private buffers.
NetworkWeights materialize(const NetworkWeights& net);

int64_t count_trainable(NetworkWeights& net);

}  // namespace ofa
