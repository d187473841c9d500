#include "ofa/elastic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ofa/error.hpp"

namespace ofa::elastic {

Tensor transform_kernel(const Tensor& k7, const Tensor& m75, const Tensor& m53, int target) {
  if (target != 3 && target != 5 && target != 7)
    throw Error(ErrorKind::invalid_argument, "transform_kernel: target " + std::to_string(target) + " not in {3,5,7}");
  if (k7.dim(-1) != 7 || k7.dim(-2) != 7) throw DimensionError("transform_kernel", k7.rank() - 1, 7, k7.dim(-1));
  if (target == 7) return k7;
  Tensor k5 = ops::kernel_matmul(ops::center_crop(k7, 5), m75);
  if (target == 5) return k5;
  return ops::kernel_matmul(ops::center_crop(k5, 3), m53);
}

std::vector<double> channel_l1_norms(const Tensor& weight, int axis) {
  if (axis < 0 || axis >= weight.rank()) throw DimensionError("channel_l1_norms: axis out of range");
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= weight.dim(i);
  for (int i = axis + 1; i < weight.rank(); ++i) inner *= weight.dim(i);
  const int64_t n = weight.dim(axis);
  std::vector<double> norms(static_cast<size_t>(n), 0.0);
  auto d = weight.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t c = 0; c < n; ++c)
      for (int64_t i = 0; i < inner; ++i) norms[c] += std::fabs(d[(o * n + c) * inner + i]);
  return norms;
}

std::vector<int> select_top(const std::vector<double>& norms, int target_count) {
  const int n = static_cast<int>(norms.size());
  if (target_count < 1 || target_count > n)
    throw Error(ErrorKind::invalid_argument, "select_channels: target_count " + std::to_string(target_count) +
                                                 " outside [1, " + std::to_string(n) + "]");
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return norms[a] > norms[b]; });
  order.resize(static_cast<size_t>(target_count));
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<int> select_channels(const Tensor& weight, int target_count) {
  return select_top(channel_l1_norms(weight, 0), target_count);
}

namespace {

NormWeights norm_of(const Supernet& net, const std::string& prefix) {
  NormWeights n;
  n.gamma = net.get(prefix + ".gamma");
  n.beta = net.get(prefix + ".beta");
  n.stats.mean = net.get(prefix + ".running_mean");
  n.stats.var = net.get(prefix + ".running_var");
  return n;
}

NormWeights sliced_norm(const Supernet& net, const std::string& prefix, const std::vector<int>& idx) {
  NormWeights n = norm_of(net, prefix);
  if (idx.empty()) return n;
  n.gamma = ops::index_select(n.gamma, 0, idx);
  n.beta = ops::index_select(n.beta, 0, idx);
  n.stats.index = idx;
  return n;
}

std::vector<int> prefix_index(int n) {
  std::vector<int> v(static_cast<size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

MobileBlock effective_mobile(const Supernet& net, int s, int j, int kernel, int expand) {
  const auto& arch = net.arch();
  const auto& stage = arch.stages[static_cast<size_t>(s)];
  const std::string p = level_prefix(s, j) + ".mobile";
  const int max_hidden = arch.hidden_channels(s, arch.max_expand);
  const int hidden = arch.hidden_channels(s, expand);

  MobileBlock m;
  m.stride = j == 0 ? stage.stride : 1;
  Tensor expand_w = net.get(p + ".expand.weight");
  std::vector<int> idx;
  if (hidden < max_hidden) idx = select_channels(expand_w, hidden);

  m.expand_w = idx.empty() ? expand_w : ops::index_select(expand_w, 0, idx);
  m.expand_norm = sliced_norm(net, p + ".expand_bn", idx);

  Tensor dw = net.get(p + ".dw.weight");
  if (!idx.empty()) dw = ops::index_select(dw, 0, idx);
  if (kernel != arch.max_kernel) {
    const std::string tp = arch.per_block_transforms ? p + ".transform" : std::string("transform");
    dw = transform_kernel(dw, net.get(tp + ".m75"), net.get(tp + ".m53"), kernel);
  }
  m.dw_w = dw;
  m.dw_norm = sliced_norm(net, p + ".dw_bn", idx);

  if (stage.use_se) {
    const int max_mid = se_reduce_channels(max_hidden);
    const int mid = se_reduce_channels(hidden);
    SqueezeExcite se;
    se.reduce_w = net.get(p + ".se.reduce.weight");
    se.reduce_b = net.get(p + ".se.reduce.bias");
    se.expand_w = net.get(p + ".se.expand.weight");
    se.expand_b = net.get(p + ".se.expand.bias");
    if (mid < max_mid) {
      const auto mi = prefix_index(mid);
      se.reduce_w = ops::index_select(se.reduce_w, 0, mi);
      se.reduce_b = ops::index_select(se.reduce_b, 0, mi);
      se.expand_w = ops::index_select(se.expand_w, 1, mi);
    }
    if (!idx.empty()) {
      se.reduce_w = ops::index_select(se.reduce_w, 1, idx);
      se.expand_w = ops::index_select(se.expand_w, 0, idx);
      se.expand_b = ops::index_select(se.expand_b, 0, idx);
    }
    m.se = std::move(se);
  }

  Tensor project_w = net.get(p + ".project.weight");
  m.project_w = idx.empty() ? project_w : ops::index_select(project_w, 1, idx);
  m.project_norm = norm_of(net, p + ".project_bn");
  return m;
}

}  // namespace

Level effective_level(const Supernet& net, int s, int j, const SubnetConfig& cfg) {
  const auto& arch = net.arch();
  const auto& stage = arch.stages[static_cast<size_t>(s)];
  const auto su = static_cast<size_t>(s), ju = static_cast<size_t>(j);
  const int mask = arch.parallel_blocks ? cfg.level[su][ju] : level_bit::mobile;
  const int in = j == 0 ? arch.stage_in(s) : arch.stage_out(s);
  const int out = arch.stage_out(s);
  const int stride = j == 0 ? stage.stride : 1;
  const std::string p = level_prefix(s, j);

  Level lv;
  lv.act = stage.act;
  lv.residual = j > 0;
  if (mask & level_bit::mobile) lv.mobile = effective_mobile(net, s, j, cfg.kernel[su][ju], cfg.expand[su][ju]);
  if (mask & level_bit::pointwise) {
    PointwiseBlock pw;
    pw.w = net.get(p + ".pointwise.conv.weight");
    pw.norm = norm_of(net, p + ".pointwise.bn");
    pw.stride = stride;
    lv.pointwise = std::move(pw);
  }
  if (mask & level_bit::light) {
    LightBlock lb;
    lb.pool = stride == 2;
    if (in != out) lb.w = net.get(p + ".light.conv.weight");
    lb.norm = norm_of(net, p + ".light.bn");
    lv.light = std::move(lb);
  }
  return lv;
}

NetworkWeights effective_network(const Supernet& net, const SubnetConfig& cfg) {
  const auto& arch = net.arch();
  NetworkWeights w;
  w.dense_skips = arch.dense_skips;
  w.stem_w = net.get("stem.conv.weight");
  w.stem_norm = norm_of(net, "stem.bn");
  w.head_dw_w = net.get("head.dw.weight");
  w.head_dw_norm = norm_of(net, "head.dw_bn");
  w.head_pw_w = net.get("head.pw.weight");
  w.head_pw_norm = norm_of(net, "head.pw_bn");
  for (int s = 0; s < cfg.height; ++s) {
    StageWeights sw;
    for (int j = 0; j < cfg.depth[static_cast<size_t>(s)]; ++j) sw.levels.push_back(effective_level(net, s, j, cfg));
    w.stages.push_back(std::move(sw));
    if (arch.early_exits && s + 1 < arch.n_stages()) {
      const std::string p = "exits." + std::to_string(s);
      w.exits.push_back(ExitHead{net.get(p + ".feature.weight"), net.get(p + ".fc.weight"), net.get(p + ".fc.bias")});
    }
  }
  if (cfg.height == arch.n_stages()) {
    TailHead t;
    t.expand_w = net.get("tail.expand.weight");
    t.expand_norm = norm_of(net, "tail.bn");
    t.feature_w = net.get("tail.feature.weight");
    t.fc_w = net.get("tail.fc.weight");
    t.fc_b = net.get("tail.fc.bias");
    w.tail = std::move(t);
  }
  return w;
}

// ---------------------------------------------------------------------------

std::vector<Tensor> StandaloneNet::forward(const Tensor& x, const ExecOptions& opt) const {
  return run_network(weights_, x, opt);
}

int64_t StandaloneNet::parameter_count() { return count_trainable(weights_); }

void StandaloneNet::recalibrate_norms(const std::vector<Tensor>& batches) {
  NoGradGuard ng;
  ExecOptions opt;
  opt.mode = ops::NormMode::calibrate;
  for (size_t i = 0; i < batches.size(); ++i) {
    opt.calibration_step = static_cast<int>(i);
    run_network(weights_, batches[i], opt);
  }
}

StandaloneNet StandaloneNet::clone() const { return StandaloneNet(arch_, cfg_, materialize(weights_)); }

StandaloneNet extract_subnet(const Supernet& net, const SubnetConfig& cfg) {
  cfg.validate(net.arch());
  NoGradGuard ng;
  return StandaloneNet(net.arch(), cfg, materialize(effective_network(net, cfg)));
}

StandaloneNet standalone_skeleton(const ArchSpec& arch, const SubnetConfig& cfg) {
  Supernet tmp(arch, 0);
  return extract_subnet(tmp, cfg);
}

}  // namespace ofa::elastic
