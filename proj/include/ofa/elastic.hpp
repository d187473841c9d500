#pragma once

#include <vector>

#include "ofa/arch.hpp"
#include "ofa/network.hpp"
#include "ofa/supernet.hpp"
#include "ofa/tensor.hpp"

namespace ofa::elastic {

/// Derives a smaller depthwise kernel from the maximal 7x7 one. Target 5 is
/// the centre 5x5 crop mapped through m75 (25x25); target 3 is the centre
/// 3x3 crop of the size-5 result mapped through m53 (9x9).
Tensor transform_kernel(const Tensor& k7, const Tensor& m75, const Tensor& m53, int target);

/// Sum of |w| over every axis except `axis`.
std::vector<double> channel_l1_norms(const Tensor& weight, int axis = 0);

/// Indices of the `target_count` channels (axis 0) with the largest L1
/// norm, ties to the lower index, returned in ascending order.
std::vector<int> select_channels(const Tensor& weight, int target_count);
std::vector<int> select_top(const std::vector<double>& norms, int target_count);

/// Effective weights of one block slot under `cfg`: kernel transform plus
/// L1-ranked channel slicing. Autograd views of the shared store when grad
/// mode is on.
Level effective_level(const Supernet& net, int stage, int block, const SubnetConfig& cfg);

/// Effective weights of the whole subnet. Inactive blocks, stages and exits
/// are absent from the result.
NetworkWeights effective_network(const Supernet& net, const SubnetConfig& cfg);

/// A self-contained network with its own weights and no elastic machinery.
class StandaloneNet {
 public:
  StandaloneNet(ArchSpec arch, SubnetConfig cfg, NetworkWeights weights)
      : arch_(std::move(arch)), cfg_(std::move(cfg)), weights_(std::move(weights)) {}

  /// Accepts any input size; the config's resolution is the one it was
  /// extracted for.
  std::vector<Tensor> forward(const Tensor& x, const ExecOptions& opt = {}) const;

  const ArchSpec& arch() const { return arch_; }
  const SubnetConfig& config() const { return cfg_; }
  NetworkWeights& weights() { return weights_; }
  const NetworkWeights& weights() const { return weights_; }
  int64_t parameter_count();

  /// Replaces running statistics by the average batch statistics over
  /// `batches` (each already at the subnet's resolution).
  void recalibrate_norms(const std::vector<Tensor>& batches);

  StandaloneNet clone() const;

 private:
  ArchSpec arch_;
  SubnetConfig cfg_;
  NetworkWeights weights_;
};

StandaloneNet extract_subnet(const Supernet& net, const SubnetConfig& cfg);

/// Builds an empty-weight skeleton for (arch, cfg), used when loading
/// standalone networks from disk.
StandaloneNet standalone_skeleton(const ArchSpec& arch, const SubnetConfig& cfg);

}  // namespace ofa::elastic
