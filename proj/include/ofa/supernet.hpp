#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "ofa/arch.hpp"
#include "ofa/network.hpp"
#include "ofa/tensor.hpp"

namespace ofa {

/// Shared parameter store at maximal shapes (k=7, f=6, every block, every
/// exit) plus the machinery to run any SubnetConfig through it.
class Supernet {
 public:
  struct Param {
    Tensor tensor;
    bool trainable = true;
    bool decay = true;
  };

  Supernet(ArchSpec arch, uint64_t seed);
  Supernet(Supernet&&) noexcept = default;
  Supernet& operator=(Supernet&&) noexcept = default;

  Supernet clone() const;

  const ArchSpec& arch() const { return arch_; }
  std::map<std::string, Param>& params() { return params_; }
  const std::map<std::string, Param>& params() const { return params_; }
  bool has(const std::string& name) const { return params_.count(name) != 0; }
  /// Named lookup; reports the access to the trace hook when one is set.
  Tensor get(const std::string& name) const;

  /// Forward of `cfg`. Returns logits of every exit <= cfg.height.
  std::vector<Tensor> forward(const Tensor& x, const SubnetConfig& cfg, const ExecOptions& opt = {}) const;

  /// Receives the name of every parameter read while deriving weights.
  void set_access_trace(std::function<void(std::string_view)> fn) { access_trace_ = std::move(fn); }

  void zero_grad();
  int64_t total_parameters() const;

 private:
  Supernet() = default;
  void add(const std::string& name, Tensor t, bool trainable, bool decay);
  void add_conv(const std::string& name, Shape shape, std::mt19937_64& rng);
  void add_linear(const std::string& prefix, int out, int in, std::mt19937_64& rng);
  void add_norm(const std::string& prefix, int channels);
  void build(uint64_t seed);

  ArchSpec arch_;
  std::map<std::string, Param> params_;
  std::function<void(std::string_view)> access_trace_;
};

/// Parameter-name prefix of block slot (stage, block).
std::string level_prefix(int stage, int block);

}  // namespace ofa
