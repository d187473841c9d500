#pragma once

#include <cstdint>

#include "ofa/arch.hpp"

namespace ofa {

struct Cost {
  int64_t params = 0;
  int64_t macs = 0;  // per image at the config's resolution

  Cost& operator+=(const Cost& o) {
    params += o.params;
    macs += o.macs;
    return *this;
  }
  bool operator==(const Cost&) const = default;
};

/// Closed-form parameter and multiply-accumulate count of the standalone
/// subnet `cfg`. BatchNorm contributes its scale and shift as parameters and
/// nothing to MACs; activations, pooling and additions are free.
Cost count_cost(const ArchSpec& arch, const SubnetConfig& cfg);

/// Cost of a single convolution producing an `out_hw` x `out_hw` map.
Cost conv_cost(int64_t in_c, int64_t out_c, int64_t k, int64_t groups, int64_t out_hw, bool with_norm);

}  // namespace ofa
