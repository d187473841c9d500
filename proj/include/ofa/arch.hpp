#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace ofa {

enum class Activation { relu, hswish };

std::string_view activation_name(Activation a);
Activation parse_activation(std::string_view s);

struct StageSpec {
  int out_channels = 0;  // before width scaling
  int stride = 1;
  Activation act = Activation::relu;
  bool use_se = false;
  int n_blocks = 4;

  bool operator==(const StageSpec&) const = default;
};

/// Bit order of a parallel level's activation mask.
namespace level_bit {
inline constexpr int mobile = 1;     // IRB / IB
inline constexpr int pointwise = 2;  // 1x1 conv + BN + act
inline constexpr int light = 4;      // [pool] [1x1] BN + act
inline constexpr int all = 7;
}  // namespace level_bit

/// Static description of one supernet variant. Channel counts are stored
/// unscaled; `channels()` applies the width multiplier.
struct ArchSpec {
  static constexpr int kVersion = 1;

  double width_multiplier = 1.0;
  bool dense_skips = false;
  bool parallel_blocks = false;
  bool early_exits = false;
  int n_classes = 200;

  int stem_channels = 16;
  std::vector<StageSpec> stages;
  int tail_channels = 960;
  int feature_channels = 1280;
  int max_kernel = 7;
  int max_expand = 6;
  /// One kernel-transform matrix pair per block instead of one per supernet.
  bool per_block_transforms = false;

  /// Published MobileNetV3 macro-architecture for a variant such as "EE_DP".
  static ArchSpec ofa_mbv3(std::string_view variant, double width_multiplier = 1.0, int n_classes = 200);
  /// Two stages of two blocks at 8 channels; used by the fast test suites.
  static ArchSpec miniature(std::string_view variant, int n_classes = 4, int blocks_per_stage = 2);

  /// "SE_B", "EE_DP", ...
  std::string variant() const;
  /// "OFA_MBV3 (baseline)", "EE_D_OFA_MBV3", ...
  std::string network_name() const;
  void set_variant(std::string_view variant);

  /// Scales by the width multiplier and rounds up to a multiple of 8.
  int channels(int unscaled) const;
  int stage_out(int s) const { return channels(stages[static_cast<size_t>(s)].out_channels); }
  int stage_in(int s) const { return s == 0 ? channels(stem_channels) : stage_out(s - 1); }
  int n_stages() const { return static_cast<int>(stages.size()); }
  int n_exits() const { return early_exits ? n_stages() : 1; }
  int hidden_channels(int s, int expand) const { return stage_out(s) * expand; }

  void validate() const;
  bool operator==(const ArchSpec&) const = default;
};

/// Rounds v up to the next multiple of `divisor`.
int round_up_multiple(double v, int divisor = 8);
/// Width of the squeeze-excitation bottleneck for `channels` inputs.
int se_reduce_channels(int channels);

bool is_valid_variant(std::string_view variant);
std::vector<std::string> all_variants();

/// One point of the elastic space. Per-block vectors are indexed
/// [stage][block]. Entries of inactive blocks are carried but ignored.
struct SubnetConfig {
  int resolution = 64;
  std::vector<std::vector<int>> kernel;
  std::vector<std::vector<int>> expand;
  std::vector<std::vector<int>> level;
  std::vector<int> depth;
  int height = 0;  // number of executed stages; exits 1..height are produced

  static SubnetConfig maximal(const ArchSpec& arch, int resolution = 64);
  static SubnetConfig uniform(const ArchSpec& arch, int resolution, int kernel, int expand, int depth,
                              int level, int height);

  void validate(const ArchSpec& arch) const;
  bool is_active(int stage, int block) const;
  /// Compact human-readable key, e.g. "r64-k7-e6-d4-l7-h5" for uniform configs.
  std::string key() const;

  bool operator==(const SubnetConfig&) const = default;
};

inline constexpr int kResolutions[] = {48, 56, 64};
inline constexpr int kKernelSizes[] = {3, 5, 7};
inline constexpr int kExpandRatios[] = {3, 4, 6};

void to_json(nlohmann::json& j, const ArchSpec& a);
void from_json(const nlohmann::json& j, ArchSpec& a);
void to_json(nlohmann::json& j, const SubnetConfig& c);
/// Accepts either full per-block arrays or scalars broadcast over all slots;
/// missing fields default to the maximal value for `arch`.
SubnetConfig subnet_from_json(const nlohmann::json& j, const ArchSpec& arch);

}  // namespace ofa
