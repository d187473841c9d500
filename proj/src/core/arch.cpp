#include "ofa/arch.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ofa/error.hpp"

namespace ofa {

std::string_view activation_name(Activation a) { return a == Activation::relu ? "relu" : "hswish"; }

Activation parse_activation(std::string_view s) {
  if (s == "relu") return Activation::relu;
  if (s == "hswish") return Activation::hswish;
  throw ConfigError("unknown activation '" + std::string(s) + "'");
}

int round_up_multiple(double v, int divisor) {
  // Tolerate representation error such as 16 * 1.0000000001.
  const double q = std::ceil(v / divisor - 1e-9);
  return std::max(divisor, static_cast<int>(q) * divisor);
}

int se_reduce_channels(int channels) { return round_up_multiple(channels / 4.0, 8); }

namespace {
struct VariantFlags {
  bool ee, d, p;
};

VariantFlags parse_variant(std::string_view v) {
  std::string s(v);
  const std::string suffix = "_OFA_MBV3";
  if (s.size() > suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0)
    s = s.substr(0, s.size() - suffix.size());
  if (s == "OFA_MBV3" || s == "OFA_MBV3 (baseline)" || s == "baseline") s = "SE_B";
  static const char* names[] = {"SE_B", "SE_D", "SE_P", "SE_DP", "EE_B", "EE_D", "EE_P", "EE_DP"};
  for (int i = 0; i < 8; ++i)
    if (s == names[i]) {
      const std::string_view mod = std::string_view(names[i]).substr(3);
      return {i >= 4, mod.find('D') != std::string_view::npos, mod.find('P') != std::string_view::npos};
    }
  throw ConfigError("unknown network variant '" + std::string(v) +
                    "' (expected one of SE_B, SE_D, SE_P, SE_DP, EE_B, EE_D, EE_P, EE_DP)");
}
}  // namespace

bool is_valid_variant(std::string_view variant) {
  try {
    parse_variant(variant);
    return true;
  } catch (const ConfigError&) {
    return false;
  }
}

std::vector<std::string> all_variants() {
  return {"SE_B", "SE_D", "SE_P", "SE_DP", "EE_B", "EE_D", "EE_P", "EE_DP"};
}

void ArchSpec::set_variant(std::string_view v) {
  const auto f = parse_variant(v);
  early_exits = f.ee;
  dense_skips = f.d;
  parallel_blocks = f.p;
}

ArchSpec ArchSpec::ofa_mbv3(std::string_view variant, double width_multiplier, int n_classes) {
  ArchSpec a;
  a.set_variant(variant);
  a.width_multiplier = width_multiplier;
  a.n_classes = n_classes;
  a.stem_channels = 16;
  a.stages = {
      {24, 2, Activation::relu, false, 4},    {40, 2, Activation::relu, true, 4},
      {80, 2, Activation::hswish, false, 4},  {112, 1, Activation::hswish, true, 4},
      {160, 2, Activation::hswish, true, 4},
  };
  a.tail_channels = 960;
  a.feature_channels = 1280;
  a.validate();
  return a;
}

ArchSpec ArchSpec::miniature(std::string_view variant, int n_classes, int blocks_per_stage) {
  ArchSpec a;
  a.set_variant(variant);
  a.n_classes = n_classes;
  a.stem_channels = 8;
  a.stages = {
      {8, 2, Activation::relu, false, blocks_per_stage},
      {8, 2, Activation::hswish, true, blocks_per_stage},
  };
  a.tail_channels = 16;
  a.feature_channels = 16;
  a.validate();
  return a;
}

std::string ArchSpec::variant() const {
  std::string s = early_exits ? "EE_" : "SE_";
  if (!dense_skips && !parallel_blocks) return s + "B";
  if (dense_skips) s += "D";
  if (parallel_blocks) s += "P";
  return s;
}

std::string ArchSpec::network_name() const {
  const auto v = variant();
  if (v == "SE_B") return "OFA_MBV3 (baseline)";
  return v + "_OFA_MBV3";
}

int ArchSpec::channels(int unscaled) const { return round_up_multiple(unscaled * width_multiplier, 8); }

void ArchSpec::validate() const {
  if (n_classes < 2) throw ConfigError("n_classes must be >= 2");
  if (!(width_multiplier > 0.0)) throw ConfigError("width_multiplier must be positive");
  if (stages.empty()) throw ConfigError("at least one stage is required");
  if (max_kernel != 7) throw ConfigError("max_kernel must be 7");
  if (max_expand != 6) throw ConfigError("max_expand must be 6");
  for (const auto& s : stages) {
    if (s.out_channels <= 0) throw ConfigError("stage out_channels must be positive");
    if (s.stride != 1 && s.stride != 2) throw ConfigError("stage stride must be 1 or 2");
    if (s.n_blocks < 1 || s.n_blocks > 4) throw ConfigError("stage n_blocks must be in 1..4");
  }
  if (stem_channels <= 0 || tail_channels <= 0 || feature_channels <= 0)
    throw ConfigError("stem/tail/feature channels must be positive");
}

// ---------------------------------------------------------------------------

SubnetConfig SubnetConfig::maximal(const ArchSpec& arch, int resolution) {
  SubnetConfig c;
  c.resolution = resolution;
  for (const auto& s : arch.stages) {
    c.kernel.emplace_back(static_cast<size_t>(s.n_blocks), arch.max_kernel);
    c.expand.emplace_back(static_cast<size_t>(s.n_blocks), arch.max_expand);
    c.level.emplace_back(static_cast<size_t>(s.n_blocks), level_bit::all);
    c.depth.push_back(s.n_blocks);
  }
  c.height = arch.n_stages();
  return c;
}

SubnetConfig SubnetConfig::uniform(const ArchSpec& arch, int resolution, int kernel, int expand, int depth,
                                   int level, int height) {
  SubnetConfig c = maximal(arch, resolution);
  for (size_t s = 0; s < c.kernel.size(); ++s) {
    std::fill(c.kernel[s].begin(), c.kernel[s].end(), kernel);
    std::fill(c.expand[s].begin(), c.expand[s].end(), expand);
    std::fill(c.level[s].begin(), c.level[s].end(), level);
    c.depth[s] = depth;
  }
  c.height = height;
  return c;
}

bool SubnetConfig::is_active(int stage, int block) const {
  return stage < height && block < depth[static_cast<size_t>(stage)];
}

void SubnetConfig::validate(const ArchSpec& arch) const {
  const auto n = static_cast<size_t>(arch.n_stages());
  if (std::find(std::begin(kResolutions), std::end(kResolutions), resolution) == std::end(kResolutions))
    throw ConfigError("resolution " + std::to_string(resolution) + " not in {48,56,64}");
  if (kernel.size() != n || expand.size() != n || level.size() != n || depth.size() != n)
    throw ConfigError("subnet config has the wrong number of stages");
  if (height < 1 || height > arch.n_stages())
    throw ConfigError("height " + std::to_string(height) + " out of range");
  if (!arch.early_exits && height != arch.n_stages())
    throw ConfigError("height must be " + std::to_string(arch.n_stages()) + " for single-exit networks");
  for (size_t s = 0; s < n; ++s) {
    const int nb = arch.stages[s].n_blocks;
    if (static_cast<int>(kernel[s].size()) != nb || static_cast<int>(expand[s].size()) != nb ||
        static_cast<int>(level[s].size()) != nb)
      throw ConfigError("stage " + std::to_string(s) + " has the wrong number of block entries");
    if (depth[s] < 1 || depth[s] > nb)
      throw ConfigError("depth " + std::to_string(depth[s]) + " out of range for stage " + std::to_string(s));
    for (int b = 0; b < nb; ++b) {
      if (!is_active(static_cast<int>(s), b)) continue;
      const int k = kernel[s][static_cast<size_t>(b)];
      const int f = expand[s][static_cast<size_t>(b)];
      const int m = level[s][static_cast<size_t>(b)];
      if (std::find(std::begin(kKernelSizes), std::end(kKernelSizes), k) == std::end(kKernelSizes))
        throw ConfigError("kernel size " + std::to_string(k) + " not in {3,5,7}");
      if (std::find(std::begin(kExpandRatios), std::end(kExpandRatios), f) == std::end(kExpandRatios))
        throw ConfigError("expand ratio " + std::to_string(f) + " not in {3,4,6}");
      if (m < 1 || m > 7) throw ConfigError("level mask " + std::to_string(m) + " not in 1..7");
      if (!arch.parallel_blocks && m != level_bit::all)
        throw ConfigError("level mask must be 7 for networks without parallel blocks");
    }
  }
}

std::string SubnetConfig::key() const {
  auto uniform_of = [&](const std::vector<std::vector<int>>& v, int& out) {
    int val = -1;
    for (size_t s = 0; s < v.size() && static_cast<int>(s) < height; ++s)
      for (int b = 0; b < depth[s]; ++b) {
        const int x = v[s][static_cast<size_t>(b)];
        if (val == -1) val = x;
        if (val != x) return false;
      }
    out = val;
    return true;
  };
  int k, f, l;
  const bool same_depth = std::all_of(depth.begin(), depth.end(), [&](int d) { return d == depth[0]; });
  std::ostringstream os;
  if (uniform_of(kernel, k) && uniform_of(expand, f) && uniform_of(level, l) && same_depth) {
    os << "r" << resolution << "-k" << k << "-e" << f << "-d" << depth[0] << "-l" << l << "-h" << height;
  } else {
    nlohmann::json j;
    to_json(j, *this);
    os << j.dump();
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// JSON

void to_json(nlohmann::json& j, const ArchSpec& a) {
  j = nlohmann::json{{"arch_version", ArchSpec::kVersion},
                     {"variant", a.variant()},
                     {"width_multiplier", a.width_multiplier},
                     {"n_classes", a.n_classes},
                     {"stem_channels", a.stem_channels},
                     {"tail_channels", a.tail_channels},
                     {"feature_channels", a.feature_channels},
                     {"per_block_transforms", a.per_block_transforms}};
  auto stages = nlohmann::json::array();
  for (const auto& s : a.stages)
    stages.push_back({{"out_channels", s.out_channels},
                      {"stride", s.stride},
                      {"activation", activation_name(s.act)},
                      {"use_se", s.use_se},
                      {"n_blocks", s.n_blocks}});
  j["stages"] = stages;
}

void from_json(const nlohmann::json& j, ArchSpec& a) {
  if (!j.is_object()) throw ConfigError("arch: expected an object");
  const int version = j.value("arch_version", ArchSpec::kVersion);
  if (version != ArchSpec::kVersion)
    throw VersionError("arch_version " + std::to_string(version) + " is not supported (expected 1)");
  const std::string variant = j.value("variant", std::string("SE_B"));
  const double wm = j.value("width_multiplier", 1.0);
  const int n_classes = j.value("n_classes", 200);
  const std::string preset = j.value("preset", std::string("ofa_mbv3"));
  if (preset == "miniature")
    a = ArchSpec::miniature(variant, n_classes, j.value("blocks_per_stage", 2));
  else if (preset == "ofa_mbv3")
    a = ArchSpec::ofa_mbv3(variant, wm, n_classes);
  else
    throw ConfigError("unknown arch preset '" + preset + "'");
  a.width_multiplier = wm;
  a.stem_channels = j.value("stem_channels", a.stem_channels);
  a.tail_channels = j.value("tail_channels", a.tail_channels);
  a.feature_channels = j.value("feature_channels", a.feature_channels);
  a.per_block_transforms = j.value("per_block_transforms", false);
  if (j.contains("stages")) {
    a.stages.clear();
    for (const auto& s : j.at("stages")) {
      StageSpec st;
      st.out_channels = s.at("out_channels").get<int>();
      st.stride = s.value("stride", 1);
      st.act = parse_activation(s.value("activation", std::string("relu")));
      st.use_se = s.value("use_se", false);
      st.n_blocks = s.value("n_blocks", 4);
      a.stages.push_back(st);
    }
  }
  a.validate();
}

void to_json(nlohmann::json& j, const SubnetConfig& c) {
  j = nlohmann::json{{"resolution", c.resolution}, {"kernel", c.kernel}, {"expand", c.expand},
                     {"level", c.level},           {"depth", c.depth},   {"height", c.height}};
}

namespace {
std::vector<std::vector<int>> per_block(const nlohmann::json& j, const char* key, const ArchSpec& arch,
                                        const std::vector<std::vector<int>>& fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (v.is_number_integer()) {
    auto out = fallback;
    for (auto& row : out) std::fill(row.begin(), row.end(), v.get<int>());
    return out;
  }
  auto out = v.get<std::vector<std::vector<int>>>();
  if (out.size() != static_cast<size_t>(arch.n_stages()))
    throw ConfigError(std::string("subnet '") + key + "' must have one row per stage");
  return out;
}
}  // namespace

SubnetConfig subnet_from_json(const nlohmann::json& j, const ArchSpec& arch) {
  if (!j.is_object()) throw ConfigError("subnet config: expected an object");
  SubnetConfig c = SubnetConfig::maximal(arch, j.value("resolution", 64));
  c.kernel = per_block(j, "kernel", arch, c.kernel);
  c.expand = per_block(j, "expand", arch, c.expand);
  c.level = per_block(j, "level", arch, c.level);
  if (j.contains("depth")) {
    const auto& d = j.at("depth");
    if (d.is_number_integer())
      std::fill(c.depth.begin(), c.depth.end(), d.get<int>());
    else
      c.depth = d.get<std::vector<int>>();
  }
  c.height = j.value("height", c.height);
  c.validate(arch);
  return c;
}

}  // namespace ofa
