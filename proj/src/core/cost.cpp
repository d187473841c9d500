#include "ofa/cost.hpp"

namespace ofa {

namespace {

int64_t downsample(int64_t hw, int stride) { return stride == 2 ? (hw + 1) / 2 : hw; }

Cost linear_cost(int64_t in, int64_t out, bool bias) { return {in * out + (bias ? out : 0), in * out}; }

Cost norm_cost(int64_t c) { return {2 * c, 0}; }

}  // namespace

Cost conv_cost(int64_t in_c, int64_t out_c, int64_t k, int64_t groups, int64_t out_hw, bool with_norm) {
  const int64_t w = out_c * (in_c / groups) * k * k;
  Cost c{w, w * out_hw * out_hw};
  if (with_norm) c += norm_cost(out_c);
  return c;
}

Cost count_cost(const ArchSpec& arch, const SubnetConfig& cfg) {
  cfg.validate(arch);
  Cost total;
  const int64_t stem = arch.channels(arch.stem_channels);
  int64_t hw = downsample(cfg.resolution, 2);
  total += conv_cost(3, stem, 3, 1, hw, true);
  total += conv_cost(stem, stem, 3, stem, hw, true);
  total += conv_cost(stem, stem, 1, 1, hw, true);

  const int64_t feat = arch.channels(arch.feature_channels);
  for (int s = 0; s < cfg.height; ++s) {
    const auto& st = arch.stages[static_cast<size_t>(s)];
    const int64_t out = arch.stage_out(s);
    for (int j = 0; j < cfg.depth[static_cast<size_t>(s)]; ++j) {
      const auto su = static_cast<size_t>(s), ju = static_cast<size_t>(j);
      const int64_t in = j == 0 ? arch.stage_in(s) : out;
      const int stride = j == 0 ? st.stride : 1;
      const int64_t in_hw = hw;
      const int64_t out_hw = downsample(hw, stride);
      const int mask = arch.parallel_blocks ? cfg.level[su][ju] : level_bit::mobile;
      if (mask & level_bit::mobile) {
        const int64_t hidden = arch.hidden_channels(s, cfg.expand[su][ju]);
        const int64_t k = cfg.kernel[su][ju];
        total += conv_cost(in, hidden, 1, 1, in_hw, true);
        total += conv_cost(hidden, hidden, k, hidden, out_hw, true);
        if (st.use_se) {
          const int64_t mid = se_reduce_channels(static_cast<int>(hidden));
          total += linear_cost(hidden, mid, true);
          total += linear_cost(mid, hidden, true);
        }
        total += conv_cost(hidden, out, 1, 1, out_hw, true);
      }
      if (mask & level_bit::pointwise) total += conv_cost(in, out, 1, 1, out_hw, true);
      if (mask & level_bit::light) {
        if (in != out) total += conv_cost(in, out, 1, 1, out_hw, false);
        total += norm_cost(out);
      }
      hw = out_hw;
    }
    if (arch.early_exits && s + 1 < arch.n_stages()) {
      total += conv_cost(out, feat, 1, 1, 1, false);
      total += linear_cost(feat, arch.n_classes, true);
    }
  }
  if (cfg.height == arch.n_stages()) {
    const int64_t last = arch.stage_out(arch.n_stages() - 1);
    const int64_t tail = arch.channels(arch.tail_channels);
    total += conv_cost(last, tail, 1, 1, hw, true);
    total += conv_cost(tail, feat, 1, 1, 1, false);
    total += linear_cost(feat, arch.n_classes, true);
  }
  return total;
}

}  // namespace ofa
