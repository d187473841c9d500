#include "ofa/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ofa/error.hpp"

namespace ofa {

namespace {

struct Row {
  const char* name;
  double lr;
  int epochs, warmup, subnets;
};

constexpr Row kTable[] = {
    {"Full", 1.0e-3, 180, 0, 0}, {"EKS", 3.0e-2, 120, 5, 1}, {"EL1", 2.5e-3, 25, 0, 2},
    {"EL2", 7.5e-3, 120, 5, 2},  {"EH1", 2.5e-3, 25, 0, 2},  {"EH2", 7.5e-3, 60, 5, 2},
    {"EH3", 1.0e-2, 90, 5, 2},   {"EH4", 3.0e-2, 120, 5, 2}, {"ED1", 2.5e-3, 25, 0, 2},
    {"ED2", 7.5e-3, 120, 5, 2},  {"EW1", 2.5e-3, 25, 0, 4},  {"EW2", 7.5e-3, 120, 5, 4},
};

int phase_rank(std::string_view name) {
  const auto& names = all_phase_names();
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw ConfigError("unknown phase '" + std::string(name) + "'");
  return static_cast<int>(it - names.begin());
}

// Canonical value set in effect once phases up to `rank` have started.
std::vector<int> staged(int rank, std::initializer_list<std::pair<const char*, std::vector<int>>> steps,
                        std::vector<int> initial) {
  std::vector<int> cur = std::move(initial);
  for (const auto& [phase, values] : steps)
    if (rank >= phase_rank(phase)) cur = values;
  std::sort(cur.begin(), cur.end());
  return cur;
}

// Keeps the distance from the canonical maximum; drops values below 1.
std::vector<int> remap(const std::vector<int>& canonical, int canonical_max, int actual_max) {
  std::vector<int> out;
  for (int v : canonical) {
    const int a = actual_max - (canonical_max - v);
    if (a >= 1) out.push_back(a);
  }
  return out;
}

int max_blocks(const ArchSpec& arch) {
  int m = 1;
  for (const auto& s : arch.stages) m = std::max(m, s.n_blocks);
  return m;
}

template <class T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
  if (v.empty()) throw Error(ErrorKind::internal, "empty sampling set");
  std::uniform_int_distribution<size_t> d(0, v.size() - 1);
  return v[d(rng)];
}

}  // namespace

const std::vector<std::string>& all_phase_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& r : kTable) n.emplace_back(r.name);
    return n;
  }();
  return names;
}

PhaseSpec table_phase(std::string_view name) {
  for (const auto& r : kTable)
    if (name == r.name) {
      PhaseSpec p;
      p.name = r.name;
      p.lr = r.lr;
      p.epochs = r.epochs;
      p.warmup_epochs = r.warmup;
      p.n_subnets = r.subnets;
      return p;
    }
  throw ConfigError("unknown phase '" + std::string(name) + "'");
}

std::vector<std::string> phase_names(const ArchSpec& arch) {
  std::vector<std::string> out{"Full", "EKS"};
  if (arch.parallel_blocks) out.insert(out.end(), {"EL1", "EL2"});
  if (arch.early_exits) out.insert(out.end(), {"EH1", "EH2", "EH3", "EH4"});
  out.insert(out.end(), {"ED1", "ED2", "EW1", "EW2"});
  return out;
}

std::vector<PhaseSpec> phase_sequence(const ArchSpec& arch) {
  std::vector<PhaseSpec> out;
  for (const auto& n : phase_names(arch)) {
    PhaseSpec p = table_phase(n);
    p.unlocked = unlocked_sets(n, arch);
    out.push_back(std::move(p));
  }
  return out;
}

UnlockedSets unlocked_sets(std::string_view phase, const ArchSpec& arch) {
  const auto names = phase_names(arch);
  if (std::find(names.begin(), names.end(), phase) == names.end())
    throw ConfigError("phase '" + std::string(phase) + "' is not part of the " + arch.network_name() + " schedule");
  const int rank = phase_rank(phase);

  UnlockedSets u;
  u.resolution.assign(std::begin(kResolutions), std::end(kResolutions));
  u.kernel = staged(rank, {{"EKS", {3, 5, 7}}}, {7});
  u.level = arch.parallel_blocks ? staged(rank, {{"EL1", {7, 3, 5, 6}}, {"EL2", {7, 3, 5, 6, 1, 2, 4}}}, {7})
                                 : std::vector<int>{level_bit::all};
  if (arch.early_exits) {
    const auto h = staged(rank, {{"EH1", {4, 5}}, {"EH2", {3, 4, 5}}, {"EH3", {2, 3, 4, 5}}, {"EH4", {1, 2, 3, 4, 5}}},
                          {5});
    u.height = remap(h, 5, arch.n_stages());
  } else {
    u.height = {arch.n_stages()};
  }
  u.depth = remap(staged(rank, {{"ED1", {3, 4}}, {"ED2", {2, 3, 4}}}, {4}), 4, max_blocks(arch));
  u.width = staged(rank, {{"EW1", {4, 6}}, {"EW2", {3, 4, 6}}}, {6});
  return u;
}

size_t space_size(const UnlockedSets& s) {
  return s.resolution.size() * s.kernel.size() * s.level.size() * s.height.size() * s.depth.size() *
         s.width.size();
}

namespace {

SubnetConfig make_config(const ArchSpec& arch, int r, int k, int level, int height, int depth, int width) {
  SubnetConfig c = SubnetConfig::uniform(arch, r, k, width, depth, level, height);
  const int nb = max_blocks(arch);
  for (size_t s = 0; s < c.depth.size(); ++s)
    c.depth[s] = std::max(1, depth - (nb - arch.stages[s].n_blocks));
  return c;
}

}  // namespace

std::vector<SubnetConfig> enumerate_space(std::string_view phase, const ArchSpec& arch) {
  const UnlockedSets u = unlocked_sets(phase, arch);
  std::vector<SubnetConfig> out;
  out.reserve(space_size(u));
  for (int r : u.resolution)
    for (int k : u.kernel)
      for (int l : u.level)
        for (int h : u.height)
          for (int d : u.depth)
            for (int w : u.width) out.push_back(make_config(arch, r, k, l, h, d, w));
  return out;
}

double lr_at(double lr, int64_t t, int64_t total, int64_t warmup) {
  if (total <= 0) return lr;
  warmup = std::clamp<int64_t>(warmup, 0, total);
  if (t < warmup) {
    const double start = lr / 100.0;
    return start + (lr - start) * static_cast<double>(t) / static_cast<double>(warmup);
  }
  const int64_t span = total - warmup;
  const double progress = span > 0 ? static_cast<double>(std::min(t - warmup, span)) / static_cast<double>(span) : 1.0;
  return 0.5 * lr * (1.0 + std::cos(std::numbers::pi * progress));
}

int sample_resolution(const UnlockedSets& sets, std::mt19937_64& rng) { return pick(sets.resolution, rng); }

SubnetConfig sample_config(const ArchSpec& arch, const PhaseSpec& phase, int r, std::mt19937_64& rng,
                           bool per_slot) {
  const auto& u = phase.unlocked;
  if (phase.n_subnets == 0) return SubnetConfig::maximal(arch, r);
  if (!per_slot) {
    const int k = pick(u.kernel, rng);
    const int l = pick(u.level, rng);
    const int h = pick(u.height, rng);
    const int d = pick(u.depth, rng);
    const int w = pick(u.width, rng);
    return make_config(arch, r, k, l, h, d, w);
  }
  SubnetConfig c = SubnetConfig::maximal(arch, r);
  c.height = pick(u.height, rng);
  const int nb = max_blocks(arch);
  for (size_t s = 0; s < c.depth.size(); ++s) {
    c.depth[s] = std::max(1, pick(u.depth, rng) - (nb - arch.stages[s].n_blocks));
    for (size_t b = 0; b < c.kernel[s].size(); ++b) {
      c.kernel[s][b] = pick(u.kernel, rng);
      c.expand[s][b] = pick(u.width, rng);
      c.level[s][b] = pick(u.level, rng);
    }
  }
  return c;
}

void Sgd::step(Supernet& net, double lr) {
  const float mu = static_cast<float>(momentum_);
  const float wd = static_cast<float>(weight_decay_);
  const float a = static_cast<float>(lr);
  for (auto& [name, p] : net.params()) {
    if (!p.trainable || !p.tensor.has_grad()) continue;
    auto w = p.tensor.data();
    auto g = p.tensor.grad();
    auto& v = velocity_[name];
    const bool fresh = v.empty();
    if (fresh) v.assign(w.size(), 0.0f);
    const float decay = p.decay ? wd : 0.0f;
    for (size_t i = 0; i < w.size(); ++i) {
      const float d = g[i] + decay * w[i];
      v[i] = fresh ? d : mu * v[i] + d;
      w[i] -= a * v[i];
    }
  }
}

StepStats train_step(Supernet& net, const Tensor& x, const PhaseSpec& phase,
                     Sgd& opt, double lr, std::mt19937_64& rng, const SubnetLoss& loss,
                     const StepOptions& options) {
  const int r = static_cast<int>(x.dim(2));
  const int n = std::max(1, phase.n_subnets);
  StepStats stats;
  stats.lr = lr;
  net.zero_grad();
  ExecOptions exec;
  exec.mode = ops::NormMode::train;
  exec.bn_momentum = options.bn_momentum;
  for (int i = 0; i < n; ++i) {
    SubnetConfig cfg = sample_config(net.arch(), phase, r, rng, options.per_slot_sampling);
    const auto logits = net.forward(x, cfg, exec);
    Tensor l = loss(logits, cfg);
    l.backward();
    stats.loss += l.item();
    stats.configs.push_back(std::move(cfg));
  }
  stats.loss /= n;
  opt.step(net, lr);
  net.zero_grad();
  return stats;
}

}  // namespace ofa
