#pragma once

#include <functional>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "ofa/arch.hpp"
#include "ofa/supernet.hpp"
#include "ofa/tensor.hpp"

namespace ofa {

/// Values each elastic dimension may take in one phase, ascending. Height and
/// depth are expressed in the architecture's own units (see unlocked_sets).
struct UnlockedSets {
  std::vector<int> resolution;
  std::vector<int> kernel;
  std::vector<int> level;
  std::vector<int> height;
  std::vector<int> depth;
  std::vector<int> width;

  bool operator==(const UnlockedSets&) const = default;
};

struct PhaseSpec {
  std::string name;
  double lr = 0.0;
  int epochs = 0;
  int warmup_epochs = 0;
  int n_subnets = 0;  // 0 means "maximal config only"
  UnlockedSets unlocked;
};

/// Published per-phase hyperparameters, keyed by phase name.
PhaseSpec table_phase(std::string_view name);
const std::vector<std::string>& all_phase_names();

/// Phase order for `arch`: Full, EKS, [EL1, EL2], [EH1..EH4], ED1, ED2, EW1, EW2.
std::vector<std::string> phase_names(const ArchSpec& arch);
std::vector<PhaseSpec> phase_sequence(const ArchSpec& arch);

/// Unlocked value sets at `phase`. The canonical schedules (height over 5
/// stages, depth over 4 blocks) are mapped onto smaller architectures by
/// keeping the same distance from the maximum.
UnlockedSets unlocked_sets(std::string_view phase, const ArchSpec& arch);

/// Every config of the phase with one global value per dimension, ordered
/// lexicographically by (resolution, kernel, level, height, depth, width).
std::vector<SubnetConfig> enumerate_space(std::string_view phase, const ArchSpec& arch);
size_t space_size(const UnlockedSets& sets);

/// Learning rate at iteration `t` of a phase of `total` iterations, `warmup`
/// of them spent ramping linearly from lr/100 to lr before cosine annealing
/// to 0.
double lr_at(double lr, int64_t t, int64_t total, int64_t warmup);

int sample_resolution(const UnlockedSets& sets, std::mt19937_64& rng);
/// Uniform draw over the phase space at resolution `r`. With `per_slot`,
/// kernel/width/level are drawn per block and depth per stage.
SubnetConfig sample_config(const ArchSpec& arch, const PhaseSpec& phase, int r, std::mt19937_64& rng,
                           bool per_slot = false);

/// SGD with momentum; weight decay is added to the gradient of parameters
/// flagged for decay. Parameters without a gradient this step are untouched.
class Sgd {
 public:
  Sgd(double momentum = 0.9, double weight_decay = 3e-5) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(Supernet& net, double lr);
  void reset() { velocity_.clear(); }

  std::map<std::string, std::vector<float>>& velocity() { return velocity_; }
  const std::map<std::string, std::vector<float>>& velocity() const { return velocity_; }
  double momentum() const { return momentum_; }
  double weight_decay() const { return weight_decay_; }

 private:
  double momentum_;
  double weight_decay_;
  std::map<std::string, std::vector<float>> velocity_;
};

/// Loss of one sampled subnet given its exit logits.
using SubnetLoss = std::function<Tensor(const std::vector<Tensor>& logits, const SubnetConfig& cfg)>;

struct StepStats {
  double loss = 0.0;  // mean over sampled subnets
  double lr = 0.0;
  std::vector<SubnetConfig> configs;
};

struct StepOptions {
  bool per_slot_sampling = false;
  float bn_momentum = 0.1f;
};

/// One EPS iteration on a batch already resized to its sampled resolution:
/// draws max(1, n_subnets) configs, accumulates every subnet's gradients and
/// applies exactly one optimizer update at `lr`.
StepStats train_step(Supernet& net, const Tensor& x, const PhaseSpec& phase,
                     Sgd& opt, double lr, std::mt19937_64& rng, const SubnetLoss& loss,
                     const StepOptions& options = {});

}  // namespace ofa
