#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ofa/arch.hpp"
#include "ofa/data.hpp"
#include "ofa/distill.hpp"
#include "ofa/report.hpp"
#include "ofa/scheduler.hpp"
#include "ofa/supernet.hpp"

namespace ofa {

struct ArchChoice {
  std::string preset = "ofa_mbv3";  // ofa_mbv3 | miniature
  std::string variant = "SE_B";
  double width_multiplier = 1.0;
  int n_classes = 8;
  int blocks_per_stage = 2;  // miniature only

  ArchSpec build() const;
};

/// Missing fields keep the ArchChoice defaults; unknown keys are rejected.
ArchChoice arch_choice_from_json(const nlohmann::json& j);
void to_json(nlohmann::json& j, const ArchChoice& a);

struct PhaseOverride {
  std::optional<double> lr;
  std::optional<int> epochs;
  std::optional<int> warmup_epochs;
  std::optional<int> n_subnets;
};

struct TrainingOptions {
  int batch_size = 25;
  double epoch_scale = 1.0 / 30.0;
  std::map<std::string, PhaseOverride> phase_overrides;
  bool per_slot_sampling = false;
  float bn_momentum = 0.1f;
  std::string stop_after;  // phase name; the run checkpoints it and returns
};

struct DistillOptions {
  distill::TeacherKind teacher = distill::TeacherKind::progressive;
  distill::KdOptions kd;
  distill::WeightScheme exit_weights = distill::WeightScheme::desc;
};

struct EvalOptions {
  bool ensemble_exits = false;     // aep_predict over exits 1..N instead of exit N
  int bn_calibration_batches = 0;  // recalibrate extracted subnets on this many train batches
  int batch_size = 100;
};

struct RunConfig {
  uint64_t seed = 0;
  std::string preset;
  ArchChoice arch;
  data::DatasetSpec dataset;
  TrainingOptions training;
  DistillOptions distill;
  EvalOptions eval;
  std::string output_dir;

  void validate() const;
};

/// "desk": 8-class synthetic, SE_B, 1/30 of the phase epochs. "reference": Tiny
/// ImageNet (root must be set), 200 classes, batch 200, unscaled epochs.
RunConfig preset_config(std::string_view name);

void to_json(nlohmann::json& j, const RunConfig& c);
/// Missing fields take the values of `preset` (if named) or the defaults;
/// `seed` is required; unknown keys are rejected.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// Phase table of the run: overrides applied, then epochs scaled as
/// max(1, round(e * s)) and warmup as min(round(w * s), epochs - 1).
std::vector<PhaseSpec> run_phases(const RunConfig& cfg, const ArchSpec& arch);

/// Test-set accuracy of one config. Inference-mode statistics, or batch
/// statistics recalibrated on `calibration` when eval.bn_calibration_batches > 0.
double evaluate_config(const Supernet& net, const SubnetConfig& cfg, const data::Dataset& test,
                       const data::Normalization& norm, const EvalOptions& eval,
                       distill::WeightScheme scheme = distill::WeightScheme::desc,
                       const data::Dataset* calibration = nullptr);

/// Accuracy of every config of enumerate_space(phase), with params/MACs.
PhaseReport evaluate_sweep(const Supernet& net, std::string_view phase, const data::Dataset& test,
                           const data::Normalization& norm, const EvalOptions& eval = {},
                           distill::WeightScheme scheme = distill::WeightScheme::desc,
                           const data::Dataset* calibration = nullptr);

struct RunHooks {
  std::function<void(const std::string& phase, int64_t iter, int64_t total, double loss, double lr)> on_step;
  std::function<void(const PhaseReport&)> on_phase;
  std::function<void(const std::string&)> log;
};

struct RunResult {
  Supernet net;
  RunReport report;
  bool completed = false;  // false when training.stop_after cut the run short
  std::filesystem::path last_checkpoint;
};

/// Runs the phase sequence, evaluating and checkpointing after every phase
/// into <output_dir>/checkpoints. With `resume`, continues from that run
/// checkpoint; the continuation is bit-identical to an uninterrupted run.
RunResult run_eps(const RunConfig& cfg, const RunHooks& hooks = {},
                  const std::optional<std::filesystem::path>& resume = std::nullopt);

/// Most recent phase checkpoint under output_dir, if any.
std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& output_dir);

/// Supernet stored in a run checkpoint.
Supernet load_supernet(const std::filesystem::path& path);

}  // namespace ofa
