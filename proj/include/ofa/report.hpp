#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ofa/arch.hpp"

namespace ofa {

struct SubnetRecord {
  SubnetConfig config;
  std::string key;
  double accuracy = 0.0;
  int64_t params = 0;
  int64_t macs = 0;
  bool best = false;

  bool operator==(const SubnetRecord&) const = default;
};

struct PhaseReport {
  std::string phase;
  std::vector<SubnetRecord> subnets;
  double avg = 0.0;
  double best = 0.0;
  std::string best_key;
  int64_t best_params = 0;
  int64_t best_macs = 0;
  double maximal_accuracy = 0.0;  // maximal config at r = 64
  double train_loss = 0.0;        // mean loss over the phase's last epoch
  int64_t iterations = 0;
  double wall_clock_s = 0.0;

  /// Equality of everything except wall-clock time.
  bool same_results(const PhaseReport& o) const;
};

/// Fills avg/best/best_* and the per-record best flags from `subnets`.
void summarize(PhaseReport& r);

nlohmann::json to_json(const PhaseReport& r);
PhaseReport phase_report_from_json(const nlohmann::json& j, const ArchSpec& arch);

inline constexpr int kReportSchemaVersion = 1;

/// Machine-readable record of one run.
struct RunReport {
  ArchSpec arch;
  std::string teacher;  // fixed | progressive
  nlohmann::json run_config;
  std::vector<PhaseReport> phases;
  int teacher_extractions = 0;
};

nlohmann::json to_json(const RunReport& r);
RunReport run_report_from_json(const nlohmann::json& j);

/// Aligned-text results table: one block
/// per width multiplier, one row per run (fixed teacher first), avg/best per
/// step, "X" for steps the variant does not have, "-" for steps not reached.
/// The best value of each column within a block is wrapped in brackets.
std::string render_table(const std::vector<RunReport>& runs);

}  // namespace ofa
