#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ofa/elastic.hpp"
#include "ofa/supernet.hpp"
#include "ofa/tensor.hpp"

namespace ofa::distill {

enum class WeightScheme { desc, asc, uniform };

WeightScheme parse_weight_scheme(std::string_view s);
std::string_view weight_scheme_name(WeightScheme w);

/// Normalized exit weights over n exits. DESC gives exit i (1-based) a weight
/// proportional to n - i + 1.
std::vector<double> exit_weights(int n, WeightScheme scheme = WeightScheme::desc);

double aep_loss(std::span<const double> losses, std::span<const double> w);
Tensor aep_loss(const std::vector<Tensor>& losses, std::span<const double> w);

/// Per-row argmax of sum_i w_i softmax(logits_i).
std::vector<int> aep_predict(const std::vector<Tensor>& exit_logits, std::span<const double> w);

/// sum_i w_i softmax(logits_i / T), shape (B, C).
Tensor ensemble_soft_labels(const std::vector<Tensor>& teacher_logits, std::span<const double> w,
                            float temperature = 1.0f);

enum class Divergence { cross_entropy, kl };

Divergence parse_divergence(std::string_view s);
std::string_view divergence_name(Divergence d);

struct KdOptions {
  double kd_ratio = 1.0;
  float temperature = 1.0f;
  Divergence divergence = Divergence::cross_entropy;
};

/// CE(student, labels) + kd_ratio * D(student, soft). With temperature T the
/// soft term compares softmax(student / T) and is scaled by T^2. An undefined
/// `soft` tensor drops the KD term.
Tensor kd_loss(const Tensor& student_logits, std::span<const int> labels, const Tensor& soft,
               const KdOptions& opt);

/// kd_loss at every produced exit, combined with exit weights over those exits.
Tensor multi_exit_kd_loss(const std::vector<Tensor>& student_logits, std::span<const int> labels,
                          const Tensor& soft, const KdOptions& opt, WeightScheme scheme = WeightScheme::desc);

enum class TeacherKind { fixed, progressive };

TeacherKind parse_teacher_kind(std::string_view s);
std::string_view teacher_kind_name(TeacherKind k);

/// Teacher snapshot manager. `update` is called once at the start of every
/// phase after Full.
class Teacher {
 public:
  explicit Teacher(TeacherKind kind) : kind_(kind) {}

  /// Takes a snapshot of the maximal config when the strategy calls for it.
  /// Returns true when a new snapshot was extracted. A fresh snapshot's norm
  /// statistics are re-estimated on `calibration` when it is non-empty.
  bool update(const Supernet& net, std::string_view starting_phase,
              const std::vector<Tensor>& calibration = {});

  TeacherKind kind() const { return kind_; }
  bool has_snapshot() const { return snapshot_.has_value(); }
  const elastic::StandaloneNet& snapshot() const;
  /// Reinstates a saved snapshot and extraction count (checkpoint resume).
  void restore(elastic::StandaloneNet net, int extractions) {
    snapshot_ = std::move(net);
    extractions_ = extractions;
  }
  int extractions() const { return extractions_; }

  /// Ensembled soft labels for a batch at the batch's resolution; the
  /// snapshot runs in inference mode.
  Tensor soft_labels(const Tensor& x, WeightScheme scheme, float temperature) const;

 private:
  TeacherKind kind_;
  std::optional<elastic::StandaloneNet> snapshot_;
  int extractions_ = 0;
};

}  // namespace ofa::distill
