#include "ofa/distill.hpp"

#include <cmath>

#include "ofa/error.hpp"

namespace ofa::distill {

WeightScheme parse_weight_scheme(std::string_view s) {
  if (s == "desc") return WeightScheme::desc;
  if (s == "asc") return WeightScheme::asc;
  if (s == "uniform") return WeightScheme::uniform;
  throw ConfigError("unknown exit weight scheme '" + std::string(s) + "' (expected desc|asc|uniform)");
}

std::string_view weight_scheme_name(WeightScheme w) {
  switch (w) {
    case WeightScheme::desc: return "desc";
    case WeightScheme::asc: return "asc";
    case WeightScheme::uniform: return "uniform";
  }
  return "desc";
}

std::vector<double> exit_weights(int n, WeightScheme scheme) {
  if (n < 1) throw Error(ErrorKind::invalid_argument, "exit_weights: need at least one exit");
  std::vector<double> w(static_cast<size_t>(n));
  double total = 0.0;
  for (int i = 1; i <= n; ++i) {
    double v = 1.0;
    if (scheme == WeightScheme::desc) v = n - i + 1;
    if (scheme == WeightScheme::asc) v = i;
    w[static_cast<size_t>(i - 1)] = v;
    total += v;
  }
  for (auto& v : w) v /= total;
  return w;
}

double aep_loss(std::span<const double> losses, std::span<const double> w) {
  if (losses.size() != w.size())
    throw DimensionError("aep_loss", 0, static_cast<long>(w.size()), static_cast<long>(losses.size()));
  double s = 0.0;
  for (size_t i = 0; i < w.size(); ++i) s += w[i] * losses[i];
  return s;
}

Tensor aep_loss(const std::vector<Tensor>& losses, std::span<const double> w) {
  if (losses.size() != w.size())
    throw DimensionError("aep_loss", 0, static_cast<long>(w.size()), static_cast<long>(losses.size()));
  if (losses.size() == 1 && w[0] == 1.0) return losses[0];
  Tensor total;
  for (size_t i = 0; i < w.size(); ++i) {
    Tensor t = ops::scale(losses[i], static_cast<float>(w[i]));
    total = total.defined() ? ops::add(total, t) : t;
  }
  return total;
}

namespace {

void check_exits(const char* op, const std::vector<Tensor>& logits, std::span<const double> w) {
  if (logits.empty()) throw DimensionError(std::string(op) + ": no exits");
  if (logits.size() != w.size())
    throw DimensionError(op, 0, static_cast<long>(w.size()), static_cast<long>(logits.size()));
  for (const auto& l : logits) {
    if (l.rank() != 2) throw DimensionError(std::string(op) + ": logits must be (B, C)");
    if (l.dim(0) != logits[0].dim(0)) throw DimensionError(op, 0, logits[0].dim(0), l.dim(0));
    if (l.dim(1) != logits[0].dim(1)) throw DimensionError(op, 1, logits[0].dim(1), l.dim(1));
  }
}

std::vector<double> weighted_probs(const std::vector<Tensor>& logits, std::span<const double> w, float t) {
  const size_t n = static_cast<size_t>(logits[0].numel());
  std::vector<double> acc(n, 0.0);
  for (size_t i = 0; i < logits.size(); ++i) {
    const auto p = ops::softmax_rows(logits[i], t);
    for (size_t j = 0; j < n; ++j) acc[j] += w[i] * p[j];
  }
  return acc;
}

}  // namespace

std::vector<int> aep_predict(const std::vector<Tensor>& exit_logits, std::span<const double> w) {
  check_exits("aep_predict", exit_logits, w);
  const auto acc = weighted_probs(exit_logits, w, 1.0f);
  const int64_t b = exit_logits[0].dim(0), c = exit_logits[0].dim(1);
  std::vector<int> out(static_cast<size_t>(b));
  for (int64_t r = 0; r < b; ++r) {
    int best = 0;
    for (int64_t k = 1; k < c; ++k)
      if (acc[r * c + k] > acc[r * c + best]) best = static_cast<int>(k);
    out[static_cast<size_t>(r)] = best;
  }
  return out;
}

Tensor ensemble_soft_labels(const std::vector<Tensor>& teacher_logits, std::span<const double> w,
                            float temperature) {
  check_exits("ensemble_soft_labels", teacher_logits, w);
  const auto acc = weighted_probs(teacher_logits, w, temperature);
  const int64_t b = teacher_logits[0].dim(0), c = teacher_logits[0].dim(1);
  std::vector<float> out(acc.size());
  for (int64_t r = 0; r < b; ++r) {
    double s = 0.0;
    for (int64_t k = 0; k < c; ++k) s += acc[r * c + k];
    for (int64_t k = 0; k < c; ++k) out[r * c + k] = static_cast<float>(acc[r * c + k] / s);
  }
  return Tensor(Shape{b, c}, std::move(out));
}

Divergence parse_divergence(std::string_view s) {
  if (s == "ce" || s == "cross_entropy") return Divergence::cross_entropy;
  if (s == "kl") return Divergence::kl;
  throw ConfigError("unknown KD divergence '" + std::string(s) + "' (expected ce|kl)");
}

std::string_view divergence_name(Divergence d) { return d == Divergence::kl ? "kl" : "ce"; }

Tensor kd_loss(const Tensor& student_logits, std::span<const int> labels, const Tensor& soft,
               const KdOptions& opt) {
  if (opt.kd_ratio < 0.0) throw Error(ErrorKind::invalid_argument, "kd_ratio must be >= 0");
  if (!(opt.temperature > 0.0f)) throw Error(ErrorKind::invalid_argument, "KD temperature must be positive");
  Tensor loss = ops::cross_entropy(student_logits, labels);
  if (opt.kd_ratio == 0.0 || !soft.defined()) return loss;
  const float t = opt.temperature;
  Tensor s = t == 1.0f ? student_logits : ops::scale(student_logits, 1.0f / t);
  Tensor term = ops::soft_cross_entropy(s, soft);
  if (opt.divergence == Divergence::kl) {
    double h = 0.0;
    for (float p : soft.data())
      if (p > 0.0f) h -= static_cast<double>(p) * std::log(static_cast<double>(p));
    h /= static_cast<double>(soft.dim(0));
    term = ops::add(term, Tensor(Shape{1}, {static_cast<float>(-h)}));
  }
  return ops::add(loss, ops::scale(term, static_cast<float>(opt.kd_ratio) * t * t));
}

Tensor multi_exit_kd_loss(const std::vector<Tensor>& student_logits, std::span<const int> labels,
                          const Tensor& soft, const KdOptions& opt, WeightScheme scheme) {
  if (student_logits.empty()) throw DimensionError("multi_exit_kd_loss: no exits");
  std::vector<Tensor> losses;
  for (const auto& l : student_logits) losses.push_back(kd_loss(l, labels, soft, opt));
  return aep_loss(losses, exit_weights(static_cast<int>(losses.size()), scheme));
}

TeacherKind parse_teacher_kind(std::string_view s) {
  if (s == "fixed") return TeacherKind::fixed;
  if (s == "progressive") return TeacherKind::progressive;
  throw ConfigError("unknown teacher strategy '" + std::string(s) + "' (expected fixed|progressive)");
}

std::string_view teacher_kind_name(TeacherKind k) { return k == TeacherKind::fixed ? "fixed" : "progressive"; }

bool Teacher::update(const Supernet& net, std::string_view starting_phase,
                     const std::vector<Tensor>& calibration) {
  if (starting_phase == "Full")
    throw Error(ErrorKind::invalid_argument, "teacher update requested before the Full phase completed");
  if (kind_ == TeacherKind::fixed && snapshot_) return false;
  snapshot_ = elastic::extract_subnet(net, SubnetConfig::maximal(net.arch(), 64));
  if (!calibration.empty()) snapshot_->recalibrate_norms(calibration);
  ++extractions_;
  return true;
}

const elastic::StandaloneNet& Teacher::snapshot() const {
  if (!snapshot_) throw Error(ErrorKind::invalid_argument, "teacher has no snapshot yet");
  return *snapshot_;
}

Tensor Teacher::soft_labels(const Tensor& x, WeightScheme scheme, float temperature) const {
  NoGradGuard ng;
  ExecOptions opt;
  opt.mode = ops::NormMode::eval;
  const auto& net = snapshot();
  const auto logits = net.forward(x, opt);
  return ensemble_soft_labels(logits, exit_weights(static_cast<int>(logits.size()), scheme), temperature);
}

}  // namespace ofa::distill
