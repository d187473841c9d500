#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ofa {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  // Empty means "no gradient yet". Otherwise same length as data.
  std::vector<float> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  // Reads self.grad, accumulates into parents.
  std::function<void(TensorImpl& self)> backward_fn;

  void accumulate_grad(std::span<const float> g);
  std::span<float> ensure_grad();
};

/// Dense float32 array with reverse-mode gradient support. Copies share
/// storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f, bool requires_grad = false);
  Tensor(Shape shape, std::vector<float> values, bool requires_grad = false);

  static Tensor scalar(float v);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  std::span<float> data() { return impl_->data; }
  std::span<const float> data() const { return impl_->data; }
  float item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<float> grad() { return impl_->grad; }
  std::span<const float> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  /// Populates gradients of every tensor the scalar depends on. Repeated
  /// calls accumulate into leaves.
  void backward() const;

  Tensor clone() const;
  Tensor detach() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Global switch controlling whether ops record the graph.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool v);
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Creates the result node for an op. Hooks up parents and the backward
/// closure only when grad mode is on and some input needs a gradient.
Tensor make_result(Shape shape, std::vector<float> values, std::initializer_list<Tensor> inputs,
                   std::function<void(TensorImpl&)> backward_fn);
Tensor make_result(Shape shape, std::vector<float> values, const std::vector<Tensor>& inputs,
                   std::function<void(TensorImpl&)> backward_fn);

}  // namespace ofa
