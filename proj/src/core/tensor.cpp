#include "ofa/tensor.hpp"

#include <algorithm>
#include <unordered_set>

#include "ofa/error.hpp"

namespace ofa {

namespace {
thread_local bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool v) { g_grad_enabled = v; }

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (auto d : shape) {
    if (d <= 0) throw DimensionError("shape " + shape_str(shape) + " has a non-positive extent");
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

void TensorImpl::accumulate_grad(std::span<const float> g) {
  if (grad.empty()) {
    grad.assign(g.begin(), g.end());
    return;
  }
  for (size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
}

std::span<float> TensorImpl::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0f);
  return grad;
}

Tensor::Tensor(Shape shape, float fill, bool requires_grad) : impl_(std::make_shared<TensorImpl>()) {
  const auto n = shape_numel(shape);
  impl_->shape = std::move(shape);
  impl_->data.assign(static_cast<size_t>(n), fill);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<float> values, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  const auto n = shape_numel(shape);
  if (n != static_cast<int64_t>(values.size()))
    throw DimensionError("tensor: shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(float v) { return Tensor(Shape{1}, std::vector<float>{v}); }

int64_t Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw DimensionError("dim: axis out of range for " + shape_str(shape()));
  return impl_->shape[static_cast<size_t>(axis)];
}

float Tensor::item() const {
  if (numel() != 1) throw DimensionError("item: tensor " + shape_str(shape()) + " is not a scalar");
  return impl_->data[0];
}

Tensor Tensor::clone() const {
  Tensor t(impl_->shape, impl_->data, false);
  return t;
}

Tensor Tensor::detach() const { return clone(); }

void Tensor::backward() const {
  if (numel() != 1) throw DimensionError("backward: loss " + shape_str(shape()) + " is not a scalar");

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<TensorImpl*, size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorImpl* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior nodes start from zero each call. Leaves collect this call's
  // gradient separately and add it to what they held in a single sum.
  std::vector<std::pair<TensorImpl*, std::vector<float>>> held;
  for (auto* n : order) {
    if (n->backward_fn) {
      n->grad.clear();
    } else if (!n->grad.empty()) {
      held.emplace_back(n, std::move(n->grad));
      n->grad.clear();
    }
  }

  const float one = 1.0f;
  impl_->accumulate_grad(std::span<const float>(&one, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }

  for (auto& [n, g] : held) {
    if (n->grad.empty()) {
      n->grad = std::move(g);
      continue;
    }
    for (size_t i = 0; i < g.size(); ++i) n->grad[i] = g[i] + n->grad[i];
  }
}

namespace {
template <class Range>
Tensor make_result_impl(Shape shape, std::vector<float> values, const Range& inputs,
                        std::function<void(TensorImpl&)> backward_fn) {
  Tensor out(std::move(shape), std::move(values));
  if (!GradMode::enabled()) return out;
  bool needs = false;
  for (const auto& t : inputs) needs = needs || (t.defined() && t.requires_grad());
  if (!needs) return out;
  auto* impl = out.impl();
  impl->requires_grad = true;
  for (const auto& t : inputs)
    if (t.defined()) impl->parents.push_back(t.impl_ptr());
  impl->backward_fn = std::move(backward_fn);
  return out;
}
}  // namespace

Tensor make_result(Shape shape, std::vector<float> values, std::initializer_list<Tensor> inputs,
                   std::function<void(TensorImpl&)> backward_fn) {
  return make_result_impl(std::move(shape), std::move(values), inputs, std::move(backward_fn));
}

Tensor make_result(Shape shape, std::vector<float> values, const std::vector<Tensor>& inputs,
                   std::function<void(TensorImpl&)> backward_fn) {
  return make_result_impl(std::move(shape), std::move(values), inputs, std::move(backward_fn));
}

}  // namespace ofa
