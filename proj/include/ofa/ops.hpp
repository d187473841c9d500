#pragma once

#include <span>
#include <vector>

#include "ofa/tensor.hpp"

namespace ofa::ops {

// Elementwise / reductions.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor sum(const Tensor& a);
/// Arithmetic mean of same-shape tensors.
Tensor mean_of(const std::vector<Tensor>& xs);
Tensor reshape(const Tensor& a, Shape shape);

// Activations.
Tensor relu(const Tensor& x);
/// x * clamp(x + 3, 0, 6) / 6
Tensor hswish(const Tensor& x);
/// clamp(x + 3, 0, 6) / 6
Tensor hsigmoid(const Tensor& x);

float hswish_scalar(float x);
float hsigmoid_scalar(float x);

/// NCHW convolution. Weight is (out, in/groups, k, k). Output spatial size is
/// floor((H + 2*pad - k) / stride) + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad, int groups);

enum class NormMode {
  train,      // batch statistics, running stats updated with momentum
  eval,       // running statistics only
  calibrate,  // batch statistics, running stats set to the cumulative average
};

/// Running statistics, optionally addressed through a channel index into a
/// larger shared buffer (elastic width). Empty index means identity.
struct RunningStats {
  Tensor mean;
  Tensor var;
  std::vector<int> index;
};

struct NormOptions {
  NormMode mode = NormMode::eval;
  float momentum = 0.1f;
  float eps = 1e-5f;
  int calibration_step = 0;
};

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, RunningStats stats,
                  const NormOptions& opt);

/// y = x W^T + b, x (B, in), W (out, in), b (out) or undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

/// (B,C,H,W) -> (B,C,1,1)
Tensor global_avg_pool(const Tensor& x);
/// 2x2 window, stride 2, ceil mode: output ceil(H/2) x ceil(W/2).
Tensor max_pool2x2(const Tensor& x);
/// x (B,C,H,W) scaled per (b,c) by gate (B,C,1,1).
Tensor channel_scale(const Tensor& x, const Tensor& gate);

/// Gathers entries along `axis` in the given order.
Tensor index_select(const Tensor& x, int axis, std::span<const int> index);
/// Centre k x k window of the two trailing axes.
Tensor center_crop(const Tensor& w, int k);
/// Each trailing k x k kernel is flattened to v and replaced by M v.
Tensor kernel_matmul(const Tensor& w, const Tensor& m);

/// Mean over batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
/// Mean over batch of -sum target * log softmax(logits). Target is constant.
Tensor soft_cross_entropy(const Tensor& logits, const Tensor& target);

/// Row-wise softmax (no graph).
std::vector<float> softmax_rows(const Tensor& logits, float temperature = 1.0f);
Tensor softmax(const Tensor& logits, float temperature = 1.0f);

}  // namespace ofa::ops
