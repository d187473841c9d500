#include "ofa/supernet.hpp"

#include <cmath>

#include "ofa/elastic.hpp"
#include "ofa/error.hpp"

namespace ofa {

std::string level_prefix(int stage, int block) {
  return "stages." + std::to_string(stage) + ".levels." + std::to_string(block);
}

Supernet::Supernet(ArchSpec arch, uint64_t seed) : arch_(std::move(arch)) {
  arch_.validate();
  build(seed);
}

Supernet Supernet::clone() const {
  Supernet out;
  out.arch_ = arch_;
  for (const auto& [name, p] : params_) {
    Tensor t = p.tensor.clone();
    t.set_requires_grad(p.trainable);
    out.params_.emplace(name, Param{t, p.trainable, p.decay});
  }
  return out;
}

void Supernet::add(const std::string& name, Tensor t, bool trainable, bool decay) {
  t.set_requires_grad(trainable);
  params_.emplace(name, Param{std::move(t), trainable, decay});
}

void Supernet::add_conv(const std::string& name, Shape shape, std::mt19937_64& rng) {
  const double fan_out = static_cast<double>(shape[0] * shape[2] * shape[3]);
  std::normal_distribution<float> dist(0.0f, static_cast<float>(std::sqrt(2.0 / fan_out)));
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  add(name, t, true, true);
}

void Supernet::add_linear(const std::string& prefix, int out, int in, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, 0.01f);
  Tensor w(Shape{out, in});
  for (auto& v : w.data()) v = dist(rng);
  add(prefix + ".weight", w, true, true);
  add(prefix + ".bias", Tensor(Shape{out}), true, false);
}

void Supernet::add_norm(const std::string& prefix, int channels) {
  add(prefix + ".gamma", Tensor(Shape{channels}, 1.0f), true, false);
  add(prefix + ".beta", Tensor(Shape{channels}, 0.0f), true, false);
  add(prefix + ".running_mean", Tensor(Shape{channels}, 0.0f), false, false);
  add(prefix + ".running_var", Tensor(Shape{channels}, 1.0f), false, false);
}

namespace {
Tensor identity(int n) {
  Tensor t(Shape{n, n});
  for (int i = 0; i < n; ++i) t.data()[static_cast<size_t>(i) * n + i] = 1.0f;
  return t;
}
}  // namespace

void Supernet::build(uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto& a = arch_;
  const int stem = a.channels(a.stem_channels);
  const int k = a.max_kernel;

  add_conv("stem.conv.weight", Shape{stem, 3, 3, 3}, rng);
  add_norm("stem.bn", stem);
  add_conv("head.dw.weight", Shape{stem, 1, 3, 3}, rng);
  add_norm("head.dw_bn", stem);
  add_conv("head.pw.weight", Shape{stem, stem, 1, 1}, rng);
  add_norm("head.pw_bn", stem);

  if (!a.per_block_transforms) {
    add("transform.m75", identity(25), true, true);
    add("transform.m53", identity(9), true, true);
  }

  for (int s = 0; s < a.n_stages(); ++s) {
    const auto& st = a.stages[static_cast<size_t>(s)];
    const int out = a.stage_out(s);
    const int hidden = a.hidden_channels(s, a.max_expand);
    for (int j = 0; j < st.n_blocks; ++j) {
      const int in = j == 0 ? a.stage_in(s) : out;
      const std::string p = level_prefix(s, j);
      add_conv(p + ".mobile.expand.weight", Shape{hidden, in, 1, 1}, rng);
      add_norm(p + ".mobile.expand_bn", hidden);
      add_conv(p + ".mobile.dw.weight", Shape{hidden, 1, k, k}, rng);
      add_norm(p + ".mobile.dw_bn", hidden);
      if (st.use_se) {
        const int mid = se_reduce_channels(hidden);
        add_linear(p + ".mobile.se.reduce", mid, hidden, rng);
        add_linear(p + ".mobile.se.expand", hidden, mid, rng);
      }
      add_conv(p + ".mobile.project.weight", Shape{out, hidden, 1, 1}, rng);
      add_norm(p + ".mobile.project_bn", out);
      if (a.per_block_transforms) {
        add(p + ".mobile.transform.m75", identity(25), true, true);
        add(p + ".mobile.transform.m53", identity(9), true, true);
      }
      if (a.parallel_blocks) {
        add_conv(p + ".pointwise.conv.weight", Shape{out, in, 1, 1}, rng);
        add_norm(p + ".pointwise.bn", out);
        if (in != out) add_conv(p + ".light.conv.weight", Shape{out, in, 1, 1}, rng);
        add_norm(p + ".light.bn", out);
      }
    }
    if (a.early_exits && s + 1 < a.n_stages()) {
      const std::string p = "exits." + std::to_string(s);
      add_conv(p + ".feature.weight", Shape{a.channels(a.feature_channels), out, 1, 1}, rng);
      add_linear(p + ".fc", a.n_classes, a.channels(a.feature_channels), rng);
    }
  }

  const int last = a.stage_out(a.n_stages() - 1);
  const int tail = a.channels(a.tail_channels);
  const int feat = a.channels(a.feature_channels);
  add_conv("tail.expand.weight", Shape{tail, last, 1, 1}, rng);
  add_norm("tail.bn", tail);
  add_conv("tail.feature.weight", Shape{feat, tail, 1, 1}, rng);
  add_linear("tail.fc", a.n_classes, feat, rng);
}

Tensor Supernet::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error(ErrorKind::internal, "supernet has no parameter '" + name + "'");
  if (access_trace_) access_trace_(name);
  return it->second.tensor;
}

std::vector<Tensor> Supernet::forward(const Tensor& x, const SubnetConfig& cfg, const ExecOptions& opt) const {
  cfg.validate(arch_);
  if (x.rank() != 4) throw DimensionError("supernet input: expected (B,3,r,r), got " + shape_str(x.shape()));
  if (x.dim(2) != cfg.resolution) throw DimensionError("supernet input", 2, cfg.resolution, x.dim(2));
  if (x.dim(3) != cfg.resolution) throw DimensionError("supernet input", 3, cfg.resolution, x.dim(3));
  const NetworkWeights net = elastic::effective_network(*this, cfg);
  return run_network(net, x, opt);
}

void Supernet::zero_grad() {
  for (auto& [_, p] : params_) p.tensor.zero_grad();
}

int64_t Supernet::total_parameters() const {
  int64_t n = 0;
  for (const auto& [_, p] : params_)
    if (p.trainable) n += p.tensor.numel();
  return n;
}

}  // namespace ofa
