#include "ofa/network.hpp"

#include "ofa/error.hpp"

namespace ofa {

namespace {

Tensor norm(const Tensor& x, const NormWeights& n, const ExecOptions& o) {
  ops::NormOptions no;
  no.mode = o.mode;
  no.momentum = o.bn_momentum;
  no.eps = o.bn_eps;
  no.calibration_step = o.calibration_step;
  return ops::batch_norm(x, n.gamma, n.beta, n.stats, no);
}

Tensor activate(const Tensor& x, Activation a) { return a == Activation::relu ? ops::relu(x) : ops::hswish(x); }

Tensor run_mobile(const MobileBlock& m, const Tensor& x, Activation act, const ExecOptions& o) {
  const int hidden = static_cast<int>(m.expand_w.dim(0));
  const int k = static_cast<int>(m.dw_w.dim(2));
  Tensor h = activate(norm(ops::conv2d(x, m.expand_w, 1, 0, 1), m.expand_norm, o), act);
  h = activate(norm(ops::conv2d(h, m.dw_w, m.stride, k / 2, hidden), m.dw_norm, o), act);
  if (m.se) h = squeeze_excite(*m.se, h);
  return norm(ops::conv2d(h, m.project_w, 1, 0, 1), m.project_norm, o);
}

}  // namespace

Tensor squeeze_excite(const SqueezeExcite& se, const Tensor& x) {
  const int64_t b = x.dim(0), c = x.dim(1);
  Tensor g = ops::reshape(ops::global_avg_pool(x), Shape{b, c});
  g = ops::relu(ops::linear(g, se.reduce_w, se.reduce_b));
  g = ops::hsigmoid(ops::linear(g, se.expand_w, se.expand_b));
  return ops::channel_scale(x, ops::reshape(g, Shape{b, c, 1, 1}));
}

Tensor run_level(const Level& level, const Tensor& x, const ExecOptions& o) {
  std::vector<Tensor> branches;
  if (level.mobile) branches.push_back(run_mobile(*level.mobile, x, level.act, o));
  if (level.pointwise) {
    const auto& p = *level.pointwise;
    branches.push_back(activate(norm(ops::conv2d(x, p.w, p.stride, 0, 1), p.norm, o), level.act));
  }
  if (level.light) {
    const auto& l = *level.light;
    Tensor y = x;
    if (l.pool) y = ops::max_pool2x2(y);
    if (l.w.defined()) y = ops::conv2d(y, l.w, 1, 0, 1);
    branches.push_back(activate(norm(y, l.norm, o), level.act));
  }
  if (branches.empty()) throw Error(ErrorKind::internal, "level with no active block");
  Tensor out = ops::mean_of(branches);
  if (level.residual) out = ops::add(out, x);
  return out;
}

namespace {

Tensor flatten(const Tensor& x) { return ops::reshape(x, Shape{x.dim(0), x.numel() / x.dim(0)}); }

Tensor run_exit(const ExitHead& e, const Tensor& x) {
  Tensor h = ops::global_avg_pool(x);
  h = ops::hswish(ops::conv2d(h, e.feature_w, 1, 0, 1));
  return ops::linear(flatten(h), e.fc_w, e.fc_b);
}

Tensor run_tail(const TailHead& t, const Tensor& x, const ExecOptions& o) {
  Tensor h = ops::hswish(norm(ops::conv2d(x, t.expand_w, 1, 0, 1), t.expand_norm, o));
  h = ops::global_avg_pool(h);
  h = ops::hswish(ops::conv2d(h, t.feature_w, 1, 0, 1));
  return ops::linear(flatten(h), t.fc_w, t.fc_b);
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

struct Walker {
  std::function<void(const std::string&, Tensor&, TensorRole)> tensor;
  std::function<void(NormWeights&)> norm;

  void t(const std::string& name, Tensor& x, TensorRole role = TensorRole::trainable) {
    if (tensor && x.defined()) tensor(name, x, role);
  }
  void n(const std::string& name, NormWeights& w) {
    if (norm) norm(w);
    t(name + ".gamma", w.gamma);
    t(name + ".beta", w.beta);
    t(name + ".running_mean", w.stats.mean, TensorRole::buffer);
    t(name + ".running_var", w.stats.var, TensorRole::buffer);
  }

  void walk(NetworkWeights& net) {
    t("stem.conv.weight", net.stem_w);
    n("stem.bn", net.stem_norm);
    t("head.dw.weight", net.head_dw_w);
    n("head.dw_bn", net.head_dw_norm);
    t("head.pw.weight", net.head_pw_w);
    n("head.pw_bn", net.head_pw_norm);
    for (size_t s = 0; s < net.stages.size(); ++s)
      for (size_t j = 0; j < net.stages[s].levels.size(); ++j) {
        auto& lv = net.stages[s].levels[j];
        const std::string p = "stages." + std::to_string(s) + ".levels." + std::to_string(j);
        if (lv.mobile) {
          auto& m = *lv.mobile;
          t(p + ".mobile.expand.weight", m.expand_w);
          n(p + ".mobile.expand_bn", m.expand_norm);
          t(p + ".mobile.dw.weight", m.dw_w);
          n(p + ".mobile.dw_bn", m.dw_norm);
          if (m.se) {
            t(p + ".mobile.se.reduce.weight", m.se->reduce_w);
            t(p + ".mobile.se.reduce.bias", m.se->reduce_b);
            t(p + ".mobile.se.expand.weight", m.se->expand_w);
            t(p + ".mobile.se.expand.bias", m.se->expand_b);
          }
          t(p + ".mobile.project.weight", m.project_w);
          n(p + ".mobile.project_bn", m.project_norm);
        }
        if (lv.pointwise) {
          t(p + ".pointwise.conv.weight", lv.pointwise->w);
          n(p + ".pointwise.bn", lv.pointwise->norm);
        }
        if (lv.light) {
          t(p + ".light.conv.weight", lv.light->w);
          n(p + ".light.bn", lv.light->norm);
        }
      }
    for (size_t e = 0; e < net.exits.size(); ++e) {
      const std::string p = "exits." + std::to_string(e);
      t(p + ".feature.weight", net.exits[e].feature_w);
      t(p + ".fc.weight", net.exits[e].fc_w);
      t(p + ".fc.bias", net.exits[e].fc_b);
    }
    if (net.tail) {
      t("tail.expand.weight", net.tail->expand_w);
      n("tail.bn", net.tail->expand_norm);
      t("tail.feature.weight", net.tail->feature_w);
      t("tail.fc.weight", net.tail->fc_w);
      t("tail.fc.bias", net.tail->fc_b);
    }
  }
};

}  // namespace

std::vector<Tensor> run_network(const NetworkWeights& net, const Tensor& x, const ExecOptions& opt) {
  if (x.rank() != 4) throw DimensionError("network input: expected (B,3,H,W), got " + shape_str(x.shape()));
  if (x.dim(1) != 3) throw DimensionError("network input", 1, 3, x.dim(1));
  auto trace = [&](const std::string& what) {
    if (opt.trace) opt.trace(what);
  };

  Tensor h = ops::hswish(norm(ops::conv2d(x, net.stem_w, 2, 1, 1), net.stem_norm, opt));
  const int stem_c = static_cast<int>(net.stem_w.dim(0));
  Tensor t = ops::relu(norm(ops::conv2d(h, net.head_dw_w, 1, 1, stem_c), net.head_dw_norm, opt));
  t = norm(ops::conv2d(t, net.head_pw_w, 1, 0, 1), net.head_pw_norm, opt);
  h = ops::add(h, t);
  trace("head");

  std::vector<Tensor> logits;
  for (size_t s = 0; s < net.stages.size(); ++s) {
    std::vector<Tensor> outs;
    Tensor prev = h;
    for (size_t j = 0; j < net.stages[s].levels.size(); ++j) {
      trace("stages." + std::to_string(s) + ".levels." + std::to_string(j));
      Tensor out = run_level(net.stages[s].levels[j], prev, opt);
      if (net.dense_skips && j >= 2 && same_shape(out, outs[j - 2])) out = ops::add(out, outs[j - 2]);
      outs.push_back(out);
      prev = out;
    }
    h = prev;
    if (s < net.exits.size()) {
      trace("exits." + std::to_string(s));
      logits.push_back(run_exit(net.exits[s], h));
    }
  }
  if (net.tail) {
    trace("tail");
    logits.push_back(run_tail(*net.tail, h, opt));
  }
  return logits;
}

void visit_tensors(NetworkWeights& net, const std::function<void(const std::string&, Tensor&, TensorRole)>& fn) {
  Walker w;
  w.tensor = fn;
  w.walk(net);
}

NetworkWeights materialize(const NetworkWeights& src) {
  NoGradGuard ng;
  NetworkWeights net = src;
  Walker w;
  w.norm = [](NormWeights& n) {
    if (n.stats.index.empty()) {
      n.stats.mean = n.stats.mean.clone();
      n.stats.var = n.stats.var.clone();
    } else {
      n.stats.mean = ops::index_select(n.stats.mean, 0, n.stats.index);
      n.stats.var = ops::index_select(n.stats.var, 0, n.stats.index);
      n.stats.index.clear();
    }
  };
  w.tensor = [](const std::string&, Tensor& t, TensorRole role) {
    if (role == TensorRole::trainable) t = t.clone();
  };
  w.walk(net);
  return net;
}

int64_t count_trainable(NetworkWeights& net) {
  int64_t n = 0;
  visit_tensors(net, [&](const std::string&, Tensor& t, TensorRole role) {
    if (role == TensorRole::trainable) n += t.numel();
  });
  return n;
}

}  // namespace ofa
