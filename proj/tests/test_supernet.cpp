#include <doctest.h>

#include <cmath>
#include <set>

#include "ofa/cost.hpp"
#include "ofa/elastic.hpp"
#include "ofa/error.hpp"
#include "ofa/network.hpp"
#include "ofa/supernet.hpp"
#include "oracles.hpp"
#include "random_config.hpp"

using namespace ofa;
using oracle::random_tensor;

namespace {

int round_up8(double v) { return static_cast<int>(std::ceil(v / 8.0 - 1e-9)) * 8; }

}  // namespace

TEST_CASE("OFA_MBV3 channel table at WM 1.0 and 1.2") {
  const auto a = ArchSpec::ofa_mbv3("SE_B", 1.0);
  const int expected[] = {24, 40, 80, 112, 160};
  REQUIRE(a.n_stages() == 5);
  for (int s = 0; s < 5; ++s) CHECK(a.stage_out(s) == expected[s]);
  CHECK(a.channels(a.tail_channels) == 960);
  CHECK(a.channels(a.feature_channels) == 1280);
  CHECK(a.channels(a.stem_channels) == 16);

  const auto b = ArchSpec::ofa_mbv3("SE_B", 1.2);
  for (int s = 0; s < 5; ++s) CHECK(b.stage_out(s) == round_up8(expected[s] * 1.2));
  CHECK(b.stage_out(0) == 32);
  CHECK(b.stage_out(3) == 136);
  CHECK(b.channels(960) == 1152);
  CHECK(b.channels(1280) == 1536);
  CHECK(b.channels(16) == 24);
}

TEST_CASE("variant names and flags") {
  CHECK(all_variants().size() == 8);
  for (const auto& v : all_variants()) {
    const auto a = ArchSpec::ofa_mbv3(v);
    CHECK(a.variant() == v);
    CHECK(a.early_exits == (v.rfind("EE_", 0) == 0));
    CHECK(a.dense_skips == (v.find('D') != std::string::npos));
    CHECK(a.parallel_blocks == (v.find('P') != std::string::npos));
  }
  CHECK(ArchSpec::ofa_mbv3("SE_B").network_name() == "OFA_MBV3 (baseline)");
  CHECK(ArchSpec::ofa_mbv3("EE_DP").network_name() == "EE_DP_OFA_MBV3");
  CHECK_THROWS_AS(ArchSpec::ofa_mbv3("SE_X"), ConfigError);
}

TEST_CASE("arch JSON round trip") {
  for (const auto& v : all_variants()) {
    const auto a = ArchSpec::ofa_mbv3(v, 1.2, 10);
    nlohmann::json j = a;
    CHECK(j.get<ArchSpec>() == a);
  }
  const auto m = ArchSpec::miniature("EE_DP", 4, 3);
  nlohmann::json j = m;
  CHECK(j.get<ArchSpec>() == m);
}

TEST_CASE("subnet config JSON round trip and validation") {
  const auto a = ArchSpec::ofa_mbv3("EE_DP");
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    const auto c = oracle::random_config(a, rng);
    nlohmann::json j;
    to_json(j, c);
    CHECK(subnet_from_json(j, a) == c);
  }
  auto bad = SubnetConfig::maximal(a);
  bad.kernel[0][0] = 4;
  CHECK_THROWS_AS(bad.validate(a), ConfigError);
  bad = SubnetConfig::maximal(a, 32);
  CHECK_THROWS_AS(bad.validate(a), ConfigError);
  bad = SubnetConfig::maximal(ArchSpec::ofa_mbv3("SE_B"));
  bad.height = 3;
  CHECK_THROWS_AS(bad.validate(ArchSpec::ofa_mbv3("SE_B")), ConfigError);
}

TEST_CASE("squeeze-excite gate identities") {
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({1, 4, 2, 2}, rng);
  SqueezeExcite se;
  se.reduce_w = Tensor({2, 4}, 0.0f);
  se.reduce_b = Tensor({2}, 0.0f);
  se.expand_w = Tensor({4, 2}, 0.0f);

  se.expand_b = Tensor({4}, 3.0f);  // hsigmoid(3) = 1
  CHECK(oracle::max_abs_diff(squeeze_excite(se, x).data(), x.data()) == 0.0);

  se.expand_b = Tensor({4}, -3.0f);  // hsigmoid(-3) = 0
  const Tensor y = squeeze_excite(se, x);
  for (float v : y.data()) CHECK(v == 0.0f);
}

TEST_CASE("squeeze-excite matches a scalar reference") {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({1, 4, 2, 2}, rng);
  SqueezeExcite se{random_tensor({2, 4}, rng), random_tensor({2}, rng), random_tensor({4, 2}, rng),
                   random_tensor({4}, rng)};
  const Tensor y = squeeze_excite(se, x);
  double pooled[4];
  for (int c = 0; c < 4; ++c) {
    pooled[c] = 0.0;
    for (int i = 0; i < 4; ++i) pooled[c] += x.data()[c * 4 + i] / 4.0;
  }
  double mid[2];
  for (int m = 0; m < 2; ++m) {
    double s = se.reduce_b.data()[m];
    for (int c = 0; c < 4; ++c) s += se.reduce_w.data()[m * 4 + c] * pooled[c];
    mid[m] = std::max(0.0, s);
  }
  for (int c = 0; c < 4; ++c) {
    double s = se.expand_b.data()[c];
    for (int m = 0; m < 2; ++m) s += se.expand_w.data()[c * 2 + m] * mid[m];
    const double gate = std::min(std::max(s + 3.0, 0.0), 6.0) / 6.0;
    for (int i = 0; i < 4; ++i) CHECK(y.data()[c * 4 + i] == doctest::Approx(x.data()[c * 4 + i] * gate).epsilon(1e-5));
  }
}

TEST_CASE("maximal baseline forward: one exit of shape (B, n_classes)") {
  Supernet net(ArchSpec::ofa_mbv3("SE_B", 1.0, 8), 1);
  std::mt19937_64 rng(4);
  const auto out = net.forward(random_tensor({2, 3, 48, 48}, rng), SubnetConfig::maximal(net.arch(), 48));
  REQUIRE(out.size() == 1);
  CHECK(out[0].shape() == Shape{2, 8});
}

TEST_CASE("early-exit variant: five exits, truncation by height") {
  Supernet net(ArchSpec::ofa_mbv3("EE_B", 1.0, 8), 1);
  CHECK(net.arch().n_exits() == 5);
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({1, 3, 48, 48}, rng);
  NoGradGuard ng;
  CHECK(net.forward(x, SubnetConfig::maximal(net.arch(), 48)).size() == 5);

  auto cfg = SubnetConfig::maximal(net.arch(), 48);
  cfg.height = 3;
  std::vector<std::string> trace;
  ExecOptions opt;
  opt.trace = [&](std::string_view s) { trace.emplace_back(s); };
  const auto out = net.forward(x, cfg, opt);
  CHECK(out.size() == 3);
  for (const auto& t : trace) {
    CHECK(t.rfind("stages.3", 0) != 0);
    CHECK(t.rfind("stages.4", 0) != 0);
    CHECK(t != "tail");
  }
  CHECK(std::find(trace.begin(), trace.end(), "exits.2") != trace.end());

  std::set<std::string> touched;
  net.set_access_trace([&](std::string_view n) { touched.emplace(n); });
  net.forward(x, cfg);
  for (const auto& n : touched) {
    CHECK(n.rfind("stages.3", 0) != 0);
    CHECK(n.rfind("tail", 0) != 0);
    CHECK(n.rfind("exits.3", 0) != 0);
  }
}

TEST_CASE("parallel level: mask 7 is the mean of the single-block outputs") {
  const auto arch = ArchSpec::miniature("SE_P", 4);
  Supernet net(arch, 6);
  std::mt19937_64 rng(6);
  const Tensor x = random_tensor({2, 8, 8, 8}, rng);
  NoGradGuard ng;
  for (int s = 0; s < 2; ++s)
    for (int j = 0; j < 2; ++j) {
      auto cfg = SubnetConfig::maximal(arch);
      auto level_out = [&](int mask) {
        cfg.level[static_cast<size_t>(s)][static_cast<size_t>(j)] = mask;
        Level lv = elastic::effective_level(net, s, j, cfg);
        lv.residual = false;
        return run_level(lv, x, {});
      };
      const Tensor all = level_out(7);
      const Tensor a = level_out(1), b = level_out(2), c = level_out(4);
      REQUIRE(all.shape() == a.shape());
      double m = 0.0;
      for (int64_t i = 0; i < all.numel(); ++i)
        m = std::max(m, std::fabs(all.data()[i] - (a.data()[i] + b.data()[i] + c.data()[i]) / 3.0));
      CHECK(m < 1e-5);
    }
}

TEST_CASE("maximal config uses the shared tensors directly") {
  for (const char* v : {"SE_B", "EE_DP"}) {
    Supernet net(ArchSpec::miniature(v), 7);
    const auto w = elastic::effective_network(net, SubnetConfig::maximal(net.arch()));
    const auto& m = *w.stages[0].levels[1].mobile;
    CHECK(m.expand_w.impl() == net.get(level_prefix(0, 1) + ".mobile.expand.weight").impl());
    CHECK(m.dw_w.impl() == net.get(level_prefix(0, 1) + ".mobile.dw.weight").impl());
    CHECK(m.project_w.impl() == net.get(level_prefix(0, 1) + ".mobile.project.weight").impl());
  }
}

TEST_CASE("expand ratio 3 halves the hidden width of ratio 6") {
  const auto arch = ArchSpec::ofa_mbv3("SE_B", 1.0, 8);
  Supernet net(arch, 8);
  auto cfg = SubnetConfig::uniform(arch, 64, 7, 3, 4, 7, 5);
  for (int s = 0; s < 5; ++s) {
    const auto lv = elastic::effective_level(net, s, 0, cfg);
    CHECK(lv.mobile->expand_w.dim(0) * 2 == arch.hidden_channels(s, 6));
    CHECK(lv.mobile->dw_w.dim(0) == lv.mobile->expand_w.dim(0));
    CHECK(lv.mobile->project_w.dim(1) == lv.mobile->expand_w.dim(0));
  }
}

TEST_CASE("subnet gradients reach the shared store, including transforms") {
  const auto arch = ArchSpec::miniature("SE_B", 4);
  Supernet net(arch, 9);
  std::mt19937_64 rng(9);
  auto cfg = SubnetConfig::uniform(arch, 48, 3, 4, 1, 7, 2);
  ExecOptions train;
  train.mode = ops::NormMode::train;
  const auto logits = net.forward(random_tensor({2, 3, 48, 48}, rng), cfg, train);
  const std::vector<int> labels{0, 1};
  ops::cross_entropy(logits.back(), labels).backward();
  CHECK(net.get("transform.m75").has_grad());
  CHECK(net.get("transform.m53").has_grad());
  CHECK(net.get(level_prefix(0, 0) + ".mobile.expand.weight").has_grad());
  CHECK_FALSE(net.get(level_prefix(0, 1) + ".mobile.expand.weight").has_grad());
}

TEST_CASE("cost: single 3x3 conv closed form") {
  const Cost c = conv_cost(3, 16, 3, 1, 32, true);
  CHECK(c.params == 16 * 3 * 3 * 3 + 32);
  CHECK(c.macs == 432LL * 32 * 32);
}

TEST_CASE("cost: removing two blocks costs exactly those blocks") {
  const auto arch = ArchSpec::ofa_mbv3("SE_B", 1.0, 200);
  for (int s = 0; s < 5; ++s) {
    auto full = SubnetConfig::maximal(arch);
    auto cut = full;
    cut.depth[static_cast<size_t>(s)] = 2;
    auto only3 = full, only4 = full;
    only3.depth[static_cast<size_t>(s)] = 3;
    const Cost a = count_cost(arch, full), b = count_cost(arch, cut), c3 = count_cost(arch, only3);
    // blocks 3 and 4 of a stage take equal-shape inputs, so each costs (a - b) / 2
    CHECK((a.params - b.params) == 2 * (a.params - c3.params));
    CHECK((a.macs - b.macs) == 2 * (a.macs - c3.macs));
  }
}

TEST_CASE("cost: lowering any dimension never increases params or MACs") {
  std::mt19937_64 rng(10);
  for (const auto& v : all_variants()) {
    const auto arch = ArchSpec::ofa_mbv3(v, 1.0, 200);
    for (int trial = 0; trial < 25; ++trial) {
      const auto cfg = oracle::random_config(arch, rng);
      const Cost base = count_cost(arch, cfg);
      auto lowered = [&](SubnetConfig c) {
        const Cost l = count_cost(arch, c);
        CHECK(l.params <= base.params);
        CHECK(l.macs <= base.macs);
      };
      if (cfg.resolution > 48) {
        auto c = cfg;
        c.resolution -= 8;
        lowered(c);
      }
      if (cfg.height > 1 && arch.early_exits) {
        auto c = cfg;
        --c.height;
        lowered(c);
      }
      for (size_t s = 0; s < cfg.depth.size(); ++s) {
        if (cfg.depth[s] > 1) {
          auto c = cfg;
          --c.depth[s];
          lowered(c);
        }
        for (size_t b = 0; b < cfg.kernel[s].size(); ++b) {
          if (cfg.kernel[s][b] > 3) {
            auto c = cfg;
            c.kernel[s][b] -= 2;
            lowered(c);
          }
          if (cfg.expand[s][b] > 3) {
            auto c = cfg;
            c.expand[s][b] = cfg.expand[s][b] == 6 ? 4 : 3;
            lowered(c);
          }
          for (int bit : {1, 2, 4})
            if (arch.parallel_blocks && (cfg.level[s][b] & bit) && cfg.level[s][b] != bit) {
              auto c = cfg;
              c.level[s][b] &= ~bit;
              lowered(c);
            }
        }
      }
    }
  }
}

TEST_CASE("extracted parameter count equals the cost model") {
  std::mt19937_64 rng(11);
  for (const char* v : {"SE_B", "EE_DP", "SE_D", "EE_P"}) {
    Supernet net(ArchSpec::ofa_mbv3(v, 1.0, 10), 11);
    for (int i = 0; i < 5; ++i) {
      const auto cfg = oracle::random_config(net.arch(), rng);
      auto sub = elastic::extract_subnet(net, cfg);
      CHECK(sub.parameter_count() == count_cost(net.arch(), cfg).params);
    }
  }
}

TEST_CASE("extraction: maximal is exact, random configs agree within 1e-5") {
  std::mt19937_64 rng(12);
  for (const auto& v : all_variants()) {
    Supernet net(ArchSpec::miniature(v, 4), 12);
    NoGradGuard ng;
    {
      const auto cfg = SubnetConfig::maximal(net.arch(), 56);
      const auto sub = elastic::extract_subnet(net, cfg);
      const Tensor x = random_tensor({2, 3, 56, 56}, rng);
      const auto a = net.forward(x, cfg), b = sub.forward(x);
      REQUIRE(a.size() == b.size());
      for (size_t e = 0; e < a.size(); ++e) CHECK(oracle::max_abs_diff(a[e].data(), b[e].data()) == 0.0);
    }
    const auto cfg = oracle::random_config(net.arch(), rng);
    const auto sub = elastic::extract_subnet(net, cfg);
    for (int batch = 0; batch < 10; ++batch) {
      const Tensor x = random_tensor({2, 3, cfg.resolution, cfg.resolution}, rng);
      const auto a = net.forward(x, cfg), b = sub.forward(x);
      REQUIRE(a.size() == b.size());
      for (size_t e = 0; e < a.size(); ++e) CHECK(oracle::max_abs_diff(a[e].data(), b[e].data()) < 1e-5);
    }
  }
}

TEST_CASE("input shape errors") {
  Supernet net(ArchSpec::miniature("SE_B"), 1);
  const auto cfg = SubnetConfig::maximal(net.arch(), 64);
  CHECK_THROWS_AS(net.forward(Tensor({1, 3, 48, 48}), cfg), DimensionError);
  CHECK_THROWS_AS(net.forward(Tensor({1, 1, 64, 64}), cfg), DimensionError);
  CHECK_THROWS_AS(net.forward(Tensor({3, 64, 64}), cfg), DimensionError);
}
