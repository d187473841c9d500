#include <doctest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "ofa/error.hpp"
#include "ofa/scheduler.hpp"
#include "oracles.hpp"

using namespace ofa;

namespace {

struct Row {
  const char* name;
  double lr;
  int epochs, warmup, subnets;
};

// Published hyperparameter table.
constexpr Row kExpected[] = {
    {"Full", 1.0e-3, 180, 0, 0}, {"EKS", 3.0e-2, 120, 5, 1}, {"EL1", 2.5e-3, 25, 0, 2}, {"EL2", 7.5e-3, 120, 5, 2},
    {"EH1", 2.5e-3, 25, 0, 2},   {"EH2", 7.5e-3, 60, 5, 2},  {"EH3", 1.0e-2, 90, 5, 2}, {"EH4", 3.0e-2, 120, 5, 2},
    {"ED1", 2.5e-3, 25, 0, 2},   {"ED2", 7.5e-3, 120, 5, 2}, {"EW1", 2.5e-3, 25, 0, 4}, {"EW2", 7.5e-3, 120, 5, 4},
};

std::vector<std::string> expected_order(const ArchSpec& a) {
  std::vector<std::string> v{"Full", "EKS"};
  if (a.parallel_blocks) v.insert(v.end(), {"EL1", "EL2"});
  if (a.early_exits) v.insert(v.end(), {"EH1", "EH2", "EH3", "EH4"});
  v.insert(v.end(), {"ED1", "ED2", "EW1", "EW2"});
  return v;
}

}  // namespace

TEST_CASE("phase table matches the published hyperparameters") {
  for (const auto& r : kExpected) {
    const PhaseSpec p = table_phase(r.name);
    CHECK(p.name == r.name);
    CHECK(p.lr == r.lr);
    CHECK(p.epochs == r.epochs);
    CHECK(p.warmup_epochs == r.warmup);
    CHECK(p.n_subnets == r.subnets);
  }
  CHECK_THROWS_AS(table_phase("EX1"), ConfigError);
}

TEST_CASE("phase ordering for all eight variants") {
  for (const auto& v : all_variants()) {
    const auto a = ArchSpec::ofa_mbv3(v);
    const auto seq = phase_sequence(a);
    const auto expected = expected_order(a);
    REQUIRE(seq.size() == expected.size());
    for (size_t i = 0; i < seq.size(); ++i) {
      CHECK(seq[i].name == expected[i]);
      CHECK(seq[i].lr == table_phase(expected[i]).lr);
    }
  }
  CHECK(phase_sequence(ArchSpec::ofa_mbv3("EE_DP")).size() == 12);
  CHECK(phase_sequence(ArchSpec::ofa_mbv3("SE_B")).size() == 6);
}

TEST_CASE("unlocked value schedules") {
  const auto a = ArchSpec::ofa_mbv3("EE_DP");
  auto u = unlocked_sets("Full", a);
  CHECK(u.resolution == std::vector<int>{48, 56, 64});
  CHECK(u.kernel == std::vector<int>{7});
  CHECK(u.level == std::vector<int>{7});
  CHECK(u.height == std::vector<int>{5});
  CHECK(u.depth == std::vector<int>{4});
  CHECK(u.width == std::vector<int>{6});

  CHECK(unlocked_sets("EKS", a).kernel == std::vector<int>{3, 5, 7});
  CHECK(unlocked_sets("EL1", a).level == std::vector<int>{3, 5, 6, 7});
  CHECK(unlocked_sets("EL2", a).level == std::vector<int>{1, 2, 3, 4, 5, 6, 7});
  CHECK(unlocked_sets("EH1", a).height == std::vector<int>{4, 5});
  CHECK(unlocked_sets("EH2", a).height == std::vector<int>{3, 4, 5});
  CHECK(unlocked_sets("EH3", a).height == std::vector<int>{2, 3, 4, 5});
  CHECK(unlocked_sets("EH4", a).height == std::vector<int>{1, 2, 3, 4, 5});
  CHECK(unlocked_sets("EH4", a).depth == std::vector<int>{4});
  CHECK(unlocked_sets("ED1", a).depth == std::vector<int>{3, 4});
  u = unlocked_sets("ED2", a);
  CHECK(u.depth == std::vector<int>{2, 3, 4});
  CHECK(u.width == std::vector<int>{6});
  CHECK(unlocked_sets("EW1", a).width == std::vector<int>{4, 6});
  u = unlocked_sets("EW2", a);
  CHECK(u.width == std::vector<int>{3, 4, 6});
  CHECK(u.kernel == std::vector<int>{3, 5, 7});
  CHECK(u.height == std::vector<int>{1, 2, 3, 4, 5});

  const auto b = ArchSpec::ofa_mbv3("SE_B");
  CHECK(unlocked_sets("EW2", b).level == std::vector<int>{7});
  CHECK(unlocked_sets("EW2", b).height == std::vector<int>{5});
  CHECK_THROWS_AS(unlocked_sets("EL1", b), ConfigError);
  CHECK_THROWS_AS(unlocked_sets("EH2", b), ConfigError);
}

TEST_CASE("miniature schedules keep the distance from the maximum") {
  const auto m = ArchSpec::miniature("EE_DP", 4, 2);
  CHECK(unlocked_sets("Full", m).height == std::vector<int>{2});
  CHECK(unlocked_sets("EH1", m).height == std::vector<int>{1, 2});
  CHECK(unlocked_sets("EH4", m).height == std::vector<int>{1, 2});
  CHECK(unlocked_sets("ED1", m).depth == std::vector<int>{1, 2});
  CHECK(unlocked_sets("ED2", m).depth == std::vector<int>{1, 2});
}

TEST_CASE("sweep cardinalities") {
  const auto ee_b = ArchSpec::ofa_mbv3("EE_B");
  CHECK(enumerate_space("EH2", ee_b).size() == 27);
  for (const auto& v : all_variants()) {
    const auto a = ArchSpec::ofa_mbv3(v);
    CHECK(enumerate_space("Full", a).size() == 3);
    size_t prev = 0;
    for (const auto& p : phase_sequence(a)) {
      const auto space = enumerate_space(p.name, a);
      CHECK(space.size() == space_size(p.unlocked));
      CHECK(space.size() >= prev);
      prev = space.size();
      std::set<std::string> keys;
      for (const auto& c : space) {
        c.validate(a);
        keys.insert(c.key());
      }
      CHECK(keys.size() == space.size());
      CHECK(std::find(space.begin(), space.end(), SubnetConfig::maximal(a, 64)) != space.end());
    }
  }
}

TEST_CASE("lr schedule: linear warmup then cosine") {
  const double lr = 0.03;
  const int64_t total = 1000, warmup = 50;
  CHECK(lr_at(lr, 0, total, warmup) == doctest::Approx(lr / 100));
  CHECK(lr_at(lr, 25, total, warmup) == doctest::Approx(lr / 100 + (lr - lr / 100) * 0.5));
  CHECK(lr_at(lr, 50, total, warmup) == doctest::Approx(lr));
  const int64_t mid = warmup + (total - warmup) / 2;
  CHECK(lr_at(lr, mid, total, warmup) == doctest::Approx(lr / 2));
  const int64_t t = 700;
  CHECK(lr_at(lr, t, total, warmup) ==
        doctest::Approx(0.5 * lr * (1 + std::cos(std::numbers::pi * (t - warmup) / double(total - warmup)))));
  CHECK(lr_at(lr, total, total, warmup) == doctest::Approx(0.0));
  CHECK(lr_at(lr, 0, total, 0) == doctest::Approx(lr));
}

TEST_CASE("sampling stays inside the phase space") {
  std::mt19937_64 rng(1);
  for (const auto& v : all_variants()) {
    const auto a = ArchSpec::ofa_mbv3(v);
    for (const auto& p : phase_sequence(a)) {
      const auto space = enumerate_space(p.name, a);
      for (int i = 0; i < 20; ++i) {
        const int r = sample_resolution(p.unlocked, rng);
        const auto c = sample_config(a, p, r, rng);
        CHECK(c.resolution == r);
        if (p.n_subnets == 0) CHECK(c == SubnetConfig::maximal(a, r));
        CHECK(std::find(space.begin(), space.end(), c) != space.end());
        const auto s = sample_config(a, p, r, rng, true);
        s.validate(a);
      }
    }
  }
}

TEST_CASE("one maximal step equals a plain SGD step up to rounding") {
  const auto arch = ArchSpec::miniature("SE_B", 4);
  Supernet a(arch, 3);
  Supernet b = a.clone();
  std::mt19937_64 data_rng(3);
  const Tensor x = oracle::random_tensor({4, 3, 48, 48}, data_rng);
  const std::vector<int> labels{0, 1, 2, 3};
  PhaseSpec full = table_phase("Full");
  full.unlocked = unlocked_sets("Full", arch);

  Sgd opt;
  std::mt19937_64 rng(4);
  train_step(a, x, full, opt, 0.1, rng,
             [&](const std::vector<Tensor>& z, const SubnetConfig&) { return ops::cross_entropy(z.back(), labels); });

  ExecOptions exec;
  exec.mode = ops::NormMode::train;
  ops::cross_entropy(b.forward(x, SubnetConfig::maximal(arch, 48), exec).back(), labels).backward();
  for (auto& [name, p] : b.params()) {
    if (!p.trainable || !p.tensor.has_grad()) continue;
    auto w = p.tensor.data();
    auto g = p.tensor.grad();
    for (size_t i = 0; i < w.size(); ++i) {
      const float d = g[i] + (p.decay ? 3e-5f : 0.0f) * w[i];
      w[i] -= 0.1f * d;
    }
  }
  for (const auto& [name, p] : a.params()) {
    INFO(name);
    CHECK(oracle::max_abs_diff(p.tensor.data(), b.params().at(name).tensor.data()) < 1e-6);
  }
}

TEST_CASE("two identical sampled subnets accumulate exactly twice the gradient") {
  const auto arch = ArchSpec::miniature("SE_B", 4);
  std::mt19937_64 data_rng(5);
  const Tensor x = oracle::random_tensor({2, 3, 48, 48}, data_rng);
  const std::vector<int> labels{1, 3};
  auto loss = [&](const std::vector<Tensor>& z, const SubnetConfig&) { return ops::cross_entropy(z.back(), labels); };
  PhaseSpec p = table_phase("EKS");
  p.unlocked = unlocked_sets("Full", arch);  // single point: every draw is the same config

  std::map<std::string, std::vector<float>> v1, v2;
  for (int n : {1, 2}) {
    Supernet net(arch, 5);
    Sgd opt(0.9, 0.0);
    p.n_subnets = n;
    std::mt19937_64 rng(6);
    const auto stats = train_step(net, x, p, opt, 0.0, rng, loss);
    CHECK(stats.configs.size() == static_cast<size_t>(n));
    (n == 1 ? v1 : v2) = opt.velocity();
  }
  REQUIRE(v1.size() == v2.size());
  for (const auto& [name, v] : v1)
    for (size_t i = 0; i < v.size(); ++i) REQUIRE(v2.at(name)[i] == 2.0f * v[i]);
}

TEST_CASE("sgd momentum and weight decay") {
  Supernet net(ArchSpec::miniature("SE_B", 4), 1);
  Tensor w = net.get("tail.fc.weight"), b = net.get("tail.fc.bias");
  const double w0 = w.data()[0], b0 = b.data()[0];
  Sgd opt(0.9, 0.1);
  double ew = w0, eb = b0, vw = 0.0, vb = 0.0;
  for (int step = 0; step < 3; ++step) {
    net.zero_grad();
    for (auto& g : w.impl()->ensure_grad()) g = 1.0f;
    for (auto& g : b.impl()->ensure_grad()) g = 1.0f;
    opt.step(net, 0.5);
    vw = (step == 0 ? 0.0 : 0.9 * vw) + (1.0 + 0.1 * ew);
    vb = (step == 0 ? 0.0 : 0.9 * vb) + 1.0;
    ew -= 0.5 * vw;
    eb -= 0.5 * vb;
    CHECK(w.data()[0] == doctest::Approx(ew).epsilon(1e-6));
    CHECK(b.data()[0] == doctest::Approx(eb).epsilon(1e-6));
  }
  CHECK(opt.velocity().size() == 2);
  opt.reset();
  CHECK(opt.velocity().empty());
}
