#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "ofa/elastic.hpp"
#include "ofa/error.hpp"
#include "oracles.hpp"

using namespace ofa;
using oracle::random_tensor;

namespace {

Tensor identity(int n) {
  Tensor t({n, n});
  for (int i = 0; i < n; ++i) t.data()[static_cast<size_t>(i) * n + i] = 1.0f;
  return t;
}

// Centre crop of one k x k kernel, flattened row-major.
std::vector<double> crop(const float* k, int from, int to) {
  std::vector<double> v;
  const int off = (from - to) / 2;
  for (int i = 0; i < to; ++i)
    for (int j = 0; j < to; ++j) v.push_back(k[(i + off) * from + j + off]);
  return v;
}

std::vector<double> matvec(const Tensor& m, const std::vector<double>& v) {
  const size_t n = v.size();
  std::vector<double> out(n, 0.0);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < n; ++j) out[i] += m.data()[i * n + j] * v[j];
  return out;
}

}  // namespace

TEST_CASE("transform to 7 is the identity") {
  std::mt19937_64 rng(1);
  const Tensor k7 = random_tensor({4, 1, 7, 7}, rng);
  const Tensor out = elastic::transform_kernel(k7, random_tensor({25, 25}, rng), random_tensor({9, 9}, rng), 7);
  CHECK(oracle::max_abs_diff(out.data(), k7.data()) == 0.0);
}

TEST_CASE("identity matrices reduce to centre crops") {
  std::mt19937_64 rng(2);
  const Tensor k7 = random_tensor({3, 1, 7, 7}, rng);
  const Tensor k5 = elastic::transform_kernel(k7, identity(25), identity(9), 5);
  const Tensor k3 = elastic::transform_kernel(k7, identity(25), identity(9), 3);
  REQUIRE(k5.shape() == Shape{3, 1, 5, 5});
  REQUIRE(k3.shape() == Shape{3, 1, 3, 3});
  for (int c = 0; c < 3; ++c) {
    const auto c5 = crop(k7.data().data() + c * 49, 7, 5);
    const auto c3 = crop(k7.data().data() + c * 49, 7, 3);
    for (int i = 0; i < 25; ++i) CHECK(k5.data()[c * 25 + i] == static_cast<float>(c5[i]));
    for (int i = 0; i < 9; ++i) CHECK(k3.data()[c * 9 + i] == static_cast<float>(c3[i]));
  }
}

TEST_CASE("random matrices match the flatten-multiply-reshape oracle") {
  std::mt19937_64 rng(3);
  const Tensor k7 = random_tensor({2, 1, 7, 7}, rng);
  const Tensor m75 = random_tensor({25, 25}, rng), m53 = random_tensor({9, 9}, rng);
  const Tensor k5 = elastic::transform_kernel(k7, m75, m53, 5);
  const Tensor k3 = elastic::transform_kernel(k7, m75, m53, 3);
  for (int c = 0; c < 2; ++c) {
    const auto v5 = matvec(m75, crop(k7.data().data() + c * 49, 7, 5));
    std::vector<float> v5f(v5.begin(), v5.end());
    const auto v3 = matvec(m53, crop(v5f.data(), 5, 3));
    for (int i = 0; i < 25; ++i) CHECK(k5.data()[c * 25 + i] == doctest::Approx(v5[i]).epsilon(1e-5));
    for (int i = 0; i < 9; ++i) CHECK(k3.data()[c * 9 + i] == doctest::Approx(v3[i]).epsilon(1e-4));
  }
}

TEST_CASE("transform gradients pass finite differences") {
  std::mt19937_64 rng(4);
  auto k7 = random_tensor({2, 1, 7, 7}, rng, -1, 1, true);
  auto m75 = random_tensor({25, 25}, rng, -0.3f, 0.3f, true);
  auto m53 = random_tensor({9, 9}, rng, -0.5f, 0.5f, true);
  for (int target : {5, 3}) {
    const auto r = oracle::check_gradients(
        [target](const auto& in) { return elastic::transform_kernel(in[0], in[1], in[2], target); }, {k7, m75, m53});
    INFO("target " << target << " rel " << r.rel_error);
    CHECK(r.rel_error < 1e-3);
  }
}

TEST_CASE("transform rejects unsupported sizes") {
  Tensor k7({1, 1, 7, 7});
  CHECK_THROWS_AS(elastic::transform_kernel(k7, identity(25), identity(9), 4), Error);
  CHECK_THROWS_AS(elastic::transform_kernel(Tensor({1, 1, 5, 5}), identity(25), identity(9), 3), DimensionError);
}

TEST_CASE("channel selection: hand examples") {
  CHECK(elastic::select_top({3.0, 1.0, 2.0}, 2) == std::vector<int>{0, 2});
  CHECK(elastic::select_top({3.0, 1.0, 2.0}, 3) == std::vector<int>{0, 1, 2});
  CHECK(elastic::select_top({1.0, 1.0, 1.0}, 2) == std::vector<int>{0, 1});
  CHECK_THROWS(elastic::select_top({1.0}, 0));
  CHECK_THROWS(elastic::select_top({1.0}, 2));
  Tensor w({3, 2}, std::vector<float>{1, -2, 0.5f, 0, -4, 0});
  CHECK(elastic::channel_l1_norms(w, 0) == std::vector<double>{3.0, 0.5, 4.0});
  CHECK(elastic::channel_l1_norms(w, 1) == std::vector<double>{5.5, 2.0});
  CHECK(elastic::select_channels(w, 1) == std::vector<int>{2});
}

TEST_CASE("channel selection matches a sort oracle and nests") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> dim(2, 24);
  for (int trial = 0; trial < 1000; ++trial) {
    const int c = dim(rng);
    Tensor w = random_tensor({c, 3, 1, 1}, rng);
    if (trial % 7 == 0) w.data()[3] = w.data()[0];  // occasional tie pattern
    std::vector<double> norms(static_cast<size_t>(c), 0.0);
    for (int i = 0; i < c; ++i)
      for (int j = 0; j < 3; ++j) norms[static_cast<size_t>(i)] += std::fabs(w.data()[i * 3 + j]);
    std::vector<int> order(static_cast<size_t>(c));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      return norms[static_cast<size_t>(a)] != norms[static_cast<size_t>(b)] ? norms[static_cast<size_t>(a)] > norms[static_cast<size_t>(b)] : a < b;
    });
    std::vector<int> prev;
    for (int k = 1; k <= c; ++k) {
      std::vector<int> expected(order.begin(), order.begin() + k);
      std::sort(expected.begin(), expected.end());
      const auto got = elastic::select_channels(w, k);
      REQUIRE(got == expected);
      REQUIRE(std::includes(got.begin(), got.end(), prev.begin(), prev.end()));
      prev = got;
    }
    CHECK(static_cast<int>(prev.size()) == c);
  }
}

TEST_CASE("expand-ratio selections nest inside the supernet") {
  const auto arch = ArchSpec::miniature("SE_B", 4);
  Supernet net(arch, 6);
  std::mt19937_64 rng(6);
  for (auto& [name, p] : net.params())
    if (name.find("expand.weight") != std::string::npos)
      for (auto& v : p.tensor.data()) v = std::uniform_real_distribution<float>(-1, 1)(rng);
  const Tensor w = net.get(level_prefix(1, 0) + ".mobile.expand.weight");
  const auto f4 = elastic::select_channels(w, arch.hidden_channels(1, 4));
  const auto f3 = elastic::select_channels(w, arch.hidden_channels(1, 3));
  CHECK(std::includes(f4.begin(), f4.end(), f3.begin(), f3.end()));
  auto cfg = SubnetConfig::uniform(arch, 64, 7, 3, 2, 7, 2);
  const auto lv = elastic::effective_level(net, 1, 0, cfg);
  const Tensor expected = ops::index_select(w, 0, f3);
  CHECK(oracle::max_abs_diff(lv.mobile->expand_w.data(), expected.data()) == 0.0);
}
