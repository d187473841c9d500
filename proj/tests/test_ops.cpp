#include <doctest.h>

#include <cmath>
#include <numeric>

#include "ofa/error.hpp"
#include "ofa/ops.hpp"
#include "oracles.hpp"

using namespace ofa;
using oracle::check_gradients;
using oracle::random_tensor;

namespace {

constexpr double kGradTol = 1e-3;

void expect_grad_ok(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> in) {
  const auto r = check_gradients(f, std::move(in));
  INFO("rel error " << r.rel_error << " max abs " << r.max_abs << " over " << r.checked);
  CHECK(r.checked > 0);
  CHECK(r.rel_error < kGradTol);
}

}  // namespace

TEST_CASE("conv2d: identity 1x1 kernel returns the input") {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({1, 1, 3, 3}, rng);
  Tensor w({1, 1, 1, 1}, 1.0f);
  Tensor y = ops::conv2d(x, w, 1, 0, 1);
  CHECK(y.shape() == x.shape());
  CHECK(oracle::max_abs_diff(y.data(), x.data()) == 0.0);
}

TEST_CASE("conv2d: ones 4x4 with ones 3x3, stride 2, pad 1") {
  Tensor x({1, 1, 4, 4}, 1.0f);
  Tensor w({1, 1, 3, 3}, 1.0f);
  Tensor y = ops::conv2d(x, w, 2, 1, 1);
  REQUIRE(y.shape() == Shape{1, 1, 2, 2});
  CHECK(y.data()[0] == 4.0f);
  CHECK(y.data()[1] == 6.0f);
  CHECK(y.data()[2] == 6.0f);
  CHECK(y.data()[3] == 9.0f);
}

TEST_CASE("conv2d: 64x64, k3, stride 2, pad 1 gives 32x32") {
  Tensor x({1, 2, 64, 64}, 0.5f);
  Tensor w({4, 2, 3, 3}, 0.1f);
  CHECK(ops::conv2d(x, w, 2, 1, 1).shape() == Shape{1, 4, 32, 32});
}

TEST_CASE("conv2d matches the direct-loop oracle") {
  std::mt19937_64 rng(2);
  struct Case {
    int64_t c, o, h, k;
    int stride, pad, groups;
  };
  const Case cases[] = {{3, 5, 7, 3, 1, 1, 1}, {4, 6, 9, 3, 2, 1, 1}, {6, 6, 8, 5, 1, 2, 6}, {6, 6, 9, 7, 2, 3, 6},
                        {4, 8, 5, 1, 1, 0, 1}, {4, 8, 6, 1, 2, 0, 1}, {4, 4, 6, 3, 2, 1, 2}, {8, 8, 2, 7, 1, 3, 8}};
  for (const auto& c : cases) {
    Tensor x = random_tensor({2, c.c, c.h, c.h}, rng);
    Tensor w = random_tensor({c.o, c.c / c.groups, c.k, c.k}, rng);
    const Tensor y = ops::conv2d(x, w, c.stride, c.pad, c.groups);
    const auto ref = oracle::conv2d_ref(x, w, c.stride, c.pad, c.groups);
    REQUIRE(static_cast<size_t>(y.numel()) == ref.size());
    double m = 0.0;
    for (size_t i = 0; i < ref.size(); ++i) m = std::max(m, std::fabs(y.data()[i] - ref[i]));
    CHECK(m < 1e-5);
  }
}

TEST_CASE("hswish reference points") {
  CHECK(ops::hswish_scalar(0.0f) == 0.0f);
  CHECK(ops::hswish_scalar(3.0f) == 3.0f);
  CHECK(ops::hswish_scalar(-3.0f) == 0.0f);
  CHECK(ops::hswish_scalar(1.0f) == doctest::Approx(1.0 * 4.0 / 6.0));
  CHECK(ops::hsigmoid_scalar(0.0f) == doctest::Approx(0.5));
  CHECK(ops::hsigmoid_scalar(10.0f) == 1.0f);
}

TEST_CASE("cross entropy of uniform logits is ln C") {
  for (int c : {2, 5, 200}) {
    Tensor z({3, c}, 0.7f);
    const std::vector<int> labels{0, c - 1, c / 2};
    CHECK(ops::cross_entropy(z, labels).item() == doctest::Approx(std::log(c)).epsilon(1e-6));
  }
}

TEST_CASE("soft cross entropy at its minimum equals the target entropy") {
  std::mt19937_64 rng(3);
  Tensor z = random_tensor({4, 6}, rng, -2.0f, 2.0f);
  Tensor p = ops::softmax(z);
  double h = 0.0;
  for (float v : p.data()) h -= v * std::log(v);
  CHECK(ops::soft_cross_entropy(z, p).item() == doctest::Approx(h / 4).epsilon(1e-5));
}

TEST_CASE("cross entropy of two hand-set rows") {
  Tensor z({2, 3}, std::vector<float>{1.0f, 2.0f, 3.0f, 0.5f, -0.5f, 0.0f});
  const std::vector<int> labels{2, 1};
  auto nll = [](std::vector<double> row, int y) {
    double m = *std::max_element(row.begin(), row.end()), s = 0.0;
    for (double v : row) s += std::exp(v - m);
    return -(row[static_cast<size_t>(y)] - m - std::log(s));
  };
  const double expected = 0.5 * (nll({1, 2, 3}, 2) + nll({0.5, -0.5, 0}, 1));
  CHECK(ops::cross_entropy(z, labels).item() == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("gradient of sum(w * x) is x") {
  std::mt19937_64 rng(4);
  Tensor w = random_tensor({5}, rng, -1, 1, true);
  Tensor x = random_tensor({5}, rng);
  ops::sum(ops::mul(w, x)).backward();
  for (int i = 0; i < 5; ++i) CHECK(w.grad()[i] == x.data()[i]);
}

TEST_CASE("two backward calls accumulate exactly twice the gradient") {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({1, 2, 5, 5}, rng, -1, 1, true);
  Tensor w = random_tensor({3, 2, 3, 3}, rng, -1, 1, true);
  Tensor loss = ops::sum(ops::hswish(ops::conv2d(x, w, 1, 1, 1)));
  loss.backward();
  const std::vector<float> once(w.grad().begin(), w.grad().end());
  loss.backward();
  for (size_t i = 0; i < once.size(); ++i) CHECK(w.grad()[i] == 2.0f * once[i]);
}

TEST_CASE("no-grad mode records no graph") {
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({3}, rng, -1, 1, true);
  NoGradGuard ng;
  Tensor y = ops::scale(x, 2.0f);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("finite differences: elementwise and reductions") {
  std::mt19937_64 rng(10);
  auto a = random_tensor({2, 3, 4}, rng, -1, 1, true);
  auto b = random_tensor({2, 3, 4}, rng, -1, 1, true);
  expect_grad_ok([](const auto& in) { return ops::add(in[0], in[1]); }, {a, b});
  expect_grad_ok([](const auto& in) { return ops::mul(in[0], in[1]); }, {a, b});
  expect_grad_ok([](const auto& in) { return ops::scale(in[0], -1.7f); }, {a});
  expect_grad_ok([](const auto& in) { return ops::sum(in[0]); }, {a});
  expect_grad_ok([](const auto& in) { return ops::mean_of({in[0], in[1]}); }, {a, b});
  expect_grad_ok([](const auto& in) { return ops::reshape(in[0], {6, 4}); }, {a});
}

TEST_CASE("finite differences: activations") {
  std::mt19937_64 rng(11);
  auto x = random_tensor({2, 3, 4, 4}, rng, -5, 5, true);
  oracle::avoid_kinks(x, {-3.0f, 0.0f, 3.0f});
  expect_grad_ok([](const auto& in) { return ops::relu(in[0]); }, {x});
  expect_grad_ok([](const auto& in) { return ops::hswish(in[0]); }, {x});
  expect_grad_ok([](const auto& in) { return ops::hsigmoid(in[0]); }, {x});
}

TEST_CASE("finite differences: convolutions") {
  std::mt19937_64 rng(12);
  SUBCASE("dense 3x3 stride 1") {
    auto x = random_tensor({2, 3, 5, 5}, rng, -1, 1, true);
    auto w = random_tensor({4, 3, 3, 3}, rng, -1, 1, true);
    expect_grad_ok([](const auto& in) { return ops::conv2d(in[0], in[1], 1, 1, 1); }, {x, w});
  }
  SUBCASE("dense 3x3 stride 2") {
    auto x = random_tensor({2, 3, 6, 6}, rng, -1, 1, true);
    auto w = random_tensor({4, 3, 3, 3}, rng, -1, 1, true);
    expect_grad_ok([](const auto& in) { return ops::conv2d(in[0], in[1], 2, 1, 1); }, {x, w});
  }
  SUBCASE("pointwise, strided") {
    auto x = random_tensor({2, 4, 5, 5}, rng, -1, 1, true);
    auto w = random_tensor({3, 4, 1, 1}, rng, -1, 1, true);
    expect_grad_ok([](const auto& in) { return ops::conv2d(in[0], in[1], 1, 0, 1); }, {x, w});
    expect_grad_ok([](const auto& in) { return ops::conv2d(in[0], in[1], 2, 0, 1); }, {x, w});
  }
  SUBCASE("depthwise 3, 5, 7") {
    for (int k : {3, 5, 7})
      for (int s : {1, 2}) {
        auto x = random_tensor({2, 3, 7, 7}, rng, -1, 1, true);
        auto w = random_tensor({3, 1, k, k}, rng, -1, 1, true);
        expect_grad_ok([k, s](const auto& in) { return ops::conv2d(in[0], in[1], s, k / 2, 3); }, {x, w});
      }
  }
  SUBCASE("grouped") {
    auto x = random_tensor({1, 4, 5, 5}, rng, -1, 1, true);
    auto w = random_tensor({6, 2, 3, 3}, rng, -1, 1, true);
    expect_grad_ok([](const auto& in) { return ops::conv2d(in[0], in[1], 1, 1, 2); }, {x, w});
  }
}

TEST_CASE("finite differences: batch norm") {
  std::mt19937_64 rng(13);
  auto x = random_tensor({4, 3, 3, 3}, rng, -2, 2, true);
  auto g = random_tensor({3}, rng, 0.5, 1.5, true);
  auto b = random_tensor({3}, rng, -0.5, 0.5, true);
  for (auto mode : {ops::NormMode::train, ops::NormMode::eval}) {
    ops::RunningStats st{random_tensor({3}, rng, -0.1f, 0.1f), random_tensor({3}, rng, 0.5f, 1.5f), {}};
    ops::NormOptions opt;
    opt.mode = mode;
    expect_grad_ok([&](const auto& in) { return ops::batch_norm(in[0], in[1], in[2], st, opt); }, {x, g, b});
  }
}

TEST_CASE("batch norm eval mode applies the running statistics") {
  Tensor x({1, 2, 1, 1}, std::vector<float>{3.0f, -1.0f});
  Tensor g({2}, std::vector<float>{2.0f, 1.0f}), b({2}, std::vector<float>{0.5f, 0.0f});
  ops::RunningStats st{Tensor({2}, std::vector<float>{1.0f, 0.0f}), Tensor({2}, std::vector<float>{4.0f, 1.0f}), {}};
  ops::NormOptions opt;
  opt.eps = 0.0f;
  Tensor y = ops::batch_norm(x, g, b, st, opt);
  CHECK(y.data()[0] == doctest::Approx(2.0 * (3.0 - 1.0) / 2.0 + 0.5));
  CHECK(y.data()[1] == doctest::Approx(-1.0));
}

TEST_CASE("batch norm train mode updates running statistics with momentum") {
  Tensor x({2, 1, 1, 2}, std::vector<float>{1.0f, 2.0f, 3.0f, 4.0f});
  Tensor g({1}, 1.0f), b({1}, 0.0f);
  Tensor mean({1}, 0.0f), var({1}, 1.0f);
  ops::NormOptions opt;
  opt.mode = ops::NormMode::train;
  opt.momentum = 0.1f;
  ops::batch_norm(x, g, b, {mean, var, {}}, opt);
  CHECK(mean.data()[0] == doctest::Approx(0.25));
  // unbiased batch variance of {1,2,3,4} is 5/3
  CHECK(var.data()[0] == doctest::Approx(0.9 + 0.1 * 5.0 / 3.0));
}

TEST_CASE("finite differences: linear, pooling, gating, slicing") {
  std::mt19937_64 rng(14);
  auto x = random_tensor({3, 5}, rng, -1, 1, true);
  auto w = random_tensor({4, 5}, rng, -1, 1, true);
  auto b = random_tensor({4}, rng, -1, 1, true);
  expect_grad_ok([](const auto& in) { return ops::linear(in[0], in[1], in[2]); }, {x, w, b});
  expect_grad_ok([](const auto& in) { return ops::linear(in[0], in[1], Tensor()); }, {x, w});

  auto img = random_tensor({2, 3, 5, 5}, rng, -1, 1, true);
  expect_grad_ok([](const auto& in) { return ops::global_avg_pool(in[0]); }, {img});

  // distinct values spaced well beyond eps keep the max unambiguous
  Tensor pool_in({1, 2, 5, 5});
  std::vector<int> perm(50);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  for (size_t i = 0; i < 50; ++i) pool_in.data()[i] = 0.05f * static_cast<float>(perm[i]);
  pool_in.set_requires_grad(true);
  expect_grad_ok([](const auto& in) { return ops::max_pool2x2(in[0]); }, {pool_in});

  auto gate = random_tensor({2, 3, 1, 1}, rng, 0, 1, true);
  expect_grad_ok([](const auto& in) { return ops::channel_scale(in[0], in[1]); }, {img, gate});

  const std::vector<int> idx{2, 0};
  expect_grad_ok([&](const auto& in) { return ops::index_select(in[0], 1, idx); }, {img});
  expect_grad_ok([&](const auto& in) { return ops::index_select(in[0], 0, idx); }, {w});
}

TEST_CASE("max pool uses ceil mode") {
  Tensor x({1, 1, 3, 3}, std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor y = ops::max_pool2x2(x);
  REQUIRE(y.shape() == Shape{1, 1, 2, 2});
  CHECK(y.data()[0] == 5.0f);
  CHECK(y.data()[1] == 6.0f);
  CHECK(y.data()[2] == 8.0f);
  CHECK(y.data()[3] == 9.0f);
}

TEST_CASE("finite differences: kernel crop and transform") {
  std::mt19937_64 rng(15);
  auto k7 = random_tensor({3, 1, 7, 7}, rng, -1, 1, true);
  auto m = random_tensor({25, 25}, rng, -0.3f, 0.3f, true);
  expect_grad_ok([](const auto& in) { return ops::center_crop(in[0], 5); }, {k7});
  expect_grad_ok([](const auto& in) { return ops::kernel_matmul(ops::center_crop(in[0], 5), in[1]); }, {k7, m});
}

TEST_CASE("finite differences: losses") {
  std::mt19937_64 rng(16);
  auto z = random_tensor({3, 4}, rng, -2, 2, true);
  const std::vector<int> labels{1, 3, 0};
  expect_grad_ok([&](const auto& in) { return ops::cross_entropy(in[0], labels); }, {z});
  Tensor target = ops::softmax(random_tensor({3, 4}, rng, -1, 1));
  expect_grad_ok([&](const auto& in) { return ops::soft_cross_entropy(in[0], target); }, {z});
}

TEST_CASE("shape errors are reported as dimension errors") {
  Tensor a({2, 3}), b({3, 2});
  CHECK_THROWS_AS(ops::add(a, b), DimensionError);
  Tensor x({1, 3, 4, 4}), w({2, 2, 3, 3});
  CHECK_THROWS_AS(ops::conv2d(x, w, 1, 1, 1), DimensionError);
  CHECK_THROWS_AS(ops::linear(Tensor({2, 5}), Tensor({3, 4}), Tensor()), DimensionError);
}
