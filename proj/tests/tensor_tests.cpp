#include <doctest.h>

#include <cmath>

#include "vlab/gradcheck.hpp"
#include "vlab/tensor.hpp"

using namespace vlab;

namespace {

Tensor64 randn64(Shape shape, std::uint64_t seed, double stddev = 1.0) {
  Rng rng(seed);
  return Tensor64::randn(std::move(shape), rng, stddev);
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
  auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  auto m = Tensor::from_data({2, 2}, {3, -1, 2, 5});
  auto out = matmul(eye, m);
  CHECK(out.values() == m.values());

  auto a = Tensor::from_data({1, 2}, {1, 2});
  auto b = Tensor::from_data({2, 1}, {3, 4});
  CHECK(matmul(a, b).item() == doctest::Approx(11.0));
}

TEST_CASE("matmul shape error names both shapes") {
  auto a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2, 3)") != std::string::npos);
    CHECK(msg.find("(2, 2)") != std::string::npos);
  }
}

TEST_CASE("matmul gradient vs central finite difference") {
  auto a = randn64({4, 5}, 11);
  auto b = randn64({5, 3}, 12);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  auto w = randn64({4, 3}, 13);  // fixed weights to make the loss non-trivial
  auto forward = [&]() { return sum_all(mul(matmul(a, b), w)); };
  auto report = fd_check(forward, {{"a", &a}, {"b", &b}}, -1, 99);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("batched matmul broadcasting weights") {
  auto x = randn64({2, 3, 4}, 21);
  auto w = randn64({4, 5}, 22);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  auto y = matmul(x, w);
  CHECK(y.shape() == Shape{2, 3, 5});
  auto forward = [&]() { return mean_all(gelu(matmul(x, w))); };
  auto report = fd_check(forward, {{"x", &x}, {"w", &w}}, -1, 98);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("softmax symmetry and overflow safety") {
  auto u = softmax(Tensor::from_data({3}, {0, 0, 0}), -1);
  for (float v : u.values()) CHECK(v == doctest::Approx(1.0f / 3.0f));

  auto big = softmax(Tensor::from_data({2}, {1000.0f, 0.0f}), -1);
  CHECK(big.values()[0] == doctest::Approx(1.0f).epsilon(1e-6));
  CHECK(big.values()[1] == doctest::Approx(0.0f).epsilon(1e-6));
}

TEST_CASE("softmax rows sum to one on random shapes") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Index rows = 1 + static_cast<Index>(rng.uniform_index(6));
    Index cols = 1 + static_cast<Index>(rng.uniform_index(9));
    auto x = Tensor::randn({rows, cols}, rng, 3.0f);
    auto y = softmax(x, -1);
    for (Index r = 0; r < rows; ++r) {
      float s = 0;
      for (Index c = 0; c < cols; ++c)
        s += y.values()[static_cast<std::size_t>(r * cols + c)];
      CHECK(s == doctest::Approx(1.0f).epsilon(1e-5));
    }
  }
}

TEST_CASE("softmax gradient on random 3x4 input") {
  auto x = randn64({3, 4}, 31);
  x.set_requires_grad(true);
  auto w = randn64({3, 4}, 32);
  auto forward = [&]() { return sum_all(mul(softmax(x, -1), w)); };
  auto report = fd_check(forward, {{"x", &x}}, -1, 97);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("softmax along a middle axis") {
  auto x = randn64({2, 3, 2}, 33);
  x.set_requires_grad(true);
  auto y = softmax(x, 1);
  // Sums along axis 1 are 1.
  for (Index o = 0; o < 2; ++o)
    for (Index i = 0; i < 2; ++i) {
      double s = 0;
      for (Index l = 0; l < 3; ++l)
        s += y.values()[static_cast<std::size_t>(o * 6 + l * 2 + i)];
      CHECK(s == doctest::Approx(1.0));
    }
  auto w = randn64({2, 3, 2}, 34);
  auto forward = [&]() { return sum_all(mul(softmax(x, 1), w)); };
  auto report = fd_check(forward, {{"x", &x}}, -1, 196);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("backward of sum gives ones") {
  auto x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  x.set_requires_grad(true);
  sum_all(x).backward();
  for (float g : x.grad()) CHECK(g == doctest::Approx(1.0f));
}

TEST_CASE("backward of sum of squares") {
  auto x = Tensor::from_data({3}, {1, 2, 3});
  x.set_requires_grad(true);
  sum_all(mul(x, x)).backward();
  CHECK(x.grad()[0] == doctest::Approx(2.0f));
  CHECK(x.grad()[1] == doctest::Approx(4.0f));
  CHECK(x.grad()[2] == doctest::Approx(6.0f));
}

TEST_CASE("backward requires scalar loss") {
  auto x = Tensor::from_data({2}, {1, 2});
  x.set_requires_grad(true);
  auto y = mul(x, x);
  CHECK_THROWS_AS(y.backward(), ContractError);
}

TEST_CASE("tape linearity: second backward without fresh forward throws") {
  auto x = Tensor::from_data({2}, {1, 2});
  x.set_requires_grad(true);
  auto loss = sum_all(mul(x, x));
  loss.backward();
  CHECK_THROWS_AS(loss.backward(), ContractError);
  // Fresh forward works and accumulates additively.
  auto loss2 = sum_all(mul(x, x));
  loss2.backward();
  CHECK(x.grad()[0] == doctest::Approx(4.0f));
}

TEST_CASE("tape is topologically ordered and leaves get exactly one grad pass") {
  auto x = randn64({3, 3}, 41);
  x.set_requires_grad(true);
  auto h = gelu(matmul(x, x));
  auto loss = mean_all(mul(h, h));
  auto tape = TapeT<double>::collect(loss);
  CHECK(tape.topologically_ordered());
  CHECK(tape.size() >= 4);
  loss.backward();
  CHECK(x.has_grad());
}

TEST_CASE("unreachable leaves get no grad") {
  auto x = Tensor::from_data({2}, {1, 2});
  auto y = Tensor::from_data({2}, {3, 4});
  x.set_requires_grad(true);
  y.set_requires_grad(true);
  sum_all(mul(x, x)).backward();
  CHECK(x.has_grad());
  CHECK(!y.has_grad());
}

TEST_CASE("cross entropy of uniform logits is ln(V)") {
  const Index v = 17;
  auto logits = Tensor::zeros({5, v});
  std::vector<Index> targets{0, 3, 9, 16, 2};
  std::vector<std::uint8_t> mask{1, 1, 1, 1, 1};
  auto loss = cross_entropy(logits, targets, mask);
  CHECK(loss.item() == doctest::Approx(std::log(static_cast<float>(v))));
}

TEST_CASE("cross entropy of confident correct logits is near zero") {
  auto logits = Tensor::zeros({2, 4});
  logits.values()[1] = 50.0f;   // row 0 target 1
  logits.values()[4 + 2] = 50.0f;  // row 1 target 2
  auto loss = cross_entropy(logits, {1, 2}, {1, 1});
  CHECK(loss.item() == doctest::Approx(0.0f).epsilon(1e-6));
}

TEST_CASE("masked positions never affect the loss") {
  Rng rng(7);
  auto logits = Tensor::randn({4, 6}, rng);
  std::vector<Index> targets{1, 2, 3, 4};
  std::vector<std::uint8_t> mask{1, 0, 1, 0};
  const float before = cross_entropy(logits, targets, mask).item();
  // Perturb masked rows arbitrarily.
  for (Index j = 0; j < 6; ++j) {
    logits.values()[static_cast<std::size_t>(6 + j)] += 100.0f;
    logits.values()[static_cast<std::size_t>(18 + j)] -= 42.0f;
  }
  const float after = cross_entropy(logits, targets, mask).item();
  CHECK(before == after);
}

TEST_CASE("cross entropy with empty mask is a contract error") {
  auto logits = Tensor::zeros({2, 3});
  CHECK_THROWS_AS(cross_entropy(logits, {0, 1}, {0, 0}), ContractError);
}

TEST_CASE("cross entropy gradient check") {
  auto logits = randn64({5, 7}, 51);
  logits.set_requires_grad(true);
  std::vector<Index> targets{1, 0, 6, 3, 3};
  std::vector<std::uint8_t> mask{1, 1, 0, 1, 1};
  auto forward = [&]() { return cross_entropy(logits, targets, mask); };
  auto report = fd_check(forward, {{"logits", &logits}}, -1, 96);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("elementwise suite gradients on randomized shapes") {
  // gelu, exp, log, div, layer-norm style compositions, reductions.
  for (std::uint64_t trial = 0; trial < 6; ++trial) {
    Rng shapes(trial + 100);
    Index rows = 1 + static_cast<Index>(shapes.uniform_index(5));
    Index cols = 1 + static_cast<Index>(shapes.uniform_index(7));
    auto x = randn64({rows, cols}, 500 + trial);
    auto y = randn64({rows, cols}, 600 + trial);
    x.set_requires_grad(true);
    y.set_requires_grad(true);
    auto forward = [&]() {
      auto soft = softmax(y, -1);
      auto pos = add_scalar(mul(soft, soft), 0.5);  // strictly positive
      auto z = add(gelu(x), log_(pos));
      auto e = exp_(scale(z, 0.1));
      return add(mean_all(e), sum_all(div(x, pos)));
    };
    auto report = fd_check(forward, {{"x", &x}, {"y", &y}}, 12, 700 + trial);
    CHECK(report.max_rel_err < 1e-4);
  }
}

TEST_CASE("reshape permute concat slice gradients") {
  auto x = randn64({2, 3, 4}, 61);
  auto y = randn64({2, 3, 4}, 62);
  x.set_requires_grad(true);
  y.set_requires_grad(true);
  auto forward = [&]() {
    auto cat = concat<double>({x, y}, 1);   // (2, 6, 4)
    auto sl = slice(cat, 1, 1, 4);          // (2, 4, 4)
    auto pm = permute(sl, {0, 2, 1});       // (2, 4, 4)
    auto rs = reshape(pm, {2, 16});
    return mean_all(mul(rs, rs));
  };
  auto report = fd_check(forward, {{"x", &x}, {"y", &y}}, -1, 95);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("embedding lookup forward and scatter-add gradient") {
  auto table = Tensor64::from_data({4, 2}, {0, 1, 10, 11, 20, 21, 30, 31});
  table.set_requires_grad(true);
  std::vector<Index> ids{2, 0, 2};
  auto out = embedding_rows(table, ids);
  CHECK(out.shape() == Shape{3, 2});
  CHECK(out.values()[0] == 20);
  CHECK(out.values()[2] == 0);
  CHECK(out.values()[5] == 21);
  auto w = randn64({3, 2}, 71);
  auto forward = [&]() { return sum_all(mul(embedding_rows(table, ids), w)); };
  auto report = fd_check(forward, {{"table", &table}}, -1, 94);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("suffix broadcast add and reductions") {
  auto x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor::from_data({3}, {10, 20, 30});
  auto y = add(x, b);
  CHECK(y.values() == std::vector<float>{11, 22, 33, 14, 25, 36});

  auto s = sum_axis(x, 0);
  CHECK(s.values() == std::vector<float>{5, 7, 9});
  auto m = mean_axis(x, 1);
  CHECK(m.values() == std::vector<float>{2, 5});

  auto x64 = randn64({3, 4}, 81);
  auto b64 = randn64({4}, 82);
  x64.set_requires_grad(true);
  b64.set_requires_grad(true);
  auto forward = [&]() { return mean_all(gelu(add(x64, b64))); };
  auto report = fd_check(forward, {{"x", &x64}, {"b", &b64}}, -1, 93);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("layer_norm op zero output on constant input and gradient") {
  auto x = Tensor::full({2, 5}, 3.7f);
  auto gain = Tensor::full({5}, 1.0f);
  auto bias = Tensor::zeros({5});
  auto y = layer_norm_op(x, gain, bias, 1e-5f);
  for (float v : y.values()) CHECK(v == doctest::Approx(0.0f));

  auto x64 = randn64({3, 6}, 91);
  auto g64 = randn64({6}, 92, 0.5);
  auto b64 = randn64({6}, 93, 0.5);
  x64.set_requires_grad(true);
  g64.set_requires_grad(true);
  b64.set_requires_grad(true);
  auto w = randn64({3, 6}, 94);
  auto forward = [&]() {
    return sum_all(mul(layer_norm_op(x64, g64, b64, 1e-5), w));
  };
  auto report = fd_check(forward, {{"x", &x64}, {"gain", &g64}, {"bias", &b64}}, -1, 92);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("two layer toy model: every parameter matches finite differences") {
  // Tiny MLP classifier; sweep every coordinate at 64-bit.
  const Index in = 5, hid = 7, out = 4, n = 6;
  auto x = randn64({n, in}, 101);
  auto w1 = randn64({in, hid}, 102, 0.5);
  auto b1 = randn64({hid}, 103, 0.1);
  auto w2 = randn64({hid, out}, 104, 0.5);
  auto b2 = randn64({out}, 105, 0.1);
  w1.set_requires_grad(true);
  b1.set_requires_grad(true);
  w2.set_requires_grad(true);
  b2.set_requires_grad(true);
  std::vector<Index> targets{0, 1, 2, 3, 1, 2};
  std::vector<std::uint8_t> mask{1, 1, 1, 1, 0, 1};
  auto forward = [&]() {
    auto h = gelu(add(matmul(x, w1), b1));
    auto logits = add(matmul(h, w2), b2);
    return cross_entropy(logits, targets, mask);
  };
  auto report = fd_check(forward,
                         {{"w1", &w1}, {"b1", &b1}, {"w2", &w2}, {"b2", &b2}}, -1, 91);
  CHECK(report.max_rel_err < 1e-3);
  CHECK(report.checked == in * hid + hid + hid * out + out);
}

TEST_CASE("determinism: identical seeds give bit-identical results") {
  auto run = []() {
    Rng rng(42);
    auto x = Tensor::randn({8, 8}, rng);
    auto w = Tensor::randn({8, 8}, rng);
    w.set_requires_grad(true);
    auto loss = mean_all(gelu(matmul(x, w)));
    loss.backward();
    return std::make_pair(loss.item(), w.grad());
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(l1 == l2);
  CHECK(g1 == g2);
}

TEST_CASE("expand_batch replicates and sums gradients") {
  auto q = randn64({3, 2}, 111);
  q.set_requires_grad(true);
  auto b = expand_batch(q, 4);
  CHECK(b.shape() == Shape{4, 3, 2});
  auto w = randn64({4, 3, 2}, 112);
  auto forward = [&]() { return sum_all(mul(expand_batch(q, 4), w)); };
  auto report = fd_check(forward, {{"q", &q}}, -1, 90);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("no-grad mode records nothing") {
  auto x = Tensor::from_data({2}, {1, 2});
  x.set_requires_grad(true);
  NoGradGuard ng;
  auto y = sum_all(mul(x, x));
  CHECK(!y.requires_grad());
  CHECK_THROWS_AS(y.backward(), ContractError);
}

TEST_CASE("causal bias and argmax helpers") {
  auto bias = causal_bias<float>(3);
  CHECK(bias.values()[1] == -1e9f);
  CHECK(bias.values()[3] == 0.0f);
  auto x = Tensor::from_data({2, 3}, {1, 5, 2, 9, 0, 3});
  auto am = argmax_last(x);
  CHECK(am == std::vector<Index>{1, 0});
}
