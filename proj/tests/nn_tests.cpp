#include <doctest.h>

#include "vlab/gradcheck.hpp"
#include "vlab/nn.hpp"

using namespace vlab;
using namespace vlab::nn;

TEST_CASE("layer_norm normalizes per position before affine") {
  Rng rng(1);
  auto x = Tensor::randn({4, 8}, rng, 3.0f);
  auto p = LayerNormParamsT<float>::make(8);
  auto y = layer_norm(x, p);
  for (Index r = 0; r < 4; ++r) {
    float mean = 0, var = 0;
    for (Index j = 0; j < 8; ++j) mean += y.values()[static_cast<std::size_t>(r * 8 + j)];
    mean /= 8;
    for (Index j = 0; j < 8; ++j) {
      float c = y.values()[static_cast<std::size_t>(r * 8 + j)] - mean;
      var += c * c;
    }
    var /= 8;
    CHECK(mean == doctest::Approx(0.0f).epsilon(1e-4));
    CHECK(var == doctest::Approx(1.0f).epsilon(1e-2));
  }
}

TEST_CASE("layer_norm rejects dim mismatch") {
  auto x = Tensor::zeros({2, 6});
  auto p = LayerNormParamsT<float>::make(5);
  CHECK_THROWS_AS(layer_norm(x, p), ShapeError);
}

TEST_CASE("layer_norm gradient through params and input") {
  Rng rng(2);
  auto x = Tensor64::randn({3, 5}, rng);
  auto p = LayerNormParamsT<double>::make(5);
  x.set_requires_grad(true);
  p.gain.set_requires_grad(true);
  p.bias.set_requires_grad(true);
  auto w = Tensor64::randn({3, 5}, rng);
  auto forward = [&]() { return sum_all(mul(layer_norm(x, p), w)); };
  auto report = fd_check(forward, {{"x", &x}, {"g", &p.gain}, {"b", &p.bias}}, -1, 3);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("attention with a single kv position returns its value projection") {
  Rng rng(4);
  auto p = AttentionParamsT<double>::make(6, 6, 8, 6, 2, rng);
  auto kv = Tensor64::randn({1, 1, 6}, rng);
  auto q1 = Tensor64::randn({1, 3, 6}, rng);
  auto q2 = Tensor64::randn({1, 3, 6}, rng);
  auto o1 = attention(q1, kv, p);
  auto o2 = attention(q2, kv, p);
  for (std::size_t i = 0; i < o1.values().size(); ++i)
    CHECK(o1.values()[i] == doctest::Approx(o2.values()[i]).epsilon(1e-9));
}

TEST_CASE("causal mask: future tokens cannot influence earlier outputs") {
  Rng rng(5);
  auto p = AttentionParamsT<float>::make(8, 8, 8, 8, 2, rng);
  auto x = Tensor::randn({1, 5, 8}, rng);
  auto base = attention(x, x, p, /*causal=*/true);
  auto perturbed = x.detach();
  for (Index j = 0; j < 8; ++j)
    perturbed.values()[static_cast<std::size_t>((4 * 8) + j)] += 7.5f;  // token 4
  auto out = attention(perturbed, perturbed, p, true);
  for (Index t = 0; t < 4; ++t)
    for (Index j = 0; j < 8; ++j) {
      auto idx = static_cast<std::size_t>(t * 8 + j);
      CHECK(base.values()[idx] == doctest::Approx(out.values()[idx]).epsilon(1e-6));
    }
}

TEST_CASE("cross attention shape contract: 64 visual tokens, 8 queries") {
  Rng rng(6);
  auto p = AttentionParamsT<float>::make(16, 12, 16, 16, 4, rng);
  auto queries = Tensor::randn({1, 8, 16}, rng);
  auto visual = Tensor::randn({1, 64, 12}, rng);
  auto out = attention(queries, visual, p);
  CHECK(out.shape() == Shape{1, 8, 16});
}

TEST_CASE("attention softmax rows sum to one (random shapes)") {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    Index lq = 1 + static_cast<Index>(rng.uniform_index(6));
    Index lk = 1 + static_cast<Index>(rng.uniform_index(6));
    auto q = Tensor::randn({2, lq, 8}, rng);
    auto kv = Tensor::randn({2, lk, 8}, rng);
    auto p = AttentionParamsT<float>::make(8, 8, 8, 8, 2, rng);
    // Recompute the softmax matrix the same way attention does.
    auto qh = nn::detail::split_heads(add(matmul(q, p.wq), p.bq), p.heads, p.head_dim);
    auto kh = nn::detail::split_heads(add(matmul(kv, p.wk), p.bk), p.heads, p.head_dim);
    auto sm = softmax(scale(matmul(qh, transpose_last2(kh)),
                            1.0f / std::sqrt(static_cast<float>(p.head_dim))), -1);
    const auto& v = sm.values();
    const Index rows = sm.numel() / lk;
    for (Index r = 0; r < rows; ++r) {
      float s = 0;
      for (Index c = 0; c < lk; ++c) s += v[static_cast<std::size_t>(r * lk + c)];
      CHECK(s == doctest::Approx(1.0f).epsilon(1e-5));
    }
  }
}

TEST_CASE("attention rejects head_dim mismatch") {
  CHECK_THROWS_AS(([] {
                    Rng rng(8);
                    (void)AttentionParamsT<float>::make(8, 8, 10, 8, 4, rng);
                  })(),
                  ContractError);
}

TEST_CASE("attention gradient check (cross, 64-bit)") {
  Rng rng(9);
  auto p = AttentionParamsT<double>::make(4, 6, 8, 4, 2, rng);
  auto q = Tensor64::randn({1, 3, 4}, rng);
  auto kv = Tensor64::randn({1, 5, 6}, rng);
  q.set_requires_grad(true);
  kv.set_requires_grad(true);
  p.wq.set_requires_grad(true);
  p.wk.set_requires_grad(true);
  p.wv.set_requires_grad(true);
  p.wo.set_requires_grad(true);
  p.bo.set_requires_grad(true);
  auto w = Tensor64::randn({1, 3, 4}, rng);
  auto forward = [&]() { return sum_all(mul(attention(q, kv, p), w)); };
  auto report = fd_check(forward,
                         {{"q", &q},
                          {"kv", &kv},
                          {"wq", &p.wq},
                          {"wk", &p.wk},
                          {"wv", &p.wv},
                          {"wo", &p.wo},
                          {"bo", &p.bo}},
                         -1, 10);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("ffn zero input with zero biases gives zero output") {
  Rng rng(11);
  auto p = FfnParamsT<float>::make(6, rng);
  auto x = Tensor::zeros({2, 5, 6});
  auto y = ffn(x, p);
  CHECK(y.shape() == Shape{2, 5, 6});
  for (float v : y.values()) CHECK(v == doctest::Approx(0.0f));
}

TEST_CASE("ffn preserves shape and passes gradient check") {
  Rng rng(12);
  auto p = FfnParamsT<double>::make(5, rng);
  auto x = Tensor64::randn({2, 3, 5}, rng);
  x.set_requires_grad(true);
  p.w1.set_requires_grad(true);
  p.b1.set_requires_grad(true);
  p.w2.set_requires_grad(true);
  p.b2.set_requires_grad(true);
  CHECK(ffn(x, p).shape() == x.shape());
  auto w = Tensor64::randn({2, 3, 5}, rng);
  auto forward = [&]() { return sum_all(mul(ffn(x, p), w)); };
  auto report = fd_check(
      forward,
      {{"x", &x}, {"w1", &p.w1}, {"b1", &p.b1}, {"w2", &p.w2}, {"b2", &p.b2}}, 20, 13);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("time embedding: zero table is identity") {
  Rng rng(14);
  auto tokens = Tensor::randn({2, 3, 4}, rng);
  TimeEmbeddingT<float> emb;
  emb.table = Tensor::zeros({8, 4});
  auto out = add_time_embedding(tokens, emb);
  CHECK(out.shape() == Shape{6, 4});
  for (std::size_t i = 0; i < out.values().size(); ++i)
    CHECK(out.values()[i] == tokens.values()[i]);
}

TEST_CASE("time embedding: one frame adds a single row uniformly") {
  Rng rng(15);
  auto tokens = Tensor::zeros({1, 5, 3});
  auto emb = TimeEmbeddingT<float>::make(8, 3, rng, 1.0f);
  auto out = add_time_embedding(tokens, emb);
  for (Index t = 0; t < 5; ++t)
    for (Index j = 0; j < 3; ++j)
      CHECK(out.values()[static_cast<std::size_t>(t * 3 + j)] ==
            doctest::Approx(emb.table.values()[static_cast<std::size_t>(j)]));
}

TEST_CASE("time embedding: 8 frames x 64 tokens flattens to 512 rows") {
  Rng rng(16);
  auto tokens = Tensor::randn({8, 64, 4}, rng);
  auto emb = TimeEmbeddingT<float>::make(8, 4, rng);
  CHECK(add_time_embedding(tokens, emb).shape() == Shape{512, 4});
}

TEST_CASE("time embedding rejects more frames than the table") {
  auto tokens = Tensor::zeros({9, 2, 4});
  TimeEmbeddingT<float> emb;
  emb.table = Tensor::zeros({8, 4});
  CHECK_THROWS_AS(add_time_embedding(tokens, emb), ContractError);
}

TEST_CASE("pre-norm block: causal invariance through a full block") {
  Rng rng(17);
  auto p = BlockParamsT<float>::make(8, 2, rng);
  auto x = Tensor::randn({1, 4, 8}, rng);
  auto base = block_forward(x, p, true);
  auto perturbed = x.detach();
  for (Index j = 0; j < 8; ++j)
    perturbed.values()[static_cast<std::size_t>(3 * 8 + j)] -= 2.0f;
  auto out = block_forward(perturbed, p, true);
  for (Index t = 0; t < 3; ++t)
    for (Index j = 0; j < 8; ++j) {
      auto idx = static_cast<std::size_t>(t * 8 + j);
      CHECK(base.values()[idx] == doctest::Approx(out.values()[idx]).epsilon(1e-6));
    }
}
