#include <doctest.h>

#include "vlab/adapters.hpp"
#include "vlab/gradcheck.hpp"

using namespace vlab;
using namespace vlab::adapters;

namespace {

template <typename T>
vision::VisualTokensT<T> make_visual(Index batch, Index frames, Index tpf, Index dim,
                                     std::uint64_t seed) {
  Rng rng(seed);
  vision::VisualTokensT<T> v;
  v.frames = frames;
  v.tokens_per_frame = tpf;
  v.tokens = TensorT<T>::randn({batch, frames * tpf, dim}, rng);
  return v;
}

ResamplerConfig desk_config() {
  ResamplerConfig cfg;
  cfg.n_queries = 8;
  cfg.query_dim = 32;
  cfg.hidden_dim = 32;
  cfg.n_layers = 2;
  return cfg;
}

}  // namespace

TEST_CASE("fixed-size bottleneck: output rows equal n_queries for any input length") {
  Rng rng(1);
  auto cfg = desk_config();
  auto params = ResamplerParamsT<float>::make(cfg, /*vision_dim=*/24, /*out_dim=*/40, rng);
  for (auto [frames, tpf] : {std::pair<Index, Index>{1, 64}, {8, 64}}) {
    auto visual = make_visual<float>(2, frames, tpf, 24, 7 + frames);
    auto out = resampler_forward(visual, params);
    CHECK(out.shape() == Shape{2, cfg.n_queries, 40});
  }
}

TEST_CASE("paper-best baseline configuration constructs and runs") {
  // Separate LN, no final LN, FFN on, time embedding on, 6 layers.
  ResamplerConfig cfg;
  cfg.ln_mode = LnMode::Separate;
  cfg.final_ln = false;
  cfg.use_ffn = true;
  cfg.use_time_embedding = true;
  cfg.n_layers = 6;
  Rng rng(2);
  auto params = ResamplerParamsT<float>::make(cfg, 64, 192, rng);
  auto visual = make_visual<float>(1, 8, 64, 64, 3);
  auto out = resampler_forward(visual, params);
  CHECK(out.shape() == Shape{1, cfg.n_queries, 192});
  for (float v : out.values()) CHECK(std::isfinite(v));
}

TEST_CASE("permutation invariance over single-frame visual tokens") {
  auto cfg = desk_config();
  cfg.use_time_embedding = true;
  Rng rng(4);
  auto params = ResamplerParamsT<double>::make(cfg, 16, 24, rng);
  auto visual = make_visual<double>(1, 1, 32, 16, 5);
  auto base = resampler_forward(visual, params);

  // Reverse the token order (a permutation).
  auto perm = visual;
  const Index tpf = 32, d = 16;
  std::vector<double> rev(visual.tokens.values().size());
  for (Index t = 0; t < tpf; ++t)
    for (Index j = 0; j < d; ++j)
      rev[static_cast<std::size_t>(t * d + j)] =
          visual.tokens.values()[static_cast<std::size_t>((tpf - 1 - t) * d + j)];
  perm.tokens = Tensor64::from_data({1, tpf, d}, rev);
  auto out = resampler_forward(perm, params);
  for (std::size_t i = 0; i < out.values().size(); ++i)
    CHECK(base.values()[i] == doctest::Approx(out.values()[i]).epsilon(1e-9));
}

TEST_CASE("shared LN mode ties query and kv norm parameters") {
  auto cfg = desk_config();
  cfg.ln_mode = LnMode::Shared;
  Rng rng(6);
  auto params = ResamplerParamsT<float>::make(cfg, 16, 24, rng);
  ParamSet set;
  params.visit("res", set.collector());
  CHECK(set.has("res.layer0.ln_shared.gain"));
  CHECK(!set.has("res.layer0.ln_q.gain"));
  CHECK(!set.has("res.layer0.ln_kv.gain"));
  // Mutating the registered tensor moves both uses (same storage).
  set.at("res.layer0.ln_shared.gain").values()[0] = 5.0f;
  CHECK(params.layers[0].ln_q.gain.values()[0] == 5.0f);
  CHECK(params.layers[0].ln_kv.gain.values()[0] == 5.0f);

  cfg.query_dim = 16;  // shared LN with mismatched dims is rejected
  CHECK_THROWS_AS(cfg.validate(), ContractError);
}

TEST_CASE("pooler equals the degenerate resampler on identical weights") {
  ResamplerConfig cfg;
  cfg.n_queries = 8;
  cfg.query_dim = 32;
  cfg.hidden_dim = 32;
  cfg.n_layers = 1;
  cfg.ln_mode = LnMode::None;
  cfg.final_ln = true;
  cfg.use_ffn = false;
  cfg.use_time_embedding = false;
  cfg.kv_concat_queries = false;
  Rng rng(7);
  auto res = ResamplerParamsT<double>::make(cfg, 16, 24, rng);

  PoolerParamsT<double> pool;
  pool.in_proj = res.in_proj;
  pool.in_bias = res.in_bias;
  pool.queries = res.queries;
  pool.attn = res.layers[0].attn;
  pool.final_ln = res.final_ln;
  pool.out_proj = res.out_proj;
  pool.out_bias = res.out_bias;

  auto visual = make_visual<double>(2, 1, 20, 16, 8);
  auto a = resampler_forward(visual, res);
  auto b = attentional_pooler_forward(visual, pool);
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.values().size(); ++i)
    CHECK(std::abs(a.values()[i] - b.values()[i]) < 1e-6);
}

TEST_CASE("pooler output rows and gradient check") {
  Rng rng(9);
  auto pool = PoolerParamsT<double>::make(4, 16, 16, 12, 20, rng);
  auto visual = make_visual<double>(1, 1, 10, 12, 10);
  auto out = attentional_pooler_forward(visual, pool);
  CHECK(out.shape() == Shape{1, 4, 20});

  visual.tokens.set_requires_grad(true);
  pool.queries.set_requires_grad(true);
  pool.attn.wk.set_requires_grad(true);
  pool.final_ln.gain.set_requires_grad(true);
  pool.out_proj.set_requires_grad(true);
  auto w = Tensor64::randn({1, 4, 20}, rng);
  auto forward = [&]() {
    return sum_all(mul(attentional_pooler_forward(visual, pool), w));
  };
  auto report = fd_check(forward,
                         {{"tokens", &visual.tokens},
                          {"queries", &pool.queries},
                          {"wk", &pool.attn.wk},
                          {"ln.gain", &pool.final_ln.gain},
                          {"out_proj", &pool.out_proj}},
                         16, 11);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("resampler gradient check across ablation-relevant configs") {
  for (auto mode : {LnMode::None, LnMode::Shared, LnMode::Separate}) {
    ResamplerConfig cfg;
    cfg.n_queries = 4;
    cfg.query_dim = 16;
    cfg.hidden_dim = 16;
    cfg.n_layers = 2;
    cfg.ln_mode = mode;
    cfg.final_ln = mode == LnMode::None;
    Rng rng(20 + static_cast<int>(mode));
    auto params = ResamplerParamsT<double>::make(cfg, 12, 8, rng);
    auto visual = make_visual<double>(1, 2, 6, 12, 21);
    visual.tokens.set_requires_grad(true);
    params.queries.set_requires_grad(true);
    params.in_proj.set_requires_grad(true);
    params.layers[0].attn.wv.set_requires_grad(true);
    params.layers[1].ffn.w2.set_requires_grad(true);
    params.time.table.set_requires_grad(true);
    auto w = Tensor64::randn({1, 4, 8}, rng);
    auto forward = [&]() { return sum_all(mul(resampler_forward(visual, params), w)); };
    std::vector<std::pair<std::string, Tensor64*>> leaves{
        {"tokens", &visual.tokens}, {"queries", &params.queries},
        {"in_proj", &params.in_proj}, {"wv", &params.layers[0].attn.wv},
        {"ffn.w2", &params.layers[1].ffn.w2}, {"time", &params.time.table}};
    auto report = fd_check(forward, leaves, 10, 22);
    CHECK(report.max_rel_err < 1e-4);
  }
}

TEST_CASE("vadapter: prefix length, residual degeneracy, gradient flow") {
  auto cfg = desk_config();
  cfg.n_layers = 1;
  Rng rng(30);
  lm::LmConfig tcfg = lm::LmConfig::for_tag("tiny");
  tcfg.dim = 32;
  tcfg.heads = 2;
  tcfg.depth = 1;
  auto tlm = lm::LmParamsT<double>::make(tcfg, rng);
  auto res = ResamplerParamsT<double>::make(cfg, 16, tcfg.dim, rng);
  auto proj = Tensor64::randn({tcfg.dim, 48}, rng, 0.1);
  auto visual = make_visual<double>(1, 1, 12, 16, 31);

  auto prefix = vadapter_forward(visual, res, tlm, proj);
  CHECK(prefix.shape() == Shape{1, cfg.n_queries, 48});

  // Identity-like TLM: zero residual branches and zero positions reduce the
  // trunk to its final LayerNorm over the resampler output.
  for (auto* t : {&tlm.blocks[0].attn.wo, &tlm.blocks[0].attn.bo, &tlm.blocks[0].ffn.w2,
                  &tlm.blocks[0].ffn.b2, &tlm.pos_table})
    for (auto& v : t->values()) v = 0;
  auto degenerate = vadapter_forward(visual, res, tlm, proj);
  auto expected = matmul(nn::layer_norm(resampler_forward(visual, res), tlm.final_ln), proj);
  for (std::size_t i = 0; i < degenerate.values().size(); ++i)
    CHECK(std::abs(degenerate.values()[i] - expected.values()[i]) < 1e-6);

  // End-to-end gradient check through resampler + trunk + projection.
  Rng rng2(32);
  auto tlm2 = lm::LmParamsT<double>::make(tcfg, rng2);
  auto res2 = ResamplerParamsT<double>::make(cfg, 16, tcfg.dim, rng2);
  auto proj2 = Tensor64::randn({tcfg.dim, 24}, rng2, 0.1);
  res2.queries.set_requires_grad(true);
  res2.layers[0].attn.wq.set_requires_grad(true);
  tlm2.blocks[0].attn.wv.set_requires_grad(true);
  tlm2.final_ln.gain.set_requires_grad(true);
  proj2.set_requires_grad(true);
  auto w = Tensor64::randn({1, cfg.n_queries, 24}, rng2);
  auto forward = [&]() {
    return sum_all(mul(vadapter_forward(visual, res2, tlm2, proj2), w));
  };
  auto report = fd_check(forward,
                         {{"queries", &res2.queries},
                          {"res.wq", &res2.layers[0].attn.wq},
                          {"tlm.wv", &tlm2.blocks[0].attn.wv},
                          {"tlm.ln", &tlm2.final_ln.gain},
                          {"proj", &proj2}},
                         12, 33);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("count_parameters: closed form matches enumeration on random configs") {
  Rng meta(40);
  for (int trial = 0; trial < 10; ++trial) {
    ResamplerConfig cfg;
    cfg.n_queries = 1 + static_cast<Index>(meta.uniform_index(16));
    cfg.query_dim = 16 * (1 + static_cast<Index>(meta.uniform_index(4)));
    cfg.hidden_dim = 16 * (1 + static_cast<Index>(meta.uniform_index(4)));
    cfg.n_layers = 1 + static_cast<Index>(meta.uniform_index(4));
    cfg.ln_mode = static_cast<LnMode>(meta.uniform_index(3));
    if (cfg.ln_mode == LnMode::Shared) cfg.query_dim = cfg.hidden_dim;
    cfg.final_ln = meta.uniform_index(2) == 0;
    cfg.use_ffn = meta.uniform_index(2) == 0;
    cfg.use_time_embedding = meta.uniform_index(2) == 0;
    cfg.kv_concat_queries = meta.uniform_index(2) == 0;
    const Index vision_dim = 8 * (1 + static_cast<Index>(meta.uniform_index(8)));
    const Index out_dim = 8 * (1 + static_cast<Index>(meta.uniform_index(8)));

    Rng rng(41 + trial);
    auto params = ResamplerParamsT<float>::make(cfg, vision_dim, out_dim, rng);
    ParamSet set;
    params.visit("res", set.collector());
    CHECK(set.total_elements() == resampler_param_count(cfg, vision_dim, out_dim));
  }

  // Pooler and LM closed forms against enumeration too.
  Rng rng(55);
  auto pool = PoolerParamsT<float>::make(8, 32, 48, 24, 64, rng);
  ParamSet pset;
  pool.visit("pool", pset.collector());
  CHECK(pset.total_elements() == pooler_param_count(8, 32, 48, 24, 64));

  auto lcfg = lm::LmConfig::for_tag("tiny");
  auto lparams = lm::LmParamsT<float>::make(lcfg, rng);
  ParamSet lset, ltrunk;
  lparams.visit("lm", lset.collector());
  lparams.visit_trunk("lm", ltrunk.collector());
  CHECK(lset.total_elements() == lm_param_count(lcfg));
  CHECK(ltrunk.total_elements() == lm_trunk_param_count(lcfg));
}

TEST_CASE("doubling hidden_dim more than doubles resampler parameters") {
  ResamplerConfig cfg;  // desk defaults
  ResamplerConfig big = cfg;
  big.hidden_dim *= 2;
  CHECK(resampler_param_count(big, 64, 192) > 2 * resampler_param_count(cfg, 64, 192));

  ResamplerConfig lean = cfg;
  lean.use_ffn = false;
  ResamplerConfig lean_big = lean;
  lean_big.hidden_dim *= 2;
  CHECK(resampler_param_count(lean_big, 64, 192) >
        2 * resampler_param_count(lean, 64, 192));
}

TEST_CASE("vadapter stage-2 trainable set excludes encoder, large LM, head, tok table") {
  AdapterSpec spec;
  spec.kind = AdapterKind::Palm2VAdapter;
  spec.resampler.n_layers = 1;
  auto tcfg = lm::LmConfig::for_tag("tiny");
  auto counts = count_parameters(spec, /*vision_dim=*/64, /*target_lm_dim=*/192, tcfg);
  const Index res = resampler_param_count(spec.resampler, 64, tcfg.dim);
  CHECK(counts.stage2_trainable ==
        res + lm_trunk_param_count(tcfg) + tcfg.dim * 192);
  CHECK(counts.stage1_trainable == res + lm_param_count(tcfg));
  CHECK(counts.baseline_trainable == res);
  CHECK(counts.total == counts.stage1_trainable + tcfg.dim * 192);
}

TEST_CASE("table 1 grid: exactly 16 constructible rows in section order") {
  ResamplerConfig base;
  auto rows = table1_rows(base);
  REQUIRE(rows.size() == 16);
  int a = 0, b = 0, c = 0, d = 0, e = 0;
  Rng rng(60);
  for (const auto& row : rows) {
    CHECK_NOTHROW(row.cfg.validate());
    auto params = ResamplerParamsT<float>::make(row.cfg, 32, 48, rng);
    auto visual = make_visual<float>(1, 8, 16, 32, 61);
    auto out = resampler_forward(visual, params);
    CHECK(out.shape() == Shape{1, row.cfg.n_queries, 48});
    if (row.section == "a") ++a;
    if (row.section == "b") ++b;
    if (row.section == "c") ++c;
    if (row.section == "d") ++d;
    if (row.section == "e") ++e;
  }
  CHECK(a == 4);
  CHECK(b == 3);
  CHECK(c == 3);
  CHECK(d == 3);
  CHECK(e == 3);
}
