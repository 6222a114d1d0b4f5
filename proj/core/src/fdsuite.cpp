#include "vlab/fdsuite.hpp"

#include <sstream>

#include "vlab/gradcheck.hpp"
#include "vlab/harness.hpp"

namespace vlab::fdsuite {

namespace {

void fold(SuiteReport& report, const FdReport& fd, const std::string& label, bool e2e) {
  if (e2e) {
    ++report.e2e_configs;
    if (fd.max_rel_err > report.max_rel_e2e) {
      report.max_rel_e2e = fd.max_rel_err;
      report.worst_e2e = label + ":" + fd.worst;
    }
  } else {
    report.op_checks += fd.checked;
    if (fd.max_rel_err > report.max_rel_op) {
      report.max_rel_op = fd.max_rel_err;
      report.worst_op = label + ":" + fd.worst;
    }
  }
}

// Per-op randomized checks mirroring the unit oracles, with fresh shapes.
void per_op_checks(SuiteReport& report, Index samples, std::uint64_t seed) {
  Rng meta(derive_seed(seed, "fd-op-shapes"));
  for (int trial = 0; trial < 6; ++trial) {
    const Index m = 2 + static_cast<Index>(meta.uniform_index(4));
    const Index k = 2 + static_cast<Index>(meta.uniform_index(5));
    const Index n = 2 + static_cast<Index>(meta.uniform_index(4));
    Rng rng(derive_seed(seed, "fd-op", static_cast<std::uint64_t>(trial)));
    auto a = Tensor64::randn({m, k}, rng);
    auto b = Tensor64::randn({k, n}, rng);
    auto g = Tensor64::randn({m, n}, rng);
    auto bias = Tensor64::randn({n}, rng, 0.3);
    auto gain = Tensor64::randn({n}, rng, 0.2, 1.0);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    bias.set_requires_grad(true);
    gain.set_requires_grad(true);
    std::vector<Index> targets;
    std::vector<std::uint8_t> mask;
    for (Index r = 0; r < m; ++r) {
      targets.push_back(static_cast<Index>(rng.uniform_index(static_cast<std::uint64_t>(n))));
      mask.push_back(rng.uniform() < 0.8 ? 1 : 0);
    }
    if (std::count(mask.begin(), mask.end(), 1) == 0) mask[0] = 1;
    auto forward = [&]() {
      auto h = layer_norm_op(gelu(matmul(a, b)), gain, bias, 1e-5);
      auto soft = softmax(add(h, g), -1);
      auto ce = cross_entropy(add(matmul(a, b), bias), targets, mask);
      return add(ce, mean_all(mul(soft, exp_(scale(h, 0.1)))));
    };
    auto fd = fd_check(forward, {{"a", &a}, {"b", &b}, {"bias", &bias}, {"gain", &gain}},
                       samples, derive_seed(seed, "fd-op-coords", trial));
    fold(report, fd, "ops#" + std::to_string(trial), false);
  }
}

struct E2eConfig {
  int wiring;  // 0: baseline, 1: vadapter stage2, 2: pooler stage1, 3: resampler stage1
  vision::VitConfig enc;
  lm::LmConfig tlm, llm;
  adapters::ResamplerConfig rcfg;
};

E2eConfig sample_config(Rng& rng) {
  E2eConfig c;
  c.wiring = static_cast<int>(rng.uniform_index(4));
  c.enc.image_size = 24;
  c.enc.patch_size = 6;
  c.enc.dim = 16 + 8 * static_cast<Index>(rng.uniform_index(2));
  c.enc.depth = 1;
  c.enc.heads = 2;
  c.enc.size_tag = "fd";
  c.tlm = lm::LmConfig::for_tag("tiny");
  c.tlm.dim = 16;
  c.tlm.depth = 1;
  c.tlm.heads = 2;
  c.llm = lm::LmConfig::for_tag("large");
  c.llm.dim = 24;
  c.llm.depth = 1;
  c.llm.heads = 2;
  c.rcfg.n_queries = 2 + static_cast<Index>(rng.uniform_index(3));
  c.rcfg.query_dim = 16;
  c.rcfg.hidden_dim = 16;
  c.rcfg.n_layers = 1 + static_cast<Index>(rng.uniform_index(2));
  c.rcfg.ln_mode = static_cast<adapters::LnMode>(rng.uniform_index(3));
  c.rcfg.final_ln = rng.uniform_index(2) == 0;
  c.rcfg.use_ffn = rng.uniform_index(2) == 0;
  c.rcfg.use_time_embedding = rng.uniform_index(2) == 0;
  c.rcfg.kv_concat_queries = rng.uniform_index(2) == 0;
  return c;
}

// End-to-end double-precision loss through the full wiring; encoder frozen,
// large LM frozen; trainable leaves sampled against finite differences.
void e2e_check(SuiteReport& report, const E2eConfig& c, Index samples,
               std::uint64_t seed, int index) {
  Rng rng(derive_seed(seed, "fd-e2e", static_cast<std::uint64_t>(index)));
  auto enc = vision::VitParamsT<double>::make(c.enc, rng);
  auto tlm = lm::LmParamsT<double>::make(c.tlm, rng);
  auto llm = lm::LmParamsT<double>::make(c.llm, rng);

  // Two tiny scenes rendered and encoded at 64-bit; encoder params stay
  // frozen so the check covers the trainable path only.
  data::Scene s1, s2;
  s1.objects.push_back({data::ObjShape::Circle, data::Color::Red, 4});
  s2.objects.push_back({data::ObjShape::Square, data::Color::Blue, 0});
  s2.objects.push_back({data::ObjShape::Triangle, data::Color::Green, 8});
  const Index frames = 2;

  auto render24 = [&](const data::Scene& s, Index f) {
    auto img = data::render(s, f);  // 48x48; downsample 2x for speed
    std::vector<double> out(static_cast<std::size_t>(24 * 24 * 3));
    for (Index y = 0; y < 24; ++y)
      for (Index x = 0; x < 24; ++x)
        for (Index ch = 0; ch < 3; ++ch)
          out[static_cast<std::size_t>((y * 24 + x) * 3 + ch)] =
              img[static_cast<std::size_t>(((2 * y) * 48 + 2 * x) * 3 + ch)];
    return out;
  };

  std::vector<TensorT<double>> encoded;
  for (const auto* scene : {&s1, &s2}) {
    std::vector<TensorT<double>> per_frame;
    for (Index f = 0; f < frames; ++f) {
      auto img = TensorT<double>::from_data({24, 24, 3}, render24(*scene, f));
      auto patches = reshape(vision::patchify(img, c.enc.patch_size),
                             {1, c.enc.tokens_per_frame(), c.enc.patch_dim()});
      per_frame.push_back(vision::vit_trunk(patches, enc));
    }
    encoded.push_back(concat(per_frame, 1));
  }
  vision::VisualTokensT<double> visual;
  visual.frames = frames;
  visual.tokens_per_frame = c.enc.tokens_per_frame();
  visual.tokens = concat(encoded, 0);  // (2, frames*tp, enc_dim)

  const auto& tok = lm::tokenizer();
  data::SampleBatch batch;
  batch.batch = 2;
  batch.frames = frames;
  for (const auto* scene : {&s1, &s2}) {
    data::SampleRecord rec;
    rec.scene = *scene;
    batch.records.push_back(rec);
    std::vector<Index> prompt{tok.bos_id()};
    for (Index id : tok.encode("describe the following :")) prompt.push_back(id);
    prompt.push_back(tok.vis_id());
    prompt.push_back(tok.id_of(":"));
    batch.prompt_ids.push_back(prompt);
    std::vector<Index> target = tok.encode(data::caption(*scene));
    target.push_back(tok.eos_id());
    batch.target_ids.push_back(target);
  }

  std::vector<std::pair<std::string, Tensor64*>> leaves;
  std::function<Tensor64()> forward;

  if (c.wiring == 2) {
    // Pooler stage 1: adapter + TLM decoder.
    auto pool = std::make_shared<adapters::PoolerParamsT<double>>(
        adapters::PoolerParamsT<double>::make(c.rcfg.n_queries, c.rcfg.query_dim,
                                              c.rcfg.hidden_dim, c.enc.dim, c.tlm.dim, rng));
    auto tlmp = std::make_shared<lm::LmParamsT<double>>(tlm);
    forward = [&visual, &batch, pool, tlmp]() {
      auto prefix = adapters::attentional_pooler_forward(visual, *pool);
      return train::caption_loss_t<double>(*tlmp, prefix, batch, false).loss;
    };
    leaves = {{"pool.queries", &pool->queries},
              {"pool.attn.wv", &pool->attn.wv},
              {"pool.final_ln.gain", &pool->final_ln.gain},
              {"tlm.tok_table", &tlmp->tok_table},
              {"tlm.block.ffn.w1", &tlmp->blocks[0].ffn.w1},
              {"tlm.head_w", &tlmp->head_w}};
  } else {
    const Index out_dim = c.wiring == 0 ? c.llm.dim : c.tlm.dim;
    auto res = std::make_shared<adapters::ResamplerParamsT<double>>(
        adapters::ResamplerParamsT<double>::make(c.rcfg, c.enc.dim, out_dim, rng));
    leaves = {{"res.queries", &res->queries},
              {"res.in_proj", &res->in_proj},
              {"res.attn.wk", &res->layers[0].attn.wk},
              {"res.attn.wo", &res->layers[0].attn.wo},
              {"res.out_proj", &res->out_proj}};
    if (c.rcfg.use_time_embedding) leaves.push_back({"res.time", &res->time.table});
    if (c.rcfg.ln_mode != adapters::LnMode::None)
      leaves.push_back({"res.ln_q.gain", &res->layers[0].ln_q.gain});

    if (c.wiring == 0) {
      // Baseline: resampler into the frozen large LM.
      auto llmp = std::make_shared<lm::LmParamsT<double>>(llm);
      forward = [&visual, &batch, res, llmp]() {
        auto prefix = adapters::resampler_forward(visual, *res);
        return train::caption_loss_t<double>(*llmp, prefix, batch, false).loss;
      };
    } else if (c.wiring == 1) {
      // VAdapter stage 2: resampler + TLM trunk + projection, frozen LLM.
      auto tlmp = std::make_shared<lm::LmParamsT<double>>(tlm);
      auto llmp = std::make_shared<lm::LmParamsT<double>>(llm);
      auto proj = std::make_shared<Tensor64>(Tensor64::randn({c.tlm.dim, c.llm.dim}, rng, 0.1));
      forward = [&visual, &batch, res, tlmp, llmp, proj]() {
        auto prefix = adapters::vadapter_forward(visual, *res, *tlmp, *proj);
        return train::caption_loss_t<double>(*llmp, prefix, batch, false).loss;
      };
      leaves.push_back({"proj", proj.get()});
      leaves.push_back({"tlm.pos_table", &tlmp->pos_table});
      leaves.push_back({"tlm.block.attn.wq", &tlmp->blocks[0].attn.wq});
      leaves.push_back({"tlm.final_ln.gain", &tlmp->final_ln.gain});
    } else {
      // Resampler stage 1: adapter + TLM decoder.
      auto tlmp = std::make_shared<lm::LmParamsT<double>>(tlm);
      forward = [&visual, &batch, res, tlmp]() {
        auto prefix = adapters::resampler_forward(visual, *res);
        return train::caption_loss_t<double>(*tlmp, prefix, batch, false).loss;
      };
      leaves.push_back({"tlm.tok_table", &tlmp->tok_table});
      leaves.push_back({"tlm.block.attn.wv", &tlmp->blocks[0].attn.wv});
      leaves.push_back({"tlm.head_b", &tlmp->head_b});
    }
  }

  for (auto& [name, t] : leaves) t->set_requires_grad(true);
  auto fd = fd_check(forward, leaves, samples,
                     derive_seed(seed, "fd-e2e-coords", static_cast<std::uint64_t>(index)));
  fold(report, fd, "e2e#" + std::to_string(index), true);
}

}  // namespace

SuiteReport run_fd_suite(Index e2e_configs, Index samples_per_tensor, std::uint64_t seed) {
  SuiteReport report;
  per_op_checks(report, samples_per_tensor * 4, seed);
  Rng meta(derive_seed(seed, "fd-e2e-meta"));
  for (Index i = 0; i < e2e_configs; ++i) {
    auto cfg = sample_config(meta);
    e2e_check(report, cfg, samples_per_tensor, seed, static_cast<int>(i));
  }
  report.passed = report.max_rel_op < 1e-4 && report.max_rel_e2e < 1e-3;
  return report;
}

std::string SuiteReport::summary() const {
  std::ostringstream os;
  os << "per-op: " << op_checks << " coords, max rel err " << max_rel_op;
  if (!worst_op.empty()) os << " (" << worst_op << ")";
  os << "\nend-to-end: " << e2e_configs << " configs, max rel err " << max_rel_e2e;
  if (!worst_e2e.empty()) os << " (" << worst_e2e << ")";
  os << "\nresult: " << (passed ? "PASS" : "FAIL");
  return os.str();
}

}  // namespace vlab::fdsuite
