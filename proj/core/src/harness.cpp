#include "vlab/harness.hpp"

namespace vlab::harness {

Backbones build_backbones(const cfg::ExperimentConfig& config, std::uint64_t seed,
                          bool with_llm) {
  Backbones b;
  b.enc_cfg = config.encoder_config();
  b.encoder = vision::pretrain_stub(b.enc_cfg, derive_seed(seed, "encoder"),
                                    config.encoder_pretrain_mode(), config.data_config(),
                                    config.encoder_pretrain_steps());
  b.tlm_cfg = config.tiny_lm_config();
  b.llm_cfg = config.large_lm_config();
  if (with_llm) {
    auto pre = lm::pretrain_tlm(config.data_config(), b.llm_cfg,
                                config.lm_pretrain_config("large"),
                                derive_seed(seed, "llm-pretrain"));
    b.llm = std::move(pre.params);
  }
  return b;
}

lm::LmParams build_tlm(const cfg::ExperimentConfig& config, std::uint64_t seed,
                       TlmInit init) {
  if (init == TlmInit::Random) {
    Rng rng(derive_seed(seed, "tlm-random"));
    return lm::LmParamsT<float>::make(config.tiny_lm_config(), rng);
  }
  auto pre = lm::pretrain_tlm(config.data_config(), config.tiny_lm_config(),
                              config.lm_pretrain_config("tiny"),
                              derive_seed(seed, "tlm-pretrain"));
  return std::move(pre.params);
}

const char* wiring_name(AlignedModel::Wiring w) {
  switch (w) {
    case AlignedModel::Wiring::Stage1Decoder: return "stage1";
    case AlignedModel::Wiring::VAdapter: return "stage2";
    case AlignedModel::Wiring::Baseline: return "baseline";
    case AlignedModel::Wiring::QuantizedBaseline: return "quantized";
  }
  return "?";
}

eval::DecodeModel make_decode_model(AlignedModel& model, train::EncodedSceneCache& cache) {
  eval::DecodeModel dm;
  dm.cache = &cache;
  dm.decoder = &model.decoder();
  switch (model.wiring) {
    case AlignedModel::Wiring::Stage1Decoder:
      if (model.kind == adapters::AdapterKind::AttentionalPooler) {
        dm.prefix_fn = [&model](const train::PrefixRequest& r) {
          return adapters::attentional_pooler_forward(*r.visual, model.pool);
        };
      } else {
        dm.prefix_fn = [&model](const train::PrefixRequest& r) {
          return adapters::resampler_forward(*r.visual, model.res);
        };
      }
      break;
    case AlignedModel::Wiring::VAdapter:
      dm.prefix_fn = [&model](const train::PrefixRequest& r) {
        return adapters::vadapter_forward(*r.visual, model.res, model.tlm, model.proj);
      };
      break;
    case AlignedModel::Wiring::Baseline:
      dm.prefix_fn = [&model](const train::PrefixRequest& r) {
        return adapters::resampler_forward(*r.visual, model.res);
      };
      break;
    case AlignedModel::Wiring::QuantizedBaseline:
      dm.prefix_fn = [&model](const train::PrefixRequest& r) {
        auto emb = adapters::resampler_forward(*r.visual, model.res);
        return quant::quantized_prefix(emb, model.qparams, model.qcfg, model.llm.tok_table,
                                       r.step, 0, /*training=*/false);
      };
      break;
  }
  return dm;
}

// ---------------------------------------------------------------------------

namespace {
train::AlignmentSetup make_setup(const cfg::ExperimentConfig& config,
                                 const Backbones& backbones, const std::string& stage,
                                 std::uint64_t seed) {
  train::AlignmentSetup setup;
  setup.data_cfg = config.data_config();
  setup.enc_cfg = backbones.enc_cfg;
  setup.encoder = backbones.encoder;  // shares tensor storage; frozen by runners
  setup.tlm_cfg = backbones.tlm_cfg;
  setup.llm_cfg = backbones.llm_cfg;
  setup.settings = config.stage_settings(stage, seed);
  return setup;
}
}  // namespace

PipelineOutputs run_stage1_pipeline(const cfg::ExperimentConfig& config, std::uint64_t seed,
                                    Backbones& backbones, lm::LmParams tlm_init,
                                    adapters::AdapterKind kind,
                                    const adapters::ResamplerConfig& rcfg,
                                    std::ostream* metrics, std::ostream* timings) {
  PipelineOutputs out;
  auto setup = make_setup(config, backbones, "stage1", seed);
  (void)timings;
  auto r = train::run_stage1(setup, kind, rcfg, std::move(tlm_init), metrics);
  out.stage1 = r.stage;
  out.model.wiring = AlignedModel::Wiring::Stage1Decoder;
  out.model.enc_cfg = backbones.enc_cfg;
  out.model.encoder = backbones.encoder;
  out.model.tlm_cfg = backbones.tlm_cfg;
  out.model.llm_cfg = backbones.llm_cfg;
  out.model.llm = backbones.llm;
  out.model.kind = kind;
  out.model.rcfg = rcfg;
  out.model.res = std::move(r.res);
  out.model.pool = std::move(r.pool);
  out.model.tlm = std::move(r.tlm);
  return out;
}

PipelineOutputs run_vadapter_pipeline(const cfg::ExperimentConfig& config,
                                      std::uint64_t seed, Backbones& backbones,
                                      lm::LmParams tlm_init, bool run_stage1_first,
                                      std::ostream* metrics, std::ostream* timings) {
  auto spec = config.adapter_spec();
  adapters::ResamplerConfig rcfg = spec.resampler;
  if (spec.kind != adapters::AdapterKind::Palm2VAdapter) rcfg.n_layers = 1;

  lm::LmParams tlm = std::move(tlm_init);
  PipelineOutputs out;
  if (run_stage1_first) {
    auto s1 = run_stage1_pipeline(config, seed, backbones, std::move(tlm),
                                  adapters::AdapterKind::ResamplerBaseline, rcfg, metrics,
                                  timings);
    out.stage1 = s1.stage1;
    tlm = std::move(s1.model.tlm);
  }

  auto setup = make_setup(config, backbones, "stage2", seed);
  auto r = train::run_stage2(setup, rcfg, std::move(tlm), backbones.llm, metrics);
  out.stage2 = r.stage;
  out.model.wiring = AlignedModel::Wiring::VAdapter;
  out.model.enc_cfg = backbones.enc_cfg;
  out.model.encoder = backbones.encoder;
  out.model.tlm_cfg = backbones.tlm_cfg;
  out.model.llm_cfg = backbones.llm_cfg;
  out.model.llm = backbones.llm;
  out.model.kind = adapters::AdapterKind::Palm2VAdapter;
  out.model.rcfg = rcfg;
  out.model.res = std::move(r.res);
  out.model.tlm = std::move(r.tlm);
  out.model.proj = r.proj;
  return out;
}

PipelineOutputs run_baseline_pipeline(const cfg::ExperimentConfig& config,
                                      std::uint64_t seed, Backbones& backbones,
                                      const adapters::ResamplerConfig& rcfg,
                                      std::ostream* metrics, std::ostream* timings) {
  (void)timings;
  PipelineOutputs out;
  auto setup = make_setup(config, backbones, "baseline", seed);
  auto r = train::run_baseline(setup, rcfg, backbones.llm, metrics);
  out.stage2 = r.stage;
  out.model.wiring = AlignedModel::Wiring::Baseline;
  out.model.enc_cfg = backbones.enc_cfg;
  out.model.encoder = backbones.encoder;
  out.model.tlm_cfg = backbones.tlm_cfg;
  out.model.llm_cfg = backbones.llm_cfg;
  out.model.llm = backbones.llm;
  out.model.kind = adapters::AdapterKind::ResamplerBaseline;
  out.model.rcfg = rcfg;
  out.model.res = std::move(r.res);
  return out;
}

eval::EvalReport evaluate_model(AlignedModel& model, const cfg::ExperimentConfig& config,
                                std::uint64_t seed,
                                const std::vector<eval::Task>& tasks) {
  train::EncodedSceneCache cache(model.enc_cfg, &model.encoder);
  auto dm = make_decode_model(model, cache);
  auto report = eval::evaluate(dm, config.data_config(), config.eval_split(), tasks,
                               config.eval_options(seed));
  report.config_digest = config.digest();
  report.checkpoint_tag = wiring_name(model.wiring);
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoint packing
// ---------------------------------------------------------------------------

train::Checkpoint pack_model(const AlignedModel& model, const cfg::ExperimentConfig& config,
                             std::uint64_t seed, Index step) {
  train::Checkpoint ckpt;
  ckpt.config_digest = config.digest();
  ckpt.seed = seed;
  ckpt.step = static_cast<std::uint64_t>(step);
  ckpt.rng_state = "seed=" + std::to_string(seed) + ";step=" + std::to_string(step);
  ckpt.tags = {wiring_name(model.wiring), adapters::adapter_kind_name(model.kind),
               "enc_" + model.enc_cfg.size_tag};

  AlignedModel& m = const_cast<AlignedModel&>(model);
  ParamSet all;
  m.encoder.visit("enc", all.collector());
  m.llm.visit("llm", all.collector());
  if (model.wiring != AlignedModel::Wiring::Baseline &&
      model.wiring != AlignedModel::Wiring::QuantizedBaseline)
    m.tlm.visit("tlm", all.collector());
  if (model.kind == adapters::AdapterKind::AttentionalPooler)
    m.pool.visit("pool", all.collector());
  else
    m.res.visit("adapter", all.collector());
  if (model.proj.defined()) all.add("proj", m.proj);
  if (model.wiring == AlignedModel::Wiring::QuantizedBaseline)
    all.add("quantizer.projection", m.qparams.projection);
  ckpt.put(all);
  return ckpt;
}

AlignedModel unpack_model(const train::Checkpoint& ckpt, const cfg::ExperimentConfig& config) {
  AlignedModel model;
  const std::string wiring = ckpt.tags.empty() ? "baseline" : ckpt.tags[0];
  if (wiring == "stage1") model.wiring = AlignedModel::Wiring::Stage1Decoder;
  else if (wiring == "stage2") model.wiring = AlignedModel::Wiring::VAdapter;
  else if (wiring == "baseline") model.wiring = AlignedModel::Wiring::Baseline;
  else if (wiring == "quantized") model.wiring = AlignedModel::Wiring::QuantizedBaseline;
  else throw ContractError("checkpoint: unknown wiring tag '" + wiring + "'");
  check(ckpt.tags.size() >= 2, "checkpoint: missing adapter kind tag");
  model.kind = adapters::adapter_kind_from_name(ckpt.tags[1]);

  model.enc_cfg = config.encoder_config();
  model.tlm_cfg = config.tiny_lm_config();
  model.llm_cfg = config.large_lm_config();
  auto spec = config.adapter_spec();
  model.rcfg = spec.resampler;
  if (model.wiring == AlignedModel::Wiring::VAdapter) model.rcfg.n_layers = spec.resampler.n_layers;

  Rng rng(1);  // construction only; every value is overwritten by restore
  model.encoder = vision::VitParamsT<float>::make(model.enc_cfg, rng);
  model.llm = lm::LmParamsT<float>::make(model.llm_cfg, rng);

  ParamSet all;
  model.encoder.visit("enc", all.collector());
  model.llm.visit("llm", all.collector());
  const bool has_tlm = model.wiring == AlignedModel::Wiring::Stage1Decoder ||
                       model.wiring == AlignedModel::Wiring::VAdapter;
  if (has_tlm) {
    model.tlm = lm::LmParamsT<float>::make(model.tlm_cfg, rng);
    model.tlm.visit("tlm", all.collector());
  }
  const Index adapter_out = model.wiring == AlignedModel::Wiring::Stage1Decoder ||
                                    model.wiring == AlignedModel::Wiring::VAdapter
                                ? model.tlm_cfg.dim
                                : model.llm_cfg.dim;
  if (model.kind == adapters::AdapterKind::AttentionalPooler) {
    model.pool = adapters::PoolerParamsT<float>::make(
        model.rcfg.n_queries, model.rcfg.query_dim, model.rcfg.hidden_dim,
        model.enc_cfg.dim, adapter_out, rng);
    model.pool.visit("pool", all.collector());
  } else {
    model.res = adapters::ResamplerParamsT<float>::make(model.rcfg, model.enc_cfg.dim,
                                                        adapter_out, rng);
    model.res.visit("adapter", all.collector());
  }
  if (model.wiring == AlignedModel::Wiring::VAdapter) {
    model.proj = Tensor::zeros({model.tlm_cfg.dim, model.llm_cfg.dim});
    all.add("proj", model.proj);
  }
  if (model.wiring == AlignedModel::Wiring::QuantizedBaseline) {
    model.qparams = quant::QuantizerParams::make(model.llm_cfg.dim,
                                                 lm::tokenizer().vocab_size(), rng);
    model.qcfg = config.quantizer_config();
    all.add("quantizer.projection", model.qparams.projection);
  }
  ckpt.restore(all);
  return model;
}

train::Checkpoint pack_lm(const lm::LmParams& params, const std::string& tag,
                          const cfg::ExperimentConfig& config, std::uint64_t seed) {
  train::Checkpoint ckpt;
  ckpt.config_digest = config.digest();
  ckpt.seed = seed;
  ckpt.tags = {"lm_pretrained", tag};
  ParamSet set;
  const_cast<lm::LmParams&>(params).visit("lm", set.collector());
  ckpt.put(set);
  return ckpt;
}

lm::LmParams unpack_lm(const train::Checkpoint& ckpt, const lm::LmConfig& cfg) {
  Rng rng(1);
  auto params = lm::LmParamsT<float>::make(cfg, rng);
  ParamSet set;
  params.visit("lm", set.collector());
  ckpt.restore(set);
  return params;
}

}  // namespace vlab::harness
