#include "vlab/quantize.hpp"

#include <json.hpp>

namespace vlab::quant {

QuantTrainResult train_quantized_baseline(train::AlignmentSetup& setup,
                                          const adapters::ResamplerConfig& rcfg,
                                          const QuantizerConfig& qcfg, lm::LmParams& llm,
                                          const eval::EvalOptions& eval_opts,
                                          std::ostream* metrics_out) {
  qcfg.validate();
  QuantTrainResult result;

  ParamSet frozen;
  setup.encoder.visit("enc", frozen.collector());
  llm.visit("llm", frozen.collector());
  for (auto& [name, t] : frozen.items()) t.set_requires_grad(false);

  Rng rng(derive_seed(setup.settings.seed, "quantize-adapter"));
  result.res = adapters::ResamplerParamsT<float>::make(rcfg, setup.enc_cfg.dim,
                                                       setup.llm_cfg.dim, rng);
  Rng qrng(derive_seed(setup.settings.seed, "quantize-fc"));
  result.qparams = QuantizerParams::make(setup.llm_cfg.dim, llm.vocab(), qrng);

  ParamSet trainable;
  result.res.visit("adapter", trainable.collector());
  trainable.add("quantizer.projection", result.qparams.projection);
  trainable.set_requires_grad(true);

  train::EncodedSceneCache cache(setup.enc_cfg, &setup.encoder);
  const std::uint64_t seed = setup.settings.seed;
  train::StageContext ctx;
  ctx.stage_name = "quantized_baseline";
  ctx.data_cfg = setup.data_cfg;
  ctx.cache = &cache;
  ctx.decoder = &llm;
  ctx.prefix_fn = [&result, &qcfg, &llm, seed](const train::PrefixRequest& r) {
    auto embeddings = adapters::resampler_forward(*r.visual, result.res);
    return quantized_prefix(embeddings, result.qparams, qcfg, llm.tok_table, r.step,
                            seed, r.training);
  };
  ctx.trainable = &trainable;
  ctx.settings = setup.settings;

  train::AdamW opt(&trainable, setup.settings.opt);
  result.stage = train::run_caption_training(ctx, opt, 0, metrics_out);

  eval::DecodeModel model;
  model.cache = &cache;
  model.decoder = &llm;
  model.prefix_fn = ctx.prefix_fn;
  auto report = eval::evaluate(model, setup.data_cfg, data::Split::Test,
                               {eval::Task::Caption}, eval_opts);
  result.cider = report.tasks.at("caption").cider;
  result.exact_match = report.tasks.at("caption").exact_match;
  return result;
}

QuantStudyReport run_quantize_study(train::AlignmentSetup& setup,
                                    const adapters::ResamplerConfig& rcfg,
                                    double baseline_cider, double baseline_em,
                                    lm::LmParams& llm, const eval::EvalOptions& eval_opts,
                                    std::ostream* metrics_out) {
  QuantStudyReport report;
  report.rows.push_back({"baseline", "-", "-", baseline_cider, baseline_em});

  struct GridEntry {
    double temp;
    QuantizerConfig::Decay decay;
  };
  const GridEntry grid[] = {{1.0, QuantizerConfig::Decay::None},
                            {2.0, QuantizerConfig::Decay::None},
                            {2.0, QuantizerConfig::Decay::Exponential}};
  for (const auto& entry : grid) {
    QuantizerConfig qcfg;
    qcfg.temperature_init = entry.temp;
    qcfg.decay = entry.decay;
    auto row = train_quantized_baseline(setup, rcfg, qcfg, llm, eval_opts, metrics_out);
    char temp[16];
    std::snprintf(temp, sizeof(temp), "%.1f", entry.temp);
    report.rows.push_back(
        {"gumbel_softmax", temp,
         entry.decay == QuantizerConfig::Decay::Exponential ? "exponential" : "-",
         row.cider, row.exact_match});
  }
  return report;
}

std::string QuantStudyReport::to_json() const {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& row : rows) {
    j.push_back({{"setting", row.setting},
                 {"softmax_temp", row.softmax_temp},
                 {"temp_decay", row.temp_decay},
                 {"cider", row.cider},
                 {"exact_match", row.exact_match}});
  }
  return j.dump(2);
}

std::string QuantStudyReport::table() const {
  std::vector<std::vector<std::string>> cells;
  for (const auto& row : rows) {
    char cider_s[32], em_s[32];
    std::snprintf(cider_s, sizeof(cider_s), "%.3f", row.cider);
    std::snprintf(em_s, sizeof(em_s), "%.3f", row.exact_match);
    cells.push_back({row.setting, row.softmax_temp, row.temp_decay, cider_s, em_s});
  }
  return eval::fixed_table({"Setting", "Softmax Temp.", "Temp. Decay", "CIDEr", "EM"},
                           cells);
}

}  // namespace vlab::quant
