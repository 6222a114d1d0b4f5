#include "vlab/train.hpp"

#include <chrono>

#include <json.hpp>

namespace vlab::train {

// ---------------------------------------------------------------------------
// EncodedSceneCache
// ---------------------------------------------------------------------------

const std::vector<float>& EncodedSceneCache::frame_tokens(const data::Scene& scene,
                                                          Index frame) {
  const std::uint64_t key = splitmix64(scene.hash() ^ (0xf00dULL + static_cast<std::uint64_t>(frame)));
  auto it = index_.find(key);
  if (it != index_.end()) {
    lru_.splice(lru_.begin(), lru_, it->second);
    return lru_.front().second;
  }
  NoGradGuard ng;
  auto img = Tensor::from_data({cfg_.image_size, cfg_.image_size, 3},
                               data::render(scene, frame));
  auto patches = reshape(vision::patchify(img, cfg_.patch_size),
                         {1, cfg_.tokens_per_frame(), cfg_.patch_dim()});
  auto tokens = vision::vit_trunk(patches, *params_);
  lru_.emplace_front(key, tokens.values());
  index_[key] = lru_.begin();
  if (lru_.size() > max_entries_) {
    index_.erase(lru_.back().first);
    lru_.pop_back();
  }
  return lru_.front().second;
}

vision::VisualTokensT<float> EncodedSceneCache::tokens_for_batch(
    const data::SampleBatch& batch, Index frame_target) {
  check(frame_target >= batch.frames,
        "encoded cache: frame target below the batch frame count");
  const Index tp = cfg_.tokens_per_frame();
  const Index d = cfg_.dim;
  const std::size_t per_frame = static_cast<std::size_t>(tp * d);
  std::vector<float> out(static_cast<std::size_t>(batch.batch * frame_target) * per_frame);
  for (Index i = 0; i < batch.batch; ++i) {
    const auto& scene = batch.records[static_cast<std::size_t>(i)].scene;
    for (Index f = 0; f < frame_target; ++f) {
      const Index src_frame = batch.frames == 1 ? 0 : f;
      const auto& tokens = frame_tokens(scene, src_frame);
      std::copy(tokens.begin(), tokens.end(),
                out.begin() + (static_cast<std::size_t>(i * frame_target + f)) * per_frame);
    }
  }
  vision::VisualTokensT<float> v;
  v.frames = frame_target;
  v.tokens_per_frame = tp;
  v.tokens = Tensor::from_data({batch.batch, frame_target * tp, d}, std::move(out));
  return v;
}

// ---------------------------------------------------------------------------
// Caption loss
// ---------------------------------------------------------------------------

CaptionBatchResult caption_loss(lm::LmParams& decoder, const Tensor& prefix,
                                const data::SampleBatch& batch, bool want_accuracy) {
  return caption_loss_t<float>(decoder, prefix, batch, want_accuracy);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

std::string metrics_record_json(const MetricsRecord& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["stage"] = r.stage;
  j["loss"] = r.loss;
  j["lr"] = r.lr;
  if (r.val_acc) j["val_acc"] = *r.val_acc;
  return j.dump();
}

std::string RunLog::to_jsonl() const {
  std::string out;
  for (const auto& r : records) {
    out += metrics_record_json(r);
    out += '\n';
  }
  return out;
}

std::optional<double> RunLog::last_val_acc() const {
  for (auto it = records.rbegin(); it != records.rend(); ++it)
    if (it->val_acc) return it->val_acc;
  return std::nullopt;
}

std::optional<Index> convergence_probe(const RunLog& log, double threshold) {
  for (const auto& r : log.records)
    if (r.val_acc && *r.val_acc >= threshold) return r.step;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

double validation_accuracy(StageContext& ctx) {
  NoGradGuard ng;
  const auto& s = ctx.settings;
  check(s.val_samples % s.val_batch == 0,
        "validation: val_samples must be a multiple of val_batch");
  Index correct = 0, seen = 0, done = 0;
  Index batch_index = 0;
  while (done < s.val_samples) {
    const Index want = s.val_batch;
    auto batch = data::make_caption_batch(ctx.data_cfg, data::Split::Val, s.seed,
                                          batch_index++, want);
    auto visual = ctx.cache->tokens_for_batch(batch, s.frame_target);
    PrefixRequest req{&visual, 0, /*training=*/false};
    auto prefix = ctx.prefix_fn(req);
    auto out = caption_loss(*ctx.decoder, prefix, batch, /*want_accuracy=*/true);
    correct += out.correct_tokens;
    seen += out.masked_tokens;
    done += want;
  }
  return seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
}

StageResult run_caption_training(StageContext& ctx, AdamW& opt, Index start_step,
                                 std::ostream* metrics_out) {
  const auto& s = ctx.settings;
  s.opt.validate();
  check(ctx.cache && ctx.decoder && ctx.trainable, "run_caption_training: incomplete context");
  StageResult result;
  auto emit = [&](MetricsRecord rec) {
    if (metrics_out) {
      *metrics_out << metrics_record_json(rec) << '\n';
      metrics_out->flush();
    }
    result.log.records.push_back(std::move(rec));
  };
  auto wall_start = std::chrono::steady_clock::now();
  auto emit_timing = [&](Index step) {
    if (!ctx.timings_out) return;
    const auto now = std::chrono::steady_clock::now();
    const auto ms =
        std::chrono::duration_cast<std::chrono::milliseconds>(now - wall_start).count();
    wall_start = now;
    nlohmann::json j{{"step", step}, {"stage", ctx.stage_name}, {"wall_ms", ms}};
    *ctx.timings_out << j.dump() << '\n';
    ctx.timings_out->flush();
  };

  const Index end_step =
      s.stop_step > 0 ? std::min(s.stop_step, s.opt.total_steps) : s.opt.total_steps;
  for (Index step = start_step + 1; step <= end_step; ++step) {
    auto batch = data::make_caption_batch(ctx.data_cfg, data::Split::Train, s.seed,
                                          step - 1, s.opt.batch_size);
    auto visual = ctx.cache->tokens_for_batch(batch, s.frame_target);
    PrefixRequest req{&visual, step, /*training=*/true};
    auto prefix = ctx.prefix_fn(req);
    auto out = caption_loss(*ctx.decoder, prefix, batch, false);
    ctx.trainable->zero_grad();
    out.loss.backward();
    opt.step(lr_at(step, s.opt));
    result.final_loss = out.loss.item();
    result.steps_run = step;

    const bool last = step == end_step;
    const bool log_this = step % s.log_interval == 0 || step == 1 || last;
    const bool val_this = (s.val_interval > 0 && step % s.val_interval == 0) || last;
    if (log_this || val_this) {
      MetricsRecord rec;
      rec.step = step;
      rec.stage = ctx.stage_name;
      rec.loss = result.final_loss;
      rec.lr = lr_at(step, s.opt);
      if (val_this) {
        rec.val_acc = validation_accuracy(ctx);
        result.final_val_acc = *rec.val_acc;
      }
      emit(std::move(rec));
      emit_timing(step);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Stage wiring
// ---------------------------------------------------------------------------

namespace {
void freeze(ParamSet& set) {
  for (auto& [name, t] : set.items()) t.set_requires_grad(false);
}
}  // namespace

Stage1Result run_stage1(AlignmentSetup& setup, adapters::AdapterKind kind,
                        const adapters::ResamplerConfig& rcfg, lm::LmParams tlm_init,
                        std::ostream* metrics_out) {
  check(kind != adapters::AdapterKind::Palm2VAdapter,
        "stage 1 uses a cross-attention adapter (resampler or pooler)");
  Stage1Result result;
  result.kind = kind;
  result.tlm = std::move(tlm_init);

  ParamSet frozen;
  setup.encoder.visit("enc", frozen.collector());
  freeze(frozen);

  Rng rng(derive_seed(setup.settings.seed, "stage1-adapter"));
  ParamSet trainable;
  if (kind == adapters::AdapterKind::ResamplerBaseline) {
    result.res = adapters::ResamplerParamsT<float>::make(rcfg, setup.enc_cfg.dim,
                                                         setup.tlm_cfg.dim, rng);
    result.res.visit("adapter", trainable.collector());
  } else {
    result.pool = adapters::PoolerParamsT<float>::make(
        rcfg.n_queries, rcfg.query_dim, rcfg.hidden_dim, setup.enc_cfg.dim,
        setup.tlm_cfg.dim, rng);
    result.pool.visit("adapter", trainable.collector());
  }
  result.tlm.visit("tlm", trainable.collector());
  trainable.set_requires_grad(true);

  EncodedSceneCache cache(setup.enc_cfg, &setup.encoder);
  StageContext ctx;
  ctx.stage_name = "stage1_decoder";
  ctx.data_cfg = setup.data_cfg;
  ctx.cache = &cache;
  ctx.decoder = &result.tlm;
  if (kind == adapters::AdapterKind::ResamplerBaseline) {
    ctx.prefix_fn = [&result](const PrefixRequest& r) {
      return adapters::resampler_forward(*r.visual, result.res);
    };
  } else {
    ctx.prefix_fn = [&result](const PrefixRequest& r) {
      return adapters::attentional_pooler_forward(*r.visual, result.pool);
    };
  }
  ctx.trainable = &trainable;
  ctx.settings = setup.settings;

  AdamW opt(&trainable, setup.settings.opt);
  result.stage = run_caption_training(ctx, opt, 0, metrics_out);
  result.stage.opt_m = opt.moments_m();
  result.stage.opt_v = opt.moments_v();
  return result;
}

Stage2Result run_stage2(AlignmentSetup& setup, const adapters::ResamplerConfig& rcfg,
                        lm::LmParams tlm_init, lm::LmParams& llm,
                        std::ostream* metrics_out, const Checkpoint* resume) {
  Stage2Result result;
  result.tlm = std::move(tlm_init);

  ParamSet frozen;
  setup.encoder.visit("enc", frozen.collector());
  llm.visit("llm", frozen.collector());
  frozen.add("tlm.tok_table", result.tlm.tok_table);
  frozen.add("tlm.head_w", result.tlm.head_w);
  frozen.add("tlm.head_b", result.tlm.head_b);
  freeze(frozen);

  Rng rng(derive_seed(setup.settings.seed, "stage2-adapter"));
  result.res = adapters::ResamplerParamsT<float>::make(rcfg, setup.enc_cfg.dim,
                                                       setup.tlm_cfg.dim, rng);
  Rng proj_rng(derive_seed(setup.settings.seed, "stage2-proj"));
  result.proj = nn::linear_init<float>(setup.tlm_cfg.dim, setup.llm_cfg.dim, proj_rng);

  ParamSet trainable;
  result.res.visit("adapter", trainable.collector());
  result.tlm.visit_trunk("tlm", trainable.collector());
  trainable.add("proj", result.proj);
  trainable.set_requires_grad(true);

  EncodedSceneCache cache(setup.enc_cfg, &setup.encoder);
  StageContext ctx;
  ctx.stage_name = "stage2_adapter";
  ctx.data_cfg = setup.data_cfg;
  ctx.cache = &cache;
  ctx.decoder = &llm;
  ctx.prefix_fn = [&result](const PrefixRequest& r) {
    return adapters::vadapter_forward(*r.visual, result.res, result.tlm, result.proj);
  };
  ctx.trainable = &trainable;
  ctx.settings = setup.settings;

  AdamW opt(&trainable, setup.settings.opt);
  Index start_step = 0;
  if (resume) {
    resume->restore(trainable);
    opt.moments_m() = resume->opt_m;
    opt.moments_v() = resume->opt_v;
    opt.set_step_count(static_cast<Index>(resume->step));
    start_step = static_cast<Index>(resume->step);
  }
  result.stage = run_caption_training(ctx, opt, start_step, metrics_out);
  result.stage.opt_m = opt.moments_m();
  result.stage.opt_v = opt.moments_v();
  return result;
}

BaselineResult run_baseline(AlignmentSetup& setup, const adapters::ResamplerConfig& rcfg,
                            lm::LmParams& llm, std::ostream* metrics_out,
                            const Checkpoint* resume) {
  BaselineResult result;

  ParamSet frozen;
  setup.encoder.visit("enc", frozen.collector());
  llm.visit("llm", frozen.collector());
  freeze(frozen);

  Rng rng(derive_seed(setup.settings.seed, "baseline-adapter"));
  result.res = adapters::ResamplerParamsT<float>::make(rcfg, setup.enc_cfg.dim,
                                                       setup.llm_cfg.dim, rng);
  ParamSet trainable;
  result.res.visit("adapter", trainable.collector());
  trainable.set_requires_grad(true);

  EncodedSceneCache cache(setup.enc_cfg, &setup.encoder);
  StageContext ctx;
  ctx.stage_name = "baseline_resampler";
  ctx.data_cfg = setup.data_cfg;
  ctx.cache = &cache;
  ctx.decoder = &llm;
  ctx.prefix_fn = [&result](const PrefixRequest& r) {
    return adapters::resampler_forward(*r.visual, result.res);
  };
  ctx.trainable = &trainable;
  ctx.settings = setup.settings;

  AdamW opt(&trainable, setup.settings.opt);
  Index start_step = 0;
  if (resume) {
    resume->restore(trainable);
    opt.moments_m() = resume->opt_m;
    opt.moments_v() = resume->opt_v;
    opt.set_step_count(static_cast<Index>(resume->step));
    start_step = static_cast<Index>(resume->step);
  }
  result.stage = run_caption_training(ctx, opt, start_step, metrics_out);
  result.stage.opt_m = opt.moments_m();
  result.stage.opt_v = opt.moments_v();
  return result;
}

std::vector<std::string> stage2_trainable_names(const adapters::ResamplerConfig& rcfg,
                                                const lm::LmConfig& tlm_cfg) {
  Rng rng(0);
  auto res = adapters::ResamplerParamsT<float>::make(rcfg, 8, tlm_cfg.dim, rng);
  auto tlm = lm::LmParamsT<float>::make(tlm_cfg, rng);
  std::vector<std::string> names;
  auto collect = [&names](const std::string& n, Tensor&) { names.push_back(n); };
  res.visit("adapter", collect);
  tlm.visit_trunk("tlm", collect);
  names.push_back("proj");
  return names;
}

}  // namespace vlab::train
