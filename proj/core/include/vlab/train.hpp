#pragma once

#include <functional>
#include <list>
#include <optional>
#include <ostream>
#include <unordered_map>

#include "vlab/adapters.hpp"
#include "vlab/checkpoint.hpp"
#include "vlab/data.hpp"
#include "vlab/lm.hpp"
#include "vlab/optim.hpp"
#include "vlab/vision.hpp"

namespace vlab::train {

// ---------------------------------------------------------------------------
// Frozen-encoder feature cache. The encoder never trains during alignment, so
// per-(scene, frame) token grids are memoized; images are encoded once and
// tiled to the frame target.
// ---------------------------------------------------------------------------

class EncodedSceneCache {
 public:
  EncodedSceneCache(const vision::VitConfig& cfg, vision::VitParams* params,
                    std::size_t max_entries = 9000)
      : cfg_(cfg), params_(params), max_entries_(max_entries) {}

  vision::VisualTokensT<float> tokens_for_batch(const data::SampleBatch& batch,
                                                Index frame_target);

  std::size_t entries() const { return lru_.size(); }
  Index dim() const { return cfg_.dim; }

 private:
  const std::vector<float>& frame_tokens(const data::Scene& scene, Index frame);

  vision::VitConfig cfg_;
  vision::VitParams* params_;
  std::size_t max_entries_;
  std::list<std::pair<std::uint64_t, std::vector<float>>> lru_;
  std::unordered_map<std::uint64_t, decltype(lru_)::iterator> index_;
};

// ---------------------------------------------------------------------------
// Caption objective: the prefix replaces the <vis> placeholder inside the
// prompt; loss and accuracy cover caption positions only.
// ---------------------------------------------------------------------------

template <typename T>
struct CaptionBatchResultT {
  TensorT<T> loss;
  Index masked_tokens = 0;
  Index correct_tokens = 0;  // filled when want_accuracy
};

using CaptionBatchResult = CaptionBatchResultT<float>;

// Templated so the 64-bit gradient-verification path shares the exact
// assembly used in training.
template <typename T>
CaptionBatchResultT<T> caption_loss_t(lm::LmParamsT<T>& decoder, const TensorT<T>& prefix,
                                      const data::SampleBatch& batch, bool want_accuracy) {
  const auto& tok = lm::tokenizer();
  const Index b = batch.batch;
  check_shape(prefix.rank() == 3 && prefix.dim(0) == b && prefix.dim(2) == decoder.dim(),
              "caption_loss: prefix must be (batch, n_queries, decoder_dim), got " +
                  shape_str(prefix.shape()));
  const Index n_q = prefix.dim(1);

  const auto& prompt = batch.prompt_ids.at(0);
  for (const auto& p : batch.prompt_ids)
    check(p == prompt, "caption_loss: prompts must be identical within a batch");
  std::size_t vis_pos = prompt.size();
  for (std::size_t i = 0; i < prompt.size(); ++i)
    if (prompt[i] == tok.vis_id()) vis_pos = i;
  check(vis_pos < prompt.size(), "caption_loss: prompt lacks a <vis> placeholder");
  const std::vector<Index> pre(prompt.begin(), prompt.begin() + static_cast<long>(vis_pos));
  const std::vector<Index> post(prompt.begin() + static_cast<long>(vis_pos) + 1, prompt.end());
  const Index p_len = static_cast<Index>(pre.size());
  const Index q_len = static_cast<Index>(post.size());

  Index t_max = 0;
  for (const auto& t : batch.target_ids)
    t_max = std::max(t_max, static_cast<Index>(t.size()));
  const Index total = p_len + n_q + q_len + t_max;  // full stream length
  const Index in_len = total - 1;

  // Input ids after the prefix block: post ++ targets ++ pads, last dropped.
  const Index tail_len = q_len + t_max - 1;
  check(tail_len >= 1, "caption_loss: empty tail after the visual prefix");
  std::vector<Index> tail;
  tail.reserve(static_cast<std::size_t>(b * tail_len));
  std::vector<Index> targets(static_cast<std::size_t>(b * in_len), tok.pad_id());
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(b * in_len), 0);

  for (Index i = 0; i < b; ++i) {
    const auto& tgt = batch.target_ids[static_cast<std::size_t>(i)];
    std::vector<Index> stream;
    stream.reserve(static_cast<std::size_t>(total));
    stream.insert(stream.end(), pre.begin(), pre.end());
    stream.insert(stream.end(), static_cast<std::size_t>(n_q), tok.vis_id());
    stream.insert(stream.end(), post.begin(), post.end());
    stream.insert(stream.end(), tgt.begin(), tgt.end());
    stream.resize(static_cast<std::size_t>(total), tok.pad_id());

    for (Index t = 0; t < in_len; ++t) {
      const Index next = stream[static_cast<std::size_t>(t + 1)];
      targets[static_cast<std::size_t>(i * in_len + t)] = next;
      const bool in_caption = (t + 1) >= p_len + n_q + q_len;
      if (in_caption && next != tok.pad_id())
        mask[static_cast<std::size_t>(i * in_len + t)] = 1;
    }
    for (Index t = 0; t < tail_len; ++t)
      tail.push_back(stream[static_cast<std::size_t>(p_len + n_q + t)]);
  }

  auto emb_pre = expand_batch(embedding_rows(decoder.tok_table, pre), b);
  auto emb_tail = lm::embed_ids(decoder, tail, b, tail_len);
  auto embeds = concat<T>({emb_pre, prefix, emb_tail}, 1);
  auto hidden = lm::trunk_hidden(embeds, decoder, /*causal=*/true);
  auto logits = reshape(lm::logits_from_hidden(hidden, decoder),
                        {b * in_len, decoder.vocab()});

  CaptionBatchResultT<T> out;
  out.loss = cross_entropy(logits, targets, mask);
  for (auto m : mask) out.masked_tokens += m;
  if (want_accuracy) {
    auto pred = argmax_last(logits);
    for (std::size_t r = 0; r < mask.size(); ++r)
      if (mask[r] && pred[r] == targets[r]) ++out.correct_tokens;
  }
  return out;
}

CaptionBatchResult caption_loss(lm::LmParams& decoder, const Tensor& prefix,
                                const data::SampleBatch& batch, bool want_accuracy);

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricsRecord {
  Index step = 0;
  std::string stage;
  double loss = 0;
  double lr = 0;
  std::optional<double> val_acc;
};

std::string metrics_record_json(const MetricsRecord& r);

struct RunLog {
  std::vector<MetricsRecord> records;

  std::string to_jsonl() const;
  std::optional<double> last_val_acc() const;
};

// Earliest logged step whose validation accuracy reaches the threshold;
// nullopt is the "never" sentinel.
std::optional<Index> convergence_probe(const RunLog& log, double threshold);

// ---------------------------------------------------------------------------
// Generic caption-alignment training loop
// ---------------------------------------------------------------------------

struct TrainSettings {
  OptimizerConfig opt;
  Index val_interval = 100;
  Index val_samples = 256;
  Index val_batch = 32;
  Index log_interval = 25;
  Index frame_target = data::kFrames;
  double convergence_threshold = 0.8;
  std::uint64_t seed = 0;
  // Stop early at this step while keeping the full opt.total_steps schedule
  // (checkpoint-and-resume splits a run without changing its trajectory).
  Index stop_step = 0;  // 0: run to opt.total_steps
};

struct PrefixRequest {
  const vision::VisualTokensT<float>* visual = nullptr;
  Index step = 0;       // current optimizer step (schedules)
  bool training = true; // false: deterministic eval-mode forward
};
using PrefixFn = std::function<Tensor(const PrefixRequest&)>;

struct StageResult {
  RunLog log;
  double final_val_acc = 0;
  Index steps_run = 0;
  double final_loss = 0;
  // Final optimizer moments, for checkpointing mid-schedule resumes.
  std::map<std::string, std::vector<float>> opt_m, opt_v;
};

struct StageContext {
  std::string stage_name;
  data::DataConfig data_cfg;
  EncodedSceneCache* cache = nullptr;
  lm::LmParams* decoder = nullptr;
  PrefixFn prefix_fn;
  ParamSet* trainable = nullptr;
  TrainSettings settings;
  // Wall-clock sidecar; kept out of metrics.jsonl so metrics stay
  // byte-reproducible.
  std::ostream* timings_out = nullptr;
};

// Runs (start_step, total_steps] caption training steps. Data, noise and
// schedule are pure functions of (seed, step), so resuming from a checkpoint
// continues bit-exactly. metrics_out, when set, receives JSON lines as they
// are produced.
StageResult run_caption_training(StageContext& ctx, AdamW& opt, Index start_step = 0,
                                 std::ostream* metrics_out = nullptr);

// Validation token accuracy over the fixed val set.
double validation_accuracy(StageContext& ctx);

// ---------------------------------------------------------------------------
// Stage wiring. The encoder is frozen everywhere; the large LM is frozen in
// stage 2 and baseline training.
// ---------------------------------------------------------------------------

struct AlignmentSetup {
  data::DataConfig data_cfg;
  vision::VitConfig enc_cfg;
  vision::VitParams encoder;  // frozen
  lm::LmConfig tlm_cfg;
  lm::LmConfig llm_cfg;
  TrainSettings settings;
};

struct Stage1Result {
  StageResult stage;
  adapters::AdapterKind kind = adapters::AdapterKind::ResamplerBaseline;
  adapters::ResamplerParams res;
  adapters::PoolerParams pool;
  lm::LmParams tlm;
};

// Stage 1: frozen encoder -> 1-layer resampler (or pooler) -> TLM as decoder.
// Trains the adapter and the full TLM.
Stage1Result run_stage1(AlignmentSetup& setup, adapters::AdapterKind kind,
                        const adapters::ResamplerConfig& rcfg, lm::LmParams tlm_init,
                        std::ostream* metrics_out = nullptr);

struct Stage2Result {
  StageResult stage;
  adapters::ResamplerParams res;
  lm::LmParams tlm;
  Tensor proj;
};

// Stage 2: frozen encoder -> {resampler + TLM trunk + projection} -> frozen
// large LM. Trainable set is exactly those three groups.
Stage2Result run_stage2(AlignmentSetup& setup, const adapters::ResamplerConfig& rcfg,
                        lm::LmParams tlm_init, lm::LmParams& llm,
                        std::ostream* metrics_out = nullptr,
                        const Checkpoint* resume = nullptr);

struct BaselineResult {
  StageResult stage;
  adapters::ResamplerParams res;
};

// Baseline: frozen encoder -> N-layer resampler -> frozen large LM; only the
// resampler trains.
BaselineResult run_baseline(AlignmentSetup& setup, const adapters::ResamplerConfig& rcfg,
                            lm::LmParams& llm, std::ostream* metrics_out = nullptr,
                            const Checkpoint* resume = nullptr);

// Names of the trainable groups per stage, for the freezing-contract checks.
std::vector<std::string> stage2_trainable_names(const adapters::ResamplerConfig& rcfg,
                                                const lm::LmConfig& tlm_cfg);

}  // namespace vlab::train
