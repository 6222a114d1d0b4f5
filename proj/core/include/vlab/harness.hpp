#pragma once

#include <optional>
#include <string>

#include "vlab/config.hpp"

namespace vlab::harness {

// Frozen backbones shared by every wiring under one run seed: the encoder and
// the text-pretrained large decoder.
struct Backbones {
  vision::VitConfig enc_cfg;
  vision::VitParams encoder;
  lm::LmConfig tlm_cfg;
  lm::LmConfig llm_cfg;
  lm::LmParams llm;
};

Backbones build_backbones(const cfg::ExperimentConfig& config, std::uint64_t seed,
                          bool with_llm = true);

enum class TlmInit { Random, Pretrained };
lm::LmParams build_tlm(const cfg::ExperimentConfig& config, std::uint64_t seed,
                       TlmInit init);

// A self-contained evaluable model: frozen backbones plus whatever the run
// trained, with the wiring recorded.
struct AlignedModel {
  enum class Wiring { Stage1Decoder, VAdapter, Baseline, QuantizedBaseline };
  Wiring wiring = Wiring::Baseline;

  vision::VitConfig enc_cfg;
  vision::VitParams encoder;
  lm::LmConfig tlm_cfg, llm_cfg;
  lm::LmParams tlm;  // stage-1 decoder / vadapter trunk
  lm::LmParams llm;  // large decoder (stage2 / baseline)

  adapters::AdapterKind kind = adapters::AdapterKind::ResamplerBaseline;
  adapters::ResamplerConfig rcfg;
  adapters::ResamplerParams res;
  adapters::PoolerParams pool;
  Tensor proj;

  quant::QuantizerParams qparams;
  quant::QuantizerConfig qcfg;

  lm::LmParams& decoder() {
    return wiring == Wiring::Stage1Decoder ? tlm : llm;
  }
};

const char* wiring_name(AlignedModel::Wiring w);

// Decode hookup; the cache must outlive the returned model.
eval::DecodeModel make_decode_model(AlignedModel& model, train::EncodedSceneCache& cache);

// ---------------------------------------------------------------------------
// Pipelines
// ---------------------------------------------------------------------------

struct PipelineOutputs {
  AlignedModel model;
  train::StageResult stage1;  // empty for baseline wiring
  train::StageResult stage2;  // stage2 / baseline / quantized result
};

// Stage 1 only (TLM as decoder), with the configured adapter kind.
PipelineOutputs run_stage1_pipeline(const cfg::ExperimentConfig& config, std::uint64_t seed,
                                    Backbones& backbones, lm::LmParams tlm_init,
                                    adapters::AdapterKind kind,
                                    const adapters::ResamplerConfig& rcfg,
                                    std::ostream* metrics = nullptr,
                                    std::ostream* timings = nullptr);

// Full progressive pipeline: stage 1 then stage 2.
PipelineOutputs run_vadapter_pipeline(const cfg::ExperimentConfig& config,
                                      std::uint64_t seed, Backbones& backbones,
                                      lm::LmParams tlm_init, bool run_stage1_first,
                                      std::ostream* metrics = nullptr,
                                      std::ostream* timings = nullptr);

// N-layer resampler baseline against the frozen large LM.
PipelineOutputs run_baseline_pipeline(const cfg::ExperimentConfig& config,
                                      std::uint64_t seed, Backbones& backbones,
                                      const adapters::ResamplerConfig& rcfg,
                                      std::ostream* metrics = nullptr,
                                      std::ostream* timings = nullptr);

eval::EvalReport evaluate_model(AlignedModel& model, const cfg::ExperimentConfig& config,
                                std::uint64_t seed,
                                const std::vector<eval::Task>& tasks);

// ---------------------------------------------------------------------------
// Checkpoint packing
// ---------------------------------------------------------------------------

train::Checkpoint pack_model(const AlignedModel& model, const cfg::ExperimentConfig& config,
                             std::uint64_t seed, Index step);
AlignedModel unpack_model(const train::Checkpoint& ckpt, const cfg::ExperimentConfig& config);

// Stand-alone LM checkpoints (pretrain-lm subcommand).
train::Checkpoint pack_lm(const lm::LmParams& params, const std::string& tag,
                          const cfg::ExperimentConfig& config, std::uint64_t seed);
lm::LmParams unpack_lm(const train::Checkpoint& ckpt, const lm::LmConfig& cfg);

}  // namespace vlab::harness
