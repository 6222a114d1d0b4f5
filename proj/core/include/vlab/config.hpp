#pragma once

#include <string>

#include <json.hpp>

#include "vlab/adapters.hpp"
#include "vlab/data.hpp"
#include "vlab/eval.hpp"
#include "vlab/lm.hpp"
#include "vlab/quantize.hpp"
#include "vlab/train.hpp"
#include "vlab/vision.hpp"

namespace vlab::cfg {

// Experiment configuration: a strict JSON document with fixed sections
// {data, encoder, tiny_lm, large_lm, adapter, optimizer, stages, eval,
// quantize}. Unknown keys and type mismatches are rejected by dotted path;
// parsing materializes every default, and serialize/parse round-trips to the
// identical canonical text.
class ExperimentConfig {
 public:
  static ExperimentConfig defaults();

  // Typed views over the document.
  data::DataConfig data_config() const;
  vision::VitConfig encoder_config() const;
  vision::PretrainMode encoder_pretrain_mode() const;
  Index encoder_pretrain_steps() const;
  lm::LmConfig tiny_lm_config() const;
  lm::LmConfig large_lm_config() const;
  adapters::AdapterSpec adapter_spec() const;

  // Optimizer with the stage's step budget filled in.
  train::OptimizerConfig optimizer_config(Index total_steps) const;
  Index stage_steps(const std::string& which) const;  // stage1|stage2|baseline
  train::TrainSettings stage_settings(const std::string& which, std::uint64_t seed) const;
  train::OptimizerConfig lm_pretrain_config(const std::string& which) const;  // tiny|large

  eval::EvalOptions eval_options(std::uint64_t seed) const;
  data::Split eval_split() const;
  quant::QuantizerConfig quantizer_config() const;
  Index quantize_steps() const;  // 0 -> baseline budget

  std::string serialize() const;
  std::string digest() const;

  const nlohmann::json& doc() const { return doc_; }

  // Dotted-path override, e.g. "adapter.resampler.n_layers=6". Validation can
  // be deferred when applying a batch of overrides.
  void set_override(const std::string& assignment, bool validate_now = true);

  void validate() const;

 private:
  friend ExperimentConfig parse_config(const std::string& text);
  nlohmann::json doc_;
};

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config_file(const std::string& path);  // empty path -> defaults

// Run directory layout: config.snapshot, checkpoints/, metrics.jsonl,
// timings.jsonl, reports/.
struct RunDirectory {
  std::string root;

  static RunDirectory create(const std::string& path, const ExperimentConfig& config);
  std::string checkpoints_dir() const;
  std::string reports_dir() const;
  std::string metrics_path() const;
  std::string timings_path() const;
};

}  // namespace vlab::cfg
