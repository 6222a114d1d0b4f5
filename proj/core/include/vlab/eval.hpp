#pragma once

#include <map>
#include <string>
#include <vector>

#include "vlab/prompts.hpp"
#include "vlab/train.hpp"

namespace vlab::eval {

// Consensus caption metric: cosine similarity of TF-IDF weighted n-gram
// vectors, averaged over n = 1..4, scaled by 10. IDF comes from the
// reference corpus; document frequency is clamped at 1 for unseen n-grams.
double cider(const std::vector<std::string>& candidates,
             const std::vector<std::string>& references, int n_max = 4);

// Lowercase, punctuation stripped, whitespace collapsed.
std::string normalize_answer(const std::string& text);

struct TaskReport {
  double cider = 0;
  double exact_match = 0;
  double token_accuracy = 0;
  Index n_samples = 0;
  Index pseudo_examples = 0;
  // Per-sample flags for the metric-sanity invariant.
  Index exact_matches = 0;
  Index all_tokens_correct = 0;
};

struct EvalReport {
  std::map<std::string, TaskReport> tasks;
  std::string config_digest;
  std::string checkpoint_tag;

  std::string to_json() const;
};

struct EvalOptions {
  Index n_samples = 64;
  Index max_new = 16;
  Index pseudo_examples = 4;
  Index frame_target = data::kFrames;
  std::uint64_t seed = 17;  // pseudo-example selection only
};

// Everything needed to decode from visual input: the frozen-encoder cache,
// the adapter forward, and the decoding LM.
struct DecodeModel {
  train::EncodedSceneCache* cache = nullptr;
  train::PrefixFn prefix_fn;
  lm::LmParams* decoder = nullptr;
};

// Greedy caption for one scene, via the task prompt.
std::string decode_caption(DecodeModel& model, const data::Scene& scene,
                           const EvalOptions& opts);

// Greedy one-word answer for a question about a scene.
std::string decode_answer(DecodeModel& model, const data::Scene& scene,
                          const std::string& question, Task task,
                          const std::vector<std::pair<std::string, std::string>>& pseudo,
                          const EvalOptions& opts);

// Text-only pseudo QA examples drawn from the training split.
std::vector<std::pair<std::string, std::string>> pseudo_examples(
    const data::DataConfig& dcfg, Index count, std::uint64_t seed);

EvalReport evaluate(DecodeModel& model, const data::DataConfig& dcfg, data::Split split,
                    const std::vector<Task>& tasks, const EvalOptions& opts);

// Fixed-width table formatting used by the CLI report printers.
std::string fixed_table(const std::vector<std::string>& headers,
                        const std::vector<std::vector<std::string>>& rows);

}  // namespace vlab::eval
