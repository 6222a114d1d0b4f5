#include "vlab/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

namespace vlab::eval {

// ---------------------------------------------------------------------------
// CIDEr
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> words_of(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

// n-grams as joined strings; counts per sentence.
std::unordered_map<std::string, int> ngram_counts(const std::vector<std::string>& words,
                                                  int n) {
  std::unordered_map<std::string, int> counts;
  if (static_cast<int>(words.size()) < n) return counts;
  for (std::size_t i = 0; i + n <= words.size(); ++i) {
    std::string key = words[i];
    for (int j = 1; j < n; ++j) key += '\x1f' + words[i + j];
    ++counts[key];
  }
  return counts;
}

}  // namespace

double cider(const std::vector<std::string>& candidates,
             const std::vector<std::string>& references, int n_max) {
  check(!candidates.empty() && !references.empty(), "cider: empty corpus");
  check(candidates.size() == references.size(),
        "cider: candidate and reference counts differ");
  const auto n_images = static_cast<double>(references.size());

  double total = 0;
  for (int n = 1; n <= n_max; ++n) {
    // Document frequency over reference "documents" (one reference each).
    std::unordered_map<std::string, int> df;
    std::vector<std::unordered_map<std::string, int>> ref_counts, cand_counts;
    for (const auto& r : references) {
      ref_counts.push_back(ngram_counts(words_of(r), n));
      for (const auto& [k, c] : ref_counts.back()) ++df[k];
    }
    for (const auto& c : candidates) cand_counts.push_back(ngram_counts(words_of(c), n));

    auto idf = [&](const std::string& key) {
      auto it = df.find(key);
      const double d = it == df.end() ? 1.0 : std::max(1.0, static_cast<double>(it->second));
      return std::log(n_images / d);
    };

    double level = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      double dot = 0, cnorm = 0, rnorm = 0;
      for (const auto& [k, c] : cand_counts[i]) {
        const double w = c * idf(k);
        cnorm += w * w;
        auto it = ref_counts[i].find(k);
        if (it != ref_counts[i].end()) dot += w * (it->second * idf(k));
      }
      for (const auto& [k, c] : ref_counts[i]) {
        const double w = c * idf(k);
        rnorm += w * w;
      }
      if (cnorm > 0 && rnorm > 0) level += dot / (std::sqrt(cnorm) * std::sqrt(rnorm));
    }
    total += level / n_images;
  }
  return 10.0 * total / n_max;
}

std::string normalize_answer(const std::string& text) {
  std::string out;
  bool pending_space = false;
  for (char raw : text) {
    const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
    } else if (c == '.' || c == ',' || c == ':' || c == '?' || c == '!' || c == ';') {
      continue;
    } else {
      if (pending_space) out += ' ';
      pending_space = false;
      out += c;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

namespace {

struct PromptIds {
  std::vector<Index> pre, post;
};

PromptIds prompt_ids_for(Task task, const std::string& question,
                         const std::vector<std::pair<std::string, std::string>>& pseudo) {
  const auto& tok = lm::tokenizer();
  auto [before, after] = split_at_vis(render_prompt(task, question, pseudo));
  PromptIds ids;
  ids.pre.push_back(tok.bos_id());
  for (Index id : tok.encode(before)) ids.pre.push_back(id);
  ids.post = tok.encode(after);
  return ids;
}

// (1, n_q, D) prefix for a single scene.
Tensor scene_prefix(DecodeModel& model, const data::Scene& scene, Index frame_target) {
  data::SampleBatch batch;
  batch.batch = 1;
  batch.frames = scene.is_video() ? data::kFrames : 1;
  data::SampleRecord rec;
  rec.scene = scene;
  batch.records.push_back(rec);
  auto visual = model.cache->tokens_for_batch(batch, frame_target);
  train::PrefixRequest req{&visual, 0, /*training=*/false};
  return model.prefix_fn(req);
}

std::vector<Index> decode_ids(DecodeModel& model, const data::Scene& scene,
                              const PromptIds& prompt, const EvalOptions& opts) {
  NoGradGuard ng;
  auto prefix3 = scene_prefix(model, scene, opts.frame_target);
  auto prefix = reshape(prefix3, {prefix3.dim(1), prefix3.dim(2)});
  return lm::greedy_decode_segments(*model.decoder, prompt.pre,
                                    std::optional<Tensor>(prefix), prompt.post,
                                    opts.max_new, lm::tokenizer().eos_id());
}

}  // namespace

std::string decode_caption(DecodeModel& model, const data::Scene& scene,
                           const EvalOptions& opts) {
  auto ids = decode_ids(model, scene, prompt_ids_for(Task::Caption, "", {}), opts);
  return lm::tokenizer().decode(ids);
}

std::string decode_answer(DecodeModel& model, const data::Scene& scene,
                          const std::string& question, Task task,
                          const std::vector<std::pair<std::string, std::string>>& pseudo,
                          const EvalOptions& opts) {
  auto ids = decode_ids(model, scene, prompt_ids_for(task, question, pseudo), opts);
  return lm::tokenizer().decode(ids);
}

std::vector<std::pair<std::string, std::string>> pseudo_examples(
    const data::DataConfig& dcfg, Index count, std::uint64_t seed) {
  const auto& pool = data::pool(dcfg, data::Split::Train);
  std::vector<std::pair<std::string, std::string>> out;
  const std::uint64_t stream = derive_seed(seed, "pseudo-qa");
  for (Index i = 0; i < count; ++i) {
    const auto& scene =
        pool.images[splitmix64(stream + static_cast<std::uint64_t>(i)) % pool.images.size()];
    out.push_back(data::make_qa(scene));
  }
  return out;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

namespace {

// Teacher-forced accuracy flags for one sample with an arbitrary prompt.
std::pair<Index, Index> forced_counts(DecodeModel& model, const data::Scene& scene,
                                      const PromptIds& prompt,
                                      const std::vector<Index>& target_ids,
                                      const EvalOptions& opts) {
  NoGradGuard ng;
  const auto& tok = lm::tokenizer();
  data::SampleBatch batch;
  batch.batch = 1;
  batch.frames = scene.is_video() ? data::kFrames : 1;
  data::SampleRecord rec;
  rec.scene = scene;
  batch.records.push_back(rec);
  std::vector<Index> prompt_row = prompt.pre;
  prompt_row.push_back(tok.vis_id());
  prompt_row.insert(prompt_row.end(), prompt.post.begin(), prompt.post.end());
  batch.prompt_ids.push_back(prompt_row);
  batch.target_ids.push_back(target_ids);
  std::vector<std::uint8_t> mask(prompt_row.size(), 0);
  mask.insert(mask.end(), target_ids.size(), 1);
  batch.loss_mask.push_back(mask);

  auto visual = model.cache->tokens_for_batch(batch, opts.frame_target);
  train::PrefixRequest req{&visual, 0, /*training=*/false};
  auto prefix = model.prefix_fn(req);
  auto out = train::caption_loss(*model.decoder, prefix, batch, /*want_accuracy=*/true);
  return {out.correct_tokens, out.masked_tokens};
}

}  // namespace

EvalReport evaluate(DecodeModel& model, const data::DataConfig& dcfg, data::Split split,
                    const std::vector<Task>& tasks, const EvalOptions& opts) {
  check(split != data::Split::Train, "evaluate: split must be disjoint from training");
  const auto& pool = data::pool(dcfg, split);
  const auto& tok = lm::tokenizer();
  EvalReport report;

  for (Task task : tasks) {
    TaskReport tr;
    tr.pseudo_examples = task == Task::Caption ? 0 : opts.pseudo_examples;
    const bool video = task == Task::VideoQa;
    const auto& scenes = video ? pool.videos : pool.images;
    const Index n = std::min<Index>(opts.n_samples, static_cast<Index>(scenes.size()));
    check(n > 0, "evaluate: empty scene pool for task");
    tr.n_samples = n;

    auto pseudo = task == Task::Caption
                      ? std::vector<std::pair<std::string, std::string>>{}
                      : pseudo_examples(dcfg, opts.pseudo_examples, opts.seed);

    std::vector<std::string> candidates, refs;
    for (Index i = 0; i < n; ++i) {
      const auto& scene = scenes[static_cast<std::size_t>(i)];
      if (task == Task::Caption) {
        const std::string reference = data::caption(scene);
        const std::string decoded = decode_caption(model, scene, opts);
        candidates.push_back(decoded);
        refs.push_back(reference);
        if (normalize_answer(decoded) == normalize_answer(reference)) ++tr.exact_matches;
        auto prompt = prompt_ids_for(Task::Caption, "", {});
        std::vector<Index> target = tok.encode(reference);
        target.push_back(tok.eos_id());
        auto [correct, total] = forced_counts(model, scene, prompt, target, opts);
        tr.token_accuracy += total ? static_cast<double>(correct) / total : 0;
        if (correct == total) ++tr.all_tokens_correct;
      } else {
        auto [question, answer] = data::make_qa(scene);
        const std::string decoded =
            decode_answer(model, scene, question, task, pseudo, opts);
        if (normalize_answer(decoded) == normalize_answer(answer)) ++tr.exact_matches;
        auto prompt = prompt_ids_for(task, question, pseudo);
        std::vector<Index> target = tok.encode(answer);
        target.push_back(tok.eos_id());
        auto [correct, total] = forced_counts(model, scene, prompt, target, opts);
        tr.token_accuracy += total ? static_cast<double>(correct) / total : 0;
        if (correct == total) ++tr.all_tokens_correct;
      }
    }
    tr.exact_match = static_cast<double>(tr.exact_matches) / static_cast<double>(n);
    tr.token_accuracy /= static_cast<double>(n);
    if (task == Task::Caption) tr.cider = cider(candidates, refs);
    report.tasks[task_name(task)] = tr;
  }
  return report;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["config_digest"] = config_digest;
  j["checkpoint_tag"] = checkpoint_tag;
  for (const auto& [name, tr] : tasks) {
    j["tasks"][name] = {{"cider", tr.cider},
                        {"exact_match", tr.exact_match},
                        {"token_accuracy", tr.token_accuracy},
                        {"n_samples", tr.n_samples},
                        {"pseudo_examples", tr.pseudo_examples}};
  }
  return j.dump(2);
}

std::string fixed_table(const std::vector<std::string>& headers,
                        const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> widths(headers.size());
  for (std::size_t c = 0; c < headers.size(); ++c) widths[c] = headers[c].size();
  for (const auto& row : rows) {
    check(row.size() == headers.size(), "fixed_table: ragged row");
    for (std::size_t c = 0; c < row.size(); ++c)
      widths[c] = std::max(widths[c], row[c].size());
  }
  std::ostringstream os;
  auto emit_row = [&](const std::vector<std::string>& row) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      os << (c ? "  " : "") << row[c];
      os << std::string(widths[c] - row[c].size(), ' ');
    }
    os << '\n';
  };
  emit_row(headers);
  std::size_t total = 0;
  for (std::size_t c = 0; c < widths.size(); ++c) total += widths[c] + (c ? 2 : 0);
  os << std::string(total, '-') << '\n';
  for (const auto& row : rows) emit_row(row);
  return os.str();
}

}  // namespace vlab::eval
