#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vlab/data.hpp"
#include "vlab/nn.hpp"
#include "vlab/optim.hpp"
#include "vlab/params.hpp"
#include "vlab/tokenizer.hpp"

namespace vlab::lm {

// Decoder-only transformer; "tiny" is the adapter-to-be, "large" the frozen
// decoder. Both share one vocabulary.
struct LmConfig {
  Index vocab_size = 0;  // 0: filled from the tokenizer
  Index dim = 64;
  Index depth = 2;
  Index heads = 4;
  Index max_seq_len = 96;
  std::string size_tag = "tiny";

  static LmConfig for_tag(const std::string& tag);

  void validate() const {
    check(vocab_size > 0 && dim > 0 && depth > 0 && heads > 0 && max_seq_len > 0,
          "lm config: all dims must be positive");
    check(dim % heads == 0, "lm config: dim must divide into heads");
  }
};

template <typename T>
struct LmParamsT {
  TensorT<T> tok_table;  // (V, D)
  TensorT<T> pos_table;  // (max_seq_len, D)
  std::vector<nn::BlockParamsT<T>> blocks;
  nn::LayerNormParamsT<T> final_ln;
  TensorT<T> head_w, head_b;  // (D, V), (V); used as decoder, unused as adapter

  static LmParamsT make(const LmConfig& cfg, Rng& rng) {
    cfg.validate();
    LmParamsT p;
    p.tok_table = TensorT<T>::randn({cfg.vocab_size, cfg.dim}, rng, T(0.02));
    p.pos_table = TensorT<T>::randn({cfg.max_seq_len, cfg.dim}, rng, T(0.02));
    for (Index i = 0; i < cfg.depth; ++i)
      p.blocks.push_back(nn::BlockParamsT<T>::make(cfg.dim, cfg.heads, rng));
    p.final_ln = nn::LayerNormParamsT<T>::make(cfg.dim);
    p.head_w = nn::linear_init<T>(cfg.dim, cfg.vocab_size, rng);
    p.head_b = TensorT<T>::zeros({cfg.vocab_size});
    return p;
  }

  Index dim() const { return tok_table.dim(1); }
  Index vocab() const { return tok_table.dim(0); }
  Index max_seq() const { return pos_table.dim(0); }

  template <typename V>
  void visit(const std::string& prefix, V&& v) {
    v(prefix + ".tok_table", tok_table);
    visit_trunk(prefix, v);
    v(prefix + ".head_w", head_w);
    v(prefix + ".head_b", head_b);
  }

  // The adapter-mode reachable set: blocks, final LN and positions. The token
  // table and LM head stay out (stage 2 neither uses nor trains them).
  template <typename V>
  void visit_trunk(const std::string& prefix, V&& v) {
    v(prefix + ".pos_table", pos_table);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit(prefix + ".block" + std::to_string(i), v);
    final_ln.visit(prefix + ".final_ln", v);
  }
};

using LmParams = LmParamsT<float>;

// Hidden states for a batch of embedding sequences: positions added, causal
// blocks, final LayerNorm. embeds is (B, L, D).
template <typename T>
TensorT<T> trunk_hidden(const TensorT<T>& embeds, LmParamsT<T>& p, bool causal = true) {
  check_shape(embeds.rank() == 3 && embeds.dim(2) == p.dim(),
              "lm trunk: embeds must be (batch, len, dim)");
  check(embeds.dim(1) <= p.max_seq(),
        "lm trunk: sequence length " + std::to_string(embeds.dim(1)) +
            " exceeds max " + std::to_string(p.max_seq()));
  auto x = add(embeds, embedding_rows(p.pos_table, nn::iota_ids(embeds.dim(1))));
  for (auto& block : p.blocks) x = nn::block_forward(x, block, causal);
  return nn::layer_norm(x, p.final_ln);
}

template <typename T>
TensorT<T> logits_from_hidden(const TensorT<T>& hidden, LmParamsT<T>& p) {
  return add(matmul(hidden, p.head_w), p.head_b);
}

// Token embeddings for a flat id list viewed as (B, L, D).
template <typename T>
TensorT<T> embed_ids(LmParamsT<T>& p, const std::vector<Index>& ids, Index batch,
                     Index len) {
  return embedding_rows(p.tok_table, ids, {batch, len});
}

// Soft prefix: continuous rows injected before (or between) token embeddings;
// excluded from every loss by construction of the loss mask.

// Single-sample forward per the module contract: causal attention over
// [prefix embeddings || token embeddings]; logits for every position.
template <typename T>
TensorT<T> lm_forward(const std::optional<TensorT<T>>& prefix,
                      const std::vector<Index>& token_ids, LmParamsT<T>& p) {
  std::vector<TensorT<T>> segments;
  Index total = 0;
  if (prefix) {
    check_shape(prefix->rank() == 2 && prefix->dim(1) == p.dim(),
                "lm_forward: prefix must be (len, dim)");
    segments.push_back(reshape(*prefix, {1, prefix->dim(0), p.dim()}));
    total += prefix->dim(0);
  }
  if (!token_ids.empty()) {
    segments.push_back(embed_ids(p, token_ids, 1, static_cast<Index>(token_ids.size())));
    total += static_cast<Index>(token_ids.size());
  }
  check(total > 0, "lm_forward: empty input");
  check(total <= p.max_seq(), "lm_forward: sequence overflow: " + std::to_string(total) +
                                  " > " + std::to_string(p.max_seq()));
  auto embeds = segments.size() == 1 ? segments[0] : concat(segments, 1);
  auto hidden = trunk_hidden(embeds, p, /*causal=*/true);
  return reshape(logits_from_hidden(hidden, p), {total, p.vocab()});
}

// Greedy decoding over an interleaved prompt [pre_ids || prefix || post_ids].
// Deterministic; stops at stop_id or after max_new tokens.
template <typename T>
std::vector<Index> greedy_decode_segments(LmParamsT<T>& p, const std::vector<Index>& pre_ids,
                                          const std::optional<TensorT<T>>& prefix,
                                          const std::vector<Index>& post_ids, Index max_new,
                                          Index stop_id) {
  check(max_new >= 1, "greedy_decode: max_new must be >= 1");
  NoGradGuard ng;
  std::vector<Index> generated;
  for (Index step = 0; step < max_new; ++step) {
    std::vector<TensorT<T>> segments;
    Index total = 0;
    if (!pre_ids.empty()) {
      segments.push_back(embed_ids(p, pre_ids, 1, static_cast<Index>(pre_ids.size())));
      total += static_cast<Index>(pre_ids.size());
    }
    if (prefix) {
      segments.push_back(reshape(*prefix, {1, prefix->dim(0), p.dim()}));
      total += prefix->dim(0);
    }
    std::vector<Index> tail = post_ids;
    tail.insert(tail.end(), generated.begin(), generated.end());
    if (!tail.empty()) {
      segments.push_back(embed_ids(p, tail, 1, static_cast<Index>(tail.size())));
      total += static_cast<Index>(tail.size());
    }
    if (total + 1 > p.max_seq()) break;
    auto embeds = segments.size() == 1 ? segments[0] : concat(segments, 1);
    auto hidden = trunk_hidden(embeds, p, true);
    auto last = slice(hidden, 1, total - 1, 1);
    auto logits = logits_from_hidden(last, p);
    const Index next = argmax_last(logits)[0];
    if (next == stop_id) break;
    generated.push_back(next);
  }
  return generated;
}

// Module-contract wrapper: prefix-first prompt.
template <typename T>
std::vector<Index> greedy_decode(const std::optional<TensorT<T>>& prefix,
                                 const std::vector<Index>& prompt_ids, LmParamsT<T>& p,
                                 Index max_new, Index stop_id) {
  return greedy_decode_segments<T>(p, {}, prefix, prompt_ids, max_new, stop_id);
}

// TLM-as-adapter: run the trunk causally over already-resampled visual rows
// and project the hidden states into the large model's width.
template <typename T>
TensorT<T> tlm_as_adapter_forward(const TensorT<T>& visual, LmParamsT<T>& tlm,
                                  const TensorT<T>& proj) {
  check_shape(visual.rank() == 3 && visual.dim(2) == tlm.dim(),
              "tlm adapter: visual rows must match the tiny LM width, got " +
                  shape_str(visual.shape()));
  check_shape(proj.rank() == 2 && proj.dim(0) == tlm.dim(),
              "tlm adapter: projection input dim mismatch");
  return matmul(trunk_hidden(visual, tlm, /*causal=*/true), proj);
}

// ---------------------------------------------------------------------------

struct PretrainResult {
  LmParams params;
  float final_loss = 0;
};

// Next-token pretraining on the synthetic text corpus (the PaLM2-pretraining
// stand-in for either LM size).
PretrainResult pretrain_tlm(const data::DataConfig& data_cfg, const LmConfig& cfg,
                            const train::OptimizerConfig& ocfg, std::uint64_t seed);

// Mean held-out perplexity of a text-only model.
double text_perplexity(const data::DataConfig& data_cfg, LmParams& params,
                       std::uint64_t seed, Index batches = 8, Index batch_size = 32);

}  // namespace vlab::lm
