#include "vlab/lm.hpp"

namespace vlab::lm {

LmConfig LmConfig::for_tag(const std::string& tag) {
  LmConfig cfg;
  cfg.size_tag = tag;
  cfg.vocab_size = tokenizer().vocab_size();
  if (tag == "tiny") {
    cfg.dim = 64;
    cfg.depth = 2;
    cfg.heads = 4;
  } else if (tag == "large") {
    cfg.dim = 192;
    cfg.depth = 4;
    cfg.heads = 12;
  } else {
    throw ContractError("lm config: unknown size tag '" + tag + "'");
  }
  return cfg;
}

namespace {

struct PackedText {
  std::vector<Index> inputs;    // (B, L-1) flattened
  std::vector<Index> targets;   // row-major (B * (L-1))
  std::vector<std::uint8_t> mask;
  Index batch = 0, len = 0;  // len = L-1
};

PackedText pack_rows(const data::TextBatch& batch, Index pad_id) {
  PackedText out;
  out.batch = static_cast<Index>(batch.rows.size());
  std::size_t max_len = 0;
  for (const auto& row : batch.rows) max_len = std::max(max_len, row.size());
  out.len = static_cast<Index>(max_len) - 1;
  for (const auto& row : batch.rows) {
    for (std::size_t t = 0; t < max_len - 1; ++t) {
      out.inputs.push_back(t < row.size() ? row[t] : pad_id);
      const Index tgt = (t + 1) < row.size() ? row[t + 1] : pad_id;
      out.targets.push_back(tgt);
      out.mask.push_back(tgt == pad_id ? 0 : 1);
    }
  }
  return out;
}

}  // namespace

PretrainResult pretrain_tlm(const data::DataConfig& data_cfg, const LmConfig& cfg,
                            const train::OptimizerConfig& ocfg, std::uint64_t seed) {
  ocfg.validate();
  Rng rng(derive_seed(seed, "lm-init"));
  PretrainResult result{LmParamsT<float>::make(cfg, rng), 0.0f};
  auto& params = result.params;

  ParamSet trainable;
  params.visit("lm", trainable.collector());
  trainable.set_requires_grad(true);
  train::AdamW opt(&trainable, ocfg);
  const auto pad = tokenizer().pad_id();

  for (Index step = 1; step <= ocfg.total_steps; ++step) {
    auto text = data::make_text_batch(data_cfg, derive_seed(seed, "lm-pretrain"), step - 1,
                                      ocfg.batch_size);
    auto packed = pack_rows(text, pad);
    auto embeds = embed_ids(params, packed.inputs, packed.batch, packed.len);
    auto hidden = trunk_hidden(embeds, params, true);
    auto logits = reshape(logits_from_hidden(hidden, params),
                          {packed.batch * packed.len, params.vocab()});
    auto loss = cross_entropy(logits, packed.targets, packed.mask);
    trainable.zero_grad();
    loss.backward();
    opt.step(train::lr_at(step, ocfg));
    result.final_loss = loss.item();
  }
  return result;
}

double text_perplexity(const data::DataConfig& data_cfg, LmParams& params,
                       std::uint64_t seed, Index batches, Index batch_size) {
  NoGradGuard ng;
  const auto pad = tokenizer().pad_id();
  double total_nll = 0;
  Index total_tokens = 0;
  for (Index b = 0; b < batches; ++b) {
    auto text = data::make_text_batch(data_cfg, derive_seed(seed, "lm-heldout"),
                                      1'000'000 + b, batch_size);
    auto packed = pack_rows(text, pad);
    auto embeds = embed_ids(params, packed.inputs, packed.batch, packed.len);
    auto logits = reshape(logits_from_hidden(trunk_hidden(embeds, params, true), params),
                          {packed.batch * packed.len, params.vocab()});
    Index n_masked = 0;
    for (auto m : packed.mask) n_masked += m;
    total_nll += static_cast<double>(cross_entropy(logits, packed.targets, packed.mask).item()) *
                 static_cast<double>(n_masked);
    total_tokens += n_masked;
  }
  return std::exp(total_nll / static_cast<double>(total_tokens));
}

}  // namespace vlab::lm
