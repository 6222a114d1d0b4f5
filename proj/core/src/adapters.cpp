#include "vlab/adapters.hpp"

namespace vlab::adapters {

const char* ln_mode_name(LnMode m) {
  switch (m) {
    case LnMode::None: return "none";
    case LnMode::Shared: return "shared";
    case LnMode::Separate: return "separate";
  }
  return "?";
}

LnMode ln_mode_from_name(const std::string& name) {
  if (name == "none") return LnMode::None;
  if (name == "shared") return LnMode::Shared;
  if (name == "separate") return LnMode::Separate;
  throw ContractError("unknown ln_mode '" + name + "'");
}

const char* adapter_kind_name(AdapterKind k) {
  switch (k) {
    case AdapterKind::ResamplerBaseline: return "resampler_baseline";
    case AdapterKind::AttentionalPooler: return "attentional_pooler";
    case AdapterKind::Palm2VAdapter: return "palm2_vadapter";
  }
  return "?";
}

AdapterKind adapter_kind_from_name(const std::string& name) {
  if (name == "resampler_baseline") return AdapterKind::ResamplerBaseline;
  if (name == "attentional_pooler") return AdapterKind::AttentionalPooler;
  if (name == "palm2_vadapter") return AdapterKind::Palm2VAdapter;
  throw ContractError("unknown adapter kind '" + name + "'");
}

namespace {
Index ln_count(Index dim) { return 2 * dim; }
Index linear_count(Index in, Index out) { return in * out + out; }
Index attention_count(Index q_in, Index kv_in, Index attn_dim, Index out) {
  return linear_count(q_in, attn_dim) + 2 * linear_count(kv_in, attn_dim) +
         linear_count(attn_dim, out);
}
Index ffn_count(Index dim, Index inner) {
  return linear_count(dim, inner) + linear_count(inner, dim);
}
Index block_count(Index dim) {
  return 2 * ln_count(dim) + attention_count(dim, dim, dim, dim) + ffn_count(dim, 4 * dim);
}
}  // namespace

Index resampler_param_count(const ResamplerConfig& cfg, Index vision_dim, Index out_dim) {
  cfg.validate();
  Index per_layer = attention_count(cfg.query_dim, cfg.hidden_dim, cfg.hidden_dim,
                                    cfg.query_dim);
  switch (cfg.ln_mode) {
    case LnMode::None: break;
    case LnMode::Shared: per_layer += ln_count(cfg.query_dim); break;
    case LnMode::Separate:
      per_layer += ln_count(cfg.query_dim) + ln_count(cfg.hidden_dim);
      break;
  }
  if (cfg.use_ffn)
    per_layer += ln_count(cfg.query_dim) + ffn_count(cfg.query_dim, 4 * cfg.hidden_dim);
  if (cfg.kv_concat_queries && cfg.query_dim != cfg.hidden_dim)
    per_layer += cfg.query_dim * cfg.hidden_dim;

  Index total = linear_count(vision_dim, cfg.hidden_dim) +  // input projection
                cfg.n_queries * cfg.query_dim + cfg.n_layers * per_layer +
                linear_count(cfg.query_dim, out_dim);
  if (cfg.final_ln) total += ln_count(cfg.query_dim);
  if (cfg.use_time_embedding) total += data::kFrames * cfg.hidden_dim;
  return total;
}

Index pooler_param_count(Index n_queries, Index query_dim, Index hidden_dim,
                         Index vision_dim, Index out_dim) {
  return linear_count(vision_dim, hidden_dim) + n_queries * query_dim +
         attention_count(query_dim, hidden_dim, hidden_dim, query_dim) +
         ln_count(query_dim) + linear_count(query_dim, out_dim);
}

Index lm_param_count(const lm::LmConfig& cfg) {
  return cfg.vocab_size * cfg.dim + lm_trunk_param_count(cfg) +
         linear_count(cfg.dim, cfg.vocab_size);
}

Index lm_trunk_param_count(const lm::LmConfig& cfg) {
  return cfg.max_seq_len * cfg.dim + cfg.depth * block_count(cfg.dim) + ln_count(cfg.dim);
}

ParamCount count_parameters(const AdapterSpec& spec, Index vision_dim, Index target_lm_dim,
                            const lm::LmConfig& tlm_cfg) {
  spec.validate();
  ParamCount out;
  switch (spec.kind) {
    case AdapterKind::ResamplerBaseline: {
      out.total = resampler_param_count(spec.resampler, vision_dim, target_lm_dim);
      out.baseline_trainable = out.total;
      out.stage1_trainable = out.total;
      out.stage2_trainable = out.total;
      break;
    }
    case AdapterKind::AttentionalPooler: {
      out.total = pooler_param_count(spec.resampler.n_queries, spec.resampler.query_dim,
                                     spec.resampler.hidden_dim, vision_dim, target_lm_dim);
      out.baseline_trainable = out.total;
      out.stage1_trainable = out.total;
      out.stage2_trainable = out.total;
      break;
    }
    case AdapterKind::Palm2VAdapter: {
      const Index res = resampler_param_count(spec.resampler, vision_dim, tlm_cfg.dim);
      const Index tlm_full = lm_param_count(tlm_cfg);
      const Index tlm_trunk = lm_trunk_param_count(tlm_cfg);
      const Index proj = tlm_cfg.dim * target_lm_dim;
      out.total = res + tlm_full + proj;
      out.stage1_trainable = res + tlm_full;
      out.stage2_trainable = res + tlm_trunk + proj;
      out.baseline_trainable = res;
      break;
    }
  }
  return out;
}

std::vector<AblationRow> table1_rows(const ResamplerConfig& base) {
  std::vector<AblationRow> rows;
  auto push = [&rows](const char* section, std::string label, ResamplerConfig cfg) {
    rows.push_back({section, std::move(label), cfg});
  };

  {  // (a) LayerNorm placement
    ResamplerConfig c = base;
    c.ln_mode = LnMode::None;
    c.final_ln = true;
    push("a", "ln=none final_ln=yes", c);
    c = base;
    c.ln_mode = LnMode::Shared;
    c.final_ln = false;
    push("a", "ln=shared final_ln=no", c);
    c = base;
    c.ln_mode = LnMode::Separate;
    c.final_ln = false;
    push("a", "ln=separate final_ln=no", c);
    c = base;
    c.ln_mode = LnMode::Separate;
    c.final_ln = true;
    push("a", "ln=separate final_ln=yes", c);
  }
  {  // (b) FFN and time embedding
    ResamplerConfig c = base;
    c.use_ffn = true;
    c.use_time_embedding = false;
    push("b", "ffn=yes time_emb=no", c);
    c = base;
    c.use_ffn = false;
    c.use_time_embedding = true;
    push("b", "ffn=no time_emb=yes", c);
    c = base;
    c.use_ffn = true;
    c.use_time_embedding = true;
    push("b", "ffn=yes time_emb=yes", c);
  }
  {  // (c) query dimension: half / base / double
    for (Index qd : {base.query_dim / 2, base.query_dim, base.query_dim * 2}) {
      ResamplerConfig c = base;
      c.query_dim = qd;
      if (c.ln_mode == LnMode::Shared && c.query_dim != c.hidden_dim)
        c.ln_mode = LnMode::Separate;
      push("c", "query_dim=" + std::to_string(qd), c);
    }
  }
  {  // (d) hidden dimension
    for (Index hd : {base.hidden_dim / 2, base.hidden_dim, base.hidden_dim * 2}) {
      ResamplerConfig c = base;
      c.hidden_dim = hd;
      if (c.ln_mode == LnMode::Shared && c.query_dim != c.hidden_dim)
        c.ln_mode = LnMode::Separate;
      push("d", "hidden_dim=" + std::to_string(hd), c);
    }
  }
  {  // (e) depth
    for (Index layers : {Index{1}, Index{3}, Index{6}}) {
      ResamplerConfig c = base;
      c.n_layers = layers;
      push("e", "layers=" + std::to_string(layers), c);
    }
  }
  return rows;
}

}  // namespace vlab::adapters
