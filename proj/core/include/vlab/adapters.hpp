#pragma once

#include <string>
#include <vector>

#include "vlab/lm.hpp"
#include "vlab/nn.hpp"
#include "vlab/vision.hpp"

namespace vlab::adapters {

enum class LnMode { None, Shared, Separate };
const char* ln_mode_name(LnMode m);
LnMode ln_mode_from_name(const std::string& name);

// Every ablated knob of the perceiver resampler. Defaults are the strongest
// configuration at desk scale: separate LNs, no final LN, FFN and time
// embedding on, queries concatenated into keys/values.
struct ResamplerConfig {
  Index n_queries = 16;
  Index query_dim = 64;
  Index hidden_dim = 64;  // cross-attention width
  Index n_layers = 6;
  LnMode ln_mode = LnMode::Separate;
  bool final_ln = false;
  bool use_ffn = true;
  bool use_time_embedding = true;
  bool kv_concat_queries = true;

  Index heads() const { return hidden_dim >= 16 ? hidden_dim / 16 : 1; }

  void validate() const {
    check(n_queries >= 1, "resampler: n_queries must be >= 1");
    check(query_dim > 0 && hidden_dim > 0 && n_layers >= 1,
          "resampler: dims and layer count must be positive");
    check(hidden_dim % heads() == 0, "resampler: hidden dim must divide into heads");
    check(ln_mode != LnMode::Shared || query_dim == hidden_dim,
          "resampler: shared LN requires query_dim == hidden_dim");
  }
};

template <typename T>
struct ResamplerLayerT {
  nn::LayerNormParamsT<T> ln_q, ln_kv;  // by ln_mode; shared mode aliases ln_q
  nn::AttentionParamsT<T> attn;         // (query_dim -> hidden) x (hidden -> hidden)
  nn::LayerNormParamsT<T> ln_ffn;       // present iff use_ffn
  nn::FfnParamsT<T> ffn;                // present iff use_ffn
  TensorT<T> q_bridge;                  // query_dim -> hidden_dim, only for concat with
                                        // mismatched dims
};

template <typename T>
struct ResamplerParamsT {
  ResamplerConfig cfg;
  TensorT<T> in_proj, in_bias;  // vision_dim -> hidden_dim
  TensorT<T> queries;           // (n_queries, query_dim)
  std::vector<ResamplerLayerT<T>> layers;
  nn::LayerNormParamsT<T> final_ln;  // present iff cfg.final_ln
  nn::TimeEmbeddingT<T> time;        // present iff cfg.use_time_embedding
  TensorT<T> out_proj, out_bias;     // query_dim -> out_dim

  Index out_dim() const { return out_proj.dim(1); }
  Index vision_dim() const { return in_proj.dim(0); }

  static ResamplerParamsT make(const ResamplerConfig& cfg, Index vision_dim,
                               Index out_dim, Rng& rng) {
    cfg.validate();
    ResamplerParamsT p;
    p.cfg = cfg;
    p.in_proj = nn::linear_init<T>(vision_dim, cfg.hidden_dim, rng);
    p.in_bias = TensorT<T>::zeros({cfg.hidden_dim});
    p.queries = TensorT<T>::randn({cfg.n_queries, cfg.query_dim}, rng, T(0.02));
    for (Index i = 0; i < cfg.n_layers; ++i) {
      ResamplerLayerT<T> layer;
      if (cfg.ln_mode == LnMode::Separate) {
        layer.ln_q = nn::LayerNormParamsT<T>::make(cfg.query_dim);
        layer.ln_kv = nn::LayerNormParamsT<T>::make(cfg.hidden_dim);
      } else if (cfg.ln_mode == LnMode::Shared) {
        layer.ln_q = nn::LayerNormParamsT<T>::make(cfg.query_dim);
        layer.ln_kv = layer.ln_q;  // same tensors: one parameter set, two uses
      }
      layer.attn = nn::AttentionParamsT<T>::make(cfg.query_dim, cfg.hidden_dim,
                                                 cfg.hidden_dim, cfg.query_dim,
                                                 cfg.heads(), rng);
      if (cfg.use_ffn) {
        layer.ln_ffn = nn::LayerNormParamsT<T>::make(cfg.query_dim);
        // FFN expansion rides the ablated hidden width, like the attention.
        layer.ffn = nn::FfnParamsT<T>::make_inner(cfg.query_dim, 4 * cfg.hidden_dim, rng);
      }
      if (cfg.kv_concat_queries && cfg.query_dim != cfg.hidden_dim)
        layer.q_bridge = nn::linear_init<T>(cfg.query_dim, cfg.hidden_dim, rng);
      p.layers.push_back(std::move(layer));
    }
    if (cfg.final_ln) p.final_ln = nn::LayerNormParamsT<T>::make(cfg.query_dim);
    if (cfg.use_time_embedding)
      p.time = nn::TimeEmbeddingT<T>::make(data::kFrames, cfg.hidden_dim, rng);
    p.out_proj = nn::linear_init<T>(cfg.query_dim, out_dim, rng);
    p.out_bias = TensorT<T>::zeros({out_dim});
    return p;
  }

  template <typename V>
  void visit(const std::string& prefix, V&& v) {
    v(prefix + ".in_proj", in_proj);
    v(prefix + ".in_bias", in_bias);
    v(prefix + ".queries", queries);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto& layer = layers[i];
      const std::string lp = prefix + ".layer" + std::to_string(i);
      if (cfg.ln_mode == LnMode::Separate) {
        layer.ln_q.visit(lp + ".ln_q", v);
        layer.ln_kv.visit(lp + ".ln_kv", v);
      } else if (cfg.ln_mode == LnMode::Shared) {
        layer.ln_q.visit(lp + ".ln_shared", v);  // aliased; registered once
      }
      layer.attn.visit(lp + ".attn", v);
      if (cfg.use_ffn) {
        layer.ln_ffn.visit(lp + ".ln_ffn", v);
        layer.ffn.visit(lp + ".ffn", v);
      }
      if (layer.q_bridge.defined()) v(lp + ".q_bridge", layer.q_bridge);
    }
    if (cfg.final_ln) final_ln.visit(prefix + ".final_ln", v);
    if (cfg.use_time_embedding) time.visit(prefix + ".time", v);
    v(prefix + ".out_proj", out_proj);
    v(prefix + ".out_bias", out_bias);
  }
};

using ResamplerParams = ResamplerParamsT<float>;

// Per layer: q = LN_q(queries), kv = LN_kv(inputs) (same object when shared,
// identity when none); keys/values optionally include the normalized queries;
// queries += cross_attention(q, kv); then queries += ffn(LN(queries)).
// Time embedding joins the projected inputs before layer 1.
template <typename T>
TensorT<T> resampler_forward(const vision::VisualTokensT<T>& visual,
                             ResamplerParamsT<T>& p) {
  const auto& cfg = p.cfg;
  check_shape(visual.tokens.rank() == 3 && visual.tokens.dim(2) == p.vision_dim(),
              "resampler: visual tokens " + shape_str(visual.tokens.shape()) +
                  " do not match input projection of dim " +
                  std::to_string(p.vision_dim()));
  const Index batch = visual.tokens.dim(0);
  auto x = add(matmul(visual.tokens, p.in_proj), p.in_bias);  // (B, T, hidden)
  if (cfg.use_time_embedding) {
    check(visual.frames * visual.tokens_per_frame == visual.tokens.dim(1),
          "resampler: visual token metadata inconsistent");
    auto tile = embedding_rows(p.time.table,
                               nn::frame_ids(visual.frames, visual.tokens_per_frame));
    x = add(x, tile);
  }
  auto q = expand_batch(p.queries, batch);  // (B, n_q, query_dim)
  for (auto& layer : p.layers) {
    auto qn = cfg.ln_mode == LnMode::None ? q : nn::layer_norm(q, layer.ln_q);
    auto kvn = cfg.ln_mode == LnMode::None ? x : nn::layer_norm(x, layer.ln_kv);
    auto kv = kvn;
    if (cfg.kv_concat_queries) {
      auto qb = layer.q_bridge.defined() ? matmul(qn, layer.q_bridge) : qn;
      kv = concat<T>({kvn, qb}, 1);
    }
    q = add(q, nn::attention(qn, kv, layer.attn));
    if (cfg.use_ffn) q = add(q, nn::ffn(nn::layer_norm(q, layer.ln_ffn), layer.ffn));
  }
  if (cfg.final_ln) q = nn::layer_norm(q, p.final_ln);
  return add(matmul(q, p.out_proj), p.out_bias);  // (B, n_queries, out_dim)
}

// ---------------------------------------------------------------------------
// CoCa-style attentional pooler: one cross-attention layer plus a final
// LayerNorm. Written independently of resampler_forward; the structural
// equivalence with the degenerate resampler is asserted in tests.
// ---------------------------------------------------------------------------

template <typename T>
struct PoolerParamsT {
  TensorT<T> in_proj, in_bias;
  TensorT<T> queries;
  nn::AttentionParamsT<T> attn;
  nn::LayerNormParamsT<T> final_ln;
  TensorT<T> out_proj, out_bias;

  static PoolerParamsT make(Index n_queries, Index query_dim, Index hidden_dim,
                            Index vision_dim, Index out_dim, Rng& rng) {
    PoolerParamsT p;
    p.in_proj = nn::linear_init<T>(vision_dim, hidden_dim, rng);
    p.in_bias = TensorT<T>::zeros({hidden_dim});
    p.queries = TensorT<T>::randn({n_queries, query_dim}, rng, T(0.02));
    const Index heads = hidden_dim >= 16 ? hidden_dim / 16 : 1;
    p.attn = nn::AttentionParamsT<T>::make(query_dim, hidden_dim, hidden_dim, query_dim,
                                           heads, rng);
    p.final_ln = nn::LayerNormParamsT<T>::make(query_dim);
    p.out_proj = nn::linear_init<T>(query_dim, out_dim, rng);
    p.out_bias = TensorT<T>::zeros({out_dim});
    return p;
  }

  template <typename V>
  void visit(const std::string& prefix, V&& v) {
    v(prefix + ".in_proj", in_proj);
    v(prefix + ".in_bias", in_bias);
    v(prefix + ".queries", queries);
    attn.visit(prefix + ".attn", v);
    final_ln.visit(prefix + ".final_ln", v);
    v(prefix + ".out_proj", out_proj);
    v(prefix + ".out_bias", out_bias);
  }
};

using PoolerParams = PoolerParamsT<float>;

template <typename T>
TensorT<T> attentional_pooler_forward(const vision::VisualTokensT<T>& visual,
                                      PoolerParamsT<T>& p) {
  check_shape(visual.tokens.rank() == 3 && visual.tokens.dim(2) == p.in_proj.dim(0),
              "pooler: visual tokens do not match input projection");
  const Index batch = visual.tokens.dim(0);
  auto x = add(matmul(visual.tokens, p.in_proj), p.in_bias);
  auto q = expand_batch(p.queries, batch);
  q = add(q, nn::attention(q, x, p.attn));
  q = nn::layer_norm(q, p.final_ln);
  return add(matmul(q, p.out_proj), p.out_bias);
}

// ---------------------------------------------------------------------------
// Composite PaLM2-VAdapter: a 1-layer resampler feeding the tiny LM trunk,
// projected into the large decoder's width.
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> vadapter_forward(const vision::VisualTokensT<T>& visual,
                            ResamplerParamsT<T>& resampler, lm::LmParamsT<T>& tlm,
                            const TensorT<T>& proj) {
  check_shape(resampler.out_dim() == tlm.dim(),
              "vadapter: resampler out dim " + std::to_string(resampler.out_dim()) +
                  " must equal tiny LM dim " + std::to_string(tlm.dim()));
  return lm::tlm_as_adapter_forward(resampler_forward(visual, resampler), tlm, proj);
}

// ---------------------------------------------------------------------------
// Adapter specification and parameter accounting
// ---------------------------------------------------------------------------

enum class AdapterKind { ResamplerBaseline, AttentionalPooler, Palm2VAdapter };
const char* adapter_kind_name(AdapterKind k);
AdapterKind adapter_kind_from_name(const std::string& name);

struct AdapterSpec {
  AdapterKind kind = AdapterKind::ResamplerBaseline;
  ResamplerConfig resampler;
  std::string tlm_checkpoint;  // optional; Palm2VAdapter only

  void validate() const {
    resampler.validate();
    check(kind != AdapterKind::Palm2VAdapter || resampler.n_layers >= 1,
          "adapter spec: vadapter needs at least one resampler layer");
  }
};

struct ParamCount {
  Index total = 0;
  Index stage1_trainable = 0;   // resampler (+ full TLM for the vadapter)
  Index stage2_trainable = 0;   // vadapter: resampler + TLM trunk + projection
  Index baseline_trainable = 0; // resampler only
};

// Closed-form counts from config arithmetic alone (no tensors constructed).
Index resampler_param_count(const ResamplerConfig& cfg, Index vision_dim, Index out_dim);
Index pooler_param_count(Index n_queries, Index query_dim, Index hidden_dim,
                         Index vision_dim, Index out_dim);
Index lm_param_count(const lm::LmConfig& cfg);
Index lm_trunk_param_count(const lm::LmConfig& cfg);

ParamCount count_parameters(const AdapterSpec& spec, Index vision_dim, Index target_lm_dim,
                            const lm::LmConfig& tlm_cfg);

// The Table 1 ablation grid: 4 LayerNorm rows, 3 FFN/time rows, 3 query dims,
// 3 hidden dims, 3 depths.
struct AblationRow {
  std::string section;  // "a".."e"
  std::string label;
  ResamplerConfig cfg;
};
std::vector<AblationRow> table1_rows(const ResamplerConfig& base);

}  // namespace vlab::adapters
