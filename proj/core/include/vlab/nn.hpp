#pragma once

#include <string>
#include <vector>

#include "vlab/tensor.hpp"

namespace vlab::nn {

inline std::vector<Index> iota_ids(Index n, Index start = 0) {
  std::vector<Index> ids(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) ids[static_cast<std::size_t>(i)] = start + i;
  return ids;
}

template <typename T>
TensorT<T> linear_init(Index in, Index out, Rng& rng, T stddev = T(0.02)) {
  return TensorT<T>::randn({in, out}, rng, stddev);
}

// ---------------------------------------------------------------------------

template <typename T>
struct LayerNormParamsT {
  TensorT<T> gain, bias;
  T eps = T(1e-5);

  static LayerNormParamsT make(Index dim) {
    LayerNormParamsT p;
    p.gain = TensorT<T>::full({dim}, T(1));
    p.bias = TensorT<T>::zeros({dim});
    return p;
  }

  Index dim() const { return gain.dim(0); }

  template <typename V>
  void visit(const std::string& prefix, V&& v) {
    v(prefix + ".gain", gain);
    v(prefix + ".bias", bias);
  }
};

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const LayerNormParamsT<T>& p) {
  return layer_norm_op(x, p.gain, p.bias, p.eps);
}

// ---------------------------------------------------------------------------

// Multi-head attention. Query and key/value inputs may have different widths
// (cross-attention); heads * head_dim is the internal attention width.
template <typename T>
struct AttentionParamsT {
  TensorT<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Index heads = 1;
  Index head_dim = 1;

  static AttentionParamsT make(Index q_in, Index kv_in, Index attn_dim, Index out,
                               Index heads, Rng& rng) {
    check(attn_dim % heads == 0,
          "attention: hidden dim " + std::to_string(attn_dim) +
              " not divisible by " + std::to_string(heads) + " heads");
    AttentionParamsT p;
    p.heads = heads;
    p.head_dim = attn_dim / heads;
    p.wq = linear_init<T>(q_in, attn_dim, rng);
    p.bq = TensorT<T>::zeros({attn_dim});
    p.wk = linear_init<T>(kv_in, attn_dim, rng);
    p.bk = TensorT<T>::zeros({attn_dim});
    p.wv = linear_init<T>(kv_in, attn_dim, rng);
    p.bv = TensorT<T>::zeros({attn_dim});
    p.wo = linear_init<T>(attn_dim, out, rng);
    p.bo = TensorT<T>::zeros({out});
    return p;
  }

  Index attn_dim() const { return heads * head_dim; }
  Index out_dim() const { return wo.dim(1); }

  template <typename V>
  void visit(const std::string& prefix, V&& v) {
    v(prefix + ".wq", wq);
    v(prefix + ".bq", bq);
    v(prefix + ".wk", wk);
    v(prefix + ".bk", bk);
    v(prefix + ".wv", wv);
    v(prefix + ".bv", bv);
    v(prefix + ".wo", wo);
    v(prefix + ".bo", bo);
  }
};

namespace detail {
template <typename T>
TensorT<T> split_heads(const TensorT<T>& x, Index heads, Index head_dim) {
  // (B, L, H*dh) -> (B, H, L, dh)
  const Index b = x.dim(0), l = x.dim(1);
  return permute(reshape(x, {b, l, heads, head_dim}), {0, 2, 1, 3});
}
}  // namespace detail

// q_in (B, Lq, Dq), kv_in (B, Lk, Dkv) -> (B, Lq, out).
// With causal set, position i attends only to kv positions <= i (Lq == Lk).
template <typename T>
TensorT<T> attention(const TensorT<T>& q_in, const TensorT<T>& kv_in,
                     const AttentionParamsT<T>& p, bool causal = false) {
  check_shape(q_in.rank() == 3 && kv_in.rank() == 3,
              "attention: inputs must be (batch, len, dim)");
  check_shape(q_in.dim(2) == p.wq.dim(0),
              "attention: query input dim " + std::to_string(q_in.dim(2)) +
                  " vs projection " + std::to_string(p.wq.dim(0)));
  check_shape(kv_in.dim(2) == p.wk.dim(0),
              "attention: kv input dim " + std::to_string(kv_in.dim(2)) +
                  " vs projection " + std::to_string(p.wk.dim(0)));
  const Index lq = q_in.dim(1), lk = kv_in.dim(1);
  check(!causal || lq == lk, "attention: causal mask requires q and kv positions to match");

  auto q = detail::split_heads(add(matmul(q_in, p.wq), p.bq), p.heads, p.head_dim);
  auto k = detail::split_heads(add(matmul(kv_in, p.wk), p.bk), p.heads, p.head_dim);
  auto v = detail::split_heads(add(matmul(kv_in, p.wv), p.bv), p.heads, p.head_dim);

  auto scores = scale(matmul(q, transpose_last2(k)),
                      static_cast<T>(1.0 / std::sqrt(static_cast<double>(p.head_dim))));
  if (causal) scores = add(scores, causal_bias<T>(lq));
  auto attn = softmax(scores, -1);
  auto ctx = matmul(attn, v);  // (B, H, Lq, dh)
  const Index b = q_in.dim(0);
  auto merged = reshape(permute(ctx, {0, 2, 1, 3}), {b, lq, p.attn_dim()});
  return add(matmul(merged, p.wo), p.bo);
}

// ---------------------------------------------------------------------------

template <typename T>
struct FfnParamsT {
  TensorT<T> w1, b1, w2, b2;

  static FfnParamsT make(Index dim, Rng& rng, Index expansion = 4) {
    return make_inner(dim, dim * expansion, rng);
  }

  static FfnParamsT make_inner(Index dim, Index inner, Rng& rng) {
    FfnParamsT p;
    p.w1 = linear_init<T>(dim, inner, rng);
    p.b1 = TensorT<T>::zeros({inner});
    p.w2 = linear_init<T>(inner, dim, rng);
    p.b2 = TensorT<T>::zeros({dim});
    return p;
  }

  template <typename V>
  void visit(const std::string& prefix, V&& v) {
    v(prefix + ".w1", w1);
    v(prefix + ".b1", b1);
    v(prefix + ".w2", w2);
    v(prefix + ".b2", b2);
  }
};

template <typename T>
TensorT<T> ffn(const TensorT<T>& x, const FfnParamsT<T>& p) {
  check_shape(x.dim(x.rank() - 1) == p.w1.dim(0),
              "ffn: input dim " + std::to_string(x.dim(x.rank() - 1)) +
                  " vs expand projection " + std::to_string(p.w1.dim(0)));
  return add(matmul(gelu(add(matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

// ---------------------------------------------------------------------------

// Learned per-frame embedding added to every token of that frame.
template <typename T>
struct TimeEmbeddingT {
  TensorT<T> table;  // (max_frames, dim)

  static TimeEmbeddingT make(Index max_frames, Index dim, Rng& rng, T stddev = T(0.02)) {
    TimeEmbeddingT e;
    e.table = TensorT<T>::randn({max_frames, dim}, rng, stddev);
    return e;
  }

  template <typename V>
  void visit(const std::string& prefix, V&& v) {
    v(prefix + ".table", table);
  }
};

// Frame-major id list [0 x tpf, 1 x tpf, ...] used to tile the table.
inline std::vector<Index> frame_ids(Index frames, Index tokens_per_frame) {
  std::vector<Index> ids;
  ids.reserve(static_cast<std::size_t>(frames * tokens_per_frame));
  for (Index f = 0; f < frames; ++f)
    for (Index t = 0; t < tokens_per_frame; ++t) ids.push_back(f);
  return ids;
}

// tokens (frames, tokens_per_frame, dim) -> (frames*tokens_per_frame, dim)
// with table[f] added to every token of frame f.
template <typename T>
TensorT<T> add_time_embedding(const TensorT<T>& tokens, const TimeEmbeddingT<T>& emb) {
  check_shape(tokens.rank() == 3, "time embedding: tokens must be (frames, tokens, dim)");
  const Index frames = tokens.dim(0), tpf = tokens.dim(1), dim = tokens.dim(2);
  check(frames <= emb.table.dim(0),
        "time embedding: " + std::to_string(frames) + " frames exceed table of " +
            std::to_string(emb.table.dim(0)));
  check_shape(dim == emb.table.dim(1), "time embedding: dim mismatch");
  auto tile = embedding_rows(emb.table, frame_ids(frames, tpf));
  return add(reshape(tokens, {frames * tpf, dim}), tile);
}

// ---------------------------------------------------------------------------

// Pre-norm residual transformer block.
template <typename T>
struct BlockParamsT {
  LayerNormParamsT<T> ln1, ln2;
  AttentionParamsT<T> attn;
  FfnParamsT<T> ffn;

  static BlockParamsT make(Index dim, Index heads, Rng& rng) {
    BlockParamsT p;
    p.ln1 = LayerNormParamsT<T>::make(dim);
    p.ln2 = LayerNormParamsT<T>::make(dim);
    p.attn = AttentionParamsT<T>::make(dim, dim, dim, dim, heads, rng);
    p.ffn = FfnParamsT<T>::make(dim, rng);
    return p;
  }

  template <typename V>
  void visit(const std::string& prefix, V&& v) {
    ln1.visit(prefix + ".ln1", v);
    ln2.visit(prefix + ".ln2", v);
    attn.visit(prefix + ".attn", v);
    ffn.visit(prefix + ".ffn", v);
  }
};

template <typename T>
TensorT<T> block_forward(const TensorT<T>& x, BlockParamsT<T>& p, bool causal) {
  auto normed = layer_norm(x, p.ln1);
  auto h = add(x, attention(normed, normed, p.attn, causal));
  return add(h, ffn(layer_norm(h, p.ln2), p.ffn));
}

}  // namespace vlab::nn
