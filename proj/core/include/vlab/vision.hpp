#pragma once

#include <string>
#include <vector>

#include "vlab/data.hpp"
#include "vlab/nn.hpp"
#include "vlab/params.hpp"

namespace vlab::vision {

// Desk-scale stand-ins for the paper's encoder size axis:
// S(64x2), M(96x4), L(128x6) over 48px inputs with 6px patches.
struct VitConfig {
  Index image_size = 48;
  Index patch_size = 6;
  Index dim = 64;
  Index depth = 2;
  Index heads = 4;
  std::string size_tag = "S";

  static VitConfig for_tag(const std::string& tag);

  Index tokens_per_frame() const {
    const Index side = image_size / patch_size;
    return side * side;
  }
  Index patch_dim() const { return patch_size * patch_size * 3; }

  void validate() const {
    check(image_size > 0 && patch_size > 0 && dim > 0 && depth > 0 && heads > 0,
          "vit config: all dims must be positive");
    check(image_size % patch_size == 0,
          "vit config: image size " + std::to_string(image_size) +
              " not divisible by patch size " + std::to_string(patch_size));
    check(dim % heads == 0, "vit config: dim must divide into heads");
  }
};

template <typename T>
struct VitParamsT {
  TensorT<T> patch_proj, patch_bias;  // (p*p*3, dim), (dim)
  TensorT<T> pos_table;               // (tokens_per_frame, dim)
  std::vector<nn::BlockParamsT<T>> blocks;
  nn::LayerNormParamsT<T> final_ln;

  static VitParamsT make(const VitConfig& cfg, Rng& rng) {
    cfg.validate();
    VitParamsT p;
    p.patch_proj = nn::linear_init<T>(cfg.patch_dim(), cfg.dim, rng);
    p.patch_bias = TensorT<T>::zeros({cfg.dim});
    p.pos_table = TensorT<T>::randn({cfg.tokens_per_frame(), cfg.dim}, rng, T(0.02));
    for (Index i = 0; i < cfg.depth; ++i)
      p.blocks.push_back(nn::BlockParamsT<T>::make(cfg.dim, cfg.heads, rng));
    p.final_ln = nn::LayerNormParamsT<T>::make(cfg.dim);
    return p;
  }

  template <typename V>
  void visit(const std::string& prefix, V&& v) {
    v(prefix + ".patch_proj", patch_proj);
    v(prefix + ".patch_bias", patch_bias);
    v(prefix + ".pos_table", pos_table);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit(prefix + ".block" + std::to_string(i), v);
    final_ln.visit(prefix + ".final_ln", v);
  }
};

using VitParams = VitParamsT<float>;

// Non-overlapping patches, flattened row-major: (H, W, 3) -> ((H/p)^2, p*p*3).
template <typename T>
TensorT<T> patchify(const TensorT<T>& image, Index patch_size) {
  check_shape(image.rank() == 3 && image.dim(2) == 3,
              "patchify: image must be (H, W, 3), got " + shape_str(image.shape()));
  const Index h = image.dim(0), w = image.dim(1);
  check_shape(h % patch_size == 0 && w % patch_size == 0,
              "patchify: dims " + shape_str(image.shape()) +
                  " not divisible by patch size " + std::to_string(patch_size));
  const Index ph = h / patch_size, pw = w / patch_size;
  const Index pd = patch_size * patch_size * 3;
  std::vector<T> out(static_cast<std::size_t>(ph * pw * pd));
  const auto& v = image.values();
  std::size_t o = 0;
  for (Index py = 0; py < ph; ++py)
    for (Index px = 0; px < pw; ++px)
      for (Index dy = 0; dy < patch_size; ++dy)
        for (Index dx = 0; dx < patch_size; ++dx)
          for (Index c = 0; c < 3; ++c)
            out[o++] = v[static_cast<std::size_t>(
                (((py * patch_size + dy) * w) + px * patch_size + dx) * 3 + c)];
  return TensorT<T>::from_data({ph * pw, pd}, std::move(out));
}

struct VisualTokensMeta {
  Index frames = 1;
  Index tokens_per_frame = 0;
};

template <typename T>
struct VisualTokensT {
  TensorT<T> tokens;  // (B, frames * tokens_per_frame, dim)
  Index frames = 1;
  Index tokens_per_frame = 0;
};

// ViT forward over stacked per-frame patch tokens (B*F, Tp, patch_dim).
template <typename T>
TensorT<T> vit_trunk(const TensorT<T>& patches, VitParamsT<T>& p) {
  auto x = add(add(matmul(patches, p.patch_proj), p.patch_bias),
               embedding_rows(p.pos_table, nn::iota_ids(patches.dim(1))));
  for (auto& block : p.blocks) x = nn::block_forward(x, block, /*causal=*/false);
  return nn::layer_norm(x, p.final_ln);
}

// Per-sample encode: 1..8 frames of (H, W, 3) raw floats, duplicated to
// frame_target frames when fewer are provided.
template <typename T>
VisualTokensT<T> encode(const std::vector<std::vector<T>>& frames, const VitConfig& cfg,
                        VitParamsT<T>& params, Index frame_target) {
  check(!frames.empty(), "encode: frame count 0");
  check(static_cast<Index>(frames.size()) <= data::kFrames,
        "encode: more than " + std::to_string(data::kFrames) + " frames");
  check(frame_target >= static_cast<Index>(frames.size()),
        "encode: frame_target below supplied frame count");
  const Index tp = cfg.tokens_per_frame();
  std::vector<TensorT<T>> encoded;
  encoded.reserve(frames.size());
  for (const auto& f : frames) {
    check_shape(static_cast<Index>(f.size()) == cfg.image_size * cfg.image_size * 3,
                "encode: frame pixel count mismatch");
    auto img = TensorT<T>::from_data({cfg.image_size, cfg.image_size, 3}, f);
    auto patches = reshape(patchify(img, cfg.patch_size), {1, tp, cfg.patch_dim()});
    encoded.push_back(vit_trunk(patches, params));  // (1, Tp, D)
  }
  std::vector<TensorT<T>> per_frame;
  if (frames.size() == 1) {
    for (Index f = 0; f < frame_target; ++f) per_frame.push_back(encoded[0]);
  } else {
    check(static_cast<Index>(frames.size()) == frame_target,
          "encode: partial duplication only defined for single images");
    per_frame = encoded;
  }
  VisualTokensT<T> out;
  out.frames = frame_target;
  out.tokens_per_frame = tp;
  out.tokens = concat(per_frame, 1);  // (1, frame_target * Tp, D)
  return out;
}

// Mode of the desk-scale pretraining stand-in for the frozen encoder.
enum class PretrainMode { RandomInit, Supervised };
const char* pretrain_mode_name(PretrainMode m);

// Deterministic encoder initialization; Supervised mode briefly trains on
// scene-attribute classification so the frozen features carry signal.
VitParams pretrain_stub(const VitConfig& cfg, std::uint64_t seed, PretrainMode mode,
                        const data::DataConfig& data_cfg, Index steps = 300,
                        Index batch_size = 32);

}  // namespace vlab::vision
