#include "vlab/vision.hpp"

#include "vlab/optim.hpp"

namespace vlab::vision {

VitConfig VitConfig::for_tag(const std::string& tag) {
  VitConfig cfg;
  cfg.size_tag = tag;
  if (tag == "S") {
    cfg.dim = 64;
    cfg.depth = 2;
    cfg.heads = 4;
  } else if (tag == "M") {
    cfg.dim = 96;
    cfg.depth = 4;
    cfg.heads = 6;
  } else if (tag == "L") {
    cfg.dim = 128;
    cfg.depth = 6;
    cfg.heads = 8;
  } else {
    throw ContractError("vit config: unknown size tag '" + tag + "'");
  }
  return cfg;
}

const char* pretrain_mode_name(PretrainMode m) {
  return m == PretrainMode::RandomInit ? "random_init" : "supervised";
}

namespace {

constexpr Index kCells = data::kGrid * data::kGrid;

// Per-cell attribute targets for the supervised stand-in task: each grid cell
// is classified by color (4 colors + empty) and shape (3 shapes + empty), so
// the frozen features stay spatially resolved.
struct CellTargets {
  std::vector<Index> color;  // (B * kCells), 4 == empty
  std::vector<Index> shape;  // (B * kCells), 3 == empty
};

CellTargets targets_for(const std::vector<const data::Scene*>& scenes) {
  CellTargets t;
  for (const auto* s : scenes) {
    std::vector<Index> color(kCells, 4), shape(kCells, 3);
    for (const auto& o : s->objects) {
      color[static_cast<std::size_t>(o.cell)] = static_cast<Index>(o.color);
      shape[static_cast<std::size_t>(o.cell)] = static_cast<Index>(o.shape);
    }
    t.color.insert(t.color.end(), color.begin(), color.end());
    t.shape.insert(t.shape.end(), shape.begin(), shape.end());
  }
  return t;
}

}  // namespace

VitParams pretrain_stub(const VitConfig& cfg, std::uint64_t seed, PretrainMode mode,
                        const data::DataConfig& data_cfg, Index steps, Index batch_size) {
  Rng init_rng(derive_seed(seed, "vit-init"));
  VitParams params = VitParamsT<float>::make(cfg, init_rng);
  if (mode == PretrainMode::RandomInit) return params;

  Rng head_rng(derive_seed(seed, "vit-heads"));
  auto head_color = nn::linear_init<float>(cfg.dim, kCells * 5, head_rng);
  auto head_shape = nn::linear_init<float>(cfg.dim, kCells * 4, head_rng);

  ParamSet trainable;
  params.visit("enc", trainable.collector());
  trainable.add("head.color", head_color);
  trainable.add("head.shape", head_shape);
  trainable.set_requires_grad(true);

  train::OptimizerConfig ocfg;
  ocfg.base_lr = 1e-3;
  ocfg.warmup_steps = std::max<Index>(1, steps / 10);
  ocfg.total_steps = steps;
  ocfg.batch_size = batch_size;
  train::AdamW opt(&trainable, ocfg);

  const auto& pool = data::pool(data_cfg, data::Split::Train);
  const Index tp = cfg.tokens_per_frame();
  const std::uint64_t stream = derive_seed(seed, "vit-pretrain-data");

  for (Index step = 1; step <= steps; ++step) {
    std::vector<const data::Scene*> scenes;
    std::vector<TensorT<float>> patch_rows;
    for (Index i = 0; i < batch_size; ++i) {
      const auto idx = static_cast<std::size_t>(
          splitmix64(stream ^ (static_cast<std::uint64_t>(step) * 65521ULL + i)) %
          pool.images.size());
      const data::Scene& scene = pool.images[idx];
      scenes.push_back(&scene);
      auto img = Tensor::from_data({cfg.image_size, cfg.image_size, 3},
                                   data::render(scene, 0));
      patch_rows.push_back(reshape(patchify(img, cfg.patch_size), {1, tp, cfg.patch_dim()}));
    }
    auto patches = concat(patch_rows, 0);
    auto tokens = vit_trunk(patches, params);       // (B, Tp, D)
    auto pooled = mean_axis(tokens, 1);             // (B, D)
    auto targets = targets_for(scenes);
    std::vector<std::uint8_t> all(static_cast<std::size_t>(batch_size * kCells), 1);
    auto color_logits =
        reshape(matmul(pooled, head_color), {batch_size * kCells, Index{5}});
    auto shape_logits =
        reshape(matmul(pooled, head_shape), {batch_size * kCells, Index{4}});
    auto loss = add(cross_entropy(color_logits, targets.color, all),
                    cross_entropy(shape_logits, targets.shape, all));
    trainable.zero_grad();
    loss.backward();
    opt.step(train::lr_at(step, ocfg));
  }
  return params;
}

}  // namespace vlab::vision
