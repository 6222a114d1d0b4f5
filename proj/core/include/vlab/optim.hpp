#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "vlab/params.hpp"

namespace vlab::train {

struct OptimizerConfig {
  double base_lr = 5e-4;
  Index warmup_steps = 1000;
  Index total_steps = 250000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-4;
  Index batch_size = 64;
  double clip_norm = 1.0;  // 0 disables clipping
  double eps = 1e-8;

  void validate() const {
    check(base_lr > 0 && warmup_steps > 0 && total_steps > 0 && batch_size > 0,
          "optimizer: all settings must be positive");
    check(warmup_steps < total_steps, "optimizer: warmup_steps must be < total_steps");
  }
};

// Linear warmup to base_lr, then linear decay to zero at total_steps.
inline double lr_at(Index step, const OptimizerConfig& cfg) {
  check(step >= 0 && step <= cfg.total_steps,
        "lr_at: step " + std::to_string(step) + " outside [0, " +
            std::to_string(cfg.total_steps) + "]");
  if (step <= cfg.warmup_steps)
    return cfg.base_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  return cfg.base_lr *
         static_cast<double>(cfg.total_steps - step) /
         static_cast<double>(cfg.total_steps - cfg.warmup_steps);
}

// Weight decay skips LayerNorm gains/biases and embedding tables.
inline bool decay_exempt(const std::string& name) {
  auto ends_with = [&](const char* suffix) {
    const std::string s = suffix;
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  return name.find(".ln") != std::string::npos || name.find("_ln") != std::string::npos ||
         ends_with(".gain") || ends_with("table") || ends_with(".queries");
}

// Decoupled-weight-decay Adam over a ParamSet. Moments are keyed by name so
// checkpoints can restore them exactly.
class AdamW {
 public:
  AdamW(ParamSet* params, OptimizerConfig cfg) : params_(params), cfg_(cfg) {
    for (auto& [name, t] : params_->items()) {
      moments_m_[name].assign(static_cast<std::size_t>(t.numel()), 0.0f);
      moments_v_[name].assign(static_cast<std::size_t>(t.numel()), 0.0f);
    }
  }

  Index step_count() const { return step_; }
  void set_step_count(Index s) { step_ = s; }

  std::map<std::string, std::vector<float>>& moments_m() { return moments_m_; }
  std::map<std::string, std::vector<float>>& moments_v() { return moments_v_; }

  // Global-norm gradient clip followed by one AdamW update at the given
  // learning rate. Parameters without a gradient buffer are skipped.
  void step(double lr) {
    ++step_;
    const double t = static_cast<double>(step_);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t);

    double scale = 1.0;
    if (cfg_.clip_norm > 0) {
      double sq = 0;
      for (auto& [name, p] : params_->items()) {
        if (!p.has_grad()) continue;
        for (float g : p.grad()) sq += static_cast<double>(g) * g;
      }
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
    }

    for (auto& [name, p] : params_->items()) {
      auto& m = moments_m_[name];
      auto& v = moments_v_[name];
      auto& w = p.values();
      const bool exempt = decay_exempt(name);
      const float* g = p.has_grad() ? p.grad().data() : nullptr;
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g ? static_cast<double>(g[i]) * scale : 0.0;
        m[i] = static_cast<float>(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi);
        v[i] = static_cast<float>(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        double upd = lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        if (!exempt) upd += lr * cfg_.weight_decay * w[i];
        w[i] = static_cast<float>(w[i] - upd);
      }
    }
  }

 private:
  ParamSet* params_;
  OptimizerConfig cfg_;
  Index step_ = 0;
  std::map<std::string, std::vector<float>> moments_m_, moments_v_;
};

}  // namespace vlab::train
