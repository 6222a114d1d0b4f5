#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "vlab/eval.hpp"
#include "vlab/train.hpp"

namespace vlab::quant {

struct QuantizerConfig {
  double temperature_init = 2.0;
  enum class Decay { None, Exponential };
  Decay decay = Decay::None;
  double decay_rate = std::pow(0.5, 1.0 / 500.0);  // tau halves every 500 steps
  bool hard_forward = true;                        // straight-through estimator

  double temperature_at(Index step) const {
    const double t = decay == Decay::Exponential
                         ? temperature_init * std::pow(decay_rate, static_cast<double>(step))
                         : temperature_init;
    check(t > 0, "quantizer: temperature must stay positive");
    return t;
  }

  void validate() const {
    check(temperature_init > 0, "quantizer: temperature_init must be positive");
    check(decay != Decay::Exponential || (decay_rate > 0 && decay_rate <= 1),
          "quantizer: decay_rate must be in (0, 1]");
  }
};

// The FC layer mapping adapter outputs onto the LM vocabulary.
struct QuantizerParams {
  Tensor projection;  // (adapter_out_dim, vocab_size)

  static QuantizerParams make(Index adapter_dim, Index vocab, Rng& rng) {
    QuantizerParams p;
    p.projection = nn::linear_init<float>(adapter_dim, vocab, rng);
    return p;
  }
};

template <typename T>
struct GumbelResult {
  TensorT<T> soft;                // softmax((logits + g) / tau), rows over last axis
  std::vector<Index> hard_index;  // argmax of soft per row
};

// Gumbel noise g = -log(-log(u)); disabled when with_noise is false (eval).
template <typename T>
GumbelResult<T> gumbel_softmax(const TensorT<T>& logits, double temperature,
                               std::uint64_t seed, bool with_noise = true) {
  check(temperature > 0, "gumbel_softmax: temperature must be positive");
  TensorT<T> shifted = logits;
  if (with_noise) {
    Rng rng(derive_seed(seed, "gumbel-noise"));
    std::vector<T> g(logits.values().size());
    for (auto& v : g) v = static_cast<T>(rng.gumbel());
    shifted = add(logits, TensorT<T>::from_data(logits.shape(), std::move(g)));
  }
  GumbelResult<T> out;
  out.soft = softmax(scale(shifted, static_cast<T>(1.0 / temperature)), -1);
  out.hard_index = argmax_last(out.soft);
  return out;
}

// Straight-through row selection: the forward value is exactly table[hard[r]]
// for each row r; gradients flow as if the output were soft @ table.
template <typename T>
TensorT<T> st_rows(const TensorT<T>& soft, const TensorT<T>& table,
                   const std::vector<Index>& hard) {
  const Index v = table.dim(0);
  const Index d = table.dim(1);
  check_shape(soft.dim(soft.rank() - 1) == v, "st_rows: soft width must equal vocab");
  const Index rows = soft.numel() / v;
  check(static_cast<Index>(hard.size()) == rows, "st_rows: index count mismatch");
  Shape oshape = soft.shape();
  oshape.back() = d;
  std::vector<T> value(static_cast<std::size_t>(rows * d));
  const auto& tv = table.values();
  for (Index r = 0; r < rows; ++r)
    std::copy(tv.begin() + hard[static_cast<std::size_t>(r)] * d,
              tv.begin() + (hard[static_cast<std::size_t>(r)] + 1) * d,
              value.begin() + r * d);
  return make_op<T>(std::move(oshape), std::move(value), "st_rows", {soft, table},
                    [rows, v, d, hard](detail::Node<T>& n) {
                      auto& ps = *n.parents[0];
                      auto& pt = *n.parents[1];
                      if (ps.requires_grad) {
                        ps.ensure_grad();
                        // d_soft = dOut . table^T
                        detail::gemm(false, true, rows, v, d, n.grad.data(),
                                     pt.value.data(), ps.grad.data(), true);
                      }
                      if (pt.requires_grad) {
                        pt.ensure_grad();
                        for (Index r = 0; r < rows; ++r)
                          for (Index j = 0; j < d; ++j)
                            pt.grad[static_cast<std::size_t>(hard[static_cast<std::size_t>(r)] * d + j)] +=
                                n.grad[static_cast<std::size_t>(r * d + j)];
                      }
                    });
}

// Per visual token: project to vocabulary logits, gumbel-softmax at the
// scheduled temperature, then weight rows of the LM embedding table (a single
// exact row in hard mode, a convex combination in soft mode).
inline Tensor quantized_prefix(const Tensor& visual_embeddings, QuantizerParams& qparams,
                               const QuantizerConfig& qcfg, Tensor& lm_embedding_table,
                               Index step, std::uint64_t seed, bool training = true) {
  qcfg.validate();
  check_shape(visual_embeddings.dim(visual_embeddings.rank() - 1) ==
                  qparams.projection.dim(0),
              "quantized_prefix: adapter output dim does not match the FC layer");
  check_shape(qparams.projection.dim(1) == lm_embedding_table.dim(0),
              "quantized_prefix: FC width must equal the LM vocabulary");
  auto logits = matmul(visual_embeddings, qparams.projection);
  if (!training) {
    // Deterministic evaluation: no noise, pure argmax over the logits.
    auto hard = argmax_last(logits);
    auto soft = softmax(logits, -1);
    return st_rows(soft, lm_embedding_table, hard);
  }
  auto g = gumbel_softmax(logits, qcfg.temperature_at(step),
                          derive_seed(seed, "quantize", static_cast<std::uint64_t>(step)),
                          /*with_noise=*/true);
  if (qcfg.hard_forward) return st_rows(g.soft, lm_embedding_table, g.hard_index);
  return matmul(g.soft, lm_embedding_table);
}

// ---------------------------------------------------------------------------
// Study harness
// ---------------------------------------------------------------------------

struct QuantRow {
  std::string setting;  // "baseline" or "gumbel_softmax"
  std::string softmax_temp;
  std::string temp_decay;
  double cider = 0;
  double exact_match = 0;
};

struct QuantStudyReport {
  std::vector<QuantRow> rows;
  std::string to_json() const;
  std::string table() const;
};

// Trains one quantized variant of the resampler baseline (identical budget,
// fresh FC layer) and evaluates its captions.
struct QuantTrainResult {
  train::StageResult stage;
  adapters::ResamplerParams res;
  QuantizerParams qparams;
  double cider = 0;
  double exact_match = 0;
};

QuantTrainResult train_quantized_baseline(train::AlignmentSetup& setup,
                                          const adapters::ResamplerConfig& rcfg,
                                          const QuantizerConfig& qcfg, lm::LmParams& llm,
                                          const eval::EvalOptions& eval_opts,
                                          std::ostream* metrics_out = nullptr);

// The Table 8 grid: non-quantized baseline plus {tau=1, tau=2, tau=2+decay}.
QuantStudyReport run_quantize_study(train::AlignmentSetup& setup,
                                    const adapters::ResamplerConfig& rcfg,
                                    double baseline_cider, double baseline_em,
                                    lm::LmParams& llm, const eval::EvalOptions& eval_opts,
                                    std::ostream* metrics_out = nullptr);

}  // namespace vlab::quant
