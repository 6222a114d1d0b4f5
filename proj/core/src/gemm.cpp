#include "vlab/gemm.hpp"

#include <Eigen/Core>

#include <bit>
#include <cmath>

#include "vlab/threading.hpp"

namespace vlab::detail {

namespace {

template <typename T>
using MatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using MutMatMap =
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Row-split across the pool; each output row is produced by exactly one
// thread, so results are independent of the thread count.
template <typename T>
void gemm_impl(bool trans_a, bool trans_b, Index m, Index n, Index k,
               const T* a, const T* b, T* c, bool accumulate) {
  const Index a_rows = trans_a ? k : m;
  const Index a_cols = trans_a ? m : k;
  const Index b_rows = trans_b ? n : k;
  const Index b_cols = trans_b ? k : n;
  MatMap<T> am(a, a_rows, a_cols);
  MatMap<T> bm(b, b_rows, b_cols);

  auto run_rows = [&](Index r0, Index r1) {
    if (r1 <= r0) return;
    MutMatMap<T> cm(c + r0 * n, r1 - r0, n);
    auto compute = [&](const auto& lhs) {
      if (!trans_b) {
        if (accumulate)
          cm.noalias() += lhs * bm;
        else
          cm.noalias() = lhs * bm;
      } else {
        if (accumulate)
          cm.noalias() += lhs * bm.transpose();
        else
          cm.noalias() = lhs * bm.transpose();
      }
    };
    if (!trans_a)
      compute(am.middleRows(r0, r1 - r0));
    else
      compute(am.middleCols(r0, r1 - r0).transpose());
  };

  // Only fork for work that clearly amortizes the dispatch.
  if (m * n * k >= (Index{1} << 18) && m >= 2) {
    parallel_for(m, run_rows);
  } else {
    run_rows(0, m);
  }
}

}  // namespace

void gemm(bool trans_a, bool trans_b, Index m, Index n, Index k,
          const float* a, const float* b, float* c, bool accumulate) {
  gemm_impl(trans_a, trans_b, m, n, k, a, b, c, accumulate);
}

void gemm(bool trans_a, bool trans_b, Index m, Index n, Index k,
          const double* a, const double* b, double* c, bool accumulate) {
  gemm_impl(trans_a, trans_b, m, n, k, a, b, c, accumulate);
}

namespace {

// Branch-free exp approximation (Cody-Waite reduction + degree-6 polynomial,
// 2^k via bit assembly). Every element takes the identical instruction path,
// so results do not depend on buffer addresses or thread count.
inline float fast_expf(float x) {
  x = x < -87.0f ? -87.0f : (x > 88.0f ? 88.0f : x);
  const float z = x * 1.44269504088896341f;
  const float k = std::floor(z + 0.5f);
  float r = x - k * 0.693359375f;
  r -= k * -2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.0f;
  const auto bits = static_cast<std::int32_t>((static_cast<std::int32_t>(k) + 127) << 23);
  return p * std::bit_cast<float>(bits);
}

// tanh-form GELU for the float training path; forward and gradient use the
// same tanh(u) so the pair stays self-consistent. The 64-bit verification
// path below keeps the exact erf form.
inline float gelu_tanh_value(float x) {
  const float u = 0.7978845608028654f * (x + 0.044715f * x * x * x);
  const float e = fast_expf(2.0f * u);
  const float t = 1.0f - 2.0f / (e + 1.0f);
  return 0.5f * x * (1.0f + t);
}

inline float gelu_tanh_grad(float x) {
  const float u = 0.7978845608028654f * (x + 0.044715f * x * x * x);
  const float e = fast_expf(2.0f * u);
  const float t = 1.0f - 2.0f / (e + 1.0f);
  const float du = 0.7978845608028654f * (1.0f + 3.0f * 0.044715f * x * x);
  return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
}

constexpr Index kGeluBlock = 16;
}  // namespace

void vec_gelu(const float* x, float* y, Index n) {
  auto kernel = [&](Index lo, Index hi) {
    Index i = lo;
    for (; i + kGeluBlock <= hi; i += kGeluBlock)
      for (Index j = 0; j < kGeluBlock; ++j) y[i + j] = gelu_tanh_value(x[i + j]);
    for (; i < hi; ++i) y[i] = gelu_tanh_value(x[i]);
  };
  if (n >= (Index{1} << 15)) parallel_for(n, kernel);
  else kernel(0, n);
}

void vec_gelu(const double* x, double* y, Index n) {
  auto kernel = [&](Index lo, Index hi) {
    for (Index i = lo; i < hi; ++i) {
      const double v = x[i];
      y[i] = 0.5 * v * (1.0 + std::erf(v * 0.70710678118654752440));
    }
  };
  if (n >= (Index{1} << 15)) parallel_for(n, kernel);
  else kernel(0, n);
}

void vec_gelu_grad(const float* x, const float* g, float* acc, Index n) {
  auto kernel = [&](Index lo, Index hi) {
    Index i = lo;
    for (; i + kGeluBlock <= hi; i += kGeluBlock)
      for (Index j = 0; j < kGeluBlock; ++j) acc[i + j] += g[i + j] * gelu_tanh_grad(x[i + j]);
    for (; i < hi; ++i) acc[i] += g[i] * gelu_tanh_grad(x[i]);
  };
  if (n >= (Index{1} << 15)) parallel_for(n, kernel);
  else kernel(0, n);
}

void vec_gelu_grad(const double* x, const double* g, double* acc, Index n) {
  auto kernel = [&](Index lo, Index hi) {
    for (Index i = lo; i < hi; ++i) {
      const double v = x[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * 0.70710678118654752440));
      const double pdf = 0.39894228040143267794 * std::exp(-0.5 * v * v);
      acc[i] += g[i] * (cdf + v * pdf);
    }
  };
  if (n >= (Index{1} << 15)) parallel_for(n, kernel);
  else kernel(0, n);
}

}  // namespace vlab::detail
