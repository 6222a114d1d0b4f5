#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "vlab/rng.hpp"
#include "vlab/tensor.hpp"

namespace vlab {

// Central finite-difference verification of reverse-mode gradients.
// The oracle side only ever calls the forward function, so it stays
// independent of every backward rule it is checking. Run in 64-bit.

struct FdReport {
  double max_rel_err = 0.0;
  std::string worst;   // "param[coord]"
  Index checked = 0;

  bool ok(double tol) const { return max_rel_err < tol; }
};

inline double fd_rel_err(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
  return std::abs(analytic - numeric) / denom;
}

// forward: pure function of the leaves' current values returning the scalar
// loss value. leavesik: named parameter tensors (requires_grad set by caller).
// samples_per_tensor < 0 checks every coordinate.
inline FdReport fd_check(const std::function<double()>& forward,
                         const std::function<Tensor64()>& forward_tensor,
                         std::vector<std::pair<std::string, Tensor64*>> leaves,
                         Index samples_per_tensor, std::uint64_t seed,
                         double h = 1e-5) {
  for (auto& [name, t] : leaves) {
    (void)name;
    t->zero_grad();
  }
  Tensor64 loss = forward_tensor();
  loss.backward();

  FdReport report;
  Rng rng(derive_seed(seed, "fd-coords"));
  for (auto& [name, t] : leaves) {
    const Index n = t->numel();
    std::vector<Index> coords;
    if (samples_per_tensor < 0 || samples_per_tensor >= n) {
      coords.resize(static_cast<std::size_t>(n));
      for (Index i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    } else {
      for (Index i = 0; i < samples_per_tensor; ++i)
        coords.push_back(static_cast<Index>(rng.uniform_index(static_cast<std::uint64_t>(n))));
    }
    for (Index c : coords) {
      const double analytic =
          t->has_grad() ? t->grad()[static_cast<std::size_t>(c)] : 0.0;
      auto& slot = t->values()[static_cast<std::size_t>(c)];
      const double saved = slot;
      slot = saved + h;
      const double up = forward();
      slot = saved - h;
      const double down = forward();
      slot = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double rel = fd_rel_err(analytic, numeric);
      ++report.checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = name + "[" + std::to_string(c) + "]";
      }
    }
  }
  return report;
}

// Convenience wrapper when the caller has one forward lambda.
inline FdReport fd_check(const std::function<Tensor64()>& forward_tensor,
                         std::vector<std::pair<std::string, Tensor64*>> leaves,
                         Index samples_per_tensor, std::uint64_t seed,
                         double h = 1e-5) {
  auto scalar_forward = [&forward_tensor]() {
    NoGradGuard ng;
    return forward_tensor().item();
  };
  return fd_check(scalar_forward, forward_tensor, std::move(leaves),
                  samples_per_tensor, seed, h);
}

}  // namespace vlab
