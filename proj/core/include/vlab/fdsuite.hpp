#pragma once

#include <string>

#include "vlab/common.hpp"

namespace vlab::fdsuite {

// Finite-difference verification suite: per-operation checks at tolerance
// 1e-4 and end-to-end checks through frozen-encoder -> adapter -> frozen-LM
// losses at 1e-3, all at 64-bit with h = 1e-5.
struct SuiteReport {
  Index op_checks = 0;
  Index e2e_configs = 0;
  double max_rel_op = 0;
  double max_rel_e2e = 0;
  std::string worst_op, worst_e2e;
  bool passed = false;

  std::string summary() const;
};

SuiteReport run_fd_suite(Index e2e_configs = 20, Index samples_per_tensor = 4,
                         std::uint64_t seed = 20240209);

}  // namespace vlab::fdsuite
