#pragma once

#include <map>
#include <string>
#include <vector>

#include "vlab/params.hpp"

namespace vlab::train {

// Binary checkpoint: magic "VLAB", format version, config digest, step, rng
// state, named little-endian tensor records and provenance tags. Loading a
// saved state reproduces training bit-exactly from that step.
struct Checkpoint {
  std::uint32_t version = 1;
  std::string config_digest;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::string rng_state;
  std::vector<std::string> tags;
  std::vector<std::pair<std::string, Tensor>> tensors;          // sorted by name on save
  std::map<std::string, std::vector<float>> opt_m, opt_v;       // optimizer moments

  void put(const ParamSet& params, const std::string& prefix = "");
  // Copies values into the (already constructed) destination tensors by name.
  void restore(ParamSet& params, const std::string& prefix = "") const;
  bool has_tag(const std::string& tag) const;
  const Tensor& tensor(const std::string& name) const;
  bool has_tensor(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace vlab::train
