#include "vlab/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

namespace vlab::train {

namespace {
constexpr char kMagic[4] = {'V', 'L', 'A', 'B'};

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
void write_floats(std::ostream& os, const std::vector<float>& v) {
  write_u64(os, v.size());
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(float)));
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
std::string read_string(std::istream& is) {
  const auto n = read_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}
std::vector<float> read_floats(std::istream& is) {
  const auto n = read_u64(is);
  std::vector<float> v(n);
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(n * sizeof(float)));
  return v;
}
}  // namespace

void Checkpoint::put(const ParamSet& params, const std::string& prefix) {
  for (const auto& [name, t] : params.items())
    tensors.emplace_back(prefix + name, t.detach());
}

void Checkpoint::restore(ParamSet& params, const std::string& prefix) const {
  for (auto& [name, t] : params.items()) {
    const Tensor& src = tensor(prefix + name);
    check_shape(src.shape() == t.shape(),
                "checkpoint: shape mismatch for '" + prefix + name + "': stored " +
                    shape_str(src.shape()) + " vs model " + shape_str(t.shape()));
    t.values() = src.values();
  }
}

bool Checkpoint::has_tag(const std::string& tag) const {
  return std::find(tags.begin(), tags.end(), tag) != tags.end();
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw ContractError("checkpoint: no tensor named '" + name + "'");
}

bool Checkpoint::has_tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  check(os.good(), "checkpoint: cannot open '" + path + "' for writing");
  os.write(kMagic, 4);
  write_u32(os, ckpt.version);
  write_string(os, ckpt.config_digest);
  write_u64(os, ckpt.seed);
  write_u64(os, ckpt.step);
  write_string(os, ckpt.rng_state);
  write_u32(os, static_cast<std::uint32_t>(ckpt.tags.size()));
  for (const auto& tag : ckpt.tags) write_string(os, tag);

  auto sorted = ckpt.tensors;
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  write_u64(os, sorted.size());
  for (const auto& [name, t] : sorted) {
    write_string(os, name);
    os.put(0);  // dtype: f32
    write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) write_u64(os, static_cast<std::uint64_t>(d));
    os.write(reinterpret_cast<const char*>(t.values().data()),
             static_cast<std::streamsize>(t.values().size() * sizeof(float)));
  }

  write_u64(os, ckpt.opt_m.size());
  for (const auto& [name, m] : ckpt.opt_m) {
    write_string(os, name);
    write_floats(os, m);
  }
  write_u64(os, ckpt.opt_v.size());
  for (const auto& [name, v] : ckpt.opt_v) {
    write_string(os, name);
    write_floats(os, v);
  }
  check(os.good(), "checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.good(), "checkpoint: cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  check(is.good() && std::memcmp(magic, kMagic, 4) == 0,
        "checkpoint: bad magic in '" + path + "'");
  Checkpoint ckpt;
  ckpt.version = read_u32(is);
  check(ckpt.version == 1, "checkpoint: unsupported version");
  ckpt.config_digest = read_string(is);
  ckpt.seed = read_u64(is);
  ckpt.step = read_u64(is);
  ckpt.rng_state = read_string(is);
  const auto n_tags = read_u32(is);
  for (std::uint32_t i = 0; i < n_tags; ++i) ckpt.tags.push_back(read_string(is));

  const auto n_tensors = read_u64(is);
  for (std::uint64_t i = 0; i < n_tensors; ++i) {
    std::string name = read_string(is);
    const int dtype = is.get();
    check(dtype == 0, "checkpoint: unsupported dtype");
    const auto rank = read_u32(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<Index>(read_u64(is));
    std::vector<float> data(static_cast<std::size_t>(shape_numel(shape)));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
    ckpt.tensors.emplace_back(std::move(name),
                              Tensor::from_data(std::move(shape), std::move(data)));
  }
  const auto n_m = read_u64(is);
  for (std::uint64_t i = 0; i < n_m; ++i) {
    std::string name = read_string(is);
    ckpt.opt_m[name] = read_floats(is);
  }
  const auto n_v = read_u64(is);
  for (std::uint64_t i = 0; i < n_v; ++i) {
    std::string name = read_string(is);
    ckpt.opt_v[name] = read_floats(is);
  }
  check(is.good(), "checkpoint: truncated file '" + path + "'");
  return ckpt;
}

}  // namespace vlab::train
