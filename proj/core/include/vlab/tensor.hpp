#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vlab/common.hpp"
#include "vlab/gemm.hpp"
#include "vlab/rng.hpp"
#include "vlab/threading.hpp"

namespace vlab {

namespace detail {

inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first use
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;  // a backward pass already started here
  const char* op = "leaf";
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

}  // namespace detail

// Disables graph recording in scope (inference / data paths).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Dense row-major tensor with reverse-mode autodiff. Copies share the
// underlying node; ops build a graph that backward() walks in reverse
// creation order.
template <typename T>
class TensorT {
 public:
  using Scalar = T;
  using Node = detail::Node<T>;

  TensorT() = default;

  static TensorT from_data(Shape shape, std::vector<T> data) {
    check_shape(shape_numel(shape) == static_cast<Index>(data.size()),
                "tensor: data length " + std::to_string(data.size()) +
                    " does not match shape " + shape_str(shape));
    TensorT t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->seq = detail::next_seq();
    return t;
  }

  static TensorT zeros(Shape shape) {
    return full(std::move(shape), T(0));
  }

  static TensorT full(Shape shape, T v) {
    std::vector<T> d(static_cast<std::size_t>(shape_numel(shape)), v);
    return from_data(std::move(shape), std::move(d));
  }

  static TensorT scalar(T v) { return from_data({}, {v}); }

  static TensorT randn(Shape shape, Rng& rng, T stddev = T(1), T mean = T(0)) {
    std::vector<T> d(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : d) x = static_cast<T>(rng.normal()) * stddev + mean;
    return from_data(std::move(shape), std::move(d));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  Index numel() const { return static_cast<Index>(node_->value.size()); }

  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  T item() const {
    check(numel() == 1, "item(): tensor has " + std::to_string(numel()) + " elements");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }

  TensorT& set_requires_grad(bool rg) {
    check(node_->leaf, "set_requires_grad: only leaf tensors");
    node_->requires_grad = rg;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }

  std::vector<T>& grad() {
    check(has_grad(), "grad(): no gradient present");
    return node_->grad;
  }
  const std::vector<T>& grad() const {
    check(has_grad(), "grad(): no gradient present");
    return node_->grad;
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  // New leaf with a copy of the current values; no graph history.
  TensorT detach() const {
    return from_data(node_->shape, node_->value);
  }

  template <typename U>
  TensorT<U> cast() const {
    std::vector<U> d(node_->value.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<U>(node_->value[i]);
    return TensorT<U>::from_data(node_->shape, std::move(d));
  }

  const char* op() const { return node_->op; }
  std::shared_ptr<Node> node() const { return node_; }

  // Reverse-mode sweep from a scalar loss. Populates grad on every
  // requires_grad leaf reachable from it; additive into existing grads.
  void backward() const;

 private:
  std::shared_ptr<Node> node_;

  template <typename U>
  friend TensorT<U> make_op(Shape, std::vector<U>, const char*,
                            std::vector<TensorT<U>>,
                            std::function<void(detail::Node<U>&)>);
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

template <typename T>
TensorT<T> make_op(Shape shape, std::vector<T> value, const char* op,
                   std::vector<TensorT<T>> parents,
                   std::function<void(detail::Node<T>&)> backward_fn) {
  TensorT<T> out = TensorT<T>::from_data(std::move(shape), std::move(value));
  auto& n = *out.node_;
  n.op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || p.node()->requires_grad;
  }
  if (needs) {
    n.leaf = false;
    n.requires_grad = true;
    n.parents.reserve(parents.size());
    for (const auto& p : parents) n.parents.push_back(p.node());
    n.backward_fn = std::move(backward_fn);
  }
  return out;
}

// Ordered record of the executed operations reachable from a root, parents
// first. backward() runs it once, in reverse.
template <typename T>
class TapeT {
 public:
  static TapeT collect(const TensorT<T>& root) {
    TapeT tape;
    if (!root.node()->requires_grad) return tape;
    std::unordered_set<const detail::Node<T>*> seen;
    std::vector<std::shared_ptr<detail::Node<T>>> stack{root.node()};
    while (!stack.empty()) {
      auto n = stack.back();
      stack.pop_back();
      if (!seen.insert(n.get()).second) continue;
      tape.nodes_.push_back(n);
      for (const auto& p : n->parents)
        if (p->requires_grad) stack.push_back(p);
    }
    std::sort(tape.nodes_.begin(), tape.nodes_.end(),
              [](const auto& a, const auto& b) { return a->seq < b->seq; });
    return tape;
  }

  std::size_t size() const { return nodes_.size(); }

  bool topologically_ordered() const {
    std::unordered_set<const detail::Node<T>*> placed;
    for (const auto& n : nodes_) {
      for (const auto& p : n->parents) {
        if (p->requires_grad && !placed.count(p.get())) return false;
      }
      placed.insert(n.get());
    }
    return true;
  }

  const std::vector<std::shared_ptr<detail::Node<T>>>& nodes() const { return nodes_; }

 private:
  std::vector<std::shared_ptr<detail::Node<T>>> nodes_;
};

using Tape = TapeT<float>;

template <typename T>
void TensorT<T>::backward() const {
  check(numel() == 1, "backward: loss must be scalar, got shape " + shape_str(shape()));
  check(node_->requires_grad,
        "backward: loss does not depend on any requires_grad tensor");
  check(!node_->consumed,
        "backward: tape already consumed; re-run forward before calling backward again");
  node_->consumed = true;
  auto tape = TapeT<T>::collect(*this);
  node_->ensure_grad();
  node_->grad[0] += T(1);
  const auto& order = tape.nodes();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto& n = **it;
    if (n.backward_fn) n.backward_fn(n);
  }
}

// ---------------------------------------------------------------------------
// Broadcast helpers. Elementwise ops accept rhs of identical shape, a scalar
// rhs, or an rhs whose shape is a suffix of lhs (bias-style row broadcast).
// Anything else is a shape error; batched matmul is the only other broadcast.
// ---------------------------------------------------------------------------

namespace detail {

enum class Bcast { Same, Scalar, Suffix };

template <typename T>
Bcast classify_broadcast(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::Same;
  if (b.numel() == 1) return Bcast::Scalar;
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (bs.size() < as.size() &&
      std::equal(bs.begin(), bs.end(), as.end() - static_cast<long>(bs.size()))) {
    return Bcast::Suffix;
  }
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(bs) +
                   " onto " + shape_str(as));
}

// Accumulates src (shape of lhs) into dst (shape of rhs) under the given
// broadcast mode: identity, total sum, or sum over leading dims.
template <typename T>
void reduce_into(const std::vector<T>& src, std::vector<T>& dst, Bcast mode) {
  if (mode == Bcast::Same) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  } else if (mode == Bcast::Scalar) {
    T acc = T(0);
    for (T v : src) acc += v;
    dst[0] += acc;
  } else {
    const std::size_t m = dst.size();
    for (std::size_t base = 0; base < src.size(); base += m)
      for (std::size_t j = 0; j < m; ++j) dst[j] += src[base + j];
  }
}

inline constexpr Index kParallelCutoff = 1 << 16;

// Elementwise map with contiguous-chunk parallelism; every output element is
// written by exactly one thread.
template <typename T, typename F>
void map_parallel(Index n, std::vector<T>& out, F&& fn) {
  if (n < kParallelCutoff) {
    fn(0, n, out.data());
  } else {
    T* data = out.data();
    parallel_for(n, [&fn, data](Index b, Index e) { fn(b, e, data); });
  }
}

// Binary elementwise kernel under a broadcast mode.
template <typename T, typename Op>
std::vector<T> ew_binary(const std::vector<T>& a, const std::vector<T>& b, Bcast mode,
                         Op op) {
  std::vector<T> out(a.size());
  const std::size_t m = b.size();
  if (mode == Bcast::Same) {
    map_parallel<T>(static_cast<Index>(a.size()), out, [&](Index s, Index e, T* o) {
      for (Index i = s; i < e; ++i) o[i] = op(a[static_cast<std::size_t>(i)],
                                              b[static_cast<std::size_t>(i)]);
    });
  } else if (mode == Bcast::Scalar) {
    const T c = b[0];
    map_parallel<T>(static_cast<Index>(a.size()), out, [&](Index s, Index e, T* o) {
      for (Index i = s; i < e; ++i) o[i] = op(a[static_cast<std::size_t>(i)], c);
    });
  } else {
    for (std::size_t base = 0; base < a.size(); base += m)
      for (std::size_t j = 0; j < m; ++j) out[base + j] = op(a[base + j], b[j]);
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  auto mode = detail::classify_broadcast(a, b, "add");
  auto out = detail::ew_binary(a.values(), b.values(), mode,
                               [](T x, T y) { return x + y; });
  return make_op<T>(a.shape(), std::move(out), "add", {a, b},
                    [mode](detail::Node<T>& n) {
                      auto& pa = *n.parents[0];
                      auto& pb = *n.parents[1];
                      if (pa.requires_grad) {
                        pa.ensure_grad();
                        for (std::size_t i = 0; i < n.grad.size(); ++i)
                          pa.grad[i] += n.grad[i];
                      }
                      if (pb.requires_grad) {
                        pb.ensure_grad();
                        detail::reduce_into(n.grad, pb.grad, mode);
                      }
                    });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  auto mode = detail::classify_broadcast(a, b, "sub");
  auto out = detail::ew_binary(a.values(), b.values(), mode,
                               [](T x, T y) { return x - y; });
  return make_op<T>(a.shape(), std::move(out), "sub", {a, b},
                    [mode](detail::Node<T>& n) {
                      auto& pa = *n.parents[0];
                      auto& pb = *n.parents[1];
                      if (pa.requires_grad) {
                        pa.ensure_grad();
                        for (std::size_t i = 0; i < n.grad.size(); ++i)
                          pa.grad[i] += n.grad[i];
                      }
                      if (pb.requires_grad) {
                        pb.ensure_grad();
                        std::vector<T> neg(n.grad.size());
                        for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -n.grad[i];
                        detail::reduce_into(neg, pb.grad, mode);
                      }
                    });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  auto mode = detail::classify_broadcast(a, b, "mul");
  auto out = detail::ew_binary(a.values(), b.values(), mode,
                               [](T x, T y) { return x * y; });
  return make_op<T>(a.shape(), std::move(out), "mul", {a, b},
                    [mode](detail::Node<T>& n) {
                      auto& pa = *n.parents[0];
                      auto& pb = *n.parents[1];
                      const auto& av = pa.value;
                      const auto& bv = pb.value;
                      const std::size_t m = bv.size();
                      if (pa.requires_grad) {
                        pa.ensure_grad();
                        if (mode == detail::Bcast::Same) {
                          for (std::size_t i = 0; i < n.grad.size(); ++i)
                            pa.grad[i] += n.grad[i] * bv[i];
                        } else if (mode == detail::Bcast::Scalar) {
                          const T c = bv[0];
                          for (std::size_t i = 0; i < n.grad.size(); ++i)
                            pa.grad[i] += n.grad[i] * c;
                        } else {
                          for (std::size_t base = 0; base < n.grad.size(); base += m)
                            for (std::size_t j = 0; j < m; ++j)
                              pa.grad[base + j] += n.grad[base + j] * bv[j];
                        }
                      }
                      if (pb.requires_grad) {
                        pb.ensure_grad();
                        std::vector<T> t(n.grad.size());
                        for (std::size_t i = 0; i < t.size(); ++i) t[i] = n.grad[i] * av[i];
                        detail::reduce_into(t, pb.grad, mode);
                      }
                    });
}

template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
  auto mode = detail::classify_broadcast(a, b, "div");
  auto out = detail::ew_binary(a.values(), b.values(), mode,
                               [](T x, T y) { return x / y; });
  return make_op<T>(a.shape(), std::move(out), "div", {a, b},
                    [mode](detail::Node<T>& n) {
                      auto& pa = *n.parents[0];
                      auto& pb = *n.parents[1];
                      const auto& av = pa.value;
                      const auto& bv = pb.value;
                      const std::size_t m = bv.size();
                      if (pa.requires_grad) {
                        pa.ensure_grad();
                        for (std::size_t i = 0; i < n.grad.size(); ++i)
                          pa.grad[i] += n.grad[i] / bv[i % m];
                      }
                      if (pb.requires_grad) {
                        pb.ensure_grad();
                        std::vector<T> t(n.grad.size());
                        for (std::size_t i = 0; i < t.size(); ++i) {
                          const T bb = bv[i % m];
                          t[i] = -n.grad[i] * av[i] / (bb * bb);
                        }
                        detail::reduce_into(t, pb.grad, mode);
                      }
                    });
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T c) {
  std::vector<T> out(a.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;
  return make_op<T>(a.shape(), std::move(out), "scale", {a},
                    [c](detail::Node<T>& n) {
                      auto& p = *n.parents[0];
                      p.ensure_grad();
                      for (std::size_t i = 0; i < n.grad.size(); ++i)
                        p.grad[i] += n.grad[i] * c;
                    });
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& a, T c) {
  std::vector<T> out(a.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + c;
  return make_op<T>(a.shape(), std::move(out), "add_scalar", {a},
                    [](detail::Node<T>& n) {
                      auto& p = *n.parents[0];
                      p.ensure_grad();
                      for (std::size_t i = 0; i < n.grad.size(); ++i)
                        p.grad[i] += n.grad[i];
                    });
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> gelu(const TensorT<T>& a) {
  const auto& av = a.values();
  std::vector<T> out(av.size());
  detail::vec_gelu(av.data(), out.data(), static_cast<Index>(av.size()));
  return make_op<T>(a.shape(), std::move(out), "gelu", {a},
                    [](detail::Node<T>& n) {
                      auto& p = *n.parents[0];
                      p.ensure_grad();
                      detail::vec_gelu_grad(p.value.data(), n.grad.data(), p.grad.data(),
                                            static_cast<Index>(n.grad.size()));
                    });
}

template <typename T>
TensorT<T> exp_(const TensorT<T>& a) {
  const auto& av = a.values();
  std::vector<T> out(av.size());
  detail::map_parallel<T>(static_cast<Index>(av.size()), out, [&](Index s, Index e, T* o) {
    for (Index i = s; i < e; ++i) o[i] = std::exp(av[static_cast<std::size_t>(i)]);
  });
  return make_op<T>(a.shape(), std::move(out), "exp", {a},
                    [](detail::Node<T>& n) {
                      auto& p = *n.parents[0];
                      p.ensure_grad();
                      for (std::size_t i = 0; i < n.grad.size(); ++i)
                        p.grad[i] += n.grad[i] * n.value[i];
                    });
}

template <typename T>
TensorT<T> log_(const TensorT<T>& a) {
  const auto& av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(av[i]);
  return make_op<T>(a.shape(), std::move(out), "log", {a},
                    [](detail::Node<T>& n) {
                      auto& p = *n.parents[0];
                      p.ensure_grad();
                      for (std::size_t i = 0; i < n.grad.size(); ++i)
                        p.grad[i] += n.grad[i] / p.value[i];
                    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> sum_all(const TensorT<T>& a) {
  T acc = T(0);
  for (T v : a.values()) acc += v;
  return make_op<T>(Shape{}, {acc}, "sum", {a},
                    [](detail::Node<T>& n) {
                      auto& p = *n.parents[0];
                      p.ensure_grad();
                      const T g = n.grad[0];
                      for (auto& gv : p.grad) gv += g;
                    });
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& a) {
  check(a.numel() > 0, "mean: empty tensor");
  T acc = T(0);
  for (T v : a.values()) acc += v;
  const T inv = T(1) / static_cast<T>(a.numel());
  return make_op<T>(Shape{}, {acc * inv}, "mean", {a},
                    [inv](detail::Node<T>& n) {
                      auto& p = *n.parents[0];
                      p.ensure_grad();
                      const T g = n.grad[0] * inv;
                      for (auto& gv : p.grad) gv += g;
                    });
}

namespace detail {
inline void axis_extents(const Shape& s, Index axis, Index& outer, Index& len,
                         Index& inner) {
  outer = 1;
  inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  len = s[static_cast<std::size_t>(axis)];
  for (Index i = axis + 1; i < static_cast<Index>(s.size()); ++i)
    inner *= s[static_cast<std::size_t>(i)];
}

inline Index normalize_axis(Index axis, Index rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    throw ShapeError(std::string(op) + ": axis out of range");
  return axis;
}
}  // namespace detail

template <typename T>
TensorT<T> sum_axis(const TensorT<T>& a, Index axis) {
  axis = detail::normalize_axis(axis, a.rank(), "sum_axis");
  Index outer, len, inner;
  detail::axis_extents(a.shape(), axis, outer, len, inner);
  Shape oshape = a.shape();
  oshape.erase(oshape.begin() + static_cast<long>(axis));
  std::vector<T> out(static_cast<std::size_t>(outer * inner), T(0));
  const auto& av = a.values();
  for (Index o = 0; o < outer; ++o)
    for (Index l = 0; l < len; ++l)
      for (Index i = 0; i < inner; ++i)
        out[static_cast<std::size_t>(o * inner + i)] +=
            av[static_cast<std::size_t>((o * len + l) * inner + i)];
  return make_op<T>(std::move(oshape), std::move(out), "sum_axis", {a},
                    [outer, len, inner](detail::Node<T>& n) {
                      auto& p = *n.parents[0];
                      p.ensure_grad();
                      for (Index o = 0; o < outer; ++o)
                        for (Index l = 0; l < len; ++l)
                          for (Index i = 0; i < inner; ++i)
                            p.grad[static_cast<std::size_t>((o * len + l) * inner + i)] +=
                                n.grad[static_cast<std::size_t>(o * inner + i)];
                    });
}

template <typename T>
TensorT<T> mean_axis(const TensorT<T>& a, Index axis) {
  axis = detail::normalize_axis(axis, a.rank(), "mean_axis");
  const T inv = T(1) / static_cast<T>(a.dim(axis));
  return scale(sum_axis(a, axis), inv);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, Shape shape) {
  check_shape(shape_numel(shape) == a.numel(),
              "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  return make_op<T>(std::move(shape), a.values(), "reshape", {a},
                    [](detail::Node<T>& n) {
                      auto& p = *n.parents[0];
                      p.ensure_grad();
                      for (std::size_t i = 0; i < n.grad.size(); ++i)
                        p.grad[i] += n.grad[i];
                    });
}

namespace detail {
template <typename T>
void permute_copy(const Shape& in_shape, const std::vector<T>& in,
                  const std::vector<Index>& perm, std::vector<T>& out) {
  const Index rank = static_cast<Index>(in_shape.size());
  Shape out_shape(static_cast<std::size_t>(rank));
  for (Index i = 0; i < rank; ++i)
    out_shape[static_cast<std::size_t>(i)] = in_shape[static_cast<std::size_t>(perm[i])];
  std::vector<Index> in_strides(static_cast<std::size_t>(rank), 1);
  for (Index i = rank - 2; i >= 0; --i)
    in_strides[static_cast<std::size_t>(i)] =
        in_strides[static_cast<std::size_t>(i + 1)] * in_shape[static_cast<std::size_t>(i + 1)];
  std::vector<Index> strides_for_out(static_cast<std::size_t>(rank));
  for (Index i = 0; i < rank; ++i)
    strides_for_out[static_cast<std::size_t>(i)] =
        in_strides[static_cast<std::size_t>(perm[i])];
  std::vector<Index> idx(static_cast<std::size_t>(rank), 0);
  const std::size_t n = in.size();
  Index src = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    out[flat] = in[static_cast<std::size_t>(src)];
    for (Index d = rank - 1; d >= 0; --d) {
      auto du = static_cast<std::size_t>(d);
      if (++idx[du] < out_shape[du]) {
        src += strides_for_out[du];
        break;
      }
      src -= strides_for_out[du] * (out_shape[du] - 1);
      idx[du] = 0;
    }
  }
}
}  // namespace detail

template <typename T>
TensorT<T> permute(const TensorT<T>& a, std::vector<Index> perm) {
  const Index rank = a.rank();
  check_shape(static_cast<Index>(perm.size()) == rank, "permute: rank mismatch");
  Shape oshape(static_cast<std::size_t>(rank));
  for (Index i = 0; i < rank; ++i)
    oshape[static_cast<std::size_t>(i)] = a.dim(perm[static_cast<std::size_t>(i)]);
  std::vector<T> out(a.values().size());
  if (rank > 0) detail::permute_copy(a.shape(), a.values(), perm, out);
  else out = a.values();
  std::vector<Index> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i)
    inv[static_cast<std::size_t>(perm[i])] = static_cast<Index>(i);
  Shape saved_oshape = oshape;
  return make_op<T>(std::move(oshape), std::move(out), "permute", {a},
                    [inv, saved_oshape](detail::Node<T>& n) {
                      auto& p = *n.parents[0];
                      p.ensure_grad();
                      std::vector<T> g(n.grad.size());
                      detail::permute_copy(saved_oshape, n.grad, inv, g);
                      for (std::size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
                    });
}

template <typename T>
TensorT<T> transpose_last2(const TensorT<T>& a) {
  const Index rank = a.rank();
  check_shape(rank >= 2, "transpose: rank must be >= 2");
  std::vector<Index> perm(static_cast<std::size_t>(rank));
  for (Index i = 0; i < rank; ++i) perm[static_cast<std::size_t>(i)] = i;
  std::swap(perm[static_cast<std::size_t>(rank - 2)], perm[static_cast<std::size_t>(rank - 1)]);
  return permute(a, perm);
}

template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& parts, Index axis) {
  check(!parts.empty(), "concat: no inputs");
  const Index rank = parts[0].rank();
  axis = detail::normalize_axis(axis, rank, "concat");
  Shape oshape = parts[0].shape();
  Index total = 0;
  for (const auto& p : parts) {
    check_shape(p.rank() == rank, "concat: rank mismatch");
    for (Index d = 0; d < rank; ++d) {
      if (d == axis) continue;
      check_shape(p.dim(d) == oshape[static_cast<std::size_t>(d)],
                  "concat: shape mismatch at axis " + std::to_string(d) + ": " +
                      shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    }
    total += p.dim(axis);
  }
  oshape[static_cast<std::size_t>(axis)] = total;
  Index outer, len, inner;
  detail::axis_extents(oshape, axis, outer, len, inner);
  (void)len;
  std::vector<T> out(static_cast<std::size_t>(shape_numel(oshape)));
  std::vector<Index> lens;
  lens.reserve(parts.size());
  for (const auto& p : parts) lens.push_back(p.dim(axis));
  for (Index o = 0; o < outer; ++o) {
    Index offset = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      const auto& pv = parts[pi].values();
      const Index plen = lens[pi];
      std::copy(pv.begin() + o * plen * inner, pv.begin() + (o + 1) * plen * inner,
                out.begin() + (o * total + offset) * inner);
      offset += plen;
    }
  }
  std::vector<TensorT<T>> parents = parts;
  return make_op<T>(std::move(oshape), std::move(out), "concat", std::move(parents),
                    [outer, inner, lens, total](detail::Node<T>& n) {
                      Index offset = 0;
                      for (std::size_t pi = 0; pi < n.parents.size(); ++pi) {
                        auto& p = *n.parents[pi];
                        const Index plen = lens[pi];
                        if (p.requires_grad) {
                          p.ensure_grad();
                          for (Index o = 0; o < outer; ++o) {
                            const Index src = (o * total + offset) * inner;
                            const Index dst = o * plen * inner;
                            for (Index i = 0; i < plen * inner; ++i)
                              p.grad[static_cast<std::size_t>(dst + i)] +=
                                  n.grad[static_cast<std::size_t>(src + i)];
                          }
                        }
                        offset += plen;
                      }
                    });
}

template <typename T>
TensorT<T> slice(const TensorT<T>& a, Index axis, Index start, Index len) {
  axis = detail::normalize_axis(axis, a.rank(), "slice");
  check_shape(start >= 0 && len >= 1 && start + len <= a.dim(axis),
              "slice: range [" + std::to_string(start) + ", " +
                  std::to_string(start + len) + ") out of bounds for axis size " +
                  std::to_string(a.dim(axis)));
  Index outer, alen, inner;
  detail::axis_extents(a.shape(), axis, outer, alen, inner);
  Shape oshape = a.shape();
  oshape[static_cast<std::size_t>(axis)] = len;
  std::vector<T> out(static_cast<std::size_t>(outer * len * inner));
  const auto& av = a.values();
  for (Index o = 0; o < outer; ++o)
    std::copy(av.begin() + (o * alen + start) * inner,
              av.begin() + (o * alen + start + len) * inner,
              out.begin() + o * len * inner);
  return make_op<T>(std::move(oshape), std::move(out), "slice", {a},
                    [outer, alen, inner, start, len](detail::Node<T>& n) {
                      auto& p = *n.parents[0];
                      p.ensure_grad();
                      for (Index o = 0; o < outer; ++o)
                        for (Index i = 0; i < len * inner; ++i)
                          p.grad[static_cast<std::size_t>((o * alen + start) * inner + i)] +=
                              n.grad[static_cast<std::size_t>(o * len * inner + i)];
                    });
}

// out (b, *x.shape): x replicated b times along a new leading axis.
template <typename T>
TensorT<T> expand_batch(const TensorT<T>& a, Index b) {
  check(b >= 1, "expand_batch: batch must be >= 1");
  Shape oshape;
  oshape.push_back(b);
  for (Index d : a.shape()) oshape.push_back(d);
  const auto& av = a.values();
  std::vector<T> out(av.size() * static_cast<std::size_t>(b));
  for (Index i = 0; i < b; ++i)
    std::copy(av.begin(), av.end(), out.begin() + static_cast<long>(av.size()) * i);
  return make_op<T>(std::move(oshape), std::move(out), "expand_batch", {a},
                    [b](detail::Node<T>& n) {
                      auto& p = *n.parents[0];
                      p.ensure_grad();
                      const std::size_t m = p.grad.size();
                      for (Index i = 0; i < b; ++i)
                        for (std::size_t j = 0; j < m; ++j)
                          p.grad[j] += n.grad[static_cast<std::size_t>(i) * m + j];
                    });
}

// ---------------------------------------------------------------------------
// Matrix multiply with batch broadcasting: [..., m, k] x [..., k, n].
// Batch dims must match exactly, or one operand may be rank-2 (weights).
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void batched_gemm(bool ta, bool tb, Index batch, Index m, Index n, Index k,
                  const T* a, bool a_batched, const T* b, bool b_batched, T* c,
                  bool accumulate) {
  const Index a_sz = m * k;
  const Index b_sz = k * n;
  const Index c_sz = m * n;
  for (Index i = 0; i < batch; ++i) {
    gemm(ta, tb, m, n, k, a + (a_batched ? i * a_sz : 0),
         b + (b_batched ? i * b_sz : 0), c + i * c_sz, accumulate);
  }
}
}  // namespace detail

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  const Index ar = a.rank();
  const Index br = b.rank();
  check_shape(ar >= 2 && br >= 2, "matmul: operands must have rank >= 2, got " +
                                      shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const Index m = a.dim(ar - 2);
  const Index k = a.dim(ar - 1);
  const Index kb = b.dim(br - 2);
  const Index n = b.dim(br - 1);
  check_shape(k == kb, "matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                           " x " + shape_str(b.shape()));
  Shape abatch(a.shape().begin(), a.shape().end() - 2);
  Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  bool a_batched = !abatch.empty();
  bool b_batched = !bbatch.empty();
  Shape batch_shape;
  if (a_batched && b_batched) {
    check_shape(abatch == bbatch, "matmul: batch dimensions disagree: " +
                                      shape_str(a.shape()) + " x " + shape_str(b.shape()));
    batch_shape = abatch;
  } else {
    batch_shape = a_batched ? abatch : bbatch;
  }
  const Index batch = shape_numel(batch_shape);
  Shape oshape = batch_shape;
  oshape.push_back(m);
  oshape.push_back(n);
  std::vector<T> out(static_cast<std::size_t>(batch * m * n));
  // Weight-style rank-2 rhs collapses the batch into one large product.
  if (!b_batched) {
    detail::gemm(false, false, batch * m, n, k, a.values().data(), b.values().data(),
                 out.data(), false);
  } else {
    detail::batched_gemm(false, false, batch, m, n, k, a.values().data(), a_batched,
                         b.values().data(), b_batched, out.data(), false);
  }
  return make_op<T>(
      std::move(oshape), std::move(out), "matmul", {a, b},
      [batch, m, n, k, a_batched, b_batched](detail::Node<T>& n_) {
        auto& pa = *n_.parents[0];
        auto& pb = *n_.parents[1];
        // dA = dC.B^T, dB = A^T.dC
        if (pa.requires_grad) {
          pa.ensure_grad();
          if (!b_batched) {
            detail::gemm(false, true, batch * m, k, n, n_.grad.data(), pb.value.data(),
                         pa.grad.data(), true);
          } else if (a_batched) {
            detail::batched_gemm(false, true, batch, m, k, n, n_.grad.data(), true,
                                 pb.value.data(), b_batched, pa.grad.data(), true);
          } else {
            // Sum over batch into the single (m, k) gradient.
            for (Index i = 0; i < batch; ++i)
              detail::gemm(false, true, m, k, n, n_.grad.data() + i * m * n,
                           pb.value.data() + i * k * n, pa.grad.data(), true);
          }
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          if (!b_batched) {
            detail::gemm(true, false, k, n, batch * m, pa.value.data(), n_.grad.data(),
                         pb.grad.data(), true);
          } else {
            detail::batched_gemm(true, false, batch, k, n, m, pa.value.data(),
                                 a_batched, n_.grad.data(), true, pb.grad.data(), true);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Softmax along an axis (max-subtracted, overflow-safe).
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> softmax(const TensorT<T>& a, Index axis = -1) {
  axis = detail::normalize_axis(axis, a.rank(), "softmax");
  Index outer, len, inner;
  detail::axis_extents(a.shape(), axis, outer, len, inner);
  const auto& av = a.values();
  std::vector<T> out(av.size());
  auto rows = [&](Index o0, Index o1, T* optr) {
    for (Index o = o0; o < o1; ++o) {
      for (Index i = 0; i < inner; ++i) {
        const Index base = o * len * inner + i;
        T mx = av[static_cast<std::size_t>(base)];
        for (Index l = 1; l < len; ++l)
          mx = std::max(mx, av[static_cast<std::size_t>(base + l * inner)]);
        T denom = T(0);
        for (Index l = 0; l < len; ++l) {
          const T e = std::exp(av[static_cast<std::size_t>(base + l * inner)] - mx);
          optr[base + l * inner] = e;
          denom += e;
        }
        const T inv = T(1) / denom;
        for (Index l = 0; l < len; ++l) optr[base + l * inner] *= inv;
      }
    }
  };
  if (static_cast<Index>(av.size()) < detail::kParallelCutoff || outer < 2) {
    rows(0, outer, out.data());
  } else {
    T* optr = out.data();
    parallel_for(outer, [&rows, optr](Index b, Index e) { rows(b, e, optr); });
  }
  return make_op<T>(a.shape(), std::move(out), "softmax", {a},
                    [outer, len, inner](detail::Node<T>& n) {
                      auto& p = *n.parents[0];
                      p.ensure_grad();
                      for (Index o = 0; o < outer; ++o) {
                        for (Index i = 0; i < inner; ++i) {
                          const Index base = o * len * inner + i;
                          T dot = T(0);
                          for (Index l = 0; l < len; ++l) {
                            const auto idx = static_cast<std::size_t>(base + l * inner);
                            dot += n.grad[idx] * n.value[idx];
                          }
                          for (Index l = 0; l < len; ++l) {
                            const auto idx = static_cast<std::size_t>(base + l * inner);
                            p.grad[idx] += n.value[idx] * (n.grad[idx] - dot);
                          }
                        }
                      }
                    });
}

// ---------------------------------------------------------------------------
// Embedding row gather: table (V, D) indexed by flat ids, output ids_shape+[D].
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> embedding_rows(const TensorT<T>& table, const std::vector<Index>& ids,
                          Shape ids_shape = {}) {
  check_shape(table.rank() == 2, "embedding: table must be rank 2");
  const Index v = table.dim(0);
  const Index d = table.dim(1);
  if (ids_shape.empty()) ids_shape = {static_cast<Index>(ids.size())};
  check_shape(shape_numel(ids_shape) == static_cast<Index>(ids.size()),
              "embedding: ids_shape does not match id count");
  for (Index id : ids)
    check(id >= 0 && id < v,
          "embedding: id " + std::to_string(id) + " out of vocabulary of size " +
              std::to_string(v));
  Shape oshape = ids_shape;
  oshape.push_back(d);
  std::vector<T> out(ids.size() * static_cast<std::size_t>(d));
  const auto& tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(tv.begin() + ids[i] * d, tv.begin() + (ids[i] + 1) * d,
              out.begin() + static_cast<long>(i * static_cast<std::size_t>(d)));
  return make_op<T>(std::move(oshape), std::move(out), "embedding", {table},
                    [ids, d](detail::Node<T>& n) {
                      auto& p = *n.parents[0];
                      p.ensure_grad();
                      for (std::size_t i = 0; i < ids.size(); ++i) {
                        const Index row = ids[i];
                        for (Index j = 0; j < d; ++j)
                          p.grad[static_cast<std::size_t>(row * d + j)] +=
                              n.grad[i * static_cast<std::size_t>(d) +
                                     static_cast<std::size_t>(j)];
                      }
                    });
}

// ---------------------------------------------------------------------------
// LayerNorm over the last axis with affine output.
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> layer_norm_op(const TensorT<T>& x, const TensorT<T>& gain,
                         const TensorT<T>& bias, T eps) {
  const Index d = x.dim(x.rank() - 1);
  check_shape(gain.rank() == 1 && gain.dim(0) == d && bias.rank() == 1 && bias.dim(0) == d,
              "layer_norm: affine params " + shape_str(gain.shape()) +
                  " do not match last axis of " + shape_str(x.shape()));
  check(eps > T(0), "layer_norm: epsilon must be positive");
  const Index rows = x.numel() / d;
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  std::vector<T> out(xv.size());
  for (Index r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * d;
    T mean = T(0);
    for (Index j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (Index j = 0; j < d; ++j) {
      const T c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + eps);
    T* orow = out.data() + r * d;
    for (Index j = 0; j < d; ++j)
      orow[j] = (xr[j] - mean) * inv * gv[static_cast<std::size_t>(j)] +
                bv[static_cast<std::size_t>(j)];
  }
  return make_op<T>(
      x.shape(), std::move(out), "layer_norm", {x, gain, bias},
      [rows, d, eps](detail::Node<T>& n) {
        auto& px = *n.parents[0];
        auto& pg = *n.parents[1];
        auto& pb = *n.parents[2];
        const auto& xv = px.value;
        const auto& gv = pg.value;
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        std::vector<T> xhat(static_cast<std::size_t>(d));
        for (Index r = 0; r < rows; ++r) {
          const T* xr = xv.data() + r * d;
          const T* dy = n.grad.data() + r * d;
          T mean = T(0);
          for (Index j = 0; j < d; ++j) mean += xr[j];
          mean /= static_cast<T>(d);
          T var = T(0);
          for (Index j = 0; j < d; ++j) {
            const T c = xr[j] - mean;
            var += c * c;
          }
          var /= static_cast<T>(d);
          const T inv = T(1) / std::sqrt(var + eps);
          for (Index j = 0; j < d; ++j) xhat[static_cast<std::size_t>(j)] = (xr[j] - mean) * inv;
          if (pg.requires_grad)
            for (Index j = 0; j < d; ++j)
              pg.grad[static_cast<std::size_t>(j)] += dy[j] * xhat[static_cast<std::size_t>(j)];
          if (pb.requires_grad)
            for (Index j = 0; j < d; ++j) pb.grad[static_cast<std::size_t>(j)] += dy[j];
          if (px.requires_grad) {
            T mean_g = T(0), mean_gx = T(0);
            for (Index j = 0; j < d; ++j) {
              const T g = dy[j] * gv[static_cast<std::size_t>(j)];
              mean_g += g;
              mean_gx += g * xhat[static_cast<std::size_t>(j)];
            }
            mean_g /= static_cast<T>(d);
            mean_gx /= static_cast<T>(d);
            for (Index j = 0; j < d; ++j) {
              const T g = dy[j] * gv[static_cast<std::size_t>(j)];
              px.grad[static_cast<std::size_t>(r * d + j)] +=
                  (g - mean_g - xhat[static_cast<std::size_t>(j)] * mean_gx) * inv;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Masked mean cross-entropy from logits. targets/mask are per-row; mask rows
// equal to 0 contribute nothing. Mean is over mask==1 rows.
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> cross_entropy(const TensorT<T>& logits, const std::vector<Index>& targets,
                         const std::vector<std::uint8_t>& mask) {
  check_shape(logits.rank() == 2, "cross_entropy: logits must be (rows, vocab), got " +
                                      shape_str(logits.shape()));
  const Index rows = logits.dim(0);
  const Index v = logits.dim(1);
  check(static_cast<Index>(targets.size()) == rows &&
            static_cast<Index>(mask.size()) == rows,
        "cross_entropy: targets/mask length must equal logit rows");
  Index n_masked = 0;
  for (Index r = 0; r < rows; ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    ++n_masked;
    check(targets[static_cast<std::size_t>(r)] >= 0 &&
              targets[static_cast<std::size_t>(r)] < v,
          "cross_entropy: target id out of vocabulary");
  }
  check(n_masked > 0, "cross_entropy: mask selects no positions");
  const auto& lv = logits.values();
  T total = T(0);
  for (Index r = 0; r < rows; ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    const T* row = lv.data() + r * v;
    T mx = row[0];
    for (Index j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    T denom = T(0);
    for (Index j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
    const T lse = mx + std::log(denom);
    total += lse - row[targets[static_cast<std::size_t>(r)]];
  }
  const T inv = T(1) / static_cast<T>(n_masked);
  return make_op<T>(
      Shape{}, {total * inv}, "cross_entropy", {logits},
      [targets, mask, rows, v, inv](detail::Node<T>& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        const T g = n.grad[0] * inv;
        const auto& lv = p.value;
        for (Index r = 0; r < rows; ++r) {
          if (!mask[static_cast<std::size_t>(r)]) continue;
          const T* row = lv.data() + r * v;
          T mx = row[0];
          for (Index j = 1; j < v; ++j) mx = std::max(mx, row[j]);
          T denom = T(0);
          for (Index j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
          const T inv_denom = T(1) / denom;
          for (Index j = 0; j < v; ++j) {
            T sm = std::exp(row[j] - mx) * inv_denom;
            if (j == targets[static_cast<std::size_t>(r)]) sm -= T(1);
            p.grad[static_cast<std::size_t>(r * v + j)] += g * sm;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Non-differentiable helpers
// ---------------------------------------------------------------------------

// Argmax over the last axis; ties resolve to the lowest index.
template <typename T>
std::vector<Index> argmax_last(const TensorT<T>& a) {
  const Index d = a.dim(a.rank() - 1);
  const Index rows = a.numel() / d;
  std::vector<Index> out(static_cast<std::size_t>(rows));
  const auto& av = a.values();
  for (Index r = 0; r < rows; ++r) {
    const T* row = av.data() + r * d;
    Index best = 0;
    for (Index j = 1; j < d; ++j)
      if (row[j] > row[best]) best = j;
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

// Additive causal attention bias: 0 on/below the diagonal, -1e9 above.
template <typename T>
TensorT<T> causal_bias(Index len) {
  std::vector<T> d(static_cast<std::size_t>(len * len), T(0));
  for (Index i = 0; i < len; ++i)
    for (Index j = i + 1; j < len; ++j)
      d[static_cast<std::size_t>(i * len + j)] = T(-1e9);
  return TensorT<T>::from_data({len, len}, std::move(d));
}

}  // namespace vlab
