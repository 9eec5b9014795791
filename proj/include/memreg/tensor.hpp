#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "memreg/rng.hpp"

namespace memreg {

using Shape = std::vector<std::size_t>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense n-dimensional array with reverse-mode autodiff.
///
/// A Tensor is a cheap handle onto a shared node. Ops on tensors that
/// require gradients record the node graph as they run; backward() on a
/// scalar walks it in reverse. Gradients accumulate across backward
/// calls until zero_grad(). The tape lives in the nodes themselves --
/// there is no global state, so independent graphs never interact.
template <typename T>
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;       // persistent, accumulated
    std::vector<T> pass_grad;  // scratch during one backward pass
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // distributes pass_grad into parents' pass_grad
  };

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return from_data(std::move(shape), {});
  }

  static Tensor full(Shape shape, T value) {
    Tensor t;
    t.n_ = std::make_shared<Node>();
    t.n_->data.assign(shape_numel(shape), value);
    t.n_->shape = std::move(shape);
    return t;
  }

  static Tensor scalar(T value) { return full({}, value); }

  static Tensor from_data(Shape shape, std::vector<T> data) {
    std::size_t n = shape_numel(shape);
    if (data.empty()) data.assign(n, T(0));
    if (data.size() != n)
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(shape);
    t.n_->data = std::move(data);
    return t;
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  std::size_t ndim() const { return n_->shape.size(); }
  std::size_t dim(std::size_t i) const { return n_->shape[i]; }
  std::size_t numel() const { return n_->data.size(); }

  std::span<T> data() { return {n_->data.data(), n_->data.size()}; }
  std::span<const T> data() const { return {n_->data.data(), n_->data.size()}; }

  T item() const {
    if (numel() != 1)
      throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
    return n_->data[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    n_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !n_->grad.empty(); }
  std::span<const T> grad() const { return {n_->grad.data(), n_->grad.size()}; }
  std::span<T> grad_mut() { return {n_->grad.data(), n_->grad.size()}; }

  void zero_grad() { n_->grad.assign(n_->data.size(), T(0)); }

  /// Value snapshot without graph history.
  Tensor detach() const {
    Tensor t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = n_->shape;
    t.n_->data = n_->data;
    return t;
  }

  /// Reverse-mode pass from this scalar. Every reachable requires_grad
  /// tensor has the pass's gradient added into its .grad.
  void backward() const {
    if (numel() != 1)
      throw std::invalid_argument("backward() requires a scalar loss, got shape " +
                                  shape_str(shape()));
    if (!n_->requires_grad) return;

    // Topological order: post-order DFS over parent edges puts producers
    // before consumers; we then walk it in reverse.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }

    n_->pass_grad.assign(1, T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (node->pass_grad.empty()) continue;  // unreached branch
      if (node->backprop) node->backprop(*node);
    }
    // Fold pass gradients into persistent grads, then release scratch.
    for (Node* node : order) {
      if (node->pass_grad.empty()) continue;
      if (node->grad.empty()) node->grad.assign(node->data.size(), T(0));
      for (std::size_t i = 0; i < node->grad.size(); ++i) node->grad[i] += node->pass_grad[i];
      node->pass_grad.clear();
      node->pass_grad.shrink_to_fit();
    }
  }

  // --- graph construction helpers (used by the op implementations) ---

  static Tensor make_op(Shape shape, std::vector<T> data, std::vector<Tensor> inputs,
                        std::function<void(Node&)> backprop) {
    Tensor t = from_data(std::move(shape), std::move(data));
    bool needs = false;
    for (const auto& in : inputs) needs = needs || (in.defined() && in.n_->requires_grad);
    if (needs) {
      t.n_->requires_grad = true;
      for (auto& in : inputs)
        if (in.defined()) t.n_->parents.push_back(in.n_);
      t.n_->backprop = std::move(backprop);
    }
    return t;
  }

  Node* node() const { return n_.get(); }

  static std::span<T> reach(Node& n) {
    if (n.pass_grad.empty()) n.pass_grad.assign(n.data.size(), T(0));
    return {n.pass_grad.data(), n.pass_grad.size()};
  }

 private:
  std::shared_ptr<Node> n_;
};

namespace detail {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

// Decompose a shape around `axis` into (outer, extent, inner) so that
// flat index = (o * extent + k) * inner + i.
inline void axis_split(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& extent,
                       std::size_t& inner) {
  if (axis >= s.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  auto* an = a.node();
  auto* bn = b.node();
  bool ag = a.requires_grad(), bg = b.requires_grad();
  return Tensor<T>::make_op(a.shape(), std::move(out), {a, b},
                            [an, bn, ag, bg](typename Tensor<T>::Node& self) {
                              auto g = self.pass_grad;
                              if (ag) {
                                auto pa = Tensor<T>::reach(*an);
                                for (std::size_t i = 0; i < g.size(); ++i) pa[i] += g[i];
                              }
                              if (bg) {
                                auto pb = Tensor<T>::reach(*bn);
                                for (std::size_t i = 0; i < g.size(); ++i) pb[i] += g[i];
                              }
                            });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
  auto* an = a.node();
  auto* bn = b.node();
  bool ag = a.requires_grad(), bg = b.requires_grad();
  return Tensor<T>::make_op(a.shape(), std::move(out), {a, b},
                            [an, bn, ag, bg](typename Tensor<T>::Node& self) {
                              auto g = self.pass_grad;
                              if (ag) {
                                auto pa = Tensor<T>::reach(*an);
                                for (std::size_t i = 0; i < g.size(); ++i) pa[i] += g[i];
                              }
                              if (bg) {
                                auto pb = Tensor<T>::reach(*bn);
                                for (std::size_t i = 0; i < g.size(); ++i) pb[i] -= g[i];
                              }
                            });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  auto* an = a.node();
  auto* bn = b.node();
  bool ag = a.requires_grad(), bg = b.requires_grad();
  return Tensor<T>::make_op(a.shape(), std::move(out), {a, b},
                            [an, bn, ag, bg](typename Tensor<T>::Node& self) {
                              auto g = self.pass_grad;
                              if (ag) {
                                auto pa = Tensor<T>::reach(*an);
                                for (std::size_t i = 0; i < g.size(); ++i)
                                  pa[i] += g[i] * bn->data[i];
                              }
                              if (bg) {
                                auto pb = Tensor<T>::reach(*bn);
                                for (std::size_t i = 0; i < g.size(); ++i)
                                  pb[i] += g[i] * an->data[i];
                              }
                            });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  auto da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + s;
  auto* an = a.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {a},
                            [an](typename Tensor<T>::Node& self) {
                              auto pa = Tensor<T>::reach(*an);
                              for (std::size_t i = 0; i < self.pass_grad.size(); ++i)
                                pa[i] += self.pass_grad[i];
                            });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  auto da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * s;
  auto* an = a.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {a},
                            [an, s](typename Tensor<T>::Node& self) {
                              auto pa = Tensor<T>::reach(*an);
                              for (std::size_t i = 0; i < self.pass_grad.size(); ++i)
                                pa[i] += self.pass_grad[i] * s;
                            });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  auto da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] > T(0) ? da[i] : T(0);
  auto* an = a.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {a},
                            [an](typename Tensor<T>::Node& self) {
                              auto pa = Tensor<T>::reach(*an);
                              for (std::size_t i = 0; i < self.pass_grad.size(); ++i)
                                if (an->data[i] > T(0)) pa[i] += self.pass_grad[i];
                            });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  auto da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-da[i]));
  auto* an = a.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {a},
                            [an](typename Tensor<T>::Node& self) {
                              auto pa = Tensor<T>::reach(*an);
                              for (std::size_t i = 0; i < self.pass_grad.size(); ++i) {
                                T y = self.data[i];
                                pa[i] += self.pass_grad[i] * y * (T(1) - y);
                              }
                            });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  auto da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(da[i]);
  auto* an = a.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {a},
                            [an](typename Tensor<T>::Node& self) {
                              auto pa = Tensor<T>::reach(*an);
                              for (std::size_t i = 0; i < self.pass_grad.size(); ++i)
                                pa[i] += self.pass_grad[i] / an->data[i];
                            });
}

/// max(a, lo) elementwise; gradient is zero where the floor is active.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& a, T lo) {
  std::vector<T> out(a.numel());
  auto da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] > lo ? da[i] : lo;
  auto* an = a.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {a},
                            [an, lo](typename Tensor<T>::Node& self) {
                              auto pa = Tensor<T>::reach(*an);
                              for (std::size_t i = 0; i < self.pass_grad.size(); ++i)
                                if (an->data[i] > lo) pa[i] += self.pass_grad[i];
                            });
}

/// Inverted dropout: keeps each entry with probability 1-rate and scales
/// survivors by 1/(1-rate), so inference (train=false) is the identity.
template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double rate, bool train, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::invalid_argument("dropout rate must be in [0,1), got " + std::to_string(rate));
  if (!train || rate == 0.0) {
    // Identity with pass-through gradient.
    auto* an = a.node();
    return Tensor<T>::make_op(a.shape(), std::vector<T>(a.data().begin(), a.data().end()), {a},
                              [an](typename Tensor<T>::Node& self) {
                                auto pa = Tensor<T>::reach(*an);
                                for (std::size_t i = 0; i < self.pass_grad.size(); ++i)
                                  pa[i] += self.pass_grad[i];
                              });
  }
  T scale = T(1) / T(1.0 - rate);
  auto mask = std::make_shared<std::vector<std::uint8_t>>(a.numel());
  std::vector<T> out(a.numel());
  auto da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    bool keep = rng.uniform() >= rate;
    (*mask)[i] = keep;
    out[i] = keep ? da[i] * scale : T(0);
  }
  auto* an = a.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {a},
                            [an, mask, scale](typename Tensor<T>::Node& self) {
                              auto pa = Tensor<T>::reach(*an);
                              for (std::size_t i = 0; i < self.pass_grad.size(); ++i)
                                if ((*mask)[i]) pa[i] += self.pass_grad[i] * scale;
                            });
}

// ---------------------------------------------------------------------------
// Axis ops: softmax / log_softmax / concat
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  std::size_t outer, extent, inner;
  detail::axis_split(a.shape(), axis, outer, extent, inner);
  std::vector<T> out(a.numel());
  auto da = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      std::size_t base = o * extent * inner + i;
      T mx = da[base];
      for (std::size_t k = 1; k < extent; ++k) mx = std::max(mx, da[base + k * inner]);
      T denom = T(0);
      for (std::size_t k = 0; k < extent; ++k) {
        T e = std::exp(da[base + k * inner] - mx);
        out[base + k * inner] = e;
        denom += e;
      }
      T inv = T(1) / denom;
      for (std::size_t k = 0; k < extent; ++k) out[base + k * inner] *= inv;
    }
  auto* an = a.node();
  return Tensor<T>::make_op(
      a.shape(), std::move(out), {a},
      [an, outer, extent, inner](typename Tensor<T>::Node& self) {
        auto pa = Tensor<T>::reach(*an);
        const auto& y = self.data;
        const auto& g = self.pass_grad;
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < inner; ++i) {
            std::size_t base = o * extent * inner + i;
            T dot = T(0);
            for (std::size_t k = 0; k < extent; ++k)
              dot += g[base + k * inner] * y[base + k * inner];
            for (std::size_t k = 0; k < extent; ++k) {
              std::size_t idx = base + k * inner;
              pa[idx] += y[idx] * (g[idx] - dot);
            }
          }
      });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a, std::size_t axis) {
  std::size_t outer, extent, inner;
  detail::axis_split(a.shape(), axis, outer, extent, inner);
  std::vector<T> out(a.numel());
  auto da = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      std::size_t base = o * extent * inner + i;
      T mx = da[base];
      for (std::size_t k = 1; k < extent; ++k) mx = std::max(mx, da[base + k * inner]);
      T denom = T(0);
      for (std::size_t k = 0; k < extent; ++k) denom += std::exp(da[base + k * inner] - mx);
      T lse = mx + std::log(denom);
      for (std::size_t k = 0; k < extent; ++k) out[base + k * inner] = da[base + k * inner] - lse;
    }
  auto* an = a.node();
  return Tensor<T>::make_op(
      a.shape(), std::move(out), {a},
      [an, outer, extent, inner](typename Tensor<T>::Node& self) {
        auto pa = Tensor<T>::reach(*an);
        const auto& y = self.data;
        const auto& g = self.pass_grad;
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < inner; ++i) {
            std::size_t base = o * extent * inner + i;
            T gsum = T(0);
            for (std::size_t k = 0; k < extent; ++k) gsum += g[base + k * inner];
            for (std::size_t k = 0; k < extent; ++k) {
              std::size_t idx = base + k * inner;
              pa[idx] += g[idx] - std::exp(y[idx]) * gsum;
            }
          }
      });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  std::size_t outer, extent0, inner;
  detail::axis_split(s0, axis, outer, extent0, inner);
  std::size_t total_extent = 0;
  for (const auto& p : parts) {
    if (p.ndim() != s0.size())
      throw ShapeError("concat: rank mismatch " + shape_str(p.shape()) + " vs " + shape_str(s0));
    for (std::size_t d = 0; d < s0.size(); ++d)
      if (d != axis && p.shape()[d] != s0[d])
        throw ShapeError("concat: shape mismatch on non-axis dim " + shape_str(p.shape()) +
                         " vs " + shape_str(s0));
    total_extent += p.shape()[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = total_extent;
  std::vector<T> out(outer * total_extent * inner);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::size_t ext = p.shape()[axis];
    auto dp = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < ext; ++k)
        std::copy_n(dp.data() + (o * ext + k) * inner, inner,
                    out.data() + (o * total_extent + off + k) * inner);
    off += ext;
  }
  std::vector<std::size_t> extents;
  std::vector<typename Tensor<T>::Node*> nodes;
  std::vector<bool> grads;
  for (const auto& p : parts) {
    extents.push_back(p.shape()[axis]);
    nodes.push_back(p.node());
    grads.push_back(p.requires_grad());
  }
  return Tensor<T>::make_op(
      out_shape, std::move(out), parts,
      [outer, inner, total_extent, extents, nodes, grads](typename Tensor<T>::Node& self) {
        const auto& g = self.pass_grad;
        std::size_t off = 0;
        for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
          std::size_t ext = extents[pi];
          if (grads[pi]) {
            auto pa = Tensor<T>::reach(*nodes[pi]);
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t k = 0; k < ext; ++k) {
                const T* src = g.data() + (o * total_extent + off + k) * inner;
                T* dst = pa.data() + (o * ext + k) * inner;
                for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
              }
          }
          off += ext;
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  auto* an = a.node();
  return Tensor<T>::make_op({}, {acc}, {a},
                            [an](typename Tensor<T>::Node& self) {
                              auto pa = Tensor<T>::reach(*an);
                              T g = self.pass_grad[0];
                              for (auto& v : pa) v += g;
                            });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw std::invalid_argument("mean of empty tensor");
  T acc = T(0);
  for (T v : a.data()) acc += v;
  T inv = T(1) / T(a.numel());
  auto* an = a.node();
  return Tensor<T>::make_op({}, {acc * inv}, {a},
                            [an, inv](typename Tensor<T>::Node& self) {
                              auto pa = Tensor<T>::reach(*an);
                              T g = self.pass_grad[0] * inv;
                              for (auto& v : pa) v += g;
                            });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw ShapeError("matmul expects 2-d operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  std::vector<T> out(m * n, T(0));
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      T av = da[i * k + p];
      const T* brow = db.data() + p * n;
      T* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  auto* an = a.node();
  auto* bn = b.node();
  bool ag = a.requires_grad(), bg = b.requires_grad();
  return Tensor<T>::make_op(
      {m, n}, std::move(out), {a, b},
      [an, bn, ag, bg, m, k, n](typename Tensor<T>::Node& self) {
        const auto& g = self.pass_grad;
        if (ag) {
          auto pa = Tensor<T>::reach(*an);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              T acc = T(0);
              const T* grow = g.data() + i * n;
              const T* brow = bn->data.data() + p * n;
              for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              pa[i * k + p] += acc;
            }
        }
        if (bg) {
          auto pb = Tensor<T>::reach(*bn);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              T av = an->data[i * k + p];
              const T* grow = g.data() + i * n;
              T* brow = pb.data() + p * n;
              for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
            }
        }
      });
}

// ---------------------------------------------------------------------------
// conv2d / upsample
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
std::vector<T> pad2d(const T* src, std::size_t c, std::size_t h, std::size_t w, std::size_t p) {
  std::size_t hp = h + 2 * p, wp = w + 2 * p;
  std::vector<T> out(c * hp * wp, T(0));
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(src + (ch * h + y) * w, w, out.data() + (ch * hp + y + p) * wp + p);
  return out;
}

}  // namespace detail

/// 2-d convolution (cross-correlation) on [C_in,H,W] with kernel
/// [C_out,C_in,kh,kw], optional bias [C_out], zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad) {
  if (input.ndim() != 3)
    throw ShapeError("conv2d input must be [C,H,W], got " + shape_str(input.shape()));
  if (weight.ndim() != 4)
    throw ShapeError("conv2d weight must be [Cout,Cin,kh,kw], got " + shape_str(weight.shape()));
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be >= 1");
  std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  std::size_t cout = weight.dim(0), kcin = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  if (cin != kcin)
    throw ShapeError("conv2d: input channels " + std::to_string(cin) + " != kernel channels " +
                     std::to_string(kcin));
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != cout))
    throw ShapeError("conv2d: bias must be [Cout], got " + shape_str(bias.shape()));
  std::size_t hp = h + 2 * pad, wp = w + 2 * pad;
  if (hp < kh || wp < kw)
    throw ShapeError("conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input");
  std::size_t ho = (hp - kh) / stride + 1;
  std::size_t wo = (wp - kw) / stride + 1;

  // Work on a zero-padded copy so the hot loops have no bounds checks.
  std::shared_ptr<std::vector<T>> padded;
  const T* in_ptr;
  if (pad > 0) {
    padded = std::make_shared<std::vector<T>>(detail::pad2d(input.data().data(), cin, h, w, pad));
    in_ptr = padded->data();
  } else {
    in_ptr = input.data().data();
  }

  std::vector<T> out(cout * ho * wo, T(0));
  const T* wt = weight.data().data();
  for (std::size_t oc = 0; oc < cout; ++oc) {
    T* oplane = out.data() + oc * ho * wo;
    if (bias.defined()) {
      T b = bias.data()[oc];
      for (std::size_t i = 0; i < ho * wo; ++i) oplane[i] = b;
    }
    for (std::size_t ic = 0; ic < cin; ++ic) {
      const T* iplane = in_ptr + ic * hp * wp;
      const T* kbase = wt + ((oc * cin + ic) * kh) * kw;
      for (std::size_t ky = 0; ky < kh; ++ky)
        for (std::size_t kx = 0; kx < kw; ++kx) {
          T kv = kbase[ky * kw + kx];
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const T* irow = iplane + (oy * stride + ky) * wp + kx;
            T* orow = oplane + oy * wo;
            if (stride == 1) {
              for (std::size_t ox = 0; ox < wo; ++ox) orow[ox] += kv * irow[ox];
            } else {
              for (std::size_t ox = 0; ox < wo; ++ox) orow[ox] += kv * irow[ox * stride];
            }
          }
        }
    }
  }

  auto* in_n = input.node();
  auto* w_n = weight.node();
  auto* b_n = bias.defined() ? bias.node() : nullptr;
  bool ig = input.requires_grad(), wg = weight.requires_grad(),
       bg = bias.defined() && bias.requires_grad();
  std::vector<Tensor<T>> inputs = {input, weight};
  if (bias.defined()) inputs.push_back(bias);

  // NB: `padded` must be named in the capture list -- the lambda reads it
  // only through in_ptr, so an implicit [=] would let the buffer die.
  return Tensor<T>::make_op(
      {cout, ho, wo}, std::move(out), std::move(inputs),
      [=, padded = padded](typename Tensor<T>::Node& self) {
        const auto& g = self.pass_grad;
        if (bg) {
          auto pb = Tensor<T>::reach(*b_n);
          for (std::size_t oc = 0; oc < cout; ++oc) {
            T acc = T(0);
            const T* gplane = g.data() + oc * ho * wo;
            for (std::size_t i = 0; i < ho * wo; ++i) acc += gplane[i];
            pb[oc] += acc;
          }
        }
        if (wg) {
          auto pw = Tensor<T>::reach(*w_n);
          for (std::size_t oc = 0; oc < cout; ++oc) {
            const T* gplane = g.data() + oc * ho * wo;
            for (std::size_t ic = 0; ic < cin; ++ic) {
              const T* iplane = in_ptr + ic * hp * wp;
              T* kbase = pw.data() + ((oc * cin + ic) * kh) * kw;
              for (std::size_t ky = 0; ky < kh; ++ky)
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  T acc = T(0);
                  for (std::size_t oy = 0; oy < ho; ++oy) {
                    const T* irow = iplane + (oy * stride + ky) * wp + kx;
                    const T* grow = gplane + oy * wo;
                    if (stride == 1) {
                      for (std::size_t ox = 0; ox < wo; ++ox) acc += grow[ox] * irow[ox];
                    } else {
                      for (std::size_t ox = 0; ox < wo; ++ox) acc += grow[ox] * irow[ox * stride];
                    }
                  }
                  kbase[ky * kw + kx] += acc;
                }
            }
          }
        }
        if (ig) {
          // Accumulate into a padded scratch, then fold the interior.
          std::vector<T> dpad(cin * hp * wp, T(0));
          for (std::size_t oc = 0; oc < cout; ++oc) {
            const T* gplane = g.data() + oc * ho * wo;
            for (std::size_t ic = 0; ic < cin; ++ic) {
              T* dplane = dpad.data() + ic * hp * wp;
              const T* kbase = w_n->data.data() + ((oc * cin + ic) * kh) * kw;
              for (std::size_t ky = 0; ky < kh; ++ky)
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  T kv = kbase[ky * kw + kx];
                  for (std::size_t oy = 0; oy < ho; ++oy) {
                    T* drow = dplane + (oy * stride + ky) * wp + kx;
                    const T* grow = gplane + oy * wo;
                    if (stride == 1) {
                      for (std::size_t ox = 0; ox < wo; ++ox) drow[ox] += kv * grow[ox];
                    } else {
                      for (std::size_t ox = 0; ox < wo; ++ox) drow[ox * stride] += kv * grow[ox];
                    }
                  }
                }
            }
          }
          auto pi = Tensor<T>::reach(*in_n);
          for (std::size_t ic = 0; ic < cin; ++ic)
            for (std::size_t y = 0; y < h; ++y) {
              const T* src = dpad.data() + (ic * hp + y + pad) * wp + pad;
              T* dst = pi.data() + (ic * h + y) * w;
              for (std::size_t x = 0; x < w; ++x) dst[x] += src[x];
            }
        }
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride,
                 std::size_t pad) {
  return conv2d(input, weight, Tensor<T>{}, stride, pad);
}

/// Nearest-neighbor upsample of [C,H,W] by an integer factor.
template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& a, std::size_t factor) {
  if (a.ndim() != 3)
    throw ShapeError("upsample_nearest expects [C,H,W], got " + shape_str(a.shape()));
  if (factor == 0) throw std::invalid_argument("upsample factor must be >= 1");
  std::size_t c = a.dim(0), h = a.dim(1), w = a.dim(2);
  std::size_t ho = h * factor, wo = w * factor;
  std::vector<T> out(c * ho * wo);
  auto da = a.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < ho; ++y) {
      const T* srow = da.data() + (ch * h + y / factor) * w;
      T* drow = out.data() + (ch * ho + y) * wo;
      for (std::size_t x = 0; x < wo; ++x) drow[x] = srow[x / factor];
    }
  auto* an = a.node();
  return Tensor<T>::make_op(
      {c, ho, wo}, std::move(out), {a},
      [an, c, h, w, factor, ho, wo](typename Tensor<T>::Node& self) {
        auto pa = Tensor<T>::reach(*an);
        const auto& g = self.pass_grad;
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t y = 0; y < ho; ++y) {
            const T* grow = g.data() + (ch * ho + y) * wo;
            T* drow = pa.data() + (ch * h + y / factor) * w;
            for (std::size_t x = 0; x < wo; ++x) drow[x / factor] += grow[x];
          }
      });
}

// Convenience operators.
template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace memreg
