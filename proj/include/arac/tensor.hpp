#pragma once

// Dense row-major tensor with a reverse-mode differentiation tape.
//
// Every differentiable operation records a node holding the output value,
// links to its parent nodes, and a closure that maps the output gradient to
// parent-gradient contributions. backward() sweeps the recorded nodes once,
// in reverse creation order (a valid topological order, since inputs always
// exist before the op that consumes them), then adds the results into each
// node's persistent grad buffer. Grads therefore accumulate across backward
// calls until zero_grad() -- running backward twice on the same graph
// doubles every grad.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace arac {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ValueError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t outer_extent(const Shape& s, std::size_t dim) {
  std::size_t n = 1;
  for (std::size_t i = 0; i < dim; ++i) n *= s[i];
  return n;
}

inline std::size_t inner_extent(const Shape& s, std::size_t dim) {
  std::size_t n = 1;
  for (std::size_t i = dim + 1; i < s.size(); ++i) n *= s[i];
  return n;
}

namespace detail {
inline std::int64_t next_node_id() {
  static std::atomic<std::int64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

template <typename T>
class BackwardSweep;

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // persistent, allocated on first backward touch
  bool requires_grad = false;
  bool tracked = false;  // true if this node or any ancestor requires grad
  std::int64_t id = detail::next_node_id();
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(const std::vector<T>&, BackwardSweep<T>&)> backward_fn;
};

// Per-backward scratch gradients, keyed by node. Keeps intermediate
// gradients out of the persistent buffers so repeated sweeps stay additive.
template <typename T>
class BackwardSweep {
 public:
  void reserve(const TensorNode<T>* n) {
    bufs_.try_emplace(n, std::vector<T>(n->value.size(), T(0)));
  }
  // nullptr when the node is untracked (constants, inputs without grad)
  std::vector<T>* find(const TensorNode<T>* n) {
    auto it = bufs_.find(n);
    return it == bufs_.end() ? nullptr : &it->second;
  }

 private:
  std::unordered_map<const TensorNode<T>*, std::vector<T>> bufs_;
};

struct BackwardStats {
  std::size_t ops_visited = 0;
  std::size_t nodes_touched = 0;
};

template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static Tensor filled(Shape shape, T v, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->value.assign(numel(shape), v);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    n->tracked = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from_data(Shape shape, std::vector<T> data,
                          bool requires_grad = false) {
    if (numel(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    n->tracked = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v) { return from_data({}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }
  std::size_t size() const { return node_->value.size(); }
  std::int64_t id() const { return node_->id; }
  bool requires_grad() const { return node_->requires_grad; }
  bool tracked() const { return node_->tracked; }

  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::vector<T>& grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
    return node_->grad;
  }
  const std::vector<T>& grad() const {
    if (node_->grad.empty())
      throw UsageError("grad accessed before any backward pass");
    return node_->grad;
  }

  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
  }

  T item() const {
    if (node_->value.size() != 1)
      throw UsageError("item() on non-scalar tensor of shape " +
                       shape_str(node_->shape));
    return node_->value[0];
  }

  // Reverse sweep from a scalar. Each recorded op is visited exactly once,
  // after all its consumers; results are added into persistent grads.
  BackwardStats backward() {
    if (node_->value.size() != 1)
      throw UsageError("backward() requires a scalar loss, got shape " +
                       shape_str(node_->shape));
    if (!node_->tracked)
      throw UsageError("backward() on a tensor with no tracked inputs");

    // reachable tracked nodes, then reverse creation order
    std::vector<std::shared_ptr<Node>> order;
    std::unordered_map<const Node*, bool> seen;
    std::vector<std::shared_ptr<Node>> stack{node_};
    seen[node_.get()] = true;
    while (!stack.empty()) {
      auto cur = stack.back();
      stack.pop_back();
      order.push_back(cur);
      for (const auto& p : cur->parents) {
        if (!p->tracked || seen[p.get()]) continue;
        seen[p.get()] = true;
        stack.push_back(p);
      }
    }
    std::sort(order.begin(), order.end(),
              [](const auto& a, const auto& b) { return a->id > b->id; });

    BackwardSweep<T> sweep;
    for (const auto& n : order) sweep.reserve(n.get());
    (*sweep.find(node_.get()))[0] = T(1);

    BackwardStats stats;
    stats.nodes_touched = order.size();
    for (const auto& n : order) {
      if (!n->backward_fn) continue;
      n->backward_fn(*sweep.find(n.get()), sweep);
      ++stats.ops_visited;
    }
    for (const auto& n : order) {
      auto* buf = sweep.find(n.get());
      if (n->grad.empty()) n->grad.assign(n->value.size(), T(0));
      for (std::size_t i = 0; i < buf->size(); ++i) n->grad[i] += (*buf)[i];
    }
    return stats;
  }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename T>
Tensor<T> make_op(
    Shape shape, std::vector<T> value, std::vector<Tensor<T>> parents,
    std::function<void(const std::vector<T>&, BackwardSweep<T>&)> fn) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  for (auto& p : parents) {
    n->tracked = n->tracked || p.node()->tracked;
    n->parents.push_back(p.node_ptr());
  }
  if (n->tracked) n->backward_fn = std::move(fn);
  return Tensor<T>(std::move(n));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                        const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------- elementwise ----------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto* an = a.node();
  auto* bn = b.node();
  return detail::make_op<T>(
      a.shape(), std::move(out), {a, b},
      [an, bn](const std::vector<T>& g, BackwardSweep<T>& sw) {
        if (auto* ga = sw.find(an))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        if (auto* gb = sw.find(bn))
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto* an = a.node();
  auto* bn = b.node();
  return detail::make_op<T>(
      a.shape(), std::move(out), {a, b},
      [an, bn](const std::vector<T>& g, BackwardSweep<T>& sw) {
        if (auto* ga = sw.find(an))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        if (auto* gb = sw.find(bn))
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto* an = a.node();
  auto* bn = b.node();
  return detail::make_op<T>(
      a.shape(), std::move(out), {a, b},
      [an, bn](const std::vector<T>& g, BackwardSweep<T>& sw) {
        if (auto* ga = sw.find(an)) {
          const auto& bvv = bn->value;
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bvv[i];
        }
        if (auto* gb = sw.find(bn)) {
          const auto& avv = an->value;
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * avv[i];
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> out(a.size());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  auto* an = a.node();
  return detail::make_op<T>(
      a.shape(), std::move(out), {a},
      [an, c](const std::vector<T>& g, BackwardSweep<T>& sw) {
        if (auto* ga = sw.find(an))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * c;
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = av[i] > T(0) ? av[i] : T(0);
  auto* an = a.node();
  return detail::make_op<T>(
      a.shape(), std::move(out), {a},
      [an](const std::vector<T>& g, BackwardSweep<T>& sw) {
        if (auto* ga = sw.find(an)) {
          const auto& av = an->value;
          for (std::size_t i = 0; i < g.size(); ++i)
            if (av[i] > T(0)) (*ga)[i] += g[i];
        }
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = av[i];
    if (x >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-x));
    } else {
      const T e = std::exp(x);
      out[i] = e / (T(1) + e);
    }
  }
  auto* an = a.node();
  // capture the output values for the derivative s(1-s)
  auto res = detail::make_op<T>(a.shape(), std::move(out), {a}, nullptr);
  if (res.tracked()) {
    auto* rn = res.node();
    rn->backward_fn = [an, rn](const std::vector<T>& g, BackwardSweep<T>& sw) {
      if (auto* ga = sw.find(an)) {
        const auto& s = rn->value;
        for (std::size_t i = 0; i < g.size(); ++i)
          (*ga)[i] += g[i] * s[i] * (T(1) - s[i]);
      }
    };
  }
  return res;
}

// ---------------- structural ----------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
  if (numel(new_shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(new_shape));
  auto* an = a.node();
  return detail::make_op<T>(
      std::move(new_shape), a.values(), {a},
      [an](const std::vector<T>& g, BackwardSweep<T>& sw) {
        if (auto* ga = sw.find(an))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      });
}

// extent at `dim` must be 1; repeats it n times
template <typename T>
Tensor<T> expand_dim(const Tensor<T>& a, std::size_t dim, std::size_t n) {
  if (dim >= a.rank() || a.dim(dim) != 1)
    throw ShapeError("expand_dim: dim " + std::to_string(dim) +
                     " of shape " + shape_str(a.shape()) + " is not 1");
  const std::size_t outer = outer_extent(a.shape(), dim);
  const std::size_t inner = inner_extent(a.shape(), dim);
  Shape os = a.shape();
  os[dim] = n;
  std::vector<T> out(outer * n * inner);
  const auto& av = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t i = 0; i < inner; ++i)
        out[(o * n + r) * inner + i] = av[o * inner + i];
  auto* an = a.node();
  return detail::make_op<T>(
      std::move(os), std::move(out), {a},
      [an, outer, n, inner](const std::vector<T>& g, BackwardSweep<T>& sw) {
        if (auto* ga = sw.find(an)) {
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t r = 0; r < n; ++r)
              for (std::size_t i = 0; i < inner; ++i)
                (*ga)[o * inner + i] += g[(o * n + r) * inner + i];
        }
      });
}

template <typename T>
Tensor<T> slice_dim(const Tensor<T>& a, std::size_t dim, std::size_t lo,
                    std::size_t hi) {
  if (dim >= a.rank() || lo >= hi || hi > a.dim(dim))
    throw ShapeError("slice_dim: range [" + std::to_string(lo) + "," +
                     std::to_string(hi) + ") invalid for dim " +
                     std::to_string(dim) + " of " + shape_str(a.shape()));
  const std::size_t outer = outer_extent(a.shape(), dim);
  const std::size_t inner = inner_extent(a.shape(), dim);
  const std::size_t ext = a.dim(dim);
  const std::size_t w = hi - lo;
  Shape os = a.shape();
  os[dim] = w;
  std::vector<T> out(outer * w * inner);
  const auto& av = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t r = 0; r < w; ++r)
      for (std::size_t i = 0; i < inner; ++i)
        out[(o * w + r) * inner + i] = av[(o * ext + lo + r) * inner + i];
  auto* an = a.node();
  return detail::make_op<T>(
      std::move(os), std::move(out), {a},
      [an, outer, inner, ext, lo, w](const std::vector<T>& g,
                                     BackwardSweep<T>& sw) {
        if (auto* ga = sw.find(an)) {
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t r = 0; r < w; ++r)
              for (std::size_t i = 0; i < inner; ++i)
                (*ga)[(o * ext + lo + r) * inner + i] +=
                    g[(o * w + r) * inner + i];
        }
      });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t dim) {
  if (parts.empty()) throw UsageError("concat: empty input list");
  const Shape& s0 = parts[0].shape();
  if (dim >= s0.size())
    throw ShapeError("concat: dim " + std::to_string(dim) +
                     " out of range for " + shape_str(s0));
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != s0.size())
      throw ShapeError("concat: rank mismatch " + shape_str(p.shape()) +
                       " vs " + shape_str(s0));
    for (std::size_t d = 0; d < s0.size(); ++d)
      if (d != dim && p.dim(d) != s0[d])
        throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) +
                         " vs " + shape_str(s0));
    total += p.dim(dim);
  }
  Shape os = s0;
  os[dim] = total;
  const std::size_t outer = outer_extent(os, dim);
  const std::size_t inner = inner_extent(os, dim);
  std::vector<T> out(numel(os));
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t ext = p.dim(dim);
    const auto& pv = p.values();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t r = 0; r < ext; ++r)
        for (std::size_t i = 0; i < inner; ++i)
          out[(o * total + off + r) * inner + i] = pv[(o * ext + r) * inner + i];
    off += ext;
  }
  std::vector<TensorNode<T>*> pnodes;
  std::vector<std::size_t> exts;
  for (const auto& p : parts) {
    pnodes.push_back(p.node());
    exts.push_back(p.dim(dim));
  }
  return detail::make_op<T>(
      std::move(os), std::move(out), parts,
      [pnodes, exts, outer, inner, total](const std::vector<T>& g,
                                          BackwardSweep<T>& sw) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < pnodes.size(); ++k) {
          const std::size_t ext = exts[k];
          if (auto* gp = sw.find(pnodes[k])) {
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t r = 0; r < ext; ++r)
                for (std::size_t i = 0; i < inner; ++i)
                  (*gp)[(o * ext + r) * inner + i] +=
                      g[(o * total + off + r) * inner + i];
          }
          off += ext;
        }
      });
}

// ---------------- reductions ----------------

template <typename T>
Tensor<T> sum_over_dim(const Tensor<T>& a, std::size_t dim,
                       bool keepdim = false) {
  if (dim >= a.rank())
    throw ShapeError("sum_over_dim: dim " + std::to_string(dim) +
                     " out of range for " + shape_str(a.shape()));
  const std::size_t outer = outer_extent(a.shape(), dim);
  const std::size_t inner = inner_extent(a.shape(), dim);
  const std::size_t ext = a.dim(dim);
  Shape os = a.shape();
  if (keepdim)
    os[dim] = 1;
  else
    os.erase(os.begin() + static_cast<std::ptrdiff_t>(dim));
  std::vector<T> out(outer * inner, T(0));
  const auto& av = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t r = 0; r < ext; ++r)
      for (std::size_t i = 0; i < inner; ++i)
        out[o * inner + i] += av[(o * ext + r) * inner + i];
  auto* an = a.node();
  return detail::make_op<T>(
      std::move(os), std::move(out), {a},
      [an, outer, inner, ext](const std::vector<T>& g, BackwardSweep<T>& sw) {
        if (auto* ga = sw.find(an)) {
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t r = 0; r < ext; ++r)
              for (std::size_t i = 0; i < inner; ++i)
                (*ga)[(o * ext + r) * inner + i] += g[o * inner + i];
        }
      });
}

template <typename T>
Tensor<T> mean_over_dim(const Tensor<T>& a, std::size_t dim,
                        bool keepdim = false) {
  if (dim >= a.rank())
    throw ShapeError("mean_over_dim: dim " + std::to_string(dim) +
                     " out of range for " + shape_str(a.shape()));
  const std::size_t outer = outer_extent(a.shape(), dim);
  const std::size_t inner = inner_extent(a.shape(), dim);
  const std::size_t ext = a.dim(dim);
  Shape os = a.shape();
  if (keepdim)
    os[dim] = 1;
  else
    os.erase(os.begin() + static_cast<std::ptrdiff_t>(dim));
  std::vector<T> out(outer * inner, T(0));
  const auto& av = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t r = 0; r < ext; ++r)
      for (std::size_t i = 0; i < inner; ++i)
        out[o * inner + i] += av[(o * ext + r) * inner + i];
  const T inv = T(1) / static_cast<T>(ext);
  for (auto& v : out) v *= inv;
  auto* an = a.node();
  return detail::make_op<T>(
      std::move(os), std::move(out), {a},
      [an, outer, inner, ext, inv](const std::vector<T>& g,
                                   BackwardSweep<T>& sw) {
        if (auto* ga = sw.find(an)) {
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t r = 0; r < ext; ++r)
              for (std::size_t i = 0; i < inner; ++i)
                (*ga)[(o * ext + r) * inner + i] += g[o * inner + i] * inv;
        }
      });
}

}  // namespace arac
