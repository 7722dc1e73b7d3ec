#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "apn/rng.hpp"

// Dense row-major tensor with reverse-mode autodiff. Values are immutable
// after an op constructs them; only gradient buffers mutate. Gradients
// accumulate across backward() calls until zero_grad() is invoked.

namespace apn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

namespace detail {

inline void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

// Row-major strides.
inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (int i = int(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      throw std::invalid_argument(std::string(op) + ": shapes not broadcastable " + shape_str(a) +
                                  " vs " + shape_str(b));
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Strides of `shape` viewed inside broadcast result `out` (0 on expanded dims).
inline std::vector<std::size_t> broadcast_strides(const Shape& shape, const Shape& out) {
  std::vector<std::size_t> own = strides_of(shape);
  std::vector<std::size_t> st(out.size(), 0);
  const std::size_t off = out.size() - shape.size();
  for (std::size_t i = 0; i < shape.size(); ++i)
    st[off + i] = (shape[i] == 1 && out[off + i] != 1) ? 0 : own[i];
  return st;
}

// Odometer walk over `out`; yields (flat_out, off_a, off_b).
template <class F>
inline void for_each_pair(const Shape& out, const std::vector<std::size_t>& sa,
                          const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t n = shape_numel(out);
  const std::size_t r = out.size();
  if (r == 0) {
    if (n) f(std::size_t(0), std::size_t(0), std::size_t(0));
    return;
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    f(flat, oa, ob);
    for (int d = int(r) - 1; d >= 0; --d) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on demand, same length as value
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;  // pushes this->grad into parents

  std::size_t size() const { return value.size(); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <class T>
class Tensor {
public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(const Shape& s) { return full(s, T(0)); }
  static Tensor ones(const Shape& s) { return full(s, T(1)); }

  static Tensor full(const Shape& s, T v) {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = s;
    n->value.assign(shape_numel(s), v);
    return Tensor(std::move(n));
  }

  static Tensor from_data(const Shape& s, std::vector<T> data) {
    detail::check(shape_numel(s) == data.size(),
                  "tensor: shape " + shape_str(s) + " does not match buffer length " +
                      std::to_string(data.size()));
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = s;
    n->value = std::move(data);
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v) { return from_data({}, {v}); }

  static Tensor uniform(const Shape& s, Rng& rng, T lo, T hi) {
    std::vector<T> d(shape_numel(s));
    for (auto& x : d) x = T(rng.uniform(double(lo), double(hi)));
    return from_data(s, std::move(d));
  }

  static Tensor normal(const Shape& s, Rng& rng, T mean = T(0), T stddev = T(1)) {
    std::vector<T> d(shape_numel(s));
    for (auto& x : d) x = mean + stddev * T(rng.normal());
    return from_data(s, std::move(d));
  }

  // Marks a leaf as trainable. Only leaves can request gradients directly.
  Tensor& set_requires_grad(bool on = true) {
    detail::check(node_ != nullptr, "set_requires_grad on empty tensor");
    detail::check(node_->parents.empty(), "set_requires_grad: only valid on leaf tensors");
    node_->requires_grad = on;
    return *this;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::string& op() const { return node_->op; }

  const std::vector<T>& value() const { return node_->value; }
  const std::vector<T>& grad() const {
    detail::check(node_->grad.size() == node_->value.size(),
                  "grad: no gradient present (run backward first)");
    return node_->grad;
  }
  bool has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }

  void zero_grad() {
    if (node_) node_->grad.assign(node_->value.size(), T(0));
  }

  T item() const {
    detail::check(node_ && node_->value.size() == 1,
                  "item: tensor is not a scalar, shape " + (node_ ? shape_str(node_->shape) : "()"));
    return node_->value[0];
  }

  T at(const std::vector<std::size_t>& idx) const {
    detail::check(idx.size() == rank(), "at: index rank mismatch");
    auto st = detail::strides_of(shape());
    std::size_t off = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      detail::check(idx[i] < shape()[i], "at: index out of range");
      off += idx[i] * st[i];
    }
    return node_->value[off];
  }

  // Copy of the values with no graph attached.
  Tensor detach() const {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = node_->shape;
    n->value = node_->value;
    return Tensor(std::move(n));
  }

  std::shared_ptr<TensorNode<T>>& node() { return node_; }
  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

  void backward() const;

private:
  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

  template <class U>
  friend Tensor<U> make_op(std::string, Shape, std::vector<U>, std::vector<Tensor<U>>,
                           std::function<void(TensorNode<U>&)>);

  std::shared_ptr<TensorNode<T>> node_;
};

// Topologically ordered record of the ops reachable from a root: every node's
// parents appear before it, and backward over the order visits each exactly once.
template <class T>
struct Graph {
  std::vector<TensorNode<T>*> order;

  static Graph build(TensorNode<T>* root) {
    Graph g;
    std::unordered_set<TensorNode<T>*> seen;
    // Iterative post-order DFS; recursion would overflow on deep op chains.
    std::vector<std::pair<TensorNode<T>*, std::size_t>> stack{{root, 0}};
    seen.insert(root);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        TensorNode<T>* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        g.order.push_back(node);
        stack.pop_back();
      }
    }
    return g;
  }
};

namespace detail {

template <class T>
inline void check_finite(const char* op, const std::vector<T>& v) {
  for (const T& x : v)
    if (!std::isfinite(double(x)))
      throw std::runtime_error(std::string("op '") + op + "' produced a non-finite value");
}

}  // namespace detail

// Every op funnels through here: values are validated finite, the graph edge
// is recorded only when some input needs gradients.
template <class T>
Tensor<T> make_op(std::string op, Shape shape, std::vector<T> value, std::vector<Tensor<T>> inputs,
                  std::function<void(TensorNode<T>&)> backward_fn) {
  detail::check(shape_numel(shape) == value.size(), op + ": internal shape/value mismatch");
  detail::check_finite(op.c_str(), value);
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = std::move(op);
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    n->requires_grad = true;
    for (auto& in : inputs) n->parents.push_back(in.node());
    n->backward_fn = std::move(backward_fn);
  }
  Tensor<T> out;
  out = Tensor<T>(std::move(n));
  return out;
}

template <class T>
void Tensor<T>::backward() const {
  detail::check(node_ != nullptr, "backward on empty tensor");
  if (node_->value.size() != 1)
    throw std::invalid_argument("backward: tensor is not scalar, shape " + shape_str(node_->shape));
  if (!node_->requires_grad)
    throw std::invalid_argument("backward: tensor is detached from any gradient graph");
  auto g = Graph<T>::build(node_.get());
  node_->ensure_grad();
  node_->grad[0] += T(1);
  for (auto it = g.order.rbegin(); it != g.order.rend(); ++it) {
    TensorNode<T>* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops (NumPy-style broadcasting)
// ---------------------------------------------------------------------------

namespace detail {

// fwd(a, b) -> out; dfa/dfb give d out / d a and d out / d b at (a, b).
template <class T, class Fwd, class Dfa, class Dfb>
Tensor<T> binary_ew(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Dfa dfa,
                    Dfb dfb) {
  const Shape out = broadcast_shape(a.shape(), b.shape(), name);
  const auto sa = broadcast_strides(a.shape(), out);
  const auto sb = broadcast_strides(b.shape(), out);
  std::vector<T> v(shape_numel(out));
  const auto& av = a.value();
  const auto& bv = b.value();
  for_each_pair(out, sa, sb, [&](std::size_t f, std::size_t oa, std::size_t ob) {
    v[f] = fwd(av[oa], bv[ob]);
  });
  auto an = a.node();
  auto bn = b.node();
  return make_op<T>(
      name, out, std::move(v), {a, b},
      [out, sa, sb, an, bn, dfa, dfb](TensorNode<T>& self) {
        const auto& g = self.grad;
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for_each_pair(out, sa, sb, [&](std::size_t f, std::size_t oa, std::size_t ob) {
          const T av = an->value[oa], bv = bn->value[ob];
          if (an->requires_grad) an->grad[oa] += g[f] * dfa(av, bv);
          if (bn->requires_grad) bn->grad[ob] += g[f] * dfb(av, bv);
        });
      });
}

template <class T, class Fwd, class Df>
Tensor<T> unary_ew(const char* name, const Tensor<T>& x, Fwd fwd, Df df) {
  std::vector<T> v(x.size());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i) v[i] = fwd(xv[i]);
  auto xn = x.node();
  return make_op<T>(name, x.shape(), std::move(v), {x}, [xn, df](TensorNode<T>& self) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      xn->grad[i] += self.grad[i] * df(xn->value[i], self.value[i]);
  });
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_ew<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_ew<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_ew<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_ew<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary_ew<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary_ew<T>(
      "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary_ew<T>(
      "sqrt", x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary_ew<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
  return detail::unary_ew<T>(
      "neg", x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
  return detail::unary_ew<T>(
      "mul_scalar", x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return detail::unary_ew<T>(
      "add_scalar", x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <class T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <class T> Tensor<T> operator-(const Tensor<T>& x) { return neg(x); }
template <class T> Tensor<T> operator*(const Tensor<T>& x, T c) { return mul_scalar(x, c); }
template <class T> Tensor<T> operator*(T c, const Tensor<T>& x) { return mul_scalar(x, c); }

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {

inline Shape reduced_shape(const Shape& in, const std::vector<std::size_t>& axes, bool keepdims,
                           std::vector<bool>& mask) {
  mask.assign(in.size(), false);
  for (std::size_t ax : axes) {
    check(ax < in.size(), "reduce: axis " + std::to_string(ax) + " out of range for rank " +
                              std::to_string(in.size()));
    mask[ax] = true;
  }
  Shape out;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (mask[i]) {
      if (keepdims) out.push_back(1);
    } else {
      out.push_back(in[i]);
    }
  }
  return out;
}

// Strides mapping each input element to its reduction slot.
inline std::vector<std::size_t> reduce_strides(const Shape& in, const std::vector<bool>& mask,
                                               const Shape& out_keep) {
  Shape keep(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) keep[i] = mask[i] ? 1 : in[i];
  (void)out_keep;
  return broadcast_strides(keep, in);
}

template <class T>
Tensor<T> reduce_op(const char* name, const Tensor<T>& x, std::vector<std::size_t> axes,
                    bool keepdims, T scale) {
  if (axes.empty()) {
    axes.resize(x.rank());
    std::iota(axes.begin(), axes.end(), std::size_t(0));
  }
  std::vector<bool> mask;
  const Shape out = reduced_shape(x.shape(), axes, keepdims, mask);
  Shape out_keep(x.rank());
  for (std::size_t i = 0; i < x.rank(); ++i) out_keep[i] = mask[i] ? 1 : x.shape()[i];

  const auto slot = broadcast_strides(out_keep, x.shape());
  const auto ident = strides_of(x.shape());
  std::vector<T> v(shape_numel(out), T(0));
  const auto& xv = x.value();
  for_each_pair(x.shape(), ident, slot,
                [&](std::size_t f, std::size_t, std::size_t os) { v[os] += xv[f]; });
  if (scale != T(1))
    for (auto& e : v) e *= scale;

  auto xn = x.node();
  const Shape in_shape = x.shape();
  return make_op<T>(name, out, std::move(v), {x},
                    [in_shape, slot, ident, xn, scale](TensorNode<T>& self) {
                      xn->ensure_grad();
                      for_each_pair(in_shape, ident, slot,
                                    [&](std::size_t f, std::size_t, std::size_t os) {
                                      xn->grad[f] += self.grad[os] * scale;
                                    });
                    });
}

}  // namespace detail

template <class T>
Tensor<T> sum(const Tensor<T>& x, std::vector<std::size_t> axes = {}, bool keepdims = false) {
  return detail::reduce_op<T>("sum", x, std::move(axes), keepdims, T(1));
}

template <class T>
Tensor<T> mean(const Tensor<T>& x, std::vector<std::size_t> axes = {}, bool keepdims = false) {
  std::size_t count = 1;
  if (axes.empty()) {
    count = x.size();
  } else {
    for (std::size_t ax : axes) {
      detail::check(ax < x.rank(), "mean: axis out of range");
      count *= x.shape()[ax];
    }
  }
  detail::check(count > 0, "mean: reduction over zero elements");
  return detail::reduce_op<T>("mean", x, std::move(axes), keepdims, T(1) / T(count));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& s) {
  detail::check(shape_numel(s) == x.size(), "reshape: cannot view " + shape_str(x.shape()) +
                                                " as " + shape_str(s) + " (element count differs)");
  std::vector<T> v = x.value();
  auto xn = x.node();
  return make_op<T>("reshape", s, std::move(v), {x}, [xn](TensorNode<T>& self) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
  });
}

// Materializes the permuted copy (row-major layout throughout).
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  detail::check(perm.size() == x.rank(), "permute: perm rank mismatch for " + shape_str(x.shape()));
  std::vector<bool> used(perm.size(), false);
  Shape out(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    detail::check(perm[i] < x.rank() && !used[perm[i]], "permute: invalid permutation");
    used[perm[i]] = true;
    out[i] = x.shape()[perm[i]];
  }
  const auto in_st = detail::strides_of(x.shape());
  std::vector<std::size_t> src_st(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) src_st[i] = in_st[perm[i]];

  const auto out_st = detail::strides_of(out);
  std::vector<T> v(x.size());
  const auto& xv = x.value();
  detail::for_each_pair(out, out_st, src_st,
                        [&](std::size_t f, std::size_t, std::size_t src) { v[f] = xv[src]; });
  auto xn = x.node();
  return make_op<T>("permute", out, std::move(v), {x},
                    [out, out_st, src_st, xn](TensorNode<T>& self) {
                      xn->ensure_grad();
                      detail::for_each_pair(out, out_st, src_st,
                                            [&](std::size_t f, std::size_t, std::size_t src) {
                                              xn->grad[src] += self.grad[f];
                                            });
                    });
}

template <class T>
Tensor<T> transpose2d(const Tensor<T>& x) {
  detail::check(x.rank() == 2, "transpose2d: expected rank 2, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  detail::check(!parts.empty(), "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  detail::check(axis < s0.size(), "concat: axis out of range");
  Shape out = s0;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::check(p.rank() == s0.size(), "concat: rank mismatch " + shape_str(p.shape()) + " vs " +
                                             shape_str(s0));
    for (std::size_t i = 0; i < s0.size(); ++i)
      detail::check(i == axis || p.shape()[i] == s0[i],
                    "concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(s0));
    total += p.shape()[axis];
  }
  out[axis] = total;

  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];

  std::vector<T> v(shape_numel(out));
  const std::size_t out_row = total * inner;
  std::size_t at = 0;
  for (const auto& p : parts) {
    const std::size_t blk = p.shape()[axis] * inner;
    const auto& pv = p.value();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + o * blk, blk, v.begin() + o * out_row + at);
    at += blk;
  }

  std::vector<std::shared_ptr<TensorNode<T>>> nodes;
  std::vector<std::size_t> blocks;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    blocks.push_back(p.shape()[axis] * inner);
  }
  return make_op<T>("concat", out, std::move(v), parts,
                    [nodes, blocks, outer, out_row](TensorNode<T>& self) {
                      std::size_t at = 0;
                      for (std::size_t k = 0; k < nodes.size(); ++k) {
                        auto& n = *nodes[k];
                        if (n.requires_grad) {
                          n.ensure_grad();
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t i = 0; i < blocks[k]; ++i)
                              n.grad[o * blocks[k] + i] += self.grad[o * out_row + at + i];
                        }
                        at += blocks[k];
                      }
                    });
}

template <class T>
Tensor<T> concat(std::initializer_list<Tensor<T>> parts, std::size_t axis) {
  return concat(std::vector<Tensor<T>>(parts), axis);
}

// Contiguous sub-range along one axis.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
  detail::check(axis < x.rank(), "slice: axis out of range for " + shape_str(x.shape()));
  detail::check(start + len <= x.shape()[axis],
                "slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                    ") exceeds extent " + std::to_string(x.shape()[axis]));
  Shape out = x.shape();
  out[axis] = len;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  const std::size_t in_row = x.shape()[axis] * inner;
  const std::size_t blk = len * inner;

  std::vector<T> v(shape_numel(out));
  const auto& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.begin() + o * in_row + start * inner, blk, v.begin() + o * blk);
  auto xn = x.node();
  return make_op<T>("slice", out, std::move(v), {x},
                    [outer, in_row, blk, start, inner, xn](TensorNode<T>& self) {
                      xn->ensure_grad();
                      for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t i = 0; i < blk; ++i)
                          xn->grad[o * in_row + start * inner + i] += self.grad[o * blk + i];
                    });
}

// Selects entries where mask != 0, flattened in row-major order.
template <class T>
Tensor<T> masked_select(const Tensor<T>& x, const Tensor<T>& mask) {
  detail::check(mask.shape() == x.shape(), "masked_select: mask shape " + shape_str(mask.shape()) +
                                               " differs from input " + shape_str(x.shape()));
  std::vector<std::size_t> keep;
  const auto& mv = mask.value();
  for (std::size_t i = 0; i < mv.size(); ++i)
    if (mv[i] != T(0)) keep.push_back(i);
  std::vector<T> v(keep.size());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < keep.size(); ++i) v[i] = xv[keep[i]];
  auto xn = x.node();
  return make_op<T>("masked_select", {keep.size()}, std::move(v), {x},
                    [keep, xn](TensorNode<T>& self) {
                      xn->ensure_grad();
                      for (std::size_t i = 0; i < keep.size(); ++i)
                        xn->grad[keep[i]] += self.grad[i];
                    });
}

// Gather by flat row-major indices; the workhorse behind label selection.
template <class T>
Tensor<T> take(const Tensor<T>& x, const std::vector<std::size_t>& indices) {
  std::vector<T> v(indices.size());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    detail::check(indices[i] < xv.size(), "take: index " + std::to_string(indices[i]) +
                                              " out of range " + std::to_string(xv.size()));
    v[i] = xv[indices[i]];
  }
  auto xn = x.node();
  return make_op<T>("take", {indices.size()}, std::move(v), {x},
                    [indices, xn](TensorNode<T>& self) {
                      xn->ensure_grad();
                      for (std::size_t i = 0; i < indices.size(); ++i)
                        xn->grad[indices[i]] += self.grad[i];
                    });
}

// Rows stacked into a (n, c) matrix.
template <class T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows) {
  detail::check(!rows.empty(), "stack_rows: no inputs");
  std::vector<Tensor<T>> shaped;
  shaped.reserve(rows.size());
  for (const auto& r : rows) {
    detail::check(r.rank() == 1, "stack_rows: expected rank-1 rows, got " + shape_str(r.shape()));
    shaped.push_back(reshape(r, {1, r.size()}));
  }
  return concat(shaped, 0);
}

template <class T>
Tensor<T> nth_row(const Tensor<T>& m, std::size_t i) {
  detail::check(m.rank() == 2, "nth_row: expected rank 2");
  return reshape(slice(m, 0, i, 1), {m.shape()[1]});
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

namespace detail {

// C(m,n) += A(m,k) * B(k,n); ikj order keeps the inner loop contiguous.
template <class T>
void mat_mul_accum(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* a = A + i * k;
    T* c = C + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T av = a[kk];
      if (av == T(0)) continue;
      const T* b = B + kk * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check(a.rank() == 2 && b.rank() == 2,
                "matmul: expected rank-2 operands, got " + shape_str(a.shape()) + " and " +
                    shape_str(b.shape()));
  detail::check(a.shape()[1] == b.shape()[0], "matmul: inner extents differ, " +
                                                  shape_str(a.shape()) + " x " +
                                                  shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<T> v(m * n, T(0));
  detail::mat_mul_accum(a.value().data(), b.value().data(), v.data(), m, k, n);
  auto an = a.node();
  auto bn = b.node();
  return make_op<T>("matmul", {m, n}, std::move(v), {a, b}, [an, bn, m, k, n](TensorNode<T>& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      // dA = dC * B^T
      std::vector<T> bt(k * n);
      for (std::size_t kk = 0; kk < k; ++kk)
        for (std::size_t j = 0; j < n; ++j) bt[j * k + kk] = bn->value[kk * n + j];
      detail::mat_mul_accum(self.grad.data(), bt.data(), an->grad.data(), m, n, k);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      // dB = A^T * dC
      std::vector<T> at(k * m);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t kk = 0; kk < k; ++kk) at[kk * m + i] = an->value[i * k + kk];
      detail::mat_mul_accum(at.data(), self.grad.data(), bn->grad.data(), k, m, n);
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax family (over one axis)
// ---------------------------------------------------------------------------

namespace detail {

struct LaneIter {
  std::size_t outer = 1, len = 0, inner = 1;
  LaneIter(const Shape& s, std::size_t axis) {
    check(axis < s.size(), "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  }
  std::size_t base(std::size_t o, std::size_t in) const { return o * len * inner + in; }
  std::size_t step() const { return inner; }
};

}  // namespace detail

template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  detail::LaneIter it(x.shape(), axis);
  std::vector<T> v(x.size());
  const auto& xv = x.value();
  for (std::size_t o = 0; o < it.outer; ++o)
    for (std::size_t in = 0; in < it.inner; ++in) {
      const std::size_t b = it.base(o, in), st = it.step();
      T m = xv[b];
      for (std::size_t i = 1; i < it.len; ++i) m = std::max(m, xv[b + i * st]);
      T s = T(0);
      for (std::size_t i = 0; i < it.len; ++i) s += (v[b + i * st] = std::exp(xv[b + i * st] - m));
      for (std::size_t i = 0; i < it.len; ++i) v[b + i * st] /= s;
    }
  auto xn = x.node();
  return make_op<T>("softmax", x.shape(), std::move(v), {x}, [it, xn](TensorNode<T>& self) {
    xn->ensure_grad();
    for (std::size_t o = 0; o < it.outer; ++o)
      for (std::size_t in = 0; in < it.inner; ++in) {
        const std::size_t b = it.base(o, in), st = it.step();
        T dot = T(0);
        for (std::size_t i = 0; i < it.len; ++i)
          dot += self.grad[b + i * st] * self.value[b + i * st];
        for (std::size_t i = 0; i < it.len; ++i)
          xn->grad[b + i * st] += self.value[b + i * st] * (self.grad[b + i * st] - dot);
      }
  });
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
  detail::LaneIter it(x.shape(), axis);
  std::vector<T> v(x.size());
  const auto& xv = x.value();
  for (std::size_t o = 0; o < it.outer; ++o)
    for (std::size_t in = 0; in < it.inner; ++in) {
      const std::size_t b = it.base(o, in), st = it.step();
      T m = xv[b];
      for (std::size_t i = 1; i < it.len; ++i) m = std::max(m, xv[b + i * st]);
      T s = T(0);
      for (std::size_t i = 0; i < it.len; ++i) s += std::exp(xv[b + i * st] - m);
      const T lse = m + std::log(s);
      for (std::size_t i = 0; i < it.len; ++i) v[b + i * st] = xv[b + i * st] - lse;
    }
  auto xn = x.node();
  return make_op<T>("log_softmax", x.shape(), std::move(v), {x}, [it, xn](TensorNode<T>& self) {
    xn->ensure_grad();
    for (std::size_t o = 0; o < it.outer; ++o)
      for (std::size_t in = 0; in < it.inner; ++in) {
        const std::size_t b = it.base(o, in), st = it.step();
        T gsum = T(0);
        for (std::size_t i = 0; i < it.len; ++i) gsum += self.grad[b + i * st];
        for (std::size_t i = 0; i < it.len; ++i)
          xn->grad[b + i * st] +=
              self.grad[b + i * st] - std::exp(self.value[b + i * st]) * gsum;
      }
  });
}

// Max-subtracted log-sum-exp reduction over one axis.
template <class T>
Tensor<T> logsumexp(const Tensor<T>& x, std::size_t axis, bool keepdims = false) {
  detail::LaneIter it(x.shape(), axis);
  Shape out;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (i == axis) {
      if (keepdims) out.push_back(1);
    } else {
      out.push_back(x.shape()[i]);
    }
  }
  std::vector<T> v(it.outer * it.inner);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < it.outer; ++o)
    for (std::size_t in = 0; in < it.inner; ++in) {
      const std::size_t b = it.base(o, in), st = it.step();
      T m = xv[b];
      for (std::size_t i = 1; i < it.len; ++i) m = std::max(m, xv[b + i * st]);
      T s = T(0);
      for (std::size_t i = 0; i < it.len; ++i) s += std::exp(xv[b + i * st] - m);
      v[o * it.inner + in] = m + std::log(s);
    }
  auto xn = x.node();
  return make_op<T>("logsumexp", out, std::move(v), {x}, [it, xn](TensorNode<T>& self) {
    xn->ensure_grad();
    for (std::size_t o = 0; o < it.outer; ++o)
      for (std::size_t in = 0; in < it.inner; ++in) {
        const std::size_t b = it.base(o, in), st = it.step();
        const T lse = self.value[o * it.inner + in];
        const T g = self.grad[o * it.inner + in];
        for (std::size_t i = 0; i < it.len; ++i)
          xn->grad[b + i * st] += g * std::exp(xn->value[b + i * st] - lse);
      }
  });
}

// L2 normalization along an axis, composed from primitive ops.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x, std::size_t axis, T eps = T(1e-12)) {
  auto norm2 = sum(mul(x, x), {axis}, /*keepdims=*/true);
  auto denom = sqrt(add_scalar(norm2, eps));
  return div(x, denom);
}

}  // namespace apn
