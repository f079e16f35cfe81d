#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <type_traits>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rodrinet/errors.hpp"
#include "rodrinet/rng.hpp"
#include "rodrinet/tensor.hpp"

namespace rodrinet {

template <typename T>
class Tape;

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

/// Named parameters in insertion order. Addresses are stable for the lifetime
/// of the store, so tapes may hold raw pointers to them.
template <typename T>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  Parameter<T>& add(const std::string& name, const Shape& shape) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
    params_.push_back(Parameter<T>{name, Tensor<T>(shape), Tensor<T>(shape)});
    index_[name] = params_.size() - 1;
    return params_.back();
  }

  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  Parameter<T>& at(const std::string& name) {
    if (auto* p = find(name)) return *p;
    throw ConfigError("no parameter named " + name);
  }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) std::fill(p.grad.data.begin(), p.grad.data.end(), T(0));
  }

 private:
  std::deque<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Handle to a node on a tape. A default-constructed Var means "absent".
template <typename T>
struct Var {
  using value_type = T;
  Tape<T>* tape = nullptr;
  int id = -1;

  explicit operator bool() const { return tape != nullptr; }
  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape; }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const { return value().size(); }
};

template <typename T>
class Tape {
 public:
  using value_type = T;
  using Backward = std::function<void(Tape&, int)>;

  struct Node {
    const char* op = "";
    std::vector<int> parents;
    Tensor<T> value;
    Tensor<T> grad;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
    Backward backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  Var<T> constant(Tensor<T> v) { return push("constant", std::move(v), {}, false); }

  Var<T> input(Tensor<T> v, bool requires_grad = false) {
    return push("input", std::move(v), {}, requires_grad && grad_enabled_);
  }

  /// The same parameter always maps to one node per tape.
  Var<T> param(Parameter<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var<T>{this, it->second};
    Var<T> v = push("param", p.value, {}, grad_enabled_);
    nodes_[v.id].param = &p;
    param_nodes_[&p] = v.id;
    return v;
  }

  /// Adds an op node. The backward rule is kept only if some parent needs a gradient.
  Var<T> record(const char* op, Tensor<T> value, std::vector<int> parents, Backward bw) {
#ifndef NDEBUG
    if (!value.all_finite()) {
      bool inputs_finite = true;
      for (int p : parents) inputs_finite = inputs_finite && nodes_[p].value.all_finite();
      if (inputs_finite) throw NonFiniteValue(std::string(op) + " produced a non-finite value");
    }
#endif
    bool rg = false;
    if (grad_enabled_)
      for (int p : parents) rg = rg || nodes_[p].requires_grad;
    Var<T> v = push(op, std::move(value), std::move(parents), rg);
    if (rg) nodes_[v.id].backward = std::move(bw);
    return v;
  }

  const Tensor<T>& value(int id) const { return nodes_[id].value; }
  const std::vector<int>& parents(int id) const { return nodes_[id].parents; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  bool has_grad(int id) const { return !nodes_[id].grad.empty(); }
  const char* op(int id) const { return nodes_[id].op; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulator of a node, allocated as zeros on first access.
  Tensor<T>& grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape);
    return n.grad;
  }

  /// Reverse sweep from a scalar loss. Parameter gradients are added into
  /// Parameter::grad, so repeated calls accumulate.
  void backward(Var<T> loss) {
    if (loss.tape != this) throw InvalidLoss("loss belongs to a different tape");
    if (value(loss.id).size() != 1) {
      throw InvalidLoss("loss must be scalar, got shape " + shape_str(value(loss.id).shape));
    }
    for (auto& n : nodes_) n.grad = Tensor<T>();
    if (!nodes_[loss.id].requires_grad) return;
    grad(loss.id).data[0] = T(1);
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, id);
      if (n.param) {
        T* dst = n.param->grad.ptr();
        const T* src = n.grad.ptr();
        for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += src[i];
      }
    }
  }

  void clear() {
    nodes_.clear();
    param_nodes_.clear();
  }

 private:
  Var<T> push(const char* op, Tensor<T> value, std::vector<int> parents, bool rg) {
    Node n;
    n.op = op;
    n.parents = std::move(parents);
    n.value = std::move(value);
    n.requires_grad = rg;
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, int> param_nodes_;
  bool grad_enabled_ = true;
};

/// Scoped evaluation mode: ops record values but no backward rules.
template <typename T>
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape<T>& t) : tape_(t), prev_(t.grad_enabled()) { t.set_grad_enabled(false); }
  ~NoGradGuard() { tape_.set_grad_enabled(prev_); }

 private:
  Tape<T>& tape_;
  bool prev_;
};

// ---------------------------------------------------------------------------
// primitives

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

// dst[j] += sum_r src[r * stride + j], rows in order
template <typename T>
void add_column_sums(T* dst, const T* src, std::size_t rows, std::size_t cols, std::size_t stride) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* s = src + r * stride;
    for (std::size_t j = 0; j < cols; ++j) dst[j] += s[j];
  }
}

inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const Shape& big = a.size() >= b.size() ? a : b;
  const Shape& small = a.size() >= b.size() ? b : a;
  if (!std::equal(small.rbegin(), small.rend(), big.rbegin())) shape_mismatch(op, a, b);
  return big;
}

template <typename T>
void same_tape(const Var<T>& a, const Var<T>& b) {
  if (a.tape != b.tape) throw ShapeError("operands live on different tapes");
}

// g has n entries; adds g into dst (m entries, m divides n) folding the repeats.
template <typename T>
void fold_add(T* dst, std::size_t m, const T* g, std::size_t n) {
  if (m == n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] += g[i];
    return;
  }
  for (std::size_t r = 0; r < n; r += m)
    for (std::size_t i = 0; i < m; ++i) dst[i] += g[r + i];
}

inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// out[idx] = in[permuted idx]; out dims are in.shape[perm[k]].
template <typename T>
void permute_copy(const T* in, const Shape& in_shape, const std::vector<std::size_t>& perm, T* out,
                  bool accumulate) {
  const std::size_t r = in_shape.size();
  if (r == 0) {
    out[0] = accumulate ? out[0] + in[0] : in[0];
    return;
  }
  const auto in_st = strides_of(in_shape);
  Shape out_shape(r);
  std::vector<std::size_t> src_st(r);
  for (std::size_t k = 0; k < r; ++k) {
    out_shape[k] = in_shape[perm[k]];
    src_st[k] = in_st[perm[k]];
  }
  const std::size_t n = numel(out_shape);
  if (n == 0) return;
  // innermost output axis is walked in a tight loop
  const std::size_t inner = out_shape[r - 1];
  const std::size_t inner_st = src_st[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < n; o += inner) {
    const T* s = in + src;
    T* d = out + o;
    if (accumulate) {
      for (std::size_t i = 0; i < inner; ++i) d[i] += s[i * inner_st];
    } else {
      for (std::size_t i = 0; i < inner; ++i) d[i] = s[i * inner_st];
    }
    for (std::size_t k = r - 1; k-- > 0;) {
      if (++idx[k] < out_shape[k]) {
        src += src_st[k];
        break;
      }
      src -= src_st[k] * (out_shape[k] - 1);
      idx[k] = 0;
    }
  }
}

}  // namespace detail

template <typename T, typename Fwd, typename Bwd>
Var<T> unary_elementwise(const char* name, Var<T> a, Fwd f, Bwd df) {
  const Tensor<T>& x = a.value();
  Tensor<T> out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return a.tape->record(name, std::move(out), {a.id}, [ia = a.id, df](Tape<T>& t, int self) {
    if (!t.requires_grad(ia)) return;
    const Tensor<T>& x = t.value(ia);
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(ia);
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[i] * df(x[i]);
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return unary_elementwise<T>("relu", a, [](T v) { return v > T(0) ? v : T(0); },
                              [](T v) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> sin(Var<T> a) {
  return unary_elementwise<T>("sin", a, [](T v) { using std::sin; return sin(v); },
                              [](T v) { using std::cos; return cos(v); });
}

template <typename T>
Var<T> cos(Var<T> a) {
  return unary_elementwise<T>("cos", a, [](T v) { using std::cos; return cos(v); },
                              [](T v) { using std::sin; return -sin(v); });
}

template <typename T>
Var<T> scale(Var<T> a, std::type_identity_t<T> s) {
  return unary_elementwise<T>("scale", a, [s](T v) { return s * v; }, [s](T) { return s; });
}

namespace detail {

enum class BinOp { add, sub, mul };

template <typename T>
Var<T> binary(const char* name, BinOp kind, Var<T> a, Var<T> b) {
  same_tape(a, b);
  const Tensor<T>& x = a.value();
  const Tensor<T>& y = b.value();
  Tensor<T> out(broadcast_shape(name, x.shape, y.shape));
  const std::size_t n = out.size(), na = x.size(), nb = y.size();
  for (std::size_t i = 0; i < n; ++i) {
    const T u = x[na == n ? i : i % na], v = y[nb == n ? i : i % nb];
    out[i] = kind == BinOp::add ? u + v : kind == BinOp::sub ? u - v : u * v;
  }
  return a.tape->record(name, std::move(out), {a.id, b.id},
                        [ia = a.id, ib = b.id, kind](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const std::size_t n = g.size();
    if (t.requires_grad(ia)) {
      Tensor<T>& ga = t.grad(ia);
      if (kind == BinOp::mul) {
        const Tensor<T>& y = t.value(ib);
        const std::size_t na = ga.size(), nb = y.size();
        for (std::size_t i = 0; i < n; ++i) ga[i % na] += g[i] * y[i % nb];
      } else {
        fold_add(ga.ptr(), ga.size(), g.ptr(), n);
      }
    }
    if (t.requires_grad(ib)) {
      Tensor<T>& gb = t.grad(ib);
      const std::size_t nb = gb.size();
      if (kind == BinOp::mul) {
        const Tensor<T>& x = t.value(ia);
        const std::size_t na = x.size();
        for (std::size_t i = 0; i < n; ++i) gb[i % nb] += g[i] * x[i % na];
      } else if (kind == BinOp::sub) {
        for (std::size_t i = 0; i < n; ++i) gb[i % nb] -= g[i];
      } else {
        fold_add(gb.ptr(), nb, g.ptr(), n);
      }
    }
  });
}

}  // namespace detail

/// Elementwise ops; the lower-rank operand may be any suffix of the other's
/// shape and is repeated over the leading axes.
template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary("add", detail::BinOp::add, a, b);
}
template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary("sub", detail::BinOp::sub, a, b);
}
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary("mul", detail::BinOp::mul, a, b);
}

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T>
Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }

template <typename T>
Var<T> sum(Var<T> a) {
  T s = T(0);
  for (T v : a.value().data) s += v;
  return a.tape->record("sum", Tensor<T>::scalar(s), {a.id}, [ia = a.id](Tape<T>& t, int self) {
    if (!t.requires_grad(ia)) return;
    const T g = t.grad(self)[0];
    for (T& v : t.grad(ia).data) v += g;
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.size();
  if (n == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), T(1) / T(n));
}

/// Mean squared error over all entries.
template <typename T>
Var<T> mse_loss(Var<T> pred, Var<T> target) {
  detail::same_tape(pred, target);
  if (pred.shape() != target.shape()) shape_mismatch("mse_loss", pred.shape(), target.shape());
  const Tensor<T>& p = pred.value();
  const Tensor<T>& y = target.value();
  if (p.size() == 0) throw ShapeError("mse_loss of empty tensors");
  T s = T(0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T d = p[i] - y[i];
    s += d * d;
  }
  const T inv_n = T(1) / T(p.size());
  return pred.tape->record("mse_loss", Tensor<T>::scalar(s * inv_n), {pred.id, target.id},
                           [ip = pred.id, iy = target.id, inv_n](Tape<T>& t, int self) {
    const T g = t.grad(self)[0] * T(2) * inv_n;
    const Tensor<T>& p = t.value(ip);
    const Tensor<T>& y = t.value(iy);
    if (t.requires_grad(ip)) {
      Tensor<T>& gp = t.grad(ip);
      for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g * (p[i] - y[i]);
    }
    if (t.requires_grad(iy)) {
      Tensor<T>& gy = t.grad(iy);
      for (std::size_t i = 0; i < p.size(); ++i) gy[i] -= g * (p[i] - y[i]);
    }
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  if (numel(shape) != a.size()) shape_mismatch("reshape", a.shape(), shape);
  Tensor<T> out(std::move(shape), a.value().data);
  return a.tape->record("reshape", std::move(out), {a.id}, [ia = a.id](Tape<T>& t, int self) {
    if (!t.requires_grad(ia)) return;
    detail::fold_add(t.grad(ia).ptr(), t.grad(ia).size(), t.grad(self).ptr(), t.grad(self).size());
  });
}

template <typename T>
Var<T> permute(Var<T> a, std::vector<std::size_t> perm) {
  const Shape& in = a.shape();
  if (perm.size() != in.size()) throw ShapeError("permute: rank " + std::to_string(in.size()) +
                                                 " with " + std::to_string(perm.size()) + " axes");
  std::vector<std::size_t> inv(perm.size());
  std::vector<bool> seen(perm.size(), false);
  Shape out_shape(perm.size());
  for (std::size_t k = 0; k < perm.size(); ++k) {
    if (perm[k] >= perm.size() || seen[perm[k]]) throw ShapeError("permute: invalid axis order");
    seen[perm[k]] = true;
    inv[perm[k]] = k;
    out_shape[k] = in[perm[k]];
  }
  Tensor<T> out(out_shape);
  detail::permute_copy(a.value().ptr(), in, perm, out.ptr(), false);
  return a.tape->record("permute", std::move(out), {a.id},
                        [ia = a.id, inv, out_shape](Tape<T>& t, int self) {
    if (!t.requires_grad(ia)) return;
    detail::permute_copy(t.grad(self).ptr(), out_shape, inv, t.grad(ia).ptr(), true);
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw ShapeError("concat axis out of range");
  std::size_t total = 0;
  std::vector<int> ids;
  for (const auto& p : parts) {
    detail::same_tape(parts[0], p);
    Shape s = p.shape();
    if (s.size() != shape.size()) shape_mismatch("concat", shape, s);
    for (std::size_t k = 0; k < s.size(); ++k)
      if (k != axis && s[k] != shape[k]) shape_mismatch("concat", shape, s);
    total += s[axis];
    ids.push_back(p.id);
  }
  shape[axis] = total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t k = 0; k < axis; ++k) outer *= shape[k];
  for (std::size_t k = axis + 1; k < shape.size(); ++k) inner *= shape[k];
  Tensor<T> out(shape);
  std::vector<std::size_t> widths;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * inner;
    const T* src = p.value().ptr();
    for (std::size_t o = 0; o < outer; ++o)
      std::memcpy(out.ptr() + o * total * inner + off, src + o * w, w * sizeof(T));
    widths.push_back(w);
    off += w;
  }
  return parts[0].tape->record("concat", std::move(out), ids,
                               [ids, widths, outer, row = total * inner](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    std::size_t off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const std::size_t w = widths[p];
      if (t.requires_grad(ids[p])) {
        T* dst = t.grad(ids[p]).ptr();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < w; ++i) dst[o * w + i] += g[o * row + off + i];
      }
      off += w;
    }
  });
}

/// Half-open range [begin, end) along one axis.
template <typename T>
Var<T> slice(Var<T> a, std::size_t axis, std::size_t begin, std::size_t end) {
  Shape shape = a.shape();
  if (axis >= shape.size() || begin > end || end > shape[axis]) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " of " + shape_str(shape));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t k = 0; k < axis; ++k) outer *= shape[k];
  for (std::size_t k = axis + 1; k < shape.size(); ++k) inner *= shape[k];
  const std::size_t row = shape[axis] * inner, w = (end - begin) * inner, off = begin * inner;
  shape[axis] = end - begin;
  Tensor<T> out(shape);
  const T* src = a.value().ptr();
  for (std::size_t o = 0; o < outer; ++o)
    std::memcpy(out.ptr() + o * w, src + o * row + off, w * sizeof(T));
  return a.tape->record("slice", std::move(out), {a.id},
                        [ia = a.id, outer, row, w, off](Tape<T>& t, int self) {
    if (!t.requires_grad(ia)) return;
    const Tensor<T>& g = t.grad(self);
    T* dst = t.grad(ia).ptr();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < w; ++i) dst[o * row + off + i] += g[o * w + i];
  });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::same_tape(a, b);
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_mismatch("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  detail::MatMap<T>(out.ptr(), m, n).noalias() =
      detail::CMatMap<T>(a.value().ptr(), m, k) * detail::CMatMap<T>(b.value().ptr(), k, n);
  return a.tape->record("matmul", std::move(out), {a.id, b.id},
                        [ia = a.id, ib = b.id, m, k, n](Tape<T>& t, int self) {
    detail::CMatMap<T> g(t.grad(self).ptr(), m, n);
    if (t.requires_grad(ia))
      detail::MatMap<T>(t.grad(ia).ptr(), m, k).noalias() +=
          g * detail::CMatMap<T>(t.value(ib).ptr(), k, n).transpose();
    if (t.requires_grad(ib))
      detail::MatMap<T>(t.grad(ib).ptr(), k, n).noalias() +=
          detail::CMatMap<T>(t.value(ia).ptr(), m, k).transpose() * g;
  });
}

/// a: [B, M, K]; b: [B, K, N], or [B, N, K] with transpose_b.
template <typename T>
Var<T> batched_matmul(Var<T> a, Var<T> b, bool transpose_b = false) {
  detail::same_tape(a, b);
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != (transpose_b ? b.dim(2) : b.dim(1))) {
    shape_mismatch("batched_matmul", a.shape(), b.shape());
  }
  const std::size_t nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = transpose_b ? b.dim(1) : b.dim(2);
  Tensor<T> out({nb, m, n});
  for (std::size_t i = 0; i < nb; ++i) {
    detail::CMatMap<T> x(a.value().ptr() + i * m * k, m, k);
    auto o = detail::MatMap<T>(out.ptr() + i * m * n, m, n);
    if (transpose_b)
      o.noalias() = x * detail::CMatMap<T>(b.value().ptr() + i * n * k, n, k).transpose();
    else
      o.noalias() = x * detail::CMatMap<T>(b.value().ptr() + i * k * n, k, n);
  }
  return a.tape->record("batched_matmul", std::move(out), {a.id, b.id},
                        [ia = a.id, ib = b.id, nb, m, k, n, transpose_b](Tape<T>& t, int self) {
    const bool ra = t.requires_grad(ia), rb = t.requires_grad(ib);
    for (std::size_t i = 0; i < nb; ++i) {
      detail::CMatMap<T> g(t.grad(self).ptr() + i * m * n, m, n);
      detail::CMatMap<T> x(t.value(ia).ptr() + i * m * k, m, k);
      if (transpose_b) {
        detail::CMatMap<T> y(t.value(ib).ptr() + i * n * k, n, k);
        if (ra) detail::MatMap<T>(t.grad(ia).ptr() + i * m * k, m, k).noalias() += g * y;
        if (rb) detail::MatMap<T>(t.grad(ib).ptr() + i * n * k, n, k).noalias() += g.transpose() * x;
      } else {
        detail::CMatMap<T> y(t.value(ib).ptr() + i * k * n, k, n);
        if (ra) detail::MatMap<T>(t.grad(ia).ptr() + i * m * k, m, k).noalias() += g * y.transpose();
        if (rb) detail::MatMap<T>(t.grad(ib).ptr() + i * k * n, k, n).noalias() += x.transpose() * g;
      }
    }
  });
}

/// x: [..., in]; w: [out, in]; b: [out] or absent. Returns x w^T + b.
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b = {}) {
  detail::same_tape(x, w);
  if (x.rank() < 1 || w.rank() != 2 || x.shape().back() != w.dim(1)) shape_mismatch("linear", x.shape(), w.shape());
  const std::size_t in = w.dim(1), out_dim = w.dim(0), rows = x.size() / in;
  if (b && (b.rank() != 1 || b.dim(0) != out_dim)) shape_mismatch("linear bias", w.shape(), b.shape());
  Shape shape = x.shape();
  shape.back() = out_dim;
  Tensor<T> out(shape);
  auto y = detail::MatMap<T>(out.ptr(), rows, out_dim);
  y.noalias() = detail::CMatMap<T>(x.value().ptr(), rows, in) *
                detail::CMatMap<T>(w.value().ptr(), out_dim, in).transpose();
  if (b) y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().ptr(), out_dim);
  std::vector<int> parents{x.id, w.id};
  if (b) parents.push_back(b.id);
  return x.tape->record("linear", std::move(out), parents,
                        [ix = x.id, iw = w.id, ibias = b ? b.id : -1, rows, in, out_dim](Tape<T>& t, int self) {
    detail::CMatMap<T> g(t.grad(self).ptr(), rows, out_dim);
    if (t.requires_grad(ix))
      detail::MatMap<T>(t.grad(ix).ptr(), rows, in).noalias() +=
          g * detail::CMatMap<T>(t.value(iw).ptr(), out_dim, in);
    if (t.requires_grad(iw))
      detail::MatMap<T>(t.grad(iw).ptr(), out_dim, in).noalias() +=
          g.transpose() * detail::CMatMap<T>(t.value(ix).ptr(), rows, in);
    if (ibias >= 0 && t.requires_grad(ibias))
      detail::add_column_sums(t.grad(ibias).ptr(), t.grad(self).ptr(), rows, out_dim, out_dim);
  });
}

/// Independent linear map per group: x [N, G, in], w [G, out, in], b [G, out] -> [N, G, out].
template <typename T>
Var<T> grouped_linear(Var<T> x, Var<T> w, Var<T> b = {}) {
  detail::same_tape(x, w);
  if (x.rank() != 3 || w.rank() != 3 || x.dim(1) != w.dim(0) || x.dim(2) != w.dim(2))
    shape_mismatch("grouped_linear", x.shape(), w.shape());
  const std::size_t n = x.dim(0), groups = x.dim(1), in = x.dim(2), out_dim = w.dim(1);
  if (b && (b.rank() != 2 || b.dim(0) != groups || b.dim(1) != out_dim))
    shape_mismatch("grouped_linear bias", w.shape(), b.shape());
  Tensor<T> out({n, groups, out_dim});
  for (std::size_t g = 0; g < groups; ++g) {
    detail::StridedMap<T> y(out.ptr() + g * out_dim, n, out_dim, Eigen::OuterStride<>(groups * out_dim));
    y.noalias() = detail::CStridedMap<T>(x.value().ptr() + g * in, n, in, Eigen::OuterStride<>(groups * in)) *
                  detail::CMatMap<T>(w.value().ptr() + g * out_dim * in, out_dim, in).transpose();
    if (b)
      y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().ptr() + g * out_dim, out_dim);
  }
  std::vector<int> parents{x.id, w.id};
  if (b) parents.push_back(b.id);
  return x.tape->record("grouped_linear", std::move(out), parents,
                        [ix = x.id, iw = w.id, ibias = b ? b.id : -1, n, groups, in, out_dim](Tape<T>& t, int self) {
    const Eigen::OuterStride<> so(groups * out_dim), si(groups * in);
    for (std::size_t g = 0; g < groups; ++g) {
      detail::CStridedMap<T> gy(t.grad(self).ptr() + g * out_dim, n, out_dim, so);
      if (t.requires_grad(ix))
        detail::StridedMap<T>(t.grad(ix).ptr() + g * in, n, in, si).noalias() +=
            gy * detail::CMatMap<T>(t.value(iw).ptr() + g * out_dim * in, out_dim, in);
      if (t.requires_grad(iw))
        detail::MatMap<T>(t.grad(iw).ptr() + g * out_dim * in, out_dim, in).noalias() +=
            gy.transpose() * detail::CStridedMap<T>(t.value(ix).ptr() + g * in, n, in, si);
      if (ibias >= 0 && t.requires_grad(ibias))
        detail::add_column_sums(t.grad(ibias).ptr() + g * out_dim, t.grad(self).ptr() + g * out_dim, n, out_dim,
                                groups * out_dim);
    }
  });
}

/// Softmax over the last axis.
template <typename T>
Var<T> softmax(Var<T> a) {
  const Tensor<T>& x = a.value();
  if (x.rank() < 1 || x.shape.back() == 0) throw ShapeError("softmax needs a non-empty last axis");
  const std::size_t m = x.shape.back(), rows = x.size() / m;
  Tensor<T> out(x.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xi = x.ptr() + r * m;
    T* yi = out.ptr() + r * m;
    const T mx = *std::max_element(xi, xi + m);
    T s = T(0);
    for (std::size_t i = 0; i < m; ++i) {
      using std::exp;
      s += (yi[i] = exp(xi[i] - mx));
    }
    for (std::size_t i = 0; i < m; ++i) yi[i] /= s;
  }
  return a.tape->record("softmax", std::move(out), {a.id}, [ia = a.id, m, rows](Tape<T>& t, int self) {
    if (!t.requires_grad(ia)) return;
    // the output of this node is its own value
    const Tensor<T>& y = t.value(self);
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t o = r * m;
      T dot = T(0);
      for (std::size_t i = 0; i < m; ++i) dot += g[o + i] * y[o + i];
      for (std::size_t i = 0; i < m; ++i) gx[o + i] += y[o + i] * (g[o + i] - dot);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes over the last axis. gamma/beta (optional, both or neither) have a
/// shape that is a suffix of x's shape; row r uses affine group r mod groups.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma = {}, Var<T> beta = {}) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() < 1 || xv.shape.back() == 0) throw ShapeError("layer_norm needs a non-empty last axis");
  const std::size_t m = xv.shape.back(), rows = xv.size() / m;
  std::size_t groups = 1;
  if (bool(gamma) != bool(beta)) throw ShapeError("layer_norm: gamma and beta go together");
  if (gamma) {
    detail::broadcast_shape("layer_norm", xv.shape, gamma.shape());
    if (gamma.shape() != beta.shape() || gamma.rank() < 1) shape_mismatch("layer_norm affine", gamma.shape(), beta.shape());
    groups = gamma.size() / m;
  }
  Tensor<T> out(xv.shape);
  Tensor<T> xhat(xv.shape);
  std::vector<T> inv_std(rows);
  const T eps = T(kLayerNormEps);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xi = xv.ptr() + r * m;
    T mu = T(0);
    for (std::size_t i = 0; i < m; ++i) mu += xi[i];
    mu /= T(m);
    T var = T(0);
    for (std::size_t i = 0; i < m; ++i) var += (xi[i] - mu) * (xi[i] - mu);
    var /= T(m);
    using std::sqrt;
    const T is = T(1) / sqrt(var + eps);
    inv_std[r] = is;
    T* h = xhat.ptr() + r * m;
    T* y = out.ptr() + r * m;
    for (std::size_t i = 0; i < m; ++i) h[i] = (xi[i] - mu) * is;
    if (gamma) {
      const std::size_t go = (r % groups) * m;
      const T* gm = gamma.value().ptr() + go;
      const T* bt = beta.value().ptr() + go;
      for (std::size_t i = 0; i < m; ++i) y[i] = h[i] * gm[i] + bt[i];
    } else {
      for (std::size_t i = 0; i < m; ++i) y[i] = h[i];
    }
  }
  std::vector<int> parents{x.id};
  if (gamma) {
    parents.push_back(gamma.id);
    parents.push_back(beta.id);
  }
  return x.tape->record(
      "layer_norm", std::move(out), parents,
      [ix = x.id, ig = gamma ? gamma.id : -1, ib = beta ? beta.id : -1, m, rows, groups,
       xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const bool affine = ig >= 0;
        if (affine && t.requires_grad(ig)) {
          Tensor<T>& gg = t.grad(ig);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < m; ++i) gg[(r % groups) * m + i] += g[r * m + i] * xhat[r * m + i];
        }
        if (affine && t.requires_grad(ib)) {
          Tensor<T>& gb = t.grad(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < m; ++i) gb[(r % groups) * m + i] += g[r * m + i];
        }
        if (!t.requires_grad(ix)) return;
        Tensor<T>& gx = t.grad(ix);
        std::vector<T> dh(m);
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t o = r * m;
          const T* gm = affine ? t.value(ig).ptr() + (r % groups) * m : nullptr;
          T s1 = T(0), s2 = T(0);
          for (std::size_t i = 0; i < m; ++i) {
            dh[i] = affine ? g[o + i] * gm[i] : g[o + i];
            s1 += dh[i];
            s2 += dh[i] * xhat[o + i];
          }
          s1 /= T(m);
          s2 /= T(m);
          for (std::size_t i = 0; i < m; ++i) gx[o + i] += inv_std[r] * (dh[i] - s1 - xhat[o + i] * s2);
        }
      });
}

/// Multi-head scaled dot-product attention on packed projections.
/// qkv: [N, S, 3d] laid out as (q | k | v); returns [N, S, d].
template <typename T>
Var<T> scaled_dot_product_attention(Var<T> qkv, std::size_t heads) {
  if (qkv.rank() != 3 || qkv.dim(2) % 3 != 0) throw ShapeError("attention input " + shape_str(qkv.shape()));
  const std::size_t n = qkv.dim(0), s = qkv.dim(1), d = qkv.dim(2) / 3;
  if (heads == 0 || d % heads != 0) throw ShapeError("attention width " + std::to_string(d) +
                                                     " not divisible by " + std::to_string(heads) + " heads");
  const std::size_t dh = d / heads, row = 3 * d;
  using std::exp;
  using std::sqrt;
  const T sc = T(1) / sqrt(T(dh));
  const Tensor<T>& x = qkv.value();
  Tensor<T> out({n, s, d});
  auto probs = std::make_shared<Tensor<T>>(Shape{n, heads, s, s});
  // qkv row layout per token: [q | k | v], each head-major
  parallel_for(n, [&](std::size_t b) {
    const T* xb = x.ptr() + b * s * row;
    T* ob = out.ptr() + b * s * d;
    for (std::size_t h = 0; h < heads; ++h) {
      T* pb = probs->ptr() + (b * heads + h) * s * s;
      for (std::size_t i = 0; i < s; ++i) {
        const T* q = xb + i * row + h * dh;
        T* pi = pb + i * s;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < s; ++j) {
          const T* k = xb + j * row + d + h * dh;
          T acc = T(0);
          for (std::size_t e = 0; e < dh; ++e) acc += q[e] * k[e];
          pi[j] = acc * sc;
          mx = std::max(mx, pi[j]);
        }
        T z = T(0);
        for (std::size_t j = 0; j < s; ++j) z += (pi[j] = exp(pi[j] - mx));
        const T inv = T(1) / z;
        T* o = ob + i * d + h * dh;
        for (std::size_t j = 0; j < s; ++j) {
          pi[j] *= inv;
          const T* v = xb + j * row + 2 * d + h * dh;
          for (std::size_t e = 0; e < dh; ++e) o[e] += pi[j] * v[e];
        }
      }
    }
  });
  return qkv.tape->record("attention", std::move(out), {qkv.id},
                          [iq = qkv.id, probs, n, s, d, heads, dh, row, sc](Tape<T>& t, int self) {
    if (!t.requires_grad(iq)) return;
    const Tensor<T>& x = t.value(iq);
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(iq);
    parallel_for(n, [&](std::size_t b) {
      const T* xb = x.ptr() + b * s * row;
      const T* gb = g.ptr() + b * s * d;
      T* gxb = gx.ptr() + b * s * row;
      std::vector<T> ds(s);
      for (std::size_t h = 0; h < heads; ++h) {
        const T* pb = probs->ptr() + (b * heads + h) * s * s;
        for (std::size_t i = 0; i < s; ++i) {
          const T* pi = pb + i * s;
          const T* go = gb + i * d + h * dh;
          T dot = T(0);
          for (std::size_t j = 0; j < s; ++j) {
            const T* v = xb + j * row + 2 * d + h * dh;
            T* gv = gxb + j * row + 2 * d + h * dh;
            T dp = T(0);
            for (std::size_t e = 0; e < dh; ++e) {
              dp += go[e] * v[e];
              gv[e] += pi[j] * go[e];
            }
            ds[j] = dp;
            dot += pi[j] * dp;
          }
          const T* q = xb + i * row + h * dh;
          T* gq = gxb + i * row + h * dh;
          for (std::size_t j = 0; j < s; ++j) {
            const T w = pi[j] * (ds[j] - dot) * sc;
            const T* k = xb + j * row + d + h * dh;
            T* gk = gxb + j * row + d + h * dh;
            for (std::size_t e = 0; e < dh; ++e) {
              gq[e] += w * k[e];
              gk[e] += w * q[e];
            }
          }
        }
      }
    });
  });
}

/// Self-attention with an in-projection x -> (q | k | v) and an out-projection.
template <typename T>
Var<T> multi_head_attention(Var<T> x, Var<T> w_in, Var<T> b_in, Var<T> w_out, Var<T> b_out, std::size_t heads) {
  return linear(scaled_dot_product_attention(linear(x, w_in, b_in), heads), w_out, b_out);
}

// ---------------------------------------------------------------------------
// extension point

/// Op supplied as a forward function plus a vector-Jacobian product. The VJP
/// returns one tensor per input (an empty tensor means "no gradient").
template <typename T>
struct CustomOp {
  using Inputs = std::vector<const Tensor<T>*>;
  std::string name;
  std::function<Tensor<T>(const Inputs&)> forward;
  std::function<std::vector<Tensor<T>>(const Inputs& inputs, const Tensor<T>& output,
                                       const Tensor<T>& grad_output)>
      vjp;
};

template <typename T>
using CustomOpHandle = std::shared_ptr<const CustomOp<T>>;

namespace detail {
template <typename T>
void check_vjp_shapes(const std::string& name, const typename CustomOp<T>::Inputs& inputs,
                      const std::vector<Tensor<T>>& grads) {
  if (grads.size() != inputs.size()) {
    throw ShapeError("custom op " + name + ": VJP returned " + std::to_string(grads.size()) +
                     " gradients for " + std::to_string(inputs.size()) + " inputs");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i].empty() && grads[i].shape != inputs[i]->shape)
      shape_mismatch(("custom op " + name + " gradient").c_str(), grads[i].shape, inputs[i]->shape);
  }
}
}  // namespace detail

/// Registers an op after a self-check on probe inputs of the given shapes: the
/// forward must run and the VJP must return gradients shaped like the inputs.
template <typename T>
CustomOpHandle<T> register_custom_op(CustomOp<T> op, const std::vector<Shape>& probe_shapes) {
  if (!op.forward || !op.vjp) throw ShapeError("custom op " + op.name + " is missing a function");
  CounterRng rng(0, "custom-op-probe");
  std::vector<Tensor<T>> probes;
  for (const Shape& s : probe_shapes) {
    Tensor<T> t(s);
    for (T& v : t.data) v = T(rng.uniform(-1, 1));
    probes.push_back(std::move(t));
  }
  typename CustomOp<T>::Inputs in;
  for (const auto& p : probes) in.push_back(&p);
  const Tensor<T> out = op.forward(in);
  if (out.data.size() != numel(out.shape)) throw ShapeError("custom op " + op.name + ": inconsistent output");
  const Tensor<T> ones(out.shape, T(1));
  detail::check_vjp_shapes(op.name, in, op.vjp(in, out, ones));
  return std::make_shared<const CustomOp<T>>(std::move(op));
}

template <typename T>
Var<T> apply_custom(const CustomOpHandle<T>& op, const std::vector<Var<T>>& inputs) {
  if (inputs.empty()) throw ShapeError("custom op " + op->name + " without inputs");
  Tape<T>& tape = *inputs[0].tape;
  typename CustomOp<T>::Inputs in;
  std::vector<int> ids;
  for (const auto& v : inputs) {
    detail::same_tape(inputs[0], v);
    in.push_back(&v.value());
    ids.push_back(v.id);
  }
  Tensor<T> out = op->forward(in);
  return tape.record(op->name.c_str(), std::move(out), ids, [op, ids](Tape<T>& t, int self) {
    typename CustomOp<T>::Inputs in;
    for (int id : ids) in.push_back(&t.value(id));
    const auto grads = op->vjp(in, t.value(self), t.grad(self));
    detail::check_vjp_shapes(op->name, in, grads);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (grads[i].empty() || !t.requires_grad(ids[i])) continue;
      Tensor<T>& dst = t.grad(ids[i]);
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += grads[i][k];
    }
  });
}

// ---------------------------------------------------------------------------
// initialization

template <typename T>
void init_uniform(Parameter<T>& p, double bound, CounterRng& rng) {
  for (T& v : p.value.data) v = T(rng.uniform(-bound, bound));
}

template <typename T>
void init_constant(Parameter<T>& p, T value) {
  std::fill(p.value.data.begin(), p.value.data.end(), value);
}

}  // namespace rodrinet
