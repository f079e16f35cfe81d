#pragma once

// Learnable relaxation of the per-joint transform T_j * R(w, theta).
//
// Multi-channel form, per sample:
//   U[i,j]  = W[i,j,0] + sum_c W[i,j,1+c] cos(theta_c) + W[i,j,1+CJ+c] sin(theta_c)
//   Ub[i,j] = same with the conjugate weights
//   out[j]  = sum_i F[i] U[i,j] + Ub[i,j] F[i]
// Weights are packed as [C_in, C_out, K, 4, 4] with K = 1 + 2 CJ basis terms
// (bias, cosines, sines). The quaternion form uses the same contraction with
// a 15-term basis in q.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "rodrinet/autodiff.hpp"
#include "rodrinet/kinematics.hpp"

namespace rodrinet {

enum class OpMode { reference, fused };

inline const char* to_string(OpMode m) { return m == OpMode::fused ? "fused" : "reference"; }

/// Per-joint weight set; `weight` multiplies from the right, `conj` from the left.
template <typename T>
struct RodriguesKernel {
  std::size_t c_in = 1, c_out = 1, c_joint = 1;
  Tensor<T> weight, conj;  // [c_in, c_out, 1 + 2 c_joint, 4, 4]

  RodriguesKernel() = default;
  RodriguesKernel(std::size_t ci, std::size_t co, std::size_t cj)
      : c_in(ci), c_out(co), c_joint(cj), weight(shape(ci, co, cj)), conj(shape(ci, co, cj)) {}

  static Shape shape(std::size_t ci, std::size_t co, std::size_t cj) { return {ci, co, 1 + 2 * cj, 4, 4}; }
  std::size_t terms() const { return 1 + 2 * c_joint; }

  using Block = Eigen::Map<Eigen::Matrix<T, 4, 4, Eigen::RowMajor>>;
  Block term(Tensor<T>& w, std::size_t i, std::size_t j, std::size_t k) {
    return Block(w.ptr() + ((i * c_out + j) * terms() + k) * 16);
  }
  Block bias(std::size_t i, std::size_t j) { return term(weight, i, j, 0); }
  Block cos_weight(std::size_t i, std::size_t j, std::size_t c) { return term(weight, i, j, 1 + c); }
  Block sin_weight(std::size_t i, std::size_t j, std::size_t c) { return term(weight, i, j, 1 + c_joint + c); }
  Block conj_bias(std::size_t i, std::size_t j) { return term(conj, i, j, 0); }
  Block conj_cos(std::size_t i, std::size_t j, std::size_t c) { return term(conj, i, j, 1 + c); }
  Block conj_sin(std::size_t i, std::size_t j, std::size_t c) { return term(conj, i, j, 1 + c_joint + c); }
};

/// Quadratic monomials of (w, i, j, k) in storage order.
inline constexpr std::array<std::array<int, 2>, 10> kQuatMonomials{{
    {0, 0}, {0, 1}, {0, 2}, {0, 3}, {1, 1}, {1, 2}, {1, 3}, {2, 2}, {2, 3}, {3, 3}}};
inline constexpr std::size_t kQuatTerms = 15;  // bias, 4 linear, 10 quadratic

/// Quaternion-joint weight set: basis (1, q_w..q_k, ww, wi, ..., kk).
template <typename T>
struct QuatRodriguesKernel {
  std::size_t c_in = 1, c_out = 1;
  Tensor<T> weight, conj;  // [c_in, c_out, 15, 4, 4]

  QuatRodriguesKernel() = default;
  QuatRodriguesKernel(std::size_t ci, std::size_t co)
      : c_in(ci), c_out(co), weight(shape(ci, co)), conj(shape(ci, co)) {}
  static Shape shape(std::size_t ci, std::size_t co) { return {ci, co, kQuatTerms, 4, 4}; }
};

/// Uniform init bound for packed kernels: 1 / sqrt(2 * C_in * 4 * K).
inline double kernel_init_bound(std::size_t c_in, std::size_t terms) {
  return 1.0 / std::sqrt(2.0 * double(c_in) * 4.0 * double(terms));
}

// ---------------------------------------------------------------------------
// value-level forms

template <typename T>
using Mat4R = Eigen::Matrix<T, 4, 4, Eigen::RowMajor>;

/// F (W_bias + W_cos cos(theta) + W_sin sin(theta))
template <typename T>
Mat4<T> rodrigues_single(const Mat4<T>& f, T theta, const Mat4<T>& w_bias, const Mat4<T>& w_cos,
                         const Mat4<T>& w_sin) {
  using std::cos;
  using std::sin;
  return f * (w_bias + w_cos * cos(theta) + w_sin * sin(theta));
}

/// Single-channel kernel whose operator equals T_j R(w, theta): conjugates zero.
template <typename T = double>
RodriguesKernel<T> init_from_classical(const Joint& joint, std::size_t c_in = 1, std::size_t c_out = 1,
                                       std::size_t c_joint = 1) {
  if (c_in != 1 || c_out != 1 || c_joint != 1) {
    throw InvalidShape("classical initialization needs C_L = C_L' = C_J = 1, got " + std::to_string(c_in) +
                       "/" + std::to_string(c_out) + "/" + std::to_string(c_joint));
  }
  const ClassicalCoefficients cc = classical_coefficients(joint);
  RodriguesKernel<T> k(1, 1, 1);
  k.bias(0, 0) = cc.a.cast<T>();
  k.cos_weight(0, 0, 0) = cc.b.cast<T>();
  k.sin_weight(0, 0, 0) = cc.c.cast<T>();
  return k;
}

/// 3x3 coefficient of each quadratic monomial in the quaternion rotation matrix.
inline std::array<Eigen::Matrix3d, 10> quat_quadratic_coefficients() {
  std::array<Eigen::Matrix3d, 10> m;
  for (auto& x : m) x.setZero();
  // ww wi wj wk ii ij ik jj jk kk
  m[1](1, 2) = -2; m[1](2, 1) = 2;
  m[2](0, 2) = 2;  m[2](2, 0) = -2;
  m[3](0, 1) = -2; m[3](1, 0) = 2;
  m[4](1, 1) = -2; m[4](2, 2) = -2;
  m[5](0, 1) = 2;  m[5](1, 0) = 2;
  m[6](0, 2) = 2;  m[6](2, 0) = 2;
  m[7](0, 0) = -2; m[7](2, 2) = -2;
  m[8](1, 2) = 2;  m[8](2, 1) = 2;
  m[9](0, 0) = -2; m[9](1, 1) = -2;
  return m;
}

/// Quaternion kernel reproducing T_j H(R(q)) for unit q: bias T_j, quadratic
/// terms T_j H0(M_m), linear terms and conjugates zero.
template <typename T = double>
QuatRodriguesKernel<T> quat_init_from_classical(const Pose<double>& fixed_transform) {
  QuatRodriguesKernel<T> k(1, 1);
  const Eigen::Matrix4d tj = fixed_transform.matrix();
  const auto quad = quat_quadratic_coefficients();
  auto put = [&](std::size_t term, const Eigen::Matrix4d& m) {
    Eigen::Map<Mat4R<T>>(k.weight.ptr() + term * 16) = m.cast<T>();
  };
  put(0, tj);
  for (std::size_t q = 0; q < 10; ++q) {
    Eigen::Matrix4d h = Eigen::Matrix4d::Zero();
    h.topLeftCorner<3, 3>() = quad[q];
    put(5 + q, tj * h);
  }
  return k;
}

/// Basis row (1, q, q_x q_y) for one quaternion.
template <typename T>
std::array<T, kQuatTerms> quat_basis_values(const UnitQuaternion<T>& q) {
  const T v[4] = {q.w, q.i, q.j, q.k};
  std::array<T, kQuatTerms> b{};
  b[0] = T(1);
  for (int x = 0; x < 4; ++x) b[1 + x] = v[x];
  for (std::size_t m = 0; m < 10; ++m) b[5 + m] = v[kQuatMonomials[m][0]] * v[kQuatMonomials[m][1]];
  return b;
}

// ---------------------------------------------------------------------------
// fused contraction kernels

namespace detail {

// 16-lane vectors: GCC/Clang vector extensions for float and double, a plain
// array for anything else (extended-precision instantiations).
template <typename T>
struct Lanes16 {
  std::array<T, 16> v;
  T& operator[](int i) { return v[i]; }
  const T& operator[](int i) const { return v[i]; }
  Lanes16& operator+=(const Lanes16& o) {
    for (int i = 0; i < 16; ++i) v[i] += o.v[i];
    return *this;
  }
  friend Lanes16 operator*(const Lanes16& a, const Lanes16& b) {
    Lanes16 r;
    for (int i = 0; i < 16; ++i) r.v[i] = a.v[i] * b.v[i];
    return r;
  }
  friend Lanes16 operator*(const Lanes16& a, const T& s) {
    Lanes16 r;
    for (int i = 0; i < 16; ++i) r.v[i] = a.v[i] * s;
    return r;
  }
  friend Lanes16 operator+(const Lanes16& a, const Lanes16& b) {
    Lanes16 r = a;
    return r += b;
  }
};

template <typename T>
struct Simd {
  using V = Lanes16<T>;
  static constexpr bool native = false;
};
template <>
struct Simd<float> {
  typedef float V __attribute__((vector_size(64)));
  typedef int M __attribute__((vector_size(64)));
  static constexpr bool native = true;
};
template <>
struct Simd<double> {
  typedef double V __attribute__((vector_size(128)));
  typedef long long M __attribute__((vector_size(128)));
  static constexpr bool native = true;
};

// Lane permutations on a row-major 4x4 block, lane = 4 row + col.
enum Perm { kColB = 0, kRowR = 4, kTr = 8, kTc = 12 };

constexpr std::array<std::array<int, 16>, 16> make_perms() {
  std::array<std::array<int, 16>, 16> p{};
  for (int m = 0; m < 4; ++m)
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) {
        p[kColB + m][4 * r + c] = 4 * r + m;  // column m broadcast along rows
        p[kRowR + m][4 * r + c] = 4 * m + c;  // row m replicated
        p[kTr + m][4 * r + c] = 4 * c + m;    // column m laid out as rows
        p[kTc + m][4 * r + c] = 4 * m + r;    // row m laid out as columns
      }
  return p;
}
inline constexpr auto kPerms = make_perms();

template <typename T>
struct Vec16 {
  using S = Simd<T>;
  using V = typename S::V;

  static V zero() {
    V v;
    for (int i = 0; i < 16; ++i) v[i] = T(0);
    return v;
  }
  static V load(const T* p) {
    V v;
    if constexpr (S::native) {
      std::memcpy(&v, p, sizeof(V));
    } else {
      for (int i = 0; i < 16; ++i) v[i] = p[i];
    }
    return v;
  }
  static void store(T* p, const V& v) {
    if constexpr (S::native) {
      std::memcpy(p, &v, sizeof(V));
    } else {
      for (int i = 0; i < 16; ++i) p[i] = v[i];
    }
  }
  static void add_to(T* p, const V& v) { store(p, load(p) + v); }
  static T hsum(const V& v) {
    T s = T(0);
    for (int i = 0; i < 16; ++i) s += v[i];
    return s;
  }

  template <int P, std::size_t... I>
  static V shuffle(const V& v, std::index_sequence<I...>) {
    return __builtin_shuffle(v, typename S::M{kPerms[P][I]...});
  }

  template <int P>
  static V perm(const V& v) {
    if constexpr (S::native) {
      return shuffle<P>(v, std::make_index_sequence<16>{});
    } else {
      V r;
      for (int i = 0; i < 16; ++i) r[i] = v[kPerms[P][i]];
      return r;
    }
  }

  // a b (4x4 matrix product)
  static V matmul(const V& a, const V& b) {
    return perm<kColB + 0>(a) * perm<kRowR + 0>(b) + perm<kColB + 1>(a) * perm<kRowR + 1>(b) +
           perm<kColB + 2>(a) * perm<kRowR + 2>(b) + perm<kColB + 3>(a) * perm<kRowR + 3>(b);
  }
  // a b^T
  static V matmul_nt(const V& a, const V& b) {
    return perm<kColB + 0>(a) * perm<kTr + 0>(b) + perm<kColB + 1>(a) * perm<kTr + 1>(b) +
           perm<kColB + 2>(a) * perm<kTr + 2>(b) + perm<kColB + 3>(a) * perm<kTr + 3>(b);
  }
  // a^T b
  static V matmul_tn(const V& a, const V& b) {
    return perm<kTc + 0>(a) * perm<kRowR + 0>(b) + perm<kTc + 1>(a) * perm<kRowR + 1>(b) +
           perm<kTc + 2>(a) * perm<kRowR + 2>(b) + perm<kTc + 3>(a) * perm<kRowR + 3>(b);
  }
};

struct ContractDims {
  std::size_t n, c_in, c_out, terms;
};

inline constexpr std::size_t kBatchChunk = 32;

// NB samples share each weight load; their accumulation chains interleave.
template <typename T, std::size_t NB>
void contract_forward_block(const T* f, const T* basis, const T* w, const T* wc, T* out, ContractDims d,
                            std::size_t j, std::size_t b0) {
  using X = Vec16<T>;
  using V = typename X::V;
  V acc[NB], u[NB], ub[NB];
  const T* bs[NB];
  for (std::size_t s = 0; s < NB; ++s) {
    acc[s] = X::zero();
    bs[s] = basis + (b0 + s) * d.terms;
  }
  for (std::size_t i = 0; i < d.c_in; ++i) {
    const std::size_t off = (i * d.c_out + j) * d.terms * 16;
    const T* wp = w + off;
    const T* cp = wc + off;
    {
      const V w0 = X::load(wp), c0 = X::load(cp);
      for (std::size_t s = 0; s < NB; ++s) {
        u[s] = w0 * bs[s][0];
        ub[s] = c0 * bs[s][0];
      }
    }
    for (std::size_t k = 1; k < d.terms; ++k) {
      const V wk = X::load(wp + 16 * k), ck = X::load(cp + 16 * k);
      for (std::size_t s = 0; s < NB; ++s) {
        u[s] += wk * bs[s][k];
        ub[s] += ck * bs[s][k];
      }
    }
    for (std::size_t s = 0; s < NB; ++s) {
      const V x = X::load(f + ((b0 + s) * d.c_in + i) * 16);
      acc[s] += X::matmul(x, u[s]);
      acc[s] += X::matmul(ub[s], x);
    }
  }
  for (std::size_t s = 0; s < NB; ++s) X::store(out + ((b0 + s) * d.c_out + j) * 16, acc[s]);
}

/// out[b,j] = sum_i F[b,i] U_b[i,j] + Ub_b[i,j] F[b,i], U never stored.
/// Work is split by (output channel, batch chunk); each task owns its outputs.
template <typename T>
void contract_forward(const T* f, const T* basis, const T* w, const T* wc, T* out, ContractDims d) {
  constexpr std::size_t nb = Simd<T>::native ? 4 : 1;
  const std::size_t chunks = (d.n + kBatchChunk - 1) / kBatchChunk;
  parallel_for(d.c_out * chunks, [&](std::size_t task) {
    const std::size_t j = task / chunks, b0 = (task % chunks) * kBatchChunk;
    const std::size_t b1 = std::min(d.n, b0 + kBatchChunk);
    std::size_t b = b0;
    for (; b + nb <= b1; b += nb) contract_forward_block<T, nb>(f, basis, w, wc, out, d, j, b);
    for (; b < b1; ++b) contract_forward_block<T, 1>(f, basis, w, wc, out, d, j, b);
  });
}

template <typename T, std::size_t NB>
void contract_backward_block(const T* f, const T* basis, const T* w, const T* wc, const T* g, ContractDims d,
                             std::size_t i, std::size_t b0, T* df, T* partial, T* dw, T* dwc,
                             typename Simd<T>::V* acc) {
  using X = Vec16<T>;
  using V = typename X::V;
  V x[NB], dx[NB], gy[NB], du[NB], dub[NB];
  const T* bs[NB];
  for (std::size_t s = 0; s < NB; ++s) {
    bs[s] = basis + (b0 + s) * d.terms;
    x[s] = X::load(f + ((b0 + s) * d.c_in + i) * 16);
    dx[s] = X::zero();
  }
  if (partial)
    for (std::size_t e = 0; e < NB * d.terms; ++e) acc[e] = X::zero();
  for (std::size_t j = 0; j < d.c_out; ++j) {
    const std::size_t off = (i * d.c_out + j) * d.terms * 16;
    const T* wp = w + off;
    const T* cp = wc + off;
    for (std::size_t s = 0; s < NB; ++s) gy[s] = X::load(g + ((b0 + s) * d.c_out + j) * 16);
    if (df) {
      V u[NB], ub[NB];
      const V w0 = X::load(wp), c0 = X::load(cp);
      for (std::size_t s = 0; s < NB; ++s) {
        u[s] = w0 * bs[s][0];
        ub[s] = c0 * bs[s][0];
      }
      for (std::size_t k = 1; k < d.terms; ++k) {
        const V wk = X::load(wp + 16 * k), ck = X::load(cp + 16 * k);
        for (std::size_t s = 0; s < NB; ++s) {
          u[s] += wk * bs[s][k];
          ub[s] += ck * bs[s][k];
        }
      }
      for (std::size_t s = 0; s < NB; ++s) {
        dx[s] += X::matmul_nt(gy[s], u[s]);
        dx[s] += X::matmul_tn(ub[s], gy[s]);
      }
    }
    for (std::size_t s = 0; s < NB; ++s) {
      du[s] = X::matmul_tn(x[s], gy[s]);
      dub[s] = X::matmul_nt(gy[s], x[s]);
    }
    if (dw) {
      for (std::size_t k = 0; k < d.terms; ++k) {
        V a = du[0] * bs[0][k], c = dub[0] * bs[0][k];
        for (std::size_t s = 1; s < NB; ++s) {
          a += du[s] * bs[s][k];
          c += dub[s] * bs[s][k];
        }
        X::add_to(dw + off + 16 * k, a);
        X::add_to(dwc + off + 16 * k, c);
      }
    }
    if (partial) {
      for (std::size_t k = 0; k < d.terms; ++k) {
        const V wk = X::load(wp + 16 * k), ck = X::load(cp + 16 * k);
        for (std::size_t s = 0; s < NB; ++s) acc[s * d.terms + k] += wk * du[s] + ck * dub[s];
      }
    }
  }
  for (std::size_t s = 0; s < NB; ++s) {
    if (df) X::store(df + ((b0 + s) * d.c_in + i) * 16, dx[s]);
    if (partial) {
      T* pp = partial + (i * d.n + b0 + s) * d.terms;
      for (std::size_t k = 0; k < d.terms; ++k) pp[k] = X::hsum(acc[s * d.terms + k]);
    }
  }
}

/// Vector-Jacobian product of contract_forward. Null outputs are skipped.
/// Split by input channel: dF[., i] and dW[i, ...] are owned by task i; the
/// basis gradient is reduced over i afterwards in index order.
template <typename T>
void contract_backward(const T* f, const T* basis, const T* w, const T* wc, const T* g, ContractDims d, T* df,
                       T* dbasis, T* dw, T* dwc) {
  constexpr std::size_t nb = Simd<T>::native ? 4 : 1;
  std::vector<T> partial(dbasis ? d.c_in * d.n * d.terms : 0, T(0));
  T* pp = dbasis ? partial.data() : nullptr;
  if (dw) std::fill(dw, dw + d.c_in * d.c_out * d.terms * 16, T(0));
  if (dwc) std::fill(dwc, dwc + d.c_in * d.c_out * d.terms * 16, T(0));
  parallel_for(d.c_in, [&](std::size_t i) {
    std::vector<typename Simd<T>::V> acc(nb * d.terms);
    std::size_t b = 0;
    for (; b + nb <= d.n; b += nb)
      contract_backward_block<T, nb>(f, basis, w, wc, g, d, i, b, df, pp, dw, dwc, acc.data());
    for (; b < d.n; ++b) contract_backward_block<T, 1>(f, basis, w, wc, g, d, i, b, df, pp, dw, dwc, acc.data());
  });
  if (dbasis) {
    std::fill(dbasis, dbasis + d.n * d.terms, T(0));
    for (std::size_t i = 0; i < d.c_in; ++i)
      for (std::size_t e = 0; e < d.n * d.terms; ++e) dbasis[e] += partial[i * d.n * d.terms + e];
  }
}

template <typename T>
ContractDims check_contract_shapes(const char* op, const Shape& f, std::size_t n_basis, std::size_t terms,
                                   const Shape& w, const Shape& wc) {
  if (f.size() != 4 || f[2] != 4 || f[3] != 4) throw ShapeError(std::string(op) + ": features must be [N,C,4,4], got " + shape_str(f));
  if (w.size() != 5 || w[3] != 4 || w[4] != 4 || w[0] != f[1] || w[2] != terms)
    shape_mismatch(op, f, w);
  if (wc != w) shape_mismatch(op, w, wc);
  if (n_basis != f[0]) throw ShapeError(std::string(op) + ": batch " + std::to_string(f[0]) + " vs " + std::to_string(n_basis));
  return ContractDims{f[0], f[1], w[1], terms};
}

template <typename T>
std::vector<T> rodrigues_basis(const Tensor<T>& theta) {
  using std::cos;
  using std::sin;
  const std::size_t n = theta.dim(0), cj = theta.dim(1), k = 1 + 2 * cj;
  std::vector<T> b(n * k);
  for (std::size_t s = 0; s < n; ++s) {
    b[s * k] = T(1);
    for (std::size_t c = 0; c < cj; ++c) {
      b[s * k + 1 + c] = cos(theta[s * cj + c]);
      b[s * k + 1 + cj + c] = sin(theta[s * cj + c]);
    }
  }
  return b;
}

template <typename T>
ContractDims rodrigues_dims(const typename CustomOp<T>::Inputs& in) {
  const Tensor<T>& theta = *in[1];
  if (theta.rank() != 2) throw ShapeError("joint features must be [N,C_J], got " + shape_str(theta.shape));
  return check_contract_shapes<T>("rodrigues_multichannel", in[0]->shape, theta.dim(0), 1 + 2 * theta.dim(1),
                                  in[2]->shape, in[3]->shape);
}

}  // namespace detail

/// Fused multi-channel operator as a registered custom op.
/// Inputs: F [N,C,4,4], theta [N,CJ], W [C,C',1+2CJ,4,4], W_conj (same).
template <typename T>
const CustomOpHandle<T>& rodrigues_fused_op() {
  static const CustomOpHandle<T> handle = [] {
    CustomOp<T> op;
    op.name = "rodrigues_fused";
    op.forward = [](const typename CustomOp<T>::Inputs& in) {
      const auto d = detail::rodrigues_dims<T>(in);
      const auto basis = detail::rodrigues_basis(*in[1]);
      Tensor<T> out({d.n, d.c_out, 4, 4});
      detail::contract_forward(in[0]->ptr(), basis.data(), in[2]->ptr(), in[3]->ptr(), out.ptr(), d);
      return out;
    };
    op.vjp = [](const typename CustomOp<T>::Inputs& in, const Tensor<T>&, const Tensor<T>& g) {
      using std::cos;
      using std::sin;
      const auto d = detail::rodrigues_dims<T>(in);
      const Tensor<T>& theta = *in[1];
      const std::size_t cj = theta.dim(1);
      const auto basis = detail::rodrigues_basis(theta);
      std::vector<Tensor<T>> grads{Tensor<T>(in[0]->shape), Tensor<T>(theta.shape), Tensor<T>(in[2]->shape),
                                   Tensor<T>(in[3]->shape)};
      std::vector<T> dbasis(d.n * d.terms);
      detail::contract_backward(in[0]->ptr(), basis.data(), in[2]->ptr(), in[3]->ptr(), g.ptr(), d,
                                grads[0].ptr(), dbasis.data(), grads[2].ptr(), grads[3].ptr());
      for (std::size_t s = 0; s < d.n; ++s)
        for (std::size_t c = 0; c < cj; ++c) {
          const T th = theta[s * cj + c];
          grads[1][s * cj + c] = -sin(th) * dbasis[s * d.terms + 1 + c] + cos(th) * dbasis[s * d.terms + 1 + cj + c];
        }
      return grads;
    };
    return register_custom_op<T>(std::move(op), {{2, 2, 4, 4}, {2, 1}, {2, 3, 3, 4, 4}, {2, 3, 3, 4, 4}});
  }();
  return handle;
}

/// Fused contraction against an arbitrary basis. Inputs: F [N,C,4,4],
/// basis [N,K], W [C,C',K,4,4], W_conj (same).
template <typename T>
const CustomOpHandle<T>& basis_contract_fused_op() {
  static const CustomOpHandle<T> handle = [] {
    CustomOp<T> op;
    op.name = "basis_contract_fused";
    auto dims = [](const typename CustomOp<T>::Inputs& in) {
      if (in[1]->rank() != 2) throw ShapeError("basis must be [N,K], got " + shape_str(in[1]->shape));
      return detail::check_contract_shapes<T>("basis_contract", in[0]->shape, in[1]->dim(0), in[1]->dim(1),
                                              in[2]->shape, in[3]->shape);
    };
    op.forward = [dims](const typename CustomOp<T>::Inputs& in) {
      const auto d = dims(in);
      Tensor<T> out({d.n, d.c_out, 4, 4});
      detail::contract_forward(in[0]->ptr(), in[1]->ptr(), in[2]->ptr(), in[3]->ptr(), out.ptr(), d);
      return out;
    };
    op.vjp = [dims](const typename CustomOp<T>::Inputs& in, const Tensor<T>&, const Tensor<T>& g) {
      const auto d = dims(in);
      std::vector<Tensor<T>> grads;
      for (const auto* t : in) grads.emplace_back(t->shape);
      detail::contract_backward(in[0]->ptr(), in[1]->ptr(), in[2]->ptr(), in[3]->ptr(), g.ptr(), d,
                                grads[0].ptr(), grads[1].ptr(), grads[2].ptr(), grads[3].ptr());
      return grads;
    };
    return register_custom_op<T>(std::move(op), {{2, 2, 4, 4}, {2, 3}, {2, 3, 3, 4, 4}, {2, 3, 3, 4, 4}});
  }();
  return handle;
}

// ---------------------------------------------------------------------------
// tape-level operators

/// Contraction built from primitives; U and U_conj are materialized as
/// [N, C, C', 4, 4] tensors and applied with batched matrix products.
template <typename T>
Var<T> basis_contract_reference(Var<T> f, Var<T> basis, Var<T> w, Var<T> wc) {
  const auto d = detail::check_contract_shapes<T>("basis_contract", f.shape(), basis.dim(0), basis.dim(1),
                                                  w.shape(), wc.shape());
  const std::size_t n = d.n, ci = d.c_in, co = d.c_out, k = d.terms;
  auto materialize = [&](Var<T> weights) {
    Var<T> flat = reshape(permute(weights, {2, 0, 1, 3, 4}), {k, ci * co * 16});
    return reshape(matmul(basis, flat), {n, ci, co, 4, 4});
  };
  Var<T> u = materialize(w);
  Var<T> ub = materialize(wc);
  // right: [N,4,4C] x [N,4C,4C']
  Var<T> fr = reshape(permute(f, {0, 2, 1, 3}), {n, 4, 4 * ci});
  Var<T> ur = reshape(permute(u, {0, 1, 3, 2, 4}), {n, 4 * ci, 4 * co});
  Var<T> right = permute(reshape(batched_matmul(fr, ur), {n, 4, co, 4}), {0, 2, 1, 3});
  // left: [N,4C',4C] x [N,4C,4]
  Var<T> ul = reshape(permute(ub, {0, 2, 3, 1, 4}), {n, 4 * co, 4 * ci});
  Var<T> left = reshape(batched_matmul(ul, reshape(f, {n, 4 * ci, 4})), {n, co, 4, 4});
  return add(right, left);
}

template <typename T>
Var<T> rodrigues_basis(Var<T> theta) {
  if (theta.rank() != 2) throw ShapeError("joint features must be [N,C_J], got " + shape_str(theta.shape()));
  Var<T> ones = theta.tape->constant(Tensor<T>({theta.dim(0), 1}, T(1)));
  return concat(std::vector<Var<T>>{ones, cos(theta), sin(theta)}, 1);
}

/// F [N,C,4,4], theta [N,CJ], W / W_conj [C,C',1+2CJ,4,4] -> [N,C',4,4].
template <typename T>
Var<T> rodrigues_multichannel(Var<T> f, Var<T> theta, Var<T> w, Var<T> wc, OpMode mode = OpMode::fused) {
  if (mode == OpMode::fused) return apply_custom(rodrigues_fused_op<T>(), {f, theta, w, wc});
  return basis_contract_reference(f, rodrigues_basis(theta), w, wc);
}

/// q [N,4] -> [N,15] basis (1, q, ww, wi, wj, wk, ii, ij, ik, jj, jk, kk).
template <typename T>
Var<T> quat_basis(Var<T> q) {
  if (q.rank() != 2 || q.dim(1) != 4) throw ShapeError("quaternions must be [N,4], got " + shape_str(q.shape()));
  std::vector<Var<T>> parts{q.tape->constant(Tensor<T>({q.dim(0), 1}, T(1))), q};
  Var<T> comp[4];
  for (std::size_t c = 0; c < 4; ++c) comp[c] = slice(q, 1, c, c + 1);
  for (const auto& m : kQuatMonomials) parts.push_back(mul(comp[m[0]], comp[m[1]]));
  return concat(parts, 1);
}

/// F [N,C,4,4], q [N,4], W / W_conj [C,C',15,4,4] -> [N,C',4,4].
template <typename T>
Var<T> rodrigues_quaternion(Var<T> f, Var<T> q, Var<T> w, Var<T> wc, OpMode mode = OpMode::fused) {
  Var<T> basis = quat_basis(q);
  if (mode == OpMode::fused) return apply_custom(basis_contract_fused_op<T>(), {f, basis, w, wc});
  return basis_contract_reference(f, basis, w, wc);
}

// ---------------------------------------------------------------------------
// benchmark

struct BenchShape {
  std::size_t batch, c_in, c_out, c_joint;
};

struct BenchRow {
  BenchShape shape;
  double reference_ns = 0, fused_ns = 0, speedup = 0, max_abs_diff = 0;
};

inline std::vector<BenchShape> default_bench_grid() {
  return {{256, 16, 16, 16}, {256, 8, 8, 4}, {256, 3, 3, 1}, {32, 16, 16, 16}, {1, 16, 16, 16}};
}

/// Median wall time of the forward pass in each mode (single precision),
/// after `warmup` untimed runs.
inline std::vector<BenchRow> bench_operator(const std::vector<BenchShape>& shapes, std::size_t repetitions = 20,
                                            std::size_t warmup = 3, std::uint64_t seed = 0) {
  std::vector<BenchRow> rows;
  for (const auto& s : shapes) {
    CounterRng rng(seed, "bench");
    auto fill = [&](Shape shape, double scale) {
      Tensor<float> t(std::move(shape));
      for (float& v : t.data) v = float(rng.uniform(-scale, scale));
      return t;
    };
    const Tensor<float> f = fill({s.batch, s.c_in, 4, 4}, 1.0), theta = fill({s.batch, s.c_joint}, 3.0);
    const Shape ks = RodriguesKernel<float>::shape(s.c_in, s.c_out, s.c_joint);
    const Tensor<float> w = fill(ks, 0.1), wc = fill(ks, 0.1);
    auto run = [&](OpMode mode, Tensor<float>* keep) {
      Tape<float> tape;
      NoGradGuard<float> ng(tape);
      const auto t0 = std::chrono::steady_clock::now();
      Var<float> out = rodrigues_multichannel(tape.constant(f), tape.constant(theta), tape.constant(w),
                                              tape.constant(wc), mode);
      const auto t1 = std::chrono::steady_clock::now();
      if (keep) *keep = out.value();
      return double(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count());
    };
    auto median = [&](OpMode mode) {
      for (std::size_t i = 0; i < warmup; ++i) run(mode, nullptr);
      std::vector<double> t;
      for (std::size_t i = 0; i < std::max<std::size_t>(repetitions, 1); ++i) t.push_back(run(mode, nullptr));
      std::nth_element(t.begin(), t.begin() + t.size() / 2, t.end());
      return t[t.size() / 2];
    };
    BenchRow row{s};
    row.reference_ns = median(OpMode::reference);
    row.fused_ns = median(OpMode::fused);
    row.speedup = row.reference_ns / row.fused_ns;
    Tensor<float> a, b;
    run(OpMode::reference, &a);
    run(OpMode::fused, &b);
    for (std::size_t i = 0; i < a.size(); ++i)
      row.max_abs_diff = std::max(row.max_abs_diff, double(std::abs(a[i] - b[i])));
    rows.push_back(row);
  }
  return rows;
}

inline void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "batch,c_in,c_out,c_joint,reference_ns,fused_ns,speedup,max_abs_diff\n";
  for (const auto& r : rows) {
    out << r.shape.batch << ',' << r.shape.c_in << ',' << r.shape.c_out << ',' << r.shape.c_joint << ','
        << r.reference_ns << ',' << r.fused_ns << ',' << r.speedup << ',' << r.max_abs_diff << '\n';
  }
}

}  // namespace rodrinet
