#pragma once

// Central-difference gradient oracle. Analytic gradients come from backward()
// in double; the difference quotient is evaluated in 113-bit quad precision so
// that its rounding noise (eps * |f| / step) is far below the 1e-8 floor of the
// relative-error denominator. In double that noise is ~1e-10 and swamps
// gradients that are zero by construction.

#include <boost/multiprecision/eigen.hpp>
#include <boost/multiprecision/float128.hpp>

#include <algorithm>
#include <cmath>
#include <string>

#include "rodrinet/autodiff.hpp"

namespace rodrinet {

using Quad = boost::multiprecision::float128;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "param[index] analytic .. numeric .."
};

/// |a - n| / max(1e-8, |a| + |n|)
inline double gradcheck_relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

/// Copies values between stores that hold the same parameters in the same order.
template <typename From, typename To>
void copy_parameters(const ParameterStore<From>& src, ParameterStore<To>& dst) {
  if (src.size() != dst.size()) throw ShapeError("parameter stores differ in size");
  auto d = dst.begin();
  for (const auto& p : src) {
    if (p.name != d->name || p.value.shape != d->value.shape)
      throw ShapeError("parameter " + p.name + " does not match " + d->name);
    for (std::size_t i = 0; i < p.value.size(); ++i) d->value[i] = static_cast<To>(p.value[i]);
    ++d;
  }
}

/// `loss_d` and `loss_q` build the same scalar on a fresh tape from the
/// parameters in `store_d` / `store_q` respectively.
template <typename LossD, typename LossQ>
GradCheckReport gradcheck(ParameterStore<double>& store_d, LossD&& loss_d, ParameterStore<Quad>& store_q,
                          LossQ&& loss_q, double step = 1e-6) {
  store_d.zero_grad();
  {
    Tape<double> tape;
    tape.backward(loss_d(tape));
  }
  copy_parameters(store_d, store_q);
  auto eval = [&] {
    Tape<Quad> tape;
    NoGradGuard<Quad> ng(tape);
    return loss_q(tape).value().item();
  };
  const Quad h(step);
  GradCheckReport rep;
  auto pq = store_q.begin();
  for (auto& p : store_d) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const Quad x0 = pq->value[i];
      pq->value[i] = x0 + h;
      const Quad fp = eval();
      pq->value[i] = x0 - h;
      const Quad fm = eval();
      pq->value[i] = x0;
      const double numeric = static_cast<double>((fp - fm) / (2 * h));
      const double err = gradcheck_relative_error(p.grad[i], numeric);
      ++rep.checked;
      if (err > rep.max_rel_error || rep.worst.empty()) {
        rep.max_rel_error = err;
        rep.worst = p.name + "[" + std::to_string(i) + "] analytic " + std::to_string(p.grad[i]) +
                    " numeric " + std::to_string(numeric);
      }
    }
    ++pq;
  }
  return rep;
}

/// Single-store form: `loss(tape, store)` is generic over the scalar type.
template <typename Loss>
GradCheckReport gradcheck(ParameterStore<double>& store, Loss&& loss, double step = 1e-6) {
  ParameterStore<Quad> mirror;
  for (const auto& p : store) mirror.add(p.name, p.value.shape);
  return gradcheck(
      store, [&](Tape<double>& t) { return loss(t, store); }, mirror,
      [&](Tape<Quad>& t) { return loss(t, mirror); }, step);
}

/// Fills every parameter with uniform values in [lo, hi).
inline void randomize(ParameterStore<double>& store, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  for (auto& p : store)
    for (double& v : p.value.data) v = rng.uniform(lo, hi);
}

/// Standard-normal tensor; used to project a tensor output onto a scalar loss.
template <typename T>
Tensor<T> random_tensor(const Shape& shape, CounterRng& rng) {
  Tensor<T> t(shape);
  for (T& v : t.data) v = T(rng.normal());
  return t;
}

}  // namespace rodrinet
