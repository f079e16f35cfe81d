#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <new>
#include <numeric>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "rodrinet/errors.hpp"

namespace rodrinet {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

[[noreturn]] inline void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": " + shape_str(a) + " vs " + shape_str(b));
}

/// Storage alignment of every tensor. Vectorized kernels peel unaligned
/// heads into scalar code, so a fixed base alignment keeps rounding a
/// function of shapes alone.
inline constexpr std::size_t kTensorAlignment = 64;

template <typename T>
struct AlignedAllocator {
  using value_type = T;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kTensorAlignment}));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{kTensorAlignment}); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major array.
template <typename T>
struct Tensor {
  Shape shape;
  Buffer<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(numel(shape), fill) {}
  Tensor(Shape s, Buffer<T> d) : shape(std::move(s)), data(std::move(d)) { check_size(); }
  Tensor(Shape s, const std::vector<T>& d) : shape(std::move(s)), data(d.begin(), d.end()) { check_size(); }
  Tensor(Shape s, std::initializer_list<T> d) : shape(std::move(s)), data(d) { check_size(); }

  static Tensor scalar(T v) { return Tensor(Shape{}, {v}); }

  std::vector<T> to_vector() const { return std::vector<T>(data.begin(), data.end()); }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  bool empty() const { return data.empty(); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  T item() const {
    if (data.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape));
    return data[0];
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    std::transform(data.begin(), data.end(), out.data.begin(), [](const T& v) { return static_cast<U>(v); });
    return out;
  }

  void check_size() const {
    if (data.size() != numel(shape)) {
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    }
  }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](const T& v) {
      using std::isfinite;
      return isfinite(v);
    });
  }
};

// ---------------------------------------------------------------------------
// worker pool

namespace detail {
inline std::size_t& thread_count_ref() {
  static std::size_t n = 1;
  return n;
}
}  // namespace detail

inline void set_num_threads(std::size_t n) { detail::thread_count_ref() = std::max<std::size_t>(1, n); }
inline std::size_t num_threads() { return detail::thread_count_ref(); }

/// Runs fn(task) for task in [0, n). Tasks are dealt out in fixed contiguous
/// chunks, so a kernel that writes disjoint outputs per task is deterministic
/// for any thread count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min(num_threads(), n);
  if (workers <= 1) {
    for (std::size_t t = 0; t < n; ++t) fn(t);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  const std::size_t chunk = (n + workers - 1) / workers;
  auto run = [&](std::size_t w) {
    const std::size_t lo = w * chunk, hi = std::min(n, lo + chunk);
    for (std::size_t t = lo; t < hi; ++t) fn(t);
  };
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run, w);
  run(0);
  for (auto& th : pool) th.join();
}

}  // namespace rodrinet
