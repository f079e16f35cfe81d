#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <string>

#include "rodrinet/errors.hpp"
#include "rodrinet/rng.hpp"

namespace rodrinet {

template <typename T> using Vec3 = Eigen::Matrix<T, 3, 1>;
template <typename T> using Mat3 = Eigen::Matrix<T, 3, 3>;
template <typename T> using Mat4 = Eigen::Matrix<T, 4, 4>;

/// Rotation matrices are plain 3x3 matrices; the SO(3) invariants are checked
/// with is_rotation() where it matters.
template <typename T> using Rotation3 = Mat3<T>;

template <typename T>
constexpr T unit_tolerance() {
  return std::is_same_v<T, float> ? T(1e-6) : T(1e-12);
}

template <typename T>
bool is_rotation(const Mat3<T>& r, T tol = unit_tolerance<T>()) {
  const Mat3<T> err = r.transpose() * r - Mat3<T>::Identity();
  return err.cwiseAbs().maxCoeff() <= tol && std::abs(r.determinant() - T(1)) <= tol;
}

template <typename T>
Mat3<T> skew(const Vec3<T>& w) {
  Mat3<T> k;
  k << T(0), -w.z(), w.y(),
       w.z(), T(0), -w.x(),
       -w.y(), w.x(), T(0);
  return k;
}

/// Unit rotation axis of a revolute joint.
template <typename T>
class JointAxis {
 public:
  explicit JointAxis(const Vec3<T>& v) : v_(v) {
    if (!(std::abs(v.norm() - T(1)) <= T(1e-6))) {
      throw InvalidAxis("axis norm " + std::to_string(double(v.norm())) + " is not 1");
    }
  }
  JointAxis(T x, T y, T z) : JointAxis(Vec3<T>(x, y, z)) {}

  const Vec3<T>& vector() const { return v_; }

 private:
  Vec3<T> v_;
};

/// Unit quaternion (w, i, j, k).
template <typename T>
struct UnitQuaternion {
  T w, i, j, k;

  static UnitQuaternion make(T w, T i, T j, T k) {
    const T n = std::sqrt(w * w + i * i + j * j + k * k);
    if (!(std::abs(n - T(1)) <= T(1e-6))) {
      throw InvalidQuaternion("norm " + std::to_string(double(n)) + " is not 1");
    }
    return {w, i, j, k};
  }

  static UnitQuaternion from_axis_angle(const JointAxis<T>& axis, T angle) {
    const T s = std::sin(angle / 2);
    const Vec3<T>& a = axis.vector();
    return {std::cos(angle / 2), s * a.x(), s * a.y(), s * a.z()};
  }

  UnitQuaternion operator-() const { return {-w, -i, -j, -k}; }
  T dot(const UnitQuaternion& o) const { return w * o.w + i * o.i + j * o.j + k * o.k; }
};

/// R = I + sin(angle) [w] + (1 - cos(angle)) [w]^2.
template <typename T>
Rotation3<T> rodrigues_rotation(const JointAxis<T>& axis, T angle) {
  const Mat3<T> k = skew(axis.vector());
  return Mat3<T>::Identity() + std::sin(angle) * k + (T(1) - std::cos(angle)) * (k * k);
}

template <typename T>
Rotation3<T> rodrigues_rotation(const Vec3<T>& axis, T angle) {
  return rodrigues_rotation(JointAxis<T>(axis), angle);
}

/// Quaternion to rotation matrix, entry for entry in the (w, i, j, k) convention.
template <typename T>
Rotation3<T> quat_to_matrix(const UnitQuaternion<T>& q) {
  const UnitQuaternion<T> u = UnitQuaternion<T>::make(q.w, q.i, q.j, q.k);
  const T w = u.w, i = u.i, j = u.j, k = u.k;
  Mat3<T> r;
  r << T(1) - T(2) * (j * j + k * k), T(2) * (i * j - k * w), T(2) * (i * k + j * w),
       T(2) * (i * j + k * w), T(1) - T(2) * (i * i + k * k), T(2) * (j * k - i * w),
       T(2) * (i * k - j * w), T(2) * (j * k + i * w), T(1) - T(2) * (i * i + j * j);
  return r;
}

template <typename T>
UnitQuaternion<T> matrix_to_quat(const Rotation3<T>& r) {
  Eigen::Quaternion<T> q(r);
  q.normalize();
  return {q.w(), q.x(), q.y(), q.z()};
}

/// Rigid transform x -> rotation * x + translation.
template <typename T>
struct Pose {
  Rotation3<T> rotation = Rotation3<T>::Identity();
  Vec3<T> translation = Vec3<T>::Zero();

  static Pose identity() { return Pose{}; }

  static Pose from_matrix(const Mat4<T>& m) {
    return Pose{m.template topLeftCorner<3, 3>(), m.template topRightCorner<3, 1>()};
  }

  Mat4<T> matrix() const {
    Mat4<T> m = Mat4<T>::Identity();
    m.template topLeftCorner<3, 3>() = rotation;
    m.template topRightCorner<3, 1>() = translation;
    return m;
  }

  template <typename U>
  Pose<U> cast() const {
    return Pose<U>{rotation.template cast<U>(), translation.template cast<U>()};
  }
};

template <typename T>
Pose<T> pose_compose(const Pose<T>& a, const Pose<T>& b) {
  return Pose<T>{a.rotation * b.rotation, a.rotation * b.translation + a.translation};
}

template <typename T>
Pose<T> operator*(const Pose<T>& a, const Pose<T>& b) {
  return pose_compose(a, b);
}

template <typename T>
Pose<T> pose_invert(const Pose<T>& a) {
  const Mat3<T> rt = a.rotation.transpose();
  return Pose<T>{rt, -(rt * a.translation)};
}

/// Rotation about x, y, z composed as Rz(yaw) * Ry(pitch) * Rx(roll).
template <typename T>
Rotation3<T> rpy_rotation(T roll, T pitch, T yaw) {
  return rodrigues_rotation(JointAxis<T>(0, 0, 1), yaw) *
         rodrigues_rotation(JointAxis<T>(0, 1, 0), pitch) *
         rodrigues_rotation(JointAxis<T>(1, 0, 0), roll);
}

/// Angle of the relative rotation a^T b, in [0, pi].
///
/// Evaluated as atan2(|sin|, cos) with cos = (trace - 1) / 2 clamped to [-1, 1];
/// this agrees with the arccos form but keeps full precision near 0 and pi.
template <typename T>
T geodesic_angle(const Rotation3<T>& a, const Rotation3<T>& b) {
  const Mat3<T> rel = a.transpose() * b;
  const T c = std::clamp((rel.trace() - T(1)) / T(2), T(-1), T(1));
  const Vec3<T> v(rel(2, 1) - rel(1, 2), rel(0, 2) - rel(2, 0), rel(1, 0) - rel(0, 1));
  const T s = std::min(v.norm() / T(2), T(1));
  return std::atan2(s, c);
}

/// Rotation vector (axis * angle, angle in [0, pi]) of r.
template <typename T>
Vec3<T> rotation_log(const Rotation3<T>& r) {
  const Eigen::AngleAxis<T> aa{Eigen::Quaternion<T>(r)};
  return aa.axis() * aa.angle();
}

/// Spherical interpolation between unit quaternions along the shorter arc.
template <typename T>
UnitQuaternion<T> slerp(UnitQuaternion<T> a, UnitQuaternion<T> b, T t) {
  T d = a.dot(b);
  if (d < T(0)) {
    b = -b;
    d = -d;
  }
  T wa, wb;
  if (d > T(1) - T(1e-12)) {
    wa = T(1) - t;
    wb = t;
  } else {
    const T omega = std::acos(std::min(d, T(1)));
    const T so = std::sin(omega);
    wa = std::sin((T(1) - t) * omega) / so;
    wb = std::sin(t * omega) / so;
  }
  UnitQuaternion<T> q{wa * a.w + wb * b.w, wa * a.i + wb * b.i, wa * a.j + wb * b.j,
                      wa * a.k + wb * b.k};
  const T n = std::sqrt(q.dot(q));
  return {q.w / n, q.i / n, q.j / n, q.k / n};
}

/// Linear interpolation of translation and slerp of rotation.
template <typename T>
Pose<T> interpolate_pose(const Pose<T>& start, const Pose<T>& end, T t) {
  if (!(t >= T(0) && t <= T(1))) {
    throw InvalidParameter("interpolation parameter " + std::to_string(double(t)) +
                           " outside [0, 1]");
  }
  if (t == T(0)) return start;
  if (t == T(1)) return end;
  Pose<T> out;
  out.translation = (T(1) - t) * start.translation + t * end.translation;
  out.rotation = quat_to_matrix(slerp(matrix_to_quat(start.rotation),
                                      matrix_to_quat(end.rotation), t));
  return out;
}

/// Haar-uniform rotation from a normalized 4-vector of standard normals.
template <typename T = double>
Rotation3<T> sample_rotation_uniform(CounterRng& rng) {
  double q[4];
  double n = 0.0;
  do {
    n = 0.0;
    for (double& c : q) {
      c = rng.normal();
      n += c * c;
    }
  } while (n < 1e-12);
  n = std::sqrt(n);
  return quat_to_matrix(UnitQuaternion<T>{T(q[0] / n), T(q[1] / n), T(q[2] / n), T(q[3] / n)});
}

}  // namespace rodrinet
