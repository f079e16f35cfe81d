#pragma once

// Invariant checks shared by the CLI (degeneracy-check, selftest) and the
// acceptance runner.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "rodrinet/gradcheck.hpp"
#include "rodrinet/kinematics.hpp"
#include "rodrinet/network.hpp"
#include "rodrinet/rodrigues_op.hpp"
#include "rodrinet/tasks.hpp"

namespace rodrinet {

inline constexpr double kDegeneracyTolerance = 1e-10;
inline constexpr double kGradcheckTolerance = 1e-5;

// ---------------------------------------------------------------------------
// degeneracy

struct DegeneracyResult {
  double max_deviation = 0;
  std::size_t trials = 0;
};

namespace detail {

inline double pose_deviation(const Pose<double>& a, const double* b) {
  double worst = 0;
  for (int r = 0; r < 3; ++r) {
    worst = std::max(worst, std::abs(a.translation[r] - b[r]));
    for (int c = 0; c < 3; ++c) worst = std::max(worst, std::abs(a.rotation(r, c) - b[3 + 3 * r + c]));
  }
  return worst;
}

// Classical quaternion kernels chained down the tree; each revolute joint
// contributes q = (cos(theta/2), sin(theta/2) axis).
inline Tensor<double> quaternion_chain(const KinematicTree& tree, const std::vector<Configuration>& cfgs) {
  const std::size_t n = cfgs.size(), d = tree.dof();
  Tape<double> tape;
  NoGradGuard<double> ng(tape);
  std::vector<Var<double>> link(tree.num_links());
  Tensor<double> root({n, 1, 4, 4});
  for (std::size_t b = 0; b < n; ++b) Eigen::Map<Mat4R<double>>(root.ptr() + 16 * b) = cfgs[b].root_pose.matrix();
  link[0] = tape.constant(root);
  const Var<double> conj = tape.constant(Tensor<double>(QuatRodriguesKernel<double>::shape(1, 1)));
  for (std::size_t j = 0; j < d; ++j) {
    const Joint& joint = tree.joints[j];
    Tensor<double> q({n, 4});
    for (std::size_t b = 0; b < n; ++b) {
      const auto u = UnitQuaternion<double>::from_axis_angle(JointAxis<double>(joint.axis), cfgs[b].joint_angles[j]);
      q[4 * b] = u.w, q[4 * b + 1] = u.i, q[4 * b + 2] = u.j, q[4 * b + 3] = u.k;
    }
    const auto k = quat_init_from_classical(joint.fixed_transform);
    link[joint.child_link] =
        rodrigues_quaternion(link[joint.parent_link], tape.constant(q), tape.constant(k.weight), conj);
  }
  Tensor<double> out({n, tree.num_links() * kPoseValues});
  for (std::size_t l = 0; l < tree.num_links(); ++l) {
    const Tensor<double>& v = link[l].value();
    for (std::size_t b = 0; b < n; ++b)
      write_pose(Pose<double>::from_matrix(Eigen::Map<const Mat4R<double>>(v.ptr() + 16 * b)),
                 out.ptr() + b * out.dim(1) + l * kPoseValues);
  }
  return out;
}

}  // namespace detail

/// Classically initialized single-channel chain versus forward_kinematics on
/// `trials` random configurations. `quaternion` swaps the per-joint operator
/// for the quaternion form with its classical coefficients.
inline DegeneracyResult degeneracy_check(const KinematicTree& tree, std::size_t trials, std::uint64_t seed,
                                         bool quaternion = false) {
  CounterRng rng(seed, quaternion ? "degeneracy-quat" : "degeneracy");
  std::vector<Configuration> cfgs;
  for (std::size_t i = 0; i < trials; ++i) cfgs.push_back(sample_configuration(tree, rng));

  Tensor<double> pred;
  if (quaternion) {
    pred = detail::quaternion_chain(tree, cfgs);
  } else {
    RodriNetConfig c = RodriNetConfig::fk_reference();
    c.c_link = c.c_joint = 1;
    c.degenerate_mode = true;
    c.num_blocks = std::max<std::size_t>(tree.depth(), 1);
    ModelSpec spec;
    spec.task = Task::fk;
    spec.rodrinet = c;
    const Network net(spec, tree);
    ParameterStore<double> s;
    net.declare(s);
    net.load_classical(s);
    Tensor<double> x({trials, net.input_dim()});
    for (std::size_t b = 0; b < trials; ++b) {
      double* row = x.ptr() + b * net.input_dim();
      if (tree.free_floating()) {
        write_pose(cfgs[b].root_pose, row);
        row += kPoseValues;
      }
      std::copy(cfgs[b].joint_angles.begin(), cfgs[b].joint_angles.end(), row);
    }
    pred = net.predict(s, x);
  }

  DegeneracyResult r{0, trials};
  const std::size_t stride = tree.num_links() * kPoseValues;
  for (std::size_t b = 0; b < trials; ++b) {
    const auto poses = forward_kinematics(tree, cfgs[b]);
    for (std::size_t l = 0; l < poses.size(); ++l)
      r.max_deviation =
          std::max(r.max_deviation, detail::pose_deviation(poses[l], pred.ptr() + b * stride + l * kPoseValues));
  }
  return r;
}

// ---------------------------------------------------------------------------
// fused vs reference operator

/// Max |fused - reference| of the multi-channel operator forward on random
/// inputs of the given shape. Weights are uniform in +-`weight_scale`; the
/// default is the initialization bound of the kernels.
template <typename T>
double fused_reference_diff(const BenchShape& s, std::uint64_t seed, double weight_scale = -1) {
  if (weight_scale < 0) weight_scale = kernel_init_bound(s.c_in, 1 + 2 * s.c_joint);
  CounterRng rng(seed, "fused-vs-reference");
  auto fill = [&](Shape shape, double scale) {
    Tensor<T> t(std::move(shape));
    for (T& v : t.data) v = T(rng.uniform(-scale, scale));
    return t;
  };
  const Shape ks = RodriguesKernel<T>::shape(s.c_in, s.c_out, s.c_joint);
  const Tensor<T> f = fill({s.batch, s.c_in, 4, 4}, 1.0), theta = fill({s.batch, s.c_joint}, 3.0),
                  w = fill(ks, weight_scale), wc = fill(ks, weight_scale);
  Tape<T> tape;
  NoGradGuard<T> ng(tape);
  auto run = [&](OpMode m) {
    return rodrigues_multichannel(tape.constant(f), tape.constant(theta), tape.constant(w), tape.constant(wc), m)
        .value();
  };
  const Tensor<T> a = run(OpMode::fused), b = run(OpMode::reference);
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, double(std::abs(a[i] - b[i])));
  return worst;
}

// ---------------------------------------------------------------------------
// IK round trip

struct IkRoundTrip {
  std::size_t trials = 0, converged = 0;
  double max_translation_error = 0, max_rotation_error = 0;  // over converged trials
};

/// FK targets from in-limit angles, solved from the midpoint of the joint
/// ranges.
inline IkRoundTrip ik_round_trip(const KinematicTree& tree, std::size_t trials, std::uint64_t seed,
                                 const IkOptions& opt = {}) {
  CounterRng rng(seed, "ik-round-trip");
  std::vector<double> mid;
  for (const Joint& j : tree.joints) mid.push_back(0.5 * (j.lower + j.upper));
  IkRoundTrip r;
  r.trials = trials;
  for (std::size_t t = 0; t < trials; ++t) {
    Configuration cfg = sample_configuration(tree, rng);
    const Pose<double> target = forward_kinematics(tree, cfg)[tree.end_effector];
    try {
      cfg.joint_angles = inverse_kinematics(tree, target, mid, opt, cfg.root_pose);
    } catch (const IKDidNotConverge&) {
      continue;
    }
    const Pose<double> reached = forward_kinematics(tree, cfg)[tree.end_effector];
    r.max_translation_error = std::max(r.max_translation_error, (reached.translation - target.translation).norm());
    r.max_rotation_error = std::max(r.max_rotation_error, geodesic_angle(reached.rotation, target.rotation));
    ++r.converged;
  }
  return r;
}

// ---------------------------------------------------------------------------
// selftest

struct PropertyResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace detail {

template <typename Loss>
PropertyResult gradcheck_property(const std::string& name, std::size_t seeds,
                                  const std::function<ParameterStore<double>(std::uint64_t)>& make, Loss loss) {
  double worst = 0;
  std::string where;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    ParameterStore<double> s = make(seed);
    const auto rep = gradcheck(s, [&](auto& t, auto& st) { return loss(t, st, seed); });
    if (rep.max_rel_error >= worst) worst = rep.max_rel_error, where = rep.worst;
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "max rel error %.3e", worst);
  return {name, worst < kGradcheckTolerance, std::string(buf) + (worst >= kGradcheckTolerance ? " at " + where : "")};
}

// Projects y onto a fixed random direction.
template <typename S>
Var<S> project(Tape<S>& t, Var<S> y, std::uint64_t seed) {
  CounterRng rng(seed, "selftest-projection");
  return sum(mul(y, t.constant(random_tensor<S>(y.shape(), rng))));
}

}  // namespace detail

/// Embedded invariant suite. `arm` should be a fixed-root 6-DoF arm.
inline std::vector<PropertyResult> run_selftest(const KinematicTree& arm) {
  std::vector<PropertyResult> out;
  char buf[128];

  out.push_back(detail::gradcheck_property(
      "gradcheck: multi-channel operator", 5,
      [](std::uint64_t seed) {
        CounterRng srng(seed, "selftest-op-shapes");
        const std::size_t n = 1 + srng.below(3), ci = 1 + srng.below(3), co = 1 + srng.below(3),
                          cj = 1 + srng.below(3);
        ParameterStore<double> s;
        s.add("f", {n, ci, 4, 4});
        s.add("theta", {n, cj});
        s.add("w", RodriguesKernel<double>::shape(ci, co, cj));
        s.add("wc", RodriguesKernel<double>::shape(ci, co, cj));
        CounterRng rng(seed, "selftest-op-values");
        randomize(s, rng);
        return s;
      },
      [](auto& t, auto& st, std::uint64_t seed) {
        std::vector<decltype(t.param(*st.begin()))> x;
        for (auto& p : st) x.push_back(t.param(p));
        return detail::project(t, rodrigues_multichannel(x[0], x[1], x[2], x[3]), seed);
      }));

  const KinematicTree two_link = [] {
    KinematicTree t;
    t.name = "selftest_chain";
    t.links = {"base", "l1", "l2"};
    Joint a;
    a.id = "j0", a.parent_link = 0, a.child_link = 1, a.lower = -3, a.upper = 3;
    Joint b = a;
    b.id = "j1", b.parent_link = 1, b.child_link = 2;
    b.fixed_transform.translation = Vec3<double>(1, 0, 0);
    b.axis = Vec3<double>(0, 1, 0);
    t.joints = {a, b};
    t.end_effector = 2;
    return t;
  }();
  for (Task task : {Task::fk, Task::motion}) {
    RodriNetConfig c;
    c.num_blocks = 1, c.c_link = 1, c.c_joint = 2, c.d_attn = 4, c.heads = 2;
    c.c_global = task == Task::motion ? 2 : 0;
    ModelSpec spec;
    spec.task = task;
    spec.rodrinet = c;
    const Network net(spec, two_link);
    out.push_back(detail::gradcheck_property(
        std::string("gradcheck: RodriNet blocks (") + (task == Task::fk ? "fk" : "motion") + ")", 1,
        [&](std::uint64_t seed) { return net.make_parameters<double>(seed); },
        [&](auto& t, auto& st, std::uint64_t seed) {
          using S = typename std::decay_t<decltype(t)>::value_type;
          CounterRng rng(seed, "selftest-x");
          const Tensor<S> x = random_tensor<S>({2, net.input_dim()}, rng);
          return detail::project(t, net.forward(t, st, t.constant(x)), seed);
        }));
  }

  {
    double worst_f = 0, worst_d = 0;
    std::uint64_t seed = 0;
    for (std::size_t n : {1, 32})
      for (std::size_t c : {1, 3, 8}) {
        const BenchShape s{n, c, c + 1, c};
        worst_f = std::max(worst_f, fused_reference_diff<float>(s, seed));
        worst_d = std::max(worst_d, fused_reference_diff<double>(s, seed++));
      }
    std::snprintf(buf, sizeof buf, "max diff %.3e float, %.3e double", worst_f, worst_d);
    out.push_back({"fused operator matches reference", worst_f <= 1e-5 && worst_d <= 1e-12, buf});
  }

  for (bool quat : {false, true}) {
    const auto r = degeneracy_check(arm, 100, 0, quat);
    std::snprintf(buf, sizeof buf, "max deviation %.3e over %zu configurations", r.max_deviation, r.trials);
    out.push_back({quat ? "quaternion degeneracy" : "FK degeneracy", r.max_deviation <= kDegeneracyTolerance, buf});
  }

  {
    const auto r = ik_round_trip(arm, 100, 0);
    std::snprintf(buf, sizeof buf, "%zu/%zu converged, max error %.2e m %.2e rad", r.converged, r.trials,
                  r.max_translation_error, r.max_rotation_error);
    out.push_back({"IK round trip", r.converged * 100 >= r.trials * 99 && r.max_translation_error < 1e-6 &&
                                        r.max_rotation_error < 1e-6,
                   buf});
  }
  return out;
}

}  // namespace rodrinet
