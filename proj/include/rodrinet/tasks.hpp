#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "rodrinet/errors.hpp"
#include "rodrinet/kinematics.hpp"
#include "rodrinet/network.hpp"
#include "rodrinet/rdnt.hpp"
#include "rodrinet/rng.hpp"
#include "rodrinet/se3.hpp"
#include "rodrinet/tensor.hpp"

namespace rodrinet {

inline constexpr double kRootTranslationRange = 0.05;
inline constexpr std::size_t kTrajectoryFrames = kHistoryFrames + kFutureFrames;
inline constexpr std::size_t kRejectionBudget = 100;

// ---------------------------------------------------------------------------
// forward kinematics samples

inline std::size_t fk_input_dim(const KinematicTree& tree) {
  return (tree.free_floating() ? kPoseValues : 0) + tree.dof();
}
inline std::size_t fk_target_dim(const KinematicTree& tree) { return tree.num_links() * kPoseValues; }

/// Writes [T, R row-major] of `p` to out[0..12).
template <typename T>
void write_pose(const Pose<double>& p, T* out) {
  for (int r = 0; r < 3; ++r) out[r] = T(p.translation[r]);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out[3 + 3 * r + c] = T(p.rotation(r, c));
}

template <typename T>
Pose<double> read_pose(const T* in) {
  Pose<double> p;
  for (int r = 0; r < 3; ++r) p.translation[r] = double(in[r]);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) p.rotation(r, c) = double(in[3 + 3 * r + c]);
  return p;
}

struct FkBatch {
  Tensor<double> input;   // [n, fk_input_dim]
  Tensor<double> target;  // [n, (D+1) * 12]
  std::vector<Configuration> configurations;
};

inline Configuration sample_configuration(const KinematicTree& tree, CounterRng& rng) {
  Configuration cfg;
  if (tree.free_floating()) {
    for (int r = 0; r < 3; ++r) cfg.root_pose.translation[r] = rng.uniform(-kRootTranslationRange, kRootTranslationRange);
    cfg.root_pose.rotation = sample_rotation_uniform(rng);
  }
  for (const Joint& j : tree.joints) cfg.joint_angles.push_back(rng.uniform(j.lower, j.upper));
  return cfg;
}

inline FkBatch sample_fk_batch(const KinematicTree& tree, std::size_t n, CounterRng& rng) {
  const std::size_t din = fk_input_dim(tree), dout = fk_target_dim(tree);
  FkBatch b{Tensor<double>({n, din}), Tensor<double>({n, dout}), {}};
  b.configurations.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    Configuration cfg = sample_configuration(tree, rng);
    double* x = b.input.ptr() + s * din;
    if (tree.free_floating()) {
      write_pose(cfg.root_pose, x);
      x += kPoseValues;
    }
    std::copy(cfg.joint_angles.begin(), cfg.joint_angles.end(), x);
    const auto poses = forward_kinematics(tree, cfg);
    for (std::size_t l = 0; l < poses.size(); ++l) write_pose(poses[l], b.target.ptr() + s * dout + l * kPoseValues);
    b.configurations.push_back(std::move(cfg));
  }
  return b;
}

// ---------------------------------------------------------------------------
// motion trajectories

struct MotionTrajectory {
  std::vector<std::vector<double>> frames;  // 16 x D, every value exactly representable in float
  std::vector<Pose<double>> waypoints;      // interpolated end-effector targets
  std::size_t rejections = 0;
};

struct MotionOptions {
  double tolerance = 1e-6;
  IkOptions ik{};
};

/// Nearest float to x that still lies in [lo, hi].
inline double storage_angle(double x, double lo, double hi) {
  float f = static_cast<float>(x);
  if (double(f) > hi) f = std::nextafter(f, -std::numeric_limits<float>::infinity());
  if (double(f) < lo) f = std::nextafter(f, std::numeric_limits<float>::infinity());
  return double(f);
}

inline void require_motion_robot(const KinematicTree& tree) {
  if (tree.dof() != 6 || tree.free_floating())
    throw ConfigError("motion data needs a fixed-base 6-joint arm, got '" + tree.name + "' with " +
                      std::to_string(tree.dof()) + " joints" + (tree.free_floating() ? " and a free root" : ""));
  for (const Joint& j : tree.joints)
    if (!std::isfinite(j.lower) || !std::isfinite(j.upper) || j.upper - j.lower > M_PI)
      throw ConfigError("motion data needs restricted joint ranges; joint '" + j.id + "' spans more than pi");
}

namespace detail {

inline bool pose_close(const Pose<double>& a, const Pose<double>& b, double tol) {
  return (a.translation - b.translation).norm() <= tol && geodesic_angle(a.rotation, b.rotation) <= tol;
}

}  // namespace detail

/// One trajectory: IK along the Cartesian interpolation between two random
/// configurations. Failed attempts are resampled from the same stream.
inline MotionTrajectory generate_motion_trajectory(const KinematicTree& tree, CounterRng& rng,
                                                   const MotionOptions& opt = {}) {
  require_motion_robot(tree);
  const std::size_t d = tree.dof();
  const auto endpoint = [&] {
    std::vector<double> th(d);
    for (std::size_t j = 0; j < d; ++j) {
      const Joint& jt = tree.joints[j];
      th[j] = storage_angle(rng.uniform(jt.lower, jt.upper), jt.lower, jt.upper);
    }
    return th;
  };
  const auto ee = [&](const std::vector<double>& th) {
    return forward_kinematics(tree, Configuration{Pose<double>::identity(), th})[tree.end_effector];
  };

  MotionTrajectory out;
  for (std::size_t attempt = 0; attempt < kRejectionBudget; ++attempt) {
    const std::vector<double> start = endpoint(), end = endpoint();
    const Pose<double> ps = ee(start), pe = ee(end);
    out.frames.assign(1, start);
    out.waypoints.assign(1, ps);
    bool ok = true;
    for (std::size_t k = 1; k < kTrajectoryFrames && ok; ++k) {
      const double t = double(k) / double(kTrajectoryFrames - 1);
      const Pose<double> target = interpolate_pose(ps, pe, t);
      std::vector<double> th;
      try {
        th = inverse_kinematics(tree, target, out.frames.back(), opt.ik);
      } catch (const IKDidNotConverge&) {
        ok = false;
        break;
      }
      if (k + 1 == kTrajectoryFrames) {
        // a different IK branch at the far end means the path left the unique one
        for (std::size_t j = 0; j < d; ++j) ok = ok && std::abs(th[j] - end[j]) <= opt.tolerance;
        th = end;
      } else {
        for (std::size_t j = 0; j < d; ++j) th[j] = storage_angle(th[j], tree.joints[j].lower, tree.joints[j].upper);
      }
      ok = ok && detail::pose_close(ee(th), target, opt.tolerance);
      out.frames.push_back(std::move(th));
      out.waypoints.push_back(target);
    }
    if (ok) return out;
    ++out.rejections;
  }
  throw RejectionBudgetExceeded(std::to_string(kRejectionBudget) + " consecutive trajectories on '" + tree.name +
                                "' failed IK or left the joint limits");
}

// ---------------------------------------------------------------------------
// datasets

struct Dataset {
  Task task = Task::fk;
  KinematicTree robot;
  std::uint64_t seed = 0;
  Tensor<float> input;   // [n, input_dim]
  Tensor<float> target;  // [n, target_dim]

  std::size_t size() const { return input.rank() ? input.dim(0) : 0; }
  std::size_t input_dim() const { return input.dim(1); }
  std::size_t target_dim() const { return target.dim(1); }
};

inline Dataset generate_fk_dataset(const KinematicTree& tree, std::size_t n, std::uint64_t seed) {
  CounterRng rng(seed, "fk-data");
  const FkBatch b = sample_fk_batch(tree, n, rng);
  return Dataset{Task::fk, tree, seed, b.input.cast<float>(), b.target.cast<float>()};
}

/// Trajectory i draws from stream (seed, "motion", i), so the file does not
/// depend on the worker count.
inline Dataset generate_motion_dataset(const KinematicTree& tree, std::size_t n, std::uint64_t seed,
                                       const MotionOptions& opt = {}) {
  require_motion_robot(tree);
  const std::size_t d = tree.dof(), w = kHistoryFrames * d;
  Dataset ds{Task::motion, tree, seed, Tensor<float>({n, w}), Tensor<float>({n, w})};
  parallel_for(n, [&](std::size_t i) {
    CounterRng rng(seed, "motion", i);
    const MotionTrajectory tr = generate_motion_trajectory(tree, rng, opt);
    for (std::size_t f = 0; f < kTrajectoryFrames; ++f) {
      float* dst = f < kHistoryFrames ? ds.input.ptr() + i * w + f * d
                                      : ds.target.ptr() + i * w + (f - kHistoryFrames) * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] = static_cast<float>(tr.frames[f][j]);
    }
  });
  return ds;
}

inline rdnt::Document to_document(const Dataset& ds) {
  rdnt::Document doc;
  doc.metadata = {
      {"kind", "dataset"},
      {"task", ds.task},
      {"dof", ds.robot.dof()},
      {"robot_name", ds.robot.name},
      {"robot", nlohmann::json::parse(ds.robot.source)},
      {"seed", ds.seed},
      {"count", ds.size()},
      {"precision", "float32"},
      {"generator_precision", "float64"},
  };
  if (ds.task == Task::motion) {
    doc.metadata["history_frames"] = kHistoryFrames;
    doc.metadata["future_frames"] = kFutureFrames;
  }
  doc.arrays.push_back(rdnt::NamedArray::from("input", ds.input));
  doc.arrays.push_back(rdnt::NamedArray::from("target", ds.target));
  return doc;
}

inline Dataset from_document(const rdnt::Document& doc) {
  const auto& m = doc.metadata;
  if (m.value("kind", std::string()) != "dataset")
    throw FormatError("container kind is '" + m.value("kind", std::string("?")) + "', expected 'dataset'",
                      rdnt::kHeaderBytes);
  Dataset ds;
  try {
    ds.task = m.at("task").get<Task>();
    ds.robot = parse_robot(m.at("robot").dump());
    ds.seed = m.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset metadata: ") + e.what(), rdnt::kHeaderBytes);
  }
  ds.input = doc.array("input").as<float>();
  ds.target = doc.array("target").as<float>();
  const bool fk = ds.task == Task::fk;
  const std::size_t din = fk ? fk_input_dim(ds.robot) : kHistoryFrames * ds.robot.dof();
  const std::size_t dout = fk ? fk_target_dim(ds.robot) : kFutureFrames * ds.robot.dof();
  if (ds.input.shape != Shape{ds.input.shape.at(0), din} || ds.target.shape != Shape{ds.input.dim(0), dout})
    throw FormatError("array shapes " + shape_str(ds.input.shape) + " / " + shape_str(ds.target.shape) +
                          " do not fit the embedded robot",
                      rdnt::kHeaderBytes);
  return ds;
}

inline void write_dataset(const std::string& path, const Dataset& ds) { rdnt::write_file(path, to_document(ds)); }
inline Dataset read_dataset(const std::string& path) { return from_document(rdnt::read_file(path)); }

/// FNV-1a over each sample's input bytes followed by its target bytes.
inline std::vector<std::uint64_t> sample_checksums(const Dataset& ds) {
  std::vector<std::uint64_t> out(ds.size());
  const std::size_t a = ds.input_dim() * sizeof(float), b = ds.target_dim() * sizeof(float);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto* x = reinterpret_cast<const unsigned char*>(ds.input.ptr() + i * ds.input_dim());
    const auto* y = reinterpret_cast<const unsigned char*>(ds.target.ptr() + i * ds.target_dim());
    out[i] = fnv1a64(y, b, fnv1a64(x, a));
  }
  return out;
}

}  // namespace rodrinet
