#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "rodrinet/errors.hpp"
#include "rodrinet/se3.hpp"

namespace rodrinet {

enum class RootMode { fixed, free_floating };

struct Joint {
  std::string id;
  std::size_t parent_link = 0;
  std::size_t child_link = 0;
  Pose<double> fixed_transform;  // parent link frame -> joint frame
  Vec3<double> axis = Vec3<double>::UnitZ();
  double lower = 0.0;
  double upper = 0.0;
};

/// Loop-free tree of revolute joints.
///
/// Canonical ordering: links[0] is the root and links[j + 1] is the child of
/// joints[j]; joints are topologically sorted, so a joint's parent link index
/// is always <= its own index.
struct KinematicTree {
  std::string name;
  RootMode root_mode = RootMode::fixed;
  std::vector<std::string> links;
  std::vector<Joint> joints;
  std::size_t end_effector = 0;
  std::string source;  // original description text, embedded in checkpoints

  std::size_t dof() const { return joints.size(); }
  std::size_t num_links() const { return links.size(); }
  bool free_floating() const { return root_mode == RootMode::free_floating; }

  std::size_t link_index(const std::string& id) const {
    for (std::size_t i = 0; i < links.size(); ++i)
      if (links[i] == id) return i;
    throw SchemaError("unknown link '" + id + "'");
  }

  /// Length of the longest root-to-leaf chain, in joints.
  std::size_t depth() const {
    std::vector<std::size_t> d(links.size(), 0);
    std::size_t best = 0;
    for (const Joint& j : joints) {
      d[j.child_link] = d[j.parent_link] + 1;
      best = std::max(best, d[j.child_link]);
    }
    return best;
  }
};

struct Configuration {
  Pose<double> root_pose;
  std::vector<double> joint_angles;
};

namespace detail {

inline Vec3<double> vec3_field(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.contains(key) || !j.at(key).is_array() || j.at(key).size() != 3)
    throw SchemaError(where + ": '" + key + "' must be a 3-element array");
  Vec3<double> v;
  for (int i = 0; i < 3; ++i) {
    if (!j.at(key)[i].is_number()) throw SchemaError(where + ": '" + key + "' must be numeric");
    v[i] = j.at(key)[i].get<double>();
  }
  return v;
}

inline std::string string_field(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.contains(key) || !j.at(key).is_string())
    throw SchemaError(where + ": missing string field '" + key + "'");
  return j.at(key).get<std::string>();
}

}  // namespace detail

/// Parses a robot description (JSON). See README for the schema.
inline KinematicTree parse_robot(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(std::string("robot description is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw SchemaError("robot description must be an object");

  KinematicTree tree;
  tree.source = text;
  tree.name = detail::string_field(doc, "name", "robot");
  const std::string mode = detail::string_field(doc, "root_mode", "robot");
  if (mode == "fixed") {
    tree.root_mode = RootMode::fixed;
  } else if (mode == "free_floating") {
    tree.root_mode = RootMode::free_floating;
  } else {
    throw SchemaError("root_mode must be 'fixed' or 'free_floating', got '" + mode + "'");
  }

  if (!doc.contains("links") || !doc["links"].is_array() || doc["links"].empty())
    throw SchemaError("'links' must be a non-empty array");
  std::vector<std::string> doc_links;
  std::unordered_map<std::string, std::size_t> doc_index;
  for (const auto& l : doc["links"]) {
    if (!l.is_string()) throw SchemaError("link ids must be strings");
    const auto id = l.get<std::string>();
    if (doc_index.count(id)) throw SchemaError("duplicate link id '" + id + "'");
    doc_index[id] = doc_links.size();
    doc_links.push_back(id);
  }

  if (!doc.contains("joints") || !doc["joints"].is_array())
    throw SchemaError("'joints' must be an array");

  struct RawJoint {
    Joint joint;
    std::string parent, child;
  };
  std::vector<RawJoint> raw;
  std::unordered_map<std::string, std::size_t> parent_of;  // child link -> raw joint
  for (const auto& jj : doc["joints"]) {
    RawJoint r;
    r.joint.id = detail::string_field(jj, "id", "joint");
    const std::string where = "joint '" + r.joint.id + "'";
    r.parent = detail::string_field(jj, "parent", where);
    r.child = detail::string_field(jj, "child", where);
    if (!doc_index.count(r.parent))
      throw SchemaError(where + " references unknown parent link '" + r.parent + "'");
    if (!doc_index.count(r.child))
      throw SchemaError(where + " references unknown child link '" + r.child + "'");
    if (r.parent == r.child) throw InvalidTopology(where + " connects a link to itself");

    const Vec3<double> xyz = jj.contains("origin_translation")
                                 ? detail::vec3_field(jj, "origin_translation", where)
                                 : Vec3<double>::Zero();
    const Vec3<double> rpy = jj.contains("origin_rpy") ? detail::vec3_field(jj, "origin_rpy", where)
                                                       : Vec3<double>::Zero();
    r.joint.fixed_transform = Pose<double>{rpy_rotation(rpy[0], rpy[1], rpy[2]), xyz};
    r.joint.axis = JointAxis<double>(detail::vec3_field(jj, "axis", where)).vector();

    if (!jj.contains("limits") || !jj["limits"].is_array() || jj["limits"].size() != 2 ||
        !jj["limits"][0].is_number() || !jj["limits"][1].is_number())
      throw SchemaError(where + ": 'limits' must be [lo, hi]");
    r.joint.lower = jj["limits"][0].get<double>();
    r.joint.upper = jj["limits"][1].get<double>();
    if (!(r.joint.lower <= r.joint.upper)) throw SchemaError(where + ": limits lo > hi");

    if (parent_of.count(r.child))
      throw InvalidTopology("link '" + r.child + "' has more than one parent joint");
    parent_of[r.child] = raw.size();
    raw.push_back(std::move(r));
  }

  const std::string& root = doc_links.front();
  if (parent_of.count(root)) throw InvalidTopology("root link '" + root + "' has a parent joint");
  if (raw.size() + 1 != doc_links.size())
    throw InvalidTopology("a tree with " + std::to_string(doc_links.size()) + " links needs " +
                          std::to_string(doc_links.size() - 1) + " joints, got " +
                          std::to_string(raw.size()));

  // Stable topological order: repeatedly take the first joint (in document
  // order) whose parent link is already placed.
  tree.links.push_back(root);
  std::unordered_map<std::string, std::size_t> placed{{root, 0}};
  std::vector<bool> used(raw.size(), false);
  for (std::size_t n = 0; n < raw.size(); ++n) {
    bool progressed = false;
    for (std::size_t k = 0; k < raw.size(); ++k) {
      if (used[k] || !placed.count(raw[k].parent)) continue;
      used[k] = true;
      Joint j = raw[k].joint;
      j.parent_link = placed.at(raw[k].parent);
      j.child_link = tree.links.size();
      placed[raw[k].child] = j.child_link;
      tree.links.push_back(raw[k].child);
      tree.joints.push_back(std::move(j));
      progressed = true;
      break;
    }
    if (!progressed) throw InvalidTopology("cycle detected or links unreachable from the root");
  }

  tree.end_effector = tree.links.size() - 1;
  if (doc.contains("end_effector")) {
    tree.end_effector = tree.link_index(detail::string_field(doc, "end_effector", "robot"));
  }
  return tree;
}

inline KinematicTree load_robot(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open robot description '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_robot(ss.str());
}

/// Homogeneous transform of a joint at angle theta: T_j * Rot(axis, theta).
inline Pose<double> joint_transform(const Joint& joint, double theta) {
  return joint.fixed_transform *
         Pose<double>{rodrigues_rotation(JointAxis<double>(joint.axis), theta), Vec3<double>::Zero()};
}

/// Poses of all links, root first, in the tree's canonical link order.
inline std::vector<Pose<double>> forward_kinematics(const KinematicTree& tree,
                                                    const Configuration& cfg) {
  if (cfg.joint_angles.size() != tree.dof())
    throw ShapeError("expected " + std::to_string(tree.dof()) + " joint angles, got " +
                     std::to_string(cfg.joint_angles.size()));
  std::vector<Pose<double>> poses(tree.num_links());
  poses[0] = cfg.root_pose;
  for (std::size_t j = 0; j < tree.dof(); ++j) {
    const Joint& joint = tree.joints[j];
    poses[joint.child_link] = poses[joint.parent_link] * joint_transform(joint, cfg.joint_angles[j]);
  }
  return poses;
}

/// Fixed 4x4 coefficients with A + B cos(theta) + C sin(theta) = T_j * Rot~(axis, theta).
struct ClassicalCoefficients {
  Mat4<double> a, b, c;
};

inline ClassicalCoefficients classical_coefficients(const Joint& joint) {
  const Mat3<double> k = skew(joint.axis);
  const Mat3<double> k2 = k * k;
  const Mat4<double> t = joint.fixed_transform.matrix();
  auto embed = [](const Mat3<double>& m, double corner) {
    Mat4<double> h = Mat4<double>::Zero();
    h.topLeftCorner<3, 3>() = m;
    h(3, 3) = corner;
    return h;
  };
  return {t * embed(Mat3<double>::Identity() + k2, 1.0), -(t * embed(k2, 0.0)), t * embed(k, 0.0)};
}

/// Links on the path from the root to `link`, as a mask over joints.
inline std::vector<bool> joints_on_path(const KinematicTree& tree, std::size_t link) {
  std::vector<bool> on(tree.dof(), false);
  while (link != 0) {
    const std::size_t j = link - 1;  // canonical order: link k is the child of joint k-1
    on[j] = true;
    link = tree.joints[j].parent_link;
  }
  return on;
}

/// 6 x D world-frame Jacobian of `target_link`: rows 0-2 linear, rows 3-5 angular.
inline Eigen::MatrixXd geometric_jacobian(const KinematicTree& tree, const Configuration& cfg,
                                          std::size_t target_link) {
  if (target_link >= tree.num_links()) throw InvalidParameter("target link out of range");
  const auto poses = forward_kinematics(tree, cfg);
  const auto on_path = joints_on_path(tree, target_link);
  const Vec3<double>& p_target = poses[target_link].translation;
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(6, static_cast<Eigen::Index>(tree.dof()));
  for (std::size_t j = 0; j < tree.dof(); ++j) {
    if (!on_path[j]) continue;
    const Pose<double>& child = poses[tree.joints[j].child_link];
    // The child frame shares the joint frame's origin and leaves the axis fixed.
    const Vec3<double> z = child.rotation * tree.joints[j].axis;
    const auto col = static_cast<Eigen::Index>(j);
    jac.block<3, 1>(0, col) = z.cross(p_target - child.translation);
    jac.block<3, 1>(3, col) = z;
  }
  return jac;
}

/// Position difference and world-frame rotation vector taking `current` to `target`.
inline Eigen::Matrix<double, 6, 1> pose_error(const Pose<double>& target, const Pose<double>& current) {
  Eigen::Matrix<double, 6, 1> e;
  e.head<3>() = target.translation - current.translation;
  e.tail<3>() = rotation_log<double>(target.rotation * current.rotation.transpose());
  return e;
}

struct IkOptions {
  double damping = 1e-3;
  double tolerance = 1e-9;
  int max_iterations = 200;
  bool limits_on = true;
};

/// Damped least squares: theta <- clamp(theta + (J^T J + lambda^2 I)^-1 J^T e).
/// The tree's end effector is the controlled link; the root pose comes from
/// `root_pose` (identity for fixed-base robots).
inline std::vector<double> inverse_kinematics(const KinematicTree& tree, const Pose<double>& target,
                                              std::vector<double> seed, const IkOptions& opt = {},
                                              const Pose<double>& root_pose = Pose<double>::identity()) {
  const std::size_t d = tree.dof();
  if (seed.size() != d) throw ShapeError("IK seed has wrong length");
  Configuration cfg{root_pose, std::move(seed)};
  const auto clamp_all = [&](std::vector<double>& th) {
    for (std::size_t j = 0; j < d; ++j)
      th[j] = std::clamp(th[j], tree.joints[j].lower, tree.joints[j].upper);
  };
  if (opt.limits_on) clamp_all(cfg.joint_angles);

  const Eigen::MatrixXd damping =
      (opt.damping * opt.damping) * Eigen::MatrixXd::Identity(Eigen::Index(d), Eigen::Index(d));
  double residual = 0.0;
  for (int it = 0; it < opt.max_iterations; ++it) {
    const auto poses = forward_kinematics(tree, cfg);
    const auto e = pose_error(target, poses[tree.end_effector]);
    residual = e.norm();
    if (residual < opt.tolerance) return cfg.joint_angles;
    const Eigen::MatrixXd jac = geometric_jacobian(tree, cfg, tree.end_effector);
    const Eigen::VectorXd step =
        (jac.transpose() * jac + damping).ldlt().solve(jac.transpose() * e);
    for (std::size_t j = 0; j < d; ++j) cfg.joint_angles[j] += step[Eigen::Index(j)];
    if (opt.limits_on) clamp_all(cfg.joint_angles);
  }
  const auto poses = forward_kinematics(tree, cfg);
  residual = pose_error(target, poses[tree.end_effector]).norm();
  if (residual < opt.tolerance) return cfg.joint_angles;
  throw IKDidNotConverge(residual, opt.max_iterations);
}

}  // namespace rodrinet
