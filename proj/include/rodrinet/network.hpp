#pragma once

// Rodrigues Network and the MLP baseline.
//
// Feature layout on the tape: links [N, D+1, C_L, 4, 4], joints [N, D, C_J],
// global token [N, C_G]. Link k > 0 is the child of joint k-1.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "rodrinet/autodiff.hpp"
#include "rodrinet/kinematics.hpp"
#include "rodrinet/rodrigues_op.hpp"

namespace rodrinet {

enum class Task { fk, motion };
enum class Backbone { rodrinet, mlp };
enum class FkDecoder { per_link, concat };

inline constexpr std::size_t kPoseValues = 12;  // translation (3) + row-major rotation (9)
inline constexpr std::size_t kHistoryFrames = 8;
inline constexpr std::size_t kFutureFrames = 8;

struct LayersEnabled {
  bool rodrigues = true, joint = true, attention = true;
  bool operator==(const LayersEnabled&) const = default;
};

struct RodriNetConfig {
  std::size_t num_blocks = 12;
  std::size_t c_link = 8;
  std::size_t c_joint = 4;
  std::size_t d_attn = 256;
  std::size_t heads = 8;
  std::size_t c_global = 0;  // 0 disables the global token
  bool degenerate_mode = false;
  LayersEnabled layers;
  FkDecoder decoder = FkDecoder::per_link;
  OpMode op_mode = OpMode::fused;

  std::size_t link_width() const { return c_link * 16; }
  std::size_t kernel_terms() const { return 1 + 2 * c_joint; }

  void validate() const {
    if (c_link == 0 || c_joint == 0) throw ConfigError("C_L and C_J must be positive");
    if (layers.attention && (heads == 0 || d_attn % heads != 0))
      throw ConfigError("d_attn " + std::to_string(d_attn) + " not divisible by " + std::to_string(heads) + " heads");
    if (degenerate_mode && (layers.joint || layers.attention))
      throw ConfigError("degenerate mode applies to Rodrigues-only networks");
  }

  /// 12 blocks, Rodrigues layers only, C_J = 1, C_L = 3.
  static RodriNetConfig fk_reference() {
    RodriNetConfig c;
    c.num_blocks = 12;
    c.c_link = 3;
    c.c_joint = 1;
    c.layers = {true, false, false};
    return c;
  }
  /// 12 blocks, C_J = 4, C_L = 8, d_attn = 256.
  static RodriNetConfig motion_reference() { return RodriNetConfig{}; }
  /// Desk-scale FK net on the 6-joint chain, ~50k parameters.
  static RodriNetConfig fk_desk() {
    RodriNetConfig c = fk_reference();
    c.num_blocks = 7;
    return c;
  }
  static RodriNetConfig motion_desk() {
    RodriNetConfig c;
    c.num_blocks = 6;
    c.d_attn = 128;
    return c;
  }
};

struct MlpConfig {
  std::vector<std::size_t> hidden = std::vector<std::size_t>(6, 768);
};

struct ModelSpec {
  Task task = Task::fk;
  Backbone backbone = Backbone::rodrinet;
  RodriNetConfig rodrinet = RodriNetConfig::fk_reference();
  MlpConfig mlp;
};

// ---------------------------------------------------------------------------
// json

NLOHMANN_JSON_SERIALIZE_ENUM(Task, {{Task::fk, "fk"}, {Task::motion, "motion"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Backbone, {{Backbone::rodrinet, "rodrinet"}, {Backbone::mlp, "mlp"}})
NLOHMANN_JSON_SERIALIZE_ENUM(FkDecoder, {{FkDecoder::per_link, "per_link"}, {FkDecoder::concat, "concat"}})
NLOHMANN_JSON_SERIALIZE_ENUM(OpMode, {{OpMode::reference, "reference"}, {OpMode::fused, "fused"}})

inline void to_json(nlohmann::json& j, const LayersEnabled& l) {
  j = {{"rodrigues", l.rodrigues}, {"joint", l.joint}, {"attention", l.attention}};
}
inline void from_json(const nlohmann::json& j, LayersEnabled& l) {
  l.rodrigues = j.value("rodrigues", l.rodrigues);
  l.joint = j.value("joint", l.joint);
  l.attention = j.value("attention", l.attention);
}

inline void to_json(nlohmann::json& j, const RodriNetConfig& c) {
  j = {{"num_blocks", c.num_blocks}, {"c_link", c.c_link},     {"c_joint", c.c_joint},
       {"d_attn", c.d_attn},         {"heads", c.heads},       {"c_global", c.c_global},
       {"degenerate_mode", c.degenerate_mode}, {"layers", c.layers}, {"decoder", c.decoder},
       {"op_mode", c.op_mode}};
}
inline void from_json(const nlohmann::json& j, RodriNetConfig& c) {
  c.num_blocks = j.value("num_blocks", c.num_blocks);
  c.c_link = j.value("c_link", c.c_link);
  c.c_joint = j.value("c_joint", c.c_joint);
  c.d_attn = j.value("d_attn", c.d_attn);
  c.heads = j.value("heads", c.heads);
  c.c_global = j.value("c_global", c.c_global);
  c.degenerate_mode = j.value("degenerate_mode", c.degenerate_mode);
  if (j.contains("layers")) c.layers = j.at("layers").get<LayersEnabled>();
  c.decoder = j.value("decoder", c.decoder);
  c.op_mode = j.value("op_mode", c.op_mode);
}

inline void to_json(nlohmann::json& j, const MlpConfig& c) { j = {{"hidden", c.hidden}}; }
inline void from_json(const nlohmann::json& j, MlpConfig& c) { c.hidden = j.value("hidden", c.hidden); }

inline void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = {{"task", s.task}, {"backbone", s.backbone}, {"rodrinet", s.rodrinet}, {"mlp", s.mlp}};
}
inline void from_json(const nlohmann::json& j, ModelSpec& s) {
  s.task = j.value("task", s.task);
  s.backbone = j.value("backbone", s.backbone);
  if (j.contains("rodrinet")) s.rodrinet = j.at("rodrinet").get<RodriNetConfig>();
  if (j.contains("mlp")) s.mlp = j.at("mlp").get<MlpConfig>();
}

// ---------------------------------------------------------------------------
// layers

template <typename T>
struct FeatureGraph {
  Var<T> links;   // [N, D+1, C_L, 4, 4]
  Var<T> joints;  // [N, D, C_J]
  Var<T> global;  // [N, C_G] or empty
};

template <typename T>
struct RodriguesLayerParams {
  std::vector<Var<T>> weight, conj;  // one per joint
  Var<T> gamma, beta;                // [D+1, C_L*16]
};

template <typename T>
struct JointLayerParams {
  Var<T> weight;  // [D, C_J, C_L*16]
  Var<T> bias;    // [D, C_J]
};

template <typename T>
struct AttentionParams {
  Var<T> w_in, b_in, w_out, b_out, gamma, beta;
  Var<T> g_w_in, g_b_in, g_w_out, g_b_out, g_gamma, g_beta;  // global token, optional
};

namespace detail {
template <typename T>
Var<T> take(Var<T> x, std::size_t axis, std::size_t index) {
  Shape s = x.shape();
  s.erase(s.begin() + std::ptrdiff_t(axis));
  return reshape(slice(x, axis, index, index + 1), s);
}
}  // namespace detail

/// F_out[child(j)] = LN(F_in[child(j)] + R_j(F_in[parent(j)], Theta_j)); root: LN(F_in[root]).
/// Degenerate mode: F_out[child(j)] = R_j(...), root unchanged.
template <typename T>
Var<T> rodrigues_layer(const FeatureGraph<T>& fg, const std::vector<std::size_t>& parent_links,
                       const RodriguesLayerParams<T>& p, bool degenerate, OpMode mode = OpMode::fused) {
  const std::size_t d = parent_links.size();
  if (p.weight.size() != d || p.conj.size() != d)
    throw ConfigError("expected " + std::to_string(d) + " Rodrigues kernels, got " + std::to_string(p.weight.size()));
  const Shape& ls = fg.links.shape();
  if (ls.size() != 5 || ls[1] != d + 1) throw ShapeError("link features " + shape_str(ls) + " for " + std::to_string(d) + " joints");
  const std::size_t n = ls[0], c = ls[2];
  std::vector<Var<T>> parts;
  parts.push_back(degenerate ? slice(fg.links, 1, 0, 1) : fg.links.tape->constant(Tensor<T>({n, 1, c, 4, 4})));
  for (std::size_t j = 0; j < d; ++j) {
    Var<T> trans = rodrigues_multichannel(detail::take(fg.links, 1, parent_links[j]), detail::take(fg.joints, 1, j),
                                          p.weight[j], p.conj[j], mode);
    parts.push_back(reshape(trans, {n, 1, trans.dim(1), 4, 4}));
  }
  Var<T> stacked = concat(parts, 1);
  if (degenerate) return stacked;
  Var<T> summed = reshape(add(fg.links, stacked), {n, d + 1, c * 16});
  return reshape(layer_norm(summed, p.gamma, p.beta), ls);
}

/// Theta_out[j] = Linear_j(flatten(F_in[child(j)])) + Theta_in[j].
template <typename T>
Var<T> joint_layer(const FeatureGraph<T>& fg, const JointLayerParams<T>& p) {
  const Shape& ls = fg.links.shape();
  const std::size_t n = ls[0], d = ls[1] - 1;
  if (p.weight.rank() != 3 || p.weight.dim(0) != d)
    throw ConfigError("expected " + std::to_string(d) + " joint maps, got weight " + shape_str(p.weight.shape()));
  Var<T> children = reshape(slice(fg.links, 1, 1, d + 1), {n, d, ls[2] * 16});
  return add(grouped_linear(children, p.weight, p.bias), fg.joints);
}

/// Shared token projection, multi-head self-attention over links (+ global
/// token), back-projection, residual and LayerNorm. Returns {links, global}.
template <typename T>
std::pair<Var<T>, Var<T>> attention_layer(const FeatureGraph<T>& fg, const AttentionParams<T>& p, std::size_t heads) {
  const Shape& ls = fg.links.shape();
  const std::size_t n = ls[0], l = ls[1], w = ls[2] * 16;
  Var<T> tokens = reshape(fg.links, {n, l, w});
  Var<T> qkv = linear(tokens, p.w_in, p.b_in);
  const std::size_t d3 = qkv.dim(2);
  if (fg.global) {
    Var<T> gq = reshape(linear(fg.global, p.g_w_in, p.g_b_in), {n, 1, d3});
    qkv = concat(std::vector<Var<T>>{qkv, gq}, 1);
    Var<T> ctx = scaled_dot_product_attention(qkv, heads);
    Var<T> link_ctx = slice(ctx, 1, 0, l);
    Var<T> g_ctx = reshape(slice(ctx, 1, l, l + 1), {n, d3 / 3});
    Var<T> links = layer_norm(add(tokens, linear(link_ctx, p.w_out, p.b_out)), p.gamma, p.beta);
    Var<T> global = layer_norm(add(fg.global, linear(g_ctx, p.g_w_out, p.g_b_out)), p.g_gamma, p.g_beta);
    return {reshape(links, ls), global};
  }
  Var<T> ctx = scaled_dot_product_attention(qkv, heads);
  Var<T> links = layer_norm(add(tokens, linear(ctx, p.w_out, p.b_out)), p.gamma, p.beta);
  return {reshape(links, ls), Var<T>{}};
}

// ---------------------------------------------------------------------------
// models

/// sum over layers of in*out + out
inline std::size_t mlp_parameter_count(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
  std::size_t total = 0, prev = in;
  for (std::size_t h : hidden) {
    total += prev * h + h;
    prev = h;
  }
  return total + prev * out + out;
}

/// Hidden width (same for all `layers` hidden layers) whose parameter count is
/// closest to `target`; ties go to the smaller width.
inline std::size_t matched_mlp_width(std::size_t in, std::size_t out, std::size_t layers, std::size_t target) {
  std::size_t best = 1, best_gap = std::numeric_limits<std::size_t>::max();
  for (std::size_t w = 1; w <= 1 << 16; ++w) {
    const std::size_t c = mlp_parameter_count(in, std::vector<std::size_t>(layers, w), out);
    const std::size_t gap = c > target ? c - target : target - c;
    if (gap < best_gap) {
      best_gap = gap;
      best = w;
    }
    if (c > target) break;
  }
  return best;
}

/// A backbone bound to a kinematic tree and a task. Parameters live in a
/// separate ParameterStore<T>, so one Network serves every precision.
class Network {
 public:
  Network(ModelSpec spec, KinematicTree tree) : spec_(std::move(spec)), tree_(std::move(tree)) {
    for (std::size_t j = 0; j < tree_.dof(); ++j) {
      if (tree_.joints[j].child_link != j + 1) throw SchemaError("tree is not in canonical order");
      parents_.push_back(tree_.joints[j].parent_link);
    }
    if (spec_.backbone == Backbone::rodrinet) spec_.rodrinet.validate();
  }

  const ModelSpec& spec() const { return spec_; }
  const KinematicTree& tree() const { return tree_; }
  Task task() const { return spec_.task; }
  std::size_t dof() const { return tree_.dof(); }
  std::size_t num_links() const { return tree_.num_links(); }

  /// FK: (12 if free-floating) + D; motion: 8 D.
  std::size_t input_dim() const {
    if (spec_.task == Task::fk) return (tree_.free_floating() ? kPoseValues : 0) + dof();
    return kHistoryFrames * dof();
  }
  /// FK: 12 (D+1); motion: 8 D.
  std::size_t output_dim() const {
    return spec_.task == Task::fk ? kPoseValues * num_links() : kFutureFrames * dof();
  }

  /// Closed-form parameter count from the configuration.
  std::size_t parameter_count() const {
    const std::size_t in = input_dim(), out = output_dim(), d = dof(), l = num_links();
    if (spec_.backbone == Backbone::mlp) return mlp_parameter_count(in, spec_.mlp.hidden, out);
    const RodriNetConfig& c = spec_.rodrinet;
    const std::size_t w = c.link_width(), cg = c.c_global;
    std::size_t block = 0;
    if (c.layers.rodrigues) block += d * 2 * c.c_link * c.c_link * c.kernel_terms() * 16 + 2 * l * w;
    if (c.layers.joint) block += d * (c.c_joint * w + c.c_joint);
    if (c.layers.attention) {
      block += (w * 3 * c.d_attn + 3 * c.d_attn) + (c.d_attn * w + w) + 2 * l * w;
      if (cg) block += (cg * 3 * c.d_attn + 3 * c.d_attn) + (c.d_attn * cg + cg) + 2 * cg;
    }
    std::size_t total = c.num_blocks * block + (in * d * c.c_joint + d * c.c_joint) + (in * l * w + l * w);
    if (cg) total += cg;
    if (spec_.task == Task::fk) {
      total += c.decoder == FkDecoder::per_link ? l * (w * kPoseValues + kPoseValues)
                                                : l * (l * w * kPoseValues + kPoseValues);
    } else {
      total += d * ((c.c_joint + w) * kFutureFrames + kFutureFrames);
    }
    return total;
  }

  template <typename T>
  void declare(ParameterStore<T>& s) const {
    const std::size_t in = input_dim(), d = dof(), l = num_links();
    if (spec_.backbone == Backbone::mlp) {
      std::size_t prev = in;
      auto widths = spec_.mlp.hidden;
      widths.push_back(output_dim());
      for (std::size_t i = 0; i < widths.size(); ++i) {
        s.add("mlp." + std::to_string(i) + ".weight", {widths[i], prev});
        s.add("mlp." + std::to_string(i) + ".bias", {widths[i]});
        prev = widths[i];
      }
      return;
    }
    const RodriNetConfig& c = spec_.rodrinet;
    const std::size_t w = c.link_width(), cg = c.c_global, da = c.d_attn;
    s.add("enc.joint.weight", {d * c.c_joint, in});
    s.add("enc.joint.bias", {d * c.c_joint});
    s.add("enc.link.weight", {l * w, in});
    s.add("enc.link.bias", {l * w});
    if (cg) s.add("global.token", {cg});
    for (std::size_t b = 0; b < c.num_blocks; ++b) {
      const std::string pre = "block" + std::to_string(b) + ".";
      if (c.layers.rodrigues) {
        for (std::size_t j = 0; j < d; ++j) {
          s.add(pre + "rod.j" + std::to_string(j) + ".weight", RodriguesKernel<T>::shape(c.c_link, c.c_link, c.c_joint));
          s.add(pre + "rod.j" + std::to_string(j) + ".conj", RodriguesKernel<T>::shape(c.c_link, c.c_link, c.c_joint));
        }
        s.add(pre + "rod.norm.gamma", {l, w});
        s.add(pre + "rod.norm.beta", {l, w});
      }
      if (c.layers.joint) {
        s.add(pre + "joint.weight", {d, c.c_joint, w});
        s.add(pre + "joint.bias", {d, c.c_joint});
      }
      if (c.layers.attention) {
        s.add(pre + "attn.in.weight", {3 * da, w});
        s.add(pre + "attn.in.bias", {3 * da});
        s.add(pre + "attn.out.weight", {w, da});
        s.add(pre + "attn.out.bias", {w});
        s.add(pre + "attn.norm.gamma", {l, w});
        s.add(pre + "attn.norm.beta", {l, w});
        if (cg) {
          s.add(pre + "attn.global.in.weight", {3 * da, cg});
          s.add(pre + "attn.global.in.bias", {3 * da});
          s.add(pre + "attn.global.out.weight", {cg, da});
          s.add(pre + "attn.global.out.bias", {cg});
          s.add(pre + "attn.global.norm.gamma", {cg});
          s.add(pre + "attn.global.norm.beta", {cg});
        }
      }
    }
    if (spec_.task == Task::fk) {
      if (c.decoder == FkDecoder::per_link) {
        s.add("dec.weight", {l, kPoseValues, w});
        s.add("dec.bias", {l, kPoseValues});
      } else {
        s.add("dec.weight", {l * kPoseValues, l * w});
        s.add("dec.bias", {l * kPoseValues});
      }
    } else {
      s.add("head.weight", {d, kFutureFrames, c.c_joint + w});
      s.add("head.bias", {d, kFutureFrames});
    }
  }

  /// Draws every parameter from the "init" stream of `seed` in declaration
  /// order. Linear maps: U(+-1/sqrt(fan_in)); kernels: U(+-kernel_init_bound);
  /// norms: gamma 1, beta 0; global token: U(+-1/sqrt(C_G)).
  template <typename T>
  void initialize(ParameterStore<T>& s, std::uint64_t seed) const {
    CounterRng rng(seed, "init");
    auto ends_with = [](const std::string& a, const std::string& b) {
      return a.size() >= b.size() && a.compare(a.size() - b.size(), b.size(), b) == 0;
    };
    for (auto& p : s) {
      if (ends_with(p.name, ".gamma")) {
        init_constant(p, T(1));
      } else if (ends_with(p.name, ".beta")) {
        init_constant(p, T(0));
      } else if (p.value.rank() == 5) {
        init_uniform(p, kernel_init_bound(p.value.dim(0), p.value.dim(2)), rng);
      } else if (p.name == "global.token") {
        init_uniform(p, 1.0 / std::sqrt(double(p.value.size())), rng);
      } else {
        init_uniform(p, 1.0 / std::sqrt(double(fan_in(s, p.name))), rng);
      }
    }
  }

  template <typename T>
  ParameterStore<T> make_parameters(std::uint64_t seed) const {
    ParameterStore<T> s;
    declare(s);
    initialize(s, seed);
    return s;
  }

  /// x [N, input_dim] -> [N, output_dim].
  template <typename T>
  Var<T> forward(Tape<T>& tape, ParameterStore<T>& s, Var<T> x) const {
    if (x.rank() != 2 || x.dim(1) != input_dim())
      throw ShapeError("model input must be [N," + std::to_string(input_dim()) + "], got " + shape_str(x.shape()));
    if (spec_.backbone == Backbone::mlp) return mlp_forward(tape, s, x);
    const RodriNetConfig& c = spec_.rodrinet;
    const std::size_t n = x.dim(0), d = dof(), l = num_links(), w = c.link_width();
    auto P = [&](const std::string& name) { return tape.param(s.at(name)); };
    FeatureGraph<T> fg;
    fg.joints = reshape(linear(x, P("enc.joint.weight"), P("enc.joint.bias")), {n, d, c.c_joint});
    fg.links = reshape(linear(x, P("enc.link.weight"), P("enc.link.bias")), {n, l, c.c_link, 4, 4});
    if (c.c_global) fg.global = add(tape.constant(Tensor<T>({n, c.c_global})), P("global.token"));
    for (std::size_t b = 0; b < c.num_blocks; ++b) {
      const std::string pre = "block" + std::to_string(b) + ".";
      if (c.layers.rodrigues) {
        RodriguesLayerParams<T> rp;
        for (std::size_t j = 0; j < d; ++j) {
          rp.weight.push_back(P(pre + "rod.j" + std::to_string(j) + ".weight"));
          rp.conj.push_back(P(pre + "rod.j" + std::to_string(j) + ".conj"));
        }
        if (!c.degenerate_mode) {
          rp.gamma = P(pre + "rod.norm.gamma");
          rp.beta = P(pre + "rod.norm.beta");
        }
        fg.links = rodrigues_layer(fg, parents_, rp, c.degenerate_mode, c.op_mode);
      }
      if (c.layers.joint) fg.joints = joint_layer(fg, JointLayerParams<T>{P(pre + "joint.weight"), P(pre + "joint.bias")});
      if (c.layers.attention) {
        AttentionParams<T> ap{P(pre + "attn.in.weight"), P(pre + "attn.in.bias"), P(pre + "attn.out.weight"),
                              P(pre + "attn.out.bias"),  P(pre + "attn.norm.gamma"), P(pre + "attn.norm.beta")};
        if (c.c_global) {
          ap.g_w_in = P(pre + "attn.global.in.weight");
          ap.g_b_in = P(pre + "attn.global.in.bias");
          ap.g_w_out = P(pre + "attn.global.out.weight");
          ap.g_b_out = P(pre + "attn.global.out.bias");
          ap.g_gamma = P(pre + "attn.global.norm.gamma");
          ap.g_beta = P(pre + "attn.global.norm.beta");
        }
        std::tie(fg.links, fg.global) = attention_layer(fg, ap, c.heads);
      }
    }
    if (spec_.task == Task::fk) {
      if (c.decoder == FkDecoder::per_link) {
        Var<T> y = grouped_linear(reshape(fg.links, {n, l, w}), P("dec.weight"), P("dec.bias"));
        return reshape(y, {n, l * kPoseValues});
      }
      return linear(reshape(fg.links, {n, l * w}), P("dec.weight"), P("dec.bias"));
    }
    Var<T> children = reshape(slice(fg.links, 1, 1, l), {n, d, w});
    Var<T> y = grouped_linear(concat(std::vector<Var<T>>{fg.joints, children}, 2), P("head.weight"), P("head.bias"));
    return reshape(permute(y, {0, 2, 1}), {n, kFutureFrames * d});
  }

  /// Plain forward on a value tensor, no gradient recording.
  template <typename T>
  Tensor<T> predict(ParameterStore<T>& s, const Tensor<T>& x) const {
    Tape<T> tape;
    NoGradGuard<T> ng(tape);
    return forward(tape, s, tape.constant(x)).value();
  }

  /// Sets a single-channel degenerate FK network to classical forward
  /// kinematics: encoders route the root pose into link 0 and raw angles into
  /// the joints, kernels are classical, the decoder reads (t, R) off each link.
  template <typename T>
  void load_classical(ParameterStore<T>& s) const {
    const RodriNetConfig& c = spec_.rodrinet;
    if (spec_.backbone != Backbone::rodrinet || spec_.task != Task::fk || c.c_link != 1 || c.c_joint != 1 ||
        !c.degenerate_mode || c.layers.joint || c.layers.attention || !c.layers.rodrigues ||
        c.decoder != FkDecoder::per_link)
      throw ConfigError("classical weights need a single-channel degenerate Rodrigues-only FK network");
    if (c.num_blocks < tree_.depth())
      throw ConfigError("need at least " + std::to_string(tree_.depth()) + " blocks for this tree");
    for (auto& p : s) init_constant(p, T(0));
    const std::size_t in = input_dim(), off = tree_.free_floating() ? kPoseValues : 0;
    Tensor<T>& jw = s.at("enc.joint.weight").value;
    for (std::size_t j = 0; j < dof(); ++j) jw[j * in + off + j] = T(1);
    Tensor<T>& lw = s.at("enc.link.weight").value;
    Tensor<T>& lb = s.at("enc.link.bias").value;
    for (std::size_t r = 0; r < 3; ++r) {
      if (tree_.free_floating()) {
        lw[(4 * r + 3) * in + r] = T(1);
        for (std::size_t q = 0; q < 3; ++q) lw[(4 * r + q) * in + 3 + 3 * r + q] = T(1);
      } else {
        lb[4 * r + r] = T(1);
      }
    }
    lb[15] = T(1);
    for (std::size_t b = 0; b < c.num_blocks; ++b)
      for (std::size_t j = 0; j < dof(); ++j) {
        const auto k = init_from_classical<T>(tree_.joints[j]);
        s.at("block" + std::to_string(b) + ".rod.j" + std::to_string(j) + ".weight").value = k.weight;
      }
    Tensor<T>& dw = s.at("dec.weight").value;
    for (std::size_t link = 0; link < num_links(); ++link)
      for (std::size_t r = 0; r < 3; ++r) {
        dw[(link * kPoseValues + r) * 16 + 4 * r + 3] = T(1);
        for (std::size_t q = 0; q < 3; ++q) dw[(link * kPoseValues + 3 + 3 * r + q) * 16 + 4 * r + q] = T(1);
      }
  }

 private:
  template <typename T>
  Var<T> mlp_forward(Tape<T>& tape, ParameterStore<T>& s, Var<T> x) const {
    const std::size_t layers = spec_.mlp.hidden.size() + 1;
    for (std::size_t i = 0; i < layers; ++i) {
      const std::string pre = "mlp." + std::to_string(i);
      x = linear(x, tape.param(s.at(pre + ".weight")), tape.param(s.at(pre + ".bias")));
      if (i + 1 < layers) x = relu(x);
    }
    return x;
  }

  // Input width of the linear map a parameter belongs to.
  template <typename T>
  static std::size_t fan_in(ParameterStore<T>& s, const std::string& name) {
    std::string weight = name;
    const std::string bias = ".bias";
    if (name.size() > bias.size() && name.compare(name.size() - bias.size(), bias.size(), bias) == 0)
      weight = name.substr(0, name.size() - bias.size()) + ".weight";
    return s.at(weight).value.shape.back();
  }

  ModelSpec spec_;
  KinematicTree tree_;
  std::vector<std::size_t> parents_;
};

/// MLP with `layers` equal hidden widths whose size is closest to `target`.
inline MlpConfig matched_mlp(std::size_t in, std::size_t out, std::size_t layers, std::size_t target) {
  return MlpConfig{std::vector<std::size_t>(layers, matched_mlp_width(in, out, layers, target))};
}

}  // namespace rodrinet
