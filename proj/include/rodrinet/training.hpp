#pragma once

#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rodrinet/autodiff.hpp"
#include "rodrinet/errors.hpp"
#include "rodrinet/kinematics.hpp"
#include "rodrinet/network.hpp"
#include "rodrinet/rdnt.hpp"
#include "rodrinet/tasks.hpp"

namespace rodrinet {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr std::size_t kEvalChunk = 1024;

// ---------------------------------------------------------------------------
// optimizer

template <typename T>
struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t step = 0;
  std::vector<Tensor<T>> m, v;

  explicit AdamState(const ParameterStore<T>& s) {
    for (const auto& p : s) {
      m.emplace_back(p.value.shape);
      v.emplace_back(p.value.shape);
    }
  }
};

/// Bias-corrected Adam on every parameter's accumulated gradient; L2 weight
/// decay is folded into the gradient when nonzero.
template <typename T>
void adam_step(ParameterStore<T>& s, AdamState<T>& st, double lr, double weight_decay = 0.0) {
  if (st.m.size() != s.size()) throw ShapeError("optimizer state tracks a different parameter list");
  ++st.step;
  const T b1 = T(st.beta1), b2 = T(st.beta2), eps = T(st.eps);
  const T c1 = T(1) / T(1 - std::pow(st.beta1, double(st.step)));
  const T c2 = T(1) / T(1 - std::pow(st.beta2, double(st.step)));
  const T rate = T(lr), wd = T(weight_decay);
  std::size_t k = 0;
  for (auto& p : s) {
    Tensor<T>& m = st.m[k];
    Tensor<T>& v = st.v[k];
    ++k;
    if (m.shape != p.value.shape || p.grad.shape != p.value.shape)
      throw ShapeError("optimizer state for " + p.name + " is " + shape_str(m.shape) + ", parameter is " +
                       shape_str(p.value.shape));
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const T g = p.grad[i] + wd * p.value[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      p.value[i] -= rate * (m[i] * c1) / (std::sqrt(v[i] * c2) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// configuration

struct TrainConfig {
  ModelSpec model;
  bool match_mlp = false;  // size MLP widths to the RodriNet config's parameter count
  std::size_t mlp_layers = 6;
  std::string robot;
  std::size_t iterations = 10000;
  std::size_t batch_size = 256;
  std::size_t validate_every = 500;
  double learning_rate = 3e-4;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  std::string precision = "float32";
  std::string train_data, val_data, test_data;
  std::size_t val_size = 10000;  // FK validation set drawn on the fly when val_data is empty
  std::string out_dir = "run";
  std::size_t threads = 1;

  Task task() const { return model.task; }

  void validate() const {
    if (robot.empty()) throw ConfigError("config needs a robot description path");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (validate_every == 0) throw ConfigError("validate_every must be positive");
    if (iterations > 0 && validate_every > iterations)
      throw ConfigError("validate_every (" + std::to_string(validate_every) + ") exceeds iterations (" +
                        std::to_string(iterations) + ")");
    if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
    if (precision != "float32" && precision != "float64")
      throw ConfigError("precision must be float32 or float64, got " + precision);
    if (task() == Task::motion && (train_data.empty() || val_data.empty()))
      throw ConfigError("motion training needs train_data and val_data");
    if (task() == Task::fk && val_data.empty() && val_size == 0) throw ConfigError("val_size must be positive");
    if (threads == 0) throw ConfigError("threads must be positive");
    if (match_mlp && mlp_layers == 0) throw ConfigError("mlp_layers must be positive");
    model.rodrinet.validate();
  }
};

inline double default_learning_rate(Task t) { return t == Task::fk ? 3e-4 : 1e-4; }

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"task", c.model.task},
       {"backbone", c.model.backbone},
       {"rodrinet", c.model.rodrinet},
       {"mlp", c.model.mlp},
       {"match_mlp", c.match_mlp},
       {"mlp_layers", c.mlp_layers},
       {"robot", c.robot},
       {"iterations", c.iterations},
       {"batch_size", c.batch_size},
       {"validate_every", c.validate_every},
       {"learning_rate", c.learning_rate},
       {"weight_decay", c.weight_decay},
       {"seed", c.seed},
       {"precision", c.precision},
       {"train_data", c.train_data},
       {"val_data", c.val_data},
       {"test_data", c.test_data},
       {"val_size", c.val_size},
       {"out_dir", c.out_dir},
       {"threads", c.threads}};
}

/// Missing keys keep their defaults; the network config defaults to the
/// desk configuration of the chosen task.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::vector<std::string> known = {
      "task",       "backbone",   "rodrinet",   "mlp",       "match_mlp", "mlp_layers", "robot",
      "iterations", "batch_size", "validate_every", "learning_rate", "weight_decay", "seed", "precision",
      "train_data", "val_data",   "test_data",  "val_size",  "out_dir",   "threads"};
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [k, _] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown config key '" + k + "'");
  try {
    c.model.task = j.value("task", Task::fk);
    c.model.backbone = j.value("backbone", Backbone::rodrinet);
    c.model.rodrinet = c.model.task == Task::fk ? RodriNetConfig::fk_desk() : RodriNetConfig::motion_desk();
    if (j.contains("rodrinet")) from_json(j.at("rodrinet"), c.model.rodrinet);
    if (j.contains("mlp")) c.model.mlp = j.at("mlp").get<MlpConfig>();
    c.match_mlp = j.value("match_mlp", c.match_mlp);
    c.mlp_layers = j.value("mlp_layers", c.mlp_layers);
    c.robot = j.value("robot", c.robot);
    c.iterations = j.value("iterations", c.iterations);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.validate_every = j.value("validate_every", c.validate_every);
    c.learning_rate = j.value("learning_rate", default_learning_rate(c.model.task));
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.seed = j.value("seed", c.seed);
    c.precision = j.value("precision", c.precision);
    c.train_data = j.value("train_data", c.train_data);
    c.val_data = j.value("val_data", c.val_data);
    c.test_data = j.value("test_data", c.test_data);
    c.val_size = j.value("val_size", c.val_size);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.threads = j.value("threads", c.threads);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

/// Concrete model for `tree`: fills in matched MLP widths when requested.
inline ModelSpec resolve_model(const TrainConfig& c, const KinematicTree& tree) {
  ModelSpec s = c.model;
  if (s.backbone == Backbone::mlp && c.match_mlp) {
    ModelSpec r = s;
    r.backbone = Backbone::rodrinet;
    const Network ref(r, tree);
    s.mlp = matched_mlp(ref.input_dim(), ref.output_dim(), c.mlp_layers, ref.parameter_count());
  }
  return s;
}

// ---------------------------------------------------------------------------
// metrics

struct MotionErrors {
  double error_t_mm = 0, error_r_deg = 0, error_theta_deg = 0;
};

struct MetricsRow {
  std::size_t step = 0;
  double train_mse = 0, val_mse = 0;
  std::optional<MotionErrors> motion;
};

inline std::string format_number(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string metrics_header(Task t) {
  return t == Task::fk ? "step,train_mse,val_mse" : "step,train_mse,val_mse,error_t_mm,error_r_deg,error_theta_deg";
}

inline std::string format_row(const MetricsRow& r) {
  std::string s = std::to_string(r.step) + "," + format_number(r.train_mse) + "," + format_number(r.val_mse);
  if (r.motion)
    s += "," + format_number(r.motion->error_t_mm) + "," + format_number(r.motion->error_r_deg) + "," +
         format_number(r.motion->error_theta_deg);
  return s;
}

/// End-effector errors of predicted against true trajectories, both
/// [N, 8*D] frame-major. Root poses apply to every frame.
template <typename T>
MotionErrors motion_errors(const KinematicTree& tree, const Tensor<T>& pred, const Tensor<T>& truth,
                           const Pose<double>& pred_root = Pose<double>::identity(),
                           const Pose<double>& truth_root = Pose<double>::identity()) {
  if (pred.shape != truth.shape) throw ShapeError("prediction " + shape_str(pred.shape) + " vs truth " + shape_str(truth.shape));
  const std::size_t d = tree.dof();
  if (pred.rank() != 2 || pred.dim(1) % d != 0) throw ShapeError("motion arrays must be [N, frames*D]");
  const std::size_t frames = pred.dim(1) / d, n = pred.dim(0) * frames;
  if (n == 0) return {};
  double et = 0, er = 0, eth = 0;
  Configuration a{pred_root, std::vector<double>(d)}, b{truth_root, std::vector<double>(d)};
  for (std::size_t f = 0; f < n; ++f) {
    for (std::size_t j = 0; j < d; ++j) {
      a.joint_angles[j] = double(pred[f * d + j]);
      b.joint_angles[j] = double(truth[f * d + j]);
      eth += std::abs(a.joint_angles[j] - b.joint_angles[j]);
    }
    const Pose<double> pa = forward_kinematics(tree, a)[tree.end_effector];
    const Pose<double> pb = forward_kinematics(tree, b)[tree.end_effector];
    et += (pa.translation - pb.translation).norm();
    er += geodesic_angle(pa.rotation, pb.rotation);
  }
  const double deg = 180.0 / M_PI;
  return {1000.0 * et / double(n), deg * er / double(n), deg * eth / double(n * d)};
}

struct EvalResult {
  double mse = 0;
  std::optional<MotionErrors> motion;
};

template <typename T>
Tensor<T> predict_all(const Network& net, ParameterStore<T>& s, const Tensor<float>& x) {
  const std::size_t n = x.dim(0), din = x.dim(1), dout = net.output_dim();
  Tensor<T> out({n, dout});
  for (std::size_t lo = 0; lo < n; lo += kEvalChunk) {
    const std::size_t m = std::min(kEvalChunk, n - lo);
    Tensor<T> xb({m, din});
    std::transform(x.ptr() + lo * din, x.ptr() + (lo + m) * din, xb.ptr(), [](float v) { return T(v); });
    const Tensor<T> y = net.predict(s, xb);
    std::copy(y.data.begin(), y.data.end(), out.ptr() + lo * dout);
  }
  return out;
}

inline void check_compatible(const Network& net, const Dataset& ds) {
  if (net.task() != ds.task)
    throw ConfigError(std::string("model is trained for ") + (net.task() == Task::fk ? "fk" : "motion") +
                      " but the dataset holds " + (ds.task == Task::fk ? "fk" : "motion") + " samples");
  if (net.dof() != ds.robot.dof() || net.input_dim() != ds.input_dim() || net.output_dim() != ds.target_dim())
    throw ConfigError("model expects " + std::to_string(net.dof()) + " joints, dataset robot '" + ds.robot.name +
                      "' has " + std::to_string(ds.robot.dof()));
}

/// MSE over every output; motion additionally reports FK-based errors.
template <typename T>
EvalResult evaluate(const Network& net, ParameterStore<T>& s, const Dataset& ds) {
  check_compatible(net, ds);
  if (ds.size() == 0) throw ConfigError("evaluation dataset is empty");
  const Tensor<T> y = predict_all(net, s, ds.input);
  double acc = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double e = double(y[i]) - double(ds.target[i]);
    acc += e * e;
  }
  EvalResult r{acc / double(y.size()), std::nullopt};
  if (ds.task == Task::motion) r.motion = motion_errors(net.tree(), y, ds.target.cast<T>());
  return r;
}

// ---------------------------------------------------------------------------
// checkpoints

template <typename T>
struct Checkpoint {
  TrainConfig config;
  ModelSpec model;
  KinematicTree robot;
  std::size_t step = 0;
  double train_mse = 0, val_mse = 0;
  ParameterStore<T> params;

  Network network() const { return Network(model, robot); }
};

template <typename T>
rdnt::Document checkpoint_document(const TrainConfig& cfg, const Network& net, const ParameterStore<T>& s,
                                   std::size_t step, double train_mse, double val_mse) {
  nlohmann::json config = cfg;
  config["out_dir"] = "";  // where a run was written is not part of the model
  rdnt::Document doc;
  doc.metadata = {{"kind", "checkpoint"},
                  {"config", config},
                  {"model", net.spec()},
                  {"robot", nlohmann::json::parse(net.tree().source)},
                  {"step", step},
                  {"train_mse", train_mse},
                  {"val_mse", val_mse},
                  {"precision", to_string(rdnt::dtype_of<T>())},
                  {"parameter_count", net.parameter_count()}};
  for (const auto& p : s) doc.arrays.push_back(rdnt::NamedArray::from(p.name, p.value));
  return doc;
}

template <typename T>
void save_checkpoint(const std::string& path, const TrainConfig& cfg, const Network& net, const ParameterStore<T>& s,
                     std::size_t step, double train_mse, double val_mse) {
  rdnt::write_file(path, checkpoint_document(cfg, net, s, step, train_mse, val_mse));
}

inline std::string checkpoint_precision(const rdnt::Document& doc) {
  if (doc.metadata.value("kind", std::string()) != "checkpoint")
    throw FormatError("container kind is '" + doc.metadata.value("kind", std::string("?")) + "', expected 'checkpoint'",
                      rdnt::kHeaderBytes);
  return doc.metadata.value("precision", std::string("float32"));
}

template <typename T>
Checkpoint<T> checkpoint_from_document(const rdnt::Document& doc) {
  const std::string want = to_string(rdnt::dtype_of<T>());
  if (checkpoint_precision(doc) != want)
    throw FormatError("checkpoint holds " + checkpoint_precision(doc) + " parameters, expected " + want,
                      rdnt::kHeaderBytes);
  Checkpoint<T> c;
  try {
    const auto& m = doc.metadata;
    c.config = m.at("config").get<TrainConfig>();
    c.model = m.at("model").get<ModelSpec>();
    c.robot = parse_robot(m.at("robot").dump());
    c.step = m.at("step").get<std::size_t>();
    c.train_mse = m.at("train_mse").get<double>();
    c.val_mse = m.at("val_mse").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what(), rdnt::kHeaderBytes);
  }
  const Network net = c.network();
  net.declare(c.params);
  if (c.params.size() != doc.arrays.size())
    throw FormatError("checkpoint has " + std::to_string(doc.arrays.size()) + " arrays, model declares " +
                          std::to_string(c.params.size()),
                      rdnt::kHeaderBytes);
  std::size_t k = 0;
  for (auto& p : c.params) {
    const auto& a = doc.arrays[k++];
    if (a.name != p.name || a.shape != p.value.shape)
      throw FormatError("array '" + a.name + "' " + shape_str(a.shape) + " does not match parameter '" + p.name +
                            "' " + shape_str(p.value.shape),
                        rdnt::kHeaderBytes);
    p.value = a.as<T>();
  }
  return c;
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  return checkpoint_from_document<T>(rdnt::read_file(path));
}

// ---------------------------------------------------------------------------
// training loop

struct TrainResult {
  std::string best_checkpoint, final_checkpoint, metrics_csv, loss_trace_csv, manifest;
  std::size_t best_step = 0;
  double best_val_mse = 0;
  std::vector<MetricsRow> rows;
  std::vector<double> losses;  // per optimizer step
};

namespace detail {

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

inline Dataset load_split(const std::string& path, const Network& net, const char* role) {
  if (!std::filesystem::exists(path)) throw IoError(std::string(role) + " dataset '" + path + "' not found");
  Dataset ds = read_dataset(path);
  check_compatible(net, ds);
  if (ds.size() == 0) throw ConfigError(std::string(role) + " dataset '" + path + "' is empty");
  return ds;
}

struct Manifest {
  std::string path;
  nlohmann::json body;

  void write() const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write '" + path + "'");
    f << body.dump(2) << "\n";
  }
};

}  // namespace detail

template <typename T>
TrainResult train_impl(const TrainConfig& cfg) {
  cfg.validate();
  set_num_threads(cfg.threads);
  const KinematicTree tree = load_robot(cfg.robot);
  const Network net(resolve_model(cfg, tree), tree);
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  const fs::path dir(cfg.out_dir);

  TrainResult res;
  res.best_checkpoint = (dir / "best.ckpt").string();
  res.final_checkpoint = (dir / "final.ckpt").string();
  res.metrics_csv = (dir / "metrics.csv").string();
  res.loss_trace_csv = (dir / "loss_trace.csv").string();
  res.manifest = (dir / "manifest.json").string();

  detail::Manifest manifest{res.manifest, {}};
  manifest.body = {{"tool_version", kToolVersion},
                   {"config", cfg},
                   {"model", net.spec()},
                   {"parameter_count", net.parameter_count()},
                   {"seed", cfg.seed},
                   {"threads", num_threads()},
                   {"start_time", detail::utc_now()},
                   {"status", "running"}};
  nlohmann::json sums = {{"robot", rdnt::file_checksum(cfg.robot)}};
  for (const auto& [k, p] : {std::pair{"train_data", cfg.train_data}, {"val_data", cfg.val_data}, {"test_data", cfg.test_data}})
    if (!p.empty() && fs::exists(p)) sums[k] = rdnt::file_checksum(p);
  manifest.body["input_checksums"] = sums;
  manifest.write();

  try {
    const bool fk = cfg.task() == Task::fk;
    std::optional<Dataset> train_set;
    Dataset val_set;
    if (!fk) train_set = detail::load_split(cfg.train_data, net, "train");
    if (!cfg.val_data.empty()) {
      val_set = detail::load_split(cfg.val_data, net, "validation");
    } else {
      CounterRng rng(cfg.seed, "fk-val");
      const FkBatch b = sample_fk_batch(tree, cfg.val_size, rng);
      val_set = Dataset{Task::fk, tree, cfg.seed, b.input.cast<float>(), b.target.cast<float>()};
    }

    ParameterStore<T> store = net.make_parameters<T>(cfg.seed);
    AdamState<T> adam(store);
    const std::size_t din = net.input_dim(), dout = net.output_dim(), bs = cfg.batch_size;

    const auto batch = [&](std::size_t step) {
      std::pair<Tensor<T>, Tensor<T>> xy{Tensor<T>({bs, din}), Tensor<T>({bs, dout})};
      if (fk) {
        CounterRng rng(cfg.seed, "fk-train", step);
        const FkBatch b = sample_fk_batch(tree, bs, rng);
        xy.first = b.input.cast<T>();
        xy.second = b.target.cast<T>();
      } else {
        CounterRng rng(cfg.seed, "shuffle", step);
        for (std::size_t r = 0; r < bs; ++r) {
          const std::size_t i = rng.below(train_set->size());
          std::transform(train_set->input.ptr() + i * din, train_set->input.ptr() + (i + 1) * din,
                         xy.first.ptr() + r * din, [](float v) { return T(v); });
          std::transform(train_set->target.ptr() + i * dout, train_set->target.ptr() + (i + 1) * dout,
                         xy.second.ptr() + r * dout, [](float v) { return T(v); });
        }
      }
      return xy;
    };
    const auto batch_loss = [&](std::size_t step, bool with_grad) {
      const auto [x, y] = batch(step);
      Tape<T> tape;
      std::optional<NoGradGuard<T>> ng;
      if (!with_grad) ng.emplace(tape);
      Var<T> loss = mse_loss(net.forward(tape, store, tape.constant(x)), tape.constant(y));
      const double l = double(loss.value()[0]);
      if (!std::isfinite(l)) throw DivergedError(step);
      if (with_grad) {
        store.zero_grad();
        tape.backward(loss);
      }
      return l;
    };

    std::ofstream csv(res.metrics_csv, std::ios::trunc);
    std::ofstream trace(res.loss_trace_csv, std::ios::trunc);
    if (!csv || !trace) throw IoError("cannot write metrics in '" + cfg.out_dir + "'");
    csv << metrics_header(cfg.task()) << "\n";
    trace << "step,loss\n";

    double best = std::numeric_limits<double>::infinity();
    double last_train = 0, last_val = 0;
    const auto event = [&](std::size_t step, double train_mse) {
      const EvalResult ev = evaluate(net, store, val_set);
      if (!std::isfinite(ev.mse)) throw DivergedError(step);
      MetricsRow row{step, train_mse, ev.mse, ev.motion};
      csv << format_row(row) << "\n" << std::flush;
      res.rows.push_back(row);
      last_train = train_mse;
      last_val = ev.mse;
      if (ev.mse < best) {
        best = ev.mse;
        res.best_step = step;
        res.best_val_mse = ev.mse;
        save_checkpoint(res.best_checkpoint, cfg, net, store, step, train_mse, ev.mse);
      }
    };

    if (cfg.iterations == 0) {
      save_checkpoint(res.best_checkpoint, cfg, net, store, 0, 0.0, 0.0);
    } else {
      event(0, batch_loss(0, false));
      double acc = 0;
      std::size_t since = 0;
      for (std::size_t step = 0; step < cfg.iterations; ++step) {
        const double l = batch_loss(step, true);
        adam_step(store, adam, cfg.learning_rate, cfg.weight_decay);
        res.losses.push_back(l);
        trace << step << "," << format_number(l) << "\n";
        acc += l;
        ++since;
        if ((step + 1) % cfg.validate_every == 0) {
          event(step + 1, acc / double(since));
          acc = 0;
          since = 0;
        }
      }
    }
    save_checkpoint(res.final_checkpoint, cfg, net, store, cfg.iterations, last_train, last_val);

    nlohmann::json results = {{"best_step", res.best_step}, {"best_val_mse", res.best_val_mse}};
    if (!res.rows.empty()) results["final_val_mse"] = res.rows.back().val_mse;
    if (!cfg.test_data.empty()) {
      const Dataset test = detail::load_split(cfg.test_data, net, "test");
      auto best_ckpt = load_checkpoint<T>(res.best_checkpoint);
      const EvalResult ev = evaluate(net, best_ckpt.params, test);
      results["test_mse"] = ev.mse;
      if (ev.motion)
        results["test_errors"] = {{"error_t_mm", ev.motion->error_t_mm},
                                  {"error_r_deg", ev.motion->error_r_deg},
                                  {"error_theta_deg", ev.motion->error_theta_deg}};
    }
    manifest.body["results"] = results;
    manifest.body["status"] = "completed";
  } catch (const std::exception& e) {
    manifest.body["status"] = "failed";
    manifest.body["error"] = e.what();
    manifest.body["end_time"] = detail::utc_now();
    manifest.write();
    throw;
  }
  manifest.body["end_time"] = detail::utc_now();
  manifest.write();
  return res;
}

inline TrainResult train(const TrainConfig& cfg) {
  return cfg.precision == "float64" ? train_impl<double>(cfg) : train_impl<float>(cfg);
}

}  // namespace rodrinet
