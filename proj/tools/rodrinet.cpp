#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "rodrinet/checks.hpp"
#include "rodrinet/errors.hpp"
#include "rodrinet/kinematics.hpp"
#include "rodrinet/rodrigues_op.hpp"
#include "rodrinet/tasks.hpp"
#include "rodrinet/training.hpp"

#ifndef RODRINET_ROBOTS_DIR
#define RODRINET_ROBOTS_DIR "robots"
#endif

using namespace rodrinet;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 1, kExitValidation = 2, kExitNumerical = 3;

int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::usage: return kExitUsage;
    case ErrorCategory::validation: return kExitValidation;
    case ErrorCategory::numerical: return kExitNumerical;
  }
  return kExitValidation;
}

// --threads, then the config file, then RODRI_THREADS, then the machine.
std::size_t resolve_threads(const CLI::Option* flag, std::size_t flag_value, std::optional<std::size_t> from_file = {}) {
  if (flag->count()) {
    if (flag_value == 0) throw UsageError("--threads must be positive");
    return flag_value;
  }
  if (from_file) return std::max<std::size_t>(*from_file, 1);
  if (const char* env = std::getenv("RODRI_THREADS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v <= 0) throw UsageError(std::string("RODRI_THREADS must be a positive integer, got '") + env + "'");
    return std::size_t(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::string task_name(Task t) { return t == Task::fk ? "fk" : "motion"; }

void print_pose_row(const std::string& name, const Pose<double>& p) {
  std::string s = name + "  t " + format_number(p.translation[0]) + " " + format_number(p.translation[1]) + " " +
                  format_number(p.translation[2]) + "  R";
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) s += " " + format_number(p.rotation(r, c));
  std::puts(s.c_str());
}

template <typename T>
MetricsRow eval_checkpoint(const rdnt::Document& doc, const Dataset& ds) {
  Checkpoint<T> ck = checkpoint_from_document<T>(doc);
  const Network net = ck.network();
  const EvalResult ev = evaluate(net, ck.params, ds);
  return MetricsRow{ck.step, ck.train_mse, ev.mse, ev.motion};
}

struct ThreadFlag {
  std::size_t value = 0;
  CLI::Option* opt = nullptr;
  void attach(CLI::App* app) { opt = app->add_option("--threads", value, "Worker threads (fallback: RODRI_THREADS)"); }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RodriNet: Rodrigues operator networks for articulated kinematics"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  // gen-fk-data / gen-motion-data
  std::string robot_path, out_path;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  ThreadFlag fk_gen_threads, motion_gen_threads;
  auto* gen_fk = app.add_subcommand("gen-fk-data", "Write a forward-kinematics dataset");
  auto* gen_motion = app.add_subcommand("gen-motion-data", "Write a motion-prediction dataset (6-DoF fixed-root arm)");
  for (auto [sub, threads] : {std::pair{gen_fk, &fk_gen_threads}, {gen_motion, &motion_gen_threads}}) {
    sub->add_option("--robot", robot_path, "Robot description")->required()->check(CLI::ExistingFile);
    sub->add_option("--n", count, "Number of samples")->required();
    sub->add_option("--seed", seed, "Seed")->required();
    sub->add_option("--out", out_path, "Output file")->required();
    threads->attach(sub);
  }

  // train
  std::string config_path;
  struct {
    std::string robot, task, backbone, precision, train_data, val_data, test_data, out;
    std::size_t iterations = 0, batch_size = 0, validate_every = 0, val_size = 0, mlp_layers = 0;
    std::uint64_t seed = 0;
    double lr = 0, weight_decay = 0;
    bool match_mlp = false;
  } ov;
  ThreadFlag train_threads;
  auto* train_cmd = app.add_subcommand("train", "Train a model; flags override keys of the config file");
  train_cmd->add_option("--config", config_path, "JSON config mirroring TrainConfig")->check(CLI::ExistingFile);
  std::vector<std::pair<CLI::Option*, std::function<void(json&)>>> overrides;
  auto str_flag = [&](const char* flag, const char* key, std::string& v) {
    overrides.emplace_back(train_cmd->add_option(flag, v), [key, &v](json& j) { j[key] = v; });
  };
  auto value_flag = [&](const char* flag, const char* key, auto& v) {
    overrides.emplace_back(train_cmd->add_option(flag, v), [key, &v](json& j) { j[key] = v; });
  };
  str_flag("--robot", "robot", ov.robot);
  str_flag("--task", "task", ov.task);
  str_flag("--backbone", "backbone", ov.backbone);
  str_flag("--precision", "precision", ov.precision);
  str_flag("--train-data", "train_data", ov.train_data);
  str_flag("--val-data", "val_data", ov.val_data);
  str_flag("--test-data", "test_data", ov.test_data);
  str_flag("--out", "out_dir", ov.out);
  value_flag("--iterations", "iterations", ov.iterations);
  value_flag("--batch-size", "batch_size", ov.batch_size);
  value_flag("--validate-every", "validate_every", ov.validate_every);
  value_flag("--val-size", "val_size", ov.val_size);
  value_flag("--mlp-layers", "mlp_layers", ov.mlp_layers);
  value_flag("--seed", "seed", ov.seed);
  value_flag("--lr", "learning_rate", ov.lr);
  value_flag("--weight-decay", "weight_decay", ov.weight_decay);
  overrides.emplace_back(train_cmd->add_flag("--match-mlp", ov.match_mlp, "Size the MLP to the RodriNet parameter count"),
                         [&](json& j) { j["match_mlp"] = ov.match_mlp; });
  train_threads.attach(train_cmd);

  // eval
  std::string ckpt_path, data_path, csv_path;
  ThreadFlag eval_threads;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", data_path, "Dataset file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--csv", csv_path, "Also write the metrics row here");
  eval_threads.attach(eval_cmd);

  // fk
  std::vector<double> angles, root_values;
  auto* fk_cmd = app.add_subcommand("fk", "Print link poses for one configuration");
  fk_cmd->add_option("--robot", robot_path, "Robot description")->required()->check(CLI::ExistingFile);
  fk_cmd->add_option("--angles", angles, "Joint angles, comma separated")->required()->delimiter(',');
  fk_cmd->add_option("--root", root_values, "Root pose: translation then row-major rotation")
      ->delimiter(',')
      ->expected(12);

  // degeneracy-check
  std::size_t trials = 1000;
  bool quat = false;
  std::uint64_t check_seed = 0;
  auto* degen_cmd = app.add_subcommand("degeneracy-check", "Classical Rodrigues chain versus forward kinematics");
  degen_cmd->add_option("--robot", robot_path, "Robot description")->required()->check(CLI::ExistingFile);
  degen_cmd->add_flag("--quat", quat, "Use the quaternion operator");
  degen_cmd->add_option("--trials", trials, "Random configurations")->required()->check(CLI::PositiveNumber);
  degen_cmd->add_option("--seed", check_seed, "Seed");

  // bench-op
  std::string grid = "default";
  std::size_t reps = 20;
  auto* bench_cmd = app.add_subcommand("bench-op", "Time the fused and reference operator");
  bench_cmd->add_option("--grid", grid, "Shape grid")->check(CLI::IsMember({"default"}));
  bench_cmd->add_option("--out", out_path, "CSV output")->required();
  bench_cmd->add_option("--repetitions", reps, "Timed runs per shape")->check(CLI::PositiveNumber);

  // selftest
  std::string selftest_robot = std::string(RODRINET_ROBOTS_DIR) + "/ur5.json";
  auto* self_cmd = app.add_subcommand("selftest", "Run the embedded invariant suite");
  self_cmd->add_option("--robot", selftest_robot, "Fixed-root 6-DoF arm")->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen_fk || *gen_motion) {
      const ThreadFlag& t = *gen_fk ? fk_gen_threads : motion_gen_threads;
      set_num_threads(resolve_threads(t.opt, t.value));
      const KinematicTree tree = load_robot(robot_path);
      const Dataset ds = *gen_fk ? generate_fk_dataset(tree, count, seed) : generate_motion_dataset(tree, count, seed);
      write_dataset(out_path, ds);
      std::printf("wrote %zu %s samples for %s to %s\n", ds.size(), task_name(ds.task).c_str(), tree.name.c_str(),
                  out_path.c_str());
      return 0;
    }

    if (*train_cmd) {
      json j = json::object();
      if (!config_path.empty()) {
        std::ifstream f(config_path);
        try {
          j = json::parse(f);
        } catch (const json::exception& e) {
          throw ConfigError("cannot parse '" + config_path + "': " + e.what());
        }
        if (!j.is_object()) throw ConfigError("config '" + config_path + "' must be a JSON object");
      }
      for (auto& [opt, apply] : overrides)
        if (opt->count()) apply(j);
      std::optional<std::size_t> file_threads;
      if (j.contains("threads")) file_threads = j.at("threads").get<std::size_t>();
      j["threads"] = resolve_threads(train_threads.opt, train_threads.value, file_threads);
      const TrainConfig cfg = j.get<TrainConfig>();
      const TrainResult r = train(cfg);
      for (const auto& row : r.rows) std::puts(format_row(row).c_str());
      std::printf("best step %zu, val mse %s\n", r.best_step, format_number(r.best_val_mse).c_str());
      std::printf("wrote %s, %s, %s, %s\n", r.best_checkpoint.c_str(), r.final_checkpoint.c_str(),
                  r.metrics_csv.c_str(), r.manifest.c_str());
      return 0;
    }

    if (*eval_cmd) {
      set_num_threads(resolve_threads(eval_threads.opt, eval_threads.value));
      const rdnt::Document doc = rdnt::read_file(ckpt_path);
      const Dataset ds = read_dataset(data_path);
      const MetricsRow row = checkpoint_precision(doc) == "float64" ? eval_checkpoint<double>(doc, ds)
                                                                    : eval_checkpoint<float>(doc, ds);
      const std::string text = metrics_header(ds.task) + "\n" + format_row(row) + "\n";
      std::fputs(text.c_str(), stdout);
      if (!csv_path.empty()) {
        std::ofstream f(csv_path, std::ios::trunc);
        if (!(f << text)) throw IoError("cannot write '" + csv_path + "'");
      }
      return 0;
    }

    if (*fk_cmd) {
      const KinematicTree tree = load_robot(robot_path);
      Configuration cfg{Pose<double>::identity(), angles};
      if (!root_values.empty()) {
        cfg.root_pose = read_pose(root_values.data());
        if (!is_rotation(cfg.root_pose.rotation, 1e-6)) throw InvalidParameter("--root rotation is not orthonormal");
      }
      const auto poses = forward_kinematics(tree, cfg);
      for (std::size_t l = 0; l < poses.size(); ++l) print_pose_row(tree.links[l], poses[l]);
      return 0;
    }

    if (*degen_cmd) {
      const KinematicTree tree = load_robot(robot_path);
      const DegeneracyResult r = degeneracy_check(tree, trials, check_seed, quat);
      const bool ok = r.max_deviation <= kDegeneracyTolerance;
      std::printf("%s %s degeneracy: max deviation %.3e over %zu configurations (tolerance %.0e) %s\n",
                  tree.name.c_str(), quat ? "quaternion" : "rodrigues", r.max_deviation, r.trials,
                  kDegeneracyTolerance, ok ? "PASS" : "FAIL");
      return ok ? 0 : kExitNumerical;
    }

    if (*bench_cmd) {
      const auto rows = bench_operator(default_bench_grid(), reps);
      write_bench_csv(out_path, rows);
      std::printf("%6s %5s %5s %5s %14s %14s %8s %12s\n", "batch", "c_in", "c_out", "c_j", "reference_ns", "fused_ns",
                  "speedup", "max_diff");
      for (const auto& r : rows)
        std::printf("%6zu %5zu %5zu %5zu %14.0f %14.0f %8.2f %12.3e\n", r.shape.batch, r.shape.c_in, r.shape.c_out,
                    r.shape.c_joint, r.reference_ns, r.fused_ns, r.speedup, r.max_abs_diff);
      return 0;
    }

    if (*self_cmd) {
      const KinematicTree arm = load_robot(selftest_robot);
      bool all = true;
      for (const auto& p : run_selftest(arm)) {
        std::printf("%s  %s: %s\n", p.passed ? "PASS" : "FAIL", p.name.c_str(), p.detail.c_str());
        all = all && p.passed;
      }
      return all ? 0 : kExitNumerical;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code(e.category());
  } catch (const json::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  }
  return kExitUsage;
}
