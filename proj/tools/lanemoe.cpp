#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lanemoe/config.hpp"
#include "lanemoe/eval.hpp"
#include "lanemoe/hash.hpp"
#include "lanemoe/map.hpp"
#include "lanemoe/observation.hpp"
#include "lanemoe/policy.hpp"
#include "lanemoe/render.hpp"
#include "lanemoe/training.hpp"

namespace fs = std::filesystem;
using namespace lanemoe;

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  std::string map;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "INI run configuration")->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "random seed");
  sub->add_option("--out", c.out, "output directory (default: runs/<command>-<timestamp>)");
  sub->add_option("--map", c.map, "builtin:stadium or a map JSON file (overrides map.source)");
}

RunConfig config_or_default(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  if (!c.map.empty()) cfg.map_source = c.map;
  return cfg;
}

std::string timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return out.str();
}

/// Creates the run directory and records the configuration, its content
/// hash and the invocation.
fs::path prepare_run_dir(const std::string& command, const Common& c, const RunConfig& cfg, int argc, char** argv) {
  const fs::path dir = c.out.empty() ? fs::path("runs") / (command + "-" + timestamp()) : fs::path(c.out);
  fs::create_directories(dir);
  const std::string ini = config_to_ini(cfg);
  std::ofstream(dir / "config.ini") << ini;
  const std::string hash = git_blob_hash(ini);
  std::ofstream(dir / "config.sha1") << hash << '\n';
  std::vector<std::string> args(argv, argv + argc);
  nlohmann::json run = {{"command", command},
                        {"argv", args},
                        {"seed", c.seed},
                        {"config_hash", hash},
                        {"schema_hash", observation_schema_hash(cfg.observation())}};
  write_json_file((dir / "run.json").string(), run);
  return dir;
}

void print_progress(const IterationLog& l) {
  std::cerr << std::fixed << std::setprecision(4) << l.run << " iter " << l.iter << "  reward " << l.episode_reward
            << "  loss " << l.update.mean.total << "  entropy " << l.update.mean.entropy << "  clip "
            << l.update.mean.clip_fraction << "  kl " << l.update.mean.approx_kl << "  (" << std::setprecision(1)
            << l.seconds << "s)\n";
  std::cerr.unsetf(std::ios::floatfield);
}

/// Randomly initialised policies, for rollouts without a trained manifest.
TrainedSystem untrained_system(const RunConfig& cfg, std::uint64_t seed) {
  MapGraph map = load_map(cfg.map_source, cfg.map);
  std::mt19937_64 rng = seeded_rng(seed, 5000);
  HighLevelPolicy hl = make_high_level_policy(map.n_lanes(), rng, cfg.network);
  ExpertPool pool = make_expert_pool(map.n_lanes(), cfg.sim, rng, cfg.network);
  return TrainedSystem{cfg, std::move(map), std::move(hl), std::move(pool), true};
}

/// Copies the expert checkpoints of a manifest next to a new manifest in
/// out_dir so the new run directory is self-contained.
void adopt_experts(const fs::path& manifest, const fs::path& out_dir, const RunConfig& cfg, const MapGraph& map) {
  const Manifest m = read_manifest(manifest);
  fs::create_directories(out_dir);
  for (const auto& e : m.experts) {
    const fs::path src = manifest.parent_path() / e;
    const fs::path dst = out_dir / e;
    if (fs::weakly_canonical(src) != fs::weakly_canonical(dst)) fs::copy_file(src, dst, fs::copy_options::overwrite_existing);
    update_manifest(out_dir, cfg, map, e, std::nullopt);
  }
}

void print_report(const EvalReport& r) {
  std::cout << std::left << std::setw(10) << r.policy << " collisions per seed:";
  for (int c : r.counts) std::cout << ' ' << c;
  std::cout << "  avg " << r.avg << "  std " << r.std << "  best " << r.best << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical lane-selection and motion-planning policies on a multi-lane loop"};
  app.require_subcommand(1);
  Common common;

  auto* schema = app.add_subcommand("schema", "print the observation layouts");
  add_common(schema, common);

  int lane = 0;
  auto* train_expert_cmd = app.add_subcommand("train-expert", "train the low-level expert of one lane");
  add_common(train_expert_cmd, common);
  train_expert_cmd->add_option("--lane", lane, "target lane")->required();

  std::string experts_manifest;
  auto* train_gate_cmd = app.add_subcommand("train-gate", "train the high-level policy over frozen experts");
  add_common(train_gate_cmd, common);
  train_gate_cmd->add_option("--experts", experts_manifest, "manifest holding the trained experts")
      ->required()
      ->check(CLI::ExistingFile);

  auto* train_cmd = app.add_subcommand("train", "train every expert, then the high-level policy");
  add_common(train_cmd, common);

  std::string manifest;
  std::string policy = "all";
  std::vector<std::uint64_t> seeds;
  int steps = 0;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "count collisions of the trained system and the baselines");
  add_common(evaluate_cmd, common);
  evaluate_cmd->add_option("--manifest", manifest, "trained system")->required()->check(CLI::ExistingFile);
  evaluate_cmd->add_option("--policy", policy, "hierarchy, fixed, random or all");
  evaluate_cmd->add_option("--seeds", seeds, "environment seeds")->delimiter(',');
  evaluate_cmd->add_option("--steps", steps, "steps per seed");

  std::string family;
  std::vector<double> thresholds{0.5, 1.0, 1.5, 2.0};
  bool train_family = false;
  auto* sweep_cmd = app.add_subcommand("sweep-threshold", "evaluate one trained system per safety threshold");
  add_common(sweep_cmd, common);
  sweep_cmd->add_option("--family", family, "directory with threshold_<t>/manifest.json (default: --out)");
  sweep_cmd->add_option("--thresholds", thresholds, "safety thresholds")->delimiter(',');
  sweep_cmd->add_flag("--train", train_family, "train the high-level policy for each threshold first");
  sweep_cmd->add_option("--experts", experts_manifest, "manifest holding the experts (with --train)");
  sweep_cmd->add_option("--seeds", seeds, "environment seeds")->delimiter(',');
  sweep_cmd->add_option("--steps", steps, "steps per seed");

  std::string trace_path;
  int window = 10;
  int min_run = 8;
  auto* analyze_cmd = app.add_subcommand("analyze", "lane-change and hesitation statistics of a trace");
  add_common(analyze_cmd, common);
  analyze_cmd->add_option("--trace", trace_path, "JSON-lines trace")->required()->check(CLI::ExistingFile);
  analyze_cmd->add_option("--window", window, "consecutive decisions needed for a completed change");
  analyze_cmd->add_option("--min-run", min_run, "run length reported as consistent");

  bool sample = false;
  std::string rollout_policy = "hierarchy";
  auto* rollout_cmd = app.add_subcommand("rollout", "run one seeded rollout and write its trace");
  add_common(rollout_cmd, common);
  rollout_cmd->add_option("--manifest", manifest, "trained system (default: untrained policies)")
      ->check(CLI::ExistingFile);
  rollout_cmd->add_option("--policy", rollout_policy, "hierarchy, fixed or random");
  rollout_cmd->add_option("--steps", steps, "steps");
  rollout_cmd->add_flag("--sample", sample, "sample actions instead of acting greedily");

  int every = 1;
  auto* render_cmd = app.add_subcommand("render", "SVG frames and plot data from a trace");
  add_common(render_cmd, common);
  render_cmd->add_option("--trace", trace_path, "JSON-lines trace")->required()->check(CLI::ExistingFile);
  render_cmd->add_option("--manifest", manifest, "take the map from this manifest")->check(CLI::ExistingFile);
  render_cmd->add_option("--every", every, "render every k-th step");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (schema->parsed()) {
      const RunConfig cfg = config_or_default(common);
      const std::string text = observation_schema(cfg.observation()).dump(2);
      std::cout << text << '\n';
      if (!common.out.empty()) {
        fs::create_directories(common.out);
        std::ofstream(fs::path(common.out) / "schema.json") << text << '\n';
      }
      return 0;
    }

    if (train_expert_cmd->parsed()) {
      const RunConfig cfg = config_or_default(common);
      const MapGraph map = load_map(cfg.map_source, cfg.map);
      const fs::path dir = prepare_run_dir("train-expert", common, cfg, argc, argv);
      train_expert(lane, cfg, map, common.seed, dir, print_progress);
      update_manifest(dir, cfg, map, "expert_" + std::to_string(lane) + ".json", std::nullopt);
      std::cout << (dir / "manifest.json").string() << '\n';
      return 0;
    }

    if (train_gate_cmd->parsed()) {
      const TrainedSystem sys = load_trained_system(experts_manifest);
      const RunConfig cfg = common.config.empty() ? sys.config : load_config(common.config);
      const fs::path dir = prepare_run_dir("train-gate", common, cfg, argc, argv);
      adopt_experts(experts_manifest, dir, cfg, sys.map);
      train_gate(sys.experts, cfg, sys.map, common.seed, dir, print_progress);
      update_manifest(dir, cfg, sys.map, std::nullopt, "gate.json");
      std::cout << (dir / "manifest.json").string() << '\n';
      return 0;
    }

    if (train_cmd->parsed()) {
      const RunConfig cfg = config_or_default(common);
      const MapGraph map = load_map(cfg.map_source, cfg.map);
      const fs::path dir = prepare_run_dir("train", common, cfg, argc, argv);
      std::cout << run_curriculum(cfg, map, common.seed, dir, print_progress).string() << '\n';
      return 0;
    }

    if (evaluate_cmd->parsed()) {
      const TrainedSystem sys = load_trained_system(manifest);
      const fs::path dir = prepare_run_dir("evaluate", common, sys.config, argc, argv);
      const auto& use_seeds = seeds.empty() ? sys.config.eval.seeds : seeds;
      const int use_steps = steps > 0 ? steps : sys.config.eval.steps;
      std::vector<GateKind> gates;
      if (policy == "all") {
        gates = {GateKind::Hierarchy, GateKind::FixedLane, GateKind::RandomLane};
      } else {
        gates = {parse_gate(policy)};
      }
      for (GateKind g : gates) print_report(evaluate(sys, g, use_seeds, use_steps, dir));
      return 0;
    }

    if (sweep_cmd->parsed()) {
      const fs::path fam = family.empty() ? fs::path(common.out) : fs::path(family);
      if (fam.empty()) throw Error("sweep-threshold needs --family or --out");
      if (train_family) {
        if (experts_manifest.empty()) throw Error("--train needs --experts");
        const TrainedSystem sys = load_trained_system(experts_manifest);
        for (double t : thresholds) {
          RunConfig cfg = common.config.empty() ? sys.config : load_config(common.config);
          cfg.reward_high.safety_threshold = t;
          cfg.validate();
          const fs::path dir = fam / threshold_dir_name(t);
          adopt_experts(experts_manifest, dir, cfg, sys.map);
          train_gate(sys.experts, cfg, sys.map, common.seed, dir, print_progress);
          update_manifest(dir, cfg, sys.map, std::nullopt, "gate.json");
        }
      }
      const RunConfig cfg = config_or_default(common);
      const auto& use_seeds = seeds.empty() ? cfg.eval.seeds : seeds;
      const int use_steps = steps > 0 ? steps : cfg.eval.steps;
      const auto rows = sweep_threshold(fam, thresholds, use_seeds, use_steps);
      const fs::path dir = common.out.empty() ? fam : fs::path(common.out);
      fs::create_directories(dir);
      std::ofstream csv(dir / "sweep.csv");
      write_sweep_csv(csv, rows);
      write_sweep_csv(std::cout, rows);
      return 0;
    }

    if (analyze_cmd->parsed()) {
      const auto trace = read_trace_file(trace_path);
      const DecisionAnalysis a = analyze_decisions(trace, window, min_run);
      const nlohmann::json j = analysis_to_json(a);
      if (!common.out.empty()) {
        fs::create_directories(common.out);
        write_json_file((fs::path(common.out) / "analysis.json").string(), j);
      }
      std::cout << j.at("summary").dump(2) << '\n';
      return 0;
    }

    if (rollout_cmd->parsed()) {
      const TrainedSystem sys = manifest.empty() ? untrained_system(config_or_default(common), common.seed)
                                                 : load_trained_system(manifest);
      const fs::path dir = prepare_run_dir("rollout", common, sys.config, argc, argv);
      const int use_steps = steps > 0 ? steps : sys.config.eval.steps;
      const Mode mode = sample ? Mode::Sample : Mode::Greedy;
      std::ofstream trace(dir / "trace.jsonl");
      if (!trace) throw Error("cannot write " + (dir / "trace.jsonl").string());
      const RolloutResult r = simulate(sys, parse_gate(rollout_policy), common.seed, use_steps, mode, mode, &trace);
      std::cout << "steps " << r.steps << "  agents " << r.n_agents << "  expert calls " << r.dispatch.total_expert_calls()
                << "  collisions " << r.collisions.total << " (agent " << r.collisions.agent << ", boundary "
                << r.collisions.boundary << ")\n"
                << (dir / "trace.jsonl").string() << '\n';
      return 0;
    }

    if (render_cmd->parsed()) {
      const RunConfig cfg = config_or_default(common);
      const MapGraph map = manifest.empty() ? load_map(cfg.map_source, cfg.map) : load_trained_system(manifest).map;
      const fs::path dir = common.out.empty() ? fs::path("runs") / ("render-" + timestamp()) : fs::path(common.out);
      const int frames = render_trace(map, read_trace_file(trace_path), dir, every);
      std::cout << frames << " frames written to " << dir.string() << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
