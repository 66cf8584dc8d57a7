#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lanemoe/config.hpp"
#include "lanemoe/errors.hpp"
#include "lanemoe/map.hpp"
#include "lanemoe/observation.hpp"
#include "lanemoe/policy.hpp"
#include "lanemoe/reward.hpp"
#include "lanemoe/sim.hpp"
#include "lanemoe/training.hpp"

namespace lanemoe {

// --- traces -----------------------------------------------------------------

/// One JSON line of a rollout trace: the world after step `step`, the
/// decisions that produced it and the per-agent lane-selection reward terms.
struct TraceStep {
  int step = 0;
  std::vector<VehicleState> vehicles;
  std::vector<int> decisions;
  std::vector<CollisionFlags> collisions;
  std::vector<bool> respawned;
  std::vector<HLRewardBreakdown> rewards;
};

inline nlohmann::json trace_step_to_json(const TraceStep& s) {
  using nlohmann::json;
  json vehicles = json::array();
  for (const auto& v : s.vehicles) {
    vehicles.push_back({{"id", v.id},
                        {"x", v.position.x},
                        {"y", v.position.y},
                        {"heading", v.heading},
                        {"speed", v.speed},
                        {"lane", v.lane},
                        {"is_slow", v.is_slow}});
  }
  json collisions = json::array();
  for (const auto& c : s.collisions) collisions.push_back({{"agent", c.agent}, {"boundary", c.boundary}});
  json rewards = json::array();
  for (const auto& r : s.rewards) {
    rewards.push_back({{"collision", r.collision},
                       {"lane_change", r.lane_change},
                       {"risky_lane", r.risky_lane},
                       {"safe_lane", r.safe_lane}});
  }
  return {{"step", s.step},
          {"vehicles", vehicles},
          {"decisions", s.decisions},
          {"collisions", collisions},
          {"respawned", s.respawned},
          {"rewards", rewards}};
}

inline TraceStep trace_step_from_json(const nlohmann::json& j) {
  TraceStep s;
  try {
    s.step = j.at("step").get<int>();
    for (const auto& v : j.at("vehicles")) {
      VehicleState vs;
      vs.id = v.at("id").get<int>();
      vs.position = {v.at("x").get<double>(), v.at("y").get<double>()};
      vs.heading = v.at("heading").get<double>();
      vs.speed = v.at("speed").get<double>();
      vs.lane = v.at("lane").get<int>();
      vs.is_slow = v.at("is_slow").get<bool>();
      s.vehicles.push_back(vs);
    }
    s.decisions = j.at("decisions").get<std::vector<int>>();
    for (const auto& c : j.at("collisions")) s.collisions.push_back({c.at("agent").get<bool>(), c.at("boundary").get<bool>()});
    s.respawned = j.at("respawned").get<std::vector<bool>>();
    if (j.contains("rewards")) {
      for (const auto& r : j.at("rewards")) {
        s.rewards.push_back({r.at("collision").get<double>(), r.at("lane_change").get<double>(),
                             r.at("risky_lane").get<double>(), r.at("safe_lane").get<double>()});
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw MalformedTrace(std::string("malformed trace line: ") + e.what());
  }
  if (s.decisions.size() != s.collisions.size() || s.respawned.size() != s.collisions.size() ||
      s.vehicles.size() < s.collisions.size()) {
    throw MalformedTrace("trace line " + std::to_string(s.step) + " has inconsistent per-agent arrays");
  }
  return s;
}

inline void write_trace_line(std::ostream& out, const TraceStep& s) { out << trace_step_to_json(s).dump() << '\n'; }

/// Reads a JSON-lines trace; step indices must increase strictly.
inline std::vector<TraceStep> read_trace(std::istream& in) {
  std::vector<TraceStep> steps;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw MalformedTrace("trace line " + std::to_string(line_no) + " is not JSON: " + e.what());
    }
    TraceStep s = trace_step_from_json(j);
    if (!steps.empty()) {
      if (s.step <= steps.back().step) throw MalformedTrace("trace steps are not strictly increasing");
      if (s.collisions.size() != steps.back().collisions.size()) throw MalformedTrace("agent count changes mid-trace");
    }
    steps.push_back(std::move(s));
  }
  return steps;
}

inline std::vector<TraceStep> read_trace_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open trace " + path);
  return read_trace(in);
}

// --- collision counting -------------------------------------------------------

/// Rising-edge event counts: a flag going from false to true is one event.
struct CollisionCounts {
  int agent = 0;
  int boundary = 0;
  int total = 0;  // rising edges of (agent || boundary)
};

inline CollisionCounts count_collisions(const std::vector<TraceStep>& trace) {
  CollisionCounts c;
  std::vector<CollisionFlags> prev;
  for (const auto& s : trace) {
    if (prev.empty()) prev.assign(s.collisions.size(), {});
    for (std::size_t i = 0; i < s.collisions.size(); ++i) {
      const CollisionFlags& now = s.collisions[i];
      if (now.agent && !prev[i].agent) ++c.agent;
      if (now.boundary && !prev[i].boundary) ++c.boundary;
      if (now.any() && !prev[i].any()) ++c.total;
      prev[i] = now;
    }
  }
  return c;
}

// --- simulation under a gate ------------------------------------------------------

enum class GateKind { Hierarchy, FixedLane, RandomLane };

inline const char* gate_name(GateKind g) {
  switch (g) {
    case GateKind::Hierarchy: return "hierarchy";
    case GateKind::FixedLane: return "fixed";
    case GateKind::RandomLane: return "random";
  }
  return "?";
}

inline GateKind parse_gate(const std::string& s) {
  if (s == "hierarchy") return GateKind::Hierarchy;
  if (s == "fixed") return GateKind::FixedLane;
  if (s == "random") return GateKind::RandomLane;
  throw Error("unknown policy '" + s + "' (expected hierarchy, fixed or random)");
}

struct RolloutResult {
  std::vector<TraceStep> trace;
  CollisionCounts collisions;
  DispatchStats dispatch;
  int steps = 0;
  int n_agents = 0;
};

/// Runs the gate-phase scenario for `steps` steps. The hierarchy uses its
/// trained high-level policy; the baselines keep the current lane or pick a
/// uniformly random lane every step. All three drive the same experts.
inline RolloutResult simulate(const TrainedSystem& sys, GateKind gate, std::uint64_t seed, int steps,
                              Mode hl_mode = Mode::Greedy, Mode ll_mode = Mode::Greedy,
                              std::ostream* trace_out = nullptr) {
  if (gate == GateKind::Hierarchy && !sys.has_high_level) throw Error("manifest has no high-level policy");
  sys.experts.validate(sys.map.n_lanes());
  SimConfig sim = sys.config.sim_for(sys.config.gate);
  sim.seed = seed;
  const ObservationConfig obs_cfg = sys.config.observation();
  std::mt19937_64 rng = seeded_rng(seed, 3000);
  WorldState world = spawn(sys.map, sim);
  const int n = world.n_agents;
  RolloutResult res;
  res.n_agents = n;
  res.dispatch.expert_calls.assign(static_cast<std::size_t>(sys.map.n_lanes()), 0);
  std::vector<int> prev_decision(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) prev_decision[static_cast<std::size_t>(i)] = world.vehicles[static_cast<std::size_t>(i)].lane;
  std::uniform_int_distribution<int> random_lane(0, sys.map.n_lanes() - 1);
  std::vector<ControlAction> acts(static_cast<std::size_t>(n));
  std::vector<int> decisions(static_cast<std::size_t>(n));
  for (int t = 0; t < steps; ++t) {
    for (int i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      StepOptions opts;
      opts.hl_mode = hl_mode;
      opts.ll_mode = ll_mode;
      opts.obs = obs_cfg;
      if (gate == GateKind::FixedLane) opts.forced_decision = world.vehicles[k].lane;
      if (gate == GateKind::RandomLane) opts.forced_decision = random_lane(rng);
      const DecisionRecord rec = hierarchical_step(sys.high_level, sys.experts, world, i, sys.map, opts, rng, &res.dispatch);
      decisions[k] = rec.decision_t;
      acts[k] = rec.ll_action;
    }
    for (int i = 0; i < n; ++i) world.vehicles[static_cast<std::size_t>(i)].target_lane = decisions[static_cast<std::size_t>(i)];
    WorldState next = step_world(world, acts, sys.map, sim);
    TraceStep ts{next.step_index, next.vehicles, decisions, next.collision_flags, next.respawned, {}};
    for (int i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      ts.rewards.push_back(
          reward_high_breakdown(world, next, i, prev_decision[k], decisions[k], sys.config.reward_high, sys.map));
      prev_decision[k] = next.respawned[k] ? next.vehicles[k].lane : decisions[k];
    }
    if (trace_out) write_trace_line(*trace_out, ts);
    res.trace.push_back(std::move(ts));
    world = std::move(next);
  }
  res.steps = steps;
  res.collisions = count_collisions(res.trace);
  return res;
}

// --- reports --------------------------------------------------------------------

struct EvalReport {
  std::string policy;
  int steps = 2000;
  std::vector<std::uint64_t> seeds;
  std::vector<int> counts;  // combined collision events per seed
  std::vector<int> agent_counts;
  std::vector<int> boundary_counts;
  double avg = 0.0;
  double std = 0.0;  // sample standard deviation
  int best = 0;
  std::string config;
};

/// Recomputes avg, sample std and best from the per-seed counts.
inline void summarize(EvalReport& r) {
  if (r.counts.empty()) throw Error("report has no per-seed counts");
  const double n = static_cast<double>(r.counts.size());
  r.avg = std::accumulate(r.counts.begin(), r.counts.end(), 0.0) / n;
  double ss = 0.0;
  for (int c : r.counts) ss += (c - r.avg) * (c - r.avg);
  r.std = r.counts.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  r.best = *std::min_element(r.counts.begin(), r.counts.end());
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  return {{"policy", r.policy}, {"steps", r.steps},
          {"seeds", r.seeds},   {"collisions", r.counts},
          {"agent_collisions", r.agent_counts}, {"boundary_collisions", r.boundary_counts},
          {"avg", r.avg},       {"std", r.std},
          {"best", r.best},     {"config", r.config}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.policy = j.at("policy").get<std::string>();
  r.steps = j.at("steps").get<int>();
  r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  r.counts = j.at("collisions").get<std::vector<int>>();
  r.agent_counts = j.at("agent_collisions").get<std::vector<int>>();
  r.boundary_counts = j.at("boundary_collisions").get<std::vector<int>>();
  r.avg = j.at("avg").get<double>();
  r.std = j.at("std").get<double>();
  r.best = j.at("best").get<int>();
  r.config = j.at("config").get<std::string>();
  return r;
}

/// Evaluates one gate over several seeds. With an output directory, writes
/// trace_<policy>_seed<N>.jsonl per seed and report_<policy>.json.
inline EvalReport evaluate(const TrainedSystem& sys, GateKind gate, const std::vector<std::uint64_t>& seeds, int steps,
                           const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
  if (seeds.empty()) throw Error("evaluation needs at least one seed");
  if (steps <= 0) throw Error("evaluation needs a positive step count");
  EvalReport r;
  r.policy = gate_name(gate);
  r.steps = steps;
  r.seeds = seeds;
  r.config = config_to_ini(sys.config);
  if (out_dir) std::filesystem::create_directories(*out_dir);
  for (std::uint64_t seed : seeds) {
    std::optional<std::ofstream> trace;
    if (out_dir) {
      const auto path = *out_dir / ("trace_" + r.policy + "_seed" + std::to_string(seed) + ".jsonl");
      trace.emplace(path);
      if (!*trace) throw Error("cannot write " + path.string());
    }
    const RolloutResult res = simulate(sys, gate, seed, steps, Mode::Greedy, Mode::Greedy, trace ? &*trace : nullptr);
    r.counts.push_back(res.collisions.total);
    r.agent_counts.push_back(res.collisions.agent);
    r.boundary_counts.push_back(res.collisions.boundary);
  }
  summarize(r);
  if (out_dir) write_json_file((*out_dir / ("report_" + r.policy + ".json")).string(), report_to_json(r));
  return r;
}

// --- threshold sweep ------------------------------------------------------------

struct SweepRow {
  double threshold = 0.0;
  EvalReport report;
};

inline std::string threshold_dir_name(double threshold) {
  std::ostringstream out;
  out << "threshold_" << threshold;
  return out.str();
}

/// Evaluates one trained manifest per safety threshold, found at
/// family_dir/threshold_<t>/manifest.json.
inline std::vector<SweepRow> sweep_threshold(const std::filesystem::path& family_dir,
                                             const std::vector<double>& thresholds,
                                             const std::vector<std::uint64_t>& seeds, int steps) {
  std::vector<SweepRow> rows;
  for (double t : thresholds) {
    const auto manifest = family_dir / threshold_dir_name(t) / "manifest.json";
    if (!std::filesystem::exists(manifest)) throw Error("missing manifest for threshold " + std::to_string(t) + ": " + manifest.string());
    const TrainedSystem sys = load_trained_system(manifest);
    rows.push_back({t, evaluate(sys, GateKind::Hierarchy, seeds, steps)});
  }
  return rows;
}

inline void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << "threshold,avg,std,best\n";
  for (const auto& r : rows) out << r.threshold << ',' << r.report.avg << ',' << r.report.std << ',' << r.report.best << '\n';
}

// --- decision analysis ----------------------------------------------------------

struct LaneChangeEvent {
  int agent = 0;
  int start_step = 0;
  int end_step = 0;
  int from_lane = 0;
  int to_lane = 0;
  int run_length = 0;
  bool transitioned = false;  // the located lane reached the decided lane during the run
  bool completed = false;     // transitioned, held at the end of the run, run >= window
  bool hesitation = false;    // no lane change and the decision reverted within < 3 steps
};

struct DecisionSummary {
  int attempts = 0;
  int transitioned = 0;
  int completed = 0;
  int hesitations = 0;
  int aborted = 0;
  int transitioned_long_runs = 0;  // transitioned events with run_length >= min_run
  int min_run = 8;
  double mean_transition_run = 0.0;

  double long_run_fraction() const {
    return transitioned > 0 ? static_cast<double>(transitioned_long_runs) / transitioned : 0.0;
  }
};

struct DecisionAnalysis {
  std::vector<LaneChangeEvent> events;
  DecisionSummary summary;
};

/// Segments each agent's decisions into runs of equal consecutive values. A
/// run whose decision differs from the lane held when it started is a lane
/// change attempt. Respawns cut runs.
inline DecisionAnalysis analyze_decisions(const std::vector<TraceStep>& trace, int consistency_window = 10,
                                          int min_run = 8) {
  if (consistency_window <= 0) throw Error("consistency window must be positive");
  DecisionAnalysis out;
  out.summary.min_run = min_run;
  if (trace.empty()) return out;
  const std::size_t n = trace.front().decisions.size();
  for (const auto& s : trace) {
    if (s.decisions.size() != n) throw MalformedTrace("agent count changes mid-trace");
  }
  for (std::size_t a = 0; a < n; ++a) {
    auto lane_before = [&](std::size_t t) {
      return t == 0 || trace[t - 1].respawned[a] ? trace[t].vehicles[a].lane : trace[t - 1].vehicles[a].lane;
    };
    std::size_t start = 0;
    while (start < trace.size()) {
      std::size_t end = start;
      while (end + 1 < trace.size() && trace[end + 1].decisions[a] == trace[start].decisions[a] &&
             !trace[end].respawned[a]) {
        ++end;
      }
      const int decision = trace[start].decisions[a];
      const int from = lane_before(start);
      if (decision != from) {
        LaneChangeEvent e;
        e.agent = static_cast<int>(a);
        e.start_step = trace[start].step;
        e.end_step = trace[end].step;
        e.from_lane = from;
        e.to_lane = decision;
        e.run_length = static_cast<int>(end - start + 1);
        for (std::size_t t = start; t <= end; ++t) {
          if (trace[t].vehicles[a].lane == decision && !trace[t].respawned[a]) e.transitioned = true;
        }
        e.completed = e.transitioned && trace[end].vehicles[a].lane == decision && !trace[end].respawned[a] &&
                      e.run_length >= consistency_window;
        e.hesitation = !e.transitioned && e.run_length < 3;
        out.events.push_back(e);
      }
      start = end + 1;
    }
  }
  DecisionSummary& s = out.summary;
  double run_sum = 0.0;
  for (const auto& e : out.events) {
    ++s.attempts;
    if (e.transitioned) {
      ++s.transitioned;
      run_sum += e.run_length;
      if (e.run_length >= min_run) ++s.transitioned_long_runs;
    }
    if (e.completed) ++s.completed;
    if (e.hesitation) ++s.hesitations;
    if (!e.completed && !e.hesitation) ++s.aborted;
  }
  s.mean_transition_run = s.transitioned > 0 ? run_sum / s.transitioned : 0.0;
  return out;
}

inline nlohmann::json analysis_to_json(const DecisionAnalysis& a) {
  nlohmann::json events = nlohmann::json::array();
  for (const auto& e : a.events) {
    events.push_back({{"agent", e.agent},
                      {"start_step", e.start_step},
                      {"end_step", e.end_step},
                      {"from_lane", e.from_lane},
                      {"to_lane", e.to_lane},
                      {"run_length", e.run_length},
                      {"transitioned", e.transitioned},
                      {"completed", e.completed},
                      {"hesitation", e.hesitation}});
  }
  const auto& s = a.summary;
  return {{"events", events},
          {"summary",
           {{"attempts", s.attempts},
            {"transitioned", s.transitioned},
            {"completed", s.completed},
            {"hesitations", s.hesitations},
            {"aborted", s.aborted},
            {"min_run", s.min_run},
            {"transitioned_long_runs", s.transitioned_long_runs},
            {"long_run_fraction", s.long_run_fraction()},
            {"mean_transition_run", s.mean_transition_run}}}};
}

// --- expert competence ------------------------------------------------------------

struct ExpertStart {
  int start_lane = 0;
  bool reached = false;   // held the target centerline for `hold` consecutive steps
  bool collided = false;  // left the road
  int reached_at = -1;    // step at which the hold window completed
};

struct ExpertCompetence {
  int target_lane = 0;
  std::vector<ExpertStart> starts;

  int reached() const {
    return static_cast<int>(std::count_if(starts.begin(), starts.end(), [](const ExpertStart& s) { return s.reached; }));
  }
  int collision_free() const {
    return static_cast<int>(std::count_if(starts.begin(), starts.end(), [](const ExpertStart& s) { return !s.collided; }));
  }
};

struct CompetenceOptions {
  int n_starts = 50;
  int max_steps = 400;
  int hold_steps = 100;
  double lateral_noise = 0.05;
  double heading_noise = 0.1;
};

/// Drives a lone vehicle with a greedy expert from random poses on random
/// lanes. A start succeeds once |lateral offset| < lane_width / 4 from the
/// target centerline holds for `hold_steps` consecutive steps.
inline ExpertCompetence evaluate_expert(const LowLevelExpert& expert, const MapGraph& map, const SimConfig& base,
                                        const ObservationConfig& obs_cfg, std::uint64_t seed,
                                        const CompetenceOptions& opt = {}) {
  ExpertPool single;
  single.experts.push_back(expert);
  SimConfig sim = base;
  sim.n_agents = 1;
  sim.n_slow = 0;
  sim.respawn = false;
  std::mt19937_64 rng = seeded_rng(seed, 4000 + static_cast<std::uint64_t>(expert.target_lane));
  std::uniform_int_distribution<int> lane_pick(0, map.n_lanes() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ExpertCompetence out{expert.target_lane, {}};
  const double tol = map.lane_width() / 4.0;
  for (int k = 0; k < opt.n_starts; ++k) {
    sim.seed = rng();
    WorldState world = spawn(map, sim);
    const int lane = lane_pick(rng);
    VehicleState& v = world.vehicles[0];
    v = detail::vehicle_at(map, sim, 0, lane, unit(rng) * map.lane_length(lane));
    const Vec2 normal = unit_from_angle(v.heading).left_normal();
    v.position = v.position + normal * ((2.0 * unit(rng) - 1.0) * opt.lateral_noise);
    v.heading = wrap_angle(v.heading + (2.0 * unit(rng) - 1.0) * opt.heading_noise);
    v.speed = unit(rng) * sim.v_max;
    v.target_lane = expert.target_lane;
    ExpertStart st{lane, false, false, -1};
    int held = 0;
    for (int t = 0; t < opt.max_steps && !st.reached; ++t) {
      const ReferencePath ref =
          reference_path_for(map, world.vehicles[0].position, expert.target_lane, kRefPathPoints, obs_cfg.ref_spacing);
      const LLObservation o = observe_low(world, 0, map, ref, obs_cfg);
      const ControlAction a = act_expert(single, 0, o, Mode::Greedy, rng).action;
      world = step_world(world, std::span<const ControlAction>(&a, 1), map, sim);
      world.vehicles[0].target_lane = expert.target_lane;
      if (world.collision_flags[0].boundary) {
        st.collided = true;
        break;
      }
      const double off = project_to_lane(map, expert.target_lane, world.vehicles[0].position).distance;
      held = off < tol ? held + 1 : 0;
      if (held >= opt.hold_steps) {
        st.reached = true;
        st.reached_at = t + 1;
      }
    }
    out.starts.push_back(st);
  }
  return out;
}

}  // namespace lanemoe
