#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <type_traits>
#include <utility>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "lanemoe/errors.hpp"
#include "lanemoe/map.hpp"
#include "lanemoe/observation.hpp"
#include "lanemoe/policy.hpp"
#include "lanemoe/reward.hpp"
#include "lanemoe/sim.hpp"

namespace lanemoe {

struct TrainConfig {
  int n_iters = 200;
  int frames_per_batch = 4096;
  int num_epochs = 70;
  int minibatch_size = 512;
  double lr = 1e-4;
  double lr_min = 1e-5;
  double max_grad_norm = 1.0;
  double clip_epsilon = 0.1;
  double gamma = 0.99;
  double lambda = 0.9;
  double entropy_epsilon = 0.1;
  int max_steps = 512;
  double value_coeff = 0.5;

  void validate() const {
    if (n_iters <= 0 || frames_per_batch <= 0 || num_epochs <= 0 || minibatch_size <= 0 || max_steps <= 0) {
      throw ConfigError("iteration, frame, epoch, minibatch and step counts must be positive");
    }
    if (minibatch_size > frames_per_batch) throw ConfigError("minibatch_size must not exceed frames_per_batch");
    if (!(0.0 <= gamma && gamma < 1.0)) throw ConfigError("gamma must lie in [0, 1)");
    if (!(0.0 <= lambda && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
    if (!(lr_min > 0.0 && lr >= lr_min)) throw ConfigError("learning rates must satisfy lr >= lr_min > 0");
    if (clip_epsilon <= 0.0 || max_grad_norm <= 0.0) throw ConfigError("clip_epsilon and max_grad_norm must be positive");
    if (entropy_epsilon < 0.0 || value_coeff < 0.0) throw ConfigError("loss coefficients must be non-negative");
  }
};

/// Environment and optimiser settings of one curriculum phase.
struct PhaseConfig {
  TrainConfig train;
  int n_agents = 4;
  int n_slow = 4;
};

struct EvalConfig {
  int steps = 2000;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5};
  int consistency_window = 10;
};

struct RunConfig {
  std::string map_source = "builtin:stadium";
  StadiumParams map;
  SimConfig sim;
  ObservationConfig obs;
  HLRewardConfig reward_high;
  LLRewardConfig reward_low;
  NetworkShape network;
  PhaseConfig expert{TrainConfig{}, 4, 0};
  PhaseConfig gate{TrainConfig{}, 4, 4};
  EvalConfig eval;

  void validate() const {
    sim.validate();
    reward_high.validate();
    reward_low.validate();
    expert.train.validate();
    gate.train.validate();
    if (eval.steps <= 0 || eval.seeds.empty()) throw ConfigError("evaluation needs positive steps and at least one seed");
    if (eval.consistency_window <= 0) throw ConfigError("consistency window must be positive");
    if (network.hidden.empty()) throw ConfigError("network needs at least one hidden layer");
  }

  /// Simulator settings with the vehicle mix of a phase.
  SimConfig sim_for(const PhaseConfig& phase) const {
    SimConfig s = sim;
    s.n_agents = phase.n_agents;
    s.n_slow = phase.n_slow;
    return s;
  }

  ObservationConfig observation() const {
    ObservationConfig o = obs;
    o.v_max = sim.v_max;
    return o;
  }
};

namespace detail {

namespace pt = boost::property_tree;

template <typename T>
void read_key(const pt::ptree& tree, const std::string& key, T& value) {
  if (auto v = tree.get_optional<std::string>(key)) {
    std::istringstream in(*v);
    T parsed{};
    if constexpr (std::is_same_v<T, bool>) {
      if (*v == "true" || *v == "1") {
        parsed = true;
      } else if (*v == "false" || *v == "0") {
        parsed = false;
      } else {
        throw ConfigError("invalid boolean for " + key + ": " + *v);
      }
    } else if (!(in >> parsed) || !(in >> std::ws).eof()) {
      throw ConfigError("invalid value for " + key + ": " + *v);
    }
    value = parsed;
  }
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::istringstream in(item);
    T v{};
    if (!(in >> v) || !(in >> std::ws).eof()) throw ConfigError("invalid list entry for " + key + ": " + item);
    out.push_back(v);
  }
  return out;
}

template <typename T>
std::string join_list(const std::vector<T>& v) {
  std::ostringstream out;
  for (std::size_t i = 0; i < v.size(); ++i) out << (i ? "," : "") << v[i];
  return out.str();
}

template <typename Visitor>
void visit_train(TrainConfig& t, const std::string& p, Visitor&& v) {
  v(p + "n_iters", t.n_iters);
  v(p + "frames_per_batch", t.frames_per_batch);
  v(p + "num_epochs", t.num_epochs);
  v(p + "minibatch_size", t.minibatch_size);
  v(p + "lr", t.lr);
  v(p + "lr_min", t.lr_min);
  v(p + "max_grad_norm", t.max_grad_norm);
  v(p + "clip_epsilon", t.clip_epsilon);
  v(p + "gamma", t.gamma);
  v(p + "lambda", t.lambda);
  v(p + "entropy_epsilon", t.entropy_epsilon);
  v(p + "max_steps", t.max_steps);
  v(p + "value_coeff", t.value_coeff);
}

// Every known key with the field it binds. Reads and writes both go through
// this table.
template <typename Visitor>
void visit_config(RunConfig& c, Visitor&& v) {
  v("map.n_lanes", c.map.n_lanes);
  v("map.lane_width", c.map.lane_width);
  v("map.straight_length", c.map.straight_length);
  v("map.curve_radius", c.map.curve_radius);
  v("map.lanelet_length", c.map.lanelet_length);
  v("map.point_spacing", c.map.point_spacing);

  v("sim.n_agents", c.sim.n_agents);
  v("sim.n_slow", c.sim.n_slow);
  v("sim.dt", c.sim.dt);
  v("sim.v_min", c.sim.v_min);
  v("sim.v_max", c.sim.v_max);
  v("sim.delta_min", c.sim.delta_min);
  v("sim.delta_max", c.sim.delta_max);
  v("sim.slow_speed", c.sim.slow_speed);
  v("sim.wheelbase", c.sim.wheelbase);
  v("sim.vehicle_length", c.sim.vehicle_length);
  v("sim.vehicle_width", c.sim.vehicle_width);
  v("sim.min_gap_factor", c.sim.min_gap_factor);
  v("sim.pursuit_lookahead", c.sim.pursuit_lookahead);
  v("sim.respawn", c.sim.respawn);

  v("observation.d_norm", c.obs.d_norm);
  v("observation.ref_spacing", c.obs.ref_spacing);

  v("reward_high.collision_penalty", c.reward_high.collision_penalty);
  v("reward_high.lane_change_penalty", c.reward_high.lane_change_penalty);
  v("reward_high.risky_lane_coeff", c.reward_high.risky_lane_coeff);
  v("reward_high.safe_lane_reward", c.reward_high.safe_lane_reward);
  v("reward_high.safety_threshold", c.reward_high.safety_threshold);

  v("reward_low.boundary_collision_penalty", c.reward_low.boundary_collision_penalty);
  v("reward_low.agent_collision_penalty", c.reward_low.agent_collision_penalty);
  v("reward_low.proximity_coeff", c.reward_low.proximity_coeff);
  v("reward_low.proximity_threshold", c.reward_low.proximity_threshold);
  v("reward_low.centerline_dev_coeff", c.reward_low.centerline_dev_coeff);
  v("reward_low.refpath_dev_coeff", c.reward_low.refpath_dev_coeff);
  v("reward_low.steering_rate_coeff", c.reward_low.steering_rate_coeff);
  v("reward_low.forward_coeff", c.reward_low.forward_coeff);
  v("reward_low.speed_coeff", c.reward_low.speed_coeff);

  v("network.initial_log_std", c.network.initial_log_std);

  for (auto [name, phase] : {std::pair<const char*, PhaseConfig*>{"expert", &c.expert}, {"gate", &c.gate}}) {
    const std::string p = std::string(name) + ".";
    v(p + "n_agents", phase->n_agents);
    v(p + "n_slow", phase->n_slow);
    visit_train(phase->train, p, v);
  }

  v("eval.steps", c.eval.steps);
  v("eval.consistency_window", c.eval.consistency_window);
}

}  // namespace detail

/// Parses an INI run configuration. Keys in [train] apply to both phases;
/// [expert] and [gate] may override them per phase.
inline RunConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("cannot parse configuration: ") + e.what());
  }
  std::vector<std::string> known;
  RunConfig c;
  detail::visit_config(c, [&](const std::string& key, auto&) { known.push_back(key); });
  known.insert(known.end(), {"map.source", "network.hidden", "eval.seeds"});
  TrainConfig shared;
  detail::visit_train(shared, "train.", [&](const std::string& key, auto&) { known.push_back(key); });
  for (const auto& [section, body] : tree) {
    for (const auto& [key, _] : body) {
      const std::string full = section + "." + key;
      if (std::find(known.begin(), known.end(), full) == known.end()) throw ConfigError("unknown configuration key " + full);
    }
  }
  detail::visit_train(shared, "train.", [&](const std::string& key, auto& field) { detail::read_key(tree, key, field); });
  c.expert.train = shared;
  c.gate.train = shared;
  detail::visit_config(c, [&](const std::string& key, auto& field) { detail::read_key(tree, key, field); });

  if (auto s = tree.get_optional<std::string>("map.source")) c.map_source = *s;
  if (auto s = tree.get_optional<std::string>("network.hidden")) c.network.hidden = detail::parse_list<int>("network.hidden", *s);
  if (auto s = tree.get_optional<std::string>("eval.seeds")) c.eval.seeds = detail::parse_list<std::uint64_t>("eval.seeds", *s);
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open configuration file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Serialises every setting, so a run directory fully describes its run.
inline std::string config_to_ini(const RunConfig& config) {
  namespace pt = boost::property_tree;
  RunConfig c = config;
  pt::ptree tree;
  tree.put("map.source", c.map_source);
  detail::visit_config(c, [&](const std::string& key, auto& field) {
    using T = std::decay_t<decltype(field)>;
    if constexpr (std::is_same_v<T, bool>) {
      tree.put(key, field ? "true" : "false");
    } else {
      // Shortest text that reads back to the same value.
      char buf[32];
      const auto res = std::to_chars(buf, buf + sizeof buf, field);
      tree.put(key, std::string(buf, res.ptr));
    }
  });
  tree.put("network.hidden", detail::join_list(c.network.hidden));
  tree.put("eval.seeds", detail::join_list(c.eval.seeds));
  std::ostringstream out;
  pt::write_ini(out, tree);
  return out.str();
}

}  // namespace lanemoe
