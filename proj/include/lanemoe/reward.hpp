#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "lanemoe/errors.hpp"
#include "lanemoe/map.hpp"
#include "lanemoe/sim.hpp"

namespace lanemoe {

struct HLRewardConfig {
  double collision_penalty = -20.0;
  double lane_change_penalty = -0.5;
  double risky_lane_coeff = -5.0;
  double safe_lane_reward = 0.1;
  double safety_threshold = 1.0;  // d_safe, metres

  void validate() const {
    if (collision_penalty > 0.0 || lane_change_penalty > 0.0 || risky_lane_coeff > 0.0 || safe_lane_reward < 0.0) {
      throw ConfigError("high-level reward signs: penalties <= 0, safe-lane reward >= 0");
    }
    if (!(safety_threshold > 0.0)) throw ConfigError("safety threshold must be positive");
  }
};

struct LLRewardConfig {
  double boundary_collision_penalty = -10.0;
  double agent_collision_penalty = -20.0;
  double proximity_coeff = -2.0;
  double proximity_threshold = 0.5;
  double centerline_dev_coeff = -2.0;
  double refpath_dev_coeff = -2.0;
  double steering_rate_coeff = -0.5;
  double forward_coeff = 10.0;
  double speed_coeff = 0.05;

  void validate() const {
    if (boundary_collision_penalty > 0.0 || agent_collision_penalty > 0.0 || proximity_coeff > 0.0 ||
        centerline_dev_coeff > 0.0 || refpath_dev_coeff > 0.0 || steering_rate_coeff > 0.0) {
      throw ConfigError("low-level penalties must be <= 0");
    }
    if (forward_coeff < 0.0 || speed_coeff < 0.0) throw ConfigError("low-level rewards must be >= 0");
  }
};

struct HLRewardBreakdown {
  double collision = 0.0;
  double lane_change = 0.0;
  double risky_lane = 0.0;
  double safe_lane = 0.0;

  double total() const { return collision + lane_change + risky_lane + safe_lane; }
};

struct LLRewardBreakdown {
  double boundary_collision = 0.0;
  double agent_collision = 0.0;
  double proximity = 0.0;
  double centerline_dev = 0.0;
  double refpath_dev = 0.0;
  double steering_rate = 0.0;
  double forward = 0.0;
  double speed = 0.0;

  double total() const {
    return boundary_collision + agent_collision + proximity + centerline_dev + refpath_dev + steering_rate + forward +
           speed;
  }
};

/// Forward arc-length gap from an agent to the nearest slow vehicle ahead in
/// the agent's own lane; infinity when there is none.
inline double gap_to_slow_ahead(const WorldState& world, int agent_id, const MapGraph& map) {
  const VehicleState& ego = world.vehicles[static_cast<std::size_t>(agent_id)];
  const LoopPolyline& poly = map.centerline(ego.lane);
  const double s_ego = project_to_loop(poly, ego.position).arc_length;
  double best = std::numeric_limits<double>::infinity();
  for (const VehicleState& v : world.vehicles) {
    if (!v.is_slow || v.lane != ego.lane) continue;
    best = std::min(best, forward_gap(s_ego, project_to_loop(poly, v.position).arc_length, poly.length));
  }
  return best;
}

/// Lane-selection reward for the step that produced `world_after`.
inline HLRewardBreakdown reward_high_breakdown(const WorldState& world_before, const WorldState& world_after,
                                               int agent_id, int decision_prev, int decision_now,
                                               const HLRewardConfig& cfg, const MapGraph& map) {
  (void)world_before;
  if (decision_prev < 0 || decision_prev >= map.n_lanes() || decision_now < 0 || decision_now >= map.n_lanes()) {
    throw Error("decision out of range");
  }
  const auto i = static_cast<std::size_t>(agent_id);
  HLRewardBreakdown r;
  if (world_after.collision_flags[i].any()) r.collision = cfg.collision_penalty;
  if (decision_now != decision_prev) r.lane_change = cfg.lane_change_penalty;
  // A respawned agent's pose says nothing about the lane it chose.
  if (world_after.respawned[i]) return r;
  const double d = gap_to_slow_ahead(world_after, agent_id, map);
  if (d < cfg.safety_threshold) {
    r.risky_lane = cfg.risky_lane_coeff * (cfg.safety_threshold - d) / cfg.safety_threshold;
  } else {
    r.safe_lane = cfg.safe_lane_reward;
  }
  return r;
}

inline double reward_high(const WorldState& world_before, const WorldState& world_after, int agent_id,
                          int decision_prev, int decision_now, const HLRewardConfig& cfg, const MapGraph& map) {
  return reward_high_breakdown(world_before, world_after, agent_id, decision_prev, decision_now, cfg, map).total();
}

/// Bumper-to-bumper gap to the nearest vehicle sharing the agent's lane
/// (lateral separation below one lane width); infinity when there is none.
inline double nearest_lane_gap(const WorldState& world, int agent_id, const MapGraph& map) {
  const VehicleState& ego = world.vehicles[static_cast<std::size_t>(agent_id)];
  const LoopPolyline& poly = map.centerline(ego.lane);
  const LoopProjection self = project_to_loop(poly, ego.position);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < world.vehicles.size(); ++j) {
    if (j == static_cast<std::size_t>(agent_id)) continue;
    const VehicleState& o = world.vehicles[j];
    const LoopProjection pj = project_to_loop(poly, o.position);
    if (std::abs(pj.signed_offset - self.signed_offset) >= map.lane_width()) continue;
    const double centre_gap = std::abs(signed_gap(self.arc_length, pj.arc_length, poly.length));
    best = std::min(best, std::max(0.0, centre_gap - 0.5 * (ego.length + o.length)));
  }
  return best;
}

/// Motion-planning reward for the step that produced `world_after`. Pose
/// terms are skipped for a respawned agent.
inline LLRewardBreakdown reward_low_breakdown(const WorldState& world_before, const WorldState& world_after,
                                              int agent_id, ControlAction action_prev, ControlAction action_now,
                                              const ReferencePath& ref, const LLRewardConfig& cfg,
                                              const MapGraph& map, double v_max) {
  const auto i = static_cast<std::size_t>(agent_id);
  const VehicleState& before = world_before.vehicles[i];
  const VehicleState& after = world_after.vehicles[i];
  LLRewardBreakdown r;
  if (world_after.collision_flags[i].boundary) r.boundary_collision = cfg.boundary_collision_penalty;
  if (world_after.collision_flags[i].agent) r.agent_collision = cfg.agent_collision_penalty;
  r.steering_rate = cfg.steering_rate_coeff * std::abs(action_now.a_delta - action_prev.a_delta);
  if (world_after.respawned[i]) return r;

  const double gap = nearest_lane_gap(world_after, agent_id, map);
  if (gap < cfg.proximity_threshold) r.proximity = cfg.proximity_coeff * (cfg.proximity_threshold - gap);
  if (after.lane == ref.target_lane) {
    r.centerline_dev = cfg.centerline_dev_coeff * project_to_lane(map, after.lane, after.position).distance;
  }
  r.refpath_dev = cfg.refpath_dev_coeff * project_to_lane(map, ref.target_lane, after.position).distance;
  const Vec2 tangent = project_to_lane(map, before.lane, before.position).tangent;
  r.forward = cfg.forward_coeff * (after.position - before.position).dot(tangent);
  r.speed = cfg.speed_coeff * after.speed / v_max;
  return r;
}

inline double reward_low(const WorldState& world_before, const WorldState& world_after, int agent_id,
                         ControlAction action_prev, ControlAction action_now, const ReferencePath& ref,
                         const LLRewardConfig& cfg, const MapGraph& map, double v_max) {
  return reward_low_breakdown(world_before, world_after, agent_id, action_prev, action_now, ref, cfg, map, v_max)
      .total();
}

}  // namespace lanemoe
