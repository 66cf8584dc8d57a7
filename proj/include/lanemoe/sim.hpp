#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "lanemoe/errors.hpp"
#include "lanemoe/geometry.hpp"
#include "lanemoe/map.hpp"

namespace lanemoe {

struct VehicleState {
  int id = 0;
  Vec2 position;
  double heading = 0.0;  // (-pi, pi]
  double speed = 0.0;
  int lane = 0;
  double length = 0.22;
  double width = 0.10;
  bool is_slow = false;
  // Lane the vehicle currently aims for; published so neighbours can observe
  // its short-term reference path.
  int target_lane = 0;

  OrientedBox box() const { return {position, heading, length, width}; }
  bool operator==(const VehicleState&) const = default;
};

/// Target speed and steering angle.
struct ControlAction {
  double a_v = 0.0;
  double a_delta = 0.0;
  bool operator==(const ControlAction&) const = default;
};

struct CollisionFlags {
  bool agent = false;
  bool boundary = false;

  bool any() const { return agent || boundary; }
  bool operator==(const CollisionFlags&) const = default;
};

struct SimConfig {
  int n_agents = 4;
  int n_slow = 4;
  double dt = 0.1;
  double v_min = 0.0;
  double v_max = 1.0;
  double delta_min = -0.5;
  double delta_max = 0.5;
  double slow_speed = 0.3;
  double wheelbase = 0.15;
  double vehicle_length = 0.22;
  double vehicle_width = 0.10;
  double min_gap_factor = 1.5;  // bumper gap at spawn, in vehicle lengths
  double pursuit_lookahead = 0.3;
  bool respawn = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_agents < 0 || n_slow < 0) throw ConfigError("vehicle counts must be non-negative");
    if (!(dt > 0.0)) throw ConfigError("dt must be positive");
    if (!(0.0 <= v_min && v_min < slow_speed && slow_speed < v_max)) {
      throw ConfigError("speeds must satisfy 0 <= v_min < slow_speed < v_max");
    }
    if (!(delta_min < 0.0 && 0.0 < delta_max)) throw ConfigError("steering bounds must straddle zero");
    if (!(wheelbase > 0.0 && vehicle_length > 0.0 && vehicle_width > 0.0)) {
      throw ConfigError("vehicle dimensions must be positive");
    }
  }

  ControlAction clamp(ControlAction a) const {
    return {std::clamp(a.a_v, v_min, v_max), std::clamp(a.a_delta, delta_min, delta_max)};
  }
};

struct WorldState {
  int step_index = 0;
  int n_agents = 0;
  std::vector<VehicleState> vehicles;  // ego agents first, then slow vehicles
  std::vector<CollisionFlags> collision_flags;  // one per ego agent
  std::vector<bool> respawned;                  // agents respawned during the last step
  std::uint64_t rng_seed = 0;
  std::mt19937_64 rng;

  std::span<const VehicleState> agents() const { return {vehicles.data(), static_cast<std::size_t>(n_agents)}; }
  bool operator==(const WorldState&) const = default;
};

/// Advances one vehicle with the kinematic bicycle model. The speed command
/// is applied directly, then the heading, then the position along the new
/// heading.
inline VehicleState step_kinematics(const VehicleState& state, ControlAction action, double dt, double wheelbase) {
  VehicleState next = state;
  next.speed = action.a_v;
  next.heading = wrap_angle(state.heading + next.speed / wheelbase * std::tan(action.a_delta) * dt);
  next.position = state.position + unit_from_angle(next.heading) * (next.speed * dt);
  return next;
}

namespace detail {

inline bool slot_is_clear(const MapGraph& map, const std::vector<VehicleState>& vehicles, int lane, double s,
                          double clearance, std::size_t skip) {
  const LoopPolyline& poly = map.centerline(lane);
  for (std::size_t j = 0; j < vehicles.size(); ++j) {
    if (j == skip) continue;
    const LoopProjection pj = project_to_loop(poly, vehicles[j].position);
    if (std::abs(pj.signed_offset) >= map.lane_width() - 1e-9) continue;
    if (std::abs(signed_gap(s, pj.arc_length, poly.length)) < clearance) return false;
  }
  return true;
}

inline VehicleState vehicle_at(const MapGraph& map, const SimConfig& cfg, int id, int lane, double s) {
  const PolylineSample smp = sample_loop(map.centerline(lane), s);
  VehicleState v;
  v.id = id;
  v.position = smp.point;
  v.heading = wrap_angle(std::atan2(smp.tangent.y, smp.tangent.x));
  v.lane = lane;
  v.target_lane = lane;
  v.length = cfg.vehicle_length;
  v.width = cfg.vehicle_width;
  return v;
}

}  // namespace detail

/// Places ego agents and slow vehicles on seeded-random lane slots spaced by
/// the minimum bumper gap.
inline WorldState spawn(const MapGraph& map, const SimConfig& cfg) {
  cfg.validate();
  WorldState world;
  world.n_agents = cfg.n_agents;
  world.rng_seed = cfg.seed;
  world.rng.seed(cfg.seed);
  const double pitch = cfg.vehicle_length * (1.0 + cfg.min_gap_factor);
  struct Slot {
    int lane;
    double s;
  };
  std::vector<Slot> slots;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int lane = 0; lane < map.n_lanes(); ++lane) {
    const double len = map.lane_length(lane);
    const int count = static_cast<int>(std::floor(len / pitch));
    const double phase = unit(world.rng) * pitch;
    for (int k = 0; k < count; ++k) slots.push_back({lane, phase + k * pitch});
  }
  const int total = cfg.n_agents + cfg.n_slow;
  if (static_cast<int>(slots.size()) <= total) {
    throw CapacityError("map offers " + std::to_string(slots.size()) + " spawn slots for " + std::to_string(total) +
                        " vehicles");
  }
  // Partial Fisher-Yates with explicit draws keeps the result independent of
  // the standard library's shuffle implementation.
  for (int i = 0; i < total; ++i) {
    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), slots.size() - 1);
    std::swap(slots[static_cast<std::size_t>(i)], slots[pick(world.rng)]);
  }
  for (int i = 0; i < total; ++i) {
    const Slot& sl = slots[static_cast<std::size_t>(i)];
    VehicleState v = detail::vehicle_at(map, cfg, i, sl.lane, sl.s);
    if (i >= cfg.n_agents) {
      v.is_slow = true;
      v.speed = cfg.slow_speed;
    }
    world.vehicles.push_back(v);
  }
  world.collision_flags.assign(static_cast<std::size_t>(cfg.n_agents), {});
  world.respawned.assign(static_cast<std::size_t>(cfg.n_agents), false);
  return world;
}

/// True when any corner of the box lies outside the outermost road
/// boundaries (left of lane 0's left edge or right of the last lane's right
/// edge).
inline bool crosses_road_boundary(const MapGraph& map, const OrientedBox& box) {
  const LoopPolyline& left = map.left_boundary(0);
  const LoopPolyline& right = map.right_boundary(map.n_lanes() - 1);
  for (Vec2 c : box.corners()) {
    if (project_to_loop(left, c).signed_offset > 0.0) return true;
    if (project_to_loop(right, c).signed_offset < 0.0) return true;
  }
  return false;
}

/// Recomputes per-agent collision flags for the current poses.
inline WorldState detect_collisions(WorldState world, const MapGraph& map) {
  const std::size_t n = static_cast<std::size_t>(world.n_agents);
  world.collision_flags.assign(n, {});
  std::vector<OrientedBox> boxes;
  boxes.reserve(world.vehicles.size());
  for (const auto& v : world.vehicles) boxes.push_back(v.box());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < boxes.size(); ++j) {
      if (i == j) continue;
      const double reach = 0.5 * (std::hypot(boxes[i].length, boxes[i].width) + std::hypot(boxes[j].length, boxes[j].width));
      if (distance(boxes[i].center, boxes[j].center) > reach) continue;
      if (boxes_overlap(boxes[i], boxes[j])) {
        world.collision_flags[i].agent = true;
        if (j < n) world.collision_flags[j].agent = true;
      }
    }
    world.collision_flags[i].boundary = crosses_road_boundary(map, boxes[i]);
  }
  return world;
}

/// Steering command of the pure-pursuit rule toward the point `lookahead`
/// metres ahead on the vehicle's own lane centerline.
inline double pure_pursuit_steering(const MapGraph& map, const VehicleState& v, double lookahead, double wheelbase) {
  const LoopPolyline& poly = map.centerline(v.lane);
  const LoopProjection pj = project_to_loop(poly, v.position);
  const Vec2 target = sample_loop(poly, pj.arc_length + lookahead).point;
  const Vec2 local = to_local(target, v.position, v.heading);
  const double ld2 = local.dot(local);
  if (ld2 <= 0.0) return 0.0;
  return std::atan(2.0 * wheelbase * local.y / ld2);
}

/// Moves a colliding agent to a random collision-free slot.
inline void respawn_agent(WorldState& world, std::size_t i, const MapGraph& map, const SimConfig& cfg) {
  const double clearance = cfg.vehicle_length * (1.0 + cfg.min_gap_factor);
  std::uniform_int_distribution<int> lane_pick(0, map.n_lanes() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const int lane = lane_pick(world.rng);
    const double s = unit(world.rng) * map.lane_length(lane);
    if (!detail::slot_is_clear(map, world.vehicles, lane, s, clearance, i)) continue;
    VehicleState v = detail::vehicle_at(map, cfg, world.vehicles[i].id, lane, s);
    world.vehicles[i] = v;
    world.respawned[i] = true;
    return;
  }
  throw CapacityError("no collision-free respawn slot found");
}

/// One simulation step: slow vehicles pursue their lane centerline, ego
/// agents apply their commands, collisions are flagged and colliding agents
/// respawned.
inline WorldState step_world(WorldState world, std::span<const ControlAction> actions, const MapGraph& map,
                             const SimConfig& cfg) {
  const std::size_t n = static_cast<std::size_t>(world.n_agents);
  if (actions.size() != n) throw Error("step_world needs one action per ego agent");
  for (std::size_t i = 0; i < world.vehicles.size(); ++i) {
    VehicleState& v = world.vehicles[i];
    if (i < n) {
      v = step_kinematics(v, cfg.clamp(actions[i]), cfg.dt, cfg.wheelbase);
      const LaneProjection pj = nearest_projection(map, v.position);
      if (pj.distance <= 2.0 * map.lane_width()) v.lane = pj.lane_index;
    } else {
      const double steer = std::clamp(pure_pursuit_steering(map, v, cfg.pursuit_lookahead, cfg.wheelbase),
                                      cfg.delta_min, cfg.delta_max);
      v = step_kinematics(v, {cfg.slow_speed, steer}, cfg.dt, cfg.wheelbase);
    }
  }
  world = detect_collisions(std::move(world), map);
  ++world.step_index;
  world.respawned.assign(n, false);
  if (cfg.respawn) {
    for (std::size_t i = 0; i < n; ++i) {
      if (world.collision_flags[i].any()) respawn_agent(world, i, map, cfg);
    }
  }
  return world;
}

}  // namespace lanemoe
