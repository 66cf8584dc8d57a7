#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lanemoe/errors.hpp"
#include "lanemoe/geometry.hpp"
#include "lanemoe/map.hpp"
#include "lanemoe/sim.hpp"

namespace lanemoe {

inline constexpr int kHighLevelObsLength = 33;
inline constexpr int kLowLevelObsLength = 57;
inline constexpr int kHighLevelNeighbors = 4;
inline constexpr int kLowLevelNeighbors = 3;
inline constexpr int kRefPathPoints = 6;
inline constexpr int kNeighborRefPoints = 2;

using HLObservation = std::array<double, kHighLevelObsLength>;
using LLObservation = std::array<double, kLowLevelObsLength>;

struct ObservationConfig {
  double v_max = 1.0;
  double d_norm = 2.0;
  double ref_spacing = 0.2;
};

namespace detail {

inline double clamp_unit(double v) { return std::clamp(v, -1.0, 1.0); }

struct Neighbor {
  std::size_t index = 0;
  int id = 0;
  double gap = 0.0;      // signed arc-length gap on the ego lane, positive ahead
  double lateral = 0.0;  // lateral offset relative to the ego lane centerline
};

// Other vehicles ordered by |gap| on the ego's lane, ties broken by id. Gaps
// are compared on a 1e-9 m grid so that rounding noise cannot reorder
// vehicles sitting at equal spacing.
inline std::vector<Neighbor> neighbors_by_distance(const WorldState& world, std::size_t agent, const MapGraph& map) {
  const VehicleState& ego = world.vehicles[agent];
  const LoopPolyline& poly = map.centerline(ego.lane);
  const LoopProjection self = project_to_loop(poly, ego.position);
  std::vector<Neighbor> out;
  out.reserve(world.vehicles.size());
  for (std::size_t j = 0; j < world.vehicles.size(); ++j) {
    if (j == agent) continue;
    const LoopProjection pj = project_to_loop(poly, world.vehicles[j].position);
    out.push_back({j, world.vehicles[j].id, signed_gap(self.arc_length, pj.arc_length, poly.length),
                   pj.signed_offset - self.signed_offset});
  }
  std::sort(out.begin(), out.end(), [](const Neighbor& a, const Neighbor& b) {
    const long long da = std::llround(std::abs(a.gap) * 1e9), db = std::llround(std::abs(b.gap) * 1e9);
    if (da != db) return da < db;
    return a.id < b.id;
  });
  return out;
}

inline double lane_feature(int lane, int n_lanes) {
  return n_lanes > 1 ? static_cast<double>(lane) / (n_lanes - 1) : 0.0;
}

}  // namespace detail

/// High-level observation:
///   [0..5)   ego: x, y (map-normalized absolute), heading, speed, lane
///   [5..33)  4 nearest vehicles x 7: rel x, rel y, rel heading, speed, lane,
///            distance, is-ahead (+1/-1); empty slots hold the sentinel
///            (zeros, distance 1, is-ahead 0).
inline HLObservation observe_high(const WorldState& world, int agent_id, const MapGraph& map,
                                  const ObservationConfig& cfg = {}) {
  if (agent_id < 0 || agent_id >= world.n_agents) throw Error("invalid agent id");
  const auto agent = static_cast<std::size_t>(agent_id);
  const VehicleState& ego = world.vehicles[agent];
  HLObservation obs{};
  const Vec2 abs = (ego.position - map.center()) * (1.0 / map.half_extent());
  obs[0] = detail::clamp_unit(abs.x);
  obs[1] = detail::clamp_unit(abs.y);
  obs[2] = ego.heading / std::numbers::pi;
  obs[3] = detail::clamp_unit(ego.speed / cfg.v_max);
  obs[4] = detail::lane_feature(ego.lane, map.n_lanes());

  const auto nbs = detail::neighbors_by_distance(world, agent, map);
  for (int k = 0; k < kHighLevelNeighbors; ++k) {
    double* blk = obs.data() + 5 + 7 * k;
    if (static_cast<std::size_t>(k) >= nbs.size()) {
      blk[5] = 1.0;
      continue;
    }
    const VehicleState& o = world.vehicles[nbs[k].index];
    const Vec2 rel = to_local(o.position, ego.position, ego.heading);
    blk[0] = detail::clamp_unit(rel.x / cfg.d_norm);
    blk[1] = detail::clamp_unit(rel.y / cfg.d_norm);
    blk[2] = wrap_angle(o.heading - ego.heading) / std::numbers::pi;
    blk[3] = detail::clamp_unit(o.speed / cfg.v_max);
    blk[4] = detail::lane_feature(o.lane, map.n_lanes());
    blk[5] = std::min(std::abs(nbs[k].gap), cfg.d_norm) / cfg.d_norm;
    blk[6] = nbs[k].gap >= 0.0 ? 1.0 : -1.0;
  }
  return obs;
}

/// Low-level observation:
///   [0..5)    ego: x, y (map-normalized absolute), heading, vx, vy
///   [5..17)   6 reference waypoints (ego frame)
///   [17]      signed distance to the reference path
///   [18..24)  nearest left boundary point, nearest right boundary point
///             (ego frame), lateral position of the left and right boundary
///   [24..57)  3 nearest vehicles x 11: rel x, rel y, rel heading, speed,
///             lane, longitudinal gap, lateral gap, 2 waypoints of their own
///             reference path (ego frame); sentinel has longitudinal gap 1.
inline LLObservation observe_low(const WorldState& world, int agent_id, const MapGraph& map, const ReferencePath& ref,
                                 const ObservationConfig& cfg = {}) {
  if (agent_id < 0 || agent_id >= world.n_agents) throw Error("invalid agent id");
  if (ref.points.size() < static_cast<std::size_t>(kRefPathPoints)) {
    throw InsufficientReferencePath("low-level observation needs " + std::to_string(kRefPathPoints) +
                                    " reference points, got " + std::to_string(ref.points.size()));
  }
  const auto agent = static_cast<std::size_t>(agent_id);
  const VehicleState& ego = world.vehicles[agent];
  const double inv_d = 1.0 / cfg.d_norm;
  auto local = [&](Vec2 p) { return to_local(p, ego.position, ego.heading) * inv_d; };
  LLObservation obs{};
  const Vec2 abs = (ego.position - map.center()) * (1.0 / map.half_extent());
  obs[0] = detail::clamp_unit(abs.x);
  obs[1] = detail::clamp_unit(abs.y);
  obs[2] = ego.heading / std::numbers::pi;
  obs[3] = detail::clamp_unit(ego.speed * std::cos(ego.heading) / cfg.v_max);
  obs[4] = detail::clamp_unit(ego.speed * std::sin(ego.heading) / cfg.v_max);
  for (int k = 0; k < kRefPathPoints; ++k) {
    const Vec2 q = local(ref.points[static_cast<std::size_t>(k)]);
    obs[5 + 2 * k] = detail::clamp_unit(q.x);
    obs[6 + 2 * k] = detail::clamp_unit(q.y);
  }
  obs[17] = detail::clamp_unit(signed_distance_to_path(ref, ego.position) * inv_d);

  const LoopProjection lb = project_to_loop(map.left_boundary(ego.lane), ego.position);
  const LoopProjection rb = project_to_loop(map.right_boundary(ego.lane), ego.position);
  const Vec2 lq = local(lb.point);
  const Vec2 rq = local(rb.point);
  obs[18] = detail::clamp_unit(lq.x);
  obs[19] = detail::clamp_unit(lq.y);
  obs[20] = detail::clamp_unit(rq.x);
  obs[21] = detail::clamp_unit(rq.y);
  obs[22] = detail::clamp_unit(-lb.signed_offset * inv_d);
  obs[23] = detail::clamp_unit(-rb.signed_offset * inv_d);

  const auto nbs = detail::neighbors_by_distance(world, agent, map);
  for (int k = 0; k < kLowLevelNeighbors; ++k) {
    double* blk = obs.data() + 24 + 11 * k;
    if (static_cast<std::size_t>(k) >= nbs.size()) {
      blk[5] = 1.0;
      continue;
    }
    const VehicleState& o = world.vehicles[nbs[k].index];
    const Vec2 rel = local(o.position);
    blk[0] = detail::clamp_unit(rel.x);
    blk[1] = detail::clamp_unit(rel.y);
    blk[2] = wrap_angle(o.heading - ego.heading) / std::numbers::pi;
    blk[3] = detail::clamp_unit(o.speed / cfg.v_max);
    blk[4] = detail::lane_feature(o.lane, map.n_lanes());
    blk[5] = detail::clamp_unit(nbs[k].gap * inv_d);
    blk[6] = detail::clamp_unit(nbs[k].lateral * inv_d);
    try {
      const ReferencePath oref = reference_path_for(map, o.position, o.target_lane, kNeighborRefPoints, cfg.ref_spacing);
      for (int w = 0; w < kNeighborRefPoints; ++w) {
        const Vec2 q = local(oref.points[static_cast<std::size_t>(w)]);
        blk[7 + 2 * w] = detail::clamp_unit(q.x);
        blk[8 + 2 * w] = detail::clamp_unit(q.y);
      }
    } catch (const OffMap&) {
      // Off-map neighbours keep zero waypoints until they are respawned.
    }
  }
  return obs;
}

/// Frozen per-entry layouts of both observation vectors.
inline nlohmann::json observation_schema(const ObservationConfig& cfg = {}) {
  using nlohmann::json;
  json hl = json::array({"ego.x", "ego.y", "ego.heading", "ego.speed", "ego.lane"});
  for (int k = 0; k < kHighLevelNeighbors; ++k) {
    const std::string p = "veh" + std::to_string(k) + ".";
    for (const char* f : {"rel_x", "rel_y", "rel_heading", "speed", "lane", "distance", "is_ahead"}) hl.push_back(p + f);
  }
  json ll = json::array({"ego.x", "ego.y", "ego.heading", "ego.vx", "ego.vy"});
  for (int k = 0; k < kRefPathPoints; ++k) {
    ll.push_back("ref" + std::to_string(k) + ".x");
    ll.push_back("ref" + std::to_string(k) + ".y");
  }
  ll.push_back("ref.signed_distance");
  for (const char* f : {"left_boundary.x", "left_boundary.y", "right_boundary.x", "right_boundary.y",
                        "left_boundary.lateral", "right_boundary.lateral"}) {
    ll.push_back(f);
  }
  for (int k = 0; k < kLowLevelNeighbors; ++k) {
    const std::string p = "veh" + std::to_string(k) + ".";
    for (const char* f : {"rel_x", "rel_y", "rel_heading", "speed", "lane", "long_gap", "lat_gap", "ref0.x", "ref0.y",
                          "ref1.x", "ref1.y"}) {
      ll.push_back(p + f);
    }
  }
  return {{"version", 1},
          {"hl_length", kHighLevelObsLength},
          {"ll_length", kLowLevelObsLength},
          {"hl", hl},
          {"ll", ll},
          {"normalization",
           {{"position", "map_half_extent"},
            {"speed_v_max", cfg.v_max},
            {"distance_d_norm", cfg.d_norm},
            {"angle", "pi"},
            {"ref_spacing", cfg.ref_spacing}}}};
}

}  // namespace lanemoe
