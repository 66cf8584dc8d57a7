#include <cmath>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "lanemoe/observation.hpp"
#include "lanemoe/sim.hpp"

using namespace lanemoe;

namespace {

MapGraph default_map() { return build_loop_map(StadiumParams{}); }

WorldState manual_world(std::vector<VehicleState> vehicles, int n_agents) {
  WorldState w;
  w.n_agents = n_agents;
  w.vehicles = std::move(vehicles);
  w.collision_flags.assign(static_cast<std::size_t>(n_agents), {});
  w.respawned.assign(static_cast<std::size_t>(n_agents), false);
  return w;
}

VehicleState slow_at(const MapGraph& map, int id, int lane, double s) {
  VehicleState v = detail::vehicle_at(map, SimConfig{}, id, lane, s);
  v.is_slow = true;
  v.speed = 0.3;
  return v;
}

// Random reachable-looking world: spawned, then perturbed around the lanes.
WorldState random_world(const MapGraph& map, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> agents(1, 6), slows(0, 6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SimConfig cfg;
  cfg.n_agents = agents(rng);
  cfg.n_slow = slows(rng);
  cfg.seed = rng();
  WorldState w = spawn(map, cfg);
  for (auto& v : w.vehicles) {
    const LaneProjection pj = project_to_lane(map, v.lane, v.position);
    v.position = v.position + pj.tangent.left_normal() * ((u(rng) - 0.5) * 0.5);
    v.heading = wrap_angle(v.heading + (u(rng) - 0.5) * 1.0);
    v.speed = u(rng);
    v.target_lane = u(rng) < 0.5 ? 0 : 1;
    v.lane = nearest_projection(map, v.position).lane_index;
  }
  return w;
}

MapGraph transformed(const MapGraph& map, double angle, Vec2 shift) {
  std::vector<Lanelet> lls = map.lanelets();
  auto tf = [&](std::vector<Vec2>& pts) {
    for (Vec2& p : pts) p = rotate(p, angle) + shift;
  };
  for (Lanelet& ll : lls) {
    tf(ll.centerline);
    tf(ll.left_boundary);
    tf(ll.right_boundary);
  }
  return MapGraph(std::move(lls), map.n_lanes(), map.lane_width(), map.loop_length());
}

WorldState transformed(WorldState w, double angle, Vec2 shift) {
  for (auto& v : w.vehicles) {
    v.position = rotate(v.position, angle) + shift;
    v.heading = wrap_angle(v.heading + angle);
  }
  return w;
}

}  // namespace

TEST(ObservationLength, SchemaMatchesPublishedLengths) {
  const auto schema = observation_schema();
  EXPECT_EQ(schema.at("hl").size(), 33u);
  EXPECT_EQ(schema.at("ll").size(), 57u);
  EXPECT_EQ(kHighLevelObsLength, 33);
  EXPECT_EQ(kLowLevelObsLength, 57);
}

TEST(ObservationLength, FuzzedWorldsStayFiniteAndBounded) {
  const MapGraph map = default_map();
  std::mt19937_64 rng(42);
  for (int k = 0; k < 10000; ++k) {
    const WorldState w = random_world(map, rng);
    for (int a = 0; a < w.n_agents; ++a) {
      const HLObservation hl = observe_high(w, a, map);
      const ReferencePath ref = reference_path_for(map, w.vehicles[a].position, w.vehicles[a].target_lane, 6, 0.2);
      const LLObservation ll = observe_low(w, a, map, ref);
      ASSERT_EQ(hl.size(), 33u);
      ASSERT_EQ(ll.size(), 57u);
      for (double x : hl) ASSERT_TRUE(std::isfinite(x) && std::abs(x) <= 1.0);
      for (double x : ll) ASSERT_TRUE(std::isfinite(x) && std::abs(x) <= 1.0);
    }
  }
}

TEST(ObserveHigh, LoneAgentGetsSentinelBlocks) {
  const MapGraph map = default_map();
  const WorldState w = manual_world({detail::vehicle_at(map, SimConfig{}, 0, 1, 2.0)}, 1);
  const HLObservation obs = observe_high(w, 0, map);
  for (int k = 0; k < 4; ++k) {
    for (int f = 0; f < 7; ++f) EXPECT_EQ(obs[5 + 7 * k + f], f == 5 ? 1.0 : 0.0) << k << ' ' << f;
  }
  EXPECT_EQ(obs[4], 1.0);
  EXPECT_THROW(observe_high(w, 1, map), Error);
}

TEST(ObserveHigh, VehicleAheadInSameLane) {
  const MapGraph map = default_map();
  for (double g : {0.3, 0.75, 1.5}) {
    const WorldState w = manual_world({detail::vehicle_at(map, SimConfig{}, 0, 0, 9.9), slow_at(map, 1, 0, 9.9 + g)}, 1);
    const double expected = forward_gap(locate(map, w.vehicles[0].position).arc_length,
                                        locate(map, w.vehicles[1].position).arc_length, map.lane_length(0));
    EXPECT_NEAR(expected, g, 1e-9);
    const HLObservation obs = observe_high(w, 0, map);
    EXPECT_EQ(obs[5 + 6], 1.0);
    EXPECT_NEAR(obs[5 + 5], expected / 2.0, 1e-9);
    EXPECT_NEAR(obs[5 + 3], 0.3, 1e-12);
    EXPECT_GT(obs[5 + 0], 0.0);
  }
}

TEST(ObserveHigh, VehicleBehindIsFlaggedBehind) {
  const MapGraph map = default_map();
  const WorldState w = manual_world({detail::vehicle_at(map, SimConfig{}, 0, 0, 0.2), slow_at(map, 1, 0, 10.0)}, 1);
  const HLObservation obs = observe_high(w, 0, map);
  EXPECT_EQ(obs[5 + 6], -1.0);
  const double back = map.lane_length(0) - 10.0 + 0.2;
  EXPECT_NEAR(obs[5 + 5], back / 2.0, 1e-9);
}

TEST(ObserveHigh, BlocksSortedByDistanceTiesById) {
  const MapGraph map = default_map();
  VehicleState first = slow_at(map, 2, 0, 5.5), second = slow_at(map, 3, 0, 5.5);
  first.speed = 0.1;
  second.speed = 0.2;
  const WorldState w = manual_world(
      {detail::vehicle_at(map, SimConfig{}, 0, 0, 5.0), slow_at(map, 1, 1, 0.5), second, first, slow_at(map, 4, 0, 7.0)},
      1);
  const HLObservation obs = observe_high(w, 0, map);
  double prev = -1.0;
  for (int k = 0; k < 4; ++k) {
    EXPECT_GE(obs[5 + 7 * k + 5], prev);
    prev = obs[5 + 7 * k + 5];
  }
  EXPECT_NEAR(obs[5 + 3], 0.1, 1e-12);
  EXPECT_NEAR(obs[5 + 7 + 3], 0.2, 1e-12);
}

TEST(ObserveHigh, SortedUnderFuzz) {
  const MapGraph map = default_map();
  std::mt19937_64 rng(8);
  for (int k = 0; k < 500; ++k) {
    const WorldState w = random_world(map, rng);
    for (int a = 0; a < w.n_agents; ++a) {
      const HLObservation obs = observe_high(w, a, map);
      for (int j = 1; j < 4; ++j) EXPECT_LE(obs[5 + 7 * (j - 1) + 5], obs[5 + 7 * j + 5] + 1e-9);
      const ReferencePath ref = reference_path_for(map, w.vehicles[a].position, w.vehicles[a].lane, 6, 0.2);
      const LLObservation ll = observe_low(w, a, map, ref);
      for (int j = 1; j < 3; ++j) EXPECT_LE(std::abs(ll[24 + 11 * (j - 1) + 5]), std::abs(ll[24 + 11 * j + 5]) + 1e-9);
    }
  }
}

TEST(ObserveLow, OnPathHasZeroSignedDistance) {
  const MapGraph map = default_map();
  for (double s : {0.0, 1.0, 3.7, 6.0}) {
    const WorldState w = manual_world({detail::vehicle_at(map, SimConfig{}, 0, 1, s)}, 1);
    const ReferencePath ref = reference_path_for(map, w.vehicles[0].position, 1, 6, 0.2);
    EXPECT_NEAR(observe_low(w, 0, map, ref)[17], 0.0, 1e-9);
  }
}

TEST(ObserveLow, LaneBoundaryDistancesOnLaneZeroCenterline) {
  const MapGraph map = default_map();
  for (double s : {0.4, 1.0, 1.9, 5.6, 7.0}) {
    const WorldState w = manual_world({detail::vehicle_at(map, SimConfig{}, 0, 0, s)}, 1);
    const ReferencePath ref = reference_path_for(map, w.vehicles[0].position, 0, 6, 0.2);
    const LLObservation obs = observe_low(w, 0, map, ref);
    EXPECT_NEAR(obs[22], 0.15 / 2.0, 1e-6) << s;
    EXPECT_NEAR(obs[23], -0.15 / 2.0, 1e-6) << s;
    // Nearest boundary points sit abeam of the ego.
    EXPECT_NEAR(obs[18], 0.0, 1e-6);
    EXPECT_NEAR(obs[19], 0.15 / 2.0, 1e-6);
    EXPECT_NEAR(obs[21], -0.15 / 2.0, 1e-6);
  }
}

TEST(ObserveLow, LaneBoundaryDistancesOnCurves) {
  // Centerline and boundaries are chords of concentric arcs; their sagittas
  // differ by at most spacing^2 / (8 r_inner).
  const MapGraph map = default_map();
  const double tol = 0.05 * 0.05 / (8.0 * 0.85) / 2.0;
  for (double s : {2.5, 3.3, 4.0, 7.9, 9.5}) {
    const WorldState w = manual_world({detail::vehicle_at(map, SimConfig{}, 0, 0, s)}, 1);
    const ReferencePath ref = reference_path_for(map, w.vehicles[0].position, 0, 6, 0.2);
    const LLObservation obs = observe_low(w, 0, map, ref);
    EXPECT_NEAR(obs[22], 0.15 / 2.0, tol) << s;
    EXPECT_NEAR(obs[23], -0.15 / 2.0, tol) << s;
  }
}

TEST(ObserveLow, ReferenceWaypointsAheadOfEgo) {
  const MapGraph map = default_map();
  const WorldState w = manual_world({detail::vehicle_at(map, SimConfig{}, 0, 0, 0.5)}, 1);
  const ReferencePath ref = reference_path_for(map, w.vehicles[0].position, 0, 6, 0.2);
  const LLObservation obs = observe_low(w, 0, map, ref);
  // On a straight, waypoint k lies (k+1)*spacing straight ahead.
  for (int k = 0; k < 6; ++k) {
    EXPECT_NEAR(obs[5 + 2 * k], 0.2 * (k + 1) / 2.0, 1e-9);
    EXPECT_NEAR(obs[6 + 2 * k], 0.0, 1e-9);
  }
}

TEST(ObserveLow, ShortReferencePathThrows) {
  const MapGraph map = default_map();
  const WorldState w = manual_world({detail::vehicle_at(map, SimConfig{}, 0, 0, 0.5)}, 1);
  const ReferencePath ref = reference_path_for(map, w.vehicles[0].position, 0, 5, 0.2);
  EXPECT_THROW(observe_low(w, 0, map, ref), InsufficientReferencePath);
}

TEST(ObserveLow, SentinelAndNeighborReferencePath) {
  const MapGraph map = default_map();
  VehicleState other = detail::vehicle_at(map, SimConfig{}, 1, 0, 1.0);
  other.target_lane = 0;
  const WorldState w = manual_world({detail::vehicle_at(map, SimConfig{}, 0, 0, 0.5), other}, 2);
  const ReferencePath ref = reference_path_for(map, w.vehicles[0].position, 0, 6, 0.2);
  const LLObservation obs = observe_low(w, 0, map, ref);
  EXPECT_NEAR(obs[24 + 5], 0.5 / 2.0, 1e-9);
  EXPECT_NEAR(obs[24 + 7], (0.5 + 0.2) / 2.0, 1e-9);
  EXPECT_NEAR(obs[24 + 9], (0.5 + 0.4) / 2.0, 1e-9);
  for (int k = 1; k < 3; ++k) {
    for (int f = 0; f < 11; ++f) EXPECT_EQ(obs[24 + 11 * k + f], f == 5 ? 1.0 : 0.0);
  }
}

TEST(Equivariance, RigidMotionLeavesRelativeEntriesUnchanged) {
  const MapGraph map = default_map();
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  // Absolute ego entries: position and heading (high level), position,
  // heading and world-frame velocity (low level).
  const std::set<int> hl_absolute{0, 1, 2};
  const std::set<int> ll_absolute{0, 1, 2, 3, 4};
  for (int k = 0; k < 100; ++k) {
    const double angle = u(rng) * std::numbers::pi;
    const Vec2 shift{u(rng) * 5.0, u(rng) * 5.0};
    const MapGraph map2 = transformed(map, angle, shift);
    const WorldState w = random_world(map, rng);
    const WorldState w2 = transformed(w, angle, shift);
    for (int a = 0; a < w.n_agents; ++a) {
      const HLObservation h1 = observe_high(w, a, map), h2 = observe_high(w2, a, map2);
      for (int i = 0; i < 33; ++i) {
        if (!hl_absolute.count(i)) EXPECT_NEAR(h1[i], h2[i], 1e-9) << "hl entry " << i;
      }
      const int target = w.vehicles[a].target_lane;
      const LLObservation l1 = observe_low(w, a, map, reference_path_for(map, w.vehicles[a].position, target, 6, 0.2));
      const LLObservation l2 =
          observe_low(w2, a, map2, reference_path_for(map2, w2.vehicles[a].position, target, 6, 0.2));
      for (int i = 0; i < 57; ++i) {
        if (!ll_absolute.count(i)) EXPECT_NEAR(l1[i], l2[i], 1e-9) << "ll entry " << i;
      }
    }
  }
}

TEST(Schema, DeterministicWithUniqueEntryNames) {
  const auto a = observation_schema();
  const auto b = observation_schema();
  EXPECT_EQ(a, b);
  std::set<std::string> names;
  for (const auto& n : a.at("ll")) names.insert(n.get<std::string>());
  EXPECT_EQ(names.size(), 57u);
}
