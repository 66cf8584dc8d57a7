#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lanemoe/errors.hpp"
#include "lanemoe/geometry.hpp"

namespace lanemoe {

struct Lanelet {
  int id = 0;
  std::vector<Vec2> centerline;
  std::vector<Vec2> left_boundary;
  std::vector<Vec2> right_boundary;
  int lane_index = 0;
  int successor_id = 0;
  std::optional<int> neighbor_id;
};

/// Parameters of the builtin stadium loop. Lane 0 is the inner (left) lane;
/// `curve_radius` is the radius of the lane-0 centerline on the arcs.
struct StadiumParams {
  int n_lanes = 2;
  double lane_width = 0.3;
  double straight_length = 2.0;
  double curve_radius = 1.0;
  double lanelet_length = 0.25;
  double point_spacing = 0.05;
};

/// A closed polyline with cumulative arc lengths. Segment i runs from
/// points[i] to points[(i + 1) % size].
struct LoopPolyline {
  std::vector<Vec2> points;
  std::vector<double> cumulative;  // arc length at points[i]
  std::vector<int> segment_lanelet;
  double length = 0.0;

  std::size_t size() const { return points.size(); }
  Vec2 segment_end(std::size_t i) const { return points[(i + 1) % points.size()]; }
};

/// Projection of a point onto a lane centerline.
struct LaneProjection {
  int lane_index = 0;
  int lanelet_id = 0;
  std::size_t segment = 0;
  double arc_length = 0.0;
  double lateral_offset = 0.0;  // positive toward the left boundary
  double distance = 0.0;        // unsigned perpendicular distance
  Vec2 point;
  Vec2 tangent;  // unit
};

struct LaneLocation {
  int lanelet_id = 0;
  int lane_index = 0;
  double arc_length = 0.0;
  double lateral_offset = 0.0;
};

struct ReferencePath {
  std::vector<Vec2> points;
  int target_lane = 0;
  int source_lanelet_id = 0;
  // Projection of the vehicle onto the target-lane centerline; the path
  // starts `spacing` ahead of it.
  Vec2 anchor;
  Vec2 anchor_tangent{1.0, 0.0};
  double anchor_arc_length = 0.0;
};

namespace detail {

inline LoopPolyline chain_polyline(const std::vector<const Lanelet*>& chain,
                                   std::vector<Vec2> Lanelet::*member) {
  LoopPolyline poly;
  for (const Lanelet* ll : chain) {
    const auto& pts = ll->*member;
    // The last point of each lanelet coincides with the first of its successor.
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
      poly.points.push_back(pts[i]);
      poly.segment_lanelet.push_back(ll->id);
    }
  }
  poly.cumulative.resize(poly.points.size());
  double s = 0.0;
  for (std::size_t i = 0; i < poly.points.size(); ++i) {
    poly.cumulative[i] = s;
    s += distance(poly.points[i], poly.segment_end(i));
  }
  poly.length = s;
  return poly;
}

}  // namespace detail

class MapGraph {
 public:
  MapGraph() = default;

  /// Validates lanelet invariants and builds the per-lane loop polylines.
  MapGraph(std::vector<Lanelet> lanelets, int n_lanes, double lane_width,
           std::optional<double> loop_length = std::nullopt)
      : lanelets_(std::move(lanelets)), n_lanes_(n_lanes), lane_width_(lane_width) {
    if (n_lanes_ < 1) throw InvalidGeometry("map needs at least one lane");
    if (!(lane_width_ > 0.0)) throw InvalidGeometry("lane width must be positive");
    for (std::size_t i = 0; i < lanelets_.size(); ++i) {
      const Lanelet& ll = lanelets_[i];
      if (index_.count(ll.id)) throw InvalidGeometry("duplicate lanelet id " + std::to_string(ll.id));
      index_[ll.id] = i;
      if (ll.centerline.size() < 2 || ll.centerline.size() != ll.left_boundary.size() ||
          ll.centerline.size() != ll.right_boundary.size()) {
        throw InvalidGeometry("lanelet " + std::to_string(ll.id) + " has inconsistent point arrays");
      }
      if (ll.lane_index < 0 || ll.lane_index >= n_lanes_) {
        throw InvalidGeometry("lanelet " + std::to_string(ll.id) + " has lane index out of range");
      }
    }
    lanes_.resize(n_lanes_);
    for (int lane = 0; lane < n_lanes_; ++lane) build_lane(lane);
    for (const Lanelet& ll : lanelets_) {
      if (ll.neighbor_id) {
        const Lanelet& nb = lanelet(*ll.neighbor_id);
        if (nb.lane_index == ll.lane_index) {
          throw InvalidGeometry("lanelet " + std::to_string(ll.id) + " has a neighbor in its own lane");
        }
      }
    }
    loop_length_ = loop_length.value_or(lanes_[0].center.length);
    double xmin = std::numeric_limits<double>::max(), xmax = -xmin, ymin = xmin, ymax = -xmin;
    for (const Lanelet& ll : lanelets_) {
      for (const auto* pts : {&ll.left_boundary, &ll.right_boundary}) {
        for (Vec2 p : *pts) {
          xmin = std::min(xmin, p.x);
          xmax = std::max(xmax, p.x);
          ymin = std::min(ymin, p.y);
          ymax = std::max(ymax, p.y);
        }
      }
    }
    center_ = {0.5 * (xmin + xmax), 0.5 * (ymin + ymax)};
    half_extent_ = 0.5 * std::max(xmax - xmin, ymax - ymin);
  }

  const std::vector<Lanelet>& lanelets() const { return lanelets_; }
  int n_lanes() const { return n_lanes_; }
  double lane_width() const { return lane_width_; }
  /// Centerline arc length of lane 0.
  double loop_length() const { return loop_length_; }
  /// Polyline arc length of lane k; modular arithmetic on arc lengths uses this.
  double lane_length(int lane) const { return lanes_.at(lane).center.length; }
  Vec2 center() const { return center_; }
  double half_extent() const { return half_extent_; }

  const Lanelet& lanelet(int id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw InvalidGeometry("unknown lanelet id " + std::to_string(id));
    return lanelets_[it->second];
  }

  const LoopPolyline& centerline(int lane) const { return lanes_.at(lane).center; }
  const LoopPolyline& left_boundary(int lane) const { return lanes_.at(lane).left; }
  const LoopPolyline& right_boundary(int lane) const { return lanes_.at(lane).right; }
  /// Lanelet ids of one lane in successor order.
  const std::vector<int>& lane_sequence(int lane) const { return lanes_.at(lane).sequence; }

 private:
  struct Lane {
    std::vector<int> sequence;
    LoopPolyline center, left, right;
  };

  void build_lane(int lane) {
    std::vector<int> members;
    for (const Lanelet& ll : lanelets_) {
      if (ll.lane_index == lane) members.push_back(ll.id);
    }
    if (members.empty()) throw InvalidGeometry("lane " + std::to_string(lane) + " has no lanelets");
    const int start = *std::min_element(members.begin(), members.end());
    std::vector<const Lanelet*> chain;
    int cur = start;
    do {
      const Lanelet& ll = lanelet(cur);
      if (ll.lane_index != lane) throw InvalidGeometry("successor chain leaves lane " + std::to_string(lane));
      chain.push_back(&ll);
      lanes_[lane].sequence.push_back(ll.id);
      if (chain.size() > members.size()) {
        throw InvalidGeometry("lane " + std::to_string(lane) + " successor chain is not a simple loop");
      }
      cur = ll.successor_id;
    } while (cur != start);
    if (chain.size() != members.size()) {
      throw InvalidGeometry("lane " + std::to_string(lane) + " successor chain misses lanelets");
    }
    lanes_[lane].center = detail::chain_polyline(chain, &Lanelet::centerline);
    lanes_[lane].left = detail::chain_polyline(chain, &Lanelet::left_boundary);
    lanes_[lane].right = detail::chain_polyline(chain, &Lanelet::right_boundary);
  }

  std::vector<Lanelet> lanelets_;
  std::map<int, std::size_t> index_;
  std::vector<Lane> lanes_;
  int n_lanes_ = 0;
  double lane_width_ = 0.0;
  double loop_length_ = 0.0;
  Vec2 center_;
  double half_extent_ = 1.0;
};

/// Forward distance from arc length `from` to `to` on a loop of length L, in [0, L).
inline double forward_gap(double from, double to, double loop) {
  double d = std::fmod(to - from, loop);
  if (d < 0.0) d += loop;
  if (d >= loop) d -= loop;
  return d;
}

/// Signed shortest modular gap from `from` to `to`: positive when `to` is ahead.
inline double signed_gap(double from, double to, double loop) {
  const double f = forward_gap(from, to, loop);
  return f <= 0.5 * loop ? f : f - loop;
}

namespace detail {

// Reference line of the stadium (lane-0 centerline) at station u.
struct StationFrame {
  Vec2 point;
  Vec2 tangent;
};

inline StationFrame stadium_frame(double u, double straight, double radius) {
  const double pi = std::numbers::pi;
  const double arc = pi * radius;
  if (u < straight) {
    return {{-0.5 * straight + u, -radius}, {1.0, 0.0}};
  }
  if (u < straight + arc) {
    const double phi = -0.5 * pi + (u - straight) / radius;
    return {{0.5 * straight + radius * std::cos(phi), radius * std::sin(phi)}, {-std::sin(phi), std::cos(phi)}};
  }
  if (u < 2.0 * straight + arc) {
    return {{0.5 * straight - (u - straight - arc), radius}, {-1.0, 0.0}};
  }
  const double phi = 0.5 * pi + (u - 2.0 * straight - arc) / radius;
  return {{-0.5 * straight + radius * std::cos(phi), radius * std::sin(phi)}, {-std::sin(phi), std::cos(phi)}};
}

}  // namespace detail

/// Builds the closed stadium loop: two straights joined by two semicircular
/// arcs, travelled counter-clockwise so the inner lane is on the left.
/// Lanelets of all lanes share cross-sections, so lanelet i of one lane sits
/// beside lanelet i of every other lane.
inline MapGraph build_loop_map(const StadiumParams& p) {
  if (p.n_lanes < 2) throw InvalidGeometry("stadium loop needs at least two lanes");
  if (!(p.lane_width > 0.0 && p.straight_length > 0.0 && p.curve_radius > 0.0 && p.lanelet_length > 0.0 &&
        p.point_spacing > 0.0)) {
    throw InvalidGeometry("stadium lengths must be positive");
  }
  if (!(p.lanelet_length < p.straight_length)) throw InvalidGeometry("lanelet_length must be below straight_length");
  if (p.curve_radius <= p.lane_width * p.n_lanes) {
    throw InvalidGeometry("curve_radius must exceed lane_width * n_lanes");
  }
  const double loop = 2.0 * p.straight_length + 2.0 * std::numbers::pi * p.curve_radius;
  const int count = std::max(1, static_cast<int>(std::lround(loop / p.lanelet_length)));
  const double seg = loop / count;
  const int pts_per = std::max(2, static_cast<int>(std::ceil(seg / p.point_spacing - 1e-9))) + 1;

  std::vector<Lanelet> lanelets;
  lanelets.reserve(static_cast<std::size_t>(count * p.n_lanes));
  for (int lane = 0; lane < p.n_lanes; ++lane) {
    const double offset = -lane * p.lane_width;
    for (int i = 0; i < count; ++i) {
      Lanelet ll;
      ll.id = lane * count + i;
      ll.lane_index = lane;
      ll.successor_id = lane * count + (i + 1) % count;
      const int nb_lane = lane + 1 < p.n_lanes ? lane + 1 : lane - 1;
      ll.neighbor_id = nb_lane * count + i;
      for (int k = 0; k < pts_per; ++k) {
        double u = seg * i + seg * k / (pts_per - 1);
        if (i == count - 1 && k == pts_per - 1) u = 0.0;
        const auto f = detail::stadium_frame(u, p.straight_length, p.curve_radius);
        const Vec2 n = f.tangent.left_normal();
        ll.centerline.push_back(f.point + n * offset);
        ll.left_boundary.push_back(f.point + n * (offset + 0.5 * p.lane_width));
        ll.right_boundary.push_back(f.point + n * (offset - 0.5 * p.lane_width));
      }
      lanelets.push_back(std::move(ll));
    }
  }
  return MapGraph(std::move(lanelets), p.n_lanes, p.lane_width, loop);
}

struct LoopProjection {
  std::size_t segment = 0;
  double arc_length = 0.0;
  double signed_offset = 0.0;  // positive left of the polyline direction
  double distance = 0.0;
  Vec2 point;
  Vec2 tangent;  // unit
};

/// Closest point on a closed polyline. A projection onto a segment's end
/// vertex is reported on the following segment.
inline LoopProjection project_to_loop(const LoopPolyline& poly, Vec2 p) {
  LoopProjection best;
  best.distance = std::numeric_limits<double>::infinity();
  double best_t = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2 a = poly.points[i];
    const Vec2 b = poly.segment_end(i);
    const double t = project_on_segment(p, a, b);
    const Vec2 q = a + (b - a) * t;
    const double dx = p.x - q.x, dy = p.y - q.y;
    const double d2 = dx * dx + dy * dy;
    if (d2 < best.distance) {
      best.distance = d2;
      best.segment = i;
      best_t = t;
    }
  }
  if (best_t >= 1.0) {
    best.segment = (best.segment + 1) % poly.size();
    best_t = 0.0;
  }
  const Vec2 a = poly.points[best.segment];
  const Vec2 ab = poly.segment_end(best.segment) - a;
  const double seg_len = ab.norm();
  best.point = a + ab * best_t;
  best.distance = distance(p, best.point);
  best.tangent = seg_len > 0.0 ? ab * (1.0 / seg_len) : Vec2{1.0, 0.0};
  best.arc_length = forward_gap(0.0, poly.cumulative[best.segment] + best_t * seg_len, poly.length);
  best.signed_offset = best.tangent.cross(p - best.point) >= 0.0 ? best.distance : -best.distance;
  return best;
}

/// Projects a point onto the centerline of one lane.
inline LaneProjection project_to_lane(const MapGraph& map, int lane, Vec2 p) {
  const LoopPolyline& poly = map.centerline(lane);
  const LoopProjection lp = project_to_loop(poly, p);
  LaneProjection out;
  out.lane_index = lane;
  out.lanelet_id = poly.segment_lanelet[lp.segment];
  out.segment = lp.segment;
  out.arc_length = lp.arc_length;
  out.lateral_offset = lp.signed_offset;
  out.distance = lp.distance;
  out.point = lp.point;
  out.tangent = lp.tangent;
  return out;
}

/// Nearest lane centerline over all lanes.
inline LaneProjection nearest_projection(const MapGraph& map, Vec2 p) {
  LaneProjection best = project_to_lane(map, 0, p);
  for (int lane = 1; lane < map.n_lanes(); ++lane) {
    LaneProjection cand = project_to_lane(map, lane, p);
    if (cand.distance < best.distance) best = cand;
  }
  return best;
}

/// Nearest lanelet by perpendicular distance to its centerline.
inline LaneLocation locate(const MapGraph& map, Vec2 p) {
  const LaneProjection proj = nearest_projection(map, p);
  if (proj.distance > 2.0 * map.lane_width()) {
    std::ostringstream os;
    os << "point (" << p.x << ", " << p.y << ") is " << proj.distance << " m from the nearest centerline";
    throw OffMap(os.str());
  }
  return {proj.lanelet_id, proj.lane_index, proj.arc_length, proj.lateral_offset};
}

struct PolylineSample {
  Vec2 point;
  Vec2 tangent;
  std::size_t segment = 0;
};

/// Point on a loop polyline at arc length s (taken modulo the loop length).
inline PolylineSample sample_loop(const LoopPolyline& poly, double s) {
  s = forward_gap(0.0, s, poly.length);
  auto it = std::upper_bound(poly.cumulative.begin(), poly.cumulative.end(), s);
  std::size_t i = static_cast<std::size_t>(std::distance(poly.cumulative.begin(), it)) - 1;
  const Vec2 a = poly.points[i];
  const Vec2 b = poly.segment_end(i);
  const double seg_len = distance(a, b);
  const double t = seg_len > 0.0 ? std::clamp((s - poly.cumulative[i]) / seg_len, 0.0, 1.0) : 0.0;
  return {a + (b - a) * t, seg_len > 0.0 ? (b - a) * (1.0 / seg_len) : Vec2{1.0, 0.0}, i};
}

/// Short-term reference path on the centerline of `target_lane`. The path
/// starts at the target-lane arc length nearest to the vehicle and samples
/// `n_points` waypoints ahead of it at `spacing`.
inline ReferencePath reference_path_for(const MapGraph& map, Vec2 position, int target_lane, int n_points,
                                        double spacing) {
  if (target_lane < 0 || target_lane >= map.n_lanes()) throw Error("target lane out of range");
  if (n_points < 1) throw Error("reference path needs at least one point");
  (void)locate(map, position);  // off-map check
  const LaneProjection proj = project_to_lane(map, target_lane, position);
  const LoopPolyline& poly = map.centerline(target_lane);
  ReferencePath path;
  path.target_lane = target_lane;
  path.source_lanelet_id = proj.lanelet_id;
  path.anchor = proj.point;
  path.anchor_tangent = proj.tangent;
  path.anchor_arc_length = proj.arc_length;
  path.points.reserve(static_cast<std::size_t>(n_points));
  for (int k = 1; k <= n_points; ++k) {
    path.points.push_back(sample_loop(poly, proj.arc_length + k * spacing).point);
  }
  return path;
}

/// Signed perpendicular distance from p to a reference path; positive when p
/// lies left of the path direction.
inline double signed_distance_to_path(const ReferencePath& ref, Vec2 p) {
  return ref.anchor_tangent.cross(p - ref.anchor);
}

// --- serialization ---------------------------------------------------------

inline nlohmann::json map_to_json(const MapGraph& map) {
  using nlohmann::json;
  auto pts = [](const std::vector<Vec2>& v) {
    json arr = json::array();
    for (Vec2 p : v) arr.push_back({p.x, p.y});
    return arr;
  };
  json lls = json::array();
  for (const Lanelet& ll : map.lanelets()) {
    lls.push_back({{"id", ll.id},
                   {"lane_index", ll.lane_index},
                   {"successor_id", ll.successor_id},
                   {"neighbor_id", ll.neighbor_id ? json(*ll.neighbor_id) : json(nullptr)},
                   {"centerline", pts(ll.centerline)},
                   {"left_boundary", pts(ll.left_boundary)},
                   {"right_boundary", pts(ll.right_boundary)}});
  }
  return {{"format", "lanemoe-map"},
          {"version", 1},
          {"n_lanes", map.n_lanes()},
          {"lane_width", map.lane_width()},
          {"loop_length", map.loop_length()},
          {"lanelets", lls}};
}

inline MapGraph map_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "lanemoe-map") throw InvalidGeometry("not a lanemoe map document");
    auto pts = [](const nlohmann::json& arr) {
      std::vector<Vec2> v;
      for (const auto& p : arr) v.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
      return v;
    };
    std::vector<Lanelet> lls;
    for (const auto& e : j.at("lanelets")) {
      Lanelet ll;
      ll.id = e.at("id").get<int>();
      ll.lane_index = e.at("lane_index").get<int>();
      ll.successor_id = e.at("successor_id").get<int>();
      if (e.contains("neighbor_id") && !e.at("neighbor_id").is_null()) ll.neighbor_id = e.at("neighbor_id").get<int>();
      ll.centerline = pts(e.at("centerline"));
      ll.left_boundary = pts(e.at("left_boundary"));
      ll.right_boundary = pts(e.at("right_boundary"));
      lls.push_back(std::move(ll));
    }
    std::optional<double> loop;
    if (j.contains("loop_length")) loop = j.at("loop_length").get<double>();
    return MapGraph(std::move(lls), j.at("n_lanes").get<int>(), j.at("lane_width").get<double>(), loop);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidGeometry(std::string("malformed map document: ") + e.what());
  }
}

/// Resolves a --map argument: "builtin:stadium" uses the given parameters,
/// anything else is read as a map JSON file.
inline MapGraph load_map(const std::string& spec, const StadiumParams& params) {
  if (spec.empty() || spec == "builtin:stadium") return build_loop_map(params);
  std::ifstream in(spec);
  if (!in) throw ConfigError("cannot open map file " + spec);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidGeometry("cannot parse map file " + spec + ": " + e.what());
  }
  return map_from_json(j);
}

}  // namespace lanemoe
