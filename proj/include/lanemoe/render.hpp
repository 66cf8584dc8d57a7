#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "lanemoe/errors.hpp"
#include "lanemoe/eval.hpp"
#include "lanemoe/map.hpp"

namespace lanemoe {

namespace detail {

inline void svg_polyline(std::ostream& out, const LoopPolyline& poly, const char* stroke, double width, bool dashed) {
  out << "<polygon fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"" << width << '"';
  if (dashed) out << " stroke-dasharray=\"0.08,0.06\"";
  out << " points=\"";
  for (const Vec2& p : poly.points) out << p.x << ',' << p.y << ' ';
  out << "\"/>\n";
}

}  // namespace detail

/// One static SVG frame: road edges, lane dividers, vehicles. Agents are
/// blue, slow vehicles grey, colliding agents red; the label is the agent's
/// lane decision. World y points up.
inline std::string render_frame_svg(const MapGraph& map, const TraceStep& step) {
  const double margin = 0.3;
  const double half = map.half_extent() + margin;
  const Vec2 c = map.center();
  std::ostringstream out;
  out.precision(5);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"800\" viewBox=\"" << c.x - half << ' '
      << -(c.y + half) << ' ' << 2 * half << ' ' << 2 * half << "\">\n";
  out << "<rect x=\"" << c.x - half << "\" y=\"" << -(c.y + half) << "\" width=\"" << 2 * half << "\" height=\""
      << 2 * half << "\" fill=\"white\"/>\n";
  out << "<g transform=\"scale(1,-1)\">\n";
  detail::svg_polyline(out, map.left_boundary(0), "black", 0.02, false);
  detail::svg_polyline(out, map.right_boundary(map.n_lanes() - 1), "black", 0.02, false);
  for (int lane = 0; lane + 1 < map.n_lanes(); ++lane) detail::svg_polyline(out, map.right_boundary(lane), "#999", 0.01, true);
  for (std::size_t i = 0; i < step.vehicles.size(); ++i) {
    const VehicleState& v = step.vehicles[i];
    const bool agent = i < step.collisions.size();
    const char* fill = !agent ? "#888" : (step.collisions[i].any() ? "#d62728" : "#1f77b4");
    const double deg = v.heading * 180.0 / std::numbers::pi;
    out << "<rect x=\"" << -0.5 * v.length << "\" y=\"" << -0.5 * v.width << "\" width=\"" << v.length
        << "\" height=\"" << v.width << "\" fill=\"" << fill << "\" transform=\"translate(" << v.position.x << ','
        << v.position.y << ") rotate(" << deg << ")\"/>\n";
  }
  out << "</g>\n";
  for (std::size_t i = 0; i < step.decisions.size() && i < step.vehicles.size(); ++i) {
    const VehicleState& v = step.vehicles[i];
    out << "<text x=\"" << v.position.x + 0.08 << "\" y=\"" << -(v.position.y + 0.08)
        << "\" font-size=\"0.12\" fill=\"black\">" << v.id << ':' << step.decisions[i] << "</text>\n";
  }
  out << "<text x=\"" << c.x - half + 0.05 << "\" y=\"" << -(c.y + half) + 0.2
      << "\" font-size=\"0.15\" fill=\"black\">step " << step.step << "</text>\n";
  out << "</svg>\n";
  return out.str();
}

/// Long-format plot data: one row per vehicle per step.
inline void write_render_summary(std::ostream& out, const std::vector<TraceStep>& trace) {
  out << "step,id,is_slow,x,y,heading,speed,lane,decision,agent_collision,boundary_collision\n";
  out.precision(10);
  for (const auto& s : trace) {
    for (std::size_t i = 0; i < s.vehicles.size(); ++i) {
      const VehicleState& v = s.vehicles[i];
      const bool agent = i < s.collisions.size();
      out << s.step << ',' << v.id << ',' << (v.is_slow ? 1 : 0) << ',' << v.position.x << ',' << v.position.y << ','
          << v.heading << ',' << v.speed << ',' << v.lane << ',' << (agent ? s.decisions[i] : -1) << ','
          << (agent && s.collisions[i].agent ? 1 : 0) << ',' << (agent && s.collisions[i].boundary ? 1 : 0) << '\n';
    }
  }
}

/// Writes frame_<step>.svg for every `every`-th step plus summary.csv.
/// Returns the number of frames written.
inline int render_trace(const MapGraph& map, const std::vector<TraceStep>& trace, const std::filesystem::path& out_dir,
                        int every = 1) {
  if (every <= 0) throw Error("frame interval must be positive");
  std::filesystem::create_directories(out_dir);
  int frames = 0;
  for (std::size_t k = 0; k < trace.size(); k += static_cast<std::size_t>(every)) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%06d.svg", trace[k].step);
    std::ofstream f(out_dir / name);
    if (!f) throw Error("cannot write " + (out_dir / name).string());
    f << render_frame_svg(map, trace[k]);
    ++frames;
  }
  std::ofstream summary(out_dir / "summary.csv");
  if (!summary) throw Error("cannot write " + (out_dir / "summary.csv").string());
  write_render_summary(summary, trace);
  return frames;
}

}  // namespace lanemoe
