#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

namespace lanemoe {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  constexpr Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  constexpr Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  constexpr Vec2 operator*(double s) const { return {x * s, y * s}; }
  constexpr Vec2 operator-() const { return {-x, -y}; }
  constexpr bool operator==(const Vec2&) const = default;

  constexpr double dot(Vec2 o) const { return x * o.x + y * o.y; }
  // z-component of the 3-D cross product; positive when o is to the left of *this.
  constexpr double cross(Vec2 o) const { return x * o.y - y * o.x; }
  double norm() const { return std::hypot(x, y); }
  constexpr Vec2 left_normal() const { return {-y, x}; }
};

inline constexpr Vec2 operator*(double s, Vec2 v) { return v * s; }

inline Vec2 unit_from_angle(double heading) {
  return {std::cos(heading), std::sin(heading)};
}

inline double distance(Vec2 a, Vec2 b) { return (a - b).norm(); }

/// Wraps an angle into (-pi, pi].
inline double wrap_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double r = std::fmod(a + std::numbers::pi, two_pi);
  if (r < 0.0) r += two_pi;
  r -= std::numbers::pi;
  if (r <= -std::numbers::pi) r += two_pi;
  return r;
}

/// Expresses a world point in the frame of a pose (origin, heading).
inline Vec2 to_local(Vec2 point, Vec2 origin, double heading) {
  const Vec2 d = point - origin;
  const double c = std::cos(heading);
  const double s = std::sin(heading);
  return {c * d.x + s * d.y, -s * d.x + c * d.y};
}

/// Rotates v by angle about the origin.
inline Vec2 rotate(Vec2 v, double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  return {c * v.x - s * v.y, s * v.x + c * v.y};
}

/// Oriented rectangle centred at `center` with its length along `heading`.
struct OrientedBox {
  Vec2 center;
  double heading = 0.0;
  double length = 0.0;
  double width = 0.0;

  std::array<Vec2, 4> corners() const {
    const Vec2 f = unit_from_angle(heading) * (0.5 * length);
    const Vec2 l = unit_from_angle(heading).left_normal() * (0.5 * width);
    return {center + f + l, center + f - l, center - f - l, center - f + l};
  }

  bool contains(Vec2 p) const {
    const Vec2 q = to_local(p, center, heading);
    return std::abs(q.x) <= 0.5 * length && std::abs(q.y) <= 0.5 * width;
  }
};

/// Separating-axis overlap test for two oriented rectangles. Touching counts
/// as overlap.
inline bool boxes_overlap(const OrientedBox& a, const OrientedBox& b) {
  const auto ca = a.corners();
  const auto cb = b.corners();
  const std::array<Vec2, 4> axes = {unit_from_angle(a.heading), unit_from_angle(a.heading).left_normal(),
                                    unit_from_angle(b.heading), unit_from_angle(b.heading).left_normal()};
  for (const Vec2& axis : axes) {
    double amin = ca[0].dot(axis), amax = amin;
    double bmin = cb[0].dot(axis), bmax = bmin;
    for (int i = 1; i < 4; ++i) {
      const double pa = ca[i].dot(axis);
      const double pb = cb[i].dot(axis);
      amin = std::min(amin, pa);
      amax = std::max(amax, pa);
      bmin = std::min(bmin, pb);
      bmax = std::max(bmax, pb);
    }
    if (amax < bmin || bmax < amin) return false;
  }
  return true;
}

/// Closest point on segment [a, b] to p, returned as the interpolation
/// parameter in [0, 1].
inline double project_on_segment(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double len2 = ab.dot(ab);
  if (len2 <= 0.0) return 0.0;
  const double t = (p - a).dot(ab) / len2;
  return std::clamp(t, 0.0, 1.0);
}

}  // namespace lanemoe
