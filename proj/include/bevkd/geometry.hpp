#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>

namespace bevkd {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double dot(Vec2 o) const { return x * o.x + y * o.y; }
  double norm() const { return std::hypot(x, y); }
};

// Wrap an angle into (-pi, pi].
inline double wrap_angle(double a) {
  a = std::fmod(a, 2.0 * M_PI);
  if (a <= -M_PI) a += 2.0 * M_PI;
  if (a > M_PI) a -= 2.0 * M_PI;
  return a;
}

// Oriented rectangle in the BEV plane. Length runs along the heading (yaw),
// width across it.
struct OrientedRect {
  Vec2 center;
  double width = 0.0;
  double length = 0.0;
  double yaw = 0.0;

  std::array<Vec2, 4> corners() const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    const Vec2 along{c * length * 0.5, s * length * 0.5};
    const Vec2 across{-s * width * 0.5, c * width * 0.5};
    return {center + along + across, center + along - across,
            center - along - across, center - along + across};
  }

  bool contains(Vec2 p) const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    const Vec2 d = p - center;
    const double u = c * d.x + s * d.y;   // along heading
    const double v = -s * d.x + c * d.y;  // across heading
    return std::abs(u) <= length * 0.5 && std::abs(v) <= width * 0.5;
  }

  double half_diagonal() const { return 0.5 * std::hypot(width, length); }
};

// First intersection of the ray origin + t * dir (t >= 0) with the rectangle
// boundary; slab test in the box frame.
std::optional<double> ray_rect_entry(Vec2 origin, Vec2 dir, const OrientedRect& rect);

// Angular interval [lo, hi] subtended by the rectangle as seen from `origin`.
// Valid while the origin is outside the rectangle and the interval does not
// straddle the +-pi cut (true for this world's sensor placement).
struct AngularInterval {
  double lo = 0.0;
  double hi = 0.0;
  bool contains(double a) const { return a >= lo && a <= hi; }
  double width() const { return hi - lo; }
};
AngularInterval angular_interval(Vec2 origin, const OrientedRect& rect);

// Distance from a point to the rectangle's boundary (perimeter), not its area.
double distance_to_perimeter(Vec2 p, const OrientedRect& rect);

}  // namespace bevkd
