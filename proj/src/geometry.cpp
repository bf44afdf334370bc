#include "bevkd/geometry.hpp"

#include <limits>

namespace bevkd {

std::optional<double> ray_rect_entry(Vec2 origin, Vec2 dir, const OrientedRect& rect) {
  // Transform ray into the box frame where the rect is axis aligned.
  const double c = std::cos(rect.yaw), s = std::sin(rect.yaw);
  const Vec2 d = origin - rect.center;
  const Vec2 o{c * d.x + s * d.y, -s * d.x + c * d.y};
  const Vec2 v{c * dir.x + s * dir.y, -s * dir.x + c * dir.y};
  const double hx = rect.length * 0.5, hy = rect.width * 0.5;

  double tmin = 0.0, tmax = std::numeric_limits<double>::infinity();
  const double po[2] = {o.x, o.y};
  const double pv[2] = {v.x, v.y};
  const double ph[2] = {hx, hy};
  for (int axis = 0; axis < 2; ++axis) {
    if (std::abs(pv[axis]) < 1e-12) {
      if (std::abs(po[axis]) > ph[axis]) return std::nullopt;
      continue;
    }
    double t1 = (-ph[axis] - po[axis]) / pv[axis];
    double t2 = (ph[axis] - po[axis]) / pv[axis];
    if (t1 > t2) std::swap(t1, t2);
    tmin = std::max(tmin, t1);
    tmax = std::min(tmax, t2);
    if (tmin > tmax) return std::nullopt;
  }
  return tmin;
}

AngularInterval angular_interval(Vec2 origin, const OrientedRect& rect) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const Vec2& corner : rect.corners()) {
    const Vec2 d = corner - origin;
    const double a = std::atan2(d.y, d.x);
    lo = std::min(lo, a);
    hi = std::max(hi, a);
  }
  return {lo, hi};
}

static double point_segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double len2 = ab.dot(ab);
  double t = len2 > 0.0 ? (p - a).dot(ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return (p - (a + ab * t)).norm();
}

double distance_to_perimeter(Vec2 p, const OrientedRect& rect) {
  const auto cs = rect.corners();
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 4; ++i) best = std::min(best, point_segment_distance(p, cs[i], cs[(i + 1) % 4]));
  return best;
}

}  // namespace bevkd
