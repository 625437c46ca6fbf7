#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

namespace sagdrive {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double dot(Vec2 o) const { return x * o.x + y * o.y; }
  double norm() const { return std::hypot(x, y); }
  bool operator==(const Vec2&) const = default;
};

// Wrap to (-pi, pi].
inline double wrap_angle(double a) {
  double w = std::remainder(a, 2.0 * M_PI);
  if (w <= -M_PI) w = M_PI;
  return w;
}

inline double lerp_angle(double a, double b, double t) {
  return wrap_angle(a + t * wrap_angle(b - a));
}

// Oriented rectangle; length runs along the heading axis.
struct Obb {
  Vec2 center;
  double heading = 0.0;
  double length = 0.0;
  double width = 0.0;

  std::array<Vec2, 4> corners() const {
    double c = std::cos(heading), s = std::sin(heading);
    Vec2 ax{c, s}, ay{-s, c};
    Vec2 hx = ax * (0.5 * length), hy = ay * (0.5 * width);
    return {center + hx + hy, center + hx - hy, center - hx - hy, center - hx + hy};
  }
};

// Separating-axis test. Touching boundaries do not count as overlap; only
// positive-area intersection does.
inline bool obb_overlap(const Obb& a, const Obb& b, double eps = 1e-9) {
  auto ca = a.corners();
  auto cb = b.corners();
  auto axes_of = [](const Obb& o) {
    double c = std::cos(o.heading), s = std::sin(o.heading);
    return std::array<Vec2, 2>{Vec2{c, s}, Vec2{-s, c}};
  };
  std::array<Vec2, 4> axes{axes_of(a)[0], axes_of(a)[1], axes_of(b)[0], axes_of(b)[1]};
  for (const Vec2& ax : axes) {
    double amin = std::numeric_limits<double>::infinity(), amax = -amin;
    double bmin = amin, bmax = -amin;
    for (const Vec2& p : ca) {
      double v = p.dot(ax);
      amin = std::min(amin, v);
      amax = std::max(amax, v);
    }
    for (const Vec2& p : cb) {
      double v = p.dot(ax);
      bmin = std::min(bmin, v);
      bmax = std::max(bmax, v);
    }
    if (std::min(amax, bmax) - std::max(amin, bmin) <= eps) return false;
  }
  return true;
}

// Piecewise-linear curve with cached cumulative arc length.
class Polyline {
 public:
  Polyline() = default;
  explicit Polyline(std::vector<Vec2> pts) : pts_(std::move(pts)) {
    cum_.resize(pts_.size(), 0.0);
    for (size_t i = 1; i < pts_.size(); ++i)
      cum_[i] = cum_[i - 1] + (pts_[i] - pts_[i - 1]).norm();
  }

  const std::vector<Vec2>& points() const { return pts_; }
  double length() const { return cum_.empty() ? 0.0 : cum_.back(); }
  bool empty() const { return pts_.size() < 2; }

  Vec2 point_at(double s) const {
    size_t i = segment_index(s);
    double seg = cum_[i + 1] - cum_[i];
    double t = seg > 0.0 ? (s - cum_[i]) / seg : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return pts_[i] + (pts_[i + 1] - pts_[i]) * t;
  }

  double heading_at(double s) const {
    size_t i = segment_index(s);
    Vec2 d = pts_[i + 1] - pts_[i];
    return std::atan2(d.y, d.x);
  }

  struct Projection {
    double s = 0.0;        // arc length of the closest point
    double distance = 0.0; // unsigned lateral distance
  };

  Projection project(Vec2 p) const {
    if (empty()) throw std::invalid_argument("polyline: projection on empty polyline");
    Projection best{0.0, std::numeric_limits<double>::infinity()};
    for (size_t i = 0; i + 1 < pts_.size(); ++i) {
      Vec2 d = pts_[i + 1] - pts_[i];
      double len2 = d.dot(d);
      double t = len2 > 0.0 ? std::clamp((p - pts_[i]).dot(d) / len2, 0.0, 1.0) : 0.0;
      Vec2 q = pts_[i] + d * t;
      double dist = (p - q).norm();
      if (dist < best.distance) best = {cum_[i] + std::sqrt(len2) * t, dist};
    }
    return best;
  }

  bool operator==(const Polyline& o) const { return pts_ == o.pts_; }

 private:
  size_t segment_index(double s) const {
    if (empty()) throw std::invalid_argument("polyline: empty");
    s = std::clamp(s, 0.0, length());
    size_t lo = 0, hi = pts_.size() - 2;
    while (lo < hi) {
      size_t mid = (lo + hi + 1) / 2;
      if (cum_[mid] <= s)
        lo = mid;
      else
        hi = mid - 1;
    }
    return lo;
  }

  std::vector<Vec2> pts_;
  std::vector<double> cum_;
};

}  // namespace sagdrive
