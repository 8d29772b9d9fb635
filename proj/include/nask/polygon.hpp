#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "nask/common.hpp"

namespace nask {

// Ordered vertex list in image coordinates (x right, y down), implicitly
// closed. Ground-truth polygons are simple; predictions should be.
using Polygon = std::vector<Vec2>;

inline double signed_area(const Polygon& p) {
  double acc = 0.0;
  const size_t n = p.size();
  for (size_t i = 0; i < n; ++i) {
    const Vec2& a = p[i];
    const Vec2& b = p[(i + 1) % n];
    acc += a.x * b.y - b.x * a.y;
  }
  return 0.5 * acc;
}

inline double polygon_area(const Polygon& p) { return std::abs(signed_area(p)); }

inline std::pair<Vec2, Vec2> bounding_box(const Polygon& p) {
  Vec2 lo{p[0].x, p[0].y}, hi{p[0].x, p[0].y};
  for (const Vec2& v : p) {
    lo.x = std::min(lo.x, v.x);
    lo.y = std::min(lo.y, v.y);
    hi.x = std::max(hi.x, v.x);
    hi.y = std::max(hi.y, v.y);
  }
  return {lo, hi};
}

// Even-odd rule; boundary treatment is half-open and adequate for
// rasterization at pixel centers.
inline bool point_in_polygon(const Vec2& pt, const Polygon& poly) {
  bool inside = false;
  const size_t n = poly.size();
  for (size_t i = 0, j = n - 1; i < n; j = i++) {
    const Vec2& a = poly[i];
    const Vec2& b = poly[j];
    if ((a.y > pt.y) != (b.y > pt.y)) {
      const double xint = a.x + (pt.y - a.y) / (b.y - a.y) * (b.x - a.x);
      if (pt.x < xint) inside = !inside;
    }
  }
  return inside;
}

// Proper segment intersection (shared endpoints do not count).
inline bool segments_intersect(const Vec2& a, const Vec2& b, const Vec2& c, const Vec2& d) {
  const auto orient = [](const Vec2& p, const Vec2& q, const Vec2& r) {
    const double v = (q - p).cross(r - p);
    if (v > 1e-12) return 1;
    if (v < -1e-12) return -1;
    return 0;
  };
  const int o1 = orient(a, b, c), o2 = orient(a, b, d);
  const int o3 = orient(c, d, a), o4 = orient(c, d, b);
  return o1 != o2 && o3 != o4 && o1 != 0 && o2 != 0 && o3 != 0 && o4 != 0;
}

inline bool polygon_is_simple(const Polygon& p) {
  const size_t n = p.size();
  if (n < 3) return false;
  for (size_t i = 0; i < n; ++i) {
    const Vec2& a = p[i];
    const Vec2& b = p[(i + 1) % n];
    for (size_t j = i + 1; j < n; ++j) {
      if (j == i || (j + 1) % n == i || (i + 1) % n == j) continue;
      if (segments_intersect(a, b, p[j], p[(j + 1) % n])) return false;
    }
  }
  return true;
}

namespace detail {

inline void rdp_open(const std::vector<Vec2>& pts, size_t lo, size_t hi, double eps,
                     std::vector<bool>& keep) {
  if (hi <= lo + 1) return;
  double max_d = -1.0;
  size_t max_i = lo + 1;
  for (size_t i = lo + 1; i < hi; ++i) {
    const double d = point_segment_distance(pts[i], pts[lo], pts[hi]);
    if (d > max_d) {
      max_d = d;
      max_i = i;
    }
  }
  if (max_d > eps) {
    keep[max_i] = true;
    rdp_open(pts, lo, max_i, eps, keep);
    rdp_open(pts, max_i, hi, eps, keep);
  }
}

}  // namespace detail

// Ramer-Douglas-Peucker on an open polyline; endpoints always survive.
inline std::vector<Vec2> rdp_simplify(const std::vector<Vec2>& pts, double eps) {
  if (pts.size() <= 2 || eps <= 0.0) return pts;
  std::vector<bool> keep(pts.size(), false);
  keep.front() = keep.back() = true;
  detail::rdp_open(pts, 0, pts.size() - 1, eps, keep);
  std::vector<Vec2> out;
  for (size_t i = 0; i < pts.size(); ++i)
    if (keep[i]) out.push_back(pts[i]);
  return out;
}

// Closed-ring variant: anchors at vertex 0 and the vertex farthest from it,
// simplifies the two halves independently. Keeps at least 3 vertices.
inline Polygon rdp_simplify_ring(const Polygon& ring, double eps) {
  if (ring.size() <= 3 || eps <= 0.0) return ring;
  size_t far = 1;
  double best = -1.0;
  for (size_t i = 1; i < ring.size(); ++i) {
    const double d = distance(ring[0], ring[i]);
    if (d > best) {
      best = d;
      far = i;
    }
  }
  std::vector<Vec2> half1(ring.begin(), ring.begin() + static_cast<long>(far) + 1);
  std::vector<Vec2> half2(ring.begin() + static_cast<long>(far), ring.end());
  half2.push_back(ring[0]);
  std::vector<Vec2> s1 = rdp_simplify(half1, eps);
  std::vector<Vec2> s2 = rdp_simplify(half2, eps);
  Polygon out(s1.begin(), s1.end() - 1);
  out.insert(out.end(), s2.begin(), s2.end() - 1);
  if (out.size() < 3) return ring;
  return out;
}

namespace detail {

inline bool point_in_triangle(const Vec2& p, const Vec2& a, const Vec2& b, const Vec2& c) {
  const double d1 = (b - a).cross(p - a);
  const double d2 = (c - b).cross(p - b);
  const double d3 = (a - c).cross(p - c);
  const bool has_neg = d1 < -1e-12 || d2 < -1e-12 || d3 < -1e-12;
  const bool has_pos = d1 > 1e-12 || d2 > 1e-12 || d3 > 1e-12;
  return !(has_neg && has_pos);
}

}  // namespace detail

// Ear-clipping triangulation of a simple polygon. Returns nullopt when the
// polygon is too degenerate to triangulate; callers fall back to a
// rasterized estimate in that case.
inline std::optional<std::vector<std::array<Vec2, 3>>> triangulate(const Polygon& poly) {
  Polygon p = poly;
  if (p.size() < 3) return std::nullopt;
  if (signed_area(p) < 0.0) std::reverse(p.begin(), p.end());
  std::vector<std::array<Vec2, 3>> tris;
  size_t guard = 0;
  const size_t guard_limit = p.size() * p.size() + 16;
  while (p.size() > 3) {
    bool clipped = false;
    for (size_t i = 0; i < p.size(); ++i) {
      const Vec2& prev = p[(i + p.size() - 1) % p.size()];
      const Vec2& cur = p[i];
      const Vec2& next = p[(i + 1) % p.size()];
      const double turn = (cur - prev).cross(next - cur);
      if (turn < 1e-12) continue;  // reflex or collinear: not an ear tip
      bool contains_other = false;
      for (size_t j = 0; j < p.size(); ++j) {
        if (j == i || j == (i + p.size() - 1) % p.size() || j == (i + 1) % p.size())
          continue;
        if (detail::point_in_triangle(p[j], prev, cur, next)) {
          contains_other = true;
          break;
        }
      }
      if (contains_other) continue;
      tris.push_back({prev, cur, next});
      p.erase(p.begin() + static_cast<long>(i));
      clipped = true;
      break;
    }
    if (!clipped) {
      // No strict ear left; drop the flattest vertex and keep going.
      size_t flat = 0;
      double best = std::numeric_limits<double>::infinity();
      for (size_t i = 0; i < p.size(); ++i) {
        const Vec2& prev = p[(i + p.size() - 1) % p.size()];
        const Vec2& next = p[(i + 1) % p.size()];
        const double a = std::abs((p[i] - prev).cross(next - p[i]));
        if (a < best) {
          best = a;
          flat = i;
        }
      }
      if (best > 1e-9) return std::nullopt;  // genuinely stuck
      p.erase(p.begin() + static_cast<long>(flat));
    }
    if (++guard > guard_limit) return std::nullopt;
  }
  if (p.size() == 3) tris.push_back({p[0], p[1], p[2]});
  return tris;
}

// Sutherland-Hodgman clip of an arbitrary subject by a convex clip polygon
// given in counter-clockwise order (by signed_area convention).
inline Polygon clip_by_convex(const Polygon& subject, const Polygon& convex_clip) {
  Polygon output = subject;
  const size_t n = convex_clip.size();
  for (size_t e = 0; e < n && !output.empty(); ++e) {
    const Vec2 a = convex_clip[e];
    const Vec2 b = convex_clip[(e + 1) % n];
    const Vec2 dir = b - a;
    Polygon input;
    input.swap(output);
    const auto side = [&](const Vec2& p) { return dir.cross(p - a); };
    for (size_t i = 0; i < input.size(); ++i) {
      const Vec2& cur = input[i];
      const Vec2& prev = input[(i + input.size() - 1) % input.size()];
      const double sc = side(cur), sp = side(prev);
      if (sc >= 0.0) {
        if (sp < 0.0) {
          const double t = sp / (sp - sc);
          output.push_back(prev + (cur - prev) * t);
        }
        output.push_back(cur);
      } else if (sp >= 0.0) {
        const double t = sp / (sp - sc);
        output.push_back(prev + (cur - prev) * t);
      }
    }
  }
  return output;
}

namespace detail {

inline std::array<Vec2, 3> ccw_triangle(const std::array<Vec2, 3>& t) {
  Polygon p{t[0], t[1], t[2]};
  if (signed_area(p) < 0.0) return {t[0], t[2], t[1]};
  return t;
}

}  // namespace detail

// Exact intersection area of two simple polygons: triangulate both sides
// and sum pairwise triangle-triangle clip areas. Nullopt when either
// triangulation fails.
inline std::optional<double> polygon_intersection_area(const Polygon& a, const Polygon& b) {
  const auto ta = triangulate(a);
  const auto tb = triangulate(b);
  if (!ta || !tb) return std::nullopt;
  double acc = 0.0;
  for (const auto& t1 : *ta) {
    const auto c1 = detail::ccw_triangle(t1);
    const Polygon clip{c1[0], c1[1], c1[2]};
    for (const auto& t2 : *tb) {
      const Polygon subj{t2[0], t2[1], t2[2]};
      const Polygon inter = clip_by_convex(subj, clip);
      if (inter.size() >= 3) acc += polygon_area(inter);
    }
  }
  return acc;
}

// Grid-sampled IoU over the joint bounding box; the fallback and oracle path.
inline double rasterized_iou(const Polygon& a, const Polygon& b, int grid = 256) {
  auto [lo_a, hi_a] = bounding_box(a);
  auto [lo_b, hi_b] = bounding_box(b);
  const Vec2 lo{std::min(lo_a.x, lo_b.x), std::min(lo_a.y, lo_b.y)};
  const Vec2 hi{std::max(hi_a.x, hi_b.x), std::max(hi_a.y, hi_b.y)};
  const double w = hi.x - lo.x, h = hi.y - lo.y;
  if (w <= 0.0 || h <= 0.0) return 0.0;
  std::int64_t inter = 0, uni = 0;
  for (int i = 0; i < grid; ++i) {
    const double y = lo.y + (i + 0.5) * h / grid;
    for (int j = 0; j < grid; ++j) {
      const double x = lo.x + (j + 0.5) * w / grid;
      const bool ina = point_in_polygon({x, y}, a);
      const bool inb = point_in_polygon({x, y}, b);
      inter += ina && inb;
      uni += ina || inb;
    }
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace nask
