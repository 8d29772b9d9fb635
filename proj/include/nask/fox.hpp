#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <queue>
#include <sstream>
#include <string>
#include <vector>

#include "nask/common.hpp"
#include "nask/polygon.hpp"
#include "nask/tensor.hpp"

namespace nask {

// Raised when a regressed orientation pair is too short to normalize.
class DegenerateOrientationError : public Error {
 public:
  explicit DegenerateOrientationError(const std::string& what) : Error(what) {}
};

// One character segment: center, half-height scale, character orientation
// phi (bottom-midpoint to top-midpoint) and text orientation theta (center
// to next center). Angles are math-convention (counter-clockwise from +x)
// over image coordinates with y growing downward.
struct CharNode {
  Vec2 c;
  double s = 0.0;
  double phi = 0.0;
  double theta = 0.0;
};

struct TextAnnotation {
  Polygon boundary;
  std::vector<Vec2> top_line;     // reading order; empty -> derived from boundary
  std::vector<Vec2> bottom_line;  // reading order, same count as top_line
  std::vector<CharNode> char_nodes;
  bool ignore = false;
};

// Per-pixel geometry supervision / prediction: text-region and TCL
// probabilities plus the five masked geometry channels. Geometry channels
// are zero outside the TCL band.
struct GeometryMaps {
  int h = 0, w = 0;
  std::vector<double> tr, tcl, s, sin_t, cos_t, sin_p, cos_p;
  // Multiply map coordinates by this to reach original-image coordinates.
  double image_scale = 1.0;

  GeometryMaps() = default;
  GeometryMaps(int height, int width)
      : h(height),
        w(width),
        tr(static_cast<size_t>(height) * width, 0.0),
        tcl(static_cast<size_t>(height) * width, 0.0),
        s(static_cast<size_t>(height) * width, 0.0),
        sin_t(static_cast<size_t>(height) * width, 0.0),
        cos_t(static_cast<size_t>(height) * width, 0.0),
        sin_p(static_cast<size_t>(height) * width, 0.0),
        cos_p(static_cast<size_t>(height) * width, 0.0) {}

  size_t idx(int row, int col) const { return static_cast<size_t>(row) * w + col; }
};

struct FiducialPointSet {
  std::vector<Vec2> points;  // 2n points; odd ranks top, even ranks bottom
  int n = 0;
};

struct EncodeParams {
  double shrink_ratio = 0.3;  // TCL half-width as a fraction of s
  double end_ratio = 0.5;     // arc trimmed from each end, fraction of s
};

namespace detail {

inline double angle_of(const Vec2& d) { return std::atan2(-d.y, d.x); }

inline double polyline_length(const std::vector<Vec2>& pts) {
  double acc = 0.0;
  for (size_t i = 1; i < pts.size(); ++i) acc += distance(pts[i - 1], pts[i]);
  return acc;
}

// Point at arc-length position `t` along a polyline (clamped).
inline Vec2 point_at_arc(const std::vector<Vec2>& pts, double t) {
  if (t <= 0.0) return pts.front();
  for (size_t i = 1; i < pts.size(); ++i) {
    const double seg = distance(pts[i - 1], pts[i]);
    if (t <= seg && seg > 0.0) return pts[i - 1] + (pts[i] - pts[i - 1]) * (t / seg);
    t -= seg;
  }
  return pts.back();
}

}  // namespace detail

// Splits a simple closed polygon into top and bottom polylines running in
// the same (reading) direction. End edges are found by scoring every edge
// pair: ends have near-antiparallel adjacent edges, balanced arc distance
// between them, and small combined length relative to the perimeter.
inline std::pair<std::vector<Vec2>, std::vector<Vec2>> split_top_bottom(
    const Polygon& boundary) {
  const size_t m = boundary.size();
  if (m < 4)
    throw MalformedAnnotationError("polygon with " + std::to_string(m) +
                                   " vertices cannot split into top/bottom");
  std::vector<Vec2> dirs(m);
  std::vector<double> lens(m);
  double perimeter = 0.0;
  for (size_t i = 0; i < m; ++i) {
    const Vec2 d = boundary[(i + 1) % m] - boundary[i];
    lens[i] = d.norm();
    if (lens[i] <= 1e-12)
      throw MalformedAnnotationError("polygon has two identical consecutive vertices");
    dirs[i] = d / lens[i];
    perimeter += lens[i];
  }
  // Edge i is an end candidate when the edges around it reverse direction.
  std::vector<double> anti(m);
  for (size_t i = 0; i < m; ++i) {
    const Vec2& prev = dirs[(i + m - 1) % m];
    const Vec2& next = dirs[(i + 1) % m];
    anti[i] = 0.5 * (1.0 - prev.dot(next));
  }
  double best = -1.0;
  size_t bi = 0, bj = 0;
  for (size_t i = 0; i < m; ++i) {
    for (size_t j = i + 1; j < m; ++j) {
      // Both chains between the candidate end edges need >= 2 vertices.
      if ((j - i) < 2 || (i + m - j) < 2) continue;
      double arc1 = 0.0;
      for (size_t k = i + 1; k < j; ++k) arc1 += lens[k];
      double arc2 = 0.0;
      for (size_t k = j + 1; k < i + m; ++k) arc2 += lens[k % m];
      if (arc1 <= 0.0 || arc2 <= 0.0) continue;
      const double balance = std::min(arc1, arc2) / std::max(arc1, arc2);
      const double shortness = 1.0 - (lens[i] + lens[j]) / perimeter;
      const double score = anti[i] * anti[j] * balance * shortness;
      if (score > best) {
        best = score;
        bi = i;
        bj = j;
      }
    }
  }
  if (best <= 1e-9)
    throw MalformedAnnotationError("top and bottom sides are indistinguishable");
  std::vector<Vec2> chain_a, chain_b;
  for (size_t k = bi + 1; k <= bj; ++k) chain_a.push_back(boundary[k % m]);
  for (size_t k = bj + 1; k <= bi + m; ++k) chain_b.push_back(boundary[k % m]);
  // Make both chains run the same direction, paired end to end.
  std::reverse(chain_b.begin(), chain_b.end());
  // Decide which chain is the top: compare against the local "up" normal
  // (image y grows downward) at the mid arc of chain_a.
  const Vec2 mid_a = detail::point_at_arc(chain_a, 0.5 * detail::polyline_length(chain_a));
  const Vec2 mid_b = detail::point_at_arc(chain_b, 0.5 * detail::polyline_length(chain_b));
  const Vec2 t_dir = chain_a.back() - chain_a.front();
  const Vec2 up{t_dir.y, -t_dir.x};
  std::vector<Vec2> top = chain_a, bottom = chain_b;
  if ((mid_b - mid_a).dot(up) > 0.0) std::swap(top, bottom);
  // Canonical reading direction: top runs from its lexicographically
  // smaller endpoint.
  const Vec2& f = top.front();
  const Vec2& l = top.back();
  if (l.x < f.x || (l.x == f.x && l.y < f.y)) {
    std::reverse(top.begin(), top.end());
    std::reverse(bottom.begin(), bottom.end());
  }
  return {top, bottom};
}

// Derives n pseudo-character nodes from paired top/bottom polylines: node i
// sits at the midpoint of the slice-center cross-section.
inline std::vector<CharNode> derive_char_nodes_from_lines(const std::vector<Vec2>& top,
                                                          const std::vector<Vec2>& bottom,
                                                          int n) {
  if (n < 2) throw ConfigError("derive_char_nodes requires n >= 2");
  if (top.size() < 2 || bottom.size() < 2)
    throw MalformedAnnotationError("top/bottom polylines need at least 2 points");
  const double lt = detail::polyline_length(top);
  const double lb = detail::polyline_length(bottom);
  if (lt <= 0.0 || lb <= 0.0)
    throw MalformedAnnotationError("top/bottom polylines have zero length");
  std::vector<CharNode> nodes(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double f = (i + 0.5) / n;
    const Vec2 t = detail::point_at_arc(top, f * lt);
    const Vec2 b = detail::point_at_arc(bottom, f * lb);
    CharNode& node = nodes[static_cast<size_t>(i)];
    node.c = (t + b) * 0.5;
    node.s = 0.5 * distance(t, b);
    node.phi = detail::angle_of(t - b);
    if (node.s <= 1e-9)
      throw MalformedAnnotationError("character slice has zero height");
  }
  for (int i = 0; i + 1 < n; ++i)
    nodes[static_cast<size_t>(i)].theta =
        detail::angle_of(nodes[static_cast<size_t>(i) + 1].c - nodes[static_cast<size_t>(i)].c);
  nodes[static_cast<size_t>(n) - 1].theta = nodes[static_cast<size_t>(n) - 2].theta;
  return nodes;
}

inline std::vector<CharNode> derive_char_nodes(const TextAnnotation& ann, int n) {
  if (ann.top_line.size() >= 2 && ann.bottom_line.size() == ann.top_line.size())
    return derive_char_nodes_from_lines(ann.top_line, ann.bottom_line, n);
  auto [top, bottom] = split_top_bottom(ann.boundary);
  return derive_char_nodes_from_lines(top, bottom, n);
}

inline std::vector<CharNode> derive_char_nodes(const Polygon& boundary, int n) {
  TextAnnotation ann;
  ann.boundary = boundary;
  return derive_char_nodes(ann, n);
}

// Trig normalization of a raw regressed pair: (f3, f4) -> (cos, sin) with
// unit quadratic sum.
inline std::pair<double, double> normalize_trig(double f3, double f4) {
  const double r = std::sqrt(f3 * f3 + f4 * f4);
  if (r < 1e-9)
    throw DegenerateOrientationError("orientation pair norm below 1e-9");
  return {f3 / r, f4 / r};
}

namespace detail {

struct CenterPolyline {
  std::vector<Vec2> points;
  std::vector<int> node_index;  // nearest CharNode per point
};

// Dense center polyline between top and bottom, each point tagged with the
// char node whose slice covers its arc fraction.
inline CenterPolyline dense_centerline(const std::vector<Vec2>& top,
                                       const std::vector<Vec2>& bottom, int n_nodes) {
  const double lt = polyline_length(top);
  const double lb = polyline_length(bottom);
  const int k = std::max(2 * n_nodes, std::min(512, static_cast<int>(std::ceil(
                                                        std::max(lt, lb))) + 1));
  CenterPolyline line;
  line.points.reserve(static_cast<size_t>(k));
  line.node_index.reserve(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) {
    const double f = k == 1 ? 0.0 : static_cast<double>(i) / (k - 1);
    const Vec2 t = point_at_arc(top, f * lt);
    const Vec2 b = point_at_arc(bottom, f * lb);
    line.points.push_back((t + b) * 0.5);
    line.node_index.push_back(
        std::min(n_nodes - 1, static_cast<int>(std::floor(f * n_nodes))));
  }
  return line;
}

// Cuts `head` arc length off the front and `tail` off the back.
inline CenterPolyline trim_polyline(const CenterPolyline& in, double head, double tail) {
  const double total = polyline_length(in.points);
  if (head + tail >= total || in.points.size() < 2) return in;  // too short to trim
  CenterPolyline out;
  const Vec2 start = point_at_arc(in.points, head);
  const Vec2 end = point_at_arc(in.points, total - tail);
  double acc = 0.0;
  out.points.push_back(start);
  out.node_index.push_back(in.node_index.front());
  for (size_t i = 1; i < in.points.size(); ++i) {
    acc += distance(in.points[i - 1], in.points[i]);
    if (acc > head && acc < total - tail) {
      out.points.push_back(in.points[i]);
      out.node_index.push_back(in.node_index[i]);
    }
  }
  out.points.push_back(end);
  out.node_index.push_back(in.node_index.back());
  return out;
}

}  // namespace detail

// Rasterizes ground-truth geometry maps for a set of annotations. tr is 1
// inside every boundary polygon; tcl is a band of half-width
// shrink_ratio*s around the (end-trimmed) center polyline; geometry
// channels carry the nearest char node's attributes at TCL pixels. When
// bands of two instances overlap, the pixel goes to the nearer polyline.
inline GeometryMaps encode_geometry(const std::vector<TextAnnotation>& annotations,
                                    int h, int w, int n,
                                    const EncodeParams& params = {}) {
  GeometryMaps maps(h, w);
  // Best (squared-free) distance and winning attribute source per pixel.
  std::vector<double> best_dist(static_cast<size_t>(h) * w,
                                std::numeric_limits<double>::infinity());
  for (const TextAnnotation& ann : annotations) {
    if (ann.ignore) continue;
    if (ann.boundary.size() < 3)
      throw MalformedAnnotationError("annotation polygon has fewer than 3 vertices");
    // Text region fill.
    auto [lo, hi] = bounding_box(ann.boundary);
    const int r0 = std::max(0, static_cast<int>(std::floor(lo.y)));
    const int r1 = std::min(h - 1, static_cast<int>(std::ceil(hi.y)));
    const int c0 = std::max(0, static_cast<int>(std::floor(lo.x)));
    const int c1 = std::min(w - 1, static_cast<int>(std::ceil(hi.x)));
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c)
        if (point_in_polygon({static_cast<double>(c), static_cast<double>(r)},
                             ann.boundary))
          maps.tr[maps.idx(r, c)] = 1.0;

    std::vector<CharNode> nodes =
        ann.char_nodes.empty() ? derive_char_nodes(ann, n) : ann.char_nodes;
    std::vector<Vec2> top = ann.top_line, bottom = ann.bottom_line;
    if (top.size() < 2 || bottom.size() != top.size()) {
      auto split = split_top_bottom(ann.boundary);
      top = split.first;
      bottom = split.second;
    }
    detail::CenterPolyline line =
        detail::dense_centerline(top, bottom, static_cast<int>(nodes.size()));
    line = detail::trim_polyline(line, params.end_ratio * nodes.front().s,
                                 params.end_ratio * nodes.back().s);

    double max_s = 0.0;
    for (const CharNode& nd : nodes) max_s = std::max(max_s, nd.s);
    auto [blo, bhi] = bounding_box(line.points);
    const double reach = params.shrink_ratio * max_s + 1.0;
    const int br0 = std::max(0, static_cast<int>(std::floor(blo.y - reach)));
    const int br1 = std::min(h - 1, static_cast<int>(std::ceil(bhi.y + reach)));
    const int bc0 = std::max(0, static_cast<int>(std::floor(blo.x - reach)));
    const int bc1 = std::min(w - 1, static_cast<int>(std::ceil(bhi.x + reach)));
    for (int r = br0; r <= br1; ++r) {
      for (int c = bc0; c <= bc1; ++c) {
        const Vec2 px{static_cast<double>(c), static_cast<double>(r)};
        double d = std::numeric_limits<double>::infinity();
        int seg_node = 0;
        for (size_t i = 1; i < line.points.size(); ++i) {
          const double sd = point_segment_distance(px, line.points[i - 1], line.points[i]);
          if (sd < d) {
            d = sd;
            seg_node = line.node_index[i];
          }
        }
        const CharNode& nd = nodes[static_cast<size_t>(seg_node)];
        const size_t at = maps.idx(r, c);
        if (d <= params.shrink_ratio * nd.s && d < best_dist[at]) {
          best_dist[at] = d;
          maps.tcl[at] = 1.0;
          maps.tr[at] = 1.0;  // band pixels always count as text region
          maps.s[at] = nd.s;
          maps.sin_t[at] = std::sin(nd.theta);
          maps.cos_t[at] = std::cos(nd.theta);
          maps.sin_p[at] = std::sin(nd.phi);
          maps.cos_p[at] = std::cos(nd.phi);
        }
      }
    }
  }
  return maps;
}

namespace detail {

// Snap to a 2^-20 pixel grid. Keeping decoded vertices dyadic makes the
// final translation back to canvas coordinates exact, so integer canvas
// shifts translate outputs bit-exactly.
inline double snap20(double v) { return std::round(v * 1048576.0) / 1048576.0; }
inline Vec2 snap20(const Vec2& v) { return {snap20(v.x), snap20(v.y)}; }

}  // namespace detail

// Ordered center-line chains of the thresholded TCL mask. Each 8-connected
// component is reduced to a polyline: Dijkstra twice for the farthest pixel
// pair, shortest path between them, then per-point recentering along the
// local normal so the chain tracks the band's middle.
inline std::vector<std::vector<Vec2>> extract_center_lines(
    const std::vector<double>& tcl, const std::vector<double>& tr, int h, int w,
    double t_tr, double t_tcl, int min_area = 3) {
  if (tcl.size() != static_cast<size_t>(h) * w || tr.size() != tcl.size())
    throw DimensionError("extract_center_lines: map sizes disagree");
  std::vector<char> mask(static_cast<size_t>(h) * w, 0);
  for (size_t i = 0; i < mask.size(); ++i) mask[i] = tcl[i] >= t_tcl && tr[i] >= t_tr;

  std::vector<int> comp(static_cast<size_t>(h) * w, -1);
  std::vector<std::vector<int>> comps;
  for (int seed = 0; seed < h * w; ++seed) {
    if (!mask[static_cast<size_t>(seed)] || comp[static_cast<size_t>(seed)] >= 0) continue;
    const int id = static_cast<int>(comps.size());
    comps.emplace_back();
    std::vector<int> stack{seed};
    comp[static_cast<size_t>(seed)] = id;
    while (!stack.empty()) {
      const int cur = stack.back();
      stack.pop_back();
      comps[static_cast<size_t>(id)].push_back(cur);
      const int r = cur / w, c = cur % w;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          if (dr == 0 && dc == 0) continue;
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
          const int nx = rr * w + cc;
          if (mask[static_cast<size_t>(nx)] && comp[static_cast<size_t>(nx)] < 0) {
            comp[static_cast<size_t>(nx)] = id;
            stack.push_back(nx);
          }
        }
    }
    std::sort(comps[static_cast<size_t>(id)].begin(), comps[static_cast<size_t>(id)].end());
  }

  std::vector<std::vector<Vec2>> chains;
  for (const std::vector<int>& pixels : comps) {
    if (static_cast<int>(pixels.size()) < min_area) continue;
    // Local frame keeps chain arithmetic independent of canvas position.
    int base_r = h, base_c = w;
    for (int p : pixels) {
      base_r = std::min(base_r, p / w);
      base_c = std::min(base_c, p % w);
    }
    const auto dijkstra_far = [&](int start, std::vector<int>* pred_out) {
      std::vector<double> dist(static_cast<size_t>(h) * w,
                               std::numeric_limits<double>::infinity());
      std::vector<int> pred(static_cast<size_t>(h) * w, -1);
      using Item = std::pair<double, int>;
      std::priority_queue<Item, std::vector<Item>, std::greater<Item>> pq;
      dist[static_cast<size_t>(start)] = 0.0;
      pq.push({0.0, start});
      while (!pq.empty()) {
        auto [d, cur] = pq.top();
        pq.pop();
        if (d > dist[static_cast<size_t>(cur)]) continue;
        const int r = cur / w, c = cur % w;
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            if (dr == 0 && dc == 0) continue;
            const int rr = r + dr, cc = c + dc;
            if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
            const int nx = rr * w + cc;
            if (!mask[static_cast<size_t>(nx)] ||
                comp[static_cast<size_t>(nx)] != comp[static_cast<size_t>(start)])
              continue;
            const double nd = d + ((dr == 0 || dc == 0) ? 1.0 : M_SQRT2);
            if (nd < dist[static_cast<size_t>(nx)]) {
              dist[static_cast<size_t>(nx)] = nd;
              pred[static_cast<size_t>(nx)] = cur;
              pq.push({nd, nx});
            }
          }
      }
      int far = start;
      double best = -1.0;
      for (int p : pixels)
        if (std::isfinite(dist[static_cast<size_t>(p)]) &&
            dist[static_cast<size_t>(p)] > best) {
          best = dist[static_cast<size_t>(p)];
          far = p;
        }
      if (pred_out) *pred_out = std::move(pred);
      return far;
    };
    const int u = dijkstra_far(pixels.front(), nullptr);
    std::vector<int> pred;
    const int v = dijkstra_far(u, &pred);
    std::vector<int> path;
    for (int cur = v; cur >= 0; cur = pred[static_cast<size_t>(cur)]) path.push_back(cur);
    std::reverse(path.begin(), path.end());
    if (path.empty()) continue;

    std::vector<Vec2> local;
    local.reserve(path.size());
    for (int p : path)
      local.push_back({static_cast<double>(p % w - base_c),
                       static_cast<double>(p / w - base_r)});

    // Recenter each point across the band along the local normal.
    std::vector<Vec2> centered(local.size());
    const auto on_mask = [&](const Vec2& q) {
      const int r = static_cast<int>(std::lround(q.y)) + base_r;
      const int c = static_cast<int>(std::lround(q.x)) + base_c;
      return r >= 0 && r < h && c >= 0 && c < w && mask[static_cast<size_t>(r) * w + c];
    };
    for (size_t i = 0; i < local.size(); ++i) {
      const size_t a = i >= 2 ? i - 2 : 0;
      const size_t b = std::min(i + 2, local.size() - 1);
      Vec2 tangent = local[b] - local[a];
      const double tl = tangent.norm();
      if (tl <= 1e-12) {
        centered[i] = local[i];
        continue;
      }
      tangent = tangent / tl;
      const Vec2 normal{-tangent.y, tangent.x};
      double tpos = 0.0, tneg = 0.0;
      for (double t = 0.5; t <= 32.0; t += 0.5) {
        if (!on_mask(local[i] + normal * t)) break;
        tpos = t;
      }
      for (double t = 0.5; t <= 32.0; t += 0.5) {
        if (!on_mask(local[i] - normal * t)) break;
        tneg = t;
      }
      centered[i] = local[i] + normal * ((tpos - tneg) * 0.5);
    }
    // Light smoothing; straight chains are left untouched.
    std::vector<Vec2> smooth = centered;
    for (size_t i = 1; i + 1 < centered.size(); ++i)
      smooth[i] = (centered[i - 1] + centered[i] + centered[i + 1]) / 3.0;
    std::vector<Vec2> chain;
    for (const Vec2& q : smooth) {
      const Vec2 g = detail::snap20(q) + Vec2{static_cast<double>(base_c),
                                              static_cast<double>(base_r)};
      if (chain.empty() || !(chain.back() == g)) chain.push_back(g);
    }
    if (!chain.empty()) chains.push_back(std::move(chain));
  }
  return chains;
}

// n points at equal arc-length spacing along a chain, endpoints included.
inline std::vector<Vec2> sample_equidistant(const std::vector<Vec2>& chain, int n) {
  if (n < 2) throw ConfigError("sample_equidistant requires n >= 2");
  if (chain.size() < 2) throw ContractError("sample_equidistant needs a chain of >= 2 points");
  const double total = detail::polyline_length(chain);
  if (total <= 0.0) throw ContractError("sample_equidistant chain has zero arc length");
  std::vector<Vec2> out(static_cast<size_t>(n));
  out.front() = chain.front();
  out.back() = chain.back();
  for (int k = 1; k + 1 < n; ++k)
    out[static_cast<size_t>(k)] = detail::point_at_arc(chain, total * k / (n - 1));
  return out;
}

namespace detail {

// Nearest double b with fl(t + b) == fl(2c); falls back to the plain
// rounding when no exactly mirroring double exists.
inline double mirror_coordinate(double c, double t) {
  const double target = 2.0 * c;
  double b = target - t;
  if (t + b == target) return b;
  double lo = b, hi = b;
  for (int k = 0; k < 4; ++k) {
    lo = std::nextafter(lo, -std::numeric_limits<double>::infinity());
    hi = std::nextafter(hi, std::numeric_limits<double>::infinity());
    if (t + lo == target) return lo;
    if (t + hi == target) return hi;
  }
  return target - t;
}

}  // namespace detail

// The fiducial pair of one sampled center point:
//   p_top    = c + ( s cos(phi), -s sin(phi))
//   p_bottom = c + (-s cos(phi),  s sin(phi))
// The bottom point is materialized as the exact mirror of the top point so
// p_top + p_bottom == 2c holds in floating point, not just on paper.
inline std::pair<Vec2, Vec2> fiducial_points(const Vec2& c, double s, double phi) {
  const double ox = s * std::cos(phi);
  const double oy = s * std::sin(phi);
  const Vec2 top{c.x + ox, c.y - oy};
  const Vec2 bottom{detail::mirror_coordinate(c.x, top.x),
                    detail::mirror_coordinate(c.y, top.y)};
  return {top, bottom};
}

struct DecodedInstance {
  Polygon polygon;             // simplified, image coordinates
  FiducialPointSet fiducials;  // the raw 2n points, map coordinates
  double score = 0.0;          // mean TCL probability at the sample points
};

struct DecodeDiagnostics {
  int dropped_instances = 0;
  std::vector<std::string> messages;
};

struct DecodeParams {
  int n = 8;
  double t_tr = 0.7;
  double t_tcl = 0.6;
  double dp_epsilon = 1.0;
  int min_area = 3;
};

// Reconstructs text polygons from geometry maps: per center-line chain,
// sample n points, read the local scale and orientations (3x3 mean over
// valid TCL pixels), apply the fiducial formula, close the ring top
// left-to-right then bottom right-to-left, simplify, and rescale.
inline std::vector<DecodedInstance> decode(const GeometryMaps& maps,
                                           const DecodeParams& params,
                                           DecodeDiagnostics* diag = nullptr) {
  std::vector<DecodedInstance> out;
  const auto chains = extract_center_lines(maps.tcl, maps.tr, maps.h, maps.w,
                                           params.t_tr, params.t_tcl, params.min_area);
  const auto is_valid_px = [&](int r, int c) {
    return r >= 0 && r < maps.h && c >= 0 && c < maps.w &&
           maps.tcl[maps.idx(r, c)] >= params.t_tcl &&
           maps.tr[maps.idx(r, c)] >= params.t_tr;
  };
  for (const auto& chain : chains) {
    if (chain.size() < 2 || detail::polyline_length(chain) <= 0.0) {
      if (diag) {
        diag->dropped_instances++;
        diag->messages.push_back("chain too short to sample");
      }
      continue;
    }
    // Local frame: all geometry happens relative to the chain's corner so
    // canvas translations shift results exactly.
    auto [lo, hi] = bounding_box(chain);
    const Vec2 base{std::floor(lo.x), std::floor(lo.y)};
    std::vector<Vec2> local(chain.size());
    for (size_t i = 0; i < chain.size(); ++i) local[i] = chain[i] - base;

    const std::vector<Vec2> centers = sample_equidistant(local, params.n);
    std::vector<double> s_val(centers.size(), 0.0), score_val(centers.size(), 0.0);
    std::vector<double> rp_cos(centers.size(), 0.0), rp_sin(centers.size(), 0.0);
    bool any_readout = false;
    for (size_t i = 0; i < centers.size(); ++i) {
      const int pr = static_cast<int>(std::lround(centers[i].y + base.y));
      const int pc = static_cast<int>(std::lround(centers[i].x + base.x));
      double acc_s = 0, acc_cp = 0, acc_sp = 0, acc_tcl = 0;
      int count = 0;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          if (!is_valid_px(pr + dr, pc + dc)) continue;
          const size_t at = maps.idx(pr + dr, pc + dc);
          acc_s += maps.s[at];
          acc_cp += maps.cos_p[at];
          acc_sp += maps.sin_p[at];
          acc_tcl += maps.tcl[at];
          ++count;
        }
      if (count == 0) continue;
      any_readout = true;
      s_val[i] = acc_s / count;
      rp_cos[i] = acc_cp / count;
      rp_sin[i] = acc_sp / count;
      score_val[i] = acc_tcl / count;
    }
    if (!any_readout) {
      if (diag) {
        diag->dropped_instances++;
        diag->messages.push_back("no valid TCL pixels around sample points");
      }
      continue;
    }
    // Normalize orientations; degenerate points borrow the nearest valid one.
    std::vector<double> phi(centers.size(), 0.0);
    std::vector<bool> ok(centers.size(), false);
    for (size_t i = 0; i < centers.size(); ++i) {
      try {
        auto [cp, sp] = normalize_trig(rp_cos[i], rp_sin[i]);
        phi[i] = std::atan2(sp, cp);
        ok[i] = true;
      } catch (const DegenerateOrientationError&) {
      }
    }
    if (std::none_of(ok.begin(), ok.end(), [](bool b) { return b; })) {
      if (diag) {
        diag->dropped_instances++;
        diag->messages.push_back("orientation degenerate at every sample point");
      }
      continue;
    }
    for (size_t i = 0; i < centers.size(); ++i) {
      if (ok[i]) continue;
      size_t best = centers.size();
      for (size_t j = 0; j < centers.size(); ++j)
        if (ok[j] && (best == centers.size() ||
                      std::abs(static_cast<long>(j) - static_cast<long>(i)) <
                          std::abs(static_cast<long>(best) - static_cast<long>(i))))
          best = j;
      phi[i] = phi[best];
      s_val[i] = ok[i] ? s_val[i] : s_val[best];
    }

    DecodedInstance inst;
    inst.fiducials.n = params.n;
    std::vector<Vec2> tops, bottoms;
    for (size_t i = 0; i < centers.size(); ++i) {
      auto [t, b] = fiducial_points(centers[i], std::max(0.0, s_val[i]), phi[i]);
      inst.fiducials.points.push_back(detail::snap20(t) + base);
      inst.fiducials.points.push_back(detail::snap20(b) + base);
      tops.push_back(detail::snap20(t));
      bottoms.push_back(detail::snap20(b));
    }
    Polygon ring = tops;
    ring.insert(ring.end(), bottoms.rbegin(), bottoms.rend());
    ring = rdp_simplify_ring(ring, params.dp_epsilon);
    for (Vec2& v : ring) v = (v + base) * maps.image_scale;
    inst.polygon = std::move(ring);
    double sc = 0.0;
    for (double v : score_val) sc += v;
    inst.score = sc / static_cast<double>(score_val.size());
    out.push_back(std::move(inst));
  }
  return out;
}

}  // namespace nask
