#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "polystab/common.hpp"

namespace polystab {

// ---------------------------------------------------------------------------
// Polygon: simple, counterclockwise, no interior angle equal to pi.
// Vertex i joins edge i-1 (incoming) and edge i (outgoing); edge i runs from
// vertex i to vertex i+1, indices cyclic. Immutable after construction.
// ---------------------------------------------------------------------------

class Polygon {
 public:
  static constexpr double angle_tolerance = 1e-9;

  explicit Polygon(std::vector<Vec2> vertices) : v_(std::move(vertices)) { validate(); }

  int n() const { return static_cast<int>(v_.size()); }
  const std::vector<Vec2>& vertices() const { return v_; }

  Vec2 vertex(int i) const { return v_[wrap(i)]; }
  Vec2 edge_start(int e) const { return v_[wrap(e)]; }
  Vec2 edge_end(int e) const { return v_[wrap(e + 1)]; }
  double edge_length(int e) const { return distance(edge_start(e), edge_end(e)); }
  Vec2 edge_tangent(int e) const { return normalized(edge_end(e) - edge_start(e)); }
  // Outward normal: interior lies to the left of the CCW tangent.
  Vec2 edge_normal(int e) const {
    const Vec2 t = edge_tangent(e);
    return {t.y, -t.x};
  }

  double signed_area() const {
    double a = 0.0;
    for (int i = 0; i < n(); ++i) a += cross(v_[i], v_[wrap(i + 1)]);
    return 0.5 * a;
  }

  double perimeter() const {
    double s = 0.0;
    for (int e = 0; e < n(); ++e) s += edge_length(e);
    return s;
  }

  bool contains(Vec2 p) const {
    // even-odd ray crossing; boundary points are not classified reliably
    bool inside = false;
    for (int e = 0; e < n(); ++e) {
      const Vec2 a = edge_start(e), b = edge_end(e);
      if ((a.y > p.y) != (b.y > p.y)) {
        const double xc = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
        if (p.x < xc) inside = !inside;
      }
    }
    return inside;
  }

  double distance_to_boundary(Vec2 p) const {
    double d = std::numeric_limits<double>::infinity();
    for (int e = 0; e < n(); ++e)
      d = std::min(d, point_segment_distance(p, edge_start(e), edge_end(e)));
    return d;
  }

  Polygon translated(Vec2 t) const {
    std::vector<Vec2> w = v_;
    for (auto& p : w) p += t;
    return Polygon(std::move(w));
  }

  Polygon displaced(const std::vector<Vec2>& d) const {
    if (static_cast<int>(d.size()) != n())
      throw DimensionError("displacement count does not match vertex count");
    std::vector<Vec2> w = v_;
    for (int i = 0; i < n(); ++i) w[i] += d[i];
    return Polygon(std::move(w));
  }

  Polygon relabeled(int shift) const {
    std::vector<Vec2> w(v_.size());
    for (int i = 0; i < n(); ++i) w[i] = v_[wrap(i + shift)];
    return Polygon(std::move(w));
  }

 private:
  int wrap(int i) const {
    const int m = n();
    return ((i % m) + m) % m;
  }

  void validate() const {
    const int m = n();
    if (m < 3) throw GeometryError("polygon needs at least 3 vertices");
    for (int e = 0; e < m; ++e) {
      if (distance(v_[e], v_[(e + 1) % m]) == 0.0)
        throw GeometryError("degenerate zero-length edge at index " + std::to_string(e));
    }
    if (signed_area() <= 0.0) throw GeometryError("vertices must be in counterclockwise order");
    // pairwise intersection of non-adjacent edges
    for (int e = 0; e < m; ++e) {
      for (int f = e + 1; f < m; ++f) {
        if (f == e || (f + 1) % m == e || (e + 1) % m == f) continue;
        if (segments_cross(v_[e], v_[(e + 1) % m], v_[f], v_[(f + 1) % m]))
          throw GeometryError("boundary is not simple: edges " + std::to_string(e) + " and " +
                              std::to_string(f) + " intersect");
      }
    }
    for (int i = 0; i < m; ++i) {
      const double a = interior_angle(i);
      if (std::fabs(a - pi) <= angle_tolerance)
        throw GeometryError("interior angle at vertex " + std::to_string(i) + " equals pi");
    }
  }

  static int orientation_sign(Vec2 a, Vec2 b, Vec2 c) {
    const double d = cross(b - a, c - a);
    if (d > 0) return 1;
    if (d < 0) return -1;
    return 0;
  }

  static bool on_segment(Vec2 a, Vec2 b, Vec2 p) {
    return std::min(a.x, b.x) <= p.x && p.x <= std::max(a.x, b.x) && std::min(a.y, b.y) <= p.y &&
           p.y <= std::max(a.y, b.y);
  }

  static bool segments_cross(Vec2 a, Vec2 b, Vec2 c, Vec2 d) {
    const int o1 = orientation_sign(a, b, c);
    const int o2 = orientation_sign(a, b, d);
    const int o3 = orientation_sign(c, d, a);
    const int o4 = orientation_sign(c, d, b);
    if (o1 != o2 && o3 != o4) return true;
    if (o1 == 0 && on_segment(a, b, c)) return true;
    if (o2 == 0 && on_segment(a, b, d)) return true;
    if (o3 == 0 && on_segment(c, d, a)) return true;
    if (o4 == 0 && on_segment(c, d, b)) return true;
    return false;
  }

 public:
  // Interior angle at vertex i, measured inside the polygon, in (0, 2pi).
  double interior_angle(int i) const {
    const Vec2 u = vertex(i + 1) - vertex(i);  // outgoing edge direction
    const Vec2 w = vertex(i - 1) - vertex(i);  // incoming edge, reversed
    double a = std::atan2(cross(u, w), dot(u, w));
    if (a <= 0.0) a += two_pi;
    return a;
  }

 private:
  std::vector<Vec2> v_;
};

inline std::vector<double> interior_angles(const Polygon& p) {
  std::vector<double> a(p.n());
  for (int i = 0; i < p.n(); ++i) a[i] = p.interior_angle(i);
  return a;
}

// ---------------------------------------------------------------------------
// Enclosing domain boundary: smooth closed curve, default a circle. Custom
// curves supply position/derivative/second derivative of a 2pi-periodic
// parametrization.
// ---------------------------------------------------------------------------

class DomainBoundary {
 public:
  static DomainBoundary circle(double radius, Vec2 center = {0.0, 0.0}) {
    if (radius <= 0.0) throw GeometryError("circle radius must be positive");
    DomainBoundary b;
    b.is_circle_ = true;
    b.radius_ = radius;
    b.center_ = center;
    return b;
  }

  static DomainBoundary curve(std::function<Vec2(double)> position,
                              std::function<Vec2(double)> derivative,
                              std::function<Vec2(double)> second_derivative) {
    DomainBoundary b;
    b.pos_ = std::move(position);
    b.der_ = std::move(derivative);
    b.der2_ = std::move(second_derivative);
    return b;
  }

  bool is_circle() const { return is_circle_; }
  double radius() const { return radius_; }
  Vec2 center() const { return center_; }

  Vec2 position(double t) const {
    if (is_circle_) return center_ + Vec2{radius_ * std::cos(t), radius_ * std::sin(t)};
    return pos_(t);
  }
  Vec2 derivative(double t) const {
    if (is_circle_) return {-radius_ * std::sin(t), radius_ * std::cos(t)};
    return der_(t);
  }
  Vec2 second_derivative(double t) const {
    if (is_circle_) return {-radius_ * std::cos(t), -radius_ * std::sin(t)};
    return der2_(t);
  }

  // Signed clearance of a point: positive inside, distance to the curve.
  double interior_clearance(Vec2 p, int samples = 720) const {
    if (is_circle_) return radius_ - distance(p, center_);
    double d = std::numeric_limits<double>::infinity();
    for (int i = 0; i < samples; ++i) {
      const double t0 = two_pi * i / samples, t1 = two_pi * (i + 1) / samples;
      d = std::min(d, point_segment_distance(p, position(t0), position(t1)));
    }
    // crude inside test via winding of the sampled curve
    double winding = 0.0;
    Vec2 prev = position(0.0) - p;
    for (int i = 1; i <= samples; ++i) {
      const Vec2 cur = position(two_pi * i / samples) - p;
      winding += std::atan2(cross(prev, cur), dot(prev, cur));
      prev = cur;
    }
    return std::fabs(winding) > pi ? d : -d;
  }

 private:
  DomainBoundary() = default;
  bool is_circle_ = false;
  double radius_ = 1.0;
  Vec2 center_{0.0, 0.0};
  std::function<Vec2(double)> pos_, der_, der2_;
};

// ---------------------------------------------------------------------------
// Admissible class membership
// ---------------------------------------------------------------------------

struct AdmissibleClassParams {
  int n = 3;
  double delta = 0.1;

  AdmissibleClassParams(int nn, double d) : n(nn), delta(d) {
    if (n < 3) throw DomainParameterError("admissible class needs n >= 3");
    if (delta <= 0.0) throw DomainParameterError("admissible class needs delta > 0");
  }
};

struct AdmissibilityReport {
  struct Violation {
    int item;    // 1: vertex/edge separation, 2: angle bounds, 3: domain clearance
    int index;   // offending vertex or edge index (-1 when global)
    double value;
  };
  bool admissible = true;
  std::vector<Violation> violations;
};

inline AdmissibilityReport is_admissible(const Polygon& p, const AdmissibleClassParams& params,
                                         const DomainBoundary& domain) {
  AdmissibilityReport report;
  const double delta = params.delta;
  auto flag = [&](int item, int index, double value) {
    report.admissible = false;
    report.violations.push_back({item, index, value});
  };

  if (p.n() != params.n) flag(0, p.n(), static_cast<double>(params.n));

  // (i) each vertex at least delta away from every non-adjacent edge
  for (int i = 0; i < p.n(); ++i) {
    for (int e = 0; e < p.n(); ++e) {
      if (e == i || (e + 1) % p.n() == i) continue;  // edges meeting at vertex i
      const double d = point_segment_distance(p.vertex(i), p.edge_start(e), p.edge_end(e));
      if (d < delta) {
        flag(1, i, d);
        break;
      }
    }
  }

  // (ii) angles within [delta, 2pi - delta] and at least delta away from pi
  for (int i = 0; i < p.n(); ++i) {
    const double a = p.interior_angle(i);
    if (a < delta || a > two_pi - delta || std::fabs(a - pi) < delta) flag(2, i, a);
  }

  // (iii) clearance between the polygon boundary and the domain boundary,
  // and containment. For a polygon the extremal point is always a vertex.
  double clearance = std::numeric_limits<double>::infinity();
  bool inside = true;
  for (int i = 0; i < p.n(); ++i) {
    const double c = domain.interior_clearance(p.vertex(i));
    clearance = std::min(clearance, c);
    if (c <= 0.0) inside = false;
  }
  if (!inside || clearance < delta) flag(3, -1, clearance);

  return report;
}

// ---------------------------------------------------------------------------
// Vertex metric d and Hausdorff distance between boundaries
// ---------------------------------------------------------------------------

// d(P,Q) = min over cyclic shifts of the max vertex displacement. Labelings
// are treated as equivalence classes; no reflection matching.
inline double polygon_metric(const Polygon& p, const Polygon& q) {
  if (p.n() != q.n()) throw DimensionError("polygon metric needs equal vertex counts");
  const int n = p.n();
  double best = std::numeric_limits<double>::infinity();
  for (int shift = 0; shift < n; ++shift) {
    double worst = 0.0;
    for (int i = 0; i < n; ++i) {
      worst = std::max(worst, distance(p.vertex(i + shift), q.vertex(i)));
      if (worst >= best) break;
    }
    best = std::min(best, worst);
  }
  return best;
}

namespace detail {

// Max over a segment [a,b] of the distance-to-boundary function of poly.
// The distance to each edge is convex along the segment, so the pointwise
// minimum attains interior maxima only where the active edge switches;
// locate switch brackets by scanning, then refine by golden-section search.
inline double max_distance_on_segment(Vec2 a, Vec2 b, const Polygon& poly) {
  auto value = [&](double t) { return poly.distance_to_boundary(a + (b - a) * t); };
  const int coarse = 64;
  double best = std::max(value(0.0), value(1.0));
  for (int s = 0; s < coarse; ++s) {
    double lo = static_cast<double>(s) / coarse;
    double hi = static_cast<double>(s + 1) / coarse;
    // golden-section refinement of a potential interior maximum
    const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
    double x1 = hi - gr * (hi - lo), x2 = lo + gr * (hi - lo);
    double f1 = value(x1), f2 = value(x2);
    for (int it = 0; it < 80 && hi - lo > 1e-13; ++it) {
      if (f1 < f2) {
        lo = x1;
        x1 = x2;
        f1 = f2;
        x2 = lo + gr * (hi - lo);
        f2 = value(x2);
      } else {
        hi = x2;
        x2 = x1;
        f2 = f1;
        x1 = hi - gr * (hi - lo);
        f1 = value(x1);
      }
    }
    best = std::max(best, std::max(f1, f2));
  }
  return best;
}

inline double directed_hausdorff(const Polygon& p, const Polygon& q) {
  double h = 0.0;
  for (int e = 0; e < p.n(); ++e)
    h = std::max(h, max_distance_on_segment(p.edge_start(e), p.edge_end(e), q));
  return h;
}

}  // namespace detail

inline double hausdorff_distance(const Polygon& p, const Polygon& q) {
  return std::max(detail::directed_hausdorff(p, q), detail::directed_hausdorff(q, p));
}

// ---------------------------------------------------------------------------
// Vertex perturbations and the piecewise linear boundary field they induce
// ---------------------------------------------------------------------------

struct VertexPerturbation {
  std::vector<Vec2> displacements;

  // max-norm over vertices
  double norm() const {
    double m = 0.0;
    for (const auto& d : displacements) m = std::max(m, d.norm());
    return m;
  }
};

// Piecewise linear vector field on the polygon boundary with h(x_i) = d_i.
class BoundaryField {
 public:
  BoundaryField(const Polygon& p, std::vector<Vec2> vertex_values)
      : poly_(p), values_(std::move(vertex_values)) {
    if (static_cast<int>(values_.size()) != p.n())
      throw DimensionError("field values must match vertex count");
  }

  const Polygon& polygon() const { return poly_; }
  Vec2 at_vertex(int i) const { return values_[((i % poly_.n()) + poly_.n()) % poly_.n()]; }

  // Value at arclength s from the start of edge e.
  Vec2 on_edge(int e, double s) const {
    const double len = poly_.edge_length(e);
    const double t = s / len;
    return at_vertex(e) * (1.0 - t) + at_vertex(e + 1) * t;
  }

  // Max-norm; equals the vertex max-norm because |h| is convex along edges.
  double norm() const {
    double m = 0.0;
    for (const auto& v : values_) m = std::max(m, v.norm());
    return m;
  }

 private:
  Polygon poly_;
  std::vector<Vec2> values_;
};

inline BoundaryField interpolate_field(const Polygon& p, const VertexPerturbation& d) {
  if (static_cast<int>(d.displacements.size()) != p.n())
    throw DimensionError("perturbation size does not match polygon");
  return BoundaryField(p, d.displacements);
}

// Normal component of a boundary field on one edge: h.nu = offset + slope * s
// with s the arclength from the edge start. Generally discontinuous at the
// vertices because the normal jumps.
struct EdgeLinearForm {
  double offset = 0.0;
  double slope = 0.0;
  double length = 0.0;
  Vec2 normal;

  double at(double s) const { return offset + slope * s; }
};

inline std::vector<EdgeLinearForm> normal_component(const Polygon& p, const BoundaryField& h) {
  std::vector<EdgeLinearForm> forms(p.n());
  for (int e = 0; e < p.n(); ++e) {
    const Vec2 nu = p.edge_normal(e);
    const double len = p.edge_length(e);
    const double start = dot(h.at_vertex(e), nu);
    const double end = dot(h.at_vertex(e + 1), nu);
    forms[e] = {start, (end - start) / len, len, nu};
  }
  return forms;
}

// ---------------------------------------------------------------------------
// Rejection sampling of the admissible class
// ---------------------------------------------------------------------------

inline Polygon sample_admissible_polygon(const AdmissibleClassParams& params,
                                         const DomainBoundary& domain, std::uint64_t seed,
                                         int budget = 10000) {
  if (!domain.is_circle())
    throw FeasibilityError("sampling is implemented for circular domains");
  const double r_hi = domain.radius() - params.delta;
  const double r_lo = std::min(params.delta, 0.5 * r_hi);
  if (r_hi <= 0.0 || r_lo >= r_hi)
    throw FeasibilityError("admissible class is empty: no clearance left inside the domain");

  Rng rng(seed);
  for (int attempt = 0; attempt < budget; ++attempt) {
    std::vector<double> angles(params.n);
    for (auto& a : angles) a = rng.uniform(0.0, two_pi);
    std::sort(angles.begin(), angles.end());
    std::vector<Vec2> verts(params.n);
    bool degenerate = false;
    for (int i = 0; i < params.n; ++i) {
      if (i > 0 && angles[i] - angles[i - 1] < 1e-6) degenerate = true;
      const double r = rng.uniform(r_lo, r_hi);
      verts[i] = domain.center() + Vec2{r * std::cos(angles[i]), r * std::sin(angles[i])};
    }
    if (degenerate) continue;
    try {
      Polygon candidate(verts);
      if (is_admissible(candidate, params, domain).admissible) return candidate;
    } catch (const GeometryError&) {
      continue;
    }
  }
  throw FeasibilityError("sampling budget exhausted for the requested admissible class");
}

// ---------------------------------------------------------------------------
// Local corner frame at vertex i: polar coordinates (r, theta) around the
// vertex with theta = 0 along the outgoing edge, theta = alpha_i along the
// incoming edge, and the interior covered by 0 < theta < alpha_i.
// ---------------------------------------------------------------------------

struct CornerFrame {
  Vec2 origin;
  double rotation = 0.0;  // angle of the theta = 0 ray
  double opening = 0.0;   // interior angle alpha_i
  int index = 0;

  std::pair<double, double> to_local(Vec2 p) const {
    const Vec2 d = p - origin;
    const double r = d.norm();
    double theta = std::atan2(d.y, d.x) - rotation;
    theta = std::fmod(theta, two_pi);
    if (theta < 0.0) theta += two_pi;
    return {r, theta};
  }

  Vec2 from_local(double r, double theta) const {
    return origin + Vec2{r * std::cos(rotation + theta), r * std::sin(rotation + theta)};
  }
};

inline CornerFrame local_coordinates(const Polygon& p, int i) {
  if (i < 0 || i >= p.n()) throw DimensionError("vertex index out of range");
  const Vec2 out = p.vertex(i + 1) - p.vertex(i);
  CornerFrame frame;
  frame.origin = p.vertex(i);
  frame.rotation = std::atan2(out.y, out.x);
  frame.opening = p.interior_angle(i);
  frame.index = i;
  return frame;
}

}  // namespace polystab
