#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "polystab/common.hpp"
#include "polystab/geometry.hpp"
#include "polystab/quadrature.hpp"

namespace polystab {

// ---------------------------------------------------------------------------
// Discretization parameters. Polygon edges are split into panels graded
// algebraically toward both vertices (nodes never touch a vertex); the
// enclosing smooth boundary uses the periodic trapezoidal grid.
// ---------------------------------------------------------------------------

struct Discretization {
  int panels_per_edge = 12;
  double grading_exponent = 3.0;
  int panel_order = 8;
  int domain_nodes = 128;
  int trace_modes = 40;  // trigonometric basis size for derivative traces

  void validate() const {
    if (panels_per_edge < 1) throw DiscretizationError("panels_per_edge must be >= 1");
    if (grading_exponent < 1.0) throw DiscretizationError("grading exponent must be >= 1");
    if (panel_order < 2 || panel_order > 16) throw DiscretizationError("panel order out of range");
    if (domain_nodes < 8 || domain_nodes % 2 != 0)
      throw DiscretizationError("domain node count must be even and >= 8");
    if (trace_modes < 2) throw DiscretizationError("trace_modes must be >= 2");
  }

  Discretization refined(int factor) const {
    Discretization d = *this;
    d.panels_per_edge *= factor;
    d.domain_nodes *= factor;
    return d;
  }
};

// ---------------------------------------------------------------------------
// Panelized polygon boundary
// ---------------------------------------------------------------------------

struct Panel {
  int edge = 0;
  double s0 = 0.0, s1 = 0.0;  // arclength range from the edge start
  int first_node = 0;

  double length() const { return s1 - s0; }
};

class PolygonMesh {
 public:
  PolygonMesh(const Polygon& poly, const Discretization& disc)
      : poly_(poly), order_(disc.panel_order) {
    disc.validate();
    const GaussRule& rule = gauss_rule(order_);
    const int n = poly.n();
    edge_first_panel_.resize(n + 1);

    for (int e = 0; e < n; ++e) {
      edge_first_panel_[e] = static_cast<int>(panels_.size());
      const double len = poly.edge_length(e);
      const Vec2 a = poly.edge_start(e);
      const Vec2 tangent = poly.edge_tangent(e);
      const Vec2 normal = poly.edge_normal(e);
      edge_tangent_.push_back(tangent);
      edge_normal_.push_back(normal);
      edge_length_.push_back(len);

      const std::vector<double> breaks = graded_breakpoints(disc);
      for (std::size_t p = 0; p + 1 < breaks.size(); ++p) {
        Panel panel;
        panel.edge = e;
        panel.s0 = breaks[p] * len;
        panel.s1 = breaks[p + 1] * len;
        panel.first_node = static_cast<int>(nodes_.size());
        const double half = 0.5 * panel.length();
        const double mid = 0.5 * (panel.s0 + panel.s1);
        for (int j = 0; j < order_; ++j) {
          const double s = mid + half * rule.nodes[j];
          nodes_.push_back(a + tangent * s);
          weights_.push_back(half * rule.weights[j]);
          arclength_.push_back(s);
          node_edge_.push_back(e);
          node_panel_.push_back(static_cast<int>(panels_.size()));
        }
        panels_.push_back(panel);
      }
    }
    edge_first_panel_[n] = static_cast<int>(panels_.size());
    // warm the caches used inside parallel assembly
    panel_split_matrices(order_);
    gauss_differentiation_matrix(order_);
    legendre_analysis_cache_ = legendre_analysis_matrix(order_);
  }

  const Polygon& polygon() const { return poly_; }
  int order() const { return order_; }
  int node_count() const { return static_cast<int>(nodes_.size()); }
  int panel_count() const { return static_cast<int>(panels_.size()); }
  const std::vector<Panel>& panels() const { return panels_; }
  const Panel& panel(int p) const { return panels_[p]; }
  int edge_panel_begin(int e) const { return edge_first_panel_[e]; }
  int edge_panel_end(int e) const { return edge_first_panel_[e + 1]; }

  Vec2 node(int q) const { return nodes_[q]; }
  double weight(int q) const { return weights_[q]; }
  double arclength(int q) const { return arclength_[q]; }
  int node_edge(int q) const { return node_edge_[q]; }
  int node_panel(int q) const { return node_panel_[q]; }
  Vec2 node_normal(int q) const { return edge_normal_[node_edge_[q]]; }
  Vec2 node_tangent(int q) const { return edge_tangent_[node_edge_[q]]; }
  Vec2 edge_tangent(int e) const { return edge_tangent_[e]; }
  Vec2 edge_normal(int e) const { return edge_normal_[e]; }
  double edge_length(int e) const { return edge_length_[e]; }
  const Eigen::MatrixXd& legendre_analysis() const { return legendre_analysis_cache_; }

  Vec2 panel_start(int p) const {
    const Panel& pa = panels_[p];
    return poly_.edge_start(pa.edge) + edge_tangent_[pa.edge] * pa.s0;
  }
  Vec2 panel_end(int p) const {
    const Panel& pa = panels_[p];
    return poly_.edge_start(pa.edge) + edge_tangent_[pa.edge] * pa.s1;
  }

  // smallest panel length adjacent to a node; used by near-evaluation warnings
  double panel_length_at(int q) const { return panels_[node_panel_[q]].length(); }

  double boundary_length() const {
    double s = 0.0;
    for (double l : edge_length_) s += l;
    return s;
  }

  // distance from a point to the mesh
  double distance_to(Vec2 x) const { return poly_.distance_to_boundary(x); }

 private:
  std::vector<double> graded_breakpoints(const Discretization& disc) const {
    std::vector<double> breaks;
    if (disc.panels_per_edge == 1) {
      breaks = {0.0, 1.0};
      return breaks;
    }
    const int half_count = std::max(1, disc.panels_per_edge / 2);
    const double q = disc.grading_exponent;
    for (int j = 0; j <= half_count; ++j)
      breaks.push_back(0.5 * std::pow(static_cast<double>(j) / half_count, q));
    for (int j = half_count - 1; j >= 0; --j)
      breaks.push_back(1.0 - 0.5 * std::pow(static_cast<double>(j) / half_count, q));
    return breaks;
  }

  Polygon poly_;
  int order_;
  std::vector<Panel> panels_;
  std::vector<int> edge_first_panel_;
  std::vector<Vec2> nodes_;
  std::vector<double> weights_;
  std::vector<double> arclength_;
  std::vector<int> node_edge_;
  std::vector<int> node_panel_;
  std::vector<Vec2> edge_tangent_, edge_normal_;
  std::vector<double> edge_length_;
  Eigen::MatrixXd legendre_analysis_cache_;
};

// ---------------------------------------------------------------------------
// Periodic trapezoidal mesh on the enclosing smooth boundary
// ---------------------------------------------------------------------------

class DomainMesh {
 public:
  DomainMesh(const DomainBoundary& boundary, int node_count)
      : boundary_(boundary), n_(node_count) {
    if (n_ < 8 || n_ % 2 != 0) throw DiscretizationError("domain node count must be even and >= 8");
    params_.resize(n_);
    nodes_.resize(n_);
    speeds_.resize(n_);
    normals_.resize(n_);
    second_.resize(n_);
    weights_.resize(n_);
    for (int i = 0; i < n_; ++i) {
      const double t = two_pi * i / n_;
      params_[i] = t;
      nodes_[i] = boundary.position(t);
      const Vec2 d = boundary.derivative(t);
      speeds_[i] = d.norm();
      normals_[i] = Vec2{d.y, -d.x} / speeds_[i];
      second_[i] = boundary.second_derivative(t);
      weights_[i] = two_pi / n_ * speeds_[i];
    }
    kress_table_ = kress_log_weight_table(n_);
  }

  const DomainBoundary& boundary() const { return boundary_; }
  int node_count() const { return n_; }
  double param(int i) const { return params_[i]; }
  Vec2 node(int i) const { return nodes_[i]; }
  double speed(int i) const { return speeds_[i]; }
  Vec2 normal(int i) const { return normals_[i]; }
  Vec2 second_derivative(int i) const { return second_[i]; }
  double weight(int i) const { return weights_[i]; }
  double kress(int diff) const { return kress_table_[((diff % n_) + n_) % n_]; }

  double boundary_length() const {
    double s = 0.0;
    for (double w : weights_) s += w;
    return s;
  }

 private:
  DomainBoundary boundary_;
  int n_;
  std::vector<double> params_;
  std::vector<Vec2> nodes_;
  std::vector<double> speeds_;
  std::vector<Vec2> normals_;
  std::vector<Vec2> second_;
  std::vector<double> weights_;
  std::vector<double> kress_table_;
};

// ---------------------------------------------------------------------------
// Panel quadrature rows. Each helper returns the coefficients of a linear
// functional acting on the nodal values of one panel. Regular targets use
// plain Gauss weights; targets close to the panel (relative to its length)
// trigger dyadic subdivision with Legendre re-interpolation; targets on the
// panel's own line use exact moment formulas, with the principal-value or
// finite-part reading when the target sits inside the panel.
// ---------------------------------------------------------------------------

namespace panelquad {

inline constexpr double near_factor = 2.5;
inline constexpr int max_depth = 36;

// kernel(x, y, normal_y) -> double
template <class Kernel>
void accumulate_row(const Kernel& kernel, Vec2 x, Vec2 a, Vec2 b, Vec2 normal, int order,
                    int depth, Eigen::RowVectorXd& out, const Eigen::MatrixXd& carry) {
  const GaussRule& rule = gauss_rule(order);
  const double len = distance(a, b);
  const double d = point_segment_distance(x, a, b);
  if (depth >= max_depth || d >= near_factor * len) {
    Eigen::RowVectorXd local(order);
    for (int j = 0; j < order; ++j) {
      const Vec2 y = a + (b - a) * (0.5 * (rule.nodes[j] + 1.0));
      local(j) = 0.5 * len * rule.weights[j] * kernel(x, y, normal);
    }
    out += local * carry;
    return;
  }
  const Vec2 mid = (a + b) * 0.5;
  const PanelSplit& split = panel_split_matrices(order);
  accumulate_row(kernel, x, a, mid, normal, order, depth + 1, out, split.left * carry);
  accumulate_row(kernel, x, mid, b, normal, order, depth + 1, out, split.right * carry);
}

template <class Kernel>
Eigen::RowVectorXd panel_row(const Kernel& kernel, Vec2 x, const PolygonMesh& mesh, int p) {
  const int order = mesh.order();
  Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(order);
  accumulate_row(kernel, x, mesh.panel_start(p), mesh.panel_end(p),
                 mesh.edge_normal(mesh.panel(p).edge), order, 0, out,
                 Eigen::MatrixXd::Identity(order, order));
  return out;
}

// Moment-based rows for targets on the same straight line as the panel.
// `s` is the target's coordinate along the edge, in the panel's arclength
// parametrization. The integrals below are taken in arclength.

// int psi(y) / (s - s_y) ds_y  (principal value when s lies in the panel)
inline Eigen::RowVectorXd cauchy_row(const PolygonMesh& mesh, int p, double s) {
  const Panel& panel = mesh.panel(p);
  const double half = 0.5 * panel.length();
  const double xref = (s - 0.5 * (panel.s0 + panel.s1)) / half;
  std::vector<double> c;
  cauchy_moments(mesh.order(), xref, c);
  Eigen::RowVectorXd moments = Eigen::Map<Eigen::RowVectorXd>(c.data(), mesh.order());
  return moments * mesh.legendre_analysis();
}

// fp int psi(y) / (s - s_y)^2 ds_y
inline Eigen::RowVectorXd hypersingular_row(const PolygonMesh& mesh, int p, double s) {
  const Panel& panel = mesh.panel(p);
  const double half = 0.5 * panel.length();
  const double xref = (s - 0.5 * (panel.s0 + panel.s1)) / half;
  std::vector<double> f;
  hypersingular_moments(mesh.order(), xref, f);
  Eigen::RowVectorXd moments = Eigen::Map<Eigen::RowVectorXd>(f.data(), mesh.order());
  return (1.0 / half) * moments * mesh.legendre_analysis();
}

// int psi(y) ln|s - s_y| ds_y
inline Eigen::RowVectorXd log_row(const PolygonMesh& mesh, int p, double s) {
  const Panel& panel = mesh.panel(p);
  const double half = 0.5 * panel.length();
  const double xref = (s - 0.5 * (panel.s0 + panel.s1)) / half;
  std::vector<double> l;
  log_moments(mesh.order(), xref, l);
  Eigen::RowVectorXd moments = Eigen::Map<Eigen::RowVectorXd>(l.data(), mesh.order());
  moments(0) += 2.0 * std::log(half);  // scale shift: ln|s-s'| = ln(half) + ln|X-xi|
  return half * moments * mesh.legendre_analysis();
}

}  // namespace panelquad

// ---------------------------------------------------------------------------
// Laplace kernels, with the fundamental solution -log|x-y| / (2 pi)
// ---------------------------------------------------------------------------

namespace kernels {

inline double single_layer(Vec2 x, Vec2 y) { return -std::log(distance(x, y)) / two_pi; }

// normal derivative at the target x
inline double flux_at_target(Vec2 x, Vec2 y, Vec2 normal_x) {
  const Vec2 d = x - y;
  return -dot(d, normal_x) / (two_pi * d.squared_norm());
}

// double layer: normal derivative of the fundamental solution at the source y
inline double double_layer(Vec2 x, Vec2 y, Vec2 normal_y) {
  const Vec2 d = x - y;
  return dot(d, normal_y) / (two_pi * d.squared_norm());
}

// mixed second derivative d_a d_b of the fundamental solution (direction a
// at the target, b at the source); with both directions normal this is the
// hypersingular kernel
inline double second_derivative(Vec2 x, Vec2 y, Vec2 dir_x, Vec2 dir_y) {
  const Vec2 d = x - y;
  const double r2 = d.squared_norm();
  return (dot(dir_x, dir_y) / r2 - 2.0 * dot(d, dir_x) * dot(d, dir_y) / (r2 * r2)) / two_pi;
}

inline double hypersingular(Vec2 x, Vec2 y, Vec2 normal_x, Vec2 normal_y) {
  return second_derivative(x, y, normal_x, normal_y);
}

inline Vec2 gradient(Vec2 x, Vec2 y) {
  const Vec2 d = x - y;
  return d * (-1.0 / (two_pi * d.squared_norm()));
}

// Directional derivatives of the kernels under simultaneous motion of the
// target, the source, and the attached directions. Used by the exact
// differentiation of the assembled system with respect to vertex positions.

inline double single_layer_d(Vec2 x, Vec2 dx, Vec2 y, Vec2 dy) {
  const Vec2 d = x - y;
  return -dot(d, dx - dy) / (two_pi * d.squared_norm());
}

inline double flux_at_target_d(Vec2 x, Vec2 dx, Vec2 y, Vec2 dy, Vec2 n, Vec2 dn) {
  const Vec2 d = x - y;
  const Vec2 dd = dx - dy;
  const double r2 = d.squared_norm();
  const double dr2 = 2.0 * dot(d, dd);
  return -((dot(dd, n) + dot(d, dn)) / r2 - dot(d, n) * dr2 / (r2 * r2)) / two_pi;
}

inline double double_layer_d(Vec2 x, Vec2 dx, Vec2 y, Vec2 dy, Vec2 ny, Vec2 dny) {
  const Vec2 d = x - y;
  const Vec2 dd = dx - dy;
  const double r2 = d.squared_norm();
  const double dr2 = 2.0 * dot(d, dd);
  return ((dot(dd, ny) + dot(d, dny)) / r2 - dot(d, ny) * dr2 / (r2 * r2)) / two_pi;
}

inline double second_derivative_d(Vec2 x, Vec2 dx, Vec2 y, Vec2 dy, Vec2 a, Vec2 da, Vec2 b,
                                  Vec2 db) {
  const Vec2 d = x - y;
  const Vec2 dd = dx - dy;
  const double r2 = d.squared_norm();
  const double dr2 = 2.0 * dot(d, dd);
  const double r4 = r2 * r2;
  return ((dot(da, b) + dot(a, db)) / r2 - dot(a, b) * dr2 / r4 -
          2.0 * ((dot(dd, a) + dot(d, da)) * dot(d, b) + dot(d, a) * (dot(dd, b) + dot(d, db))) /
              r4 +
          4.0 * dot(d, a) * dot(d, b) * dr2 / (r4 * r2)) /
         two_pi;
}

}  // namespace kernels

// Value-and-derivative panel rows, mirroring panelquad::accumulate_row. The
// subdivision fractions and interpolation matrices are constant, so the
// derivative recursion follows the value recursion with moving endpoints.
namespace panelquad {

// kernel_pair(x, dx, y, dy, normal, dnormal) -> {value, derivative}
template <class KernelPair>
void accumulate_row_d(const KernelPair& kernel, Vec2 x, Vec2 dx, Vec2 a, Vec2 da, Vec2 b, Vec2 db,
                      Vec2 normal, Vec2 dnormal, int order, int depth, Eigen::RowVectorXd& out,
                      Eigen::RowVectorXd& dout, const Eigen::MatrixXd& carry) {
  const GaussRule& rule = gauss_rule(order);
  const double len = distance(a, b);
  const Vec2 tangent = (b - a) / len;
  const double dlen = dot(tangent, db - da);
  const double d = point_segment_distance(x, a, b);
  if (depth >= max_depth || d >= near_factor * len) {
    Eigen::RowVectorXd local(order), dlocal(order);
    for (int j = 0; j < order; ++j) {
      const double frac = 0.5 * (rule.nodes[j] + 1.0);
      const Vec2 y = a + (b - a) * frac;
      const Vec2 dy = da * (1.0 - frac) + db * frac;
      const auto [val, dval] = kernel(x, dx, y, dy, normal, dnormal);
      const double w = 0.5 * len * rule.weights[j];
      local(j) = w * val;
      dlocal(j) = 0.5 * dlen * rule.weights[j] * val + w * dval;
    }
    out += local * carry;
    dout += dlocal * carry;
    return;
  }
  const Vec2 mid = (a + b) * 0.5;
  const Vec2 dmid = (da + db) * 0.5;
  const PanelSplit& split = panel_split_matrices(order);
  accumulate_row_d(kernel, x, dx, a, da, mid, dmid, normal, dnormal, order, depth + 1, out, dout,
                   split.left * carry);
  accumulate_row_d(kernel, x, dx, mid, dmid, b, db, normal, dnormal, order, depth + 1, out, dout,
                   split.right * carry);
}

template <class KernelPair>
std::pair<Eigen::RowVectorXd, Eigen::RowVectorXd> panel_row_d(const KernelPair& kernel, Vec2 x,
                                                              Vec2 dx, Vec2 a, Vec2 da, Vec2 b,
                                                              Vec2 db, Vec2 normal, Vec2 dnormal,
                                                              int order) {
  Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(order);
  Eigen::RowVectorXd dout = Eigen::RowVectorXd::Zero(order);
  accumulate_row_d(kernel, x, dx, a, da, b, db, normal, dnormal, order, 0, out, dout,
                   Eigen::MatrixXd::Identity(order, order));
  return {std::move(out), std::move(dout)};
}

}  // namespace panelquad

}  // namespace polystab
