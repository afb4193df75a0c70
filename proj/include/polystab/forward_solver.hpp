#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "polystab/common.hpp"
#include "polystab/currents.hpp"
#include "polystab/geometry.hpp"
#include "polystab/mesh.hpp"
#include "polystab/quadrature.hpp"

namespace polystab {

// ---------------------------------------------------------------------------
// Conductivity of the inclusion: a positive contrast k != 1, or a perfect
// insulator (which gets its own exterior Neumann formulation instead of the
// k -> 0 limit, for conditioning).
// ---------------------------------------------------------------------------

struct Conductivity {
  double k = 2.0;
  bool insulating = false;

  static Conductivity conductive(double k) {
    if (k <= 0.0)
      throw DomainParameterError("conductivity must be positive; use the insulating mode for k = 0");
    if (k == 1.0) throw DomainParameterError("inclusion conductivity k = 1 is no inclusion");
    return {k, false};
  }
  static Conductivity insulator() { return {0.0, true}; }
};

// ---------------------------------------------------------------------------
// The discretized transmission operator.
//
// Conductive case: single layers on both boundaries plus a constant,
//
//     u = S_omega[phi] + S_D[psi] + c,
//
// with the linear system
//
//   rows 0..No-1   : flux condition on the outer boundary,
//                    (I/2 + K'_omega) phi + dnu S_D psi + 1 * int(phi) = f
//   rows No..No+Nd-1: lambda' psi + K'_D psi + dnu S_omega phi = 0,
//                    lambda' = (k+1) / (2(k-1)), |lambda'| > 1/2
//   last row       : weighted mean of the trace on the outer boundary = 0.
//
// Insulating case: the single-layer ansatz would put the second-kind
// coefficient at -1/2, the edge of the corner operator's essential spectrum,
// and its density then converges hopelessly slowly at the vertices. The
// exterior Neumann problem is represented instead with a double layer on the
// inclusion,
//
//     u = S_omega[phi] + D_D[mu] + c,
//
//   rows No..No+Nd-1: T mu + dnu S_omega phi + 1 * int(mu) = 0,
//
// where T is the hypersingular operator (continuous across the layer). The
// density mu = [u] behaves like r^gamma at the corners, one power smoother
// than the single-layer density, and the rank-one int(mu) term removes the
// constant kernel of T (constants change u only inside the inclusion).
//
// The rank-one term 1 * int(phi) in the outer flux rows removes the
// equilibrium-density kernel of the interior Neumann operator; without it
// the bordered system is singular whenever the outer curve has unit
// logarithmic capacity (the default unit circle). At the solution the
// regularization terms vanish to quadrature accuracy.
//
// The same factorization serves the forward problem and every auxiliary
// solve of the shape-derivative evaluation; only right-hand sides change.
// ---------------------------------------------------------------------------

class TransmissionOperator {
 public:
  TransmissionOperator(const DomainBoundary& boundary, const Polygon& polygon, Conductivity mode,
                       const Discretization& disc)
      : mode_(mode),
        disc_(disc),
        domain_(boundary, disc.domain_nodes),
        inclusion_(polygon, disc) {
    double clearance = std::numeric_limits<double>::infinity();
    for (const auto& v : polygon.vertices())
      clearance = std::min(clearance, boundary.interior_clearance(v));
    if (clearance <= 0.0)
      throw GeometryError("inclusion must lie strictly inside the domain boundary");
    assemble();
  }

  const DomainMesh& domain_mesh() const { return domain_; }
  const PolygonMesh& inclusion_mesh() const { return inclusion_; }
  const Conductivity& mode() const { return mode_; }
  const Discretization& discretization() const { return disc_; }

  int domain_count() const { return domain_.node_count(); }
  int inclusion_count() const { return inclusion_.node_count(); }
  int system_size() const { return domain_count() + inclusion_count() + 1; }

  struct Densities {
    Eigen::VectorXd outer;      // phi at domain nodes
    Eigen::VectorXd inclusion;  // single-layer psi (conductive) / double-layer mu (insulating)
    double constant = 0.0;
    double relative_residual = 0.0;
  };

  // Solve for a stacked right-hand side [rhs_omega; rhs_inclusion; rhs_mean].
  Densities solve(const Eigen::VectorXd& rhs) const {
    if (rhs.size() != system_size()) throw DimensionError("right-hand side size mismatch");
    Eigen::VectorXd z = lu_.solve(rhs);
    z += lu_.solve(rhs - matrix_ * z);  // one refinement step
    Densities d;
    d.outer = z.head(domain_count());
    d.inclusion = z.segment(domain_count(), inclusion_count());
    d.constant = z(system_size() - 1);
    const double q = rhs.norm();
    d.relative_residual = q > 0 ? (matrix_ * z - rhs).norm() / q : 0.0;
    if (!z.allFinite()) throw NumericError("singular discretized system");
    return d;
  }

  // Mean-zero trace on the outer boundary for solved densities.
  Eigen::VectorXd trace_values(const Densities& d) const {
    Eigen::VectorXd t = trace_block_outer_ * d.outer + trace_block_inclusion_ * d.inclusion;
    t.array() += d.constant;
    return t;
  }

  // dnu S_omega[phi] and K'_D psi at inclusion nodes, via the stored blocks.
  Eigen::VectorXd inclusion_flux_from_outer(const Eigen::VectorXd& phi) const {
    return block_incl_outer_ * phi;
  }
  Eigen::VectorXd inclusion_flux_self(const Eigen::VectorXd& psi) const {
    if (mode_.insulating)
      throw DomainParameterError("single-layer self flux is a conductive-representation quantity");
    Eigen::VectorXd v = block_incl_self_ * psi;
    v -= self_coefficient() * psi;  // subtract the second-kind diagonal term
    return v;
  }

  double self_coefficient() const { return (mode_.k + 1.0) / (2.0 * (mode_.k - 1.0)); }

  // --- double layer on the inclusion with density mu (for derivative data) ---

  Eigen::VectorXd double_layer_trace_at_domain(const Eigen::VectorXd& mu) const {
    return apply_from_inclusion(mu, [&](Vec2 x, Vec2 y, Vec2 ny) {
      return kernels::double_layer(x, y, ny);
    });
  }

  Eigen::VectorXd double_layer_flux_at_domain(const Eigen::VectorXd& mu) const {
    Eigen::VectorXd out(domain_count());
    parallel_for(domain_count(), [&](std::size_t i) {
      const Vec2 x = domain_.node(i);
      const Vec2 nx = domain_.normal(i);
      double acc = 0.0;
      for (int q = 0; q < inclusion_count(); ++q)
        acc += inclusion_.weight(q) *
               kernels::hypersingular(x, inclusion_.node(q), nx, inclusion_.node_normal(q)) * mu(q);
      out(i) = acc;
    });
    return out;
  }

  // Hypersingular operator: normal derivative of the inclusion double layer
  // at the inclusion nodes (continuous across the layer). Only the node's own
  // panel needs the finite-part moments; other panels, including collinear
  // neighbors, carry a regular kernel handled by adaptive subdivision. (The
  // Q-function recurrence behind the moments is unstable off the cut, so it
  // must not be used for separated collinear panels.)
  Eigen::VectorXd double_layer_flux_at_inclusion(const Eigen::VectorXd& mu) const {
    Eigen::VectorXd out(inclusion_count());
    const int order = inclusion_.order();
    parallel_for(inclusion_count(), [&](std::size_t qi) {
      const int q = static_cast<int>(qi);
      const Vec2 x = inclusion_.node(q);
      const Vec2 nx = inclusion_.node_normal(q);
      const int own_panel = inclusion_.node_panel(q);
      const double s = inclusion_.arclength(q);
      double acc = 0.0;
      for (int p = 0; p < inclusion_.panel_count(); ++p) {
        const Panel& panel = inclusion_.panel(p);
        const Eigen::Map<const Eigen::VectorXd> vals(mu.data() + panel.first_node, order);
        if (p == own_panel) {
          acc += panelquad::hypersingular_row(inclusion_, p, s).dot(vals) / two_pi;
        } else if (panel.edge == inclusion_.node_edge(q)) {
          // collinear: the cross terms vanish and 1/r^2 stays regular here
          auto kernel = [&](Vec2 xx, Vec2 y, Vec2) {
            return 1.0 / (two_pi * squared_distance(xx, y));
          };
          acc += panelquad::panel_row(kernel, x, inclusion_, p).dot(vals);
        } else {
          auto kernel = [&](Vec2 xx, Vec2 y, Vec2 ny) {
            return kernels::hypersingular(xx, y, nx, ny);
          };
          acc += panelquad::panel_row(kernel, x, inclusion_, p).dot(vals);
        }
      }
      out(q) = acc;
    });
    return out;
  }

  // Tangential derivative of the potential at the inclusion nodes, taken on
  // the side the solution lives on. Conductive representation: the node's
  // own panel carries the principal-value Cauchy integral of the single
  // layer; everything else is regular. Insulating representation: the
  // double-layer kernel's tangential derivative vanishes identically on the
  // panel's own line, and the exterior-limit jump contributes mu'/2,
  // differentiated spectrally per panel.
  Eigen::VectorXd tangential_derivative_at_inclusion(const Eigen::VectorXd& phi,
                                                     const Eigen::VectorXd& density) const {
    Eigen::VectorXd out(inclusion_count());
    const int order = inclusion_.order();
    const Eigen::MatrixXd& diff = gauss_differentiation_matrix(order);
    parallel_for(inclusion_count(), [&](std::size_t qi) {
      const int q = static_cast<int>(qi);
      const Vec2 x = inclusion_.node(q);
      const Vec2 tangent = inclusion_.node_tangent(q);
      const int own_panel = inclusion_.node_panel(q);
      const double s = inclusion_.arclength(q);
      double acc = 0.0;
      for (int j = 0; j < domain_count(); ++j)
        acc += domain_.weight(j) * dot(kernels::gradient(x, domain_.node(j)), tangent) * phi(j);
      for (int p = 0; p < inclusion_.panel_count(); ++p) {
        const Panel& panel = inclusion_.panel(p);
        const Eigen::Map<const Eigen::VectorXd> vals(density.data() + panel.first_node, order);
        if (mode_.insulating) {
          if (panel.edge == inclusion_.node_edge(q)) {
            if (p == own_panel) {
              const Eigen::VectorXd dmu = diff * vals * (2.0 / panel.length());
              acc += 0.5 * dmu(q - panel.first_node);
            }
            continue;  // collinear double-layer tangential kernel vanishes
          }
          auto kernel = [&](Vec2 xx, Vec2 y, Vec2 ny) {
            return kernels::second_derivative(xx, y, tangent, ny);
          };
          acc += panelquad::panel_row(kernel, x, inclusion_, p).dot(vals);
        } else if (p == own_panel) {
          acc += -panelquad::cauchy_row(inclusion_, p, s).dot(vals) / two_pi;
        } else {
          auto kernel = [&](Vec2 xx, Vec2 y, Vec2) {
            return dot(kernels::gradient(xx, y), tangent);
          };
          acc += panelquad::panel_row(kernel, x, inclusion_, p).dot(vals);
        }
      }
      out(q) = acc;
    });
    return out;
  }

  // Potential evaluation away from both boundaries. For the insulating mode
  // the value is meaningful outside the inclusion only.
  double evaluate(const Densities& d, Vec2 x, bool* near_boundary = nullptr) const {
    const int order = inclusion_.order();
    double acc = d.constant;
    double min_sep = std::numeric_limits<double>::infinity();
    for (int j = 0; j < domain_count(); ++j) {
      acc += domain_.weight(j) * kernels::single_layer(x, domain_.node(j)) * d.outer(j);
      min_sep = std::min(min_sep, distance(x, domain_.node(j)) / domain_.weight(j));
    }
    for (int p = 0; p < inclusion_.panel_count(); ++p) {
      const Panel& panel = inclusion_.panel(p);
      const Eigen::Map<const Eigen::VectorXd> vals(d.inclusion.data() + panel.first_node, order);
      if (mode_.insulating) {
        auto kernel = [](Vec2 xx, Vec2 y, Vec2 ny) { return kernels::double_layer(xx, y, ny); };
        acc += panelquad::panel_row(kernel, x, inclusion_, p).dot(vals);
      } else {
        auto kernel = [](Vec2 xx, Vec2 y, Vec2) { return kernels::single_layer(xx, y); };
        acc += panelquad::panel_row(kernel, x, inclusion_, p).dot(vals);
      }
    }
    if (near_boundary != nullptr) {
      const double dd = inclusion_.distance_to(x);
      const double local = inclusion_.panels()[nearest_panel(x)].length();
      *near_boundary = (dd < local) || (min_sep < 1.0);
    }
    return acc;
  }

  const Eigen::MatrixXd& matrix() const { return matrix_; }
  const Eigen::MatrixXd& trace_block_outer() const { return trace_block_outer_; }
  const Eigen::MatrixXd& trace_block_inclusion() const { return trace_block_inclusion_; }

  // ------------------------------------------------------------------
  // Exact differentiation of the discretized map with respect to vertex
  // positions. Panel topology is fixed, so every node is an affine function
  // of its edge's endpoints and every weight scales with the edge length;
  // the assembled entries are differentiated through the same quadrature
  // decisions as the assembly itself. Given solved densities z and vertex
  // velocities, returns
  //
  //   system = (dA/dt) z  (stacked like the system rows), and
  //   trace  = (dV/dt) z  at the outer nodes,
  //
  // from which the derivative of the trace follows by one back-solve.
  // ------------------------------------------------------------------

  struct AssemblyDerivative {
    Eigen::VectorXd system;
    Eigen::VectorXd trace;
  };

  AssemblyDerivative assembly_derivative_apply(const Densities& z,
                                               const std::vector<Vec2>& vertex_velocity) const {
    const Polygon& poly = inclusion_.polygon();
    const int n_vert = poly.n();
    if (static_cast<int>(vertex_velocity.size()) != n_vert)
      throw DimensionError("vertex velocity count mismatch");
    const int no = domain_count();
    const int nd = inclusion_count();
    const int order = inclusion_.order();

    // per-edge endpoint velocities and the induced frame derivatives
    std::vector<Vec2> va(n_vert), vb(n_vert), dtan(n_vert), dnorm(n_vert);
    std::vector<double> dlen(n_vert);
    std::vector<bool> moved(n_vert);
    for (int e = 0; e < n_vert; ++e) {
      va[e] = vertex_velocity[e];
      vb[e] = vertex_velocity[(e + 1) % n_vert];
      moved[e] = (va[e].squared_norm() + vb[e].squared_norm()) > 0.0;
      const double len = inclusion_.edge_length(e);
      const Vec2 tan = inclusion_.edge_tangent(e);
      dlen[e] = dot(tan, vb[e] - va[e]);
      dtan[e] = (vb[e] - va[e]) / len - tan * (dlen[e] / len);
      dnorm[e] = {dtan[e].y, -dtan[e].x};
    }
    auto node_velocity = [&](int q) {
      const int e = inclusion_.node_edge(q);
      const double frac = inclusion_.arclength(q) / inclusion_.edge_length(e);
      return va[e] * (1.0 - frac) + vb[e] * frac;
    };
    auto weight_rate = [&](int q) {
      const int e = inclusion_.node_edge(q);
      return inclusion_.weight(q) * dlen[e] / inclusion_.edge_length(e);
    };

    AssemblyDerivative out;
    out.system = Eigen::VectorXd::Zero(system_size());
    out.trace = Eigen::VectorXd::Zero(no);

    // outer rows and trace rows: nodal kernels against moved inclusion nodes
    parallel_for(no, [&](std::size_t ii) {
      const int i = static_cast<int>(ii);
      const Vec2 xi = domain_.node(i);
      const Vec2 ni = domain_.normal(i);
      double flux_acc = 0.0, trace_acc = 0.0;
      for (int q = 0; q < nd; ++q) {
        const int e = inclusion_.node_edge(q);
        if (!moved[e]) continue;
        const Vec2 yq = inclusion_.node(q);
        const Vec2 dy = node_velocity(q);
        const double w = inclusion_.weight(q);
        const double dw = weight_rate(q);
        const double zq = z.inclusion(q);
        double flux_val, flux_der, trace_val, trace_der;
        if (mode_.insulating) {
          const Vec2 nq = inclusion_.node_normal(q);
          flux_val = kernels::hypersingular(xi, yq, ni, nq);
          flux_der = kernels::second_derivative_d(xi, {0, 0}, yq, dy, ni, {0, 0}, nq, dnorm[e]);
          trace_val = kernels::double_layer(xi, yq, nq);
          trace_der = kernels::double_layer_d(xi, {0, 0}, yq, dy, nq, dnorm[e]);
        } else {
          flux_val = kernels::flux_at_target(xi, yq, ni);
          flux_der = kernels::flux_at_target_d(xi, {0, 0}, yq, dy, ni, {0, 0});
          trace_val = kernels::single_layer(xi, yq);
          trace_der = kernels::single_layer_d(xi, {0, 0}, yq, dy);
        }
        flux_acc += (dw * flux_val + w * flux_der) * zq;
        trace_acc += (dw * trace_val + w * trace_der) * zq;
      }
      out.system(i) = flux_acc;
      out.trace(i) = trace_acc;
    });

    // inclusion rows
    parallel_for(nd, [&](std::size_t qi) {
      const int q = static_cast<int>(qi);
      const int eq = inclusion_.node_edge(q);
      const Vec2 xq = inclusion_.node(q);
      const Vec2 nq = inclusion_.node_normal(q);
      const Vec2 dxq = moved[eq] ? node_velocity(q) : Vec2{0, 0};
      const Vec2 dnq = moved[eq] ? dnorm[eq] : Vec2{0, 0};
      double acc = 0.0;

      if (moved[eq]) {
        for (int j = 0; j < no; ++j)
          acc += domain_.weight(j) *
                 kernels::flux_at_target_d(xq, dxq, domain_.node(j), {0, 0}, nq, dnq) * z.outer(j);
      }

      for (int p = 0; p < inclusion_.panel_count(); ++p) {
        const Panel& panel = inclusion_.panel(p);
        const int ep = panel.edge;
        if (!moved[eq] && !moved[ep]) continue;
        const Eigen::Map<const Eigen::VectorXd> vals(z.inclusion.data() + panel.first_node,
                                                     order);
        if (mode_.insulating) {
          if (ep == eq) {
            // collinear blocks scale like 1/edge-length under any endpoint
            // motion (the reference coordinates are fixed fractions)
            const double scale = -dlen[eq] / inclusion_.edge_length(eq);
            Eigen::RowVectorXd row;
            if (p == inclusion_.node_panel(q)) {
              row = panelquad::hypersingular_row(inclusion_, p, inclusion_.arclength(q)) / two_pi;
            } else {
              auto kernel = [&](Vec2 xx, Vec2 y, Vec2) {
                return 1.0 / (two_pi * squared_distance(xx, y));
              };
              row = panelquad::panel_row(kernel, xq, inclusion_, p);
            }
            acc += scale * row.dot(vals);
          } else {
            auto kernel = [&](Vec2 x, Vec2 dx, Vec2 y, Vec2 dy, Vec2 ny, Vec2 dny) {
              return std::pair<double, double>(
                  kernels::hypersingular(x, y, nq, ny),
                  kernels::second_derivative_d(x, dx, y, dy, nq, dnq, ny, dny));
            };
            const auto [row, drow] = panelquad::panel_row_d(
                kernel, xq, dxq, inclusion_.panel_start(p), va[ep] * (1.0 - panel.s0 / inclusion_.edge_length(ep)) + vb[ep] * (panel.s0 / inclusion_.edge_length(ep)),
                inclusion_.panel_end(p), va[ep] * (1.0 - panel.s1 / inclusion_.edge_length(ep)) + vb[ep] * (panel.s1 / inclusion_.edge_length(ep)),
                inclusion_.edge_normal(ep), moved[ep] ? dnorm[ep] : Vec2{0, 0}, order);
            acc += drow.dot(vals);
          }
        } else {
          if (ep == eq) continue;  // collinear kernel vanishes identically
          auto kernel = [&](Vec2 x, Vec2 dx, Vec2 y, Vec2 dy, Vec2, Vec2) {
            return std::pair<double, double>(
                kernels::flux_at_target(x, y, nq),
                kernels::flux_at_target_d(x, dx, y, dy, nq, dnq));
          };
          const auto [row, drow] = panelquad::panel_row_d(
              kernel, xq, dxq, inclusion_.panel_start(p), va[ep] * (1.0 - panel.s0 / inclusion_.edge_length(ep)) + vb[ep] * (panel.s0 / inclusion_.edge_length(ep)),
              inclusion_.panel_end(p), va[ep] * (1.0 - panel.s1 / inclusion_.edge_length(ep)) + vb[ep] * (panel.s1 / inclusion_.edge_length(ep)),
              inclusion_.edge_normal(ep), moved[ep] ? dnorm[ep] : Vec2{0, 0}, order);
          acc += drow.dot(vals);
        }
      }

      if (mode_.insulating) {
        // rank-one int(mu) term: weights scale with the edge lengths
        for (int j = 0; j < nd; ++j) {
          if (!moved[inclusion_.node_edge(j)]) continue;
          acc += weight_rate(j) * z.inclusion(j);
        }
      }
      out.system(no + q) = acc;
    });

    // mean-trace row derivative
    double mean_acc = 0.0;
    for (int i = 0; i < no; ++i) mean_acc += domain_.weight(i) * out.trace(i);
    out.system(system_size() - 1) = mean_acc;
    return out;
  }
  int nearest_panel(Vec2 x) const {
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (int p = 0; p < inclusion_.panel_count(); ++p) {
      const double d = point_segment_distance(x, inclusion_.panel_start(p), inclusion_.panel_end(p));
      if (d < bd) {
        bd = d;
        best = p;
      }
    }
    return best;
  }

  template <class Kernel>
  Eigen::VectorXd apply_from_inclusion(const Eigen::VectorXd& density, const Kernel& kernel) const {
    Eigen::VectorXd out(domain_count());
    parallel_for(domain_count(), [&](std::size_t i) {
      double acc = 0.0;
      for (int q = 0; q < inclusion_count(); ++q)
        acc += inclusion_.weight(q) * kernel(domain_.node(i), inclusion_.node(q),
                                             inclusion_.node_normal(q)) * density(q);
      out(i) = acc;
    });
    return out;
  }

  void assemble() {
    const int no = domain_count();
    const int nd = inclusion_count();
    const int n = system_size();
    const int order = inclusion_.order();
    matrix_ = Eigen::MatrixXd::Zero(n, n);
    trace_block_outer_ = Eigen::MatrixXd::Zero(no, no);
    trace_block_inclusion_ = Eigen::MatrixXd::Zero(no, nd);

    // outer-boundary flux rows
    parallel_for(no, [&](std::size_t ii) {
      const int i = static_cast<int>(ii);
      const Vec2 xi = domain_.node(i);
      const Vec2 ni = domain_.normal(i);
      for (int j = 0; j < no; ++j) {
        double val;
        if (j == i) {
          val = domain_.weight(i) * dot(domain_.second_derivative(i), ni) /
                (4.0 * pi * domain_.speed(i) * domain_.speed(i));
        } else {
          val = domain_.weight(j) * kernels::flux_at_target(xi, domain_.node(j), ni);
        }
        matrix_(i, j) = val + domain_.weight(j);  // rank-one mean(phi) regularization
      }
      matrix_(i, i) += 0.5;
      for (int q = 0; q < nd; ++q) {
        const Vec2 yq = inclusion_.node(q);
        const Vec2 nq = inclusion_.node_normal(q);
        matrix_(i, no + q) =
            inclusion_.weight(q) * (mode_.insulating
                                        ? kernels::hypersingular(xi, yq, ni, nq)
                                        : kernels::flux_at_target(xi, yq, ni));
      }

      // trace rows: Kress log quadrature on the smooth boundary, smooth
      // kernel against the inclusion layer
      for (int j = 0; j < no; ++j) {
        double rho;
        if (i == j) {
          rho = domain_.speed(i);
        } else {
          const double dt = domain_.param(i) - domain_.param(j);
          rho = distance(xi, domain_.node(j)) / (2.0 * std::fabs(std::sin(0.5 * dt)));
        }
        trace_block_outer_(i, j) = -domain_.kress(i - j) * domain_.speed(j) / (4.0 * pi) -
                                   std::log(rho) * domain_.speed(j) / no;
      }
      for (int q = 0; q < nd; ++q) {
        const Vec2 yq = inclusion_.node(q);
        trace_block_inclusion_(i, q) =
            inclusion_.weight(q) *
            (mode_.insulating ? kernels::double_layer(xi, yq, inclusion_.node_normal(q))
                              : kernels::single_layer(xi, yq));
      }
    });

    // inclusion rows: transmission condition (conductive) or the
    // hypersingular Neumann condition (insulating)
    parallel_for(nd, [&](std::size_t qi) {
      const int q = static_cast<int>(qi);
      const Vec2 xq = inclusion_.node(q);
      const Vec2 nq = inclusion_.node_normal(q);
      const int edge = inclusion_.node_edge(q);
      for (int j = 0; j < no; ++j)
        matrix_(no + q, j) = domain_.weight(j) * kernels::flux_at_target(xq, domain_.node(j), nq);
      if (mode_.insulating) {
        const int own_panel = inclusion_.node_panel(q);
        const double s = inclusion_.arclength(q);
        for (int p = 0; p < inclusion_.panel_count(); ++p) {
          const Panel& panel = inclusion_.panel(p);
          Eigen::RowVectorXd row;
          if (p == own_panel) {
            row = panelquad::hypersingular_row(inclusion_, p, s) / two_pi;
          } else if (panel.edge == edge) {
            auto kernel = [&](Vec2 xx, Vec2 y, Vec2) {
              return 1.0 / (two_pi * squared_distance(xx, y));
            };
            row = panelquad::panel_row(kernel, xq, inclusion_, p);
          } else {
            auto kernel = [&](Vec2 xx, Vec2 y, Vec2 ny) {
              return kernels::hypersingular(xx, y, nq, ny);
            };
            row = panelquad::panel_row(kernel, xq, inclusion_, p);
          }
          for (int j = 0; j < order; ++j) matrix_(no + q, no + panel.first_node + j) += row(j);
        }
        // rank-one int(mu) regularization removes the constant kernel of T
        for (int j = 0; j < nd; ++j) matrix_(no + q, no + j) += inclusion_.weight(j);
      } else {
        matrix_(no + q, no + q) += self_coefficient();
        for (int p = 0; p < inclusion_.panel_count(); ++p) {
          const Panel& panel = inclusion_.panel(p);
          if (panel.edge == edge) continue;  // flat-panel self-kernel vanishes
          auto kernel = [&](Vec2 xx, Vec2 y, Vec2) { return kernels::flux_at_target(xx, y, nq); };
          const Eigen::RowVectorXd row = panelquad::panel_row(kernel, xq, inclusion_, p);
          for (int j = 0; j < order; ++j) matrix_(no + q, no + panel.first_node + j) += row(j);
        }
      }
    });

    // mean-trace row and the constant column
    for (int j = 0; j < no; ++j) {
      double acc = 0.0;
      for (int i = 0; i < no; ++i) acc += domain_.weight(i) * trace_block_outer_(i, j);
      matrix_(n - 1, j) = acc;
    }
    for (int q = 0; q < nd; ++q) {
      double acc = 0.0;
      for (int i = 0; i < no; ++i) acc += domain_.weight(i) * trace_block_inclusion_(i, q);
      matrix_(n - 1, no + q) = acc;
    }
    matrix_(n - 1, n - 1) = domain_.boundary_length();

    block_incl_outer_ = matrix_.block(no, 0, nd, no);
    block_incl_self_ = matrix_.block(no, no, nd, nd);
    lu_.compute(matrix_);
  }

  Conductivity mode_;
  Discretization disc_;
  DomainMesh domain_;
  PolygonMesh inclusion_;
  Eigen::MatrixXd matrix_;
  Eigen::MatrixXd trace_block_outer_, trace_block_inclusion_;
  Eigen::MatrixXd block_incl_outer_, block_incl_self_;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu_;
};

// ---------------------------------------------------------------------------
// Boundary trace with its quadrature weights
// ---------------------------------------------------------------------------

struct Trace {
  std::vector<double> params;   // boundary parameters of the nodes
  Eigen::VectorXd values;
  Eigen::VectorXd weights;
  bool mean_zero = false;

  double norm() const { return std::sqrt(values.dot(weights.asDiagonal() * values)); }

  double weighted_mean() const {
    double mass = 0.0, total = 0.0;
    for (int i = 0; i < values.size(); ++i) {
      mass += weights(i) * values(i);
      total += weights(i);
    }
    return mass / total;
  }
};

inline double trace_distance(const Trace& a, const Trace& b) {
  if (a.values.size() != b.values.size())
    throw DimensionError("traces live on different node sets");
  for (std::size_t i = 0; i < a.params.size(); ++i)
    if (a.params[i] != b.params[i]) throw DimensionError("traces live on different node sets");
  const Eigen::VectorXd diff = a.values - b.values;
  return std::sqrt(diff.dot(a.weights.asDiagonal() * diff));
}

// ---------------------------------------------------------------------------
// Forward solution handle
// ---------------------------------------------------------------------------

class ForwardSolution {
 public:
  ForwardSolution(std::shared_ptr<const TransmissionOperator> op, BoundaryCurrent current,
                  TransmissionOperator::Densities densities)
      : op_(std::move(op)), current_(std::move(current)), densities_(std::move(densities)) {
    trace_.params.resize(op_->domain_count());
    trace_.weights.resize(op_->domain_count());
    for (int i = 0; i < op_->domain_count(); ++i) {
      trace_.params[i] = op_->domain_mesh().param(i);
      trace_.weights(i) = op_->domain_mesh().weight(i);
    }
    trace_.values = op_->trace_values(densities_);
    trace_.mean_zero = true;
  }

  const TransmissionOperator& op() const { return *op_; }
  std::shared_ptr<const TransmissionOperator> op_handle() const { return op_; }
  const BoundaryCurrent& current() const { return current_; }
  const TransmissionOperator::Densities& densities() const { return densities_; }
  const Trace& trace() const { return trace_; }

  double evaluate_interior(Vec2 x, bool* near_boundary = nullptr) const {
    return op_->evaluate(densities_, x, near_boundary);
  }

 private:
  std::shared_ptr<const TransmissionOperator> op_;
  BoundaryCurrent current_;
  TransmissionOperator::Densities densities_;
  Trace trace_;
};

inline Eigen::VectorXd current_rhs(const TransmissionOperator& op, const BoundaryCurrent& f) {
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(op.system_size());
  for (int i = 0; i < op.domain_count(); ++i) rhs(i) = f.evaluate(op.domain_mesh().param(i));
  return rhs;
}

inline ForwardSolution solve_forward(std::shared_ptr<const TransmissionOperator> op,
                                     const BoundaryCurrent& f) {
  auto densities = op->solve(current_rhs(*op, f));
  return ForwardSolution(std::move(op), f, std::move(densities));
}

inline ForwardSolution solve_forward(const DomainBoundary& boundary, const Polygon& polygon,
                                     double k, const CurrentSpec& spec,
                                     const Discretization& disc) {
  auto op = std::make_shared<const TransmissionOperator>(boundary, polygon,
                                                         Conductivity::conductive(k), disc);
  return solve_forward(op, make_current(spec, op->domain_mesh()));
}

inline ForwardSolution solve_forward_insulating(const DomainBoundary& boundary,
                                                const Polygon& polygon, const CurrentSpec& spec,
                                                const Discretization& disc) {
  auto op = std::make_shared<const TransmissionOperator>(boundary, polygon,
                                                         Conductivity::insulator(), disc);
  return solve_forward(op, make_current(spec, op->domain_mesh()));
}

inline const Trace& trace_of(const ForwardSolution& sol) { return sol.trace(); }

// ---------------------------------------------------------------------------
// Edge data on the inclusion boundary. The interior normal derivative
// follows from the jump relations combined with the solved transmission
// row; the tangential derivative is continuous across the layer and comes
// from the principal-value evaluation.
// ---------------------------------------------------------------------------

struct EdgeFields {
  Eigen::VectorXd tangential;    // du/dtau at the inclusion nodes
  Eigen::VectorXd normal_inner;  // du/dnu from inside (conductive case)
  Eigen::VectorXd normal_outer;  // du/dnu from outside
};

inline EdgeFields edge_fields(const ForwardSolution& sol) {
  const TransmissionOperator& op = sol.op();
  EdgeFields fields;
  fields.tangential = op.tangential_derivative_at_inclusion(sol.densities().outer,
                                                            sol.densities().inclusion);
  const Eigen::VectorXd& psi = sol.densities().inclusion;
  if (op.mode().insulating) {
    fields.normal_outer = Eigen::VectorXd::Zero(psi.size());
    fields.normal_inner = Eigen::VectorXd::Zero(psi.size());
  } else {
    const double k = op.mode().k;
    fields.normal_inner = -psi / (k - 1.0);
    fields.normal_outer = k * fields.normal_inner;
  }
  return fields;
}

// Normal flux on the inclusion reconstructed by direct quadrature of the
// layer representation (diagnostic; independent of the identity used above).
// Conductive: interior limit of the single-layer field. Insulating:
// exterior flux of the double-layer field, which the solve drives to zero.
inline Eigen::VectorXd reconstructed_inclusion_flux(const ForwardSolution& sol) {
  const TransmissionOperator& op = sol.op();
  const Eigen::VectorXd& density = sol.densities().inclusion;
  if (op.mode().insulating) {
    return op.inclusion_flux_from_outer(sol.densities().outer) +
           op.double_layer_flux_at_inclusion(density);
  }
  return op.inclusion_flux_from_outer(sol.densities().outer) +
         op.inclusion_flux_self(density) + 0.5 * density;
}

}  // namespace polystab
