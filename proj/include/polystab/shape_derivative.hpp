#pragma once

#include <cmath>
#include <memory>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "polystab/common.hpp"
#include "polystab/forward_solver.hpp"
#include "polystab/geometry.hpp"

namespace polystab {

// ---------------------------------------------------------------------------
// Shape derivative of the trace map under a vertex perturbation field h.
//
// The derivative potential solves an inhomogeneous transmission problem with
// jumps across the inclusion boundary,
//
//     [u'] = (1-k) (h.nu) dnu u_-,
//     dnu u'_+ - k dnu u'_- = (1-k) dtau((h.nu) dtau u),
//
// but its flux data carries vertex-concentrated distributional parts
// ((h.nu) dtau u jumps at every vertex and grows like r^(gamma-1)), which a
// panel-wise discretization of that boundary value problem cannot represent:
// dropping them produces O(1) trace errors.
//
// Two equivalent evaluations that avoid the singular data are provided.
//
// 1. Exact differentiation of the discretized forward map (the default
//    behind solve_shape_derivative and the Jacobian): node positions are
//    affine in the vertex coordinates, so dA/dt and dV/dt are assembled
//    through the same quadrature as the forward system, and the derivative
//    trace costs one back-solve on the cached factorization. This is exactly
//    consistent with finite differences of the solver at any resolution.
//
// 2. The interface pairing (ShapeDerivativeContext below),
//
//    <dLambda_f(D) h, g> = (1-k) int_dD (h.nu) [ dtau u_f dtau u_g
//                                              + k dnu u_f^- dnu u_g^- ] ds
//
//    (conductive; drop the (1-k) factor and the normal term for the
//    insulating problem), which needs only the edge fields of forward
//    solutions and recovers the trace from pairings against a trigonometric
//    basis of auxiliary currents. Its integrand grows like r^(2 gamma - 2)
//    at the vertices, so its quadrature converges more slowly than route 1;
//    it serves as an independent continuum cross-check of the same
//    derivative. Both routes reproduce, for a dilation of a concentric disk
//    inclusion, the exact derivative of the separation-of-variables trace
//    coefficient.
// ---------------------------------------------------------------------------

struct JumpData {
  Eigen::VectorXd dirichlet;  // g_D at inclusion nodes
  Eigen::VectorXd neumann;    // g_N at inclusion nodes (open edges only)
};

namespace detail {

// dtau((h.nu) dtau u) on the open edges: product rule with the exact
// per-edge slope of h.nu and spectral differentiation of dtau u per panel.
inline Eigen::VectorXd tangential_product_derivative(const PolygonMesh& mesh,
                                                     const std::vector<EdgeLinearForm>& hnu,
                                                     const Eigen::VectorXd& tangential) {
  const int order = mesh.order();
  const Eigen::MatrixXd& diff = gauss_differentiation_matrix(order);
  Eigen::VectorXd out(mesh.node_count());
  for (int p = 0; p < mesh.panel_count(); ++p) {
    const Panel& panel = mesh.panel(p);
    const EdgeLinearForm& form = hnu[panel.edge];
    const Eigen::Map<const Eigen::VectorXd> tau(tangential.data() + panel.first_node, order);
    const Eigen::VectorXd dtau = diff * tau * (2.0 / panel.length());
    for (int j = 0; j < order; ++j) {
      const int q = panel.first_node + j;
      const double s = mesh.arclength(q);
      out(q) = form.slope * tangential(q) + form.at(s) * dtau(j);
    }
  }
  return out;
}

inline Eigen::VectorXd normal_component_at_nodes(const PolygonMesh& mesh,
                                                 const std::vector<EdgeLinearForm>& hnu) {
  Eigen::VectorXd out(mesh.node_count());
  for (int q = 0; q < mesh.node_count(); ++q)
    out(q) = hnu[mesh.node_edge(q)].at(mesh.arclength(q));
  return out;
}

}  // namespace detail

// Interface data of the inhomogeneous transmission problem, evaluated at the
// panel nodes (which avoid the vertices by construction).
inline JumpData transmission_jump_data(const ForwardSolution& sol, const BoundaryField& h) {
  const TransmissionOperator& op = sol.op();
  if (op.mode().insulating)
    throw DomainParameterError("transmission jumps require a conductive inclusion");
  if (h.polygon().n() != op.inclusion_mesh().polygon().n())
    throw DimensionError("perturbation field does not match the inclusion");
  const double k = op.mode().k;
  const PolygonMesh& mesh = op.inclusion_mesh();
  const auto hnu = normal_component(mesh.polygon(), h);
  const EdgeFields fields = edge_fields(sol);

  JumpData data;
  const Eigen::VectorXd hnu_nodes = detail::normal_component_at_nodes(mesh, hnu);
  data.dirichlet = (1.0 - k) * hnu_nodes.cwiseProduct(fields.normal_inner);
  data.neumann = (1.0 - k) * detail::tangential_product_derivative(mesh, hnu, fields.tangential);
  return data;
}

// Neumann data of the insulating derivative problem on the open edges.
inline Eigen::VectorXd insulating_neumann_data(const ForwardSolution& sol,
                                               const BoundaryField& h) {
  const TransmissionOperator& op = sol.op();
  if (!op.mode().insulating)
    throw DomainParameterError("insulating jump data requires the insulating mode");
  const PolygonMesh& mesh = op.inclusion_mesh();
  const auto hnu = normal_component(mesh.polygon(), h);
  const EdgeFields fields = edge_fields(sol);
  return detail::tangential_product_derivative(mesh, hnu, fields.tangential);
}

// ---------------------------------------------------------------------------
// Trace recovery context: auxiliary solutions for a trigonometric basis of
// test currents, their edge fields, and the Gram factorization of the basis
// in the weighted trace inner product.
// ---------------------------------------------------------------------------

class ShapeDerivativeContext {
 public:
  explicit ShapeDerivativeContext(std::shared_ptr<const TransmissionOperator> op, int modes = 0)
      : op_(std::move(op)) {
    const DomainMesh& mesh = op_->domain_mesh();
    const int no = mesh.node_count();
    modes_ = modes > 0 ? modes : op_->discretization().trace_modes;
    modes_ = std::min(modes_, no / 2 - 1);
    if (modes_ < 2) throw DiscretizationError("trace recovery needs at least two modes");
    const int m2 = 2 * modes_;

    basis_at_nodes_.resize(no, m2);
    aux_tangential_.resize(op_->inclusion_count(), m2);
    aux_normal_.resize(op_->inclusion_count(), m2);

    for (int m = 1; m <= modes_; ++m) {
      for (int part = 0; part < 2; ++part) {
        const int col = 2 * (m - 1) + part;
        CurrentSpec spec;
        spec.fourier.push_back({part == 1, m, 1.0});
        const BoundaryCurrent g = make_current(spec, mesh);
        for (int i = 0; i < no; ++i) basis_at_nodes_(i, col) = g.evaluate(mesh.param(i));
        const ForwardSolution aux = solve_forward(op_, g);
        const EdgeFields fields = edge_fields(aux);
        aux_tangential_.col(col) = fields.tangential;
        aux_normal_.col(col) = fields.normal_inner;
      }
    }

    Eigen::VectorXd w(no);
    for (int i = 0; i < no; ++i) w(i) = mesh.weight(i);
    gram_.compute(basis_at_nodes_.transpose() * w.asDiagonal() * basis_at_nodes_);
  }

  const TransmissionOperator& op() const { return *op_; }
  int mode_count() const { return modes_; }

  // Trace of the derivative potential for the forward solution sol under h.
  Trace apply(const ForwardSolution& sol, const BoundaryField& h) const {
    const TransmissionOperator& op = *op_;
    if (&sol.op() != op_.get())
      throw DimensionError("forward solution belongs to a different operator");
    const PolygonMesh& mesh = op.inclusion_mesh();
    const auto hnu = normal_component(mesh.polygon(), h);
    const Eigen::VectorXd hnu_nodes = detail::normal_component_at_nodes(mesh, hnu);

    const EdgeFields fields = edge_fields(sol);
    Eigen::VectorXd weighted_tau(mesh.node_count());
    Eigen::VectorXd weighted_nu(mesh.node_count());
    const bool insulating = op.mode().insulating;
    const double k = op.mode().k;
    const double factor = insulating ? 1.0 : (1.0 - k);
    for (int q = 0; q < mesh.node_count(); ++q) {
      const double base = factor * mesh.weight(q) * hnu_nodes(q);
      weighted_tau(q) = base * fields.tangential(q);
      weighted_nu(q) = insulating ? 0.0 : base * k * fields.normal_inner(q);
    }

    Eigen::VectorXd pairings = aux_tangential_.transpose() * weighted_tau;
    if (!insulating) pairings += aux_normal_.transpose() * weighted_nu;

    const Eigen::VectorXd coeffs = gram_.solve(pairings);
    Trace trace;
    const DomainMesh& dmesh = op.domain_mesh();
    trace.params.resize(dmesh.node_count());
    trace.weights.resize(dmesh.node_count());
    for (int i = 0; i < dmesh.node_count(); ++i) {
      trace.params[i] = dmesh.param(i);
      trace.weights(i) = dmesh.weight(i);
    }
    trace.values = basis_at_nodes_ * coeffs;
    trace.mean_zero = true;
    return trace;
  }

 private:
  std::shared_ptr<const TransmissionOperator> op_;
  int modes_ = 0;
  Eigen::MatrixXd basis_at_nodes_;
  Eigen::MatrixXd aux_tangential_, aux_normal_;
  Eigen::LDLT<Eigen::MatrixXd> gram_;
};

// Derivative of the discrete trace map in the direction of a vertex
// perturbation: dA z + A dz = 0 restricted to the moved entries, then the
// trace rows are differentiated the same way.
inline Trace discrete_trace_derivative(const ForwardSolution& sol, const VertexPerturbation& d) {
  const TransmissionOperator& op = sol.op();
  if (static_cast<int>(d.displacements.size()) != op.inclusion_mesh().polygon().n())
    throw DimensionError("perturbation size does not match the inclusion");
  const auto parts = op.assembly_derivative_apply(sol.densities(), d.displacements);
  const auto dz = op.solve(-parts.system);

  Trace trace;
  const DomainMesh& mesh = op.domain_mesh();
  trace.params.resize(mesh.node_count());
  trace.weights.resize(mesh.node_count());
  for (int i = 0; i < mesh.node_count(); ++i) {
    trace.params[i] = mesh.param(i);
    trace.weights(i) = mesh.weight(i);
  }
  trace.values = op.trace_values(dz) + parts.trace;
  trace.mean_zero = true;
  return trace;
}

inline Trace solve_shape_derivative(const ForwardSolution& sol, const BoundaryField& h) {
  VertexPerturbation d;
  d.displacements.resize(h.polygon().n());
  for (int i = 0; i < h.polygon().n(); ++i) d.displacements[i] = h.at_vertex(i);
  return discrete_trace_derivative(sol, d);
}

inline Trace solve_shape_derivative(const DomainBoundary& boundary, const Polygon& polygon,
                                    double k, const CurrentSpec& spec, const BoundaryField& h,
                                    const Discretization& disc) {
  return solve_shape_derivative(solve_forward(boundary, polygon, k, spec, disc), h);
}

inline Trace solve_shape_derivative_insulating(const DomainBoundary& boundary,
                                               const Polygon& polygon, const CurrentSpec& spec,
                                               const BoundaryField& h,
                                               const Discretization& disc) {
  return solve_shape_derivative(solve_forward_insulating(boundary, polygon, spec, disc), h);
}

// ---------------------------------------------------------------------------
// Jacobian of the vertex-coordinates -> stacked traces map. Column 2i holds
// the response to a unit x-displacement of vertex i, column 2i+1 the
// y-displacement. Rows are scaled by the square roots of the trace
// quadrature weights so plain Euclidean norms realize the stacked L2 norm.
// ---------------------------------------------------------------------------

struct JacobianMatrix {
  Eigen::MatrixXd weighted;  // (currents * domain nodes) x (2 n)
  int vertex_count = 0;
  int current_count = 0;
  bool seo_checked = false;
  bool seo_ok = true;

  Eigen::VectorXd apply(const VertexPerturbation& d) const {
    if (static_cast<int>(d.displacements.size()) != vertex_count)
      throw DimensionError("perturbation size mismatch");
    Eigen::VectorXd flat(2 * vertex_count);
    for (int i = 0; i < vertex_count; ++i) {
      flat(2 * i) = d.displacements[i].x;
      flat(2 * i + 1) = d.displacements[i].y;
    }
    return weighted * flat;
  }
};

// Forward solutions for a set of currents over one shared operator.
inline std::vector<ForwardSolution> solve_forward_set(
    std::shared_ptr<const TransmissionOperator> op, const std::vector<CurrentSpec>& specs) {
  std::vector<ForwardSolution> sols;
  sols.reserve(specs.size());
  for (const auto& spec : specs)
    sols.push_back(solve_forward(op, make_current(spec, op->domain_mesh())));
  return sols;
}

inline JacobianMatrix assemble_jacobian(std::shared_ptr<const TransmissionOperator> op,
                                        const std::vector<CurrentSpec>& currents,
                                        int threads = 0) {
  if (currents.empty()) throw ConfigError("jacobian needs at least one probing current");
  const Polygon& poly = op->inclusion_mesh().polygon();
  const int n = poly.n();
  const int no = op->domain_count();

  JacobianMatrix jac;
  jac.vertex_count = n;
  jac.current_count = static_cast<int>(currents.size());
  jac.weighted.resize(static_cast<Eigen::Index>(no) * currents.size(), 2 * n);

  if (!op->mode().insulating && currents.size() == 2) {
    const auto f1 = make_current(currents[0], op->domain_mesh());
    const auto f2 = make_current(currents[1], op->domain_mesh());
    const auto seo = check_seo_condition(f1, f2, op->domain_mesh());
    jac.seo_checked = true;
    jac.seo_ok = seo.ok;  // recorded, assembly proceeds either way
  }

  const std::vector<ForwardSolution> sols = solve_forward_set(op, currents);

  Eigen::VectorXd sqrt_w(no);
  for (int i = 0; i < no; ++i) sqrt_w(i) = std::sqrt(op->domain_mesh().weight(i));

  parallel_for(static_cast<std::size_t>(2 * n), [&](std::size_t col) {
    const int vertex = static_cast<int>(col) / 2;
    const bool ycomp = (col % 2) == 1;
    VertexPerturbation d;
    d.displacements.assign(n, Vec2{0.0, 0.0});
    d.displacements[vertex] = ycomp ? Vec2{0.0, 1.0} : Vec2{1.0, 0.0};
    for (std::size_t c = 0; c < sols.size(); ++c) {
      const Trace t = discrete_trace_derivative(sols[c], d);
      jac.weighted.block(static_cast<Eigen::Index>(c) * no, col, no, 1) =
          t.values.cwiseProduct(sqrt_w);
    }
  }, threads);

  return jac;
}

inline JacobianMatrix assemble_jacobian(const DomainBoundary& boundary, const Polygon& polygon,
                                        Conductivity mode, const std::vector<CurrentSpec>& currents,
                                        const Discretization& disc, int threads = 0) {
  auto op = std::make_shared<const TransmissionOperator>(boundary, polygon, mode, disc);
  return assemble_jacobian(std::move(op), currents, threads);
}

// ---------------------------------------------------------------------------
// Injectivity margin: the smallest singular value of the weighted Jacobian,
// the numerical witness that the linearized forward map has trivial kernel.
// ---------------------------------------------------------------------------

struct InjectivityMargin {
  double sigma_min = 0.0;
  Eigen::VectorXd singular_values;  // descending
  VertexPerturbation worst_direction;
};

inline InjectivityMargin injectivity_margin(const JacobianMatrix& jac) {
  if (!jac.weighted.allFinite()) throw NumericError("jacobian contains non-finite entries");
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(jac.weighted, Eigen::ComputeThinU | Eigen::ComputeThinV);
  InjectivityMargin margin;
  margin.singular_values = svd.singularValues();
  margin.sigma_min = margin.singular_values(margin.singular_values.size() - 1);
  const Eigen::VectorXd v = svd.matrixV().col(margin.singular_values.size() - 1);
  margin.worst_direction.displacements.resize(jac.vertex_count);
  for (int i = 0; i < jac.vertex_count; ++i)
    margin.worst_direction.displacements[i] = {v(2 * i), v(2 * i + 1)};
  return margin;
}

}  // namespace polystab
