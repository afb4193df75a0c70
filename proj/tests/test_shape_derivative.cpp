#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <memory>

#include "polystab/shape_derivative.hpp"
#include "test_support.hpp"

using namespace polystab;
using namespace testsupport;

namespace {

const DomainBoundary disk = DomainBoundary::circle(1.0);

VertexPerturbation random_direction(int n, std::uint64_t seed) {
  Rng rng(seed);
  VertexPerturbation d;
  d.displacements.resize(n);
  for (auto& v : d.displacements) v = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
  const double nn = d.norm();
  for (auto& v : d.displacements) v = v / nn;
  return d;
}

Eigen::VectorXd fd_column(const DomainBoundary& boundary, const Polygon& poly, Conductivity mode,
                          const std::vector<CurrentSpec>& currents, const Discretization& disc,
                          const VertexPerturbation& dir, double eps) {
  std::vector<Vec2> plus = poly.vertices(), minus = poly.vertices();
  for (int i = 0; i < poly.n(); ++i) {
    plus[i] += dir.displacements[i] * eps;
    minus[i] -= dir.displacements[i] * eps;
  }
  auto opp = std::make_shared<const TransmissionOperator>(boundary, Polygon(plus), mode, disc);
  auto opm = std::make_shared<const TransmissionOperator>(boundary, Polygon(minus), mode, disc);
  Eigen::VectorXd out(static_cast<Eigen::Index>(opp->domain_count()) * currents.size());
  for (std::size_t c = 0; c < currents.size(); ++c) {
    const auto tp = solve_forward(opp, make_current(currents[c], opp->domain_mesh())).trace();
    const auto tm = solve_forward(opm, make_current(currents[c], opm->domain_mesh())).trace();
    for (int i = 0; i < tp.values.size(); ++i)
      out(static_cast<Eigen::Index>(c) * tp.values.size() + i) =
          std::sqrt(tp.weights(i)) * (tp.values(i) - tm.values(i)) / (2.0 * eps);
  }
  return out;
}

}  // namespace

TEST_CASE("jump data examples") {
  const Polygon square = centered_square(0.45);
  Discretization disc;
  const auto sol = solve_forward(disk, square, 2.0, parse_current_spec("cos:1"), disc);

  // zero perturbation gives zero jumps
  VertexPerturbation zero{std::vector<Vec2>(4, Vec2{0, 0})};
  const JumpData none = transmission_jump_data(sol, interpolate_field(square, zero));
  REQUIRE(none.dirichlet.norm() == 0.0);
  REQUIRE(none.neumann.norm() == 0.0);

  // tangential motion of one edge: both jumps vanish on that edge
  // (edge 0 of the square runs in the -x direction)
  VertexPerturbation slide{{{-1, 0}, {-1, 0}, {0, 0}, {0, 0}}};
  const JumpData tangential = transmission_jump_data(sol, interpolate_field(square, slide));
  const PolygonMesh& mesh = sol.op().inclusion_mesh();
  for (int q = 0; q < mesh.node_count(); ++q) {
    if (mesh.node_edge(q) != 0) continue;
    REQUIRE(std::fabs(tangential.dirichlet(q)) < 1e-14);
    REQUIRE(std::fabs(tangential.neumann(q)) < 1e-14);
  }

  // Dirichlet jump equals (1 - k)(h.nu) dnu u^- pointwise
  const VertexPerturbation dir = random_direction(4, 3);
  const BoundaryField h = interpolate_field(square, dir);
  const JumpData jumps = transmission_jump_data(sol, h);
  const EdgeFields fields = edge_fields(sol);
  const auto hnu = normal_component(square, h);
  for (int q = 0; q < mesh.node_count(); q += 17) {
    const double expected = (1.0 - 2.0) * hnu[mesh.node_edge(q)].at(mesh.arclength(q)) *
                            fields.normal_inner(q);
    REQUIRE(jumps.dirichlet(q) == Catch::Approx(expected).margin(1e-13));
  }

  // mode mismatches are rejected
  const auto ins = solve_forward_insulating(disk, square, parse_current_spec("cos:1"), disc);
  REQUIRE_THROWS_AS(transmission_jump_data(ins, h), DomainParameterError);
  REQUIRE_THROWS_AS(insulating_neumann_data(sol, h), DomainParameterError);
}

TEST_CASE("derivative trace is linear in the perturbation") {
  const Polygon tri = sample_admissible_polygon({3, 0.1}, disk, 42);
  Discretization disc;
  const auto sol = solve_forward(disk, tri, 2.0, parse_current_spec("cos:1"), disc);

  const VertexPerturbation d1 = random_direction(3, 5);
  const VertexPerturbation d2 = random_direction(3, 6);
  VertexPerturbation sum{std::vector<Vec2>(3)};
  for (int i = 0; i < 3; ++i)
    sum.displacements[i] = d1.displacements[i] + 0.7 * d2.displacements[i];

  const Trace t1 = discrete_trace_derivative(sol, d1);
  const Trace t2 = discrete_trace_derivative(sol, d2);
  const Trace ts = discrete_trace_derivative(sol, sum);
  REQUIRE((ts.values - t1.values - 0.7 * t2.values).norm() < 1e-11 * ts.values.norm());

  VertexPerturbation zero{std::vector<Vec2>(3, Vec2{0, 0})};
  REQUIRE(discrete_trace_derivative(sol, zero).values.norm() == 0.0);
}

TEST_CASE("dilation of the polygonized disk matches the analytic derivative") {
  const double k = 2.0, rho = 0.5;
  const double mu = (1.0 - k) / (1.0 + k);
  const auto gon = regular_polygon(128, rho);
  Discretization disc;
  disc.panels_per_edge = 1;
  disc.domain_nodes = 128;
  const auto sol = solve_forward(disk, gon, k, parse_current_spec("cos:1"), disc);
  VertexPerturbation d;
  d.displacements.resize(gon.n());
  for (int i = 0; i < gon.n(); ++i) d.displacements[i] = normalized(gon.vertex(i));
  const Trace dt = solve_shape_derivative(sol, interpolate_field(gon, d));
  const double coeff_rate = 4.0 * mu * rho / std::pow(1.0 - mu * rho * rho, 2);
  REQUIRE(trace_vs_harmonic(dt, coeff_rate) < 5e-3);

  // insulating dilation against d/drho of (1 + rho^2)/(1 - rho^2)
  const auto soli = solve_forward_insulating(disk, gon, parse_current_spec("cos:1"), disc);
  const Trace dti = solve_shape_derivative(soli, interpolate_field(gon, d));
  const double rate_ins = 4.0 * rho / std::pow(1.0 - rho * rho, 2);
  REQUIRE(trace_vs_harmonic(dti, rate_ins) < 5e-3);
}

TEST_CASE("Taylor remainder of the trace map decays quadratically") {
  Discretization disc;
  for (auto mode : {Conductivity::conductive(2.0), Conductivity::insulator()}) {
    const Polygon tri = sample_admissible_polygon({3, 0.1}, disk, 21);
    auto op = std::make_shared<const TransmissionOperator>(disk, tri, mode, disc);
    const auto sol = solve_forward(op, make_current(parse_current_spec("cos:1"), op->domain_mesh()));
    const VertexPerturbation dir = random_direction(3, 17);
    const Trace dtrace = discrete_trace_derivative(sol, dir);

    std::vector<double> hs = {1e-2, 3.16e-3, 1e-3, 3.16e-4, 1e-4};
    std::vector<double> rems;
    for (double hmag : hs) {
      std::vector<Vec2> moved = tri.vertices();
      for (int i = 0; i < 3; ++i) moved[i] += dir.displacements[i] * hmag;
      auto opp = std::make_shared<const TransmissionOperator>(disk, Polygon(moved), mode, disc);
      const auto solp =
          solve_forward(opp, make_current(parse_current_spec("cos:1"), opp->domain_mesh()));
      double rem = 0.0;
      for (int i = 0; i < dtrace.values.size(); ++i)
        rem += dtrace.weights(i) * std::pow(solp.trace().values(i) - sol.trace().values(i) -
                                                hmag * dtrace.values(i),
                                            2);
      rems.push_back(std::sqrt(rem));
    }
    REQUIRE(loglog_slope(hs, rems) == Catch::Approx(2.0).margin(0.1));
  }
}

TEST_CASE("jacobian columns agree with applying the derivative to unit perturbations") {
  const Polygon tri = sample_admissible_polygon({3, 0.1}, disk, 42);
  Discretization disc;
  std::vector<CurrentSpec> currents = {parse_current_spec("cos:1"), parse_current_spec("sin:1")};
  auto op = std::make_shared<const TransmissionOperator>(disk, tri,
                                                         Conductivity::conductive(2.0), disc);
  const JacobianMatrix jac = assemble_jacobian(op, currents);
  REQUIRE(jac.vertex_count == 3);
  REQUIRE(jac.current_count == 2);
  REQUIRE(jac.seo_checked);
  REQUIRE(jac.seo_ok);

  const VertexPerturbation d = random_direction(3, 9);
  const Eigen::VectorXd jd = jac.apply(d);
  // same thing assembled directly
  const auto sols = solve_forward_set(op, currents);
  Eigen::VectorXd direct(jd.size());
  const int no = op->domain_count();
  for (int c = 0; c < 2; ++c) {
    const Trace t = discrete_trace_derivative(sols[c], d);
    for (int i = 0; i < no; ++i) direct(c * no + i) = std::sqrt(t.weights(i)) * t.values(i);
  }
  REQUIRE((jd - direct).norm() < 1e-10 * direct.norm());
}

TEST_CASE("jacobian matches central finite differences of the forward map") {
  Discretization disc;
  const Polygon tri = sample_admissible_polygon({3, 0.1}, disk, 42);
  for (auto mode : {Conductivity::conductive(2.0), Conductivity::insulator()}) {
    std::vector<CurrentSpec> currents;
    currents.push_back(parse_current_spec("cos:1"));
    if (!mode.insulating) currents.push_back(parse_current_spec("sin:1"));
    auto op = std::make_shared<const TransmissionOperator>(disk, tri, mode, disc);
    const JacobianMatrix jac = assemble_jacobian(op, currents);
    for (int col : {0, 3, 5}) {
      VertexPerturbation e{std::vector<Vec2>(3, Vec2{0, 0})};
      e.displacements[col / 2] = col % 2 ? Vec2{0, 1} : Vec2{1, 0};
      const Eigen::VectorXd fd = fd_column(disk, tri, mode, currents, disc, e, 1e-4);
      REQUIRE((jac.weighted.col(col) - fd).norm() <= 1e-3 * fd.norm());
    }
  }
}

TEST_CASE("interface pairing cross-checks the discrete derivative") {
  // independent continuum route: pair the derivative against probe currents
  // through the interface integral of the edge fields
  Discretization disc;
  const Polygon tri = sample_admissible_polygon({3, 0.1}, disk, 42);
  const VertexPerturbation dir = random_direction(3, 31);

  auto op = std::make_shared<const TransmissionOperator>(disk, tri,
                                                         Conductivity::conductive(2.0), disc);
  const auto sol = solve_forward(op, make_current(parse_current_spec("cos:1"), op->domain_mesh()));
  const ShapeDerivativeContext ctx(op, 24);
  const Trace adjoint = ctx.apply(sol, interpolate_field(tri, dir));
  const Trace discrete = discrete_trace_derivative(sol, dir);
  REQUIRE(trace_distance(adjoint, discrete) < 2e-3 * discrete.norm());

  // the insulating interface integrand is closer to non-integrable at the
  // corners, so its quadrature converges more slowly; refine and loosen
  Discretization fine = disc;
  fine.panels_per_edge = 32;
  fine.grading_exponent = 4.0;
  fine.panel_order = 10;
  auto opi = std::make_shared<const TransmissionOperator>(disk, tri, Conductivity::insulator(),
                                                          fine);
  const auto soli =
      solve_forward(opi, make_current(parse_current_spec("cos:1"), opi->domain_mesh()));
  const ShapeDerivativeContext ctxi(opi, 24);
  const Trace adjointi = ctxi.apply(soli, interpolate_field(tri, dir));
  const Trace discretei = discrete_trace_derivative(soli, dir);
  // the r^(2 gamma - 2) interface integrand converges slowly for the
  // insulating exponents; this bound still rejects any sign or factor slip
  REQUIRE(trace_distance(adjointi, discretei) < 0.2 * discretei.norm());
}

TEST_CASE("injectivity margin: positive for admissible setups, zero for duplicated columns") {
  Discretization disc;
  const Polygon tri = sample_admissible_polygon({3, 0.1}, disk, 42);
  std::vector<CurrentSpec> currents = {parse_current_spec("cos:1"), parse_current_spec("sin:1")};
  const JacobianMatrix jac =
      assemble_jacobian(disk, tri, Conductivity::conductive(2.0), currents, disc);
  const InjectivityMargin margin = injectivity_margin(jac);
  REQUIRE(margin.sigma_min > 0.0);
  REQUIRE(margin.singular_values.size() == 6);
  REQUIRE(static_cast<int>(margin.worst_direction.displacements.size()) == 3);

  // duplicated column: rank deficiency detected
  JacobianMatrix degenerate = jac;
  degenerate.weighted.col(1) = degenerate.weighted.col(0);
  REQUIRE(injectivity_margin(degenerate).sigma_min < 1e-12);

  // insulating square with a single current
  const JacobianMatrix jaci = assemble_jacobian(disk, centered_square(0.45),
                                                Conductivity::insulator(),
                                                {parse_current_spec("cos:1")}, disc);
  REQUIRE(injectivity_margin(jaci).sigma_min > 0.0);
}

TEST_CASE("seo failure is recorded without aborting assembly") {
  Discretization disc;
  const Polygon tri = sample_admissible_polygon({3, 0.1}, disk, 42);
  std::vector<CurrentSpec> bad = {parse_current_spec("cos:1"), parse_current_spec("cos:2")};
  const JacobianMatrix jac = assemble_jacobian(disk, tri, Conductivity::conductive(2.0), bad, disc);
  REQUIRE(jac.seo_checked);
  REQUIRE_FALSE(jac.seo_ok);
  REQUIRE(jac.weighted.allFinite());
}

TEST_CASE("derivative map is continuous in the vertex coordinates") {
  Discretization disc;
  const Polygon tri = sample_admissible_polygon({3, 0.1}, disk, 42);
  std::vector<CurrentSpec> currents = {parse_current_spec("cos:1"), parse_current_spec("sin:1")};
  const JacobianMatrix base =
      assemble_jacobian(disk, tri, Conductivity::conductive(2.0), currents, disc);
  const VertexPerturbation dir = random_direction(3, 77);
  double prev = std::numeric_limits<double>::infinity();
  for (double t : {4e-2, 2e-2, 1e-2, 5e-3}) {
    std::vector<Vec2> moved = tri.vertices();
    for (int i = 0; i < 3; ++i) moved[i] += dir.displacements[i] * t;
    const JacobianMatrix shifted =
        assemble_jacobian(disk, Polygon(moved), Conductivity::conductive(2.0), currents, disc);
    const double diff = (shifted.weighted - base.weighted).norm() / base.weighted.norm();
    REQUIRE(diff < prev);
    prev = diff;
  }
  REQUIRE(prev < 5e-2);
}
