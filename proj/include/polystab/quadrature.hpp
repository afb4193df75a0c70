#pragma once

#include <array>
#include <cmath>
#include <mutex>
#include <vector>

#include <Eigen/Dense>

#include "polystab/common.hpp"

namespace polystab {

// ---------------------------------------------------------------------------
// Gauss-Legendre rules on [-1, 1]
// ---------------------------------------------------------------------------

struct GaussRule {
  std::vector<double> nodes;    // ascending in (-1, 1)
  std::vector<double> weights;  // sum = 2
};

// Legendre P_n(x) and derivative via the three-term recurrence.
inline void legendre_pair(int n, double x, double& pn, double& dpn) {
  double p0 = 1.0, p1 = x;
  if (n == 0) {
    pn = p0;
    dpn = 0.0;
    return;
  }
  for (int m = 2; m <= n; ++m) {
    const double p2 = ((2 * m - 1) * x * p1 - (m - 1) * p0) / m;
    p0 = p1;
    p1 = p2;
  }
  pn = p1;
  dpn = n * (x * p1 - p0) / (x * x - 1.0);
}

inline double legendre_p(int n, double x) {
  double p, dp;
  legendre_pair(n, x, p, dp);
  return p;
}

// Nodes by Newton iteration from the Chebyshev initial guess.
inline const GaussRule& gauss_rule(int order) {
  static std::vector<GaussRule> cache(64);
  static std::array<std::once_flag, 64> once;
  if (order < 1 || order >= static_cast<int>(cache.size()))
    throw DiscretizationError("gauss rule order out of range");
  std::call_once(once[order], [order]() {
    GaussRule r;
    r.nodes.resize(order);
    r.weights.resize(order);
    for (int i = 0; i < order; ++i) {
      double x = std::cos(pi * (i + 0.75) / (order + 0.5));
      for (int it = 0; it < 100; ++it) {
        double p, dp;
        legendre_pair(order, x, p, dp);
        const double dx = p / dp;
        x -= dx;
        if (std::fabs(dx) < 1e-15) break;
      }
      double p, dp;
      legendre_pair(order, x, p, dp);
      r.nodes[order - 1 - i] = x;
      r.weights[order - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    cache[order] = std::move(r);
  });
  return cache[order];
}

// Legendre coefficients of the degree-(p-1) interpolant through Gauss-node
// values: a_m = (2m+1)/2 sum_j w_j P_m(x_j) v_j. Exact for the interpolant
// because the p-point rule integrates degree 2p-1.
inline Eigen::MatrixXd legendre_analysis_matrix(int order) {
  const GaussRule& g = gauss_rule(order);
  Eigen::MatrixXd a(order, order);
  for (int m = 0; m < order; ++m)
    for (int j = 0; j < order; ++j)
      a(m, j) = 0.5 * (2 * m + 1) * g.weights[j] * legendre_p(m, g.nodes[j]);
  return a;
}

// Values of the Legendre basis at arbitrary points: rows = points, cols = m.
inline Eigen::MatrixXd legendre_synthesis_matrix(const std::vector<double>& pts, int order) {
  Eigen::MatrixXd s(pts.size(), order);
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (int m = 0; m < order; ++m) s(i, m) = legendre_p(m, pts[i]);
  return s;
}

// Interpolation from parent Gauss nodes to the Gauss nodes of the two half
// panels; used by the adaptive near-evaluation splitting.
struct PanelSplit {
  Eigen::MatrixXd left;   // values on [-1,0] child nodes
  Eigen::MatrixXd right;  // values on [0,1] child nodes
};

inline const PanelSplit& panel_split_matrices(int order) {
  static std::vector<PanelSplit> cache(64);
  static std::array<std::once_flag, 64> once;
  std::call_once(once[order], [order]() {
    const GaussRule& g = gauss_rule(order);
    std::vector<double> lpts(order), rpts(order);
    for (int j = 0; j < order; ++j) {
      lpts[j] = -0.5 + 0.5 * g.nodes[j];
      rpts[j] = 0.5 + 0.5 * g.nodes[j];
    }
    const Eigen::MatrixXd analysis = legendre_analysis_matrix(order);
    cache[order].left = legendre_synthesis_matrix(lpts, order) * analysis;
    cache[order].right = legendre_synthesis_matrix(rpts, order) * analysis;
  });
  return cache[order];
}

// Spectral differentiation on Gauss nodes (d/dx of the interpolant on [-1,1]),
// assembled through the Legendre coefficient space.
inline const Eigen::MatrixXd& gauss_differentiation_matrix(int order) {
  static std::vector<Eigen::MatrixXd> cache(64);
  static std::array<std::once_flag, 64> once;
  std::call_once(once[order], [order]() {
    // dP coefficients: P_m' = sum_{j=m-1, m-3, ...} (2j+1) P_j
    Eigen::MatrixXd deriv = Eigen::MatrixXd::Zero(order, order);
    for (int m = 1; m < order; ++m)
      for (int j = m - 1; j >= 0; j -= 2) deriv(j, m) = 2 * j + 1;
    const GaussRule& g = gauss_rule(order);
    cache[order] =
        legendre_synthesis_matrix(g.nodes, order) * deriv * legendre_analysis_matrix(order);
  });
  return cache[order];
}

// ---------------------------------------------------------------------------
// Singular moments of the Legendre basis on [-1, 1].
//
//   cauchy:  C_m(x) = pv int P_m(t) / (x - t) dt        (= 2 Q_m(x))
//   hyper:   F_m(x) = fp int P_m(t) / (x - t)^2 dt      (= -C_m'(x))
//   log:     L_m(x) =    int P_m(t) ln|x - t| dt
//
// All three follow from the Legendre functions of the second kind; the same
// recurrences hold on and off the cut, with the principal-value /
// finite-part reading for x inside (-1, 1).
// ---------------------------------------------------------------------------

inline void cauchy_moments(int count, double x, std::vector<double>& c) {
  c.resize(count);
  if (count == 0) return;
  const double q0 = 0.5 * std::log(std::fabs((x + 1.0) / (x - 1.0)));
  c[0] = 2.0 * q0;
  if (count == 1) return;
  c[1] = 2.0 * (x * q0 - 1.0);
  for (int m = 1; m + 1 < count; ++m)
    c[m + 1] = ((2 * m + 1) * x * c[m] - m * c[m - 1]) / (m + 1);
}

inline void hypersingular_moments(int count, double x, std::vector<double>& f) {
  std::vector<double> c;
  cauchy_moments(count + 1, x, c);
  f.resize(count);
  for (int m = 0; m < count; ++m) {
    // integrate by parts: boundary terms plus the Cauchy moments of P_m'
    double v = 1.0 / (x - 1.0) - (m % 2 == 0 ? 1.0 : -1.0) / (x + 1.0);
    for (int j = m - 1; j >= 0; j -= 2) v -= (2 * j + 1) * c[j];
    f[m] = v;
  }
}

inline void log_moments(int count, double x, std::vector<double>& l) {
  std::vector<double> c;
  cauchy_moments(count + 1, x, c);
  l.resize(count);
  const double am = std::fabs(x - 1.0), ap = std::fabs(x + 1.0);
  l[0] = (am > 0 ? (1.0 - x) * std::log(am) : 0.0) + (ap > 0 ? (1.0 + x) * std::log(ap) : 0.0) - 2.0;
  for (int m = 1; m < count; ++m) l[m] = (c[m + 1] - c[m - 1]) / (2 * m + 1);
}

// ---------------------------------------------------------------------------
// Kress quadrature for the periodic logarithmic kernel: weights R_j(t) with
//
//   int_0^{2pi} ln(4 sin^2((t - s)/2)) f(s) ds  ~=  sum_j R_j(t) f(s_j),
//
// exact for trigonometric polynomials of degree n/2 on the uniform grid
// s_j = 2 pi j / n (n even). Only the differences t_i - s_j on the grid are
// needed, so the weights reduce to a single circulant table.
// ---------------------------------------------------------------------------

inline std::vector<double> kress_log_weight_table(int n) {
  if (n < 2 || n % 2 != 0) throw DiscretizationError("Kress rule needs even node count");
  std::vector<double> r(n);
  for (int d = 0; d < n; ++d) {
    const double t = two_pi * d / n;
    double s = 0.0;
    for (int m = 1; m < n / 2; ++m) s += std::cos(m * t) / m;
    r[d] = -(4.0 * pi / n) * s - (4.0 * pi / (n * static_cast<double>(n))) * std::cos(0.5 * n * t);
  }
  return r;
}

}  // namespace polystab
