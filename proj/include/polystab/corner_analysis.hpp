#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "polystab/common.hpp"

namespace polystab {

// ---------------------------------------------------------------------------
// Corner singularity analysis for the transmission problem. At a vertex with
// interior angle alpha the potential expands into modes r^gamma y(theta)
// where the admissible exponents gamma > 0 satisfy
//
//     |sin(gamma (alpha - pi))| = lambda |sin(gamma pi)|,
//     lambda = |(k + 1) / (k - 1)| > 1.
//
// The first two exponents always lie in (1/2, 1) and (1, 3/2); all later
// ones exceed 3/2.
// ---------------------------------------------------------------------------

inline double lambda_of_k(double k) {
  if (k <= 0.0) throw DomainParameterError("conductivity must be positive (insulating case is handled separately)");
  if (k == 1.0) throw DomainParameterError("conductivity contrast vanishes at k = 1");
  return std::fabs((k + 1.0) / (k - 1.0));
}

inline double exponent_equation_residual(double gamma, double alpha, double lambda) {
  return std::fabs(std::sin(gamma * (alpha - pi))) - lambda * std::fabs(std::sin(gamma * pi));
}

struct CornerSpectrum {
  double alpha = 0.0;
  double lambda = 0.0;
  std::vector<double> exponents;  // increasing

  double residual(double gamma) const { return exponent_equation_residual(gamma, alpha, lambda); }
};

// First `count` positive exponents. Simple roots are found by sign-bracketing
// on a uniform scan refined by bisection; tangential roots, where both sides
// of the equation vanish simultaneously, only occur at integer gamma with
// gamma (alpha - pi) on the pi lattice and are inserted separately.
inline CornerSpectrum corner_exponents(double alpha, double lambda, int count,
                                       double scan_step = 1e-4) {
  if (!(alpha > 0.0 && alpha < two_pi)) throw DomainParameterError("angle must lie in (0, 2pi)");
  if (std::fabs(alpha - pi) <= 1e-9)
    throw DomainParameterError("degenerate angle alpha = pi has no corner");
  if (lambda <= 1.0) throw DomainParameterError("contrast amplitude must exceed 1");
  if (count < 1) throw DomainParameterError("need at least one exponent");

  CornerSpectrum spectrum;
  spectrum.alpha = alpha;
  spectrum.lambda = lambda;

  auto g = [&](double x) { return exponent_equation_residual(x, alpha, lambda); };

  const double lattice_tol = 1e-10;
  double hi = 2.0 + count;  // grows adaptively until enough roots are found
  while (true) {
    std::vector<double> roots;
    // tangential double roots at integer gamma
    for (int q = 1; q <= static_cast<int>(hi); ++q) {
      const double frac = std::fabs(std::remainder(q * (alpha - pi), pi));
      if (frac <= lattice_tol) roots.push_back(static_cast<double>(q));
    }
    // bracketed simple roots
    double x0 = scan_step;
    double g0 = g(x0);
    const long steps = static_cast<long>(hi / scan_step);
    for (long s = 1; s <= steps; ++s) {
      const double x1 = (s + 1) * scan_step;
      const double g1 = g(x1);
      if ((g0 < 0.0) != (g1 < 0.0)) {
        double a = x0, b = x1, fa = g0;
        for (int it = 0; it < 200 && b - a > 1e-14; ++it) {
          const double mid = 0.5 * (a + b);
          const double fm = g(mid);
          if ((fa < 0.0) == (fm < 0.0)) {
            a = mid;
            fa = fm;
          } else {
            b = mid;
          }
        }
        roots.push_back(0.5 * (a + b));
      }
      x0 = x1;
      g0 = g1;
    }
    std::sort(roots.begin(), roots.end());
    // merge bisection hits that coincide with a lattice root
    std::vector<double> unique_roots;
    for (double r : roots) {
      if (unique_roots.empty() || r - unique_roots.back() > 1e-8) unique_roots.push_back(r);
    }
    if (static_cast<int>(unique_roots.size()) >= count) {
      unique_roots.resize(count);
      spectrum.exponents = std::move(unique_roots);
      return spectrum;
    }
    hi += 2.0;
    if (hi > 200.0) throw NumericError("failed to locate the requested corner exponents");
  }
}

inline CornerSpectrum corner_exponents_for_conductivity(double alpha, double k, int count) {
  return corner_exponents(alpha, lambda_of_k(k), count);
}

// ---------------------------------------------------------------------------
// Mode matching matrices. For exponent gamma at a corner of angle alpha the
// interior mode coefficients (A, B) of y(theta) = A cos(gamma theta) +
// B sin(gamma theta) must satisfy a 2x2 homogeneous system whose matrix is
// returned here; its determinant has the closed form
//
//   det = k (1 + 2 a cos(alpha) + a^2) - (k+1)^2 a s s'
//
// with s = sin(gamma alpha), s' = sin((gamma-1) alpha).
// ---------------------------------------------------------------------------

inline Eigen::Matrix2d corner_mode_matrix(double alpha, double k, double a, double gamma) {
  const double c = std::cos(gamma * alpha);
  const double s = std::sin(gamma * alpha);
  const double cp = std::cos((gamma - 1.0) * alpha);
  const double sp = std::sin((gamma - 1.0) * alpha);
  Eigen::Matrix2d m;
  m << k * a * s - sp, -k * (a * c + cp), a * c + cp, a * s - k * sp;
  return m;
}

inline double corner_mode_det_closed_form(double alpha, double k, double a, double gamma) {
  const double s = std::sin(gamma * alpha);
  const double sp = std::sin((gamma - 1.0) * alpha);
  return k * (1.0 + 2.0 * a * std::cos(alpha) + a * a) - (k + 1.0) * (k + 1.0) * a * s * sp;
}

// ---------------------------------------------------------------------------
// The sign obstruction: the products s_j s_j' for the first two exponents
// always carry opposite signs, which prevents the two mode matrices from
// being singular simultaneously. This is the computational core of the
// injectivity of the linearized forward map.
// ---------------------------------------------------------------------------

struct SignObstruction {
  double first_product = 0.0;   // s_1 s_1'
  double second_product = 0.0;  // s_2 s_2'
  bool opposite = false;
};

inline SignObstruction sign_obstruction(double alpha, double lambda) {
  const CornerSpectrum sp = corner_exponents(alpha, lambda, 2);
  SignObstruction out;
  const double g1 = sp.exponents[0], g2 = sp.exponents[1];
  out.first_product = std::sin(g1 * alpha) * std::sin((g1 - 1.0) * alpha);
  out.second_product = std::sin(g2 * alpha) * std::sin((g2 - 1.0) * alpha);
  out.opposite = (out.first_product < 0.0) != (out.second_product < 0.0);
  return out;
}

// ---------------------------------------------------------------------------
// Least-squares fit of the leading corner modes from samples of u - u(vertex)
// taken inside the interior sector.
// ---------------------------------------------------------------------------

struct CornerSample {
  double r = 0.0;
  double theta = 0.0;
  double value = 0.0;
};

struct CornerMode {
  double gamma = 0.0;
  double a_cos = 1.0;  // normalized, a_cos^2 + b_sin^2 = 1, a_cos >= 0
  double b_sin = 0.0;
  double beta = 0.0;   // fitted amplitude, current dependent
};

struct CornerFit {
  std::vector<CornerMode> modes;
  double residual_norm = 0.0;
};

inline CornerFit fit_corner_coefficients(const std::vector<CornerSample>& samples,
                                         const CornerSpectrum& spectrum, int mode_count) {
  if (mode_count < 1 || mode_count > static_cast<int>(spectrum.exponents.size()))
    throw FitError("mode count exceeds available exponents");
  const int rows = static_cast<int>(samples.size());
  const int cols = 2 * mode_count;
  if (rows < cols) throw FitError("not enough samples for the requested mode count");

  Eigen::MatrixXd design(rows, cols);
  Eigen::VectorXd rhs(rows);
  for (int q = 0; q < rows; ++q) {
    const auto& s = samples[q];
    for (int j = 0; j < mode_count; ++j) {
      const double g = spectrum.exponents[j];
      const double rg = std::pow(s.r, g);
      design(q, 2 * j) = rg * std::cos(g * s.theta);
      design(q, 2 * j + 1) = rg * std::sin(g * s.theta);
    }
    rhs(q) = s.value;
  }

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  qr.setThreshold(1e-10);
  if (qr.rank() < cols) throw FitError("rank-deficient corner fit: samples do not separate the modes");
  const Eigen::VectorXd coef = qr.solve(rhs);

  CornerFit fit;
  fit.modes.resize(mode_count);
  for (int j = 0; j < mode_count; ++j) {
    const double pc = coef(2 * j), qs = coef(2 * j + 1);
    CornerMode& mode = fit.modes[j];
    mode.gamma = spectrum.exponents[j];
    const double amp = std::hypot(pc, qs);
    if (amp < 1e-300) {
      mode.beta = 0.0;
      mode.a_cos = 1.0;
      mode.b_sin = 0.0;
    } else {
      // sign convention: a_cos >= 0, and b_sin >= 0 when a_cos == 0
      double sign = pc != 0.0 ? (pc > 0.0 ? 1.0 : -1.0) : (qs > 0.0 ? 1.0 : -1.0);
      mode.beta = sign * amp;
      mode.a_cos = pc / mode.beta;
      mode.b_sin = qs / mode.beta;
    }
  }
  fit.residual_norm = (design * coef - rhs).norm();
  return fit;
}

}  // namespace polystab
