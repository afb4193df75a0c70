#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "polystab/common.hpp"
#include "polystab/forward_solver.hpp"
#include "polystab/geometry.hpp"
#include "polystab/shape_derivative.hpp"

namespace polystab {

// ---------------------------------------------------------------------------
// Misfit between computed and measured traces
// ---------------------------------------------------------------------------

// Stacked weight-scaled residual; its Euclidean norm is the stacked L2 norm.
inline Eigen::VectorXd residual_vector(const std::vector<ForwardSolution>& sols,
                                       const std::vector<Trace>& measured) {
  if (sols.size() != measured.size())
    throw DimensionError("measured trace count does not match current count");
  const int no = static_cast<int>(sols.front().trace().values.size());
  Eigen::VectorXd r(static_cast<Eigen::Index>(no) * sols.size());
  for (std::size_t c = 0; c < sols.size(); ++c) {
    const Trace& t = sols[c].trace();
    const Trace& m = measured[c];
    if (m.values.size() != t.values.size())
      throw DimensionError("measured trace lives on a different node set");
    for (std::size_t i = 0; i < t.params.size(); ++i)
      if (t.params[i] != m.params[i])
        throw DimensionError("measured trace lives on a different node set");
    for (int i = 0; i < no; ++i)
      r(static_cast<Eigen::Index>(c) * no + i) =
          std::sqrt(t.weights(i)) * (t.values(i) - m.values(i));
  }
  return r;
}

struct ResidualReport {
  Eigen::VectorXd stacked;
  double norm = 0.0;
};

inline ResidualReport residual(const DomainBoundary& boundary, const Polygon& polygon,
                               Conductivity mode, const std::vector<CurrentSpec>& currents,
                               const std::vector<Trace>& measured, const Discretization& disc) {
  auto op = std::make_shared<const TransmissionOperator>(boundary, polygon, mode, disc);
  const auto sols = solve_forward_set(op, currents);
  ResidualReport report;
  report.stacked = residual_vector(sols, measured);
  report.norm = report.stacked.norm();
  return report;
}

// ---------------------------------------------------------------------------
// Synthetic measurements and the additive noise model
// ---------------------------------------------------------------------------

// Independent Gaussian noise per node, scaled so that the weighted L2 norm of
// the perturbation equals `relative_level` times the trace norm. The noise
// direction depends only on the seed, so different levels are comparable.
inline Trace add_noise(const Trace& clean, double relative_level, std::uint64_t seed) {
  if (relative_level < 0.0) throw ConfigError("noise level must be nonnegative");
  Trace noisy = clean;
  if (relative_level == 0.0) return noisy;
  Rng rng(seed);
  Eigen::VectorXd g(clean.values.size());
  for (int i = 0; i < g.size(); ++i) g(i) = rng.normal();
  const double gnorm = std::sqrt(g.dot(clean.weights.asDiagonal() * g));
  if (gnorm == 0.0) return noisy;
  noisy.values += (relative_level * clean.norm() / gnorm) * g;
  noisy.mean_zero = false;
  return noisy;
}

inline std::vector<Trace> synthetic_measurements(const DomainBoundary& boundary,
                                                 const Polygon& truth, Conductivity mode,
                                                 const std::vector<CurrentSpec>& currents,
                                                 const Discretization& disc,
                                                 double noise_level = 0.0,
                                                 std::uint64_t noise_seed = 0) {
  auto op = std::make_shared<const TransmissionOperator>(boundary, truth, mode, disc);
  std::vector<Trace> traces;
  for (std::size_t c = 0; c < currents.size(); ++c) {
    const auto sol = solve_forward(op, make_current(currents[c], op->domain_mesh()));
    traces.push_back(noise_level > 0.0
                         ? add_noise(sol.trace(), noise_level, noise_seed + 977 * c)
                         : sol.trace());
  }
  return traces;
}

// ---------------------------------------------------------------------------
// Damped Gauss-Newton reconstruction of the vertex coordinates
// ---------------------------------------------------------------------------

struct ReconstructionConfig {
  int max_iterations = 25;
  double lm_initial = 1e-3;
  double lm_growth = 10.0;
  double lm_shrink = 0.5;
  double step_tolerance = 1e-7;      // on the vertex metric d
  double residual_tolerance = 1e-10; // absolute, stacked L2
  AdmissibleClassParams admissibility{3, 0.1};
  double noise_level = 0.0;

  void validate() const {
    if (max_iterations < 1) throw ConfigError("max_iterations must be positive");
    if (lm_initial <= 0.0) throw ConfigError("lm_initial must be positive");
    if (lm_growth <= 1.0) throw ConfigError("lm_growth must exceed 1");
    if (lm_shrink <= 0.0 || lm_shrink >= 1.0) throw ConfigError("lm_shrink must lie in (0, 1)");
    if (step_tolerance <= 0.0 || residual_tolerance <= 0.0)
      throw ConfigError("tolerances must be positive");
  }
};

enum class ReconstructionStatus { converged, max_iterations, stagnated };

struct IterationRecord {
  int iteration = 0;
  double residual_norm = 0.0;
  double sigma_min = 0.0;
  double step_d = 0.0;
  double lm_lambda = 0.0;
  bool accepted = true;
};

struct ReconstructionResult {
  std::optional<Polygon> polygon;
  std::vector<IterationRecord> log;
  ReconstructionStatus status = ReconstructionStatus::max_iterations;
  int iterations = 0;

  const Polygon& recovered() const { return polygon.value(); }
};

inline ReconstructionResult reconstruct(const DomainBoundary& boundary, Conductivity mode,
                                        const std::vector<CurrentSpec>& currents,
                                        const std::vector<Trace>& measured,
                                        const Polygon& initial, const ReconstructionConfig& cfg,
                                        const Discretization& disc, int threads = 0) {
  cfg.validate();
  if (!is_admissible(initial, cfg.admissibility, boundary).admissible)
    throw ConfigError("initial polygon is not admissible for the configured class");
  const AdmissibleClassParams relaxed{cfg.admissibility.n, 0.5 * cfg.admissibility.delta};

  ReconstructionResult result;
  Polygon current = initial;
  double lm = cfg.lm_initial;

  auto misfit = [&](const Polygon& p) {
    auto op = std::make_shared<const TransmissionOperator>(boundary, p, mode, disc);
    const auto sols = solve_forward_set(op, currents);
    return std::make_pair(residual_vector(sols, measured), op);
  };

  auto [r, op] = misfit(current);
  double rnorm = r.norm();

  for (int iter = 0; iter < cfg.max_iterations; ++iter) {
    if (rnorm <= cfg.residual_tolerance) {
      result.status = ReconstructionStatus::converged;
      IterationRecord rec;
      rec.iteration = iter;
      rec.residual_norm = rnorm;
      rec.lm_lambda = lm;
      result.log.push_back(rec);
      break;
    }

    const JacobianMatrix jac = assemble_jacobian(op, currents, threads);
    const Eigen::MatrixXd jtj = jac.weighted.transpose() * jac.weighted;
    const Eigen::VectorXd jtr = jac.weighted.transpose() * r;
    const double sigma_min = injectivity_margin(jac).sigma_min;

    bool accepted = false;
    double step_d = 0.0;
    for (int attempt = 0; attempt < 20 && !accepted; ++attempt) {
      Eigen::MatrixXd damped = jtj;
      damped.diagonal() += lm * jtj.diagonal().cwiseMax(1e-14);
      const Eigen::VectorXd delta = -damped.ldlt().solve(jtr);

      // shrink the step until the iterate stays in the relaxed class
      double scale = 1.0;
      std::optional<Polygon> candidate;
      for (int halving = 0; halving < 30; ++halving, scale *= 0.5) {
        std::vector<Vec2> moved = current.vertices();
        for (int i = 0; i < current.n(); ++i) {
          moved[i].x += scale * delta(2 * i);
          moved[i].y += scale * delta(2 * i + 1);
        }
        try {
          Polygon trial(moved);
          if (is_admissible(trial, relaxed, boundary).admissible) {
            candidate = std::move(trial);
            break;
          }
        } catch (const GeometryError&) {
        }
      }
      if (!candidate) {
        lm *= cfg.lm_growth;
        continue;
      }

      auto [r_new, op_new] = misfit(*candidate);
      const double rnorm_new = r_new.norm();
      IterationRecord rec;
      rec.iteration = iter;
      rec.residual_norm = rnorm_new;
      rec.sigma_min = sigma_min;
      rec.lm_lambda = lm;
      rec.step_d = polygon_metric(*candidate, current);
      rec.accepted = rnorm_new < rnorm;
      result.log.push_back(rec);
      if (rec.accepted) {
        step_d = rec.step_d;
        current = *candidate;
        r = std::move(r_new);
        op = std::move(op_new);
        rnorm = rnorm_new;
        lm = std::max(lm * cfg.lm_shrink, 1e-14);
        accepted = true;
      } else {
        lm *= cfg.lm_growth;
      }
    }

    result.iterations = iter + 1;
    if (!accepted) {
      result.status = ReconstructionStatus::stagnated;
      break;
    }
    if (step_d < cfg.step_tolerance) {
      result.status = ReconstructionStatus::converged;
      break;
    }
  }

  result.polygon = current;
  return result;
}

// ---------------------------------------------------------------------------
// Monte-Carlo estimate of the stability ratio d(D, D') / ||trace difference||
// over the admissible class. The theory guarantees finiteness of the
// supremum; the experiment reports empirical lower bounds only.
// ---------------------------------------------------------------------------

enum class PairingRule { independent, near, mixed_hausdorff };

struct LipschitzPair {
  double vertex_metric = 0.0;    // d(D, D'); 0 for mixed vertex counts
  double hausdorff = 0.0;        // d_H(boundary, boundary')
  double trace_distance = 0.0;   // stacked L2 of the trace difference
  double ratio = 0.0;            // metric / trace distance
  bool excluded = false;         // zero-distance pairs are excluded
};

struct LipschitzReport {
  PairingRule rule = PairingRule::independent;
  int requested_pairs = 0;
  std::vector<LipschitzPair> pairs;
  double max_ratio = 0.0;
  double median_ratio = 0.0;
  double q90_ratio = 0.0;
  int excluded = 0;
};

namespace detail {

inline double stacked_trace_distance(const std::vector<Trace>& a, const std::vector<Trace>& b) {
  double acc = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) {
    const double d = trace_distance(a[c], b[c]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

inline std::vector<Trace> traces_for(const DomainBoundary& boundary, const Polygon& poly,
                                     Conductivity mode, const std::vector<CurrentSpec>& currents,
                                     const Discretization& disc) {
  auto op = std::make_shared<const TransmissionOperator>(boundary, poly, mode, disc);
  std::vector<Trace> out;
  for (const auto& spec : currents)
    out.push_back(solve_forward(op, make_current(spec, op->domain_mesh())).trace());
  return out;
}

// Perturb every vertex by an admissibility-preserving random displacement of
// magnitude up to `radius`; retries shrink the radius.
inline std::optional<Polygon> near_partner(const Polygon& base, const AdmissibleClassParams& params,
                                           const DomainBoundary& boundary, double radius,
                                           Rng& rng) {
  for (int attempt = 0; attempt < 50; ++attempt) {
    std::vector<Vec2> moved = base.vertices();
    for (auto& v : moved) {
      const double ang = rng.uniform(0.0, two_pi);
      const double mag = radius * rng.uniform(0.5, 1.0);
      v += Vec2{mag * std::cos(ang), mag * std::sin(ang)};
    }
    try {
      Polygon trial(moved);
      if (is_admissible(trial, params, boundary).admissible) return trial;
    } catch (const GeometryError&) {
    }
    radius *= 0.7;
  }
  return std::nullopt;
}

}  // namespace detail

inline LipschitzReport lipschitz_experiment(const DomainBoundary& boundary, Conductivity mode,
                                            const std::vector<CurrentSpec>& currents,
                                            const AdmissibleClassParams& params, int pair_count,
                                            PairingRule rule, std::uint64_t seed,
                                            const Discretization& disc, int threads = 0,
                                            int max_vertex_count = 0) {
  if (pair_count < 1) throw ConfigError("pair count must be positive");
  if (rule == PairingRule::mixed_hausdorff && max_vertex_count < params.n)
    max_vertex_count = params.n + 1;

  LipschitzReport report;
  report.rule = rule;
  report.requested_pairs = pair_count;
  report.pairs.resize(pair_count);

  parallel_for(static_cast<std::size_t>(pair_count), [&](std::size_t idx) {
    Rng rng = Rng::stream(seed, idx);
    LipschitzPair& pair = report.pairs[idx];
    try {
      Polygon first = sample_admissible_polygon(params, boundary, rng.next_u64());
      std::optional<Polygon> second;
      AdmissibleClassParams second_params = params;
      if (rule == PairingRule::near) {
        const double radius = std::exp(rng.uniform(std::log(1e-3), std::log(params.delta / 4.0)));
        second = detail::near_partner(first, params, boundary, radius, rng);
      } else if (rule == PairingRule::independent) {
        second = sample_admissible_polygon(params, boundary, rng.next_u64());
      } else {
        // mixed vertex counts, compared through the Hausdorff metric only
        const int n2 = params.n + static_cast<int>(rng.next_u64() % (max_vertex_count - params.n + 1));
        second_params = AdmissibleClassParams{n2, params.delta};
        second = sample_admissible_polygon(second_params, boundary, rng.next_u64());
      }
      if (!second) {
        pair.excluded = true;
        return;
      }
      const auto ta = detail::traces_for(boundary, first, mode, currents, disc);
      const auto tb = detail::traces_for(boundary, *second, mode, currents, disc);
      pair.trace_distance = detail::stacked_trace_distance(ta, tb);
      pair.hausdorff = hausdorff_distance(first, *second);
      pair.vertex_metric =
          (rule == PairingRule::mixed_hausdorff && second->n() != first.n())
              ? 0.0
              : polygon_metric(first, *second);
      const double metric =
          rule == PairingRule::mixed_hausdorff ? pair.hausdorff : pair.vertex_metric;
      if (pair.trace_distance <= 0.0 || metric <= 0.0) {
        pair.excluded = true;
        return;
      }
      pair.ratio = metric / pair.trace_distance;
    } catch (const Error&) {
      pair.excluded = true;
    }
  }, threads);

  std::vector<double> ratios;
  for (const auto& pair : report.pairs) {
    if (pair.excluded) {
      ++report.excluded;
    } else {
      ratios.push_back(pair.ratio);
    }
  }
  if (!ratios.empty()) {
    std::sort(ratios.begin(), ratios.end());
    report.max_ratio = ratios.back();
    report.median_ratio = ratios[ratios.size() / 2];
    report.q90_ratio = ratios[static_cast<std::size_t>(0.9 * (ratios.size() - 1))];
  }
  return report;
}

}  // namespace polystab
