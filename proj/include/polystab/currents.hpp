#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "polystab/common.hpp"
#include "polystab/mesh.hpp"

namespace polystab {

// ---------------------------------------------------------------------------
// Probing currents: mean-zero Neumann data on the enclosing boundary, either
// a truncated Fourier series in the boundary parameter or piecewise constant
// values on equal parameter arcs.
// ---------------------------------------------------------------------------

struct CurrentSpec {
  struct Term {
    bool is_sine = false;
    int mode = 1;
    double amplitude = 1.0;
  };
  std::vector<Term> fourier;
  std::vector<double> piecewise;  // equal arcs over [0, 2pi)

  bool empty() const { return fourier.empty() && piecewise.empty(); }
};

class BoundaryCurrent {
 public:
  BoundaryCurrent(CurrentSpec spec, const DomainMesh& mesh) : spec_(std::move(spec)) {
    if (spec_.empty()) throw ConfigError("current specification is empty");
    // project out the weighted mean so that the current integrates to zero
    double mass = 0.0, total = 0.0;
    for (int i = 0; i < mesh.node_count(); ++i) {
      mass += mesh.weight(i) * raw(mesh.param(i));
      total += mesh.weight(i);
    }
    offset_ = mass / total;
    double norm2 = 0.0;
    for (int i = 0; i < mesh.node_count(); ++i) {
      const double v = evaluate(mesh.param(i));
      norm2 += mesh.weight(i) * v * v;
    }
    if (std::sqrt(norm2) <= 1e-12)
      throw ConfigError("current is trivial after mean-zero projection");
  }

  double evaluate(double t) const { return raw(t) - offset_; }

  const CurrentSpec& spec() const { return spec_; }
  double projection_offset() const { return offset_; }

 private:
  double raw(double t) const {
    double v = 0.0;
    for (const auto& term : spec_.fourier)
      v += term.amplitude * (term.is_sine ? std::sin(term.mode * t) : std::cos(term.mode * t));
    if (!spec_.piecewise.empty()) {
      double u = std::fmod(t, two_pi);
      if (u < 0) u += two_pi;
      const std::size_t m = spec_.piecewise.size();
      std::size_t idx = static_cast<std::size_t>(u / two_pi * m);
      if (idx >= m) idx = m - 1;
      v += spec_.piecewise[idx];
    }
    return v;
  }

  CurrentSpec spec_;
  double offset_ = 0.0;
};

inline BoundaryCurrent make_current(const CurrentSpec& spec, const DomainMesh& mesh) {
  return BoundaryCurrent(spec, mesh);
}

namespace detail {

inline std::vector<std::string> split_on(const std::string& s, const char* seps) {
  std::vector<std::string> parts;
  std::size_t p = 0;
  while (p <= s.size()) {
    std::size_t e = s.find_first_of(seps, p);
    if (e == std::string::npos) e = s.size();
    parts.push_back(s.substr(p, e - p));
    p = e + 1;
  }
  return parts;
}

inline bool parse_full_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  std::size_t used = 0;
  try {
    out = std::stod(s, &used);
  } catch (...) {
    return false;
  }
  return used == s.size();
}

// One fragment of a current spec. Numeric fragments extend an open
// piecewise-value list (so "pw:1,-1,1,-1" parses as one term).
inline void apply_current_fragment(const std::string& term, CurrentSpec& spec, bool& open_pw) {
  double number = 0.0;
  if (open_pw && parse_full_double(term, number)) {
    spec.piecewise.push_back(number);
    return;
  }
  const auto parts = split_on(term, ":");
  try {
    if (parts[0] == "cos" || parts[0] == "sin") {
      if (parts.size() < 2) throw ConfigError("current term '" + term + "' is missing a mode");
      CurrentSpec::Term t;
      t.is_sine = parts[0] == "sin";
      t.mode = std::stoi(parts[1]);
      if (t.mode < 1) throw ConfigError("Fourier mode must be >= 1 in '" + term + "'");
      t.amplitude = parts.size() > 2 ? std::stod(parts[2]) : 1.0;
      spec.fourier.push_back(t);
      open_pw = false;
    } else if (parts[0] == "pw") {
      if (parts.size() < 2) throw ConfigError("piecewise current needs values in '" + term + "'");
      for (const auto& v : split_on(parts[1], ";")) spec.piecewise.push_back(std::stod(v));
      open_pw = true;
    } else {
      throw ConfigError("unknown current term '" + term + "'");
    }
  } catch (const std::invalid_argument&) {
    throw ConfigError("malformed number in current term '" + term + "'");
  }
}

}  // namespace detail

// Micro-grammar for one current: terms joined by ',' or '+', each term
// "cos:m[:amp]", "sin:m[:amp]", or "pw:v1,v2,...,vm" (equal parameter arcs).
inline CurrentSpec parse_current_spec(const std::string& text) {
  CurrentSpec spec;
  bool open_pw = false;
  for (const auto& term : detail::split_on(text, ",+")) {
    if (term.empty()) continue;
    detail::apply_current_fragment(term, spec, open_pw);
  }
  if (spec.empty()) throw ConfigError("empty current specification");
  if (!spec.piecewise.empty() && spec.piecewise.size() < 2)
    throw ConfigError("piecewise current needs at least two arcs");
  return spec;
}

// A comma separated list of currents, e.g. "cos:1,sin:1". Within one current
// of the list, join terms with '+'; numeric fragments continue a pw list.
inline std::vector<CurrentSpec> parse_current_list(const std::string& text) {
  std::vector<CurrentSpec> specs;
  CurrentSpec current;
  bool open_pw = false;
  auto flush = [&]() {
    if (!current.empty()) specs.push_back(std::move(current));
    current = CurrentSpec{};
    open_pw = false;
  };
  for (const auto& fragment : detail::split_on(text, ",")) {
    if (fragment.empty()) continue;
    double number = 0.0;
    const bool numeric = detail::parse_full_double(fragment, number);
    if (!numeric || !open_pw) {
      if (!numeric) flush();
    }
    for (const auto& term : detail::split_on(fragment, "+")) {
      if (term.empty()) continue;
      detail::apply_current_fragment(term, current, open_pw);
    }
  }
  flush();
  if (specs.empty()) throw ConfigError("empty current list");
  return specs;
}

// ---------------------------------------------------------------------------
// Seo admissibility of a current pair: for every combination
// f = cos(phi) f1 + sin(phi) f2 the set { f >= 0 } on the boundary must be a
// single arc. Checked on a fine boundary grid over a half turn of phi.
// ---------------------------------------------------------------------------

struct SeoCheckResult {
  bool ok = true;
  double worst_phi = 0.0;
  int worst_arcs = 0;
};

inline int count_nonnegative_arcs(const std::vector<double>& values) {
  const int n = static_cast<int>(values.size());
  int arcs = 0;
  bool any_nonneg = false;
  for (int i = 0; i < n; ++i) {
    const bool cur = values[i] >= 0.0;
    const bool prev = values[(i + n - 1) % n] >= 0.0;
    if (cur) any_nonneg = true;
    if (cur && !prev) ++arcs;
  }
  if (arcs == 0 && any_nonneg) arcs = 1;  // nonnegative on the whole circle
  return arcs;
}

inline SeoCheckResult check_seo_condition(const BoundaryCurrent& f1, const BoundaryCurrent& f2,
                                          const DomainMesh& mesh, int phi_resolution = 360,
                                          int boundary_resolution = 4096) {
  // reject (numerically) linearly dependent pairs via the Gram determinant
  double g11 = 0.0, g12 = 0.0, g22 = 0.0;
  for (int i = 0; i < mesh.node_count(); ++i) {
    const double w = mesh.weight(i);
    const double a = f1.evaluate(mesh.param(i));
    const double b = f2.evaluate(mesh.param(i));
    g11 += w * a * a;
    g12 += w * a * b;
    g22 += w * b * b;
  }
  if (g11 * g22 - g12 * g12 <= 1e-12 * g11 * g22)
    throw ConfigError("probing currents are linearly dependent");

  std::vector<double> fa(boundary_resolution), fb(boundary_resolution);
  for (int i = 0; i < boundary_resolution; ++i) {
    const double t = two_pi * i / boundary_resolution;
    fa[i] = f1.evaluate(t);
    fb[i] = f2.evaluate(t);
  }

  SeoCheckResult result;
  result.worst_arcs = 1;
  std::vector<double> combo(boundary_resolution);
  for (int s = 0; s < phi_resolution; ++s) {
    const double phi = pi * s / phi_resolution;
    const double c = std::cos(phi), sn = std::sin(phi);
    for (int i = 0; i < boundary_resolution; ++i) combo[i] = c * fa[i] + sn * fb[i];
    const int arcs = count_nonnegative_arcs(combo);
    if (arcs > result.worst_arcs) {
      result.worst_arcs = arcs;
      result.worst_phi = phi;
      result.ok = false;
    }
  }
  return result;
}

}  // namespace polystab
