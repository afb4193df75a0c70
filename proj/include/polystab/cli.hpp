#pragma once

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "polystab/corner_analysis.hpp"
#include "polystab/forward_solver.hpp"
#include "polystab/inversion.hpp"
#include "polystab/io.hpp"
#include "polystab/shape_derivative.hpp"
#include "polystab/version.hpp"

namespace polystab::cli {

// ---------------------------------------------------------------------------
// polystab <exponents|seo-check|forward|jacobian|reconstruct|lipschitz>
//
// Exit codes: 0 on success, 1 for configuration/domain errors, 2 for numeric
// failures. Output files are written atomically and stamped with the hash of
// the resolved configuration.
// ---------------------------------------------------------------------------

namespace detail {

inline json discretization_to_json(const Discretization& d) {
  return json{{"panels_per_edge", d.panels_per_edge},
              {"grading_exponent", d.grading_exponent},
              {"panel_order", d.panel_order},
              {"domain_nodes", d.domain_nodes}};
}

inline Discretization discretization_from_json(const json& j, Discretization base = {}) {
  if (j.contains("panels_per_edge")) base.panels_per_edge = j["panels_per_edge"].get<int>();
  if (j.contains("grading_exponent")) base.grading_exponent = j["grading_exponent"].get<double>();
  if (j.contains("panel_order")) base.panel_order = j["panel_order"].get<int>();
  if (j.contains("domain_nodes")) base.domain_nodes = j["domain_nodes"].get<int>();
  base.validate();
  return base;
}

// Conductivity mode from a CLI string: a number, or the word "insulating".
inline Conductivity mode_from_string(const std::string& text) {
  if (text == "insulating") return Conductivity::insulator();
  try {
    std::size_t used = 0;
    const double k = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return Conductivity::conductive(k);
  } catch (const std::invalid_argument&) {
    throw ConfigError("conductivity must be a positive number or 'insulating', got '" + text + "'");
  }
}

inline Conductivity mode_from_json(const json& j) {
  const bool insul = j.contains("insulating") && j["insulating"].get<bool>();
  const bool conduct = j.contains("k");
  if (insul == conduct)
    throw ConfigError("configuration needs exactly one conductivity mode: 'k' or 'insulating'");
  return insul ? Conductivity::insulator() : Conductivity::conductive(j["k"].get<double>());
}

inline json mode_to_json(const Conductivity& mode) {
  if (mode.insulating) return json{{"insulating", true}};
  return json{{"k", mode.k}};
}

inline void require_file(const std::string& path, const char* what) {
  if (!std::filesystem::exists(path))
    throw ConfigError(std::string(what) + " file does not exist: " + path);
}

inline json load_json_file(const std::string& path, const char* what) {
  require_file(path, what);
  std::ifstream in(path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed ") + what + " file " + path + ": " + e.what());
  }
  return j;
}

}  // namespace detail

// --- exponents -------------------------------------------------------------

inline int run_exponents(double alpha, std::optional<double> k, std::optional<double> lambda,
                         int count, const std::string& out_path) {
  const double lam = lambda ? *lambda : lambda_of_k(k.value());
  const CornerSpectrum spectrum = corner_exponents(alpha, lam, count);

  json config{{"op", "exponents"}, {"alpha", alpha}, {"lambda", lam}, {"count", count}};
  if (k) config["k"] = *k;
  const std::string hash = config_hash(config);

  std::ostringstream csv;
  csv << "# config_hash=" << hash << "\n";
  csv << "gamma,residual\n";
  for (double g : spectrum.exponents)
    csv << format17(g) << ',' << format17(spectrum.residual(g)) << "\n";
  if (!out_path.empty()) {
    write_file_atomic(out_path, csv.str());
  } else {
    std::cout << csv.str();
  }
  std::cout << "exponents: alpha=" << format17(alpha) << " lambda=" << format17(lam)
            << " found=" << spectrum.exponents.size() << "\n";
  return 0;
}

// --- seo-check ---------------------------------------------------------------

inline int run_seo_check(const std::string& currents_text, int phi_resolution,
                         int boundary_resolution, int domain_nodes) {
  const auto specs = parse_current_list(currents_text);
  if (specs.size() != 2) throw ConfigError("seo-check needs exactly two currents");
  DomainMesh mesh(DomainBoundary::circle(1.0), domain_nodes);
  const auto f1 = make_current(specs[0], mesh);
  const auto f2 = make_current(specs[1], mesh);
  const auto result = check_seo_condition(f1, f2, mesh, phi_resolution, boundary_resolution);
  std::cout << "seo_ok=" << (result.ok ? "true" : "false");
  if (!result.ok)
    std::cout << " worst_phi=" << format17(result.worst_phi) << " arcs=" << result.worst_arcs;
  std::cout << "\n";
  return 0;
}

// --- forward -----------------------------------------------------------------

inline int run_forward(const std::string& domain_path, const std::string& polygon_path,
                       const std::string& mode_text, const std::string& current_text,
                       const std::string& out_path, const Discretization& disc) {
  const DomainBoundary domain =
      domain_path.empty() ? DomainBoundary::circle(1.0) : load_domain(domain_path);
  detail::require_file(polygon_path, "polygon");
  const Polygon polygon = load_polygon(polygon_path);
  const Conductivity mode = detail::mode_from_string(mode_text);
  const CurrentSpec spec = parse_current_spec(current_text);

  auto op = std::make_shared<const TransmissionOperator>(domain, polygon, mode, disc);
  const auto sol = solve_forward(op, make_current(spec, op->domain_mesh()));

  json config{{"op", "forward"},
              {"domain", domain_path.empty() ? json("unit-circle") : json(domain_path)},
              {"polygon", polygon_path},
              {"mode", detail::mode_to_json(mode)},
              {"current", current_text},
              {"discretization", detail::discretization_to_json(disc)}};
  write_file_atomic(out_path, trace_csv(sol.trace(), config_hash(config)));
  std::cout << "forward: trace_norm=" << format17(sol.trace().norm())
            << " residual=" << format17(sol.densities().relative_residual) << " -> " << out_path
            << "\n";
  return 0;
}

// --- jacobian ----------------------------------------------------------------

inline int run_jacobian(const std::string& domain_path, const std::string& polygon_path,
                        const std::string& mode_text, const std::string& currents_text,
                        const std::string& out_path, const Discretization& disc, int threads) {
  const DomainBoundary domain =
      domain_path.empty() ? DomainBoundary::circle(1.0) : load_domain(domain_path);
  detail::require_file(polygon_path, "polygon");
  const Polygon polygon = load_polygon(polygon_path);
  const Conductivity mode = detail::mode_from_string(mode_text);
  const auto specs = parse_current_list(currents_text);

  const JacobianMatrix jac = assemble_jacobian(domain, polygon, mode, specs, disc, threads);
  const InjectivityMargin margin = injectivity_margin(jac);

  json config{{"op", "jacobian"},
              {"domain", domain_path.empty() ? json("unit-circle") : json(domain_path)},
              {"polygon", polygon_path},
              {"mode", detail::mode_to_json(mode)},
              {"currents", currents_text},
              {"discretization", detail::discretization_to_json(disc)}};
  json out;
  out["config_hash"] = config_hash(config);
  out["sigma_min"] = margin.sigma_min;
  out["singular_values"] = json::array();
  for (int i = 0; i < margin.singular_values.size(); ++i)
    out["singular_values"].push_back(margin.singular_values(i));
  out["worst_direction"] = json::array();
  for (const auto& d : margin.worst_direction.displacements)
    out["worst_direction"].push_back({d.x, d.y});
  out["seo_ok"] = jac.seo_ok;
  write_file_atomic(out_path, out.dump(2) + "\n");
  std::cout << "jacobian: sigma_min=" << format17(margin.sigma_min)
            << " seo_ok=" << (jac.seo_ok ? "true" : "false") << " -> " << out_path << "\n";
  return 0;
}

// --- reconstruct ---------------------------------------------------------------

inline int run_reconstruct(const std::string& config_path, int threads) {
  const json cfg = detail::load_json_file(config_path, "config");
  const std::string hash = config_hash(cfg);

  if (!cfg.contains("seed")) throw ConfigError("reconstruction config needs a 'seed'");
  const std::uint64_t seed = cfg["seed"].get<std::uint64_t>();
  const DomainBoundary domain =
      cfg.contains("domain") ? domain_from_json(cfg["domain"]) : DomainBoundary::circle(1.0);
  const Conductivity mode = detail::mode_from_json(cfg.at("mode"));
  std::vector<CurrentSpec> currents;
  for (const auto& c : cfg.at("currents")) currents.push_back(parse_current_spec(c.get<std::string>()));
  const Discretization disc = cfg.contains("discretization")
                                  ? detail::discretization_from_json(cfg["discretization"])
                                  : Discretization{};

  // synthetic data: truth polygon solved on its own (typically finer) grid
  const json& data = cfg.at("data");
  const std::string truth_path = data.at("truth_polygon").get<std::string>();
  detail::require_file(truth_path, "truth polygon");
  const Polygon truth = load_polygon(truth_path);
  Discretization data_disc = disc.refined(2);
  data_disc.panel_order = disc.panel_order + 2;
  if (data.contains("discretization"))
    data_disc = detail::discretization_from_json(data["discretization"], data_disc);
  const double noise = data.contains("noise_level") ? data["noise_level"].get<double>() : 0.0;
  data_disc.domain_nodes = disc.domain_nodes;  // traces must share the node set
  const auto measured = synthetic_measurements(domain, truth, mode, currents, data_disc, noise, seed);

  const std::string initial_path = cfg.at("initial_polygon").get<std::string>();
  detail::require_file(initial_path, "initial polygon");
  const Polygon initial = load_polygon(initial_path);

  ReconstructionConfig rc;
  const json& rj = cfg.at("reconstruction");
  rc.admissibility = AdmissibleClassParams{rj.at("admissibility").at("n").get<int>(),
                                           rj.at("admissibility").at("delta").get<double>()};
  if (rj.contains("max_iterations")) rc.max_iterations = rj["max_iterations"].get<int>();
  if (rj.contains("lm_initial")) rc.lm_initial = rj["lm_initial"].get<double>();
  if (rj.contains("lm_growth")) rc.lm_growth = rj["lm_growth"].get<double>();
  if (rj.contains("lm_shrink")) rc.lm_shrink = rj["lm_shrink"].get<double>();
  if (rj.contains("step_tolerance")) rc.step_tolerance = rj["step_tolerance"].get<double>();
  if (rj.contains("residual_tolerance"))
    rc.residual_tolerance = rj["residual_tolerance"].get<double>();
  rc.noise_level = noise;

  const ReconstructionResult result =
      reconstruct(domain, mode, currents, measured, initial, rc, disc, threads);

  const json& outputs = cfg.at("outputs");
  if (outputs.contains("iterations_csv")) {
    std::ostringstream csv;
    csv << "# config_hash=" << hash << "\n";
    csv << "iter,residual,sigma_min,step_d\n";
    for (const auto& rec : result.log)
      csv << rec.iteration << ',' << format17(rec.residual_norm) << ','
          << format17(rec.sigma_min) << ',' << format17(rec.step_d) << "\n";
    write_file_atomic(outputs["iterations_csv"].get<std::string>(), csv.str());
  }

  const double err = result.polygon && result.polygon->n() == truth.n()
                         ? polygon_metric(*result.polygon, truth)
                         : -1.0;
  if (outputs.contains("report_json")) {
    json report;
    report["config_hash"] = hash;
    report["status"] = result.status == ReconstructionStatus::converged ? "converged"
                       : result.status == ReconstructionStatus::stagnated ? "stagnated"
                                                                          : "max_iterations";
    report["iterations"] = result.iterations;
    report["final_residual"] = result.log.empty() ? -1.0 : result.log.back().residual_norm;
    report["vertex_metric_to_truth"] = err;
    report["recovered"] = polygon_to_json(result.recovered());
    write_file_atomic(outputs["report_json"].get<std::string>(), report.dump(2) + "\n");
  }
  if (outputs.contains("overlay_svg")) {
    write_file_atomic(outputs["overlay_svg"].get<std::string>(),
                      polygon_overlay_svg({{"truth", truth},
                                           {"initial", initial},
                                           {"recovered", result.recovered()}},
                                          domain, hash));
  }
  std::cout << "reconstruct: status="
            << (result.status == ReconstructionStatus::converged ? "converged"
                : result.status == ReconstructionStatus::stagnated ? "stagnated"
                                                                   : "max_iterations")
            << " d_to_truth=" << format17(err) << " iterations=" << result.iterations << "\n";
  return 0;
}

// --- lipschitz -----------------------------------------------------------------

inline int run_lipschitz(const std::string& config_path, int threads) {
  const json cfg = detail::load_json_file(config_path, "config");
  const std::string hash = config_hash(cfg);

  if (!cfg.contains("seed")) throw ConfigError("lipschitz config needs a 'seed'");
  const std::uint64_t seed = cfg["seed"].get<std::uint64_t>();
  const DomainBoundary domain =
      cfg.contains("domain") ? domain_from_json(cfg["domain"]) : DomainBoundary::circle(1.0);
  const Conductivity mode = detail::mode_from_json(cfg.at("mode"));
  std::vector<CurrentSpec> currents;
  for (const auto& c : cfg.at("currents")) currents.push_back(parse_current_spec(c.get<std::string>()));
  const Discretization disc = cfg.contains("discretization")
                                  ? detail::discretization_from_json(cfg["discretization"])
                                  : Discretization{};
  const AdmissibleClassParams params{cfg.at("class").at("n").get<int>(),
                                     cfg.at("class").at("delta").get<double>()};
  const int pairs = cfg.at("pairs").get<int>();
  const std::string rule_text = cfg.contains("pairing") ? cfg["pairing"].get<std::string>() : "near";
  PairingRule rule;
  if (rule_text == "near") {
    rule = PairingRule::near;
  } else if (rule_text == "independent") {
    rule = PairingRule::independent;
  } else if (rule_text == "mixed_hausdorff") {
    rule = PairingRule::mixed_hausdorff;
  } else {
    throw ConfigError("unknown pairing rule '" + rule_text + "'");
  }
  const int max_n = cfg.contains("max_vertex_count") ? cfg["max_vertex_count"].get<int>() : 0;

  const LipschitzReport report =
      lipschitz_experiment(domain, mode, currents, params, pairs, rule, seed, disc, threads, max_n);

  json out;
  out["config_hash"] = hash;
  out["pairing"] = rule_text;
  out["requested_pairs"] = report.requested_pairs;
  out["excluded"] = report.excluded;
  out["max_ratio"] = report.max_ratio;
  out["median_ratio"] = report.median_ratio;
  out["q90_ratio"] = report.q90_ratio;
  out["samples"] = json::array();
  for (const auto& p : report.pairs) {
    out["samples"].push_back(json{{"d", p.vertex_metric},
                                  {"d_hausdorff", p.hausdorff},
                                  {"trace_distance", p.trace_distance},
                                  {"ratio", p.ratio},
                                  {"excluded", p.excluded}});
  }
  const std::string out_path = cfg.at("outputs").at("report_json").get<std::string>();
  write_file_atomic(out_path, out.dump(2) + "\n");
  std::cout << "lipschitz: max_ratio=" << format17(report.max_ratio)
            << " pairs=" << (report.requested_pairs - report.excluded) << " -> " << out_path
            << "\n";
  return 0;
}

// --- entry point ------------------------------------------------------------

inline int run(int argc, const char* const* argv) {
  CLI::App app{"polystab: polygonal inclusion forward solves, shape derivatives, and stability experiments"};
  app.set_version_flag("--version", std::string("polystab ") + version_string);
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "worker thread cap (0 = POLYSTAB_THREADS or hardware)");

  Discretization disc;
  auto add_disc_options = [&](CLI::App* sub) {
    sub->add_option("--panels", disc.panels_per_edge, "panels per polygon edge");
    sub->add_option("--grading", disc.grading_exponent, "grading exponent toward vertices");
    sub->add_option("--order", disc.panel_order, "Gauss order per panel");
    sub->add_option("--domain-nodes", disc.domain_nodes, "nodes on the outer boundary");
  };

  // exponents
  auto* exp_cmd = app.add_subcommand("exponents", "corner exponents of the transmission problem");
  double alpha = 0.0;
  std::optional<double> k_opt, lambda_opt;
  int count = 2;
  std::string out_path;
  exp_cmd->add_option("--alpha", alpha, "interior angle in radians")->required();
  exp_cmd->add_option("--k", k_opt, "inclusion conductivity (k > 0, k != 1)");
  exp_cmd->add_option("--lambda", lambda_opt, "contrast amplitude (> 1), overrides --k");
  exp_cmd->add_option("--count", count, "number of exponents");
  exp_cmd->add_option("--out", out_path, "CSV output path (stdout when omitted)");

  // seo-check
  auto* seo_cmd = app.add_subcommand("seo-check", "connectivity of {f >= 0} over all combinations");
  std::string currents_text;
  int phi_resolution = 360, boundary_resolution = 4096, seo_nodes = 256;
  seo_cmd->add_option("--currents", currents_text, "two currents, e.g. \"cos:1,sin:1\"")->required();
  seo_cmd->add_option("--resolution", phi_resolution, "combination sweep resolution");
  seo_cmd->add_option("--boundary-resolution", boundary_resolution, "boundary sample count");
  seo_cmd->add_option("--domain-nodes", seo_nodes, "projection grid node count");

  // forward
  auto* fwd_cmd = app.add_subcommand("forward", "solve the forward problem and write the trace");
  std::string domain_path, polygon_path, mode_text = "2.0", current_text = "cos:1", fwd_out;
  fwd_cmd->add_option("--domain", domain_path, "domain JSON (default: unit circle)");
  fwd_cmd->add_option("--polygon", polygon_path, "polygon JSON")->required();
  fwd_cmd->add_option("--k", mode_text, "conductivity value or 'insulating'");
  fwd_cmd->add_option("--current", current_text, "probing current spec");
  fwd_cmd->add_option("--out", fwd_out, "trace CSV path")->required();
  add_disc_options(fwd_cmd);

  // jacobian
  auto* jac_cmd = app.add_subcommand("jacobian", "assemble the shape Jacobian and its SVD margin");
  std::string jac_domain, jac_polygon, jac_mode = "2.0", jac_currents = "cos:1,sin:1", jac_out;
  jac_cmd->add_option("--domain", jac_domain, "domain JSON (default: unit circle)");
  jac_cmd->add_option("--polygon", jac_polygon, "polygon JSON")->required();
  jac_cmd->add_option("--k", jac_mode, "conductivity value or 'insulating'");
  jac_cmd->add_option("--currents", jac_currents, "comma separated currents");
  jac_cmd->add_option("--out", jac_out, "report JSON path")->required();
  add_disc_options(jac_cmd);

  // reconstruct / lipschitz
  auto* rec_cmd = app.add_subcommand("reconstruct", "Gauss-Newton reconstruction from a config file");
  std::string rec_config;
  rec_cmd->add_option("--config", rec_config, "JSON config")->required();
  auto* lip_cmd = app.add_subcommand("lipschitz", "stability-ratio sampling from a config file");
  std::string lip_config;
  lip_cmd->add_option("--config", lip_config, "JSON config")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);  // CLI11 prints usage; nonzero on errors
  }

  try {
    if (exp_cmd->parsed()) {
      if (!k_opt && !lambda_opt) throw ConfigError("exponents needs --k or --lambda");
      return run_exponents(alpha, k_opt, lambda_opt, count, out_path);
    }
    if (seo_cmd->parsed())
      return run_seo_check(currents_text, phi_resolution, boundary_resolution, seo_nodes);
    if (fwd_cmd->parsed())
      return run_forward(domain_path, polygon_path, mode_text, current_text, fwd_out, disc);
    if (jac_cmd->parsed())
      return run_jacobian(jac_domain, jac_polygon, jac_mode, jac_currents, jac_out, disc, threads);
    if (rec_cmd->parsed()) return run_reconstruct(rec_config, threads);
    if (lip_cmd->parsed()) return run_lipschitz(lip_config, threads);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 2;
  } catch (const DiscretizationError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace polystab::cli
