#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "polystab/cli.hpp"

using namespace polystab;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("polystab");
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

fs::path test_dir() {
  static int counter = 0;
  const fs::path dir = fs::temp_directory_path() / ("polystab_cli_" + std::to_string(::getpid()) +
                                                     "_" + std::to_string(counter++));
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_polygon(const fs::path& path, const std::vector<std::pair<double, double>>& verts) {
  json j;
  j["vertices"] = json::array();
  for (auto [x, y] : verts) j["vertices"].push_back({x, y});
  std::ofstream(path) << j.dump();
}

}  // namespace

TEST_CASE("cli: version and usage") {
  REQUIRE(run_cli({"--version"}) == 0);
  REQUIRE(run_cli({"no-such-command"}) != 0);
  REQUIRE(run_cli({}) != 0);
}

TEST_CASE("cli: exponents emits the closed-form right-angle values") {
  const fs::path dir = test_dir();
  const fs::path out = dir / "exp.csv";
  REQUIRE(run_cli({"exponents", "--alpha", "1.5707963267948966", "--k", "2", "--count", "2",
                   "--out", out.string()}) == 0);
  const std::string text = slurp(out);
  REQUIRE(text.find("# config_hash=") == 0);
  REQUIRE(text.find("gamma,residual") != std::string::npos);
  std::istringstream lines(text);
  std::string line;
  std::getline(lines, line);  // hash
  std::getline(lines, line);  // header
  std::vector<double> gammas;
  while (std::getline(lines, line)) {
    gammas.push_back(std::stod(line.substr(0, line.find(','))));
    const double residual = std::stod(line.substr(line.find(',') + 1));
    REQUIRE(std::fabs(residual) <= 1e-12);
  }
  REQUIRE(gammas.size() == 2);
  const double g1 = 2.0 / pi * std::acos(1.0 / 6.0);
  REQUIRE(gammas[0] == Catch::Approx(g1).margin(1e-10));
  REQUIRE(gammas[1] == Catch::Approx(2.0 - g1).margin(1e-10));

  REQUIRE(run_cli({"exponents", "--alpha", "0.5", "--count", "1"}) == 1);  // no contrast given
}

TEST_CASE("cli: seo-check verdicts") {
  REQUIRE(run_cli({"seo-check", "--currents", "cos:1,sin:1"}) == 0);
  REQUIRE(run_cli({"seo-check", "--currents", "cos:1,cos:2"}) == 0);
  REQUIRE(run_cli({"seo-check", "--currents", "cos:1"}) == 1);
  REQUIRE(run_cli({"seo-check", "--currents", "cos:1,cos:1:2"}) == 1);  // dependent
}

TEST_CASE("cli: forward trace output") {
  const fs::path dir = test_dir();
  const fs::path poly = dir / "square.json";
  write_polygon(poly, {{0.4, 0.4}, {-0.4, 0.4}, {-0.4, -0.4}, {0.4, -0.4}});
  const fs::path out = dir / "trace.csv";
  REQUIRE(run_cli({"forward", "--polygon", poly.string(), "--k", "2", "--current", "cos:1",
                   "--out", out.string(), "--panels", "6", "--order", "6", "--domain-nodes",
                   "64"}) == 0);
  const std::string text = slurp(out);
  REQUIRE(text.find("# config_hash=") == 0);
  REQUIRE(text.find("theta,u,weight") != std::string::npos);
  int rows = 0;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line))
    if (!line.empty() && line[0] != '#' && line.find("theta") == std::string::npos) ++rows;
  REQUIRE(rows == 64);

  // byte-identical rerun
  const fs::path out2 = dir / "trace2.csv";
  REQUIRE(run_cli({"forward", "--polygon", poly.string(), "--k", "2", "--current", "cos:1",
                   "--out", out2.string(), "--panels", "6", "--order", "6", "--domain-nodes",
                   "64"}) == 0);
  std::string a = slurp(out), b = slurp(out2);
  REQUIRE(a == b);

  // missing polygon file: path-bearing configuration error
  REQUIRE(run_cli({"forward", "--polygon", (dir / "nope.json").string(), "--out",
                   (dir / "t.csv").string()}) == 1);

  // insulating mode accepted as the conductivity argument
  REQUIRE(run_cli({"forward", "--polygon", poly.string(), "--k", "insulating", "--current",
                   "cos:1", "--out", (dir / "ins.csv").string(), "--panels", "6", "--order", "6",
                   "--domain-nodes", "64"}) == 0);
}

TEST_CASE("cli: polygon reader rejects invalid boundaries") {
  const fs::path dir = test_dir();
  const fs::path bowtie = dir / "bowtie.json";
  write_polygon(bowtie, {{0, 0}, {1, 1}, {1, 0}, {0, 1}});
  REQUIRE(run_cli({"forward", "--polygon", bowtie.string(), "--out",
                   (dir / "t.csv").string()}) == 1);
  const fs::path clockwise = dir / "cw.json";
  write_polygon(clockwise, {{0, 0}, {0, 1}, {1, 1}, {1, 0}});
  REQUIRE(run_cli({"forward", "--polygon", clockwise.string(), "--out",
                   (dir / "t.csv").string()}) == 1);
}

TEST_CASE("cli: jacobian report fields") {
  const fs::path dir = test_dir();
  const fs::path poly = dir / "tri.json";
  write_polygon(poly, {{0.45, -0.1}, {0.1, 0.5}, {-0.4, -0.35}});
  const fs::path out = dir / "jac.json";
  REQUIRE(run_cli({"jacobian", "--polygon", poly.string(), "--k", "2", "--currents",
                   "cos:1,sin:1", "--out", out.string(), "--panels", "6", "--order", "6",
                   "--domain-nodes", "64"}) == 0);
  json report;
  std::ifstream(out) >> report;
  REQUIRE(report.contains("config_hash"));
  REQUIRE(report["sigma_min"].get<double>() > 0.0);
  REQUIRE(report["singular_values"].size() == 6);
  REQUIRE(report["worst_direction"].size() == 3);
  REQUIRE(report["seo_ok"].get<bool>());
}

TEST_CASE("cli: reconstruct and lipschitz experiments from config files") {
  const fs::path dir = test_dir();
  const fs::path truth = dir / "truth.json";
  const fs::path initial = dir / "init.json";
  write_polygon(truth, {{0.45, -0.1}, {0.1, 0.5}, {-0.4, -0.35}});
  write_polygon(initial, {{0.47, -0.08}, {0.08, 0.52}, {-0.42, -0.33}});

  json cfg;
  cfg["seed"] = 7;
  cfg["mode"] = {{"k", 2.0}};
  cfg["currents"] = {"cos:1", "sin:1"};
  cfg["discretization"] = {{"panels_per_edge", 6}, {"panel_order", 6}, {"domain_nodes", 64}};
  cfg["data"] = {{"truth_polygon", truth.string()},
                 {"discretization",
                  {{"panels_per_edge", 12}, {"panel_order", 8}, {"domain_nodes", 64}}}};
  cfg["initial_polygon"] = initial.string();
  cfg["reconstruction"] = {{"admissibility", {{"n", 3}, {"delta", 0.08}}},
                           {"max_iterations", 12},
                           {"residual_tolerance", 1e-8}};
  cfg["outputs"] = {{"iterations_csv", (dir / "iters.csv").string()},
                    {"report_json", (dir / "report.json").string()},
                    {"overlay_svg", (dir / "overlay.svg").string()}};
  const fs::path cfg_path = dir / "rec.json";
  std::ofstream(cfg_path) << cfg.dump(2);

  REQUIRE(run_cli({"reconstruct", "--config", cfg_path.string()}) == 0);
  REQUIRE(fs::exists(dir / "iters.csv"));
  REQUIRE(fs::exists(dir / "overlay.svg"));
  json report;
  std::ifstream(dir / "report.json") >> report;
  REQUIRE(report["status"].get<std::string>() == "converged");
  REQUIRE(report["vertex_metric_to_truth"].get<double>() < 1e-3);
  const std::string svg = slurp(dir / "overlay.svg");
  REQUIRE(svg.find("<svg") != std::string::npos);
  REQUIRE(svg.find("config_hash=") != std::string::npos);
  REQUIRE(svg.find("recovered") != std::string::npos);

  // lipschitz: a tiny deterministic run, byte-identical across repeats
  json lip;
  lip["seed"] = 11;
  lip["mode"] = {{"k", 2.0}};
  lip["currents"] = {"cos:1", "sin:1"};
  lip["class"] = {{"n", 3}, {"delta", 0.1}};
  lip["pairs"] = 4;
  lip["pairing"] = "near";
  lip["discretization"] = {{"panels_per_edge", 4}, {"panel_order", 6}, {"domain_nodes", 64}};
  lip["outputs"] = {{"report_json", (dir / "lip.json").string()}};
  const fs::path lip_path = dir / "lip_cfg.json";
  std::ofstream(lip_path) << lip.dump(2);
  REQUIRE(run_cli({"lipschitz", "--config", lip_path.string()}) == 0);
  const std::string first = slurp(dir / "lip.json");
  REQUIRE(run_cli({"lipschitz", "--config", lip_path.string()}) == 0);
  REQUIRE(slurp(dir / "lip.json") == first);
  json lipreport;
  std::istringstream(first) >> lipreport;
  REQUIRE(lipreport["max_ratio"].get<double>() > 0.0);
  REQUIRE(lipreport["samples"].size() == 4);

  // config without a seed is rejected
  json bad = lip;
  bad.erase("seed");
  const fs::path bad_path = dir / "bad.json";
  std::ofstream(bad_path) << bad.dump();
  REQUIRE(run_cli({"lipschitz", "--config", bad_path.string()}) == 1);
}
