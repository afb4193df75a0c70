#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "polystab/common.hpp"
#include "polystab/forward_solver.hpp"
#include "polystab/geometry.hpp"

namespace polystab {

using json = nlohmann::json;

// All numeric text output is printed with 17 significant digits so that
// identical runs produce byte-identical files.
inline std::string format17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// FNV-1a over the canonical config text; identifies which configuration an
// output file was produced from.
inline std::string config_hash(const std::string& canonical) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : canonical) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string config_hash(const json& config) { return config_hash(config.dump()); }

// Atomic write: temp file in the target directory, then rename.
inline void write_file_atomic(const std::string& path, const std::string& contents) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot open output file: " + tmp.string());
    out << contents;
    if (!out) throw ConfigError("failed writing output file: " + tmp.string());
  }
  fs::rename(tmp, target);
}

// ---------------------------------------------------------------------------
// Polygon files: {"vertices": [[x, y], ...]} in counterclockwise order.
// ---------------------------------------------------------------------------

inline Polygon polygon_from_json(const json& j) {
  if (!j.contains("vertices") || !j["vertices"].is_array())
    throw ConfigError("polygon file needs a 'vertices' array");
  std::vector<Vec2> verts;
  for (const auto& entry : j["vertices"]) {
    if (!entry.is_array() || entry.size() != 2)
      throw ConfigError("polygon vertices must be [x, y] pairs");
    verts.push_back({entry[0].get<double>(), entry[1].get<double>()});
  }
  return Polygon(std::move(verts));  // validation rejects non-simple / non-CCW input
}

inline json polygon_to_json(const Polygon& p) {
  json j;
  j["vertices"] = json::array();
  for (const auto& v : p.vertices()) j["vertices"].push_back({v.x, v.y});
  return j;
}

inline Polygon load_polygon(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open polygon file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed polygon file " + path + ": " + e.what());
  }
  return polygon_from_json(j);
}

// ---------------------------------------------------------------------------
// Domain files: {"circle": {"radius": R, "center": [x, y]}}
// ---------------------------------------------------------------------------

inline DomainBoundary domain_from_json(const json& j) {
  if (j.contains("circle")) {
    const auto& c = j["circle"];
    const double radius = c.at("radius").get<double>();
    Vec2 center{0.0, 0.0};
    if (c.contains("center")) center = {c["center"][0].get<double>(), c["center"][1].get<double>()};
    return DomainBoundary::circle(radius, center);
  }
  throw ConfigError("domain file must define a 'circle' boundary");
}

inline DomainBoundary load_domain(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open domain file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed domain file " + path + ": " + e.what());
  }
  return domain_from_json(j);
}

// ---------------------------------------------------------------------------
// CSV writers
// ---------------------------------------------------------------------------

inline std::string trace_csv(const Trace& t, const std::string& hash) {
  std::ostringstream out;
  out << "# config_hash=" << hash << "\n";
  out << "theta,u,weight\n";
  for (int i = 0; i < t.values.size(); ++i)
    out << format17(t.params[i]) << ',' << format17(t.values(i)) << ',' << format17(t.weights(i))
        << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// SVG overlay of polygons (truth / initial / recovered)
// ---------------------------------------------------------------------------

inline std::string polygon_overlay_svg(const std::vector<std::pair<std::string, Polygon>>& layers,
                                       const DomainBoundary& domain, const std::string& hash) {
  double extent = 1.0;
  if (domain.is_circle()) extent = domain.radius() + std::fabs(domain.center().x) +
                                   std::fabs(domain.center().y);
  for (const auto& [name, poly] : layers)
    for (const auto& v : poly.vertices()) extent = std::max({extent, std::fabs(v.x), std::fabs(v.y)});
  extent *= 1.1;
  const int size = 640;
  auto sx = [&](double x) { return 0.5 * size * (1.0 + x / extent); };
  auto sy = [&](double y) { return 0.5 * size * (1.0 - y / extent); };

  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"};
  std::ostringstream out;
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out << "<!-- config_hash=" << hash << " -->\n";
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size
      << "\" viewBox=\"0 0 " << size << ' ' << size << "\">\n";
  if (domain.is_circle()) {
    out << "  <circle cx=\"" << sx(domain.center().x) << "\" cy=\"" << sy(domain.center().y)
        << "\" r=\"" << 0.5 * size * domain.radius() / extent
        << "\" fill=\"none\" stroke=\"#888888\" stroke-width=\"1\"/>\n";
  }
  int color = 0;
  for (const auto& [name, poly] : layers) {
    out << "  <polygon points=\"";
    for (const auto& v : poly.vertices()) out << sx(v.x) << ',' << sy(v.y) << ' ';
    out << "\" fill=\"none\" stroke=\"" << palette[color % 5]
        << "\" stroke-width=\"2\"><title>" << name << "</title></polygon>\n";
    ++color;
  }
  out << "  <text x=\"10\" y=\"20\" font-size=\"14\" font-family=\"monospace\">";
  int legend = 0;
  for (const auto& [name, poly] : layers) {
    if (legend++) out << "  |  ";
    out << name;
  }
  out << "</text>\n</svg>\n";
  return out.str();
}

}  // namespace polystab
