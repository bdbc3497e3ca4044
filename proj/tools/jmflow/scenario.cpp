#include "scenario.hpp"

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace jmflow::harness {

using nlohmann::json;

const PhaseState& Scenario::state(const std::string& name) const {
  const auto it = states.find(name);
  if (it == states.end()) throw std::out_of_range("scenario has no state named '" + name + "'");
  return it->second;
}

const GridSpec& Scenario::grid(const std::string& name) const {
  const auto it = grids.find(name);
  if (it == grids.end()) throw std::out_of_range("scenario has no grid named '" + name + "'");
  return it->second;
}

const Vec& Scenario::shape(const std::string& name) const {
  const auto it = shapes.find(name);
  if (it == shapes.end()) throw std::out_of_range("scenario has no shape named '" + name + "'");
  return it->second;
}

double Scenario::tolerance(const std::string& name, double fallback) const {
  const auto it = tolerances.find(name);
  return it == tolerances.end() ? fallback : it->second;
}

std::string file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::uint64_t h = 1469598103934665603ull;
  char c;
  while (in.get(c)) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

Vec parse_vec(const json& j, const std::string& field, int expected) {
  if (!j.is_array()) throw SchemaError(field, "expected an array of numbers");
  if (expected >= 0 && static_cast<int>(j.size()) != expected) {
    throw SchemaError(field, "expected " + std::to_string(expected) + " entries, got " +
                                 std::to_string(j.size()));
  }
  Vec v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) {
    const json& e = j[i];
    if (!e.is_number()) throw SchemaError(field + "[" + std::to_string(i) + "]", "not a number");
    v[static_cast<Eigen::Index>(i)] = e.get<double>();
    if (!std::isfinite(v[static_cast<Eigen::Index>(i)])) {
      throw SchemaError(field + "[" + std::to_string(i) + "]", "not finite");
    }
  }
  return v;
}

void require_collision_free(const MassSystem& ms, const Vec& q, const std::string& what) {
  if (!collision_free(ms, q)) {
    throw CollisionError(what + ": configuration at or inside the collision cutoff");
  }
}

GridSpec parse_grid(const json& j, const std::string& field, const Scenario& sc) {
  GridSpec spec;
  const int coords = sc.ms.coords();
  if (j.contains("points")) {
    const json& pts = j["points"];
    if (!pts.is_array() || pts.empty()) throw SchemaError(field + ".points", "expected rows");
    spec.points = Mat(pts.size(), coords);
    for (std::size_t r = 0; r < pts.size(); ++r) {
      spec.points.row(r) =
          parse_vec(pts[r], field + ".points[" + std::to_string(r) + "]", coords).transpose();
    }
  } else if (j.contains("lattice")) {
    const json& lat = j["lattice"];
    LatticeSpec ls;
    Vec center;
    if (lat.contains("center_state")) {
      const std::string name = lat["center_state"].get<std::string>();
      const auto it = sc.states.find(name);
      if (it == sc.states.end()) {
        throw SchemaError(field + ".lattice.center_state", "no state named '" + name + "'");
      }
      center = it->second.q;
    } else if (lat.contains("center")) {
      center = parse_vec(lat["center"], field + ".lattice.center", coords);
    } else {
      throw SchemaError(field + ".lattice", "needs center or center_state");
    }
    if (!lat.contains("axes") || !lat["axes"].is_array() || lat["axes"].empty()) {
      throw SchemaError(field + ".lattice.axes", "expected a list of axis vectors");
    }
    if (!lat.contains("shape") || !lat["shape"].is_array() ||
        lat["shape"].size() != lat["axes"].size()) {
      throw SchemaError(field + ".lattice.shape", "expected one extent per axis");
    }
    const double spacing = lat.value("spacing", 1.0);
    if (!(spacing > 0.0)) throw SchemaError(field + ".lattice.spacing", "must be positive");
    ls.axes = Mat(coords, lat["axes"].size());
    for (std::size_t a = 0; a < lat["axes"].size(); ++a) {
      ls.axes.col(a) =
          spacing * parse_vec(lat["axes"][a], field + ".lattice.axes[" + std::to_string(a) + "]",
                              coords);
      const int extent = lat["shape"][a].get<int>();
      if (extent < 1) throw SchemaError(field + ".lattice.shape", "extents must be >= 1");
      ls.shape.push_back(extent);
    }
    ls.origin = center;
    for (std::size_t a = 0; a < ls.shape.size(); ++a) {
      ls.origin -= 0.5 * (ls.shape[a] - 1) * ls.axes.col(a);
    }
    spec.points = lattice_points(ls);
    spec.lattice = ls;
  } else {
    throw SchemaError(field, "grid needs points or lattice");
  }
  for (int r = 0; r < spec.points.rows(); ++r) {
    require_collision_free(sc.ms, spec.points.row(r).transpose(),
                           "grid " + field + " row " + std::to_string(r));
  }
  return spec;
}

}  // namespace

Scenario load_scenario(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("scenario file not found: " + path);

  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw SchemaError(path, std::string("parse error: ") + e.what());
  }

  if (!doc.contains("jmflow_schema")) throw SchemaError("jmflow_schema", "missing");
  if (!doc["jmflow_schema"].is_number_integer() || doc["jmflow_schema"].get<int>() != 1) {
    throw SchemaError("jmflow_schema", "unsupported version, expected 1");
  }

  Scenario sc;
  sc.path = path;
  sc.hash = file_hash(path);

  if (!doc.contains("masses") || !doc["masses"].is_array() || doc["masses"].empty()) {
    throw SchemaError("masses", "expected a nonempty array");
  }
  std::vector<double> masses;
  for (std::size_t i = 0; i < doc["masses"].size(); ++i) {
    const json& m = doc["masses"][i];
    const std::string field = "masses[" + std::to_string(i) + "]";
    if (!m.is_number()) throw SchemaError(field, "not a number");
    const double val = m.get<double>();
    if (!(val > 0.0) || !std::isfinite(val)) throw SchemaError(field, "must be positive");
    masses.push_back(val);
  }
  if (!doc.contains("dim") || !doc["dim"].is_number_integer() || doc["dim"].get<int>() < 1) {
    throw SchemaError("dim", "expected a positive integer");
  }
  sc.ms = make_mass_system(masses, doc["dim"].get<int>());
  sc.reduced = doc.value("reduced", false);

  if (doc.contains("states")) {
    if (!doc["states"].is_object()) throw SchemaError("states", "expected an object");
    for (const auto& [name, st] : doc["states"].items()) {
      const std::string field = "states." + name;
      if (!st.contains("q") || !st.contains("v")) throw SchemaError(field, "needs q and v");
      PhaseState ps;
      ps.q = parse_vec(st["q"], field + ".q", sc.ms.coords());
      ps.v = parse_vec(st["v"], field + ".v", sc.ms.coords());
      if (sc.reduced) ps = reduce_to_center_of_mass(sc.ms, ps);
      require_collision_free(sc.ms, ps.q, "state '" + name + "'");
      sc.states.emplace(name, std::move(ps));
    }
  }

  if (doc.contains("shapes")) {
    if (!doc["shapes"].is_object()) throw SchemaError("shapes", "expected an object");
    for (const auto& [name, sh] : doc["shapes"].items()) {
      sc.shapes.emplace(name, parse_vec(sh, "shapes." + name, sc.ms.coords()));
    }
  }

  if (doc.contains("grids")) {
    if (!doc["grids"].is_object()) throw SchemaError("grids", "expected an object");
    for (const auto& [name, g] : doc["grids"].items()) {
      sc.grids.emplace(name, parse_grid(g, "grids." + name, sc));
    }
  }

  if (doc.contains("tolerances")) {
    if (!doc["tolerances"].is_object()) throw SchemaError("tolerances", "expected an object");
    for (const auto& [name, t] : doc["tolerances"].items()) {
      if (!t.is_number()) throw SchemaError("tolerances." + name, "not a number");
      sc.tolerances.emplace(name, t.get<double>());
    }
  }

  return sc;
}

}  // namespace jmflow::harness
