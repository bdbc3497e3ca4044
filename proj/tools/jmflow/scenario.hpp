// Scenario files: named states, grids, and shape vectors over one mass
// system, with tolerance overrides.  JSON, schema version key jmflow_schema.
#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <string>

#include "jmflow/horofunction.hpp"
#include "jmflow/nbody.hpp"

namespace jmflow::harness {

class SchemaError : public std::runtime_error {
 public:
  SchemaError(const std::string& field, const std::string& what)
      : std::runtime_error("scenario schema: " + field + ": " + what), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct GridSpec {
  Mat points;                        // one configuration per row
  std::optional<LatticeSpec> lattice;  // set when the grid was given as a lattice
};

struct Scenario {
  MassSystem ms;
  bool reduced{false};
  std::map<std::string, PhaseState> states;
  std::map<std::string, GridSpec> grids;
  std::map<std::string, Vec> shapes;
  std::map<std::string, double> tolerances;
  std::string path;
  std::string hash;

  const PhaseState& state(const std::string& name) const;
  const GridSpec& grid(const std::string& name) const;
  const Vec& shape(const std::string& name) const;
  double tolerance(const std::string& name, double fallback) const;
};

// Parses and validates a scenario file.  Schema violations raise SchemaError
// naming the field; a state under the collision cutoff raises CollisionError
// naming the state.  With "reduced": true every state is shifted to the
// center-of-mass frame.
Scenario load_scenario(const std::string& path);

// FNV-1a 64 over the file bytes, 16 hex digits.
std::string file_hash(const std::string& path);

}  // namespace jmflow::harness
