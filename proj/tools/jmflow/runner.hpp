// Experiment orchestration: dispatch, output writing, and the run ledger.
#pragma once

#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "scenario.hpp"

namespace jmflow::harness {

class UnknownExperiment : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunParams {
  std::string out_dir{"out"};
  int threads{1};
  long seed{0};

  std::string state{"escape"};
  std::string to_state;
  std::string grid;
  std::string shape{"radial"};
  std::optional<double> h;
  int nodes{96};
  double t_max{50.0};
  double t0{5.0};
  int truncations{5};
  int domination_samples{0};
  double horizon{200.0};
  double alpha{0.9};
  double radius{2.0};
  std::vector<int> patch_shape{5, 5};
  double spacing{0.1};
  int n_max{3};
  int scales{5};
  double vel_scale{1.0};
  int count{3};
  double perturbation{0.2};
};

struct RunRecord {
  std::string command;
  std::string scenario_path;
  std::string scenario_hash;
  nlohmann::json parameters;
  std::vector<std::string> outputs;
  double wall_time_s{0.0};
  std::string version;
  int exit_code{0};

  nlohmann::json to_json() const;
};

const std::vector<std::string>& experiment_names();
std::string jmflow_version();

// Runs one experiment: writes its report JSON and CSV outputs under
// params.out_dir and appends the record to <out_dir>/runs.jsonl under an
// exclusive file lock.  The phi cache persists to $JMFLOW_CACHE_DIR when set.
// Unknown names raise UnknownExperiment; module errors propagate.
RunRecord run_experiment(const std::string& name, const Scenario& scenario,
                         const RunParams& params);

// RFC 4180 rows: quoted strings when needed, %.17g numbers, CRLF line ends.
class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path);
  void field(const std::string& s);
  void field(const char* s) { field(std::string(s)); }
  void field(double x);
  void field(long x);
  void field(int x) { field(static_cast<long>(x)); }
  void field(bool b) { field(std::string(b ? "true" : "false")); }
  void endrow();

 private:
  std::ofstream out_;
  bool first_{true};
};

}  // namespace jmflow::harness
