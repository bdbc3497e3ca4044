#include "runner.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <random>

#include "jmflow/action.hpp"
#include "jmflow/integrate.hpp"
#include "jmflow/rays.hpp"
#include "jmflow/shape.hpp"
#include "jmflow/slice.hpp"

namespace jmflow::harness {

namespace fs = std::filesystem;
using nlohmann::json;

std::string jmflow_version() { return "1.0.0"; }

const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names = {
      "phi",   "ray",   "busemann",  "viscosity",   "limit-shape",
      "shape-solve", "slice", "dimension", "compactness", "verify-all"};
  return names;
}

CsvWriter::CsvWriter(const std::string& path) : out_(path, std::ios::binary) {
  if (!out_) throw std::runtime_error("cannot open " + path);
}

void CsvWriter::field(const std::string& s) {
  if (!first_) out_ << ",";
  first_ = false;
  if (s.find_first_of(",\"\r\n") == std::string::npos) {
    out_ << s;
    return;
  }
  out_ << '"';
  for (char c : s) {
    if (c == '"') out_ << '"';
    out_ << c;
  }
  out_ << '"';
}

void CsvWriter::field(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  field(std::string(buf));
}

void CsvWriter::field(long x) { field(std::to_string(x)); }

void CsvWriter::endrow() {
  out_ << "\r\n";
  first_ = true;
}

nlohmann::json RunRecord::to_json() const {
  json j;
  j["command"] = command;
  j["scenario"] = scenario_path;
  j["scenario_hash"] = scenario_hash;
  j["parameters"] = parameters;
  j["outputs"] = outputs;
  j["wall_time_s"] = wall_time_s;
  j["version"] = version;
  return j;
}

namespace {

json vec_json(const Vec& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << j.dump(2) << "\n";
}

std::string out_path(const RunParams& p, const std::string& name) {
  return (fs::path(p.out_dir) / name).string();
}

double resolve_h(const Scenario& sc, const RunParams& p, const PhaseState* primary) {
  double h;
  if (p.h) {
    h = *p.h;
  } else if (sc.tolerances.count("h")) {
    h = sc.tolerances.at("h");
  } else if (primary) {
    h = energy(sc.ms, *primary);
  } else {
    throw std::domain_error("h is required: pass --energy or set tolerances.h in the scenario");
  }
  if (h < 0.0) throw std::domain_error("h must be nonnegative, got " + std::to_string(h));
  return h;
}

const char* phi_status(ActionResult::Status s) {
  switch (s) {
    case ActionResult::Status::converged: return "converged";
    case ActionResult::Status::max_iter: return "max_iter";
    case ActionResult::Status::near_collision: return "near_collision";
  }
  return "unknown";
}

Trajectory integrate_or_throw(const MassSystem& ms, const PhaseState& s, double T,
                              const IntegrateOptions& opts = {}) {
  IntegrationResult res = integrate(ms, s, 0.0, T, opts);
  if (!res.ok()) {
    throw std::runtime_error("integration reached a singularity: " + res.singularity->message);
  }
  return std::move(res.trajectory);
}

json run_phi(const Scenario& sc, const RunParams& p, PhiCache& cache,
             std::vector<std::string>& outs) {
  const PhaseState& x = sc.state(p.state);
  if (p.to_state.empty()) throw std::domain_error("phi needs --y <state>");
  const PhaseState& y = sc.state(p.to_state);
  if (!p.h && !sc.tolerances.count("h")) {
    throw std::domain_error("phi needs --energy or tolerances.h");
  }
  const double h = resolve_h(sc, p, nullptr);

  PhiOptions po;
  po.nodes = p.nodes;
  const FreeTimeResult r = phi_free(sc.ms, h, x.q, y.q, po, &cache);

  json j;
  j["h"] = h;
  j["value"] = r.value;
  j["T_star"] = r.T_star;
  j["gradient_norm"] = r.inner.gradient_norm;
  j["status"] = phi_status(r.inner.status);
  j["nodes"] = po.nodes;
  j["probes"] = r.history.size();
  j["cached"] = r.cached;
  j["bracket_fallback"] = r.bracket_fallback;
  write_json_file(out_path(p, "phi.json"), j);
  outs.push_back(out_path(p, "phi.json"));

  CsvWriter csv(out_path(p, "phi_probes.csv"));
  csv.field("T");
  csv.field("value");
  csv.endrow();
  for (const ProbeRecord& pr : r.history) {
    csv.field(pr.T);
    csv.field(pr.value);
    csv.endrow();
  }
  outs.push_back(out_path(p, "phi_probes.csv"));
  return j;
}

json write_certificate(const RunParams& p, const std::string& stem, const RayCertificate& cert,
                       double h, std::vector<std::string>& outs) {
  json j;
  j["h"] = h;
  j["verdict"] = to_string(cert.verdict);
  j["reason"] = cert.reason;
  j["t_max"] = cert.t_max;
  j["windows"] = cert.windows.size();
  write_json_file(out_path(p, stem + ".json"), j);
  outs.push_back(out_path(p, stem + ".json"));

  CsvWriter csv(out_path(p, stem + "_windows.csv"));
  for (const char* head : {"a", "b", "action", "phi", "gap", "refined_gap", "evaluated", "stable"})
    csv.field(head);
  csv.endrow();
  for (const WindowGap& w : cert.windows) {
    csv.field(w.window.a);
    csv.field(w.window.b);
    csv.field(w.action);
    csv.field(w.phi);
    csv.field(w.gap);
    csv.field(w.refined_gap);
    csv.field(w.evaluated);
    csv.field(w.stable);
    csv.endrow();
  }
  outs.push_back(out_path(p, stem + "_windows.csv"));
  return j;
}

json run_ray(const Scenario& sc, const RunParams& p, PhiCache& cache,
             std::vector<std::string>& outs) {
  const PhaseState& s = sc.state(p.state);
  const double h = resolve_h(sc, p, &s);
  RayOptions ro;
  ro.t_max = p.t_max;
  ro.min_window = std::max(ro.min_window, p.t_max / 64.0);
  ro.phi.nodes = p.nodes;
  ro.threads = p.threads;
  const RayCertificate cert = geodesic_ray_membership(sc.ms, s, ro, &cache);
  return write_certificate(p, "ray", cert, h, outs);
}

json busemann_outputs(const Scenario& sc, const RunParams& p, PhiCache& cache,
                      std::vector<std::string>& outs, const HorofunctionField& field) {
  json j;
  j["h"] = field.h;
  j["points"] = field.points();
  j["converged"] = field.converged;
  j["truncations"] = field.truncations;
  j["increment_history"] = field.increment_history;
  j["excluded"] = field.excluded;

  if (p.domination_samples > 0) {
    std::vector<int> rows;
    for (int i = 0; i < field.points(); ++i) {
      if (!field.is_excluded(i)) rows.push_back(i);
    }
    std::vector<std::pair<int, int>> samples;
    if (rows.size() >= 2) {
      std::mt19937 gen(static_cast<unsigned>(p.seed));
      std::uniform_int_distribution<int> pick(0, static_cast<int>(rows.size()) - 1);
      while (static_cast<int>(samples.size()) < p.domination_samples) {
        const int a = pick(gen), b = pick(gen);
        if (a != b) samples.emplace_back(rows[a], rows[b]);
      }
    }
    PhiOptions po;
    po.nodes = p.nodes;
    j["domination_samples"] = samples.size();
    j["domination_max"] = domination_check(sc.ms, field, samples, po, &cache);
  }

  write_json_file(out_path(p, "busemann.json"), j);
  outs.push_back(out_path(p, "busemann.json"));

  CsvWriter csv(out_path(p, "busemann_values.csv"));
  csv.field("index");
  for (int c = 0; c < sc.ms.coords(); ++c) csv.field("x" + std::to_string(c));
  csv.field("value");
  csv.field("last_increment");
  csv.field("excluded");
  csv.endrow();
  for (int i = 0; i < field.points(); ++i) {
    csv.field(i);
    for (int c = 0; c < sc.ms.coords(); ++c) csv.field(field.grid(i, c));
    csv.field(field.values[i]);
    csv.field(field.last_increment.size() > static_cast<Eigen::Index>(i) ? field.last_increment[i]
                                                                         : 0.0);
    csv.field(field.is_excluded(i));
    csv.endrow();
  }
  outs.push_back(out_path(p, "busemann_values.csv"));
  return j;
}

HorofunctionField busemann_field(const Scenario& sc, const RunParams& p, PhiCache& cache,
                                 const Mat& grid) {
  const PhaseState& s = sc.state(p.state);
  const double h = resolve_h(sc, p, &s);
  const double t_end = p.t0 * std::pow(2.0, p.truncations - 1);
  const Trajectory traj = integrate_or_throw(sc.ms, s, t_end);
  BusemannOptions bo;
  bo.t0 = p.t0;
  bo.max_truncations = p.truncations;
  bo.phi.nodes = p.nodes;
  bo.threads = p.threads;
  return busemann_estimate(sc.ms, traj, h, grid, bo, &cache);
}

json run_busemann(const Scenario& sc, const RunParams& p, PhiCache& cache,
                  std::vector<std::string>& outs) {
  if (p.grid.empty()) throw std::domain_error("busemann needs --grid <name>");
  const GridSpec& grid = sc.grid(p.grid);
  HorofunctionField field = busemann_field(sc, p, cache, grid.points);
  if (grid.lattice) field.lattice = grid.lattice;
  return busemann_outputs(sc, p, cache, outs, field);
}

json run_viscosity(const Scenario& sc, const RunParams& p, PhiCache& cache,
                   std::vector<std::string>& outs) {
  if (p.grid.empty()) throw std::domain_error("viscosity needs --grid <name>");
  const GridSpec& grid = sc.grid(p.grid);
  if (!grid.lattice) throw std::domain_error("viscosity needs a lattice grid");
  HorofunctionField field = busemann_field(sc, p, cache, grid.points);
  field.lattice = grid.lattice;
  const ViscosityReport rep = viscosity_residual(sc.ms, field, field.h);

  json j;
  j["h"] = field.h;
  j["median_abs_residual"] = rep.median_abs_residual;
  j["q90_abs_residual"] = rep.q90_abs_residual;
  j["evaluated"] = rep.evaluated;
  j["spacing"] = mass_norm(sc.ms, grid.lattice->axes.col(0));
  write_json_file(out_path(p, "viscosity.json"), j);
  outs.push_back(out_path(p, "viscosity.json"));

  CsvWriter csv(out_path(p, "viscosity.csv"));
  for (const char* head : {"point_index", "residual", "gradient_norm", "masked"}) csv.field(head);
  csv.endrow();
  for (std::size_t i = 0; i < rep.point_index.size(); ++i) {
    csv.field(rep.point_index[i]);
    csv.field(rep.residual[static_cast<Eigen::Index>(i)]);
    csv.field(rep.gradient_norm[static_cast<Eigen::Index>(i)]);
    csv.field(static_cast<bool>(rep.masked[i]));
    csv.endrow();
  }
  outs.push_back(out_path(p, "viscosity.csv"));
  return j;
}

json run_limit_shape(const Scenario& sc, const RunParams& p, PhiCache&,
                     std::vector<std::string>& outs) {
  const PhaseState& s = sc.state(p.state);
  ShapeFitOptions fo;
  fo.horizon = p.horizon;
  const LimitShapeEstimate est = limit_shape(sc.ms, s, fo);

  json j;
  j["a"] = vec_json(est.a);
  j["half_a_sq"] = 0.5 * std::pow(mass_norm(sc.ms, est.a), 2.0);
  j["h"] = est.h;
  if (est.p) j["p"] = *est.p;
  j["fit_residual"] = est.fit_residual;
  j["horizon"] = est.horizon;
  write_json_file(out_path(p, "limit_shape.json"), j);
  outs.push_back(out_path(p, "limit_shape.json"));
  return j;
}

ConeSpec cone_from(const Scenario& sc, const RunParams& p) {
  ConeSpec cone;
  cone.a = sc.shape(p.shape);
  cone.alpha = p.alpha;
  cone.r = p.radius;
  return cone;
}

json run_shape_solve(const Scenario& sc, const RunParams& p, PhiCache&,
                     std::vector<std::string>& outs) {
  const ConeSpec cone = cone_from(sc, p);
  const Vec x = sc.state(p.state).q;
  ShapeSolveOptions so;
  so.fit.horizon = p.horizon;
  const ShapeSolve solve = solve_velocity_field(sc.ms, cone, x, so);

  json j;
  j["v"] = vec_json(solve.v);
  j["residual"] = solve.residual;
  j["iterations"] = solve.iterations;
  j["status"] = to_string(solve.status);
  j["energy"] = solve.energy;
  j["energy_consistency"] = energy_consistency(sc.ms, solve, cone);
  j["half_a_sq"] = 0.5 * std::pow(mass_norm(sc.ms, cone.a), 2.0);
  write_json_file(out_path(p, "shape_solve.json"), j);
  outs.push_back(out_path(p, "shape_solve.json"));
  return j;
}

SlicePatch solved_patch(const Scenario& sc, const RunParams& p) {
  const ConeSpec cone = cone_from(sc, p);
  const Vec center = sc.state(p.state).q;
  ShapeSolveOptions so;
  so.fit.horizon = p.horizon;
  SlicePatch patch =
      build_slice_patch(sc.ms, cone, center, p.patch_shape, p.spacing, so, p.threads);
  differential_of_field(sc.ms, patch);
  return patch;
}

json run_slice(const Scenario& sc, const RunParams& p, PhiCache&,
               std::vector<std::string>& outs) {
  const SlicePatch patch = solved_patch(sc, p);
  const double cell = std::pow(p.spacing, static_cast<double>(p.patch_shape.size()));
  const PatchMeasure measure = hausdorff_measure_patch(patch, cell);

  double min_j = std::numeric_limits<double>::infinity(), max_j = 1.0;
  int converged = 0;
  for (const SlicePoint& sp : patch.points) {
    if (sp.converged) ++converged;
    if (sp.has_differential) {
      min_j = std::min(min_j, sp.jacobian);
      max_j = std::max(max_j, sp.jacobian);
    }
  }

  json j;
  j["measure"] = measure.value;
  j["evaluated"] = measure.evaluated;
  j["dropped"] = measure.dropped;
  j["unreliable"] = measure.unreliable;
  j["converged"] = converged;
  j["points"] = patch.points.size();
  j["cell_volume"] = cell;
  j["min_jacobian"] = measure.evaluated > 0 ? min_j : 0.0;
  j["max_jacobian"] = max_j;
  write_json_file(out_path(p, "slice.json"), j);
  outs.push_back(out_path(p, "slice.json"));

  CsvWriter csv(out_path(p, "slice_points.csv"));
  for (const char* head :
       {"index", "converged", "residual", "jacobian", "asymmetry", "has_differential",
        "drop_reason"})
    csv.field(head);
  csv.endrow();
  for (std::size_t i = 0; i < patch.points.size(); ++i) {
    const SlicePoint& sp = patch.points[i];
    csv.field(static_cast<long>(i));
    csv.field(sp.converged);
    csv.field(sp.residual);
    csv.field(sp.jacobian);
    csv.field(sp.asymmetry);
    csv.field(sp.has_differential);
    csv.field(sp.drop_reason);
    csv.endrow();
  }
  outs.push_back(out_path(p, "slice_points.csv"));
  return j;
}

json run_dimension(const Scenario& sc, const RunParams& p, PhiCache&,
                   std::vector<std::string>& outs) {
  const SlicePatch patch = solved_patch(sc, p);
  const SaturationResult sat = flow_saturate(sc.ms, patch, p.n_max, {}, p.threads);
  BoxCountOptions bo;
  bo.scales = p.scales;
  bo.vel_scale = p.vel_scale;
  const DimensionEstimate est = box_counting_dimension(sat.cloud, bo);

  json j;
  j["slope"] = est.slope;
  j["confidence"] = est.confidence;
  j["rows"] = sat.cloud.rows();
  j["discarded"] = sat.discarded;
  j["n_max"] = p.n_max;
  j["vel_scale"] = p.vel_scale;
  j["reduced_dims"] = patch.dims();
  write_json_file(out_path(p, "dimension.json"), j);
  outs.push_back(out_path(p, "dimension.json"));

  CsvWriter csv(out_path(p, "dimension_scales.csv"));
  csv.field("scale");
  csv.field("count");
  csv.endrow();
  for (std::size_t i = 0; i < est.scales.size(); ++i) {
    csv.field(est.scales[i]);
    csv.field(est.counts[i]);
    csv.endrow();
  }
  outs.push_back(out_path(p, "dimension_scales.csv"));
  return j;
}

std::vector<PhaseState> perturbed_family(const Scenario& sc, const RunParams& p) {
  const PhaseState& base = sc.state(p.state);
  std::vector<PhaseState> members;
  for (int n = 1; n <= p.count; ++n) {
    PhaseState m = base;
    m.q *= 1.0 + p.perturbation / n;
    members.push_back(std::move(m));
  }
  members.push_back(base);
  return members;
}

json run_compactness(const Scenario& sc, const RunParams& p, PhiCache& cache,
                     std::vector<std::string>& outs, const Mat* grid_override = nullptr) {
  Mat grid;
  if (grid_override) {
    grid = *grid_override;
  } else {
    if (p.grid.empty()) throw std::domain_error("compactness needs --grid <name>");
    grid = sc.grid(p.grid).points;
  }
  const std::vector<PhaseState> members = perturbed_family(sc, p);

  RayOptions ro;
  ro.t_max = p.t_max;
  ro.min_window = std::max(ro.min_window, p.t_max / 16.0);
  ro.phi.nodes = p.nodes;
  ro.threads = p.threads;
  ro.busemann.t0 = p.t0;
  ro.busemann.max_truncations = p.truncations;
  ro.busemann.threads = p.threads;
  const CompactnessReport rep = compactness_experiment(sc.ms, members, grid, ro, &cache);

  json j;
  j["members"] = rep.members.size();
  j["potential_bound_ok"] = rep.potential_bound_ok;
  j["energy_gaps"] = rep.energy_gaps;
  j["limit_calibration_max"] = rep.limit_calibration.max_residual;
  j["limit_calibration_points"] = rep.limit_calibration.times.size();
  double sup_adjacent = 0.0;
  json sup = json::array();
  for (Eigen::Index r = 0; r < rep.sup_diff.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < rep.sup_diff.cols(); ++c) row.push_back(rep.sup_diff(r, c));
    sup.push_back(row);
    if (r + 1 < rep.sup_diff.rows()) sup_adjacent = std::max(sup_adjacent, rep.sup_diff(r, r + 1));
  }
  j["sup_diff"] = sup;
  j["sup_diff_adjacent_max"] = sup_adjacent;
  write_json_file(out_path(p, "compactness.json"), j);
  outs.push_back(out_path(p, "compactness.json"));

  CsvWriter csv(out_path(p, "compactness_members.csv"));
  for (const char* head :
       {"index", "h", "energy_gap", "min_pairwise", "potential_at_x", "half_speed_sq", "verdict"})
    csv.field(head);
  csv.endrow();
  for (std::size_t i = 0; i < rep.members.size(); ++i) {
    const CompactnessMember& m = rep.members[i];
    csv.field(static_cast<long>(i));
    csv.field(m.h);
    csv.field(i < rep.energy_gaps.size() ? rep.energy_gaps[i] : 0.0);
    csv.field(m.min_pairwise);
    csv.field(m.potential_at_x);
    csv.field(m.half_speed_sq);
    csv.field(to_string(m.certificate.verdict));
    csv.endrow();
  }
  outs.push_back(out_path(p, "compactness_members.csv"));
  return j;
}

struct Check {
  std::string name;
  double value{0.0};
  double bound{0.0};
  bool pass{false};
};

json run_verify_all(const Scenario& sc, const RunParams& base, PhiCache& cache,
                    std::vector<std::string>& outs) {
  std::vector<Check> checks;
  const auto add = [&](const std::string& name, double value, double bound, bool pass) {
    checks.push_back({name, value, bound, pass});
  };
  const auto add_le = [&](const std::string& name, double value, double bound) {
    add(name, value, bound, std::isfinite(value) && value <= bound);
  };

  const PhaseState& escape = sc.state("escape");
  const double h = resolve_h(sc, base, &escape);
  PhiOptions po;
  po.nodes = base.nodes;

  {
    RunParams p = base;
    p.state = "escape";
    p.to_state = "inner";
    p.h = h;
    const json phi_xy = run_phi(sc, p, cache, outs);
    const double fwd = phi_xy["value"].get<double>();
    const double bwd = phi_free(sc.ms, h, sc.state("inner").q, escape.q, po, &cache).value;
    add_le("phi_symmetry_relative", std::abs(fwd - bwd) / std::max(fwd, 1e-12), 1e-5);
    add_le("phi_identity", phi_free(sc.ms, h, escape.q, escape.q, po, &cache).value, 1e-6);
  }

  {
    RunParams p = base;
    p.state = "escape";
    p.h = h;
    p.t_max = 24.0;
    const json ray = run_ray(sc, p, cache, outs);
    add("ray_minimizing", ray["windows"].get<double>(), 0.0,
        ray["verdict"].get<std::string>() == "minimizing");
  }

  Trajectory ray_traj;
  std::vector<double> ray_times = {0.0, 1.5, 3.0, 6.0};
  {
    RunParams p = base;
    p.state = "escape";
    p.h = h;
    p.t0 = 5.0;
    p.truncations = 3;
    p.domination_samples = 24;
    const Mat probe = sc.grid("probe").points;
    ray_traj = integrate_or_throw(sc.ms, escape, p.t0 * std::pow(2.0, p.truncations - 1));
    Mat grid(probe.rows() + static_cast<Eigen::Index>(ray_times.size()), sc.ms.coords());
    grid.topRows(probe.rows()) = probe;
    for (std::size_t k = 0; k < ray_times.size(); ++k) {
      grid.row(probe.rows() + static_cast<Eigen::Index>(k)) =
          ray_traj.state_at(ray_times[k]).q.transpose();
    }
    BusemannOptions bo;
    bo.t0 = p.t0;
    bo.max_truncations = p.truncations;
    bo.phi.nodes = p.nodes;
    bo.threads = p.threads;
    HorofunctionField field = busemann_estimate(sc.ms, ray_traj, h, grid, bo, &cache);
    const json bus = busemann_outputs(sc, p, cache, outs, field);
    add_le("busemann_domination", bus.contains("domination_max")
                                      ? bus["domination_max"].get<double>()
                                      : std::numeric_limits<double>::quiet_NaN(),
           1e-3);

    double ray_identity = 0.0;
    bool usable = true;
    const int base_row = static_cast<int>(probe.rows());
    for (std::size_t k = 0; k < ray_times.size(); ++k) {
      const int row = base_row + static_cast<int>(k);
      if (field.is_excluded(row)) usable = false;
    }
    if (usable) {
      for (std::size_t k = 1; k < ray_times.size(); ++k) {
        const double du = field.values[base_row + static_cast<int>(k)] - field.values[base_row];
        const double action = ray_traj.shifted_action_between(0.0, ray_times[k], h);
        ray_identity = std::max(ray_identity, std::abs(du - action));
      }
    } else {
      ray_identity = std::numeric_limits<double>::quiet_NaN();
    }
    add_le("busemann_ray_identity", ray_identity, 1e-3);
  }

  {
    RunParams p = base;
    p.state = "escape";
    p.horizon = 200.0;
    const json ls = run_limit_shape(sc, p, cache, outs);
    add_le("limit_shape_energy", std::abs(ls["half_a_sq"].get<double>() - h), 1e-4);
  }

  {
    RunParams p = base;
    p.state = "outpost";
    const json solve = run_shape_solve(sc, p, cache, outs);
    add("shape_solve_converged", solve["residual"].get<double>(), 1e-6,
        solve["status"].get<std::string>() == "converged" &&
            solve["residual"].get<double>() <= 1e-6);
    add_le("shape_solve_energy_consistency", solve["energy_consistency"].get<double>(), 1e-4);
  }

  {
    RunParams p = base;
    p.state = "outpost";
    p.patch_shape = {5, 5};
    p.spacing = 0.2;
    const json slice = run_slice(sc, p, cache, outs);
    add("slice_jacobian_floor", slice["min_jacobian"].get<double>(), 1.0,
        slice["dropped"].get<int>() == 0 && slice["min_jacobian"].get<double>() >= 1.0 - 1e-9);
    const double vol = slice["evaluated"].get<double>() * slice["cell_volume"].get<double>();
    const double measure = slice["measure"].get<double>();
    add("slice_measure_bounds", measure, slice["max_jacobian"].get<double>() * vol,
        measure >= vol - 1e-12 &&
            measure <= slice["max_jacobian"].get<double>() * vol + 1e-12);
  }

  {
    RunParams p = base;
    p.state = "outpost";
    p.patch_shape = {25, 25};
    p.spacing = 0.08;
    p.n_max = 3;
    const json dim = run_dimension(sc, p, cache, outs);
    add("dimension_slope", dim["slope"].get<double>(), 2.0,
        std::abs(dim["slope"].get<double>() - 2.0) <= 0.3);
  }

  {
    RunParams p = base;
    p.state = "escape";
    p.count = 2;
    p.perturbation = 0.2;
    p.t_max = 8.0;
    p.t0 = 2.0;
    p.truncations = 3;
    // Grid rows are stored samples of the limit member's own trajectory, so
    // the field stays evaluable along it and the calibration check has teeth.
    const Trajectory member_traj = integrate_or_throw(sc.ms, escape, p.t_max);
    const std::array<double, 4> targets{0.0, 1.0, 2.0, 4.0};
    Mat grid(4, sc.ms.coords());
    for (int k = 0; k < 4; ++k) {
      std::size_t best = 0;
      for (std::size_t i = 0; i < member_traj.samples(); ++i) {
        if (std::abs(member_traj.t[i] - targets[k]) < std::abs(member_traj.t[best] - targets[k]))
          best = i;
      }
      grid.row(k) = member_traj.q[best].transpose();
    }
    const json comp = run_compactness(sc, p, cache, outs, &grid);
    add("compactness_potential_bound", comp["potential_bound_ok"].get<bool>() ? 1.0 : 0.0, 1.0,
        comp["potential_bound_ok"].get<bool>());
    add_le("compactness_limit_calibration", comp["limit_calibration_max"].get<double>(), 2e-3);
    const auto gaps = comp["energy_gaps"].get<std::vector<double>>();
    bool decreasing = true;
    for (std::size_t i = 1; i + 1 < gaps.size(); ++i) {
      if (std::abs(gaps[i]) > std::abs(gaps[i - 1]) + 1e-12) decreasing = false;
    }
    add("compactness_energy_gaps_decreasing", gaps.empty() ? 0.0 : std::abs(gaps.front()), 1.0,
        decreasing);
  }

  json j;
  j["checks"] = json::array();
  bool all_pass = true;
  for (const Check& c : checks) {
    j["checks"].push_back(
        {{"name", c.name}, {"value", c.value}, {"bound", c.bound}, {"pass", c.pass}});
    all_pass = all_pass && c.pass;
  }
  j["all_pass"] = all_pass;
  write_json_file(out_path(base, "checks.json"), j);
  outs.push_back(out_path(base, "checks.json"));
  return j;
}

json params_json(const RunParams& p) {
  json j;
  j["out"] = p.out_dir;
  j["threads"] = p.threads;
  j["seed"] = p.seed;
  j["state"] = p.state;
  if (!p.to_state.empty()) j["to_state"] = p.to_state;
  if (!p.grid.empty()) j["grid"] = p.grid;
  j["shape"] = p.shape;
  if (p.h) j["h"] = *p.h;
  j["nodes"] = p.nodes;
  j["t_max"] = p.t_max;
  j["t0"] = p.t0;
  j["truncations"] = p.truncations;
  j["horizon"] = p.horizon;
  j["alpha"] = p.alpha;
  j["radius"] = p.radius;
  j["patch_shape"] = p.patch_shape;
  j["spacing"] = p.spacing;
  j["n_max"] = p.n_max;
  j["scales"] = p.scales;
  j["vel_scale"] = p.vel_scale;
  j["count"] = p.count;
  j["perturbation"] = p.perturbation;
  return j;
}

void append_ledger(const std::string& dir, const json& line) {
  const std::string path = (fs::path(dir) / "runs.jsonl").string();
  const int fd = ::open(path.c_str(), O_WRONLY | O_APPEND | O_CREAT, 0644);
  if (fd < 0) throw std::runtime_error("cannot open " + path);
  ::flock(fd, LOCK_EX);
  const std::string s = line.dump() + "\n";
  const bool ok = ::write(fd, s.data(), s.size()) == static_cast<ssize_t>(s.size());
  ::flock(fd, LOCK_UN);
  ::close(fd);
  if (!ok) throw std::runtime_error("short write to " + path);
}

std::string cache_file() {
  const char* dir = std::getenv("JMFLOW_CACHE_DIR");
  if (!dir || !*dir) return {};
  fs::create_directories(dir);
  return (fs::path(dir) / "phi-cache.txt").string();
}

}  // namespace

RunRecord run_experiment(const std::string& name, const Scenario& scenario,
                         const RunParams& params) {
  using Handler = json (*)(const Scenario&, const RunParams&, PhiCache&,
                           std::vector<std::string>&);
  static const std::map<std::string, Handler> handlers = {
      {"phi", run_phi},
      {"ray", run_ray},
      {"busemann", run_busemann},
      {"viscosity", run_viscosity},
      {"limit-shape", run_limit_shape},
      {"shape-solve", run_shape_solve},
      {"slice", run_slice},
      {"dimension",
       [](const Scenario& sc, const RunParams& p, PhiCache& c, std::vector<std::string>& o) {
         return run_dimension(sc, p, c, o);
       }},
      {"compactness",
       [](const Scenario& sc, const RunParams& p, PhiCache& c, std::vector<std::string>& o) {
         return run_compactness(sc, p, c, o);
       }},
      {"verify-all", run_verify_all}};

  const auto it = handlers.find(name);
  if (it == handlers.end()) {
    throw UnknownExperiment("unknown experiment '" + name + "'; expected one of: " + [] {
      std::string all;
      for (const std::string& n : experiment_names()) all += (all.empty() ? "" : ", ") + n;
      return all;
    }());
  }

  fs::create_directories(params.out_dir);
  PhiCache cache;
  const std::string cache_path = cache_file();
  if (!cache_path.empty() && fs::exists(cache_path)) cache.load(cache_path);

  RunRecord rec;
  rec.command = name;
  rec.scenario_path = scenario.path;
  rec.scenario_hash = scenario.hash;
  rec.parameters = params_json(params);
  rec.version = jmflow_version();

  const auto start = std::chrono::steady_clock::now();
  const json report = it->second(scenario, params, cache, rec.outputs);
  rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (name == "verify-all" && !report.value("all_pass", false)) rec.exit_code = 1;
  if (!cache_path.empty()) cache.save(cache_path);
  append_ledger(params.out_dir, rec.to_json());
  return rec;
}

}  // namespace jmflow::harness
