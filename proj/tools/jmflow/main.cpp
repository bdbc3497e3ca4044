#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "jmflow/slice.hpp"
#include "runner.hpp"
#include "scenario.hpp"

namespace {

using jmflow::harness::RunParams;

void add_common(CLI::App* cmd, RunParams& p) {
  cmd->add_option("--state", p.state, "base state name");
  cmd->add_option("--energy", p.h, "energy level (default: tolerances.h or the state's energy)");
  cmd->add_option("--nodes", p.nodes, "segment count of the inner action solves");
}

void add_cone(CLI::App* cmd, RunParams& p) {
  cmd->add_option("--shape", p.shape, "shape vector name");
  cmd->add_option("--alpha", p.alpha, "cone cosine bound");
  cmd->add_option("--radius", p.radius, "cone inner radius");
  cmd->add_option("--horizon", p.horizon, "limit-shape fit horizon");
}

void add_patch(CLI::App* cmd, RunParams& p) {
  cmd->add_option("--patch-shape", p.patch_shape, "lattice extents, one per reduced axis")
      ->delimiter(',');
  cmd->add_option("--spacing", p.spacing, "lattice spacing");
}

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const jmflow::harness::SchemaError*>(&e)) return "schema";
  if (dynamic_cast<const jmflow::CollisionError*>(&e)) return "collision";
  if (dynamic_cast<const jmflow::InsufficientScales*>(&e)) return "insufficient_scales";
  if (dynamic_cast<const std::domain_error*>(&e)) return "domain";
  if (dynamic_cast<const std::out_of_range*>(&e)) return "name_resolution";
  if (dynamic_cast<const std::invalid_argument*>(&e)) return "invalid_argument";
  return "runtime";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"free-time action potentials, rays, horofunctions, and slice experiments"};
  app.require_subcommand(1);
  app.fallthrough();

  RunParams p;
  std::string scenario_path;
  bool json_stdout = false;
  app.add_option("--scenario", scenario_path, "scenario file")->required();
  app.add_option("--out", p.out_dir, "output directory");
  app.add_option("--threads", p.threads, "worker threads for the callee module");
  app.add_option("--seed", p.seed, "seed for sampled diagnostics");
  app.add_flag("--json", json_stdout, "print the run record as JSON");

  CLI::App* phi = app.add_subcommand("phi", "free-time action potential between two states");
  add_common(phi, p);
  phi->add_option("--x", p.state, "from state");
  phi->add_option("--y", p.to_state, "to state")->required();

  CLI::App* ray = app.add_subcommand("ray", "minimizing-ray membership certificate");
  add_common(ray, p);
  ray->add_option("--t-max", p.t_max, "integration horizon");

  CLI::App* bus = app.add_subcommand("busemann", "normalized Busemann estimate on a grid");
  add_common(bus, p);
  bus->add_option("--grid", p.grid, "grid name")->required();
  bus->add_option("--t0", p.t0, "first truncation time");
  bus->add_option("--truncations", p.truncations, "truncation count (t0 * 2^k)");
  bus->add_option("--domination-samples", p.domination_samples,
                  "sampled pairs for the domination check");

  CLI::App* visc = app.add_subcommand("viscosity", "Hamilton-Jacobi residual on a lattice grid");
  add_common(visc, p);
  visc->add_option("--grid", p.grid, "lattice grid name")->required();
  visc->add_option("--t0", p.t0, "first truncation time");
  visc->add_option("--truncations", p.truncations, "truncation count");

  CLI::App* ls = app.add_subcommand("limit-shape", "asymptotic velocity of a datum");
  add_common(ls, p);
  ls->add_option("--horizon", p.horizon, "fit horizon");

  CLI::App* solve = app.add_subcommand("shape-solve", "fixed-shape velocity at a configuration");
  add_common(solve, p);
  add_cone(solve, p);

  CLI::App* slice = app.add_subcommand("slice", "velocity-field patch and Hausdorff measure");
  add_common(slice, p);
  add_cone(slice, p);
  add_patch(slice, p);

  CLI::App* dim = app.add_subcommand("dimension", "box-counting dimension of the slice cloud");
  add_common(dim, p);
  add_cone(dim, p);
  add_patch(dim, p);
  dim->add_option("--n-max", p.n_max, "backward unit flow steps");
  dim->add_option("--scales", p.scales, "dyadic scales");
  dim->add_option("--vel-scale", p.vel_scale, "velocity column weight");

  CLI::App* comp = app.add_subcommand("compactness", "perturbed family convergence diagnostics");
  add_common(comp, p);
  comp->add_option("--grid", p.grid, "grid name")->required();
  comp->add_option("--count", p.count, "family size before the limit member");
  comp->add_option("--perturbation", p.perturbation, "scale offset c in (1 + c/n)");
  comp->add_option("--t-max", p.t_max, "membership integration horizon");
  comp->add_option("--t0", p.t0, "first truncation time");
  comp->add_option("--truncations", p.truncations, "truncation count");

  app.add_subcommand("verify-all", "curated pipeline over the scenario with checks.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    const jmflow::harness::Scenario sc = jmflow::harness::load_scenario(scenario_path);
    const jmflow::harness::RunRecord rec = jmflow::harness::run_experiment(name, sc, p);
    if (json_stdout) {
      std::cout << rec.to_json().dump(2) << "\n";
    } else {
      std::printf("%s: %zu output(s) under %s (%.2fs)\n", name.c_str(), rec.outputs.size(),
                  p.out_dir.c_str(), rec.wall_time_s);
    }
    return rec.exit_code;
  } catch (const jmflow::harness::UnknownExperiment& e) {
    std::cout << nlohmann::json{{"error", {{"kind", "usage"}, {"message", e.what()}}}}.dump()
              << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cout << nlohmann::json{{"error", {{"kind", error_kind(e)}, {"message", e.what()}}}}.dump()
              << "\n";
    return 1;
  }
}
