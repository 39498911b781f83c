#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "morseflow/homology.hpp"
#include "morseflow/invariants.hpp"

namespace morseflow {

struct ScenarioGrid {
  int n_t = 64;
  int n_s = 775;
  double S = 26.0;
  double step_h = 0.05;     // heat flow step used while shooting
  double s_budget = 400.0;  // flow-time budget of the shooting runs
};

// One self-describing run configuration.  Scenarios ship as JSON files under
// configs/; every field (including defaults) is echoed into the run record.
struct Scenario {
  std::string id;
  std::string backend = "torus1";  // torus1 | torus2 | sphere2
  Perturbation perturbation;
  Eigen::VectorXi winding;  // free homotopy class; zero vector on the sphere
  ScenarioGrid grid;
  EpsEnumOptions lift;
  std::vector<double> eps_list;    // sorted strictly descending, in (0, 1]
  std::vector<double> count_eps;   // eps values of the count-check stage
  std::vector<double> p_list;      // norm exponents of the estimate stages
  double action_cut = 1.0;
  std::uint64_t seed = 1;
  int starts_per_dim = 8;
  double shift_sigma = 0.07;          // probe shift of the recovery check
  std::vector<double> homology_cuts;  // ascending nested action cuts
  double homology_eps = 0.1;
  std::string reference;  // homology reference table key; empty skips it

  Manifold manifold() const;
  CylinderGridSpec grid_spec() const;
};

// Throws ConfigError with the offending field on any invariant violation.
void validate_scenario(const Scenario& s);

// Parses and validates a scenario file.  Parse failures, missing required
// keys and invariant violations all surface as ConfigError.
Scenario load_scenario(const std::string& config_path);

// The shipped scenarios: t1-contractible, t1-winding, t1-wobble, t2-product
// (the configs/ files mirror these byte for byte).
Scenario builtin_scenario(const std::string& id);
std::vector<std::string> builtin_scenario_ids();

// Canonical JSON echo of a scenario, 2-space indent; load_scenario of this
// string reproduces the scenario.
std::string scenario_json_string(const Scenario& s);

struct DriverOptions {
  std::string config_path;
  std::string out_dir = "runs";
  std::optional<std::uint64_t> seed;  // overrides the scenario seed
  std::vector<double> eps_override;   // overrides eps_list
  std::string stage;                  // estimates sub-stage filter
  std::string format = "json";        // report re-emission filter
  std::vector<std::string> modes;     // homology modes (default heat+floer)
};

struct RunHandle {
  std::string run_id;  // "<scenario>/<command>-rNNN"
  std::string dir;
  std::vector<std::string> artifacts;
};

// Executes one pipeline command against an already validated scenario and
// writes the run directory: artifacts first (atomic rename per file), the
// record run.json last.  Run directories are append-only; a scenario id
// never maps to two different configurations inside one store.
RunHandle run_command(const std::string& command, const Scenario& s,
                      const DriverOptions& opts);

// CLI entry: loads the config, applies overrides, runs, prints the run id
// and artifact list.  Returns 0; errors propagate as exceptions.
int run(const std::string& command, const DriverOptions& opts);

// Re-renders the artifacts of a stored run from its record.  Every
// regenerated byte must match the recorded digest (AcceptanceError
// otherwise); unknown ids throw UnknownRun.
void emit_report(const std::string& run_id, const std::string& format,
                 const std::string& out_dir);

std::uint64_t fnv1a(const void* data, std::size_t n);
std::string fnv1a_hex(const std::string& bytes);

}  // namespace morseflow
