#include <cstdint>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "morseflow/driver.hpp"
#include "morseflow/exec.hpp"

namespace {

struct CommonArgs {
  morseflow::DriverOptions opts;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

CLI::App* add_run_command(CLI::App& app, const std::string& name,
                          const std::string& help, CommonArgs& args) {
  CLI::App* cmd = app.add_subcommand(name, help);
  cmd->add_option("--config", args.opts.config_path, "scenario config file")
      ->required();
  cmd->add_option("--out", args.opts.out_dir, "run store directory")
      ->capture_default_str();
  cmd->add_option("--seed", args.seed, "override the scenario seed")
      ->each([&args](const std::string&) { args.seed_set = true; });
  cmd->add_option("--eps", args.opts.eps_override,
                  "override eps_list (descending values)")
      ->delimiter(',');
  cmd->add_option("--format", args.opts.format, "json or csv")
      ->capture_default_str();
  return cmd;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"morseflow: heat flow moduli, adiabatic lifts and estimates"};
  app.require_subcommand(1);
  bool serial = false;
  app.add_flag("--serial", serial, "run the serial reference kernels");

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"orbits", "enumerate periodic orbits below the action cut"},
      {"heat-connect", "enumerate heat flow cylinders between orbit pairs"},
      {"floer-lift", "lift cylinders across eps_list with full histories"},
      {"count-check", "compare moduli counts before and after lifting"},
      {"homology", "build chain complexes, ranks and filtration maps"},
      {"estimates", "run the estimate and bound sweeps"},
      {"sweep", "lift across eps_list with correction and decay fits"},
  };
  std::vector<CommonArgs> args(commands.size());
  std::vector<CLI::App*> subs;
  for (std::size_t i = 0; i < commands.size(); ++i)
    subs.push_back(
        add_run_command(app, commands[i].first, commands[i].second, args[i]));
  subs[5]->add_option("--stage", args[5].opts.stage,
                      "estimate sub-stage: mean-value, multiplier, lp, eat, "
                      "linear, nonlinear or all");
  subs[4]->add_option("--mode", args[4].opts.modes,
                      "complex modes to build (heat, floer); repeatable")
      ->delimiter(',');

  std::string report_run, report_format = "json", report_out = "runs";
  CLI::App* rep = app.add_subcommand(
      "report", "re-emit the artifacts of a stored run from its record");
  rep->add_option("run_id", report_run, "run id (<scenario>/<command>-rNNN)")
      ->required();
  rep->add_option("--out", report_out, "run store directory")
      ->capture_default_str();
  rep->add_option("--format", report_format, "json or csv")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
    if (serial) morseflow::set_exec_mode(morseflow::ExecMode::Serial);
    if (rep->parsed()) {
      morseflow::emit_report(report_run, report_format, report_out);
      return 0;
    }
    for (std::size_t i = 0; i < commands.size(); ++i)
      if (subs[i]->parsed()) {
        if (args[i].seed_set) args[i].opts.seed = args[i].seed;
        return morseflow::run(commands[i].first, args[i].opts);
      }
    return 0;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const morseflow::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const morseflow::ArgumentError& e) {
    std::cerr << "argument error: " << e.what() << "\n";
    return 2;
  } catch (const morseflow::AcceptanceError& e) {
    std::cerr << "acceptance failure: " << e.what() << "\n";
    return 4;
  } catch (const morseflow::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
