#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "wncs/cli.hpp"

namespace {

enum ExitCode { kOk = 0, kValidation = 1, kSolver = 2, kIo = 3 };

int report(const char* kind, const std::exception& e, int code) {
  std::cerr << "wncs: " << kind << ": " << e.what() << '\n';
  return code;
}

template <typename F>
int guarded(F&& body) {
  try {
    body();
    return kOk;
  } catch (const wncs::ParseError& e) {
    std::cerr << "wncs: parse error at line " << e.line() << ", column " << e.column() << ": " << e.what() << '\n';
    return kValidation;
  } catch (const wncs::ValidationError& e) {
    return report("invalid configuration", e, kValidation);
  } catch (const wncs::DimensionMismatch& e) {
    return report("invalid configuration", e, kValidation);
  } catch (const wncs::SolverError& e) {
    return report("solver failure", e, kSolver);
  } catch (const wncs::IoError& e) {
    return report("I/O error", e, kIo);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Networked control scheduling experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> runs;
  bool emit_traces = false;

  auto* run = app.add_subcommand("run", "Run the experiment sweep described by a config file");
  run->add_option("--config", config_path, "JSON config")->required();
  run->add_option("--out", out_dir, "Output directory (overrides config)");
  run->add_option("--seed", seed, "Base seed (overrides config)");
  run->add_option("--runs", runs, "Monte Carlo runs per sweep point (overrides config)")->check(CLI::PositiveNumber);
  run->add_flag("--emit-traces", emit_traces, "Write one trace CSV per run");

  auto* list = app.add_subcommand("list-scenarios", "List built-in scenarios");

  std::string validate_path;
  auto* validate = app.add_subcommand("validate", "Check a config file without running it");
  validate->add_option("--config", validate_path, "JSON config")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  if (*list) {
    for (const auto& s : wncs::scenario_library()) std::cout << s.name << "\t" << s.description << '\n';
    return kOk;
  }
  if (*validate) {
    return guarded([&] {
      const auto cfg = wncs::load_config(validate_path);
      std::cout << "ok: " << wncs::sweep_points(cfg).size() << " sweep point(s)\n";
    });
  }
  return guarded([&] {
    auto cfg = wncs::load_config(config_path);
    if (out_dir) cfg.out_dir = *out_dir;
    if (seed) cfg.seed = *seed;
    if (runs) cfg.runs = *runs;
    if (emit_traces) cfg.emit_traces = true;
    const auto out = wncs::run_experiment(cfg);
    std::cout << "wrote " << out.rows.size() << " row(s) to " << out.results_csv.string() << '\n';
  });
}
