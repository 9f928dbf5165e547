// Command-line front end: iclprobe <command> --config <file> [--seed N] [--out DIR]

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "iclprobe/errors.hpp"
#include "iclprobe/experiments.hpp"

int main(int argc, char** argv) {
  using namespace iclprobe;

  std::string commands;
  for (auto c : all_commands()) commands += (commands.empty() ? "" : ", ") + std::string(to_string(c));

  CLI::App app{"In-context learning probes for a small transformer"};
  std::string command, config_path, out_dir;
  std::uint64_t seed = 0;
  app.add_option("command", command, "one of: " + commands)->required();
  app.add_option("--config", config_path, "key=value configuration file")->required();
  auto* seed_opt = app.add_option("--seed", seed, "overrides the config seed");
  auto* out_opt = app.add_option("--out", out_dir, "output directory (default: config key out, else ./out)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 3;
  }

  try {
    ExperimentSpec spec;
    spec.command = parse_command(command);
    spec.config = KeyValueConfig::load(config_path);
    if (*seed_opt) spec.seed = seed;
    if (*out_opt) spec.out = out_dir;
    const auto report = run(spec);
    for (const auto& f : report.files) std::cout << (report.out_dir / f).string() << '\n';
    return 0;
  } catch (const std::exception& e) {
    const int code = exit_code_for(e);
    std::cerr << "iclprobe: " << (config_path.empty() ? "" : config_path + ": ") << e.what() << '\n';
    return code;
  }
}
