#include <iostream>

#include <CLI11.hpp>

#include "runner.hpp"

#ifndef LEVYDUAL_VERSION
#define LEVYDUAL_VERSION "unknown"
#endif

int main(int argc, char** argv) {
  using namespace levydual::cli;
  CLI::App app{"levydual: dual solver and exact tree oracle for shortfall utility maximization"};
  app.set_version_flag("--version", LEVYDUAL_VERSION);
  RunRequest req;
  req.version = LEVYDUAL_VERSION;
  std::uint64_t seed = 0;
  std::size_t paths = 0, steps = 0;
  std::string out;
  app.add_option("command", req.command, "simulate | solve | oracle | audit | report")
      ->required()
      ->check(CLI::IsMember(commands()));
  app.add_option("--config", req.config_path, "experiment config (INI)")->required();
  auto* seed_opt = app.add_option("--seed", seed, "overrides solve.seed");
  auto* out_opt = app.add_option("--out", out, "overrides output.directory");
  app.add_option("--set", req.overrides, "section.key=value override (repeatable)")
      ->allow_extra_args(false);
  auto* paths_opt = app.add_option("--paths", paths, "overrides solve.paths");
  auto* steps_opt = app.add_option("--steps", steps, "overrides solve.steps");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kValidation;
  }
  if (*seed_opt) req.seed = seed;
  if (*paths_opt) req.paths = paths;
  if (*steps_opt) req.steps = steps;
  if (*out_opt) req.out_dir = out;
  return run(req, std::cout, std::cerr);
}
