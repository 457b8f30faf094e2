// cl2gd: run, sweep and theory front end.
//
//   cl2gd run    [--config f.json] [--set key=value]... [--out dir] [--seeds n] [--jobs n]
//   cl2gd sweep  [--config f.json] [--set sweep.p=[0.1,0.2]]... [--out dir] [--jobs n]
//   cl2gd theory [--config f.json] [--set key=value]... [--out dir]
//   cl2gd dataset --name a1a --out a1a.txt
//
// Exit codes: 0 ok, 1 configuration error, 2 data error, 3 invariant violation.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "cl2gd/config.hpp"
#include "cl2gd/data.hpp"
#include "cl2gd/errors.hpp"
#include "cl2gd/runner.hpp"

namespace {

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out;
  long seeds = 0;
  long jobs = 1;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool with_seeds) {
  cmd->add_option("--config", o.config_path, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", o.sets, "Override a config field, e.g. --set compressors.client.kind=natural")
      ->allow_extra_args(false);
  cmd->add_option("--out", o.out, "Output directory (overrides config 'out')");
  if (with_seeds) cmd->add_option("--seeds", o.seeds, "Number of seeds (overrides config 'seeds')")->check(CLI::PositiveNumber);
  cmd->add_option("--jobs", o.jobs, "Worker threads")->check(CLI::PositiveNumber);
}

nlohmann::json assemble(const CommonOptions& o) {
  nlohmann::json j = o.config_path.empty() ? nlohmann::json::object() : cl2gd::load_json_file(o.config_path);
  cl2gd::apply_overrides(j, o.sets);
  if (!o.out.empty()) j["out"] = o.out;
  if (o.seeds > 0) j["seeds"] = o.seeds;
  return j;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path);
  if (!out) throw cl2gd::ConfigError("cannot write '" + path.string() + "'");
  out << j.dump(2) << "\n";
}

int run_command(const CommonOptions& o) {
  const auto cfg = cl2gd::normalize(cl2gd::parse_config(assemble(o)));
  const auto outcome = cl2gd::execute_run(cfg, o.jobs);
  cl2gd::write_run(outcome, cfg.out);
  const auto summary = cl2gd::summary_json(outcome);
  std::printf("%s: K=%ld seeds=%zu eta=%.6g final F=%.6g bits/n=%.6g -> %s\n", cl2gd::algorithm_name(cfg.algorithm).c_str(),
              cfg.K, outcome.runs.size(), outcome.eta, summary["mean_final_F"].get<double>(),
              summary["mean_bits_per_n"].get<double>(), cfg.out.c_str());
  return 0;
}

int sweep_command(const CommonOptions& o) {
  const auto spec = cl2gd::parse_sweep(assemble(o));
  const auto records = cl2gd::execute_sweep(spec, o.jobs);
  cl2gd::write_sweep(spec, records, spec.base.out);
  std::printf("sweep: %zu points (%zu p x %zu lambda x %ld seeds) -> %s\n", records.size(), spec.p_grid.size(),
              spec.lambda_grid.size(), spec.base.seeds, spec.base.out.c_str());
  return 0;
}

int theory_command(const CommonOptions& o) {
  const auto cfg = cl2gd::normalize(cl2gd::parse_config(assemble(o)));
  const auto report = cl2gd::theory_report(cfg);
  write_json(std::filesystem::path(cfg.out) / "theory.json", report);
  std::cout << report.dump(2) << "\n";
  return 0;
}

int dataset_command(const std::string& name, const std::string& out) {
  const auto ds = cl2gd::data::adult_surrogate(name);
  std::ofstream f(out, std::ios::binary);
  if (!f) throw cl2gd::ConfigError("cannot write '" + out + "'");
  f << cl2gd::data::serialize_libsvm(ds);
  std::printf("wrote %zu examples (%ld features) to %s\n", ds.size(), static_cast<long>(ds.dim), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compressed L2GD simulator and theory toolkit"};
  app.require_subcommand(1);

  CommonOptions run_opts, sweep_opts, theory_opts;
  auto* run = app.add_subcommand("run", "Run l2gd or fedavg and write trace, theory and summary files");
  add_common(run, run_opts, true);
  auto* sweep = app.add_subcommand("sweep", "Run a (p, lambda) grid and write the sweep surface");
  add_common(sweep, sweep_opts, true);
  auto* theory = app.add_subcommand("theory", "Write the theory-constants report without running");
  add_common(theory, theory_opts, false);

  std::string ds_name = "a1a", ds_out;
  auto* dataset = app.add_subcommand("dataset", "Write the built-in a1a/a2a surrogate table in LIBSVM format");
  dataset->add_option("--name", ds_name, "a1a or a2a");
  dataset->add_option("--out", ds_out, "Output file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*run) return run_command(run_opts);
    if (*sweep) return sweep_command(sweep_opts);
    if (*theory) return theory_command(theory_opts);
    if (*dataset) return dataset_command(ds_name, ds_out);
  } catch (const cl2gd::ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return 1;
  } catch (const cl2gd::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const cl2gd::InvariantError& e) {
    std::fprintf(stderr, "invariant violation: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 3;
  }
  return 0;
}
