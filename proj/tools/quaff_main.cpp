// SPDX-License-Identifier: Apache-2.0
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "quaff/error.hpp"
#include "quaff/harness.hpp"

namespace fs = std::filesystem;
using namespace quaff;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

int run(int argc, char** argv) {
  CLI::App app{"Quaff quantized fine-tuning testbed"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);
  app.fallthrough();

  std::string config, out, calib, engine;
  std::vector<std::string> dirs;
  std::uint64_t seed = 0;
  bool resume = false, quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress output");

  auto* cal = app.add_subcommand("calibrate", "Collect activation statistics and select outlier channels");
  cal->add_option("--config", config, "Run config")->required();
  cal->add_option("--out", out, "Artifact path")->required();

  auto* tr = app.add_subcommand("train", "Fine-tune LoRA adapters with a chosen engine");
  tr->add_option("--config", config, "Run config")->required();
  tr->add_option("--calib", calib, "Calibration artifact (overrides config)");
  tr->add_option("--engine", engine, "Engine for all linears (overrides config)");
  auto* seed_opt = tr->add_option("--seed", seed, "Run seed (overrides config)");
  tr->add_option("--out", out, "Run directory (overrides config)");
  tr->add_flag("--resume", resume, "Continue from the run directory's checkpoint");

  auto* cmp = app.add_subcommand("compare", "Aggregate run directories into tables and plots");
  cmp->add_option("dirs", dirs, "Run directories")->required();
  cmp->add_option("--out", out, "Output directory")->required();

  auto* mb = app.add_subcommand("microbench", "Time kernels and engines");
  mb->add_option("--config", config, "Run config")->required();
  mb->add_option("--out", out, "CSV path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  std::ostream* log = quiet ? nullptr : &std::cerr;

  if (*cal) {
    RunConfig rc = load_run_config(config);
    save_calibration(run_calibration(rc, log), out);
  } else if (*tr) {
    RunConfig rc = load_run_config(config);
    if (!calib.empty()) rc.calib = fs::absolute(calib);
    if (!out.empty()) rc.out = fs::absolute(out);
    if (*seed_opt) rc.seed = seed;
    if (!engine.empty()) {
      auto k = parse_engine_kind(engine);
      if (!k) throw ConfigError("unknown engine '" + engine + "'");
      rc.engine = *k;
      rc.model.set_engine(*k);
    }
    rc.validate();
    auto res = run_training(rc, resume, log);
    if (log && !res.losses.empty()) *log << "final loss " << res.losses.back() << " in " << res.run_dir.string() << "\n";
  } else if (*cmp) {
    std::vector<fs::path> paths(dirs.begin(), dirs.end());
    run_compare(paths, out, log);
  } else if (*mb) {
    const std::string csv = render_bench_csv(run_microbench(load_run_config(config)));
    if (out.empty()) std::cout << csv;
    else write_text(out, csv);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
