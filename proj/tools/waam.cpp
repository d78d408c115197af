#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "waam/cli.hpp"

namespace {

std::vector<int> parse_sizes(const std::vector<std::string>& items) {
  std::vector<int> out;
  for (const auto& s : items) {
    long long v = 0;
    if (!waam::parse_int(s, v) || v < 1 || v > 512) waam::fail(waam::ErrorKind::invalid_argument, "bad size '" + s + "'");
    out.push_back(static_cast<int>(v));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  namespace cli = waam::cli;
  CLI::App app{"Learned deposition models and one-step predictive control for WAAM"};
  app.require_subcommand(1);
  app.set_version_flag("--version", waam::kToolkitVersion);

  std::uint64_t seed = 0;
  std::string out_dir = "out";
  std::string config_path;
  app.add_option("--seed", seed, "seed for the command's random streams");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--config", config_path, "key-value config file")->check(CLI::ExistingFile);

  // one flag per config key, applied after the config file
  std::map<std::string, std::string> key_values;
  std::map<std::string, CLI::Option*> key_options;
  for (const auto& key : cli::config_keys())
    key_options[key] = app.add_option("--" + key, key_values[key])->group("Config keys");

  std::string data_dir;
  std::string arch_name = "rnn";
  int size = 16;
  std::string coverage_path;

  auto* gen = app.add_subcommand("gen-data", "simulate open-loop excitation builds");
  gen->add_option("--coverage", coverage_path, "CSV of v_w,v_t_schedule levels")->check(CLI::ExistingFile);

  auto* fit = app.add_subcommand("fit-loglog", "fit the static power-law baseline");
  fit->add_option("--data", data_dir, "directory of trace CSVs")->required();

  auto* trn = app.add_subcommand("train", "train one sequence model");
  trn->add_option("--data", data_dir, "directory of trace CSVs")->required();
  trn->add_option("--arch", arch_name, "rnn, lstm, gru or narx");
  trn->add_option("--n", size, "hidden size or history length");

  std::vector<std::string> archs{"rnn", "lstm", "gru", "narx"};
  std::vector<std::string> sizes{"3", "8", "16", "64"};
  int workers = 0;
  int latency_steps = 10000;
  auto* abl = app.add_subcommand("ablate", "train the architecture x size grid");
  abl->add_option("--data", data_dir, "directory of trace CSVs")->required();
  abl->add_option("--archs", archs, "architectures")->delimiter(',');
  abl->add_option("--sizes", sizes, "sizes")->delimiter(',');
  abl->add_option("--workers", workers, "parallel cells (0 = all cores)");
  abl->add_option("--latency-steps", latency_steps, "timed forward steps per model");

  cli::ControlRunOptions run_opt;
  std::string mode_name = "baseline-constant";
  auto* run = app.add_subcommand("control-run", "run a closed-loop build against the plant");
  run->add_option("--model", run_opt.model_path, "sequence model file");
  run->add_option("--loglog", run_opt.loglog_path, "loglog model file");
  run->add_option("--mode", mode_name, "baseline-constant, loglog-inverse, rnn-onestep or rnn-adaptive");
  run->add_option("--layers", run_opt.n_layers, "number of layers");

  std::string model_path, build_dir;
  int horizon = 600;
  auto* dia = app.add_subcommand("diag", "state norm, spectral radius and steady-state diagnostics");
  dia->add_option("--model", model_path, "sequence model file")->required();
  dia->add_option("--build", build_dir, "directory written by control-run")->required();
  dia->add_option("--horizon", horizon, "steady-state rollout length");

  std::vector<std::string> build_dirs;
  auto* rep = app.add_subcommand("report", "combine builds into one comparison table");
  rep->add_option("builds", build_dirs, "directories written by control-run")->required();

  int per_size = 9;
  auto* grad = app.add_subcommand("check-grad", "finite-difference check of gradients and Jacobians");
  grad->add_option("--per-size", per_size, "random instances per (arch, size)");

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : cli::usage;
  }

  try {
    std::vector<std::pair<std::string, std::string>> overrides;
    for (const auto& [key, opt] : key_options)
      if (opt->count() > 0) overrides.emplace_back(key, key_values[key]);
    cli::Settings settings = cli::load_settings(config_path, overrides);
    const cli::fs::path out{out_dir};
    std::optional<cli::RunManifest> manifest;

    if (*gen) {
      if (!coverage_path.empty()) {
        std::ifstream f(coverage_path);
        settings.coverage.levels = cli::read_coverage_csv(f, coverage_path);
      }
      manifest = cli::gen_data(settings, out, seed);
      if (!coverage_path.empty()) manifest->inputs.push_back(coverage_path);
      std::cout << "wrote " << manifest->outputs.size() << " builds to " << out.string() << '\n';
    } else if (*fit) {
      manifest = cli::fit_loglog(settings, data_dir, out, seed);
      std::cout << "wrote " << (out / "loglog.model").string() << '\n';
    } else if (*trn) {
      manifest = cli::train_model(settings, data_dir, waam::parse_arch(arch_name), size, out, seed);
      std::cout << "wrote " << manifest->outputs.front() << '\n';
    } else if (*abl) {
      cli::AblateOptions opt;
      opt.archs.clear();
      for (const auto& a : archs) opt.archs.push_back(waam::parse_arch(a));
      opt.sizes = parse_sizes(sizes);
      opt.workers = workers;
      opt.latency_steps = latency_steps;
      manifest = cli::ablate(settings, data_dir, out, seed, opt);
      std::cout << "wrote " << (out / "summary.csv").string() << '\n';
    } else if (*run) {
      run_opt.mode = waam::parse_mode(mode_name);
      manifest = cli::control_run(settings, run_opt, out, seed);
      std::cout << "wrote " << (out / "build.csv").string() << '\n';
    } else if (*dia) {
      cli::DiagSummary sum;
      manifest = cli::diag(settings, model_path, build_dir, out, horizon, &sum);
      std::cout << "max state norm " << sum.max_state_norm << ", steady state (" << sum.steady.y_inf.delta_h << ", "
                << sum.steady.y_inf.w << ")" << (sum.steady.converged ? "" : " not converged") << '\n';
    } else if (*rep) {
      std::vector<cli::fs::path> dirs(build_dirs.begin(), build_dirs.end());
      std::vector<waam::BuildReport> reports;
      manifest = cli::report(settings, dirs, out, &reports);
      waam::write_report_csv(std::cout, reports);
    } else if (*grad) {
      return cli::check_grad(std::cout, per_size, seed) ? cli::ok : cli::numeric;
    }

    if (manifest) {
      manifest->arguments.assign(argv, argv + argc);
      cli::write_manifest(out, *manifest);
    }
    return cli::ok;
  } catch (const waam::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::data;
  }
}
