#pragma once
// Command implementations behind the `waam` tool. Each artifact-producing
// command writes its outputs plus one manifest.json into the output directory.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "waam/analysis.hpp"
#include "waam/gradcheck.hpp"
#include "waam/io.hpp"

namespace waam::cli {

namespace fs = std::filesystem;

enum ExitCode { ok = 0, usage = 2, data = 3, numeric = 4 };

inline int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::invalid_argument:
    case ErrorKind::unsupported: return usage;
    case ErrorKind::data_error:
    case ErrorKind::degenerate_fit:
    case ErrorKind::empty_after_mask: return data;
    case ErrorKind::numeric_fault:
    case ErrorKind::degenerate_model: return numeric;
  }
  return numeric;
}

struct Settings {
  PlantConfig plant;
  ControllerConfig controller;
  TrainConfig train;
  FineTuneConfig finetune;
  CoverageSpec coverage = CoverageSpec::even();

  std::string snapshot() const { return config_snapshot(plant, controller, train, finetune, coverage); }
};

inline void apply(KeyValues& kv, Settings& s) {
  read_config(kv, s.plant);
  read_config(kv, s.controller);
  read_config(kv, s.train);
  read_config(kv, s.finetune);
  read_config(kv, s.coverage);
  kv.reject_unknown();
}

/// Every settable key, in snapshot order.
inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  std::istringstream is(Settings{}.snapshot());
  std::string line;
  while (std::getline(is, line)) {
    const auto key = line.substr(0, line.find(' '));
    if (key != "schema_version") keys.push_back(key);
  }
  return keys;
}

/// Defaults, then the config file (if any), then `key=value` overrides.
inline Settings load_settings(const std::string& config_path, const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  Settings s;
  if (!config_path.empty()) {
    auto kv = KeyValues::load(config_path);
    apply(kv, s);
  }
  if (!overrides.empty()) {
    std::ostringstream text;
    text << "schema_version = " << kConfigSchema << '\n';
    for (const auto& [k, v] : overrides) text << k << " = " << v << '\n';
    std::istringstream is(text.str());
    auto kv = KeyValues::parse(is, "<command line>");
    apply(kv, s);
  }
  return s;
}

struct RunManifest {
  std::string command;
  std::vector<std::string> arguments;
  std::string config;
  std::map<std::string, std::uint64_t> seeds;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  double duration_s = 0.0;
};

inline void write_manifest(const fs::path& dir, const RunManifest& m) {
  Json j;
  j["command"] = m.command;
  j["toolkit_version"] = kToolkitVersion;
  j["arguments"] = m.arguments;
  j["config"] = m.config;
  j["config_hash"] = fnv1a_hex(m.config);
  j["seeds"] = m.seeds;
  j["inputs"] = m.inputs;
  j["outputs"] = m.outputs;
  j["duration_s"] = m.duration_s;
  std::ofstream f(dir / "manifest.json");
  if (!f) fail(ErrorKind::data_error, "cannot write manifest in '" + dir.string() + "'");
  f << j.dump(2) << '\n';
}

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::data_error, "cannot create directory '" + dir.string() + "': " + ec.message());
}

template <class Writer>
void write_file(const fs::path& path, Writer&& writer) {
  std::ofstream f(path);
  if (!f) fail(ErrorKind::data_error, "cannot write '" + path.string() + "'");
  writer(f);
  if (!f) fail(ErrorKind::data_error, "write failed for '" + path.string() + "'");
}

/// Coverage levels as CSV rows `v_w,v_t_schedule` where the schedule is a
/// space-separated list of torch speeds (empty for random levels).
inline std::vector<CoverageLevel> read_coverage_csv(std::istream& is, const std::string& name) {
  std::vector<CoverageLevel> levels;
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(is, line)) data_error(name, 1, "empty coverage file");
  ++lineno;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "v_w,v_t_schedule") data_error(name, 1, "expected header 'v_w,v_t_schedule'");
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_fields(line, ',');
    if (f.size() != 2) data_error(name, lineno, "expected 2 fields");
    CoverageLevel lv;
    if (!parse_double(f[0], lv.v_w)) data_error(name, lineno, "bad v_w");
    std::istringstream sched{std::string(f[1])};
    std::string tok;
    while (sched >> tok) {
      double v = 0.0;
      if (!parse_double(tok, v)) data_error(name, lineno, "bad torch speed '" + tok + "'");
      lv.v_t_schedule.push_back(v);
    }
    levels.push_back(std::move(lv));
  }
  return levels;
}

/// Trace files (*.csv) in a data directory, sorted by name.
inline std::vector<fs::path> trace_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) fail(ErrorKind::data_error, "data directory '" + dir.string() + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

inline std::vector<LayerTrace> load_dataset_traces(const fs::path& dir, std::vector<std::string>* inputs = nullptr) {
  std::vector<LayerTrace> all;
  for (const auto& f : trace_files(dir)) {
    auto layers = load_traces(f.string());
    if (inputs) inputs->push_back(f.string());
    for (auto& l : layers) all.push_back(std::move(l));
  }
  if (all.size() < 2) fail(ErrorKind::data_error, "data directory '" + dir.string() + "' holds fewer than 2 traces");
  return all;
}

// ---------------------------------------------------------------- gen-data

inline RunManifest gen_data(const Settings& s, const fs::path& out, std::uint64_t seed) {
  Stopwatch clock;
  if (const auto msg = s.coverage.validate(); !msg.empty()) fail(ErrorKind::invalid_argument, "coverage: " + msg);
  if (const auto msg = s.plant.validate(); !msg.empty()) fail(ErrorKind::invalid_argument, "PlantConfig: " + msg);
  const auto builds = generate_builds(s.plant, s.coverage, seed);
  ensure_dir(out);
  RunManifest m{"gen-data", {}, s.snapshot(), {{"seed", seed}}, {}, {}, 0.0};
  for (std::size_t b = 0; b < builds.size(); ++b) {
    std::ostringstream name;
    name << "build_" << std::setw(2) << std::setfill('0') << b << ".csv";
    const auto path = out / name.str();
    save_traces(path.string(), builds[b]);
    m.outputs.push_back(path.string());
  }
  m.duration_s = clock.seconds();
  write_manifest(out, m);
  return m;
}

// ---------------------------------------------------------------- fitting and training

inline constexpr std::string_view kErrorHeader = "arch,n,mae_dh,mae_w,p95_dh,p95_w";

inline void write_error_row(std::ostream& os, const std::string& arch, int n, const ErrorStats& e) {
  os << arch << ',' << n << ',' << format_double(e.mae[0]) << ',' << format_double(e.mae[1]) << ','
     << format_double(e.p95[0]) << ',' << format_double(e.p95[1]) << '\n';
}

inline RunManifest fit_loglog(const Settings& s, const fs::path& data_dir, const fs::path& out, std::uint64_t seed) {
  Stopwatch clock;
  RunManifest m{"fit-loglog", {}, s.snapshot(), {{"split_seed", seed}}, {}, {}, 0.0};
  const auto ds = split_dataset(load_dataset_traces(data_dir, &m.inputs), 0.8, seed);
  std::vector<IOSample> io;
  for (const auto& tr : ds.train())
    for (const auto& smp : tr.samples) io.push_back({smp.u, smp.y});
  const LogLogModel ll = loglog_fit(io);
  const auto params = ll.to_params();
  const auto errors = evaluate_errors(params, ds.validation());
  ensure_dir(out);
  save_model((out / "loglog.model").string(), params);
  write_file(out / "loglog_errors.csv", [&](std::ostream& os) {
    os << kErrorHeader << '\n';
    write_error_row(os, "loglog", 0, errors);
  });
  m.outputs = {(out / "loglog.model").string(), (out / "loglog_errors.csv").string()};
  m.duration_s = clock.seconds();
  write_manifest(out, m);
  return m;
}

inline std::string model_stem(Arch arch, int n) { return std::string(to_string(arch)) + "_" + std::to_string(n); }

inline constexpr std::string_view kTrainHeader = "arch,n,best_epoch,best_val_mse,diverged,mae_dh,mae_w,p95_dh,p95_w";

struct CellResult {
  Arch arch = Arch::rnn;
  int n = 0;
  std::string status = "ok";
  TrainResult train;
  ErrorStats errors;
  double latency_ms = 0.0;
};

inline void write_train_row(std::ostream& os, const CellResult& c) {
  os << to_string(c.arch) << ',' << c.n << ',' << c.train.best_epoch << ',' << format_double(c.train.best_val_mse) << ','
     << (c.train.diverged ? 1 : 0) << ',' << format_double(c.errors.mae[0]) << ',' << format_double(c.errors.mae[1]) << ','
     << format_double(c.errors.p95[0]) << ',' << format_double(c.errors.p95[1]) << '\n';
}

inline CellResult train_cell(const Dataset& ds, Arch arch, int n, const TrainConfig& cfg) {
  CellResult c;
  c.arch = arch;
  c.n = n;
  c.train = train(arch, n, ds, cfg);
  c.errors = evaluate_errors(c.train.params, ds.validation());
  return c;
}

inline RunManifest train_model(const Settings& s, const fs::path& data_dir, Arch arch, int n, const fs::path& out,
                               std::uint64_t seed) {
  Stopwatch clock;
  if (!is_trainable(arch)) fail(ErrorKind::invalid_argument, "train: use fit-loglog for the loglog baseline");
  RunManifest m{"train", {}, {}, {{"split_seed", seed}, {"train_seed", seed}}, {}, {}, 0.0};
  const auto ds = split_dataset(load_dataset_traces(data_dir, &m.inputs), 0.8, seed);
  TrainConfig cfg = s.train;
  cfg.seed = seed;
  Settings snap = s;
  snap.train = cfg;
  m.config = snap.snapshot();
  const auto cell = train_cell(ds, arch, n, cfg);
  ensure_dir(out);
  const auto stem = model_stem(arch, n);
  save_model((out / (stem + ".model")).string(), cell.train.params);
  write_file(out / (stem + "_loss.csv"), [&](std::ostream& os) { write_loss_csv(os, cell.train.history); });
  write_file(out / (stem + "_summary.csv"), [&](std::ostream& os) {
    os << kTrainHeader << '\n';
    write_train_row(os, cell);
  });
  for (const char* suffix : {".model", "_loss.csv", "_summary.csv"}) m.outputs.push_back((out / (stem + suffix)).string());
  m.duration_s = clock.seconds();
  write_manifest(out, m);
  if (cell.train.diverged) fail(ErrorKind::numeric_fault, "train: optimisation diverged; best parameters were saved");
  return m;
}

struct AblateOptions {
  std::vector<Arch> archs{Arch::rnn, Arch::lstm, Arch::gru, Arch::narx};
  std::vector<int> sizes{3, 8, 16, 64};
  int workers = 0;  ///< 0 uses the hardware concurrency
  int latency_steps = 10000;
};

/// Trains every (arch, size) cell. A failing cell is reported in the summary
/// and does not stop the others.
inline RunManifest ablate(const Settings& s, const fs::path& data_dir, const fs::path& out, std::uint64_t seed,
                          const AblateOptions& opt = {}) {
  Stopwatch clock;
  require(opt.latency_steps >= 10000, "ablate: latency needs at least 10^4 warm steps");
  RunManifest m{"ablate", {}, {}, {{"split_seed", seed}, {"train_seed", seed}}, {}, {}, 0.0};
  const auto ds = split_dataset(load_dataset_traces(data_dir, &m.inputs), 0.8, seed);
  TrainConfig cfg = s.train;
  cfg.seed = seed;
  Settings snap = s;
  snap.train = cfg;
  m.config = snap.snapshot();
  ensure_dir(out);

  std::vector<CellResult> cells;
  for (Arch a : opt.archs)
    for (int n : opt.sizes) {
      CellResult c;
      c.arch = a;
      c.n = n;
      cells.push_back(c);
    }
  std::atomic<std::size_t> next{0};
  std::mutex io_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      auto& cell = cells[i];
      try {
        cell = train_cell(ds, cell.arch, cell.n, cfg);
        if (cell.train.diverged) cell.status = "diverged";
        const auto stem = model_stem(cell.arch, cell.n);
        std::lock_guard lock(io_mutex);
        save_model((out / (stem + ".model")).string(), cell.train.params);
        write_file(out / (stem + "_loss.csv"), [&](std::ostream& os) { write_loss_csv(os, cell.train.history); });
      } catch (const std::exception& e) {
        cell.status = std::string("error: ") + e.what();
        std::replace(cell.status.begin(), cell.status.end(), ',', ';');
      }
    }
  };
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const auto n_workers = std::min<std::size_t>(opt.workers > 0 ? static_cast<std::size_t>(opt.workers) : hw, cells.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w + 1 < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  // timed alone so training threads do not skew it
  for (auto& c : cells)
    if (c.status == "ok" || c.status == "diverged") c.latency_ms = step_latency_ms(c.train.params, opt.latency_steps);

  write_file(out / "summary.csv", [&](std::ostream& os) {
    os << "status," << kTrainHeader << '\n';
    for (const auto& c : cells) {
      os << c.status << ',';
      write_train_row(os, c);
    }
  });
  write_file(out / "latency.csv", [&](std::ostream& os) {
    os << "arch,n,ms_per_step\n";
    for (const auto& c : cells) os << to_string(c.arch) << ',' << c.n << ',' << format_double(c.latency_ms) << '\n';
  });
  for (const auto& c : cells) {
    if (c.status != "ok" && c.status != "diverged") continue;
    const auto stem = model_stem(c.arch, c.n);
    m.outputs.push_back((out / (stem + ".model")).string());
    m.outputs.push_back((out / (stem + "_loss.csv")).string());
  }
  m.outputs.push_back((out / "summary.csv").string());
  m.outputs.push_back((out / "latency.csv").string());
  m.duration_s = clock.seconds();
  write_manifest(out, m);
  return m;
}

// ---------------------------------------------------------------- closed loop

struct ControlRunOptions {
  std::string model_path;   ///< sequence model; required for rnn modes
  std::string loglog_path;  ///< loglog model; required for loglog-inverse
  ControlMode mode = ControlMode::baseline_constant;
  int n_layers = 28;
};

inline RunManifest control_run(const Settings& s, const ControlRunOptions& opt, const fs::path& out, std::uint64_t seed) {
  Stopwatch clock;
  PlantConfig plant = s.plant;
  plant.seed = seed;
  Settings snap = s;
  snap.plant = plant;
  RunManifest m{"control-run", {}, snap.snapshot(), {{"plant_seed", seed}}, {}, {}, 0.0};

  std::optional<ModelParams> model;
  std::optional<LogLogModel> ll;
  if (!opt.model_path.empty()) {
    model = load_model(opt.model_path);
    m.inputs.push_back(opt.model_path);
    if (!is_trainable(model->arch())) fail(ErrorKind::data_error, "'" + opt.model_path + "' is not a sequence model");
  }
  if (!opt.loglog_path.empty()) {
    ll = LogLogModel::from_params(load_model(opt.loglog_path));
    m.inputs.push_back(opt.loglog_path);
  }
  if (uses_sequence_model(opt.mode) && !model) fail(ErrorKind::invalid_argument, "control-run: mode needs --model");
  if (opt.mode == ControlMode::loglog_inverse && !ll) fail(ErrorKind::invalid_argument, "control-run: mode needs --loglog");

  ClosedLoopOptions clo;
  clo.fine_tune = s.finetune;
  const auto rec = run_closed_loop(plant, model ? &*model : nullptr, ll ? &*ll : nullptr, s.controller, opt.n_layers,
                                   opt.mode, clo);
  ensure_dir(out);
  std::vector<LayerTrace> traces;
  for (const auto& lr : rec.layers) traces.push_back(lr.trace);
  save_traces((out / "build.csv").string(), traces);
  write_file(out / "build.json", [&](std::ostream& os) { os << build_sidecar(rec, fnv1a_hex(m.config)).dump() << '\n'; });
  m.outputs = {(out / "build.csv").string(), (out / "build.json").string()};
  if (!rec.layers.empty()) {
    const std::vector<BuildReport> reps{build_report(rec)};
    write_file(out / "report.csv", [&](std::ostream& os) { write_report_csv(os, reps); });
    write_file(out / "report_long.csv", [&](std::ostream& os) { write_report_long_csv(os, reps); });
    m.outputs.push_back((out / "report.csv").string());
    m.outputs.push_back((out / "report_long.csv").string());
  }
  m.duration_s = clock.seconds();
  write_manifest(out, m);
  if (!rec.failure.empty()) fail(ErrorKind::numeric_fault, "control-run: " + rec.failure);
  return m;
}

inline BuildRecord load_build_dir(const fs::path& dir) {
  return read_build((dir / "build.csv").string(), (dir / "build.json").string());
}

// ---------------------------------------------------------------- diagnostics and reports

struct DiagSummary {
  double max_state_norm = 0.0;
  double max_rho_final_half = 0.0;  ///< recurrent models only
  SteadyState steady;
};

inline RunManifest diag(const Settings& s, const std::string& model_path, const fs::path& build_dir, const fs::path& out,
                        int horizon = 600, DiagSummary* summary = nullptr) {
  Stopwatch clock;
  RunManifest m{"diag", {}, s.snapshot(), {}, {model_path, (build_dir / "build.csv").string(), (build_dir / "build.json").string()}, {}, 0.0};
  const auto p = load_model(model_path);
  if (!is_trainable(p.arch())) fail(ErrorKind::invalid_argument, "diag: requires a sequence model");
  const auto build = load_build_dir(build_dir);
  ensure_dir(out);
  DiagSummary sum;

  const auto norms = state_norm_trace(p, build);
  write_file(out / "state_norm.csv", [&](std::ostream& os) {
    os << "layer,k,norm\n";
    for (std::size_t l = 0; l < norms.size(); ++l)
      for (std::size_t k = 0; k < norms[l].size(); ++k) {
        os << build.layers[l].trace.layer_index << ',' << k << ',' << format_double(norms[l][k]) << '\n';
        sum.max_state_norm = std::max(sum.max_state_norm, norms[l][k]);
      }
  });
  m.outputs.push_back((out / "state_norm.csv").string());

  if (is_recurrent(p.arch())) {
    write_file(out / "spectral_radius.csv", [&](std::ostream& os) {
      os << "layer,k,rho\n";
      for (const auto& lr : build.layers) {
        std::vector<ProcessInput> u;
        for (const auto& smp : lr.trace.samples) u.push_back(smp.u);
        const auto rho = spectral_radius_trace(p, u);
        for (std::size_t k = 0; k < rho.size(); ++k) {
          os << lr.trace.layer_index << ',' << k << ',' << format_double(rho[k]) << '\n';
          if (2 * k >= rho.size()) sum.max_rho_final_half = std::max(sum.max_rho_final_half, rho[k]);
        }
      }
    });
    m.outputs.push_back((out / "spectral_radius.csv").string());
  }

  sum.steady = steady_state_check(p, s.controller.nominal, horizon);
  write_file(out / "steady_state.csv", [&](std::ostream& os) {
    os << "k,dh_mm,w_mm\n";
    for (std::size_t k = 0; k < sum.steady.outputs.size(); ++k)
      os << k << ',' << format_double(sum.steady.outputs[k].delta_h) << ',' << format_double(sum.steady.outputs[k].w) << '\n';
  });
  m.outputs.push_back((out / "steady_state.csv").string());

  Json j;
  j["max_state_norm"] = sum.max_state_norm;
  j["sqrt_n"] = std::sqrt(static_cast<double>(p.n()));
  if (is_recurrent(p.arch())) j["max_rho_final_half"] = sum.max_rho_final_half;
  j["steady_converged"] = sum.steady.converged;
  j["steady_settle_step"] = sum.steady.settle_step;
  j["y_inf"] = to_json(sum.steady.y_inf);
  write_file(out / "diag_summary.json", [&](std::ostream& os) { os << j.dump(2) << '\n'; });
  m.outputs.push_back((out / "diag_summary.json").string());
  m.duration_s = clock.seconds();
  write_manifest(out, m);
  if (summary) *summary = sum;
  return m;
}

inline RunManifest report(const Settings& s, const std::vector<fs::path>& build_dirs, const fs::path& out,
                          std::vector<BuildReport>* reports_out = nullptr) {
  Stopwatch clock;
  if (build_dirs.empty()) fail(ErrorKind::invalid_argument, "report: no build directories given");
  RunManifest m{"report", {}, s.snapshot(), {}, {}, {}, 0.0};
  std::vector<BuildReport> reports;
  for (const auto& d : build_dirs) {
    const auto rec = load_build_dir(d);
    if (rec.layers.empty()) fail(ErrorKind::data_error, "build '" + d.string() + "' has no layers");
    reports.push_back(build_report(rec));
    m.inputs.push_back((d / "build.csv").string());
  }
  ensure_dir(out);
  write_file(out / "report.csv", [&](std::ostream& os) { write_report_csv(os, reports); });
  write_file(out / "report_long.csv", [&](std::ostream& os) { write_report_long_csv(os, reports); });
  m.outputs = {(out / "report.csv").string(), (out / "report_long.csv").string()};
  m.duration_s = clock.seconds();
  write_manifest(out, m);
  if (reports_out) *reports_out = std::move(reports);
  return m;
}

/// Worst relative error per architecture; true when all are within tolerance.
inline bool check_grad(std::ostream& os, int per_size, std::uint64_t seed, const GradTolerance& tol = {}) {
  const int sizes[] = {3, 8, 16};
  bool all_ok = true;
  for (Arch a : {Arch::rnn, Arch::lstm, Arch::gru, Arch::narx}) {
    const auto r = check_architecture(a, sizes, per_size, seed, tol);
    const bool pass = r.worst.worst() <= tol.rel;
    all_ok = all_ok && pass;
    os << to_string(a) << ": instances=" << r.instances << " grad=" << r.worst.param_error
       << " jacobian=" << r.worst.jacobian_error << " state=" << r.worst.state_error << (pass ? "  ok" : "  FAIL") << '\n';
  }
  return all_ok;
}

}  // namespace waam::cli
