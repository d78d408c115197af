#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "waam/cli.hpp"

using namespace waam;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(::testing::TempDir()) / ("waam_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

int run_tool(const std::string& args) {
  const std::string cmd = std::string(WAAM_TOOL) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

cli::Settings small_data_settings() {
  cli::Settings s;
  s.coverage = CoverageSpec::even(4, 2);
  return s;
}

fs::path small_dataset() {
  static const fs::path dir = [] {
    const auto d = scratch("small_data");
    cli::gen_data(small_data_settings(), d, 1);
    return d;
  }();
  return dir;
}

ModelParams scaled_rnn(int n) {
  auto p = model_init(Arch::rnn, n, 4);
  p.norm().u_mean = {7.5, 63.5};
  p.norm().u_std = {3.0, 20.0};
  p.norm().y_mean = {1.8, 5.2};
  p.norm().y_std = {0.3, 0.6};
  return p;
}

}  // namespace

TEST(Settings, OverridesAndUnknownKeys) {
  const auto s = cli::load_settings("", {{"controller.alpha", "0.5"}, {"plant.seed", "3"}});
  EXPECT_EQ(s.controller.alpha, 0.5);
  EXPECT_EQ(s.plant.seed, 3u);
  EXPECT_THROW(cli::load_settings("", {{"controller.alhpa", "0.5"}}), Error);
  const auto keys = cli::config_keys();
  EXPECT_NE(std::find(keys.begin(), keys.end(), "finetune.lambda"), keys.end());
}

TEST(ExitCodes, Mapping) {
  EXPECT_EQ(cli::exit_code_for(ErrorKind::invalid_argument), 2);
  EXPECT_EQ(cli::exit_code_for(ErrorKind::data_error), 3);
  EXPECT_EQ(cli::exit_code_for(ErrorKind::numeric_fault), 4);
}

TEST(GenData, DefaultCoverageWritesOneFilePerLevel) {
  const auto out = scratch("gen_default");
  cli::Settings s;
  const auto m = cli::gen_data(s, out, 1);
  ASSERT_EQ(m.outputs.size(), 21u);
  EXPECT_TRUE(fs::exists(out / "build_00.csv"));
  EXPECT_TRUE(fs::exists(out / "build_20.csv"));
  EXPECT_TRUE(fs::exists(out / "manifest.json"));
  const InputBounds box;
  for (const auto& f : m.outputs) {
    const auto layers = load_traces(f);
    ASSERT_EQ(layers.size(), 4u);
    for (const auto& tr : layers)
      for (const auto& smp : tr.samples) ASSERT_TRUE(box.contains(smp.u)) << f;
    std::stringstream ss;
    write_traces_csv(ss, layers);
    EXPECT_EQ(ss.str(), slurp(f));
  }
}

TEST(GenData, EmptyCoverageFailsWithoutOutput) {
  const auto out = scratch("gen_empty");
  const auto cov = scratch("cov") += ".csv";
  {
    std::ofstream f(cov);
    f << "v_w,v_t_schedule\n";
  }
  EXPECT_EQ(run_tool("--out " + out.string() + " gen-data --coverage " + cov.string()), 2);
  EXPECT_FALSE(fs::exists(out / "build_00.csv"));
}

TEST(GenData, SameSeedSameBytes) {
  const auto a = scratch("gen_a"), b = scratch("gen_b");
  ASSERT_EQ(run_tool("--seed 5 --coverage.levels 3 --out " + a.string() + " gen-data"), 0);
  ASSERT_EQ(run_tool("--seed 5 --coverage.levels 3 --out " + b.string() + " gen-data"), 0);
  for (const char* f : {"build_00.csv", "build_01.csv", "build_02.csv"}) EXPECT_EQ(slurp(a / f), slurp(b / f));
}

TEST(FitLogLog, RecoversPowerLaw) {
  const auto data = scratch("powerlaw");
  fs::create_directories(data);
  // dh = 0.9 v_T^-0.8 v_W^0.6, w = 1.4 v_T^-0.3 v_W^0.4
  Rng rng(3);
  for (int b = 0; b < 3; ++b) {
    LayerTrace tr;
    tr.layer_index = 1;
    for (int k = 0; k < 60; ++k) {
      const ProcessInput u{rng.uniform(3.0, 14.0), rng.uniform(25.0, 100.0)};
      const ProcessOutput y{0.9 * std::pow(u.v_t, -0.8) * std::pow(u.v_w, 0.6),
                            1.4 * std::pow(u.v_t, -0.3) * std::pow(u.v_w, 0.4)};
      tr.samples.push_back({0.1 * k, 0.5 * k, u, y});
    }
    std::vector<LayerTrace> one{tr};
    save_traces((data / ("b" + std::to_string(b) + ".csv")).string(), one);
  }
  const auto out = scratch("powerlaw_fit");
  cli::fit_loglog(cli::Settings{}, data, out, 0);
  const auto ll = LogLogModel::from_params(load_model((out / "loglog.model").string()));
  EXPECT_NEAR(ll.alpha[0], -0.8, 1e-9);
  EXPECT_NEAR(ll.alpha[1], 0.6, 1e-9);
  EXPECT_NEAR(ll.alpha[2], std::log(0.9), 1e-9);
  EXPECT_NEAR(ll.beta[0], -0.3, 1e-9);
  EXPECT_NEAR(ll.beta[1], 0.4, 1e-9);
  EXPECT_NEAR(ll.beta[2], std::log(1.4), 1e-9);
  EXPECT_NE(slurp(out / "loglog_errors.csv").find("loglog,0,"), std::string::npos);
}

TEST(Train, WritesArtifactsAndIsReproducible) {
  auto s = small_data_settings();
  s.train.epochs = 20;
  const auto a = scratch("train_a"), b = scratch("train_b");
  cli::train_model(s, small_dataset(), Arch::gru, 4, a, 2);
  cli::train_model(s, small_dataset(), Arch::gru, 4, b, 2);
  for (const char* f : {"gru_4.model", "gru_4_loss.csv", "gru_4_summary.csv"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  EXPECT_THROW(cli::train_model(s, small_dataset(), Arch::loglog, 4, a, 2), Error);
}

TEST(Ablate, SixteenCellsReproducible) {
  auto s = small_data_settings();
  s.train.epochs = 10;
  const auto a = scratch("ablate_a"), b = scratch("ablate_b");
  cli::AblateOptions opt;
  opt.workers = 4;
  cli::ablate(s, small_dataset(), a, 0, opt);
  opt.workers = 2;
  cli::ablate(s, small_dataset(), b, 0, opt);
  const auto summary = slurp(a / "summary.csv");
  EXPECT_EQ(summary, slurp(b / "summary.csv"));
  std::istringstream is(summary);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "status," + std::string(cli::kTrainHeader));
  int rows = 0;
  while (std::getline(is, line)) {
    ++rows;
    EXPECT_EQ(line.rfind("ok,", 0), 0u) << line;
  }
  EXPECT_EQ(rows, 16);
  for (const char* arch : {"rnn", "lstm", "gru", "narx"})
    for (int n : {3, 8, 16, 64}) {
      const auto f = std::string(arch) + "_" + std::to_string(n) + ".model";
      ASSERT_TRUE(fs::exists(a / f)) << f;
      EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
    }
}

TEST(ControlRun, FourModeReport) {
  const auto root = scratch("modes");
  fs::create_directories(root);
  save_model((root / "rnn.model").string(), scaled_rnn(6));
  LogLogModel ll;
  ll.alpha = {-0.8, 0.75, -0.95};
  ll.beta = {-0.3, 0.35, 0.8};
  save_model((root / "loglog.model").string(), ll.to_params());
  cli::Settings s;
  s.finetune.epochs = 5;
  std::vector<fs::path> dirs;
  for (ControlMode mode : {ControlMode::baseline_constant, ControlMode::loglog_inverse, ControlMode::rnn_onestep,
                           ControlMode::rnn_adaptive}) {
    cli::ControlRunOptions opt;
    opt.mode = mode;
    opt.n_layers = 2;
    opt.model_path = (root / "rnn.model").string();
    opt.loglog_path = (root / "loglog.model").string();
    dirs.push_back(root / to_string(mode));
    cli::control_run(s, opt, dirs.back(), 3);
    EXPECT_TRUE(fs::exists(dirs.back() / "manifest.json"));
  }
  std::vector<BuildReport> reps;
  cli::report(s, dirs, root / "report", &reps);
  ASSERT_EQ(reps.size(), 4u);
  const auto csv = slurp(root / "report" / "report.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_NE(csv.find("rnn-adaptive,"), std::string::npos);

  cli::DiagSummary sum;
  cli::diag(s, (root / "rnn.model").string(), dirs[2], root / "diag", 200, &sum);
  for (const char* f : {"state_norm.csv", "spectral_radius.csv", "steady_state.csv", "diag_summary.json"})
    EXPECT_TRUE(fs::exists(root / "diag" / f)) << f;
  EXPECT_LE(sum.max_state_norm, std::sqrt(6.0));
}

TEST(ControlRun, ModeNeedsModel) {
  cli::ControlRunOptions opt;
  opt.mode = ControlMode::rnn_onestep;
  EXPECT_THROW(cli::control_run(cli::Settings{}, opt, scratch("nomodel"), 0), Error);
}

TEST(ControlRun, NoiseFreeBaselineMatchesGolden) {
  const auto out = scratch("golden");
  ASSERT_EQ(run_tool("--plant.sigma_h 0 --plant.sigma_w 0 --out " + out.string() + " control-run --layers 1"), 0);
  const auto golden = fs::path(WAAM_TEST_DATA) / "golden_baseline_layer1.csv";
  ASSERT_TRUE(fs::exists(golden));
  EXPECT_EQ(slurp(out / "build.csv"), slurp(golden));
}

TEST(Tool, UsageErrorsExitTwo) {
  EXPECT_EQ(run_tool("control-run --mode pid --out " + scratch("pid").string()), 2);
  EXPECT_EQ(run_tool("--no-such-flag gen-data"), 2);
  EXPECT_EQ(run_tool(""), 2);
  EXPECT_EQ(run_tool("--controller.alpha 0 control-run --out " + scratch("alpha").string()), 2);
}

TEST(Tool, DataErrorsExitThree) {
  EXPECT_EQ(run_tool("fit-loglog --data /nonexistent/dir --out " + scratch("nodata").string()), 3);
  const auto cfg = scratch("bad") += ".cfg";
  {
    std::ofstream f(cfg);
    f << "schema_version = 1\nplant.sede = 3\n";
  }
  EXPECT_EQ(run_tool("--config " + cfg.string() + " gen-data --out " + scratch("badcfg").string()), 3);
}

TEST(Tool, ManifestRecordsArguments) {
  const auto out = scratch("manifest");
  ASSERT_EQ(run_tool("--seed 9 --out " + out.string() + " control-run --layers 1"), 0);
  const auto j = Json::parse(slurp(out / "manifest.json"));
  EXPECT_EQ(j.at("command"), "control-run");
  EXPECT_EQ(j.at("seeds").at("plant_seed"), 9);
  EXPECT_EQ(j.at("config_hash"), fnv1a_hex(j.at("config").get<std::string>()));
  EXPECT_GE(j.at("arguments").size(), 5u);
  EXPECT_TRUE(j.contains("toolkit_version"));
}

TEST(Tool, CheckGradPasses) { EXPECT_EQ(run_tool("check-grad --per-size 1"), 0); }
