#pragma once
// File formats: trace CSV, key-value configs, model files, build sidecars,
// report and loss CSVs. Doubles are written in shortest round-trip form so a
// write/read cycle is bit-exact.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <nlohmann/json.hpp>

#include "waam/analysis.hpp"
#include "waam/control.hpp"
#include "waam/datagen.hpp"
#include "waam/geometry.hpp"
#include "waam/loglog.hpp"
#include "waam/params.hpp"
#include "waam/plant.hpp"
#include "waam/training.hpp"

namespace waam {

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline bool parse_double(std::string_view s, double& out) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  if (s.empty()) return false;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc{} && res.ptr == s.data() + s.size();
}

inline bool parse_int(std::string_view s, long long& out) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return false;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc{} && res.ptr == s.data() + s.size();
}

[[noreturn]] inline void data_error(const std::string& where, std::size_t line, const std::string& what) {
  fail(ErrorKind::data_error, where + ":" + std::to_string(line) + ": " + what);
}

inline std::vector<std::string_view> split_fields(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

// ---------------------------------------------------------------- traces

inline constexpr std::string_view kTraceHeader = "layer,k,t,s_mm,v_t_mm_s,v_w_mm_s,dh_mm,w_mm,direction";

inline void write_traces_csv(std::ostream& os, std::span<const LayerTrace> layers) {
  os << kTraceHeader << '\n';
  for (const auto& tr : layers)
    for (std::size_t k = 0; k < tr.size(); ++k) {
      const auto& s = tr.samples[k];
      os << tr.layer_index << ',' << k << ',' << format_double(s.t) << ',' << format_double(s.s) << ','
         << format_double(s.u.v_t) << ',' << format_double(s.u.v_w) << ',' << format_double(s.y.delta_h) << ','
         << format_double(s.y.w) << ',' << to_string(tr.direction) << '\n';
    }
}

/// Reads every layer of a build. The sampling period of each layer is taken
/// from its second timestamp; single-sample layers borrow it from the others.
inline std::vector<LayerTrace> read_traces_csv(std::istream& is, const std::string& name = "<trace>") {
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(is, line)) data_error(name, lineno, "empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kTraceHeader) data_error(name, lineno, "unexpected header '" + line + "'");

  std::vector<LayerTrace> layers;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_fields(line, ',');
    if (f.size() != 9) data_error(name, lineno, "expected 9 fields, got " + std::to_string(f.size()));
    long long layer = 0, k = 0;
    if (!parse_int(f[0], layer) || layer < 1 || layer > 1000000) data_error(name, lineno, "bad layer index");
    if (!parse_int(f[1], k) || k < 0) data_error(name, lineno, "bad sample index");
    TraceSample smp;
    double* dst[] = {&smp.t, &smp.s, &smp.u.v_t, &smp.u.v_w, &smp.y.delta_h, &smp.y.w};
    for (int j = 0; j < 6; ++j)
      if (!parse_double(f[2 + j], *dst[j]) || !std::isfinite(*dst[j]))
        data_error(name, lineno, "bad numeric field " + std::to_string(3 + j));
    Direction dir;
    if (f[8] == "forward") dir = Direction::forward;
    else if (f[8] == "reverse") dir = Direction::reverse;
    else data_error(name, lineno, "direction must be forward or reverse");

    if (k == 0) {
      LayerTrace tr;
      tr.layer_index = static_cast<int>(layer);
      tr.direction = dir;
      layers.push_back(std::move(tr));
    } else if (layers.empty() || layers.back().layer_index != layer || static_cast<long long>(layers.back().size()) != k ||
               layers.back().direction != dir) {
      data_error(name, lineno, "sample does not continue the current layer");
    }
    if (k > 0 && !(smp.s > layers.back().samples.back().s)) data_error(name, lineno, "positions not strictly increasing");
    if (k > 0 && !(smp.t > layers.back().samples.back().t)) data_error(name, lineno, "time not strictly increasing");
    layers.back().samples.push_back(smp);
  }
  double fallback = 0.1;
  for (const auto& tr : layers)
    if (tr.size() >= 2) fallback = tr.samples[1].t - tr.samples[0].t;
  for (auto& tr : layers) tr.t_s = tr.size() >= 2 ? tr.samples[1].t - tr.samples[0].t : fallback;
  return layers;
}

// ---------------------------------------------------------------- key-value configs

inline constexpr int kConfigSchema = 1;

/// Flat `key = value` map with `#` comments. `schema_version` is mandatory.
class KeyValues {
 public:
  static KeyValues parse(std::istream& is, const std::string& name = "<config>") {
    KeyValues kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto eq = line.find('=');
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
      };
      if (trim(line).empty()) continue;
      if (eq == std::string::npos) data_error(name, lineno, "expected key = value");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty()) data_error(name, lineno, "empty key");
      if (kv.values_.count(key)) data_error(name, lineno, "duplicate key '" + key + "'");
      kv.values_[key] = {value, lineno};
    }
    const auto it = kv.values_.find("schema_version");
    if (it == kv.values_.end()) data_error(name, 0, "missing schema_version");
    long long v = 0;
    if (!parse_int(it->second.value, v) || v != kConfigSchema)
      data_error(name, it->second.line, "unsupported schema_version '" + it->second.value + "'");
    kv.name_ = name;
    kv.used_.insert("schema_version");
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream f(path);
    if (!f) fail(ErrorKind::data_error, "cannot open config '" + path + "'");
    return parse(f, path);
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  void get(const std::string& key, double& out) {
    if (auto* e = find(key)) {
      if (!parse_double(e->value, out) || !std::isfinite(out)) data_error(name_, e->line, "'" + key + "' must be a finite number");
    }
  }
  void get(const std::string& key, int& out) {
    if (auto* e = find(key)) {
      long long v = 0;
      if (!parse_int(e->value, v) || v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
        data_error(name_, e->line, "'" + key + "' must be an integer");
      out = static_cast<int>(v);
    }
  }
  void get(const std::string& key, std::uint64_t& out) {
    if (auto* e = find(key)) {
      const auto res = std::from_chars(e->value.data(), e->value.data() + e->value.size(), out);
      if (res.ec != std::errc{} || res.ptr != e->value.data() + e->value.size())
        data_error(name_, e->line, "'" + key + "' must be a non-negative integer");
    }
  }
  void get(const std::string& key, bool& out) {
    if (auto* e = find(key)) {
      if (e->value == "true" || e->value == "1") out = true;
      else if (e->value == "false" || e->value == "0") out = false;
      else data_error(name_, e->line, "'" + key + "' must be true or false");
    }
  }
  void get(const std::string& key, std::string& out) {
    if (auto* e = find(key)) out = e->value;
  }

  /// Throws on the first key that no reader consumed.
  void reject_unknown() const {
    for (const auto& [k, e] : values_)
      if (!used_.count(k)) data_error(name_, e.line, "unknown key '" + k + "'");
  }

 private:
  struct Entry {
    std::string value;
    std::size_t line = 0;
  };
  Entry* find(const std::string& key) {
    const auto it = values_.find(key);
    if (it == values_.end()) return nullptr;
    used_.insert(key);
    return &it->second;
  }
  std::map<std::string, Entry> values_;
  std::set<std::string> used_;
  std::string name_;
};

inline void read_config(KeyValues& kv, PlantConfig& c) {
  kv.get("plant.t_s", c.t_s);
  kv.get("plant.length", c.length);
  kv.get("plant.k_q", c.k_q);
  kv.get("plant.k_c0", c.k_c0);
  kv.get("plant.k_layer", c.k_layer);
  kv.get("plant.t_env", c.t_env);
  kv.get("plant.t_ref", c.t_ref);
  kv.get("plant.k_a", c.k_a);
  kv.get("plant.w0", c.w0);
  kv.get("plant.k_w", c.k_w);
  kv.get("plant.k_t", c.k_t);
  kv.get("plant.k_shape", c.k_shape);
  kv.get("plant.r0", c.r0);
  kv.get("plant.tau_on", c.tau_on);
  kv.get("plant.d0", c.d0);
  kv.get("plant.sigma_end", c.sigma_end);
  kv.get("plant.sigma_h", c.sigma_h);
  kv.get("plant.sigma_w", c.sigma_w);
  kv.get("plant.lag_samples", c.lag_samples);
  kv.get("plant.edge_effects", c.edge_effects);
  kv.get("plant.seed", c.seed);
}

inline void read_config(KeyValues& kv, ControllerConfig& c) {
  kv.get("controller.target_dh", c.target.delta_h);
  kv.get("controller.target_w", c.target.w);
  kv.get("controller.weight_dh", c.output_weight[0]);
  kv.get("controller.weight_w", c.output_weight[1]);
  kv.get("controller.lambda_vt", c.regularization[0]);
  kv.get("controller.lambda_vw", c.regularization[1]);
  kv.get("controller.max_dvt", c.max_rate.v_t);
  kv.get("controller.max_dvw", c.max_rate.v_w);
  kv.get("controller.vt_min", c.bounds.lo.v_t);
  kv.get("controller.vt_max", c.bounds.hi.v_t);
  kv.get("controller.vw_min", c.bounds.lo.v_w);
  kv.get("controller.vw_max", c.bounds.hi.v_w);
  kv.get("controller.alpha", c.alpha);
  kv.get("controller.rate_hz", c.rate_hz);
  kv.get("controller.interlayer_wait", c.interlayer_wait);
  kv.get("controller.wire_quantum", c.wire_quantum);
  kv.get("controller.nominal_vt", c.nominal.v_t);
  kv.get("controller.nominal_vw", c.nominal.v_w);
}

inline void read_config(KeyValues& kv, TrainConfig& c) {
  kv.get("train.epochs", c.epochs);
  kv.get("train.learning_rate", c.adam.learning_rate);
  kv.get("train.beta1", c.adam.beta1);
  kv.get("train.beta2", c.adam.beta2);
  kv.get("train.epsilon", c.adam.epsilon);
  kv.get("train.batch_size", c.batch_size);
  kv.get("train.truncation", c.truncation);
  kv.get("train.eval_every", c.eval_every);
  kv.get("train.seed", c.seed);
}

inline void read_config(KeyValues& kv, FineTuneConfig& c) {
  kv.get("finetune.lambda", c.lambda);
  kv.get("finetune.epochs", c.epochs);
  kv.get("finetune.learning_rate", c.learning_rate);
  kv.get("finetune.window", c.window);
}

inline void read_config(KeyValues& kv, CoverageSpec& c) {
  int levels = static_cast<int>(c.levels.size());
  kv.get("coverage.levels", levels);
  if (levels != static_cast<int>(c.levels.size())) {
    if (levels < 0) fail(ErrorKind::invalid_argument, "coverage.levels must be >= 0");
    const auto fresh = CoverageSpec::even(levels, c.layers_per_build);
    c.levels = fresh.levels;
  }
  kv.get("coverage.layers_per_build", c.layers_per_build);
  kv.get("coverage.hold_s", c.hold_s);
  kv.get("coverage.vpd_min", c.vpd_min);
  kv.get("coverage.vpd_max", c.vpd_max);
  kv.get("coverage.wire_dither", c.wire_dither);
  kv.get("coverage.interlayer_wait", c.interlayer_wait);
}

/// Snapshot of every config key in the same syntax read_config accepts.
inline std::string config_snapshot(const PlantConfig& p, const ControllerConfig& c, const TrainConfig& t,
                                   const FineTuneConfig& f, const CoverageSpec& cov) {
  std::ostringstream os;
  auto kv = [&](const char* k, auto v) {
    os << k << " = ";
    if constexpr (std::is_same_v<decltype(v), double>) os << format_double(v);
    else if constexpr (std::is_same_v<decltype(v), bool>) os << (v ? "true" : "false");
    else os << v;
    os << '\n';
  };
  kv("schema_version", kConfigSchema);
  kv("plant.t_s", p.t_s);
  kv("plant.length", p.length);
  kv("plant.k_q", p.k_q);
  kv("plant.k_c0", p.k_c0);
  kv("plant.k_layer", p.k_layer);
  kv("plant.t_env", p.t_env);
  kv("plant.t_ref", p.t_ref);
  kv("plant.k_a", p.k_a);
  kv("plant.w0", p.w0);
  kv("plant.k_w", p.k_w);
  kv("plant.k_t", p.k_t);
  kv("plant.k_shape", p.k_shape);
  kv("plant.r0", p.r0);
  kv("plant.tau_on", p.tau_on);
  kv("plant.d0", p.d0);
  kv("plant.sigma_end", p.sigma_end);
  kv("plant.sigma_h", p.sigma_h);
  kv("plant.sigma_w", p.sigma_w);
  kv("plant.lag_samples", p.lag_samples);
  kv("plant.edge_effects", p.edge_effects);
  kv("plant.seed", p.seed);
  kv("controller.target_dh", c.target.delta_h);
  kv("controller.target_w", c.target.w);
  kv("controller.weight_dh", c.output_weight[0]);
  kv("controller.weight_w", c.output_weight[1]);
  kv("controller.lambda_vt", c.regularization[0]);
  kv("controller.lambda_vw", c.regularization[1]);
  kv("controller.max_dvt", c.max_rate.v_t);
  kv("controller.max_dvw", c.max_rate.v_w);
  kv("controller.vt_min", c.bounds.lo.v_t);
  kv("controller.vt_max", c.bounds.hi.v_t);
  kv("controller.vw_min", c.bounds.lo.v_w);
  kv("controller.vw_max", c.bounds.hi.v_w);
  kv("controller.alpha", c.alpha);
  kv("controller.rate_hz", c.rate_hz);
  kv("controller.interlayer_wait", c.interlayer_wait);
  kv("controller.wire_quantum", c.wire_quantum);
  kv("controller.nominal_vt", c.nominal.v_t);
  kv("controller.nominal_vw", c.nominal.v_w);
  kv("train.epochs", t.epochs);
  kv("train.learning_rate", t.adam.learning_rate);
  kv("train.beta1", t.adam.beta1);
  kv("train.beta2", t.adam.beta2);
  kv("train.epsilon", t.adam.epsilon);
  kv("train.batch_size", t.batch_size);
  kv("train.truncation", t.truncation);
  kv("train.eval_every", t.eval_every);
  kv("train.seed", t.seed);
  kv("finetune.lambda", f.lambda);
  kv("finetune.epochs", f.epochs);
  kv("finetune.learning_rate", f.learning_rate);
  kv("finetune.window", f.window);
  kv("coverage.levels", static_cast<int>(cov.levels.size()));
  kv("coverage.layers_per_build", cov.layers_per_build);
  kv("coverage.hold_s", cov.hold_s);
  kv("coverage.vpd_min", cov.vpd_min);
  kv("coverage.vpd_max", cov.vpd_max);
  kv("coverage.wire_dither", cov.wire_dither);
  kv("coverage.interlayer_wait", cov.interlayer_wait);
  return os.str();
}

/// FNV-1a over the text, printed as 16 hex digits.
inline std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ---------------------------------------------------------------- model files

inline constexpr int kModelFormat = 1;

inline void write_model(std::ostream& os, const ModelParams& p) {
  os << "waam-model " << kModelFormat << '\n';
  os << "arch " << to_string(p.arch()) << '\n';
  os << "n " << p.n() << '\n';
  os << "narx_hidden " << p.narx_hidden() << '\n';
  const auto& ns = p.norm();
  auto vec2 = [&](const char* name, const Eigen::Vector2d& v) {
    os << "norm " << name << ' ' << format_double(v[0]) << ' ' << format_double(v[1]) << '\n';
  };
  vec2("u_mean", ns.u_mean);
  vec2("u_std", ns.u_std);
  vec2("y_mean", ns.y_mean);
  vec2("y_std", ns.y_std);
  for (std::size_t i = 0; i < p.blocks().size(); ++i) {
    const auto& b = p.block(i);
    os << "block " << b.name << ' ' << b.rows << ' ' << b.cols << '\n';
    const auto m = p.view(i);
    for (Eigen::Index r = 0; r < b.rows; ++r) {
      for (Eigen::Index c = 0; c < b.cols; ++c) os << (c ? " " : "") << format_double(m(r, c));
      os << '\n';
    }
  }
  os << "end\n";
}

inline ModelParams read_model(std::istream& is, const std::string& name = "<model>") {
  std::string line;
  std::size_t lineno = 0;
  auto next = [&]() -> std::vector<std::string> {
    if (!std::getline(is, line)) data_error(name, lineno + 1, "unexpected end of file");
    ++lineno;
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    return tok;
  };
  auto expect = [&](const std::vector<std::string>& tok, const char* key, std::size_t count) {
    if (tok.size() != count || tok[0] != key) data_error(name, lineno, std::string("expected '") + key + "' record");
  };
  auto as_int = [&](const std::string& s) {
    long long v = 0;
    if (!parse_int(s, v)) data_error(name, lineno, "bad integer '" + s + "'");
    return v;
  };
  auto as_double = [&](const std::string& s) {
    double v = 0.0;
    if (!parse_double(s, v) || !std::isfinite(v)) data_error(name, lineno, "bad number '" + s + "'");
    return v;
  };

  auto tok = next();
  expect(tok, "waam-model", 2);
  if (as_int(tok[1]) != kModelFormat) data_error(name, lineno, "unsupported model format version " + tok[1]);
  tok = next();
  expect(tok, "arch", 2);
  Arch arch;
  try {
    arch = parse_arch(tok[1]);
  } catch (const Error&) {
    data_error(name, lineno, "unknown architecture '" + tok[1] + "'");
  }
  tok = next();
  expect(tok, "n", 2);
  const auto n = as_int(tok[1]);
  tok = next();
  expect(tok, "narx_hidden", 2);
  const auto hidden = as_int(tok[1]);
  if (arch != Arch::loglog && (n < 1 || n > 512)) data_error(name, lineno, "model size out of range");
  if (hidden < 0 || hidden > 4096) data_error(name, lineno, "narx hidden width out of range");
  ModelParams p = ModelParams::zeros(arch, arch == Arch::loglog ? 1 : static_cast<int>(n),
                                     arch == Arch::narx ? static_cast<int>(hidden) : kNarxHidden);
  Eigen::Vector2d* stats[] = {&p.norm().u_mean, &p.norm().u_std, &p.norm().y_mean, &p.norm().y_std};
  const char* stat_names[] = {"u_mean", "u_std", "y_mean", "y_std"};
  for (int i = 0; i < 4; ++i) {
    tok = next();
    if (tok.size() != 4 || tok[0] != "norm" || tok[1] != stat_names[i])
      data_error(name, lineno, std::string("expected 'norm ") + stat_names[i] + "' record");
    *stats[i] = {as_double(tok[2]), as_double(tok[3])};
  }
  if (!p.norm().valid()) data_error(name, lineno, "normalization standard deviations must be positive");
  for (std::size_t i = 0; i < p.blocks().size(); ++i) {
    const auto& b = p.block(i);
    tok = next();
    if (tok.size() != 4 || tok[0] != "block" || tok[1] != b.name || as_int(tok[2]) != b.rows || as_int(tok[3]) != b.cols)
      data_error(name, lineno, "expected block " + b.name + " " + std::to_string(b.rows) + "x" + std::to_string(b.cols));
    auto m = p.view(i);
    for (Eigen::Index r = 0; r < b.rows; ++r) {
      tok = next();
      if (static_cast<Eigen::Index>(tok.size()) != b.cols) data_error(name, lineno, "wrong number of columns in " + b.name);
      for (Eigen::Index c = 0; c < b.cols; ++c) m(r, c) = as_double(tok[static_cast<std::size_t>(c)]);
    }
  }
  tok = next();
  expect(tok, "end", 1);
  return p;
}

inline void save_model(const std::string& path, const ModelParams& p) {
  std::ofstream f(path);
  if (!f) fail(ErrorKind::data_error, "cannot write model '" + path + "'");
  write_model(f, p);
}

inline ModelParams load_model(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorKind::data_error, "cannot open model '" + path + "'");
  return read_model(f, path);
}

inline void save_traces(const std::string& path, std::span<const LayerTrace> layers) {
  std::ofstream f(path);
  if (!f) fail(ErrorKind::data_error, "cannot write traces '" + path + "'");
  write_traces_csv(f, layers);
}

inline std::vector<LayerTrace> load_traces(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorKind::data_error, "cannot open traces '" + path + "'");
  return read_traces_csv(f, path);
}

// ---------------------------------------------------------------- build records

using Json = nlohmann::json;

inline Json to_json(const ProcessOutput& y) { return Json::array({y.delta_h, y.w}); }

/// Sidecar for a build's trace CSV: everything a report or diagnostic needs
/// that the trace itself does not hold.
inline Json build_sidecar(const BuildRecord& rec, const std::string& config_hash) {
  Json j;
  j["format"] = "waam-build";
  j["version"] = 1;
  j["mode"] = to_string(rec.mode);
  j["config_hash"] = config_hash;
  j["plant_seed"] = rec.seed;
  j["length_mm"] = rec.plant.length;
  j["failure"] = rec.failure;
  j["layers"] = Json::array();
  for (const auto& lr : rec.layers) {
    Json l;
    l["layer"] = lr.trace.layer_index;
    l["fine_tune_loss"] = std::isfinite(lr.fine_tune_loss) ? Json(lr.fine_tune_loss) : Json(nullptr);
    l["model_h_mae"] = std::isfinite(lr.model_h_mae) ? Json(lr.model_h_mae) : Json(nullptr);
    l["frozen_h_mae"] = std::isfinite(lr.frozen_h_mae) ? Json(lr.frozen_h_mae) : Json(nullptr);
    l["degenerate_steps"] = lr.degenerate_steps;
    Json yp = Json::array(), yt = Json::array();
    for (const auto& y : lr.y_pred) yp.push_back(to_json(y));
    for (const auto& y : lr.y_target) yt.push_back(to_json(y));
    l["y_pred"] = std::move(yp);
    l["y_target"] = std::move(yt);
    l["state_norm"] = lr.state_norm;
    j["layers"].push_back(std::move(l));
  }
  return j;
}

/// Rebuilds the parts of a BuildRecord that reports and diagnostics use.
inline BuildRecord read_build(const std::string& trace_path, const std::string& sidecar_path) {
  BuildRecord rec;
  const auto traces = load_traces(trace_path);
  std::ifstream f(sidecar_path);
  if (!f) fail(ErrorKind::data_error, "cannot open build sidecar '" + sidecar_path + "'");
  Json j;
  try {
    j = Json::parse(f);
    if (j.at("format") != "waam-build" || j.at("version") != 1) fail(ErrorKind::data_error, "not a version-1 build sidecar");
    rec.mode = parse_mode(j.at("mode").get<std::string>());
    rec.seed = j.at("plant_seed").get<std::uint64_t>();
    rec.plant.length = j.at("length_mm").get<double>();
    rec.failure = j.at("failure").get<std::string>();
    const auto& layers = j.at("layers");
    if (layers.size() != traces.size()) fail(ErrorKind::data_error, "sidecar and trace file disagree on layer count");
    for (std::size_t i = 0; i < traces.size(); ++i) {
      LayerRecord lr;
      lr.trace = traces[i];
      const auto& l = layers[i];
      auto num = [](const Json& v) { return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>(); };
      lr.fine_tune_loss = num(l.at("fine_tune_loss"));
      lr.model_h_mae = num(l.at("model_h_mae"));
      lr.frozen_h_mae = num(l.at("frozen_h_mae"));
      lr.degenerate_steps = l.at("degenerate_steps").get<int>();
      for (const auto& y : l.at("y_pred")) lr.y_pred.push_back({y.at(0).get<double>(), y.at(1).get<double>()});
      for (const auto& y : l.at("y_target")) lr.y_target.push_back({y.at(0).get<double>(), y.at(1).get<double>()});
      lr.state_norm = l.at("state_norm").get<std::vector<double>>();
      rec.layers.push_back(std::move(lr));
    }
  } catch (const Json::exception& e) {
    fail(ErrorKind::data_error, "malformed build sidecar '" + sidecar_path + "': " + e.what());
  }
  return rec;
}

// ---------------------------------------------------------------- reports

inline constexpr std::string_view kReportHeader = "mode,height_sd,width_sd,height_sd_ex,width_sd_ex";

inline void write_report_row(std::ostream& os, const std::string& mode, const ReportRow& r) {
  os << mode << ',' << format_double(r.height_sd) << ',' << format_double(r.width_sd) << ','
     << format_double(r.height_sd_ex) << ',' << format_double(r.width_sd_ex) << '\n';
}

inline void write_report_csv(std::ostream& os, std::span<const BuildReport> reports) {
  os << kReportHeader << '\n';
  for (const auto& r : reports) write_report_row(os, r.mode, r.average);
}

/// One row per (mode, layer, metric).
inline void write_report_long_csv(std::ostream& os, std::span<const BuildReport> reports) {
  os << "mode,layer,metric,value\n";
  for (const auto& rep : reports)
    for (const auto& r : rep.layers) {
      const std::pair<const char*, double> cols[] = {
          {"height_sd", r.height_sd}, {"width_sd", r.width_sd}, {"height_sd_ex", r.height_sd_ex}, {"width_sd_ex", r.width_sd_ex}};
      for (const auto& [name, v] : cols) os << rep.mode << ',' << r.layer << ',' << name << ',' << format_double(v) << '\n';
    }
}

inline void write_loss_csv(std::ostream& os, std::span<const LossRecord> history) {
  os << "epoch,train_mse,val_mse\n";
  for (const auto& h : history) os << h.epoch << ',' << format_double(h.train_mse) << ',' << format_double(h.val_mse) << '\n';
}

}  // namespace waam
