#pragma once

// Experiment configuration: sectioned INI text with a schema version, parsed into
// library types and validated before any computation starts.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "levydual/dual_solver.hpp"
#include "levydual/errors.hpp"
#include "levydual/io.hpp"
#include "levydual/market.hpp"
#include "levydual/tree_oracle.hpp"
#include "levydual/utility.hpp"

namespace levydual::config {

inline constexpr int kSchemaVersion = 1;

/// Flattened "section.key" -> raw value; top-level keys have no section prefix.
using KeyValues = std::map<std::string, std::string>;

inline const std::map<std::string, std::set<std::string>>& schema() {
  static const std::map<std::string, std::set<std::string>> s{
      {"", {"schema_version"}},
      {"market",
       {"s0", "horizon", "drift", "sigma", "jump_case", "jump_coefficients", "jump_intensities",
        "jump_locations", "zeta", "support_lo", "support_hi"}},
      {"utility", {"loss", "loss_power", "claim", "claim_parameter"}},
      {"solve",
       {"z", "paths", "steps", "seed", "restarts", "iterations", "buckets", "step", "eps_f",
        "y_tolerance", "curve_y", "audit_betas"}},
      {"oracle", {"depth", "tree_file", "grid_points", "golden_iterations", "path_limit"}},
      {"output", {"directory", "formats"}}};
  return s;
}

inline std::pair<std::string, std::string> split_key(const std::string& full) {
  const auto dot = full.find('.');
  if (dot == std::string::npos) return {"", full};
  return {full.substr(0, dot), full.substr(dot + 1)};
}

inline bool known_key(const std::string& full) {
  const auto [section, key] = split_key(full);
  const auto it = schema().find(section);
  return it != schema().end() && it->second.count(key) > 0;
}

/// Reads INI text into flat key-values; unknown keys are reported together.
inline KeyValues parse_ini(std::istream& in) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  KeyValues kv;
  std::vector<std::string> unknown;
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      kv[name] = node.data();
      if (!known_key(name)) unknown.push_back(name);
      continue;
    }
    for (const auto& [key, leaf] : node) {
      const std::string full = name + "." + key;
      kv[full] = leaf.data();
      if (!known_key(full)) unknown.push_back(full);
    }
  }
  if (!unknown.empty()) {
    std::string msg = "config: unknown keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw ValidationError(msg);
  }
  return kv;
}

/// Applies "section.key=value" overrides; the key must exist in the schema.
inline void apply_overrides(KeyValues& kv, const std::vector<std::string>& overrides) {
  std::vector<std::string> unknown;
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ValidationError("config: override '" + o + "' is not key=value");
    const std::string key = o.substr(0, eq);
    if (!known_key(key)) {
      unknown.push_back(key);
      continue;
    }
    kv[key] = o.substr(eq + 1);
  }
  if (!unknown.empty()) {
    std::string msg = "config: unknown keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw ValidationError(msg);
  }
}

/// FNV-1a over the canonical "key=value\n" listing (keys sorted), as 16 hex digits.
/// output.directory is left out: where results go does not change what they are.
inline std::string config_hash(const KeyValues& kv) {
  std::uint64_t h = 14695981039346656037ull;
  auto feed = [&h](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
  };
  for (const auto& [k, v] : kv)
    if (k != "output.directory") feed(k + "=" + v + "\n");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double to_double(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  double x = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(x))
    throw ValidationError("config: " + key + " = '" + raw + "' is not a finite number");
  return x;
}

inline std::uint64_t to_uint(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  std::uint64_t x = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size())
    throw ValidationError("config: " + key + " = '" + raw + "' is not a non-negative integer");
  return x;
}

inline std::vector<double> to_doubles(const std::string& key, const std::string& raw) {
  std::vector<double> out;
  for (const auto& item : split_list(raw)) out.push_back(to_double(key, item));
  return out;
}

class Reader {
 public:
  explicit Reader(const KeyValues& kv) : kv_(kv) {}

  bool has(const std::string& key) const { return kv_.count(key) > 0; }
  bool has_section(const std::string& section) const {
    return std::any_of(kv_.begin(), kv_.end(),
                       [&](const auto& e) { return split_key(e.first).first == section; });
  }
  std::string text(const std::string& key, const std::string& fallback) const {
    const auto it = kv_.find(key);
    return it == kv_.end() ? fallback : trim(it->second);
  }
  double number(const std::string& key, double fallback) const {
    return has(key) ? to_double(key, kv_.at(key)) : fallback;
  }
  std::uint64_t integer(const std::string& key, std::uint64_t fallback) const {
    return has(key) ? to_uint(key, kv_.at(key)) : fallback;
  }
  std::vector<double> numbers(const std::string& key, std::vector<double> fallback) const {
    return has(key) ? to_doubles(key, kv_.at(key)) : fallback;
  }

 private:
  const KeyValues& kv_;
};

}  // namespace detail

struct UtilitySection {
  std::string loss = "quadratic";
  double loss_power = 2.0;
  std::string claim = "constant";
  double claim_parameter = 1.0;

  StateUtility make() const {
    Loss l = loss == "linear"      ? Loss::linear()
             : loss == "quadratic" ? Loss::quadratic()
             : loss == "power"     ? Loss::power(loss_power)
                                   : throw ValidationError("config: utility.loss must be linear, quadratic or power");
    Claim c = claim == "constant" ? Claim::constant(claim_parameter)
              : claim == "call"   ? Claim::call(claim_parameter)
              : claim == "put"    ? Claim::put(claim_parameter)
                                  : throw ValidationError("config: utility.claim must be constant, call or put");
    return make_shortfall_utility(std::move(l), c);
  }
};

struct SolveSection {
  std::vector<double> z;
  std::size_t paths = 20000;
  std::size_t steps = 50;
  std::uint64_t seed = 0;
  SolverOptions solver;
  std::vector<double> curve_y;
  std::vector<double> audit_betas{0.0, 0.5, 1.0};
};

struct OracleSection {
  std::vector<std::size_t> depths;
  std::optional<std::string> tree_file;  ///< resolved against the config directory
  TreeOracleOptions options;
};

struct OutputSection {
  std::string directory = "out";
  bool csv = true;
  bool json = true;
};

/// Resolved, validated experiment.
struct ExperimentConfig {
  KeyValues raw;
  std::string hash;
  LevyMarketSpec market;
  UtilitySection utility;
  SolveSection solve;
  std::optional<OracleSection> oracle;
  OutputSection output;
};

/// Builds and validates the experiment from flat key-values. base_dir resolves relative paths.
inline ExperimentConfig build(const KeyValues& kv, const std::filesystem::path& base_dir = {}) {
  detail::Reader r(kv);
  ExperimentConfig cfg;
  cfg.raw = kv;
  cfg.hash = config_hash(kv);

  if (!r.has("schema_version")) throw ValidationError("config: missing schema_version");
  if (r.integer("schema_version", 0) != kSchemaVersion)
    throw ValidationError("config: unsupported schema_version " + r.text("schema_version", "") +
                          " (expected " + std::to_string(kSchemaVersion) + ")");
  for (const char* s : {"market", "utility", "solve"})
    if (!r.has_section(s)) throw ValidationError(std::string("config: missing section [") + s + "]");

  auto& m = cfg.market;
  m.s0 = r.number("market.s0", 1.0);
  m.horizon = r.number("market.horizon", 1.0);
  auto piecewise = [&](const std::string& key, double fallback) {
    const auto v = r.numbers(key, {fallback});
    if (v.empty()) throw ValidationError("config: " + key + " needs at least one value");
    return PiecewiseConstant(v);
  };
  m.drift = piecewise("market.drift", 0.0);
  m.volatility = piecewise("market.sigma", 0.0);
  m.zeta = piecewise("market.zeta", 1.0);
  const std::string jc = r.text("market.jump_case", "atoms");
  if (jc == "atoms") m.jump_case = JumpCase::kFiniteAtoms;
  else if (jc == "multiplicative") m.jump_case = JumpCase::kMultiplicative;
  else throw ValidationError("config: market.jump_case must be atoms or multiplicative");
  const auto coef = r.numbers("market.jump_coefficients", {});
  const auto lam = r.numbers("market.jump_intensities", {});
  const auto loc = r.numbers("market.jump_locations", {});
  if (coef.size() != lam.size())
    throw ValidationError("config: market.jump_coefficients and jump_intensities differ in length");
  if (!loc.empty() && loc.size() != coef.size())
    throw ValidationError("config: market.jump_locations must match jump_coefficients in length");
  for (std::size_t i = 0; i < coef.size(); ++i)
    m.atoms.push_back({loc.empty() ? coef[i] : loc[i], lam[i], coef[i]});
  if (r.has("market.support_lo")) m.support_lo = r.number("market.support_lo", 0.0);
  if (r.has("market.support_hi")) m.support_hi = r.number("market.support_hi", 0.0);
  m.validate();

  cfg.utility.loss = r.text("utility.loss", "quadratic");
  cfg.utility.loss_power = r.number("utility.loss_power", 2.0);
  cfg.utility.claim = r.text("utility.claim", "constant");
  cfg.utility.claim_parameter = r.number("utility.claim_parameter", 1.0);
  cfg.utility.make();

  auto& s = cfg.solve;
  s.z = r.numbers("solve.z", {});
  if (s.z.empty()) throw ValidationError("config: solve.z needs at least one value");
  for (double z : s.z)
    if (!(z > 0.0)) throw ValidationError("config: solve.z values must be > 0");
  s.paths = r.integer("solve.paths", s.paths);
  s.steps = r.integer("solve.steps", s.steps);
  if (s.paths == 0) throw ValidationError("config: solve.paths must be >= 1");
  if (s.steps == 0) throw ValidationError("config: solve.steps must be >= 1");
  s.seed = r.integer("solve.seed", 0);
  s.solver.seed = s.seed;
  s.solver.restarts = r.integer("solve.restarts", s.solver.restarts);
  s.solver.iterations = r.integer("solve.iterations", s.solver.iterations);
  s.solver.n_buckets = r.integer("solve.buckets", s.solver.n_buckets);
  s.solver.step = r.number("solve.step", s.solver.step);
  s.solver.eps_f = r.number("solve.eps_f", s.solver.eps_f);
  s.solver.y_tolerance = r.number("solve.y_tolerance", s.solver.y_tolerance);
  s.solver.validate();
  s.curve_y = r.numbers("solve.curve_y", {});
  if (s.curve_y.empty())
    for (int k = 1; k <= 30; ++k) s.curve_y.push_back(0.1 * k);
  for (double y : s.curve_y)
    if (!(y >= 0.0)) throw ValidationError("config: solve.curve_y values must be >= 0");
  s.audit_betas = r.numbers("solve.audit_betas", s.audit_betas);

  if (r.has_section("oracle")) {
    OracleSection o;
    for (double d : r.numbers("oracle.depth", {})) {
      if (d != std::floor(d) || d < 1.0 || d > static_cast<double>(kMaxTreeDepth))
        throw ValidationError("config: oracle.depth values must be integers in [1, " +
                              std::to_string(kMaxTreeDepth) + "]");
      o.depths.push_back(static_cast<std::size_t>(d));
    }
    if (r.has("oracle.tree_file")) {
      std::filesystem::path p = r.text("oracle.tree_file", "");
      if (p.is_relative()) p = base_dir / p;
      o.tree_file = p.string();
    }
    if (o.depths.empty() && !o.tree_file)
      throw ValidationError("config: [oracle] needs depth or tree_file");
    o.options.grid_points = r.integer("oracle.grid_points", o.options.grid_points);
    o.options.golden_iterations =
        static_cast<int>(r.integer("oracle.golden_iterations", o.options.golden_iterations));
    o.options.path_limit = r.integer("oracle.path_limit", o.options.path_limit);
    o.options.validate();
    cfg.oracle = std::move(o);
  }

  cfg.output.directory = r.text("output.directory", cfg.output.directory);
  if (r.has("output.formats")) {
    cfg.output.csv = cfg.output.json = false;
    for (const auto& f : detail::split_list(r.text("output.formats", ""))) {
      if (f == "csv") cfg.output.csv = true;
      else if (f == "json") cfg.output.json = true;
      else throw ValidationError("config: output.formats accepts csv and json, got '" + f + "'");
    }
  }
  return cfg;
}

/// Reads a config file, applies overrides, validates.
inline ExperimentConfig load(const std::filesystem::path& path,
                             const std::vector<std::string>& overrides = {}) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config: cannot open " + path.string());
  auto kv = parse_ini(in);
  apply_overrides(kv, overrides);
  return build(kv, path.parent_path());
}

/// Oracle trees in evaluation order: explicit file first, then one per depth.
struct NamedTree {
  std::string source;
  TreeMarket tree;
};

inline std::vector<NamedTree> oracle_trees(const ExperimentConfig& cfg) {
  std::vector<NamedTree> out;
  if (!cfg.oracle) return out;
  if (cfg.oracle->tree_file) {
    std::ifstream in(*cfg.oracle->tree_file);
    if (!in) throw ValidationError("config: cannot open tree file " + *cfg.oracle->tree_file);
    Json j;
    try {
      j = Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("config: tree file: ") + e.what());
    }
    out.push_back({"file", tree_from_json(j)});
  }
  for (std::size_t d : cfg.oracle->depths)
    out.push_back({"depth " + std::to_string(d), build_tree(cfg.market, d)});
  return out;
}

}  // namespace levydual::config
