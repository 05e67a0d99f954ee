#pragma once

// Command dispatch for the batch runner. Every command renders its outputs in memory and the
// files are written only once all computation has succeeded.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "config.hpp"
#include "levydual/dual_solver.hpp"
#include "levydual/io.hpp"
#include "levydual/market.hpp"
#include "levydual/tree_oracle.hpp"

namespace levydual::cli {

enum ExitCode : int { kOk = 0, kValidation = 2, kNumerical = 3 };

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> c{"simulate", "solve", "oracle", "audit", "report"};
  return c;
}

struct RunRequest {
  std::string command;
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> paths;
  std::optional<std::size_t> steps;
  std::optional<std::string> out_dir;
  std::string version = "unknown";
};

/// Output files keyed by name; nothing touches the disk until commit().
class Outputs {
 public:
  Outputs(const config::ExperimentConfig& cfg, std::string command, std::string version)
      : cfg_(cfg), command_(std::move(command)), version_(std::move(version)) {}

  Json meta() const {
    return Json{{"tool", "levydual"},
                {"version", version_},
                {"command", command_},
                {"config_hash", cfg_.hash},
                {"seed", cfg_.solve.seed}};
  }

  /// CSV with a leading '#' provenance line, then the header row.
  std::ostringstream& csv(const std::string& name) {
    auto& os = csv_[name];
    os << "# levydual " << version_ << " command=" << command_ << " config_hash=" << cfg_.hash
       << " seed=" << cfg_.solve.seed << '\n';
    return os;
  }

  void json(const std::string& name, Json body) {
    Json doc = meta();
    for (auto& [k, v] : body.items()) doc[k] = std::move(v);
    json_[name] = doc.dump(2) + "\n";
  }

  std::vector<std::string> commit(const std::filesystem::path& dir) const {
    std::vector<std::string> written;
    std::filesystem::create_directories(dir);
    auto put = [&](const std::string& name, const std::string& text) {
      std::ofstream f(dir / name, std::ios::binary);
      f << text;
      if (!f) throw Error("cannot write " + (dir / name).string());
      written.push_back(name);
    };
    if (cfg_.output.csv)
      for (const auto& [name, os] : csv_) put(name, os.str());
    if (cfg_.output.json)
      for (const auto& [name, text] : json_) put(name, text);
    return written;
  }

 private:
  const config::ExperimentConfig& cfg_;
  std::string command_;
  std::string version_;
  std::map<std::string, std::ostringstream> csv_;
  std::map<std::string, std::string> json_;
};

namespace detail {

inline std::string num(double x) { return format_double(x); }

struct SolveOutcome {
  double z = 0.0;
  std::optional<DualSolveResult> result;  ///< empty in the super-hedging region
  double utility_of_claim = 0.0;
  std::string note;
};

inline std::vector<SolveOutcome> solve_all(const config::ExperimentConfig& cfg, const StateUtility& u,
                                           const PathEnsemble& e) {
  std::vector<SolveOutcome> out;
  for (double z : cfg.solve.z) {
    SolveOutcome o;
    o.z = z;
    try {
      o.result = outer_minimize(cfg.market, u, z, e, cfg.solve.solver);
    } catch (const SuperHedgingRegion& r) {
      o.utility_of_claim = r.utility_of_claim();
      o.note = r.what();
    }
    out.push_back(std::move(o));
  }
  return out;
}

inline Json solve_json(const SolveOutcome& o) {
  if (!o.result)
    return Json{{"z", o.z},
                {"super_hedging_region", true},
                {"value", o.utility_of_claim},
                {"note", o.note}};
  Json j = to_json(*o.result);
  j["super_hedging_region"] = false;
  return j;
}

struct OracleRow {
  double z = 0.0;
  PrimalTreeResult primal;
  std::optional<DualTreeResult> dual;
};

struct OracleTree {
  std::string source;
  const TreeMarket* tree = nullptr;
  std::vector<OracleRow> rows;
};

inline std::vector<OracleTree> oracle_all(const config::ExperimentConfig& cfg, const StateUtility& u,
                                          const std::vector<config::NamedTree>& trees) {
  std::vector<OracleTree> out;
  for (const auto& t : trees) {
    OracleTree ot{t.source, &t.tree, {}};
    for (double z : cfg.solve.z) {
      OracleRow row{z, solve_primal_exact(t.tree, u, z, cfg.oracle->options), std::nullopt};
      if (!row.primal.capped) row.dual = solve_dual_exact(t.tree, u, z, cfg.oracle->options);
      ot.rows.push_back(std::move(row));
    }
    out.push_back(std::move(ot));
  }
  return out;
}

inline Json oracle_json(const std::vector<OracleTree>& trees) {
  Json arr = Json::array();
  for (const auto& t : trees) {
    Json rows = Json::array();
    for (const auto& r : t.rows) {
      Json row{{"z", r.z},
               {"u", r.primal.value},
               {"dp_value", r.primal.dp_value},
               {"super_hedge_cost", r.primal.super_hedge_cost},
               {"capped", r.primal.capped},
               {"replayed", r.primal.replayed}};
      if (r.dual)
        row["dual"] = {{"y", r.dual->y},
                       {"v_value", r.dual->v_value},
                       {"bound", r.dual->bound},
                       {"slack", r.dual->slack},
                       {"gap", r.dual->gap},
                       {"budget_residual", r.dual->budget_residual},
                       {"replayed", r.dual->replayed}};
      rows.push_back(std::move(row));
    }
    arr.push_back({{"source", t.source},
                   {"depth", t.tree->depth()},
                   {"tree", to_json(*t.tree)},
                   {"results", std::move(rows)}});
  }
  return arr;
}

}  // namespace detail

/// Runs one command; returns the process exit code.
inline int run(const RunRequest& req, std::ostream& log, std::ostream& err) {
  try {
    if (std::find(commands().begin(), commands().end(), req.command) == commands().end())
      throw ValidationError("unknown command '" + req.command + "'");
    auto overrides = req.overrides;
    if (req.seed) overrides.push_back("solve.seed=" + std::to_string(*req.seed));
    if (req.paths) overrides.push_back("solve.paths=" + std::to_string(*req.paths));
    if (req.steps) overrides.push_back("solve.steps=" + std::to_string(*req.steps));
    if (req.out_dir) overrides.push_back("output.directory=" + *req.out_dir);
    const auto cfg = config::load(req.config_path, overrides);
    const auto u = cfg.utility.make();
    const auto trees = config::oracle_trees(cfg);
    if (req.command == "oracle" && trees.empty())
      throw ValidationError("oracle: the config has no [oracle] section");

    Outputs out(cfg, req.command, req.version);
    const auto& s = cfg.solve;
    if (req.command == "simulate") {
      const auto e = simulate_paths(cfg.market, s.steps, s.paths, s.seed);
      write_paths_csv(out.csv("paths.csv"), e);
    } else if (req.command == "solve") {
      const auto e = simulate_paths(cfg.market, s.steps, s.paths, s.seed);
      const auto solved = detail::solve_all(cfg, u, e);
      for (std::size_t i = 0; i < solved.size(); ++i) {
        const auto& o = solved[i];
        out.json("solve_" + std::to_string(i) + ".json",
                 Json{{"paths", s.paths}, {"steps", s.steps}, {"result", detail::solve_json(o)}});
        auto& os = out.csv("dual_samples_" + std::to_string(i) + ".csv");
        os << "y,v_hat,v_hat_se,objective\n";
        if (o.result)
          for (const auto& smp : o.result->samples)
            os << detail::num(smp.y) << ',' << detail::num(smp.value.mean) << ','
               << detail::num(smp.value.se) << ',' << detail::num(smp.objective) << '\n';
      }
    } else if (req.command == "oracle") {
      const auto rows = detail::oracle_all(cfg, u, trees);
      out.json("oracle.json", Json{{"trees", detail::oracle_json(rows)}});
    } else if (req.command == "audit") {
      const auto e = simulate_paths(cfg.market, s.steps, s.paths, s.seed);
      const auto solved = detail::solve_all(cfg, u, e);
      std::vector<Strategy> strategies;
      for (double b : s.audit_betas) strategies.push_back(Strategy::constant(b));
      auto& os = out.csv("audit.csv");
      os << "z,y,strategy,admissible,primal,primal_se,bound,bound_se,excess,violation,reason\n";
      for (const auto& o : solved) {
        if (!o.result) continue;
        for (const auto& r : weak_duality_audit(cfg.market, u, o.z, strategies, o.result->d_star,
                                                o.result->y_star, e)) {
          std::string reason = r.reason;
          std::replace(reason.begin(), reason.end(), ',', ';');
          os << detail::num(o.z) << ',' << detail::num(o.result->y_star) << ',' << r.strategy << ','
             << (r.admissible ? 1 : 0) << ',';
          if (r.admissible)
            os << detail::num(r.primal.mean) << ',' << detail::num(r.primal.se) << ','
               << detail::num(r.bound.mean) << ',' << detail::num(r.bound.se) << ','
               << detail::num(r.excess) << ',' << (r.violation ? 1 : 0) << ",\n";
          else
            os << ",,,,,," << reason << '\n';
        }
      }
    } else {  // report
      const auto e = simulate_paths(cfg.market, s.steps, s.paths, s.seed);
      const auto solved = detail::solve_all(cfg, u, e);
      const auto curve = dual_value_curve(cfg.market, u, s.curve_y, e, s.solver);
      const auto oracle = detail::oracle_all(cfg, u, trees);
      const detail::OracleTree* ref = oracle.empty() ? nullptr : &oracle.back();

      Json solve_rows = Json::array(), comparison = Json::array();
      auto& uc = out.csv("u_curve.csv");
      uc << "z,u_hat_bound,u_hat_bound_se,candidate_utility,budget_residual,oracle_u\n";
      for (std::size_t i = 0; i < solved.size(); ++i) {
        const auto& o = solved[i];
        const double bound = o.result ? o.result->primal_bound : o.utility_of_claim;
        const double se = o.result ? o.result->v_value.se : 0.0;
        solve_rows.push_back({{"z", o.z},
                              {"super_hedging_region", !o.result},
                              {"y_star", o.result ? Json(o.result->y_star) : Json(nullptr)},
                              {"primal_bound", bound},
                              {"primal_bound_se", se},
                              {"budget_residual",
                               o.result ? Json(o.result->budget.residual) : Json(nullptr)},
                              {"candidate_utility",
                               o.result ? Json(o.result->candidate_utility.mean) : Json(nullptr)}});
        uc << detail::num(o.z) << ',' << detail::num(bound) << ',' << detail::num(se) << ','
           << (o.result ? detail::num(o.result->candidate_utility.mean) : "") << ','
           << (o.result ? detail::num(o.result->budget.residual) : "") << ','
           << (ref ? detail::num(ref->rows[i].primal.value) : "") << '\n';
        if (ref) {
          const auto& orow = ref->rows[i];
          comparison.push_back({{"z", o.z},
                                {"oracle_source", ref->source},
                                {"oracle_u", orow.primal.value},
                                {"mc_bound", bound},
                                {"mc_bound_se", se},
                                {"gap", bound - orow.primal.value},
                                {"oracle_dual_gap", orow.dual ? Json(orow.dual->gap) : Json(nullptr)}});
        }
      }
      auto& vc = out.csv("v_curve.csv");
      vc << "y,v_hat,v_hat_se,oracle_v\n";
      Json curve_rows = Json::array();
      for (const auto& pt : curve.points) {
        std::optional<double> ov;
        if (ref) ov = tree_dual_value(*ref->tree, u, pt.y, cfg.oracle->options);
        vc << detail::num(pt.y) << ',' << detail::num(pt.value.mean) << ','
           << detail::num(pt.value.se) << ',' << (ov ? detail::num(*ov) : "") << '\n';
        curve_rows.push_back({{"y", pt.y},
                              {"v_hat", pt.value.mean},
                              {"v_hat_se", pt.value.se},
                              {"oracle_v", ov ? Json(*ov) : Json(nullptr)}});
      }
      Json body{{"paths", s.paths},
                {"steps", s.steps},
                {"solve", std::move(solve_rows)},
                {"w_hat", to_json(curve.w_hat)},
                {"v_curve", std::move(curve_rows)}};
      if (ref) {
        body["oracle"] = detail::oracle_json(oracle);
        body["comparison"] = std::move(comparison);
      } else {
        body["warning"] = "no [oracle] section: solver results are reported without an exact comparison";
      }
      out.json("report.json", std::move(body));
    }

    const auto written = out.commit(cfg.output.directory);
    for (const auto& name : written) log << (std::filesystem::path(cfg.output.directory) / name).string() << '\n';
    return kOk;
  } catch (const ValidationError& e) {
    err << "validation error: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    err << "numerical error: " << e.what() << '\n';
    return kNumerical;
  }
}

}  // namespace levydual::cli
