#pragma once

// CSV and JSON serialization of library objects.

#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "levydual/dual_domain.hpp"
#include "levydual/dual_solver.hpp"
#include "levydual/errors.hpp"
#include "levydual/market.hpp"
#include "levydual/parallel.hpp"
#include "levydual/tree_oracle.hpp"

namespace levydual {

using Json = nlohmann::ordered_json;

/// %.17g formatting, enough digits to round-trip a double.
inline std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

/// Columnar export: path_id,step,t,S,dW,jump_atom with one row per grid time.
/// Row k carries S_k and the increment/jumps of the step ending at t_k (empty at k = 0);
/// several jumps in one step are ';'-separated atom indices.
inline void write_paths_csv(std::ostream& os, const PathEnsemble& e) {
  os << "path_id,step,t,S,dW,jump_atom\n";
  std::string jumps;
  for (std::size_t p = 0; p < e.n_paths(); ++p) {
    for (std::size_t k = 0; k <= e.n_steps(); ++k) {
      jumps.clear();
      double dw = 0.0;
      if (k > 0) {
        dw = e.dw(p, k - 1);
        const auto counts = e.jump_counts(p, k - 1);
        for (std::size_t i = 0; i < counts.size(); ++i) {
          for (std::uint16_t c = 0; c < counts[i]; ++c) {
            if (!jumps.empty()) jumps += ';';
            jumps += std::to_string(i);
          }
        }
      }
      os << p << ',' << k << ',' << format_double(e.time(k)) << ',' << format_double(e.price(p, k))
         << ',' << format_double(dw) << ',' << jumps << '\n';
    }
  }
}

inline Json to_json(const MeanEstimate& m) {
  return Json{{"mean", m.mean}, {"se", m.se}, {"n", m.count}};
}

/// Flat coefficient table ordered by (control, bucket, feature).
inline Json coefficient_table(const DualElement& d) {
  Json rows = Json::array();
  auto emit = [&](const std::string& control, auto get) {
    for (std::size_t b = 0; b < d.n_buckets(); ++b) {
      const Affine& c = get(d.buckets[b]);
      rows.push_back({{"control", control}, {"bucket", b}, {"feature", "const"}, {"value", c.constant}});
      rows.push_back({{"control", control}, {"bucket", b}, {"feature", "log_price_ratio"}, {"value", c.slope}});
    }
  };
  emit("G", [](const ControlBucket& b) -> const Affine& { return b.g; });
  for (std::size_t i = 0; i < d.n_atoms(); ++i)
    emit("F[" + std::to_string(i) + "]", [i](const ControlBucket& b) -> const Affine& { return b.f[i]; });
  emit("a", [](const ControlBucket& b) -> const Affine& { return b.a; });
  return rows;
}

inline Json to_json(const DualElement& d) {
  Json ranges = Json::array();
  for (const auto& b : d.buckets) {
    auto bound = [](double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); };
    ranges.push_back({{"x_lo", bound(b.x_lo)}, {"x_hi", bound(b.x_hi)}});
  }
  return Json{{"xi0", d.xi0},
              {"horizon", d.horizon},
              {"buckets", d.n_buckets()},
              {"lifted", d.lifted},
              {"state_clamp", ranges},
              {"coefficients", coefficient_table(d)}};
}

inline Json to_json(const TreeMarket& tree) {
  Json layers = Json::array();
  for (const auto& l : tree.layers()) {
    Json br = Json::array();
    for (const auto& b : l.branches) br.push_back({{"p", b.p}, {"r", b.r}});
    layers.push_back({{"branches", br}});
  }
  return Json{{"s0", tree.s0()}, {"depth", tree.depth()}, {"layers", layers}};
}

inline TreeMarket tree_from_json(const Json& j) {
  try {
    std::vector<TreeLayer> layers;
    for (const auto& l : j.at("layers")) {
      TreeLayer layer;
      for (const auto& b : l.at("branches"))
        layer.branches.push_back({b.at("p").get<double>(), b.at("r").get<double>()});
      layers.push_back(std::move(layer));
    }
    if (j.contains("depth") && j.at("depth").get<std::size_t>() != layers.size())
      throw ValidationError("tree json: depth does not match the number of layers");
    return TreeMarket(j.at("s0").get<double>(), std::move(layers));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("tree json: ") + e.what());
  }
}

inline Json to_json(const AuditRow& r) {
  Json j{{"strategy", r.strategy}, {"admissible", r.admissible}};
  if (!r.admissible) {
    j["reason"] = r.reason;
    return j;
  }
  j["primal"] = to_json(r.primal);
  j["bound"] = to_json(r.bound);
  j["excess"] = r.excess;
  j["violation"] = r.violation;
  return j;
}

inline Json to_json(const DualSolveResult& r) {
  return Json{{"z", r.z},
              {"y_star", r.y_star},
              {"v_value", to_json(r.v_value)},
              {"primal_bound", r.primal_bound},
              {"budget_residual", {{"value", r.budget.residual}, {"se", r.budget.spent.se}}},
              {"budget_spent", to_json(r.budget.spent)},
              {"candidate_utility", to_json(r.candidate_utility)},
              {"w_hat", to_json(r.w_hat)},
              {"y_max", r.y_max},
              {"d_star", to_json(r.d_star)}};
}

}  // namespace levydual
