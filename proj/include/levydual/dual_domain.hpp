#pragma once

// Dual elements xi = xi0 * E(X - A) with
//   X = int G dW + sum_i int F_i dÑ_i,   A = int a dt,
// evaluated on simulated paths, plus the drift/compensation machinery that
// decides whether xi deflates every admissible wealth process.
//
// Controls are expanded on equal time buckets times {1, x}, x = log(S/s0).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "levydual/errors.hpp"
#include "levydual/market.hpp"
#include "levydual/parallel.hpp"

namespace levydual {

/// |h| at or below this is treated as exactly zero when forming ĥ.
inline constexpr double kDriftZeroTol = 1e-12;
/// Feasibility tolerance on ĥ <= a.
inline constexpr double kFeasibilityTol = 1e-10;

struct Affine {
  double constant = 0.0;
  double slope = 0.0;
  double operator()(double x) const { return constant + slope * x; }
};

struct ControlBucket {
  Affine g;
  std::vector<Affine> f;  // one per atom
  Affine a;
  // The state feature is clamped to [x_lo, x_hi] before the affine map.
  double x_lo = -kInf;
  double x_hi = kInf;
};

class DualElement {
 public:
  DualElement() = default;
  DualElement(double xi0_, std::size_t n_buckets, std::size_t n_atoms, double horizon_)
      : xi0(xi0_), horizon(horizon_), buckets(n_buckets) {
    if (n_buckets == 0) throw ValidationError("dual element needs at least one time bucket");
    for (auto& b : buckets) b.f.resize(n_atoms);
  }

  double xi0 = 1.0;
  double horizon = 1.0;
  /// Lifted elements add the compensating field D to F and use a = 0; see martingale_lift.
  bool lifted = false;
  std::vector<ControlBucket> buckets{1};

  std::size_t n_buckets() const { return buckets.size(); }
  std::size_t n_atoms() const { return buckets.front().f.size(); }

  std::size_t bucket_of(double t) const {
    const double pos = t / horizon * static_cast<double>(buckets.size());
    const auto idx = static_cast<std::ptrdiff_t>(std::floor(pos + 1e-9));
    return static_cast<std::size_t>(
        std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(buckets.size()) - 1));
  }
  double bucket_start(std::size_t b) const {
    return horizon * static_cast<double>(b) / static_cast<double>(buckets.size());
  }
  double bucket_end(std::size_t b) const { return bucket_start(b + 1); }

  void validate(std::size_t atoms) const {
    if (!(xi0 > 0.0 && xi0 <= 1.0)) throw ValidationError("dual element: xi0 must lie in (0, 1]");
    if (!(horizon > 0.0)) throw ValidationError("dual element: horizon must be positive");
    for (const auto& b : buckets) {
      if (b.f.size() != atoms)
        throw ValidationError("dual element: F has " + std::to_string(b.f.size()) +
                              " atoms, market has " + std::to_string(atoms));
      auto finite = [](const Affine& c) { return std::isfinite(c.constant) && std::isfinite(c.slope); };
      if (!finite(b.g) || !finite(b.a)) throw ValidationError("dual element: non-finite coefficient");
      if (!(b.x_lo <= b.x_hi)) throw ValidationError("dual element: empty state clamp range");
      for (const auto& f : b.f)
        if (!finite(f)) throw ValidationError("dual element: non-finite coefficient");
    }
  }
};

/// Controls of one grid node, after applying the lift if any.
struct NodeControls {
  double g = 0.0;
  double a = 0.0;
  std::vector<double> f;
};

/// h = b + sigma G + sum_i lambda_i v_i F_i for given node controls.
inline double drift_from_controls(const LevyMarketSpec& spec, double t, double g,
                                  std::span<const double> f) {
  double h = spec.b(t) + spec.sigma(t) * g;
  for (std::size_t i = 0; i < f.size(); ++i) h += spec.atoms[i].intensity * spec.v(t, i) * f[i];
  return h;
}

/// ĥ for a drift value h at time t; infinity when no admissible compensation exists.
inline double hat_h_from_drift(const LevyMarketSpec& spec, double t, double h) {
  if (std::abs(h) <= kDriftZeroTol) return 0.0;
  const Interval ext = spec.coefficient_extremes();
  const double top = std::max(ext.hi, 0.0);
  const double bottom = std::min(ext.lo, 0.0);
  const double hz = spec.jump_case == JumpCase::kMultiplicative ? h / spec.zeta_at(t) : h;
  if (hz < 0.0) return top == 0.0 ? kInf : -hz / top;
  return bottom == 0.0 ? kInf : -hz / bottom;
}

namespace detail {

inline void raw_controls(const DualElement& d, double t, double x, NodeControls& out) {
  const auto& b = d.buckets[d.bucket_of(t)];
  x = std::clamp(x, b.x_lo, b.x_hi);
  out.g = b.g(x);
  out.a = b.a(x);
  out.f.resize(b.f.size());
  for (std::size_t i = 0; i < b.f.size(); ++i) out.f[i] = b.f[i](x);
}

// Adds D to out.f so that the drift vanishes, and zeroes a.
inline void apply_lift(const LevyMarketSpec& spec, double t, NodeControls& out) {
  const double h = drift_from_controls(spec, t, out.g, out.f);
  out.a = 0.0;
  if (std::abs(h) <= kDriftZeroTol) return;
  const Interval ext = spec.coefficient_extremes();
  const double hz = spec.jump_case == JumpCase::kMultiplicative ? h / spec.zeta_at(t) : h;
  const double target = hz < 0.0 ? ext.hi : ext.lo;
  if ((hz < 0.0 && !(target > 0.0)) || (hz > 0.0 && !(target < 0.0)))
    throw ValidationError("lifted element evaluated at a node where ĥ is infinite");
  if (spec.jump_case == JumpCase::kFiniteAtoms) {
    for (std::size_t i = 0; i < spec.atoms.size(); ++i) {
      if (spec.atoms[i].coefficient == target) {  // lowest index wins ties
        out.f[i] += -h / (spec.v(t, i) * spec.atoms[i].intensity);
        return;
      }
    }
  } else {
    double mass = 0.0;
    for (const auto& a : spec.atoms)
      if (a.coefficient == target) mass += a.intensity;
    const double dz = -hz / (target * mass);
    for (std::size_t i = 0; i < spec.atoms.size(); ++i)
      if (spec.atoms[i].coefficient == target) out.f[i] += dz;
    return;
  }
  throw UnsupportedStructureError("lift: extreme jump coefficient is not carried by an atom");
}

}  // namespace detail

/// Effective controls (G, F, a) of d at time t and log-price ratio x.
inline void evaluate_controls(const LevyMarketSpec& spec, const DualElement& d, double t, double x,
                              NodeControls& out) {
  detail::raw_controls(d, t, x, out);
  if (d.lifted) detail::apply_lift(spec, t, out);
}

inline double drift_h(const LevyMarketSpec& spec, const DualElement& d, double t, double x) {
  NodeControls c;
  evaluate_controls(spec, d, t, x, c);
  return drift_from_controls(spec, t, c.g, c.f);
}

inline double hat_h(const LevyMarketSpec& spec, const DualElement& d, double t, double x) {
  return hat_h_from_drift(spec, t, drift_h(spec, d, t, x));
}

/// One multiplicative deflator step; returns the new value (0 once sunk).
/// Throws ValidationError for F < -1 or a < 0, DiscretizationError for a negative factor.
inline double deflator_step(const LevyMarketSpec& spec, const NodeControls& c, double t, double dt,
                            double dw, std::span<const std::uint16_t> jumps, double xi,
                            std::size_t step) {
  if (xi == 0.0) return 0.0;
  if (c.a < 0.0)
    throw ValidationError("dual element: a < 0 at step " + std::to_string(step));
  double factor = 1.0 + c.g * dw - c.a * dt;
  bool sinks = false;
  for (std::size_t i = 0; i < c.f.size(); ++i) {
    if (c.f[i] < -1.0)
      throw ValidationError("dual element: F < -1 on atom " + std::to_string(i) + " at step " +
                            std::to_string(step));
    factor += c.f[i] * (static_cast<double>(jumps[i]) - spec.atoms[i].intensity * dt);
    if (jumps[i] > 0 && c.f[i] == -1.0) sinks = true;
  }
  if (sinks) return 0.0;
  if (factor < 0.0)
    throw DiscretizationError("deflator step factor is negative at step " + std::to_string(step),
                              step);
  return xi * factor;
}

/// xi_0, ..., xi_n along one path.
inline std::vector<double> stochastic_exponential(const PathView& path, const DualElement& d) {
  const auto& e = path.ensemble();
  const auto& spec = e.spec();
  d.validate(spec.n_atoms());
  std::vector<double> xi(path.n_steps() + 1);
  xi[0] = d.xi0;
  NodeControls c;
  for (std::size_t k = 0; k < path.n_steps(); ++k) {
    if (xi[k] == 0.0) {
      xi[k + 1] = 0.0;
      continue;
    }
    evaluate_controls(spec, d, path.time(k), path.log_ratio(k), c);
    xi[k + 1] = deflator_step(spec, c, path.time(k), e.dt(), path.dw(k), path.jump_counts(k),
                              xi[k], k);
  }
  return xi;
}

/// Terminal values xi_T for every path of the ensemble.
inline std::vector<double> terminal_deflators(const PathEnsemble& e, const DualElement& d) {
  const auto& spec = e.spec();
  d.validate(spec.n_atoms());
  std::vector<double> out(e.n_paths());
  for_each_chunk(e.n_paths(), [&](std::size_t, std::size_t begin, std::size_t end) {
    NodeControls c;
    for (std::size_t p = begin; p < end; ++p) {
      double xi = d.xi0;
      for (std::size_t k = 0; k < e.n_steps() && xi != 0.0; ++k) {
        evaluate_controls(spec, d, e.time(k), e.log_ratio(p, k), c);
        xi = deflator_step(spec, c, e.time(k), e.dt(), e.dw(p, k), e.jump_counts(p, k), xi, k);
      }
      out[p] = xi;
    }
  });
  return out;
}

struct FeasibilityReport {
  bool feasible = true;
  /// Some node has F < -1 or a < 0 (hard constraint, not a tolerance matter).
  bool hard_violation = false;
  /// Largest positive ĥ - a over visited nodes (0 if none); may be infinite.
  double max_violation = 0.0;
  std::size_t path = 0;
  std::size_t step = 0;
  double t = 0.0;
  double x = 0.0;
  std::size_t nodes_checked = 0;
};

/// Checks F >= -1, a >= 0 and ĥ <= a + tol at every node visited before sinking.
inline FeasibilityReport feasibility_check(const LevyMarketSpec& spec, const DualElement& d,
                                           const PathEnsemble& e) {
  d.validate(spec.n_atoms());
  const std::size_t n_chunks = chunk_count(e.n_paths());
  std::vector<FeasibilityReport> partial(n_chunks);
  for_each_chunk(e.n_paths(), [&](std::size_t chunk, std::size_t begin, std::size_t end) {
    FeasibilityReport& r = partial[chunk];
    NodeControls c;
    for (std::size_t p = begin; p < end; ++p) {
      double xi = d.xi0;
      for (std::size_t k = 0; k < e.n_steps() && xi != 0.0; ++k) {
        const double t = e.time(k), x = e.log_ratio(p, k);
        evaluate_controls(spec, d, t, x, c);
        ++r.nodes_checked;
        bool hard = c.a < 0.0;
        for (double f : c.f) hard = hard || f < -1.0;
        const double excess = hat_h_from_drift(spec, t, drift_from_controls(spec, t, c.g, c.f)) - c.a;
        if (hard && !r.hard_violation) {
          r.hard_violation = true;
          r.path = p, r.step = k, r.t = t, r.x = x;
        }
        if (excess > r.max_violation) {
          r.max_violation = excess;
          if (!r.hard_violation) r.path = p, r.step = k, r.t = t, r.x = x;
        }
        if (hard) break;
        try {
          xi = deflator_step(spec, c, t, e.dt(), e.dw(p, k), e.jump_counts(p, k), xi, k);
        } catch (const DiscretizationError&) {
          break;
        }
      }
    }
  });
  FeasibilityReport out;
  for (const auto& r : partial) {
    out.nodes_checked += r.nodes_checked;
    if (r.hard_violation && !out.hard_violation) {
      out.hard_violation = true;
      out.path = r.path, out.step = r.step, out.t = r.t, out.x = r.x;
    }
    if (r.max_violation > out.max_violation) {
      out.max_violation = r.max_violation;
      if (!out.hard_violation) out.path = r.path, out.step = r.step, out.t = r.t, out.x = r.x;
    }
  }
  out.feasible = !out.hard_violation && out.max_violation <= kFeasibilityTol;
  return out;
}

namespace detail {

// Times at which the market coefficients seen by bucket b can take distinct values.
inline std::vector<double> bucket_sample_times(const LevyMarketSpec& spec, const DualElement& d,
                                               std::size_t b) {
  std::vector<double> ts{d.bucket_start(b)};
  for (double bp : spec.breakpoints())
    if (bp > d.bucket_start(b) && bp < d.bucket_end(b)) ts.push_back(bp);
  return ts;
}

}  // namespace detail

/// True when the raw controls give h == 0 and a == 0 identically (coefficientwise).
inline bool is_local_martingale_element(const LevyMarketSpec& spec, const DualElement& d) {
  if (d.lifted) return true;
  for (std::size_t b = 0; b < d.n_buckets(); ++b) {
    const auto& bk = d.buckets[b];
    if (bk.a.constant != 0.0 || bk.a.slope != 0.0) return false;
    for (double t : detail::bucket_sample_times(spec, d, b)) {
      double h0 = spec.b(t) + spec.sigma(t) * bk.g.constant;
      double h1 = spec.sigma(t) * bk.g.slope;
      for (std::size_t i = 0; i < bk.f.size(); ++i) {
        h0 += spec.atoms[i].intensity * spec.v(t, i) * bk.f[i].constant;
        h1 += spec.atoms[i].intensity * spec.v(t, i) * bk.f[i].slope;
      }
      if (std::abs(h0) > kDriftZeroTol || std::abs(h1) > kDriftZeroTol) return false;
    }
  }
  return true;
}

/// Replaces (F, a) by (F + D, 0) with D >= 0 on the extreme atoms so that h == 0.
/// For a feasible input the result dominates the input deflator pathwise.
inline DualElement martingale_lift(const LevyMarketSpec& spec, const DualElement& d) {
  spec.validate();
  d.validate(spec.n_atoms());
  if (is_local_martingale_element(spec, d)) return d;
  if (!spec.extremes_attained())
    throw UnsupportedStructureError(
        "martingale_lift: the extreme jump coefficients are not attained by atoms with positive "
        "intensity");
  DualElement out = d;
  out.lifted = true;
  for (auto& b : out.buckets) b.a = Affine{};
  return out;
}

/// Least-squares risk-neutral element: a = 0, h = 0 with the minimal-norm split.
inline DualElement risk_neutral_density(const LevyMarketSpec& spec) {
  spec.validate();
  std::size_t n_buckets = 1;
  for (const auto* f : {&spec.drift, &spec.volatility, &spec.zeta})
    n_buckets = std::lcm(n_buckets, f->pieces());
  DualElement d(1.0, n_buckets, spec.n_atoms(), spec.horizon);
  constexpr double kFloor = -1.0 + 1e-6;
  for (std::size_t b = 0; b < n_buckets; ++b) {
    const double t = 0.5 * (d.bucket_start(b) + d.bucket_end(b));
    const double drift = spec.b(t);
    if (spec.sigma(t) > 0.0) {
      d.buckets[b].g.constant = -drift / spec.sigma(t);
      continue;
    }
    if (drift == 0.0) continue;
    // F_i = max(floor, mu v_i); g(mu) = sum lambda_i v_i F_i is nondecreasing in mu.
    auto fill = [&](double mu) {
      double s = 0.0;
      for (std::size_t i = 0; i < spec.n_atoms(); ++i) {
        const double v = spec.v(t, i);
        s += spec.atoms[i].intensity * v * std::max(kFloor, mu * v);
      }
      return s;
    };
    const double target = -drift;
    double weight = 0.0;
    for (std::size_t i = 0; i < spec.n_atoms(); ++i)
      weight += spec.atoms[i].intensity * spec.v(t, i) * spec.v(t, i);
    if (weight > 0.0) {
      const double mu = target / weight;
      bool clipped = false;
      for (std::size_t i = 0; i < spec.n_atoms(); ++i) clipped = clipped || mu * spec.v(t, i) < kFloor;
      if (!clipped) {
        for (std::size_t i = 0; i < spec.n_atoms(); ++i)
          d.buckets[b].f[i].constant = mu * spec.v(t, i);
        continue;
      }
    }
    double lo = -1.0, hi = 1.0;
    int expand = 0;
    while (fill(lo) > target || fill(hi) < target) {
      if (++expand > 200 || spec.n_atoms() == 0)
        throw NoEquivalentMeasureError(
            "risk_neutral_density: no F > -1 removes the drift " + std::to_string(drift) +
            " at t = " + std::to_string(t));
      lo *= 2.0;
      hi *= 2.0;
    }
    for (int it = 0; it < 200 && hi - lo > 1e-15 * std::max(1.0, std::abs(hi)); ++it) {
      const double mid = 0.5 * (lo + hi);
      (fill(mid) < target ? lo : hi) = mid;
    }
    const double mu = 0.5 * (lo + hi);
    for (std::size_t i = 0; i < spec.n_atoms(); ++i)
      d.buckets[b].f[i].constant = std::max(kFloor, mu * spec.v(t, i));
  }
  return d;
}

}  // namespace levydual
