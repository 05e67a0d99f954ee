#pragma once

/**
 * @file market.hpp
 * @brief Lévy market model: price dynamics, path simulation, self-financed wealth.
 *
 * The discounted price follows
 *
 *   dS_t = S_{t-} ( b_t dt + sigma_t dW_t + sum_i v(t, z_i) dÑ_i(t) ),
 *
 * driven by a Brownian motion and finitely many compensated Poisson clocks
 * (one per jump atom z_i with intensity lambda_i). Two jump structures are
 * supported:
 *
 *  - finite atoms:    v(t, z_i) = v_i, time homogeneous;
 *  - multiplicative:  v(t, z_i) = zeta_t * theta(z_i).
 *
 * Simulation is a multiplicative Euler scheme with exact jump timing. A step
 * whose factor would be non-positive is refined by Brownian-bridge halving.
 */

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "levydual/errors.hpp"
#include "levydual/parallel.hpp"
#include "levydual/rng.hpp"

namespace levydual {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Closed interval with possibly infinite endpoints.
struct Interval {
  double lo = -kInf;
  double hi = kInf;
  bool contains(double x) const { return lo <= x && x <= hi; }
};

/// A function of time that is constant on equal-length pieces of [0, T].
class PiecewiseConstant {
 public:
  PiecewiseConstant(double value = 0.0) : values_{value} {}  // NOLINT: implicit by design of configs
  explicit PiecewiseConstant(std::vector<double> values) : values_(std::move(values)) {
    if (values_.empty()) throw ValidationError("piecewise-constant function needs at least one value");
  }

  double at(double t, double horizon) const {
    if (values_.size() == 1) return values_.front();
    const double pos = t / horizon * static_cast<double>(values_.size());
    const auto idx = static_cast<std::ptrdiff_t>(std::floor(pos + 1e-9));
    return values_[static_cast<std::size_t>(
        std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(values_.size()) - 1))];
  }

  std::span<const double> values() const { return values_; }
  std::size_t pieces() const { return values_.size(); }

 private:
  std::vector<double> values_;
};

enum class JumpCase { kFiniteAtoms, kMultiplicative };

struct JumpAtom {
  double location = 0.0;     ///< z_i; informational
  double intensity = 0.0;    ///< lambda_i, jumps per unit time
  double coefficient = 0.0;  ///< v_i (finite atoms) or theta(z_i) (multiplicative)
};

/// Coefficients of the price equation and the driving jump measure.
struct LevyMarketSpec {
  PiecewiseConstant drift{0.0};
  PiecewiseConstant volatility{0.0};
  PiecewiseConstant zeta{1.0};  ///< multiplicative case only
  JumpCase jump_case = JumpCase::kFiniteAtoms;
  std::vector<JumpAtom> atoms;
  /// Declared extremes of the jump coefficient's support when they are wider
  /// than the simulated atoms (e.g. jumps arbitrarily close to -1).
  std::optional<double> support_lo;
  std::optional<double> support_hi;
  double s0 = 1.0;
  double horizon = 1.0;

  double b(double t) const { return drift.at(t, horizon); }
  double sigma(double t) const { return volatility.at(t, horizon); }
  double zeta_at(double t) const {
    return jump_case == JumpCase::kMultiplicative ? zeta.at(t, horizon) : 1.0;
  }
  std::size_t n_atoms() const { return atoms.size(); }

  /// Relative jump size v(t, z_i).
  double v(double t, std::size_t i) const { return zeta_at(t) * atoms[i].coefficient; }

  /// sum_i lambda_i v(t, z_i), the drift removed by the compensated clocks.
  double compensator(double t) const {
    double s = 0.0;
    for (std::size_t i = 0; i < atoms.size(); ++i) s += atoms[i].intensity * v(t, i);
    return s;
  }

  /// Extremes of the jump coefficient (v in the atom case, theta in the
  /// multiplicative case) over atoms and declared support. Empty -> {+inf, -inf}.
  Interval coefficient_extremes() const {
    Interval out{kInf, -kInf};
    for (const auto& a : atoms) {
      out.lo = std::min(out.lo, a.coefficient);
      out.hi = std::max(out.hi, a.coefficient);
    }
    if (support_lo) out.lo = std::min(out.lo, *support_lo);
    if (support_hi) out.hi = std::max(out.hi, *support_hi);
    return out;
  }

  /// True when the extremes are realized by atoms with positive intensity.
  bool extremes_attained() const {
    if (atoms.empty()) return !support_lo && !support_hi;
    double lo = kInf, hi = -kInf;
    for (const auto& a : atoms) {
      lo = std::min(lo, a.coefficient);
      hi = std::max(hi, a.coefficient);
    }
    const auto ext = coefficient_extremes();
    return ext.lo == lo && ext.hi == hi;
  }

  /// Time points where a piecewise coefficient may change value.
  std::vector<double> breakpoints() const {
    std::vector<double> out;
    for (const auto* f : {&drift, &volatility, &zeta}) {
      for (std::size_t k = 1; k < f->pieces(); ++k)
        out.push_back(horizon * static_cast<double>(k) / static_cast<double>(f->pieces()));
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  void validate() const {
    auto fail = [](const std::string& msg) { throw ValidationError("market: " + msg); };
    if (!(s0 > 0.0) || !std::isfinite(s0)) fail("s0 must be positive and finite");
    if (!(horizon > 0.0) || !std::isfinite(horizon)) fail("horizon T must be positive and finite");
    for (double b_val : drift.values())
      if (!std::isfinite(b_val)) fail("drift b must be finite");
    for (double s : volatility.values())
      if (!(s >= 0.0) || !std::isfinite(s)) fail("sigma must be finite and >= 0");
    for (const auto& a : atoms) {
      if (!(a.intensity > 0.0) || !std::isfinite(a.intensity))
        fail("jump intensities must be positive and finite");
      if (!std::isfinite(a.coefficient)) fail("jump coefficients must be finite");
    }
    if (jump_case == JumpCase::kFiniteAtoms) {
      for (const auto& a : atoms)
        if (!(a.coefficient > -1.0)) fail("jump coefficient v(z) must exceed -1");
      if (support_lo && !(*support_lo >= -1.0)) fail("declared support_lo must be >= -1");
    } else {
      for (double zv : zeta.values())
        if (zv == 0.0 || !std::isfinite(zv)) fail("zeta must be finite and nonzero");
      for (const auto& a : atoms) {
        if (a.coefficient == 0.0) fail("theta(z) must be nonzero on every atom");
        for (double zv : zeta.values())
          if (!(zv * a.coefficient > -1.0)) fail("zeta_t * theta(z) must exceed -1");
      }
      for (double zv : zeta.values()) {
        if (support_lo && !(zv * *support_lo >= -1.0) && zv > 0.0)
          fail("declared support_lo violates zeta*theta >= -1");
        if (support_hi && !(zv * *support_hi >= -1.0) && zv < 0.0)
          fail("declared support_hi violates zeta*theta >= -1");
      }
    }
    if (support_lo && support_hi && *support_lo > *support_hi) fail("support_lo > support_hi");
  }
};

/// Admissible range of the proportion beta at time t: beta * v >= -1 for every
/// possible jump. Cases follow the jump structure; unbounded sides are +/- inf.
inline Interval admissible_bounds(const LevyMarketSpec& spec, double t) {
  const Interval ext = spec.coefficient_extremes();
  const double top = std::max(ext.hi, 0.0);     // max v (or theta) joined with 0
  const double bottom = std::min(ext.lo, 0.0);  // min v (or theta) met with 0
  const double lo = top == 0.0 ? -kInf : -1.0 / top;
  const double hi = bottom == 0.0 ? kInf : -1.0 / bottom;
  if (spec.jump_case == JumpCase::kFiniteAtoms) return {lo, hi};
  // Bounds hold for beta * zeta_t; divide through by zeta_t.
  const double z = spec.zeta_at(t);
  if (z > 0.0) return {lo / z, hi / z};
  return {hi / z, lo / z};
}

/// Uniform time grid t_k = k T / n.
struct TimeGrid {
  std::size_t n_steps = 1;
  double horizon = 1.0;
  double dt() const { return horizon / static_cast<double>(n_steps); }
  double time(std::size_t k) const {
    return horizon * static_cast<double>(k) / static_cast<double>(n_steps);
  }
};

/// One multiplicative Euler factor for a step of length dt starting at t.
inline double euler_step_factor(const LevyMarketSpec& spec, double t, double dt, double dw,
                                std::span<const std::uint16_t> jump_counts) {
  double f = 1.0 + spec.b(t) * dt + spec.sigma(t) * dw - dt * spec.compensator(t);
  for (std::size_t i = 0; i < jump_counts.size(); ++i)
    f += static_cast<double>(jump_counts[i]) * spec.v(t, i);
  return f;
}

class PathEnsemble;

/// Read-only view of one simulated path.
class PathView {
 public:
  PathView(const PathEnsemble& ensemble, std::size_t path) : e_(&ensemble), p_(path) {}
  inline std::size_t n_steps() const;
  inline std::size_t index() const { return p_; }
  inline const PathEnsemble& ensemble() const { return *e_; }
  inline double time(std::size_t k) const;
  inline double price(std::size_t k) const;
  inline double log_ratio(std::size_t k) const;  ///< log(S_k / s0)
  inline double dw(std::size_t k) const;
  inline std::uint16_t jumps(std::size_t k, std::size_t atom) const;
  inline std::span<const std::uint16_t> jump_counts(std::size_t k) const;
  inline double terminal_price() const;

 private:
  const PathEnsemble* e_;
  std::size_t p_;
};

/**
 * Immutable batch of simulated market paths.
 *
 * Stores, per path, the prices S_0..S_n, cached log(S_k/s0), the Brownian
 * increments of each step and the per-atom jump counts of each step.
 */
class PathEnsemble {
 public:
  PathEnsemble(LevyMarketSpec spec, std::size_t n_steps, std::size_t n_paths, std::uint64_t seed)
      : spec_(std::move(spec)),
        grid_{n_steps, spec_.horizon},
        n_paths_(n_paths),
        seed_(seed),
        prices_(n_paths * (n_steps + 1)),
        log_ratio_(n_paths * (n_steps + 1)),
        dw_(n_paths * n_steps),
        jumps_(n_paths * n_steps * spec_.n_atoms()) {}

  /// Builds an ensemble from explicit samples (row-major by path).
  static PathEnsemble from_samples(LevyMarketSpec spec, std::size_t n_steps,
                                   std::vector<double> prices, std::vector<double> dw,
                                   std::vector<std::uint16_t> jumps) {
    const std::size_t n_paths = prices.size() / (n_steps + 1);
    if (prices.size() != n_paths * (n_steps + 1) || dw.size() != n_paths * n_steps ||
        jumps.size() != n_paths * n_steps * spec.n_atoms())
      throw ValidationError("path samples have inconsistent sizes");
    PathEnsemble e(std::move(spec), n_steps, n_paths, 0);
    e.prices_ = std::move(prices);
    e.dw_ = std::move(dw);
    e.jumps_ = std::move(jumps);
    for (std::size_t i = 0; i < e.prices_.size(); ++i) {
      if (!(e.prices_[i] > 0.0)) throw ValidationError("path prices must be positive");
      e.log_ratio_[i] = std::log(e.prices_[i] / e.spec_.s0);
    }
    return e;
  }

  const LevyMarketSpec& spec() const { return spec_; }
  const TimeGrid& grid() const { return grid_; }
  std::size_t n_paths() const { return n_paths_; }
  std::size_t n_steps() const { return grid_.n_steps; }
  std::size_t n_atoms() const { return spec_.n_atoms(); }
  double dt() const { return grid_.dt(); }
  double time(std::size_t k) const { return grid_.time(k); }
  std::uint64_t seed() const { return seed_; }

  double price(std::size_t p, std::size_t k) const { return prices_[p * (n_steps() + 1) + k]; }
  double log_ratio(std::size_t p, std::size_t k) const {
    return log_ratio_[p * (n_steps() + 1) + k];
  }
  double dw(std::size_t p, std::size_t k) const { return dw_[p * n_steps() + k]; }
  std::span<const std::uint16_t> jump_counts(std::size_t p, std::size_t k) const {
    const std::size_t m = n_atoms();
    return {jumps_.data() + (p * n_steps() + k) * m, m};
  }
  double terminal_price(std::size_t p) const { return price(p, n_steps()); }
  PathView path(std::size_t p) const { return PathView(*this, p); }

  bool operator==(const PathEnsemble& o) const {
    return n_paths_ == o.n_paths_ && grid_.n_steps == o.grid_.n_steps && prices_ == o.prices_ &&
           dw_ == o.dw_ && jumps_ == o.jumps_;
  }

 private:
  friend PathEnsemble simulate_paths(const LevyMarketSpec&, std::size_t, std::size_t,
                                     std::uint64_t);

  LevyMarketSpec spec_;
  TimeGrid grid_;
  std::size_t n_paths_;
  std::uint64_t seed_;
  std::vector<double> prices_;
  std::vector<double> log_ratio_;
  std::vector<double> dw_;
  std::vector<std::uint16_t> jumps_;
};

inline std::size_t PathView::n_steps() const { return e_->n_steps(); }
inline double PathView::time(std::size_t k) const { return e_->time(k); }
inline double PathView::price(std::size_t k) const { return e_->price(p_, k); }
inline double PathView::log_ratio(std::size_t k) const { return e_->log_ratio(p_, k); }
inline double PathView::dw(std::size_t k) const { return e_->dw(p_, k); }
inline std::uint16_t PathView::jumps(std::size_t k, std::size_t atom) const {
  return e_->jump_counts(p_, k)[atom];
}
inline std::span<const std::uint16_t> PathView::jump_counts(std::size_t k) const {
  return e_->jump_counts(p_, k);
}
inline double PathView::terminal_price() const { return e_->terminal_price(p_); }

namespace detail {

inline constexpr int kMaxRefinementDepth = 20;

struct JumpEvent {
  double offset;  // time since the start of the (sub)step
  std::size_t atom;
};

// Advances S over [t, t+dt] with total Brownian increment dw and the given jumps,
// halving the interval (Brownian bridge) while the Euler factor is non-positive.
inline double advance_price(const LevyMarketSpec& spec, double s, double t, double dt, double dw,
                            std::span<const JumpEvent> jumps, int depth, std::uint32_t node,
                            std::uint64_t seed, std::uint32_t path, std::uint32_t step) {
  std::vector<std::uint16_t> counts(spec.n_atoms(), 0);
  for (const auto& j : jumps) ++counts[j.atom];
  const double f = euler_step_factor(spec, t, dt, dw, counts);
  if (f > 0.0) return s * f;
  if (depth >= kMaxRefinementDepth)
    throw DiscretizationError("price step factor stays non-positive after " +
                                  std::to_string(kMaxRefinementDepth) +
                                  " bridge refinements at step " + std::to_string(step),
                              step);
  const double half = 0.5 * dt;
  CounterStream bridge(seed, path, step,
                       static_cast<std::uint32_t>(Channel::kBridge) | (node << 8));
  const double dw_first = 0.5 * dw + std::sqrt(0.25 * dt) * bridge.normal();
  std::vector<JumpEvent> first, second;
  for (const auto& j : jumps) {
    if (j.offset < half)
      first.push_back(j);
    else
      second.push_back({j.offset - half, j.atom});
  }
  const double mid = advance_price(spec, s, t, half, dw_first, first, depth + 1, 2 * node, seed,
                                   path, step);
  return advance_price(spec, mid, t + half, half, dw - dw_first, second, depth + 1, 2 * node + 1,
                       seed, path, step);
}

}  // namespace detail

/// Simulates n_paths discounted price paths on a uniform n_steps grid.
inline PathEnsemble simulate_paths(const LevyMarketSpec& spec, std::size_t n_steps,
                                   std::size_t n_paths, std::uint64_t seed) {
  spec.validate();
  if (n_steps == 0) throw ValidationError("simulate_paths: n_steps must be >= 1");
  if (n_paths == 0) throw ValidationError("simulate_paths: n_paths must be >= 1");
  if (spec.n_atoms() > 200) throw ValidationError("simulate_paths: at most 200 jump atoms");
  PathEnsemble e(spec, n_steps, n_paths, seed);
  const double dt = e.dt();
  const std::size_t m = spec.n_atoms();
  for_each_chunk(n_paths, [&](std::size_t, std::size_t begin, std::size_t end) {
    std::vector<detail::JumpEvent> events;
    for (std::size_t p = begin; p < end; ++p) {
      const auto path_id = static_cast<std::uint32_t>(p);
      double s = spec.s0;
      e.prices_[p * (n_steps + 1)] = s;
      e.log_ratio_[p * (n_steps + 1)] = 0.0;
      for (std::size_t k = 0; k < n_steps; ++k) {
        const auto step_id = static_cast<std::uint32_t>(k);
        const double t = e.time(k);
        CounterStream brownian(seed, path_id, step_id,
                               static_cast<std::uint32_t>(Channel::kBrownian));
        const double dw = std::sqrt(dt) * brownian.normal();
        events.clear();
        for (std::size_t i = 0; i < m; ++i) {
          CounterStream clock(seed, path_id, step_id,
                              static_cast<std::uint32_t>(Channel::kJumpBase) +
                                  static_cast<std::uint32_t>(i));
          // Exponential clocks restarted each step are exact by memorylessness.
          double arrival = clock.exponential(spec.atoms[i].intensity);
          while (arrival < dt) {
            events.push_back({arrival, i});
            arrival += clock.exponential(spec.atoms[i].intensity);
          }
        }
        std::sort(events.begin(), events.end(),
                  [](const auto& a, const auto& b) { return a.offset < b.offset; });
        auto* counts = e.jumps_.data() + (p * n_steps + k) * m;
        for (const auto& ev : events) {
          if (counts[ev.atom] == std::numeric_limits<std::uint16_t>::max())
            throw NumericalError("simulate_paths: jump count overflow in a single step");
          ++counts[ev.atom];
        }
        s = detail::advance_price(spec, s, t, dt, dw, events, 0, 1, seed, path_id, step_id);
        e.dw_[p * n_steps + k] = dw;
        e.prices_[p * (n_steps + 1) + k + 1] = s;
        e.log_ratio_[p * (n_steps + 1) + k + 1] = std::log(s / spec.s0);
      }
    }
  });
  return e;
}

/// Proportion of wealth held in the stock, as a function of (time, log price).
class Strategy {
 public:
  enum class Kind { kConstant, kPiecewise, kTabulated };

  static Strategy constant(double beta) {
    Strategy s;
    s.kind_ = Kind::kConstant;
    s.values_ = {beta};
    return s;
  }

  /// Equal-length pieces over [0, horizon].
  static Strategy piecewise(std::vector<double> values, double horizon) {
    if (values.empty()) throw ValidationError("piecewise strategy needs values");
    Strategy s;
    s.kind_ = Kind::kPiecewise;
    s.values_ = std::move(values);
    s.horizon_ = horizon;
    return s;
  }

  /// Bilinear table over sorted time nodes x sorted log-price nodes (row-major by time),
  /// clamped outside the table.
  static Strategy tabulated(std::vector<double> times, std::vector<double> log_prices,
                            std::vector<double> values) {
    if (times.empty() || log_prices.empty() || values.size() != times.size() * log_prices.size())
      throw ValidationError("tabulated strategy: table shape mismatch");
    if (!std::is_sorted(times.begin(), times.end()) ||
        !std::is_sorted(log_prices.begin(), log_prices.end()))
      throw ValidationError("tabulated strategy: nodes must be sorted");
    Strategy s;
    s.kind_ = Kind::kTabulated;
    s.times_ = std::move(times);
    s.log_prices_ = std::move(log_prices);
    s.values_ = std::move(values);
    return s;
  }

  Kind kind() const { return kind_; }

  double operator()(double t, double log_price) const {
    switch (kind_) {
      case Kind::kConstant:
        return values_.front();
      case Kind::kPiecewise:
        return PiecewiseConstant(values_).at(t, horizon_);
      case Kind::kTabulated:
        break;
    }
    const auto [i0, i1, wt] = locate(times_, t);
    const auto [j0, j1, wx] = locate(log_prices_, log_price);
    const std::size_t nx = log_prices_.size();
    const double v00 = values_[i0 * nx + j0], v01 = values_[i0 * nx + j1];
    const double v10 = values_[i1 * nx + j0], v11 = values_[i1 * nx + j1];
    return (1 - wt) * ((1 - wx) * v00 + wx * v01) + wt * ((1 - wx) * v10 + wx * v11);
  }

  /// Largest |beta| the strategy can take; used for local boundedness checks.
  double sup_norm() const {
    double m = 0.0;
    for (double v : values_) m = std::max(m, std::abs(v));
    return m;
  }

  std::string label() const {
    switch (kind_) {
      case Kind::kConstant: {
        char buf[64];
        std::snprintf(buf, sizeof buf, "constant(%.17g)", values_.front());
        return buf;
      }
      case Kind::kPiecewise:
        return "piecewise(" + std::to_string(values_.size()) + " pieces)";
      case Kind::kTabulated:
        return "tabulated(" + std::to_string(times_.size()) + "x" +
               std::to_string(log_prices_.size()) + ")";
    }
    return "strategy";
  }

 private:
  struct Located {
    std::size_t lo, hi;
    double weight;
  };
  static Located locate(const std::vector<double>& nodes, double x) {
    if (nodes.size() == 1 || x <= nodes.front()) return {0, 0, 0.0};
    if (x >= nodes.back()) return {nodes.size() - 1, nodes.size() - 1, 0.0};
    const auto it = std::upper_bound(nodes.begin(), nodes.end(), x);
    const auto hi = static_cast<std::size_t>(it - nodes.begin());
    const std::size_t lo = hi - 1;
    return {lo, hi, (x - nodes[lo]) / (nodes[hi] - nodes[lo])};
  }

  Kind kind_ = Kind::kConstant;
  std::vector<double> values_{0.0};
  std::vector<double> times_;
  std::vector<double> log_prices_;
  double horizon_ = 1.0;
};

/// Wealth of the self-financing proportion strategy along one path:
/// V_{k+1} = V_k (1 + beta_k (S_{k+1} - S_k) / S_k), V_0 = w.
inline std::vector<double> wealth_path(const PathView& path, const Strategy& strategy, double w) {
  if (!(w >= 0.0)) throw ValidationError("wealth_path: initial wealth must be >= 0");
  const std::size_t n = path.n_steps();
  std::vector<double> v(n + 1);
  v[0] = w;
  const double log_s0 = std::log(path.price(0)) - path.log_ratio(0);
  for (std::size_t k = 0; k < n; ++k) {
    const double beta = strategy(path.time(k), log_s0 + path.log_ratio(k));
    if (!std::isfinite(beta)) throw ValidationError("wealth_path: strategy is not finite");
    // Shares held over the step; keeps beta = 1, w = s0 exactly on the price path.
    const double shares = beta * v[k] / path.price(k);
    const double next = v[k] + shares * (path.price(k + 1) - path.price(k));
    if (next < 0.0)
      throw InadmissibleError("wealth turns negative at step " + std::to_string(k) +
                                  " with beta = " + std::to_string(beta),
                              k, beta);
    v[k + 1] = next;
  }
  return v;
}

}  // namespace levydual
