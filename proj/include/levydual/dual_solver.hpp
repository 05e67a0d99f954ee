#pragma once

// Sample-average dual solver.
//
//   v(y)   = inf_xi  E[Ũ(y xi_T)]
//   u(z)  <= min_y { v(y) + z y }
//
// The inner infimum runs over local-martingale dual elements (a = 0, h = 0),
// parametrized by the control values at the two ends of each bucket's visited
// log-price range. A feasible element with a > 0 is dominated by its lift, so
// nothing is lost by this restriction (see martingale_lift).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "levydual/dual_domain.hpp"
#include "levydual/errors.hpp"
#include "levydual/market.hpp"
#include "levydual/parallel.hpp"
#include "levydual/rng.hpp"
#include "levydual/utility.hpp"

namespace levydual {

struct SolverOptions {
  std::size_t n_buckets = 4;
  std::size_t iterations = 60;
  std::size_t restarts = 5;
  double step = 0.5;          ///< c in the step c / sqrt(k)
  double eps_f = 1e-6;        ///< F >= -1 + eps_f
  double restart_scale = 0.5; ///< stddev of restart perturbations
  std::size_t max_backoff = 20;
  double y_tolerance = 1e-4;  ///< golden section stops at this relative bracket width
  std::uint64_t seed = 0;

  void validate() const {
    if (n_buckets == 0) throw ValidationError("solver: buckets must be >= 1");
    if (restarts == 0) throw ValidationError("solver: restarts must be >= 1");
    if (!(step > 0.0)) throw ValidationError("solver: step must be > 0");
    if (!(eps_f > 0.0 && eps_f < 1.0)) throw ValidationError("solver: eps_f must lie in (0, 1)");
    if (!(y_tolerance > 0.0 && y_tolerance < 1.0))
      throw ValidationError("solver: y tolerance must lie in (0, 1)");
  }
};

/// Euclidean projection of p onto {u : a.u = c, lo <= u <= hi}. Returns false if empty.
inline bool project_affine_box(std::span<double> u, std::span<const double> p,
                               std::span<const double> a, double c, std::span<const double> lo,
                               std::span<const double> hi) {
  const std::size_t n = p.size();
  auto fill = [&](double mu) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      u[j] = std::clamp(p[j] - mu * a[j], lo[j], hi[j]);
      s += a[j] * u[j];
    }
    return s;
  };
  double scale = 0.0;
  for (double x : a) scale = std::max(scale, std::abs(x));
  if (scale == 0.0) {
    fill(0.0);
    return std::abs(c) <= kDriftZeroTol;
  }
  // fill(mu) is nonincreasing in mu.
  double mu_lo = -1.0, mu_hi = 1.0;
  int expand = 0;
  while (fill(mu_lo) < c) {
    if (++expand > 400) return false;
    mu_lo *= 2.0;
  }
  expand = 0;
  while (fill(mu_hi) > c) {
    if (++expand > 400) return false;
    mu_hi *= 2.0;
  }
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (mu_lo + mu_hi);
    if (mid == mu_lo || mid == mu_hi) break;
    (fill(mid) > c ? mu_lo : mu_hi) = mid;
  }
  const double r = c - fill(0.5 * (mu_lo + mu_hi));
  // Remove the bisection residual through the free coordinate with the largest weight.
  std::size_t best = n;
  for (std::size_t j = 0; j < n; ++j) {
    if (a[j] == 0.0 || u[j] <= lo[j] || u[j] >= hi[j]) continue;
    if (best == n || std::abs(a[j]) > std::abs(a[best])) best = j;
  }
  if (best < n) {
    u[best] = std::clamp(u[best] + r / a[best], lo[best], hi[best]);
  } else if (std::abs(r) > kDriftZeroTol) {
    return false;
  }
  return true;
}

/**
 * Local-martingale dual elements on a fixed ensemble.
 *
 * Per bucket b and end e in {lo, hi} of the visited range [X_lo(b), X_hi(b)] of
 * x = log(S/s0), the parameter vector holds (G, F_1..F_m). Controls at a node are
 * the linear interpolation in the clamped x, so every visited node inherits
 * h = 0 and F >= -1 + eps from the two ends.
 */
class LocalMartingaleFamily {
 public:
  LocalMartingaleFamily(const PathEnsemble& ensemble, std::size_t n_buckets, double eps_f)
      : e_(&ensemble), n_buckets_(n_buckets), m_(ensemble.n_atoms()), eps_f_(eps_f) {
    const auto& spec = ensemble.spec();
    if (n_buckets == 0 || n_buckets > ensemble.n_steps())
      throw ValidationError("solver: buckets must lie in [1, n_steps]");
    DualElement probe(1.0, n_buckets, m_, spec.horizon);
    for (double bp : spec.breakpoints()) {
      const double pos = bp / spec.horizon * static_cast<double>(n_buckets);
      if (std::abs(pos - std::round(pos)) > 1e-9)
        throw ValidationError(
            "solver: market coefficients must be constant within each control bucket (bucket "
            "count must be a multiple of every coefficient's piece count)");
    }
    bucket_.resize(ensemble.n_steps());
    for (std::size_t k = 0; k < ensemble.n_steps(); ++k) bucket_[k] = probe.bucket_of(ensemble.time(k));
    x_lo_.assign(n_buckets, kInf);
    x_hi_.assign(n_buckets, -kInf);
    for (std::size_t p = 0; p < ensemble.n_paths(); ++p) {
      for (std::size_t k = 0; k < ensemble.n_steps(); ++k) {
        const double x = ensemble.log_ratio(p, k);
        x_lo_[bucket_[k]] = std::min(x_lo_[bucket_[k]], x);
        x_hi_[bucket_[k]] = std::max(x_hi_[bucket_[k]], x);
      }
    }
    const std::size_t w = width();
    a_.resize(n_buckets * w);
    lo_.resize(n_buckets * w);
    hi_.resize(n_buckets * w);
    c_.resize(n_buckets);
    for (std::size_t b = 0; b < n_buckets; ++b) {
      if (x_lo_[b] > x_hi_[b]) x_lo_[b] = x_hi_[b] = 0.0;
      const double t = probe.bucket_start(b);
      const double sigma = spec.sigma(t);
      a_[b * w] = sigma;
      lo_[b * w] = sigma > 0.0 ? -kInf : 0.0;
      hi_[b * w] = sigma > 0.0 ? kInf : 0.0;
      for (std::size_t i = 0; i < m_; ++i) {
        a_[b * w + 1 + i] = spec.atoms[i].intensity * spec.v(t, i);
        lo_[b * w + 1 + i] = -1.0 + eps_f;
        hi_[b * w + 1 + i] = kInf;
      }
      c_[b] = -spec.b(t);
    }
  }

  std::size_t width() const { return 1 + m_; }
  std::size_t dim() const { return n_buckets_ * 2 * width(); }
  std::size_t n_buckets() const { return n_buckets_; }
  double x_lo(std::size_t b) const { return x_lo_[b]; }
  double x_hi(std::size_t b) const { return x_hi_[b]; }
  const PathEnsemble& ensemble() const { return *e_; }

  /// Number of free directions; zero means the family is a single element.
  std::size_t free_dim() const {
    std::size_t total = 0;
    const std::size_t w = width();
    for (std::size_t b = 0; b < n_buckets_; ++b) {
      std::size_t n_free = 0;
      bool constrained = false;
      for (std::size_t j = 0; j < w; ++j) {
        if (lo_[b * w + j] < hi_[b * w + j]) {
          ++n_free;
          constrained = constrained || a_[b * w + j] != 0.0;
        }
      }
      const std::size_t per_end = n_free - (constrained ? 1 : 0);
      total += per_end * (x_hi_[b] > x_lo_[b] ? 2 : 1);
    }
    return total;
  }

  void project(std::vector<double>& theta) const {
    const std::size_t w = width();
    std::vector<double> p(w);
    for (std::size_t b = 0; b < n_buckets_; ++b) {
      for (std::size_t end = 0; end < 2; ++end) {
        std::span<double> u(theta.data() + (2 * b + end) * w, w);
        std::copy(u.begin(), u.end(), p.begin());
        if (!project_affine_box(u, p, std::span(a_).subspan(b * w, w), c_[b],
                                std::span(lo_).subspan(b * w, w), std::span(hi_).subspan(b * w, w)))
          throw NoEquivalentMeasureError(
              "no local-martingale controls with F > -1 remove the drift in bucket " +
              std::to_string(b));
      }
    }
  }

  /// Samples an element's raw controls at the range ends, then projects.
  std::vector<double> from_element(const DualElement& d) const {
    const auto& spec = e_->spec();
    const std::size_t w = width();
    std::vector<double> theta(dim());
    NodeControls c;
    DualElement probe(1.0, n_buckets_, m_, spec.horizon);
    for (std::size_t b = 0; b < n_buckets_; ++b) {
      const double t = 0.5 * (probe.bucket_start(b) + probe.bucket_end(b));
      for (std::size_t end = 0; end < 2; ++end) {
        evaluate_controls(spec, d, t, end == 0 ? x_lo_[b] : x_hi_[b], c);
        theta[(2 * b + end) * w] = c.g;
        for (std::size_t i = 0; i < m_; ++i) theta[(2 * b + end) * w + 1 + i] = c.f[i];
      }
    }
    project(theta);
    return theta;
  }

  DualElement to_element(const std::vector<double>& theta) const {
    const std::size_t w = width();
    DualElement d(1.0, n_buckets_, m_, e_->spec().horizon);
    for (std::size_t b = 0; b < n_buckets_; ++b) {
      auto& bk = d.buckets[b];
      bk.x_lo = x_lo_[b];
      bk.x_hi = x_hi_[b];
      const double span = x_hi_[b] - x_lo_[b];
      auto affine = [&](std::size_t j) {
        const double lo = theta[(2 * b) * w + j];
        if (!(span > 0.0)) return Affine{lo, 0.0};
        const double hi = theta[(2 * b + 1) * w + j];
        const double slope = (hi - lo) / span;
        return Affine{lo - slope * x_lo_[b], slope};
      };
      bk.g = affine(0);
      for (std::size_t i = 0; i < m_; ++i) bk.f[i] = affine(1 + i);
    }
    return d;
  }

  /// Per-path integrand phi(p, xi_T) -> {value, d value / d xi_T}.
  using PathObjective = std::function<std::pair<double, double>(std::size_t, double)>;

  struct Evaluation {
    MeanEstimate value;
    std::vector<double> gradient;  ///< of the mean
  };

  /// Mean of phi over paths and its gradient in theta. Throws DiscretizationError on a
  /// negative step factor.
  Evaluation evaluate(const std::vector<double>& theta, const PathObjective& phi,
                      bool with_gradient = true) const {
    const auto& e = *e_;
    const auto& spec = e.spec();
    const std::size_t w = width(), P = dim(), n = e.n_steps();
    const double dt = e.dt();
    std::vector<double> values(e.n_paths());
    const std::size_t n_chunks = chunk_count(e.n_paths());
    std::vector<std::vector<double>> grads(with_gradient ? n_chunks : 0);
    std::vector<double> lam(m_);
    for (std::size_t i = 0; i < m_; ++i) lam[i] = spec.atoms[i].intensity * dt;
    for_each_chunk(e.n_paths(), [&](std::size_t chunk, std::size_t begin, std::size_t end) {
      std::vector<double> score(with_gradient ? P : 0), deriv(w), u(w);
      std::vector<double> g_acc;
      if (with_gradient) g_acc.assign(P, 0.0);
      for (std::size_t p = begin; p < end; ++p) {
        if (with_gradient) std::fill(score.begin(), score.end(), 0.0);
        double xi = 1.0;
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t b = bucket_[k];
          const double span = x_hi_[b] - x_lo_[b];
          const double wt =
              span > 0.0 ? (std::clamp(e.log_ratio(p, k), x_lo_[b], x_hi_[b]) - x_lo_[b]) / span : 0.0;
          const double* lo = theta.data() + (2 * b) * w;
          const double* hi = lo + w;
          const auto jumps = e.jump_counts(p, k);
          deriv[0] = e.dw(p, k);
          for (std::size_t i = 0; i < m_; ++i) deriv[1 + i] = static_cast<double>(jumps[i]) - lam[i];
          double f = 1.0;
          for (std::size_t j = 0; j < w; ++j) {
            u[j] = (1.0 - wt) * lo[j] + wt * hi[j];
            f += u[j] * deriv[j];
          }
          if (f < 0.0)
            throw DiscretizationError("deflator step factor is negative at step " + std::to_string(k), k);
          if (f == 0.0) {
            xi = 0.0;
            break;
          }
          xi *= f;
          if (with_gradient) {
            double* s_lo = score.data() + (2 * b) * w;
            double* s_hi = s_lo + w;
            for (std::size_t j = 0; j < w; ++j) {
              const double r = deriv[j] / f;
              s_lo[j] += (1.0 - wt) * r;
              s_hi[j] += wt * r;
            }
          }
        }
        const auto [val, dval] = phi(p, xi);
        values[p] = val;
        if (with_gradient && xi > 0.0 && dval != 0.0) {
          const double scale = dval * xi;
          for (std::size_t j = 0; j < P; ++j) g_acc[j] += scale * score[j];
        }
      }
      if (with_gradient) grads[chunk] = std::move(g_acc);
    });
    Evaluation out;
    out.value = mean_estimate(values);
    if (with_gradient) {
      out.gradient.assign(P, 0.0);
      std::vector<double> col(n_chunks);
      for (std::size_t j = 0; j < P; ++j) {
        for (std::size_t c = 0; c < n_chunks; ++c) col[c] = grads[c][j];
        out.gradient[j] = pairwise_sum(col) / static_cast<double>(e.n_paths());
      }
    }
    return out;
  }

  /// Terminal deflator values for theta.
  std::vector<double> terminal(const std::vector<double>& theta) const {
    std::vector<double> xi(e_->n_paths());
    evaluate(theta, [&](std::size_t p, double x) {
      xi[p] = x;
      return std::pair{0.0, 0.0};
    }, false);
    return xi;
  }

 private:
  const PathEnsemble* e_;
  std::size_t n_buckets_;
  std::size_t m_;
  double eps_f_;
  std::vector<std::size_t> bucket_;
  std::vector<double> x_lo_, x_hi_;
  std::vector<double> a_, lo_, hi_, c_;
};

struct DescentResult {
  std::vector<double> theta;
  MeanEstimate value;
  std::size_t evaluations = 0;
};

/// Projected gradient descent with normalized steps c / sqrt(k), keeping the best iterate.
/// On a negative deflator step factor it returns to the best point and halves c, stopping
/// once max_backoff halvings are used up.
inline DescentResult projected_descent(const LocalMartingaleFamily& family, std::vector<double> theta,
                                       const LocalMartingaleFamily::PathObjective& phi,
                                       const SolverOptions& opt) {
  family.project(theta);
  LocalMartingaleFamily::Evaluation cur;
  try {
    cur = family.evaluate(theta, phi, family.free_dim() > 0);
  } catch (const DiscretizationError& err) {
    throw NumericalError(std::string("dual optimizer: starting point is not evaluable: ") + err.what());
  }
  DescentResult best{theta, cur.value, 1};
  if (family.free_dim() == 0) return best;
  auto best_grad = cur.gradient;
  double c = opt.step;
  std::size_t backoffs = 0, k = 1;
  for (std::size_t it = 0; it < opt.iterations; ++it) {
    double norm = 0.0;
    for (double g : cur.gradient) norm += g * g;
    norm = std::sqrt(norm);
    if (!(norm > 0.0)) break;
    const double step = c / std::sqrt(static_cast<double>(k));
    std::vector<double> next = theta;
    for (std::size_t j = 0; j < next.size(); ++j) next[j] -= step * cur.gradient[j] / norm;
    family.project(next);
    try {
      cur = family.evaluate(next, phi);
      ++best.evaluations;
    } catch (const DiscretizationError&) {
      // Out of steps that keep every factor positive: the best point sits on that boundary.
      if (++backoffs > opt.max_backoff) break;
      c *= 0.5;
      theta = best.theta;
      cur.gradient = best_grad;
      continue;
    }
    if (!std::isfinite(cur.value.mean)) {
      if (++backoffs > opt.max_backoff)
        throw NumericalError("dual optimizer: non-finite objective");
      c *= 0.5;
      theta = best.theta;
      cur.gradient = best_grad;
      continue;
    }
    theta = std::move(next);
    ++k;
    if (cur.value.mean < best.value.mean) {
      best.theta = theta;
      best.value = cur.value;
      best_grad = cur.gradient;
    }
  }
  return best;
}

/// Restart starting points: the given ones, then Gaussian perturbations of the first.
inline std::vector<std::vector<double>> restart_points(const std::vector<std::vector<double>>& seeds,
                                                       std::size_t restarts,
                                                       const SolverOptions& opt) {
  std::vector<std::vector<double>> out = seeds;
  for (std::size_t r = 1; r < restarts; ++r) {
    CounterStream rs(opt.seed, static_cast<std::uint32_t>(r), 0,
                     static_cast<std::uint32_t>(Channel::kRestart));
    auto th = seeds.front();
    for (double& x : th) x += opt.restart_scale * rs.normal();
    out.push_back(std::move(th));
  }
  return out;
}

/// Runs the descent from every restart point. Points whose deflator is not evaluable on the
/// ensemble (a negative step factor) are discarded; it is an error only if none survive.
template <class Keep>
void descend_from_restarts(const LocalMartingaleFamily& family,
                           const std::vector<std::vector<double>>& starts, std::size_t restarts,
                           const LocalMartingaleFamily::PathObjective& phi, const SolverOptions& opt,
                           Keep keep) {
  std::string last_error;
  bool any = false;
  for (auto& th : restart_points(starts, restarts, opt)) {
    try {
      keep(projected_descent(family, std::move(th), phi, opt));
      any = true;
    } catch (const NumericalError& err) {
      last_error = err.what();
    }
  }
  if (!any) throw NumericalError(last_error);
}

/// Per-path data shared by all solver calls on one ensemble.
struct EnsembleCaps {
  std::vector<double> caps;  ///< H per path
  MeanEstimate utility_of_claim;  ///< Ê[U(H)]
  MeanEstimate utility_at_zero;   ///< Ê[U(0)]
};

inline EnsembleCaps ensemble_caps(const StateUtility& u, const PathEnsemble& e) {
  EnsembleCaps out;
  out.caps.resize(e.n_paths());
  std::vector<double> uh(e.n_paths()), u0(e.n_paths());
  for (std::size_t p = 0; p < e.n_paths(); ++p) {
    out.caps[p] = u.cap(e.terminal_price(p));
    uh[p] = u.value(out.caps[p], out.caps[p]);
    u0[p] = u.value(0.0, out.caps[p]);
  }
  out.utility_of_claim = mean_estimate(uh);
  out.utility_at_zero = mean_estimate(u0);
  if (!std::isfinite(out.utility_of_claim.mean))
    throw NumericalError("sample mean of U(H) is not finite");
  return out;
}

struct DualValueResult {
  double y = 0.0;
  DualElement element;
  std::vector<double> theta;
  MeanEstimate value;  ///< Ê[Ũ(y xi_T)]
};

/// Minimizes Ê[Ũ(y xi_T)] over the local-martingale family, starting from init.
inline DualValueResult dual_value(const LocalMartingaleFamily& family, const StateUtility& u,
                                  const EnsembleCaps& caps, double y,
                                  const std::vector<std::vector<double>>& starts,
                                  std::size_t restarts, const SolverOptions& opt) {
  if (!(y >= 0.0) || !std::isfinite(y)) throw ValidationError("dual_value: y must be >= 0");
  if (starts.empty()) throw ValidationError("dual_value: no starting point");
  DualValueResult out;
  out.y = y;
  if (y == 0.0) {
    out.theta = starts.front();
    family.project(out.theta);
    out.element = family.to_element(out.theta);
    out.value = caps.utility_of_claim;
    return out;
  }
  auto phi = [&](std::size_t p, double xi) {
    const double h = caps.caps[p];
    return std::pair{u.conjugate(y * xi, h), -u.inverse_capped(y * xi, h) * y};
  };
  bool have = false;
  descend_from_restarts(family, starts, restarts, phi, opt, [&](DescentResult r) {
    if (!have || r.value.mean < out.value.mean) {
      out.theta = std::move(r.theta);
      out.value = r.value;
      have = true;
    }
  });
  out.element = family.to_element(out.theta);
  return out;
}

/// Convenience overload: builds the family and starts from init.
inline DualValueResult dual_value(const LevyMarketSpec& spec, const StateUtility& u, double y,
                                  const PathEnsemble& e, const DualElement& init,
                                  const SolverOptions& opt = {}) {
  spec.validate();
  opt.validate();
  LocalMartingaleFamily family(e, opt.n_buckets, opt.eps_f);
  const auto caps = ensemble_caps(u, e);
  return dual_value(family, u, caps, y, {family.from_element(init)}, opt.restarts, opt);
}

struct SuperHedgeEstimate {
  MeanEstimate value;  ///< Ê[xi_T H] at the best element found
  std::vector<double> theta;
  DualElement element;
};

/// Lower estimate of w = sup_xi E[xi_T H] by projected ascent over the family.
inline SuperHedgeEstimate super_hedging_cost_estimate(
    const LocalMartingaleFamily& family, const StateUtility& u, const EnsembleCaps& caps,
    const std::vector<std::vector<double>>& starts, const SolverOptions& opt) {
  SuperHedgeEstimate out;
  out.theta = starts.front();
  family.project(out.theta);
  if (u.claim().is_constant()) {
    out.value = MeanEstimate{u.claim().parameter(), 0.0, family.ensemble().n_paths()};
    out.element = family.to_element(out.theta);
    return out;
  }
  auto phi = [&](std::size_t p, double xi) {
    return std::pair{-xi * caps.caps[p], -caps.caps[p]};
  };
  bool have = false;
  descend_from_restarts(family, starts, opt.restarts, phi, opt, [&](DescentResult r) {
    if (!have || r.value.mean < -out.value.mean) {
      out.theta = std::move(r.theta);
      out.value = MeanEstimate{-r.value.mean, r.value.se, r.value.count};
      have = true;
    }
  });
  out.element = family.to_element(out.theta);
  return out;
}

inline SuperHedgeEstimate super_hedging_cost_estimate(const LevyMarketSpec& spec,
                                                      const StateUtility& u, const PathEnsemble& e,
                                                      const SolverOptions& opt = {}) {
  spec.validate();
  opt.validate();
  LocalMartingaleFamily family(e, opt.n_buckets, opt.eps_f);
  const auto caps = ensemble_caps(u, e);
  return super_hedging_cost_estimate(family, u, caps,
                                     {family.from_element(risk_neutral_density(spec))}, opt);
}

/// V* = I(y xi_T) ∧ H per path.
inline std::vector<double> candidate_wealth(const StateUtility& u, double y_star,
                                            std::span<const double> xi_T,
                                            std::span<const double> caps) {
  if (!(y_star > 0.0)) throw ValidationError("candidate_wealth: y must be > 0");
  if (xi_T.size() != caps.size()) throw ValidationError("candidate_wealth: size mismatch");
  std::vector<double> v(xi_T.size());
  for (std::size_t p = 0; p < v.size(); ++p) v[p] = u.inverse_capped(y_star * xi_T[p], caps[p]);
  return v;
}

struct BudgetResidual {
  double residual = 0.0;  ///< |Ê[V xi_T] - z|
  MeanEstimate spent;     ///< Ê[V xi_T]
};

inline BudgetResidual budget_residual(std::span<const double> wealth, std::span<const double> xi_T,
                                      double z) {
  if (wealth.size() != xi_T.size()) throw ValidationError("budget_residual: size mismatch");
  std::vector<double> prod(wealth.size());
  for (std::size_t p = 0; p < prod.size(); ++p) prod[p] = wealth[p] * xi_T[p];
  BudgetResidual out;
  out.spent = mean_estimate(prod);
  out.residual = std::abs(out.spent.mean - z);
  return out;
}

struct DualSample {
  double y = 0.0;
  MeanEstimate value;  ///< v̂(y)
  double objective = 0.0;  ///< v̂(y) + z y
};

struct DualSolveResult {
  double z = 0.0;
  double y_star = 0.0;
  DualElement d_star;
  MeanEstimate v_value;
  double primal_bound = 0.0;
  BudgetResidual budget;
  MeanEstimate candidate_utility;  ///< Ê[U(V*)]
  MeanEstimate w_hat;
  std::vector<double> candidate;   ///< V* per path
  std::vector<double> xi_T;        ///< xi*_T per path
  std::vector<DualSample> samples;
  double y_max = 0.0;
};

namespace detail {

inline double mean_conjugate(const StateUtility& u, const EnsembleCaps& caps,
                             std::span<const double> xi, double y, double* se = nullptr) {
  std::vector<double> vals(xi.size());
  for (std::size_t p = 0; p < xi.size(); ++p) vals[p] = u.conjugate(y * xi[p], caps.caps[p]);
  const auto m = mean_estimate(vals);
  if (se) *se = m.se;
  return m.mean;
}

inline double mean_budget(const StateUtility& u, const EnsembleCaps& caps,
                          std::span<const double> xi, double y) {
  std::vector<double> vals(xi.size());
  for (std::size_t p = 0; p < xi.size(); ++p)
    vals[p] = u.inverse_capped(y * xi[p], caps.caps[p]) * xi[p];
  return pairwise_sum(vals) / static_cast<double>(vals.size());
}

// Finds y with Ê[(I(y xi) ∧ H) xi] = z for fixed xi; the map is nonincreasing in y.
inline std::optional<double> budget_root(const StateUtility& u, const EnsembleCaps& caps,
                                         std::span<const double> xi, double z, double y_guess) {
  double lo = y_guess, hi = y_guess;
  for (int i = 0; i < 60 && mean_budget(u, caps, xi, lo) < z; ++i) lo *= 0.5;
  for (int i = 0; i < 60 && mean_budget(u, caps, xi, hi) > z; ++i) hi *= 2.0;
  if (mean_budget(u, caps, xi, lo) < z || mean_budget(u, caps, xi, hi) > z) return std::nullopt;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid == lo || mid == hi) break;
    (mean_budget(u, caps, xi, mid) > z ? lo : hi) = mid;
  }
  const double blo = std::abs(mean_budget(u, caps, xi, lo) - z);
  const double bhi = std::abs(mean_budget(u, caps, xi, hi) - z);
  return blo <= bhi ? lo : hi;
}

}  // namespace detail

/// Minimizes v̂(y) + z y over y by golden section, then assembles the candidate optimum.
inline DualSolveResult outer_minimize(const LevyMarketSpec& spec, const StateUtility& u, double z,
                                      const PathEnsemble& e, const SolverOptions& opt = {},
                                      const DualElement* init = nullptr) {
  spec.validate();
  opt.validate();
  if (!(z > 0.0) || !std::isfinite(z)) throw ValidationError("outer_minimize: z must be > 0");
  LocalMartingaleFamily family(e, opt.n_buckets, opt.eps_f);
  const auto caps = ensemble_caps(u, e);
  const auto start = family.from_element(init ? *init : risk_neutral_density(spec));

  DualSolveResult out;
  out.z = z;
  const auto w_hat = super_hedging_cost_estimate(family, u, caps, {start}, opt);
  out.w_hat = w_hat.value;
  if (z >= w_hat.value.mean)
    throw SuperHedgingRegion("z = " + std::to_string(z) +
                                 " is at or above the estimated super-hedging cost " +
                                 std::to_string(w_hat.value.mean) +
                                 "; u(z) = E[U(H)] is attained by super-hedging",
                             caps.utility_of_claim.mean);

  std::vector<double> warm = start;
  bool first = true;
  std::vector<DualValueResult> solved;
  auto solve_at = [&](double y) -> const DualValueResult& {
    auto r = dual_value(family, u, caps, y, {warm}, first ? opt.restarts : 1, opt);
    first = false;
    warm = r.theta;
    out.samples.push_back({y, r.value, r.value.mean + z * y});
    solved.push_back(std::move(r));
    return solved.back();
  };

  // y_max: beyond it v̂ is flat at Ê[U(0)] and f is increasing.
  double y_max = 1.0;
  for (int doubling = 0;; ++doubling) {
    const auto& r = solve_at(y_max);
    if (r.value.mean <= caps.utility_at_zero.mean + r.value.se) break;
    if (doubling >= 60) throw NumericalError("outer_minimize: could not bracket y_max");
    y_max *= 2.0;
  }
  out.y_max = y_max;

  constexpr double kInvPhi = 0.6180339887498949;
  double a = 0.0, b = y_max;
  double c = b - kInvPhi * (b - a), d = a + kInvPhi * (b - a);
  double fc = solve_at(c).value.mean + z * c;
  double fd = solve_at(d).value.mean + z * d;
  while (b - a > opt.y_tolerance * y_max) {
    if (fc <= fd) {
      b = d, d = c, fd = fc;
      c = b - kInvPhi * (b - a);
      fc = solve_at(c).value.mean + z * c;
    } else {
      a = c, c = d, fc = fd;
      d = a + kInvPhi * (b - a);
      fd = solve_at(d).value.mean + z * d;
    }
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < solved.size(); ++i)
    if (out.samples[i].objective < out.samples[best].objective) best = i;

  out.d_star = solved[best].element;
  out.xi_T = terminal_deflators(e, out.d_star);
  double y = solved[best].y;
  // Polish y so that the budget holds for the fixed deflator.
  if (const auto root = detail::budget_root(u, caps, out.xi_T, z, y)) {
    if (std::abs(detail::mean_budget(u, caps, out.xi_T, *root) - z) <=
        std::abs(detail::mean_budget(u, caps, out.xi_T, y) - z))
      y = *root;
  }
  out.y_star = y;
  std::vector<double> vals(e.n_paths());
  for (std::size_t p = 0; p < vals.size(); ++p) vals[p] = u.conjugate(y * out.xi_T[p], caps.caps[p]);
  out.v_value = mean_estimate(vals);
  out.primal_bound = out.v_value.mean + z * y;
  out.candidate = candidate_wealth(u, y, out.xi_T, caps.caps);
  out.budget = budget_residual(out.candidate, out.xi_T, z);
  for (std::size_t p = 0; p < vals.size(); ++p) vals[p] = u.value(out.candidate[p], caps.caps[p]);
  out.candidate_utility = mean_estimate(vals);
  return out;
}

struct CurvePoint {
  double y = 0.0;
  MeanEstimate value;
  std::size_t source = 0;  ///< index into the pool of the element attaining the minimum
};

struct DualCurve {
  std::vector<CurvePoint> points;
  std::vector<DualElement> pool;
  MeanEstimate w_hat;
  MeanEstimate utility_of_claim;
  MeanEstimate utility_at_zero;
};

/// v̂ on a y-grid. Each grid point is optimized, then every point takes the minimum over all
/// elements found, so the reported curve is the sample-average infimum over one common pool.
inline DualCurve dual_value_curve(const LevyMarketSpec& spec, const StateUtility& u,
                                  std::vector<double> ys, const PathEnsemble& e,
                                  const SolverOptions& opt = {}) {
  spec.validate();
  opt.validate();
  for (double y : ys)
    if (!(y >= 0.0) || !std::isfinite(y)) throw ValidationError("dual_value_curve: y must be >= 0");
  std::sort(ys.begin(), ys.end());
  LocalMartingaleFamily family(e, opt.n_buckets, opt.eps_f);
  const auto caps = ensemble_caps(u, e);
  std::vector<std::vector<double>> thetas{family.from_element(risk_neutral_density(spec))};
  std::vector<double> warm = thetas.front();
  bool first = true;
  for (double y : ys) {
    if (y == 0.0) continue;
    auto r = dual_value(family, u, caps, y, {warm}, first ? opt.restarts : 1, opt);
    first = false;
    warm = r.theta;
    thetas.push_back(r.theta);
  }
  DualCurve out;
  out.utility_of_claim = caps.utility_of_claim;
  out.utility_at_zero = caps.utility_at_zero;
  std::vector<std::vector<double>> xis;
  for (const auto& th : thetas) {
    xis.push_back(family.terminal(th));
    out.pool.push_back(family.to_element(th));
  }
  for (double y : ys) {
    CurvePoint pt{y, caps.utility_of_claim, 0};
    if (y > 0.0) {
      for (std::size_t s = 0; s < xis.size(); ++s) {
        double se = 0.0;
        const double m = detail::mean_conjugate(u, caps, xis[s], y, &se);
        if (s == 0 || m < pt.value.mean) pt = {y, {m, se, e.n_paths()}, s};
      }
    }
    out.points.push_back(pt);
  }
  // ŵ must dominate Ê[xi H] for every pooled element (the pool feeds the search).
  out.w_hat = super_hedging_cost_estimate(family, u, caps, thetas, opt).value;
  for (const auto& xi : xis) {
    std::vector<double> vals(xi.size());
    for (std::size_t p = 0; p < xi.size(); ++p) vals[p] = xi[p] * caps.caps[p];
    const auto m = mean_estimate(vals);
    if (m.mean > out.w_hat.mean) out.w_hat = m;
  }
  return out;
}

struct AuditRow {
  std::string strategy;
  bool admissible = true;
  std::string reason;
  MeanEstimate primal;  ///< Ê[U(V_T)]
  MeanEstimate bound;   ///< Ê[Ũ(y xi_T)] + z y (se of the first term)
  double excess = 0.0;  ///< primal - bound
  bool violation = false;
};

/// Weak duality audit: Ê[U(V^{z,beta}_T)] <= Ê[Ũ(y xi_T)] + z y up to 3 pooled standard errors.
inline std::vector<AuditRow> weak_duality_audit(const LevyMarketSpec& spec, const StateUtility& u,
                                                double z, const std::vector<Strategy>& strategies,
                                                const DualElement& d, double y,
                                                const PathEnsemble& e) {
  spec.validate();
  if (!(z > 0.0)) throw ValidationError("weak_duality_audit: z must be > 0");
  if (!(y > 0.0)) throw ValidationError("weak_duality_audit: y must be > 0");
  const auto caps = ensemble_caps(u, e);
  const auto xi = terminal_deflators(e, d);
  double se = 0.0;
  const double dual_part = detail::mean_conjugate(u, caps, xi, y, &se);
  const MeanEstimate bound{dual_part + z * y, se, e.n_paths()};
  std::vector<AuditRow> rows;
  for (const auto& s : strategies) {
    AuditRow row;
    row.strategy = s.label();
    row.bound = bound;
    std::vector<double> vals(e.n_paths());
    try {
      for (std::size_t p = 0; p < e.n_paths(); ++p) {
        const auto v = wealth_path(e.path(p), s, z);
        vals[p] = u.value(v.back(), caps.caps[p]);
      }
    } catch (const InadmissibleError& err) {
      row.admissible = false;
      row.reason = err.what();
      rows.push_back(std::move(row));
      continue;
    }
    row.primal = mean_estimate(vals);
    row.excess = row.primal.mean - bound.mean;
    row.violation = row.excess > 3.0 * std::hypot(row.primal.se, bound.se);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace levydual
