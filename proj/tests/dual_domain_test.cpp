#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "levydual/dual_domain.hpp"
#include "levydual/market.hpp"

using namespace levydual;

namespace {

LevyMarketSpec atoms_spec(std::vector<double> v, std::vector<double> lambda, double b = 0.0,
                          double sigma = 0.0) {
  LevyMarketSpec s;
  s.drift = b;
  s.volatility = sigma;
  for (std::size_t i = 0; i < v.size(); ++i) s.atoms.push_back({v[i], lambda[i], v[i]});
  return s;
}

DualElement constant_element(const LevyMarketSpec& s, double g, std::vector<double> f, double a,
                             double xi0 = 1.0) {
  DualElement d(xi0, 1, s.n_atoms(), s.horizon);
  d.buckets[0].g.constant = g;
  d.buckets[0].a.constant = a;
  for (std::size_t i = 0; i < f.size(); ++i) d.buckets[0].f[i].constant = f[i];
  return d;
}

// Brute force per node: h as an explicit sum over atoms, ĥ from the two sign cases.
double oracle_hat_h(const LevyMarketSpec& s, double g, const std::vector<double>& f) {
  double h = s.drift.at(0.0, s.horizon) + s.volatility.at(0.0, s.horizon) * g;
  double vmax = 0.0, vmin = 0.0;
  for (std::size_t i = 0; i < s.atoms.size(); ++i) {
    h += s.atoms[i].intensity * s.atoms[i].coefficient * f[i];
    vmax = std::max(vmax, s.atoms[i].coefficient);
    vmin = std::min(vmin, s.atoms[i].coefficient);
  }
  if (std::abs(h) <= 1e-12) return 0.0;
  if (h < 0.0) return vmax > 0.0 ? -h / vmax : kInf;
  return vmin < 0.0 ? -h / vmin : kInf;
}

struct Increments {
  double mean = 0.0;
  double se = 0.0;
};

// Pooled per-step increments of a process sampled as rows[path][step].
Increments pooled_increments(const std::vector<std::vector<double>>& rows) {
  std::vector<double> inc;
  for (const auto& r : rows)
    for (std::size_t k = 0; k + 1 < r.size(); ++k) inc.push_back(r[k + 1] - r[k]);
  const auto m = mean_estimate(inc);
  return {m.mean, m.se};
}

}  // namespace

TEST(Deflator, ZeroControlsKeepXi0) {
  const auto s = atoms_spec({-0.2, 0.3}, {1.0, 1.0}, 0.0, 0.2);
  const auto e = simulate_paths(s, 10, 20, 1);
  const auto d = constant_element(s, 0.0, {0.0, 0.0}, 0.0, 0.8);
  for (std::size_t p = 0; p < e.n_paths(); ++p)
    for (double x : stochastic_exponential(e.path(p), d)) EXPECT_EQ(x, 0.8);
}

TEST(Deflator, SingleStepKilling) {
  LevyMarketSpec s;
  const auto e = simulate_paths(s, 1, 1, 0);
  const auto xi = stochastic_exponential(e.path(0), constant_element(s, 0.0, {}, 0.1));
  EXPECT_DOUBLE_EQ(xi[1], 0.9);
}

TEST(Deflator, FullJumpSinksForever) {
  const auto s = atoms_spec({0.5}, {1.0});
  const auto d = constant_element(s, 0.0, {-1.0}, 0.0);
  // Jump at step 1 of 4.
  const auto e = PathEnsemble::from_samples(s, 4, {1.0, 1.0, 1.5, 1.5, 1.5}, {0, 0, 0, 0},
                                            {0, 1, 0, 0});
  const auto xi = stochastic_exponential(e.path(0), d);
  EXPECT_GT(xi[1], 0.0);
  for (std::size_t k = 2; k < xi.size(); ++k) EXPECT_EQ(xi[k], 0.0);
}

TEST(Deflator, HardConstraintsAndNegativeFactor) {
  const auto s = atoms_spec({0.5}, {1.0}, 0.0, 1.0);
  const auto e = PathEnsemble::from_samples(s, 1, {1.0, 1.0}, {-2.0}, {0});
  EXPECT_THROW(stochastic_exponential(e.path(0), constant_element(s, 0.0, {-1.5}, 0.0)),
               ValidationError);
  EXPECT_THROW(stochastic_exponential(e.path(0), constant_element(s, 0.0, {0.0}, -0.1)),
               ValidationError);
  try {
    stochastic_exponential(e.path(0), constant_element(s, 1.0, {0.0}, 0.0));
    FAIL();
  } catch (const DiscretizationError& err) {
    EXPECT_EQ(err.step(), 0u);
  }
}

TEST(Deflator, NonNegativeAndAbsorbing) {
  const auto s = atoms_spec({-0.3, 0.4}, {2.0, 1.0}, 0.0, 0.1);
  const auto e = simulate_paths(s, 40, 2000, 5);
  const auto d = constant_element(s, 0.3, {-1.0, 0.5}, 0.0);
  std::size_t sunk = 0;
  for (std::size_t p = 0; p < e.n_paths(); ++p) {
    const auto xi = stochastic_exponential(e.path(p), d);
    bool zero = false;
    for (double x : xi) {
      ASSERT_GE(x, 0.0);
      if (zero) ASSERT_EQ(x, 0.0);
      zero = zero || x == 0.0;
    }
    sunk += zero;
  }
  EXPECT_GT(sunk, 1000u);  // P(no down jump) = exp(-2)
  const auto terminal = terminal_deflators(e, d);
  for (std::size_t p = 0; p < e.n_paths(); ++p)
    EXPECT_EQ(terminal[p], stochastic_exponential(e.path(p), d).back());
}

TEST(Drift, Examples) {
  LevyMarketSpec diffusion;
  diffusion.drift = 0.05;
  diffusion.volatility = 0.2;
  EXPECT_NEAR(drift_h(diffusion, constant_element(diffusion, -0.25, {}, 0.0), 0.0, 0.0), 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(drift_h(diffusion, constant_element(diffusion, 0.0, {}, 0.0), 0.0, 0.0), 0.05);
  const auto s = atoms_spec({0.5}, {2.0}, 0.1);
  const double h = drift_h(s, constant_element(s, 0.0, {-0.1}, 0.0), 0.0, 0.0);
  EXPECT_NEAR(h, 0.1 + 2.0 * 0.5 * -0.1, 1e-15);
  EXPECT_NEAR(h, 0.0, 1e-15);
}

TEST(HatH, Examples) {
  const auto zero = atoms_spec({0.5}, {2.0}, 0.1);
  EXPECT_EQ(hat_h(zero, constant_element(zero, 0.0, {-0.1}, 0.0), 0.0, 0.0), 0.0);
  const auto s = atoms_spec({-0.5, 0.3}, {1.0, 1.0}, 0.6 - 0.3);  // h = 0.6 with F = (0, 1)
  EXPECT_DOUBLE_EQ(hat_h(s, constant_element(s, 0.0, {0.0, 1.0}, 0.0), 0.0, 0.0), 1.2);
  LevyMarketSpec m;
  m.jump_case = JumpCase::kMultiplicative;
  m.zeta = 1.0;
  m.drift = -0.4;
  m.atoms = {{1.0, 1.0, 2.0}, {2.0, 1.0, 0.0}};
  EXPECT_DOUBLE_EQ(hat_h(m, constant_element(m, 0.0, {0.0, 0.0}, 0.0), 0.0, 0.0), 0.2);
  m.drift = 0.4;  // no negative coefficient can absorb a positive drift
  EXPECT_EQ(hat_h(m, constant_element(m, 0.0, {0.0, 0.0}, 0.0), 0.0, 0.0), kInf);
}

TEST(Feasibility, Examples) {
  const auto s = atoms_spec({-0.2, 0.3}, {1.0, 2.0}, 0.05, 0.0);
  const auto e = simulate_paths(s, 10, 500, 2);
  const auto rn = risk_neutral_density(s);
  const auto ok = feasibility_check(s, rn, e);
  EXPECT_TRUE(ok.feasible);
  EXPECT_EQ(ok.max_violation, 0.0);
  const auto bad = feasibility_check(s, constant_element(s, 0.0, {0.0, 0.0}, 0.0), e);
  EXPECT_FALSE(bad.feasible);
  EXPECT_DOUBLE_EQ(bad.max_violation, 0.05 / 0.2);
  const auto hard = feasibility_check(s, constant_element(s, 0.0, {-1.5, 0.0}, 5.0), e);
  EXPECT_FALSE(hard.feasible);
  EXPECT_TRUE(hard.hard_violation);
}

TEST(Feasibility, AgreesWithBruteForceOnRandomElements) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  const auto s = atoms_spec({-0.4, 0.25, 0.6}, {0.5, 1.0, 0.7}, 0.04, 0.1);
  const auto e = simulate_paths(s, 5, 50, 3);
  for (int trial = 0; trial < 100; ++trial) {
    const double g = unif(rng);
    std::vector<double> f{unif(rng), unif(rng), unif(rng)};
    const double a = 0.8 * (unif(rng) + 1.0);
    const double want_excess = oracle_hat_h(s, g, f) - a;
    bool hard = false;
    for (double x : f) hard = hard || x < -1.0;
    const bool want = !hard && want_excess <= kFeasibilityTol;
    const auto got = feasibility_check(s, constant_element(s, g, f, a), e);
    EXPECT_EQ(got.feasible, want) << "trial " << trial;
    if (!hard) EXPECT_NEAR(got.max_violation, std::max(0.0, want_excess), 1e-12);
  }
}

TEST(Feasibility, StateDependentControlsReportLocation) {
  const auto s = atoms_spec({-0.5, 0.5}, {1.0, 1.0}, 0.0, 0.3);
  const auto e = simulate_paths(s, 20, 400, 9);
  DualElement d(1.0, 2, 2, 1.0);
  d.buckets[1].g.slope = 1.0;  // h = 0.3 x in the second half only
  const auto r = feasibility_check(s, d, e);
  EXPECT_FALSE(r.feasible);
  EXPECT_GE(r.t, 0.5);
  EXPECT_NEAR(r.max_violation, std::abs(0.3 * r.x) / 0.5, 1e-12);
}

TEST(MartingaleLift, UnchangedWhenAlreadyMartingale) {
  const auto s = atoms_spec({0.5}, {2.0}, 0.1);
  const auto d = constant_element(s, 0.0, {-0.1}, 0.0);
  const auto lifted = martingale_lift(s, d);
  EXPECT_FALSE(lifted.lifted);
  EXPECT_EQ(lifted.buckets[0].f[0].constant, -0.1);
}

TEST(MartingaleLift, CompensatesOnExtremeAtom) {
  const auto s = atoms_spec({-0.5, 1.0}, {1.0, 1.0}, 0.1);
  const auto d = constant_element(s, 0.0, {0.0, 0.0}, 0.2);
  ASSERT_NEAR(drift_h(s, d, 0.0, 0.0), 0.1, 1e-15);
  const auto lifted = martingale_lift(s, d);
  NodeControls c;
  evaluate_controls(s, lifted, 0.0, 0.0, c);
  EXPECT_NEAR(c.f[0], -0.1 / (-0.5 * 1.0), 1e-15);
  EXPECT_NEAR(c.f[0], 0.2, 1e-15);
  EXPECT_EQ(c.f[1], 0.0);
  EXPECT_EQ(c.a, 0.0);
  EXPECT_NEAR(drift_h(s, lifted, 0.0, 0.0), 0.0, 1e-15);
}

TEST(MartingaleLift, TieGoesToLowestIndex) {
  const auto s = atoms_spec({-0.5, -0.5, 1.0}, {1.0, 3.0, 1.0}, 0.1);
  const auto lifted = martingale_lift(s, constant_element(s, 0.0, {0, 0, 0}, 10.0));
  NodeControls c;
  evaluate_controls(s, lifted, 0.0, 0.0, c);
  EXPECT_GT(c.f[0], 0.0);
  EXPECT_EQ(c.f[1], 0.0);
}

TEST(MartingaleLift, MultiplicativeLevelSet) {
  LevyMarketSpec m;
  m.jump_case = JumpCase::kMultiplicative;
  m.zeta = PiecewiseConstant({0.5, 1.0});
  m.drift = 0.1;
  m.atoms = {{1.0, 1.0, -0.5}, {2.0, 2.0, -0.5}, {3.0, 1.0, 0.4}};
  const auto lifted = martingale_lift(m, constant_element(m, 0.0, {0, 0, 0}, 1.0));
  for (double t : {0.25, 0.75}) {
    NodeControls c;
    evaluate_controls(m, lifted, t, 0.0, c);
    EXPECT_NEAR(drift_h(m, lifted, t, 0.0), 0.0, 1e-15);
    EXPECT_DOUBLE_EQ(c.f[0], c.f[1]);
    EXPECT_GT(c.f[0], 0.0);
    EXPECT_EQ(c.f[2], 0.0);
  }
  m.support_lo = -0.9;  // extreme not carried by an atom
  EXPECT_THROW(martingale_lift(m, constant_element(m, 0.0, {0, 0, 0}, 1.0)),
               UnsupportedStructureError);
}

TEST(MartingaleLift, ExactZeroDriftDominanceAndMean) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> unif(-0.3, 0.3);
  const auto s = atoms_spec({-0.4, 0.3}, {1.0, 1.5}, 0.05, 0.2);
  const auto e = simulate_paths(s, 20, 10000, 13);
  for (int trial = 0; trial < 5; ++trial) {
    DualElement d(1.0, 4, 2, 1.0);
    for (auto& b : d.buckets) {
      b.g = {unif(rng), unif(rng)};
      b.f[0] = {unif(rng), 0.0};
      b.f[1] = {unif(rng), 0.0};
      b.x_lo = -0.5, b.x_hi = 0.5;
    }
    // Smallest feasible a on the clamp range: ĥ is piecewise linear in x, check both ends.
    for (auto& b : d.buckets) {
      double need = 0.0;
      for (double x : {b.x_lo, b.x_hi}) {
        NodeControls c{b.g(x), 0.0, {b.f[0](x), b.f[1](x)}};
        need = std::max(need, hat_h_from_drift(s, 0.0, drift_from_controls(s, 0.0, c.g, c.f)));
      }
      b.a.constant = need;
    }
    ASSERT_TRUE(feasibility_check(s, d, e).feasible);
    const auto lifted = martingale_lift(s, d);
    for (std::size_t p = 0; p < e.n_paths(); ++p)
      for (std::size_t k = 0; k < e.n_steps(); ++k)
        ASSERT_EQ(hat_h(s, lifted, e.time(k), e.log_ratio(p, k)), 0.0)
            << "path " << p << " step " << k;
    const auto x0 = terminal_deflators(e, d), x1 = terminal_deflators(e, lifted);
    std::size_t dominated = 0;
    for (std::size_t p = 0; p < e.n_paths(); ++p) dominated += x1[p] >= x0[p] * (1.0 - 1e-12);
    EXPECT_EQ(dominated, e.n_paths());
    const auto m = mean_estimate(x1);
    EXPECT_LE(std::abs(m.mean - 1.0), 3.0 * m.se);
  }
}

TEST(RiskNeutral, Examples) {
  const auto s1 = atoms_spec({-0.2}, {1.0}, 0.05, 0.2);
  const auto d1 = risk_neutral_density(s1);
  EXPECT_DOUBLE_EQ(d1.buckets[0].g.constant, -0.25);
  EXPECT_EQ(d1.buckets[0].f[0].constant, 0.0);
  const auto d2 = risk_neutral_density(LevyMarketSpec{});
  EXPECT_EQ(d2.buckets[0].g.constant, 0.0);
  const auto s3 = atoms_spec({0.5}, {2.0}, 0.1);
  const auto d3 = risk_neutral_density(s3);
  EXPECT_DOUBLE_EQ(d3.buckets[0].f[0].constant, -0.1);
  EXPECT_NEAR(drift_h(s3, d3, 0.0, 0.0), 0.0, 1e-15);
}

TEST(RiskNeutral, ClippedSplitAndInfeasible) {
  // Least-squares split would push F below -1 on the big atom; water-filling keeps h = 0.
  const auto s = atoms_spec({0.9, 0.05}, {0.2, 20.0}, 0.5);
  const auto d = risk_neutral_density(s);
  for (const auto& f : d.buckets[0].f) EXPECT_GT(f.constant, -1.0);
  EXPECT_NEAR(drift_h(s, d, 0.0, 0.0), 0.0, 1e-12);
  EXPECT_THROW(risk_neutral_density(atoms_spec({0.5}, {1.0}, 1.0)), NoEquivalentMeasureError);
  EXPECT_THROW(risk_neutral_density(atoms_spec({}, {}, 0.1)), NoEquivalentMeasureError);
}

TEST(RiskNeutral, PiecewiseCoefficientsGetOwnBuckets) {
  LevyMarketSpec s = atoms_spec({-0.3}, {1.0}, 0.0, 0.0);
  s.drift = PiecewiseConstant({0.06, -0.03});
  s.volatility = PiecewiseConstant({0.0, 0.0, 0.2});
  const auto d = risk_neutral_density(s);
  EXPECT_EQ(d.n_buckets(), 6u);
  for (double t : {0.05, 0.4, 0.6, 0.9}) EXPECT_NEAR(drift_h(s, d, t, 0.0), 0.0, 1e-12) << t;
}

TEST(RiskNeutral, DeflatesTheStock) {
  const auto s = atoms_spec({-0.3, 0.4}, {1.0, 0.5}, 0.08, 0.25);
  const auto e = simulate_paths(s, 25, 40000, 17);
  const auto xi = terminal_deflators(e, risk_neutral_density(s));
  std::vector<double> prod(e.n_paths());
  for (std::size_t p = 0; p < e.n_paths(); ++p) prod[p] = xi[p] * e.terminal_price(p);
  const auto m = mean_estimate(prod);
  EXPECT_LE(std::abs(m.mean - s.s0), 3.0 * m.se);
}

TEST(SupermartingaleDrift, FeasibleDeflatorTimesWealth) {
  const auto s = atoms_spec({-0.3, 0.4}, {1.0, 0.5}, 0.08, 0.25);
  const auto e = simulate_paths(s, 20, 10000, 23);
  const auto bounds = admissible_bounds(s, 0.0);
  const auto d1 = risk_neutral_density(s);
  // Zero controls need a = ĥ to be feasible.
  const auto d2 = constant_element(s, 0.0, {0.0, 0.0}, hat_h(s, constant_element(s, 0, {0, 0}, 0), 0, 0));
  ASSERT_TRUE(feasibility_check(s, d2, e).feasible);
  for (double beta : {0.0, 0.3 * bounds.lo, 0.3 * bounds.hi}) {
    std::vector<std::vector<double>> p1, p2, mix;
    for (std::size_t p = 0; p < e.n_paths(); ++p) {
      const auto v = wealth_path(e.path(p), Strategy::constant(beta), 1.0);
      const auto x1 = stochastic_exponential(e.path(p), d1);
      const auto x2 = stochastic_exponential(e.path(p), d2);
      std::vector<double> a(v.size()), b(v.size()), c(v.size());
      for (std::size_t k = 0; k < v.size(); ++k) {
        a[k] = x1[k] * v[k];
        b[k] = x2[k] * v[k];
        c[k] = (0.3 * x1[k] + 0.7 * x2[k]) * v[k];
      }
      p1.push_back(a), p2.push_back(b), mix.push_back(c);
    }
    for (const auto* rows : {&p1, &p2, &mix}) {
      const auto inc = pooled_increments(*rows);
      EXPECT_LE(inc.mean, 3.0 * inc.se) << "beta " << beta;
    }
  }
}
