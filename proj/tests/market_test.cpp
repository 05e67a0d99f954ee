#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "levydual/io.hpp"
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

// Interval of beta with beta * v >= -1 for every v, found by scanning a beta grid of step 1e-3.
// Endpoints that are still admissible at the edge of the scan are reported as infinite.
Interval scan_admissible(const std::vector<double>& jumps) {
  const double edge = 50.0, step = 1e-3;
  double lo = kInf, hi = -kInf;
  for (int i = 0; i <= static_cast<int>(2.0 * edge / step); ++i) {
    const double beta = -edge + i * step;
    bool ok = true;
    for (double v : jumps) ok = ok && beta * v >= -1.0 - 1e-12;
    if (ok) lo = std::min(lo, beta), hi = std::max(hi, beta);
  }
  if (lo <= -edge + step) lo = -kInf;
  if (hi >= edge - step) hi = kInf;
  return {lo, hi};
}

}  // namespace

TEST(Simulate, DeterministicDriftOneStep) {
  LevyMarketSpec s;
  s.drift = 0.05;
  const auto e = simulate_paths(s, 1, 3, 7);
  for (std::size_t p = 0; p < 3; ++p) EXPECT_EQ(e.terminal_price(p), 1.05);
}

TEST(Simulate, OneCompensatedJumpLeavesPriceUnchanged) {
  const auto s = atoms_spec({0.5}, {1.0});
  const std::uint16_t one = 1;
  EXPECT_EQ(euler_step_factor(s, 0.0, 1.0, 0.0, std::span(&one, 1)), 1.0);
  // Same thing through the simulator: find paths with exactly one jump.
  const auto e = simulate_paths(s, 1, 2000, 3);
  std::size_t seen = 0;
  for (std::size_t p = 0; p < e.n_paths(); ++p) {
    if (e.jump_counts(p, 0)[0] != 1) continue;
    ++seen;
    EXPECT_EQ(e.terminal_price(p), 1.0);
  }
  EXPECT_GT(seen, 500u);
}

TEST(Simulate, DriftlessMeanIsS0) {
  LevyMarketSpec s;
  s.volatility = 0.2;
  const auto e = simulate_paths(s, 20, 100000, 11);
  std::vector<double> st(e.n_paths());
  for (std::size_t p = 0; p < st.size(); ++p) st[p] = e.terminal_price(p);
  const auto m = mean_estimate(st);
  EXPECT_LE(std::abs(m.mean - 1.0), 3.0 * m.se);
}

TEST(Simulate, DriftlessWithJumpsMeanIsS0) {
  auto s = atoms_spec({-0.3, 0.4}, {0.7, 0.5}, 0.0, 0.15);
  const auto e = simulate_paths(s, 25, 40000, 5);
  std::vector<double> st(e.n_paths());
  for (std::size_t p = 0; p < st.size(); ++p) st[p] = e.terminal_price(p);
  const auto m = mean_estimate(st);
  EXPECT_LE(std::abs(m.mean - 1.0), 3.0 * m.se);
}

TEST(Simulate, PricesPositiveAndReproducible) {
  auto s = atoms_spec({-0.6, 0.8}, {1.0, 0.5}, 0.03, 0.4);
  const auto a = simulate_paths(s, 30, 3000, 99);
  const auto b = simulate_paths(s, 30, 3000, 99);
  const auto c = simulate_paths(s, 30, 3000, 100);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == c);
  for (std::size_t p = 0; p < a.n_paths(); ++p)
    for (std::size_t k = 0; k <= a.n_steps(); ++k) ASSERT_GT(a.price(p, k), 0.0);
}

TEST(Simulate, PathDoesNotDependOnEnsembleSize) {
  auto s = atoms_spec({-0.2}, {2.0}, 0.01, 0.3);
  const auto small = simulate_paths(s, 10, 5, 4);
  const auto large = simulate_paths(s, 10, 5000, 4);
  for (std::size_t p = 0; p < 5; ++p)
    for (std::size_t k = 0; k <= 10; ++k) EXPECT_EQ(small.price(p, k), large.price(p, k));
}

TEST(Simulate, JumpCountsArePoisson) {
  auto s = atoms_spec({-0.1, 0.2}, {0.8, 3.0});
  s.horizon = 2.0;
  const auto e = simulate_paths(s, 16, 40000, 21);
  for (std::size_t i = 0; i < 2; ++i) {
    std::vector<double> n(e.n_paths());
    for (std::size_t p = 0; p < e.n_paths(); ++p)
      for (std::size_t k = 0; k < e.n_steps(); ++k) n[p] += e.jump_counts(p, k)[i];
    const auto m = mean_estimate(n);
    const double rate = s.atoms[i].intensity * s.horizon;
    EXPECT_LE(std::abs(m.mean - rate), 4.0 * m.se);
    // Poisson dispersion: variance equals the mean.
    const double var = m.se * m.se * static_cast<double>(m.count);
    EXPECT_NEAR(var / rate, 1.0, 0.05);
  }
}

TEST(Simulate, BridgeRefinementKeepsPricesPositive) {
  LevyMarketSpec s;
  s.volatility = 2.0;  // a single unit step has factor <= 0 about 31% of the time
  const auto e = simulate_paths(s, 1, 20000, 8);
  std::size_t refined = 0;
  for (std::size_t p = 0; p < e.n_paths(); ++p) {
    ASSERT_GT(e.terminal_price(p), 0.0);
    const double coarse = 1.0 + 2.0 * e.dw(p, 0);
    if (coarse > 0.0)
      EXPECT_EQ(e.terminal_price(p), coarse);
    else
      ++refined;
  }
  EXPECT_GT(refined, 5000u);
  EXPECT_LT(refined, 7500u);
}

TEST(Simulate, RefinementFailureNamesStep) {
  auto s = atoms_spec({-0.9999999}, {20.0}, 0.0, 1.0);
  try {
    simulate_paths(s, 3, 2000, 1);
    FAIL() << "expected a discretization error";
  } catch (const DiscretizationError& err) {
    EXPECT_LT(err.step(), 3u);
    EXPECT_NE(std::string(err.what()).find("step"), std::string::npos);
  }
}

TEST(Simulate, RejectsInvalidSpecs) {
  LevyMarketSpec s;
  s.volatility = -0.1;
  EXPECT_THROW(simulate_paths(s, 1, 1, 0), ValidationError);
  EXPECT_THROW(simulate_paths(atoms_spec({-1.0}, {1.0}), 1, 1, 0), ValidationError);
  EXPECT_THROW(simulate_paths(atoms_spec({0.5}, {0.0}), 1, 1, 0), ValidationError);
  EXPECT_THROW(simulate_paths(LevyMarketSpec{}, 0, 1, 0), ValidationError);
  LevyMarketSpec m;
  m.jump_case = JumpCase::kMultiplicative;
  m.zeta = 0.0;
  m.atoms.push_back({1.0, 1.0, 0.5});
  EXPECT_THROW(simulate_paths(m, 1, 1, 0), ValidationError);
  m.zeta = 1.0;
  m.atoms.push_back({2.0, 1.0, 0.0});
  EXPECT_THROW(simulate_paths(m, 1, 1, 0), ValidationError);
}

TEST(Wealth, ZeroExposureKeepsWealth) {
  const auto e = simulate_paths(atoms_spec({-0.3}, {1.0}, 0.02, 0.3), 12, 50, 2);
  for (std::size_t p = 0; p < e.n_paths(); ++p) {
    const auto v = wealth_path(e.path(p), Strategy::constant(0.0), 0.7);
    for (double x : v) EXPECT_EQ(x, 0.7);
  }
}

TEST(Wealth, FullInvestmentReplicatesStock) {
  auto s = atoms_spec({-0.3, 0.4}, {1.0, 1.0}, 0.02, 0.3);
  s.s0 = 2.5;
  const auto e = simulate_paths(s, 12, 200, 2);
  for (std::size_t p = 0; p < e.n_paths(); ++p) {
    const auto v = wealth_path(e.path(p), Strategy::constant(1.0), s.s0);
    for (std::size_t k = 0; k <= e.n_steps(); ++k) EXPECT_DOUBLE_EQ(v[k], e.price(p, k));
  }
}

TEST(Wealth, OneStepArithmetic) {
  LevyMarketSpec s;
  const auto e = PathEnsemble::from_samples(s, 1, {1.0, 1.2}, {0.0}, {});
  const auto v = wealth_path(e.path(0), Strategy::constant(0.5), 1.0);
  EXPECT_DOUBLE_EQ(v[1], 1.1);
}

TEST(Wealth, NegativeWealthReportsStepAndBeta) {
  LevyMarketSpec s;
  const auto e = PathEnsemble::from_samples(s, 2, {1.0, 1.1, 0.5}, {0.0, 0.0}, {});
  try {
    wealth_path(e.path(0), Strategy::constant(2.5), 1.0);
    FAIL();
  } catch (const InadmissibleError& err) {
    EXPECT_EQ(err.step(), 1u);
    EXPECT_EQ(err.beta(), 2.5);
  }
}

TEST(Strategy, PiecewiseAndTabulated) {
  const auto pw = Strategy::piecewise({0.1, 0.2, 0.3}, 3.0);
  EXPECT_EQ(pw(0.5, 0.0), 0.1);
  EXPECT_EQ(pw(1.0, 0.0), 0.2);
  EXPECT_EQ(pw(2.9, 0.0), 0.3);
  const auto tab = Strategy::tabulated({0.0, 1.0}, {-1.0, 1.0}, {0.0, 1.0, 2.0, 3.0});
  EXPECT_DOUBLE_EQ(tab(0.0, 0.0), 0.5);
  EXPECT_DOUBLE_EQ(tab(0.5, 0.0), 1.5);
  EXPECT_DOUBLE_EQ(tab(5.0, 9.0), 3.0);  // clamped
  EXPECT_THROW(Strategy::tabulated({0.0}, {0.0, 1.0}, {1.0}), ValidationError);
}

TEST(AdmissibleBounds, TwoSidedAtoms) {
  const auto s = atoms_spec({-0.5, 1.0}, {1.0, 1.0});
  const auto got = admissible_bounds(s, 0.0);
  const auto want = scan_admissible({-0.5, 1.0});
  EXPECT_EQ(got.lo, -1.0);
  EXPECT_EQ(got.hi, 2.0);
  EXPECT_NEAR(got.lo, want.lo, 1e-3);
  EXPECT_NEAR(got.hi, want.hi, 1e-3);
}

TEST(AdmissibleBounds, PositiveAtomsOnly) {
  const auto s = atoms_spec({0.5, 1.0}, {1.0, 1.0});
  const auto got = admissible_bounds(s, 0.0);
  const auto want = scan_admissible({0.5, 1.0});
  EXPECT_EQ(got.lo, -1.0);
  EXPECT_EQ(got.hi, kInf);
  EXPECT_NEAR(got.lo, want.lo, 1e-3);
  EXPECT_EQ(want.hi, kInf);
}

TEST(AdmissibleBounds, NoShortsNoBorrowingWhenSupportIsWide) {
  LevyMarketSpec s = atoms_spec({-0.5, 0.3}, {1.0, 1.0});
  s.support_lo = -1.0;
  s.support_hi = kInf;
  const auto got = admissible_bounds(s, 0.0);
  EXPECT_EQ(got.lo, 0.0);
  EXPECT_EQ(got.hi, 1.0);
}

TEST(AdmissibleBounds, NoJumpsIsUnbounded) {
  const auto got = admissible_bounds(LevyMarketSpec{}, 0.0);
  EXPECT_EQ(got.lo, -kInf);
  EXPECT_EQ(got.hi, kInf);
}

TEST(AdmissibleBounds, MultiplicativeUsesSignOfZeta) {
  LevyMarketSpec s;
  s.jump_case = JumpCase::kMultiplicative;
  s.atoms = {{1.0, 1.0, 0.5}, {2.0, 1.0, -0.25}};
  s.zeta = PiecewiseConstant({2.0, -2.0});
  const auto first = admissible_bounds(s, 0.1);   // v in {1, -0.5}
  const auto second = admissible_bounds(s, 0.9);  // v in {-1, 0.5}
  const auto w1 = scan_admissible({1.0, -0.5});
  const auto w2 = scan_admissible({-1.0, 0.5});
  EXPECT_NEAR(first.lo, w1.lo, 1e-3);
  EXPECT_NEAR(first.hi, w1.hi, 1e-3);
  EXPECT_NEAR(second.lo, w2.lo, 1e-3);
  EXPECT_NEAR(second.hi, w2.hi, 1e-3);
}

TEST(AdmissibleBounds, InsideNeverFailsOutsideFailsOnExtremeJump) {
  const std::vector<double> jumps{-0.4, 0.25, 0.6};
  const auto s = atoms_spec(jumps, {1.0, 1.0, 1.0}, 0.01, 0.0);
  const auto bounds = admissible_bounds(s, 0.0);
  // Every single-jump outcome, for betas inside the interval up to rounding at the endpoints.
  const double in = 1.0 - 1e-12;
  for (double beta : {in * bounds.lo, 0.5 * bounds.lo, 0.0, 0.5 * bounds.hi, in * bounds.hi}) {
    for (double v : jumps) {
      const auto e = PathEnsemble::from_samples(s, 1, {1.0, 1.0 + v}, {0.0}, {0, 0, 0});
      EXPECT_NO_THROW(wealth_path(e.path(0), Strategy::constant(beta), 1.0));
    }
  }
  // Just outside: the jump at the matching extreme atom makes wealth negative.
  const auto down = PathEnsemble::from_samples(s, 1, {1.0, 1.0 - 0.4}, {0.0}, {1, 0, 0});
  const auto up = PathEnsemble::from_samples(s, 1, {1.0, 1.0 + 0.6}, {0.0}, {0, 0, 1});
  EXPECT_THROW(wealth_path(down.path(0), Strategy::constant(bounds.hi * 1.01), 1.0), InadmissibleError);
  EXPECT_THROW(wealth_path(up.path(0), Strategy::constant(bounds.lo * 1.01), 1.0), InadmissibleError);
  // Simulated paths inside the interval never fail once the step drift is zero and
  // steps are fine enough that two jumps never share a step.
  auto fine = atoms_spec(jumps, {0.05, 0.05, 0.05}, 0.0225, 0.0);
  const auto e = simulate_paths(fine, 200, 2000, 3);
  for (std::size_t p = 0; p < e.n_paths(); ++p)
    EXPECT_NO_THROW(wealth_path(e.path(p), Strategy::constant(0.99 * bounds.hi), 1.0));
}

TEST(PathsCsv, HeaderRowsAndJumpColumn) {
  const auto s = atoms_spec({0.5}, {30.0});
  const auto e = simulate_paths(s, 2, 3, 1);
  std::ostringstream os;
  write_paths_csv(os, e);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "path_id,step,t,S,dW,jump_atom");
  std::size_t rows = 0;
  bool saw_multi = false;
  while (std::getline(is, line)) {
    ++rows;
    if (rows == 1) EXPECT_EQ(line, "0,0,0,1,0,");
    saw_multi = saw_multi || line.find(';') != std::string::npos;
  }
  EXPECT_EQ(rows, 9u);
  EXPECT_TRUE(saw_multi);  // lambda dt = 15 per step
}
