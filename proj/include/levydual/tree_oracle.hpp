#pragma once

// Finite multi-period market used as an exact oracle.
//
// Each period applies one layer of branches (probability p_j, gross return r_j)
// independently of the node, so nodes with the same multiset of realized
// returns coincide and the tree recombines into a lattice. Claims depend on S_T
// only, which keeps the primal and dual value functions Markov in (t, S).
//
// Primal: phi_t(S, w) = sup_pi sum_j p_j phi_{t+1}(S r_j, w + pi (r_j - 1)),
// tabulated on a wealth grid [0, C(t,S)] (C = super-hedging cost; phi is flat
// beyond it). Dual: K_t(S, eta) = min_{q in polytope} sum_j p_j K_{t+1}(S r_j,
// eta q_j / p_j), tabulated on a geometric eta grid. The last period always uses
// exact leaf functions, so one-period trees are solved to machine precision.
// Small trees are additionally replayed path by path, which turns the DP policies
// into an exactly evaluated primal strategy and an exact martingale density.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "levydual/errors.hpp"
#include "levydual/market.hpp"
#include "levydual/utility.hpp"

namespace levydual {

struct Branch {
  double p = 0.0;
  double r = 1.0;
};

struct TreeLayer {
  std::vector<Branch> branches;
};

inline constexpr std::size_t kMaxTreeDepth = 20;
inline constexpr std::size_t kMaxBranches = 4;

/// Risk-neutral one-step measures {q >= 0, sum q = 1, sum q_j r_j = 1} by vertex list.
inline std::vector<std::vector<double>> risk_neutral_vertices(const TreeLayer& layer) {
  const auto& br = layer.branches;
  const std::size_t n = br.size();
  std::vector<std::vector<double>> out;
  for (std::size_t j = 0; j < n; ++j) {
    if (br[j].r == 1.0) {
      std::vector<double> q(n, 0.0);
      q[j] = 1.0;
      out.push_back(std::move(q));
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < n; ++k) {
      if (!(br[j].r < 1.0 && br[k].r > 1.0)) continue;
      std::vector<double> q(n, 0.0);
      const double width = br[k].r - br[j].r;
      q[j] = (br[k].r - 1.0) / width;
      q[k] = (1.0 - br[j].r) / width;
      out.push_back(std::move(q));
    }
  }
  return out;
}

class TreeMarket {
 public:
  TreeMarket(double s0, std::vector<TreeLayer> layers) : s0_(s0), layers_(std::move(layers)) {
    validate();
    build_lattice();
  }

  double s0() const { return s0_; }
  std::size_t depth() const { return layers_.size(); }
  const TreeLayer& layer(std::size_t t) const { return layers_[t]; }
  const std::vector<TreeLayer>& layers() const { return layers_; }
  const std::vector<std::vector<double>>& vertices(std::size_t t) const { return vertices_[t]; }

  std::size_t n_nodes(std::size_t t) const { return price_[t].size(); }
  double price(std::size_t t, std::size_t i) const { return price_[t][i]; }
  /// Probability of reaching node i at time t.
  double node_probability(std::size_t t, std::size_t i) const { return prob_[t][i]; }
  std::size_t child(std::size_t t, std::size_t i, std::size_t j) const { return child_[t][i][j]; }

  /// Number of distinct root-to-leaf paths (saturates at SIZE_MAX).
  std::size_t path_count() const {
    std::size_t n = 1;
    for (const auto& l : layers_) {
      if (n > std::numeric_limits<std::size_t>::max() / l.branches.size())
        return std::numeric_limits<std::size_t>::max();
      n *= l.branches.size();
    }
    return n;
  }

 private:
  void validate() const {
    if (!(s0_ > 0.0) || !std::isfinite(s0_)) throw ValidationError("tree: s0 must be positive");
    if (layers_.empty()) throw ValidationError("tree: depth must be >= 1");
    if (layers_.size() > kMaxTreeDepth)
      throw ValidationError("tree: depth must be <= " + std::to_string(kMaxTreeDepth));
    for (std::size_t t = 0; t < layers_.size(); ++t) {
      const auto& br = layers_[t].branches;
      if (br.empty() || br.size() > kMaxBranches)
        throw ValidationError("tree: each layer needs 1.." + std::to_string(kMaxBranches) + " branches");
      double total = 0.0, rmin = kInf, rmax = -kInf;
      for (const auto& b : br) {
        if (!(b.p > 0.0) || !(b.r > 0.0) || !std::isfinite(b.r))
          throw ValidationError("tree: branch probabilities and returns must be positive");
        total += b.p;
        rmin = std::min(rmin, b.r);
        rmax = std::max(rmax, b.r);
      }
      if (std::abs(total - 1.0) > 1e-12)
        throw ValidationError("tree: branch probabilities of layer " + std::to_string(t) +
                              " sum to " + std::to_string(total));
      const bool flat = rmin == 1.0 && rmax == 1.0;
      if (!flat && !(rmin < 1.0 && rmax > 1.0))
        throw ArbitrageError("tree: layer " + std::to_string(t) +
                             " admits arbitrage (all returns on one side of 1)");
    }
  }

  void build_lattice() {
    std::vector<double> classes;
    for (const auto& l : layers_)
      for (const auto& b : l.branches) classes.push_back(b.r);
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    auto class_of = [&](double r) {
      return static_cast<std::size_t>(std::lower_bound(classes.begin(), classes.end(), r) -
                                      classes.begin());
    };
    using Key = std::vector<int>;
    std::vector<Key> level{Key(classes.size(), 0)};
    price_.push_back({s0_});
    prob_.push_back({1.0});
    for (std::size_t t = 0; t < layers_.size(); ++t) {
      vertices_.push_back(risk_neutral_vertices(layers_[t]));
      std::map<Key, std::size_t> index;
      std::vector<Key> next;
      std::vector<double> next_prob;
      child_.emplace_back(level.size());
      for (std::size_t i = 0; i < level.size(); ++i) {
        for (const auto& b : layers_[t].branches) {
          Key k = level[i];
          ++k[class_of(b.r)];
          auto [it, inserted] = index.emplace(k, next.size());
          if (inserted) {
            next.push_back(k);
            next_prob.push_back(0.0);
          }
          child_[t][i].push_back(it->second);
          next_prob[it->second] += prob_[t][i] * b.p;
        }
      }
      std::vector<double> prices(next.size());
      for (std::size_t i = 0; i < next.size(); ++i) {
        double s = s0_;
        for (std::size_t c = 0; c < classes.size(); ++c)
          for (int m = 0; m < next[i][c]; ++m) s *= classes[c];
        prices[i] = s;
      }
      price_.push_back(std::move(prices));
      prob_.push_back(std::move(next_prob));
      level = std::move(next);
    }
  }

  double s0_;
  std::vector<TreeLayer> layers_;
  std::vector<std::vector<std::vector<double>>> vertices_;
  std::vector<std::vector<double>> price_;
  std::vector<std::vector<double>> prob_;
  std::vector<std::vector<std::vector<std::size_t>>> child_;
};

/// Moment-matched tree of the Lévy market: per step two diffusion branches (one if sigma = 0)
/// plus one branch per atom with probability lambda_i dt and return 1 + v_i.
inline TreeMarket build_tree(const LevyMarketSpec& spec, std::size_t n_steps) {
  spec.validate();
  if (n_steps == 0 || n_steps > kMaxTreeDepth)
    throw ValidationError("build_tree: n_steps must lie in [1, " + std::to_string(kMaxTreeDepth) + "]");
  const double dt = spec.horizon / static_cast<double>(n_steps);
  std::vector<TreeLayer> layers;
  for (std::size_t k = 0; k < n_steps; ++k) {
    const double t = spec.horizon * static_cast<double>(k) / static_cast<double>(n_steps);
    double jump_mass = 0.0;
    for (const auto& a : spec.atoms) jump_mass += a.intensity * dt;
    const double pd = 1.0 - jump_mass;
    if (!(pd > 0.0))
      throw ValidationError("build_tree: step too coarse, total jump probability per step >= 1");
    const double mu = (spec.b(t) * dt - dt * spec.compensator(t)) / pd;
    const double s = spec.sigma(t) * std::sqrt(dt) / std::sqrt(pd);
    TreeLayer layer;
    if (spec.sigma(t) > 0.0) {
      layer.branches.push_back({0.5 * pd, 1.0 + mu + s});
      layer.branches.push_back({0.5 * pd, 1.0 + mu - s});
    } else {
      layer.branches.push_back({pd, 1.0 + mu});
    }
    for (std::size_t i = 0; i < spec.n_atoms(); ++i)
      layer.branches.push_back({spec.atoms[i].intensity * dt, 1.0 + spec.v(t, i)});
    for (const auto& b : layer.branches)
      if (!(b.r > 0.0)) throw ValidationError("build_tree: step too coarse, non-positive return");
    layers.push_back(std::move(layer));
  }
  return TreeMarket(spec.s0, std::move(layers));
}

struct SuperHedgeResult {
  double cost = 0.0;  ///< sup over martingale measures of E_Q[claim]
  /// Per lattice node: required capital (>= cost, equal up to rounding) and shares held.
  std::vector<std::vector<double>> capital;
  std::vector<std::vector<double>> shares;
  std::vector<std::vector<double>> node_cost;
  bool dominates = true;  ///< capital_t + shares (S_{t+1} - S_t) >= capital_{t+1} at every edge
};

/// Backward recursion cost_t = max over vertices of E_q[cost_{t+1}], hedge from the supporting line.
inline SuperHedgeResult super_hedge_exact(const TreeMarket& tree, std::span<const double> terminal) {
  const std::size_t T = tree.depth();
  if (terminal.size() != tree.n_nodes(T))
    throw ValidationError("super_hedge_exact: need one claim value per terminal node");
  for (double c : terminal)
    if (!(c >= 0.0) || !std::isfinite(c)) throw ValidationError("super_hedge_exact: claim must be >= 0");
  SuperHedgeResult out;
  out.node_cost.resize(T + 1);
  out.capital.resize(T + 1);
  out.shares.resize(T);
  out.node_cost[T].assign(terminal.begin(), terminal.end());
  out.capital[T] = out.node_cost[T];
  for (std::size_t t = T; t-- > 0;) {
    const auto& br = tree.layer(t).branches;
    const std::size_t n = tree.n_nodes(t);
    out.node_cost[t].resize(n);
    out.capital[t].resize(n);
    out.shares[t].resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      double best = -kInf;
      for (const auto& q : tree.vertices(t)) {
        double v = 0.0;
        for (std::size_t j = 0; j < br.size(); ++j) v += q[j] * out.node_cost[t + 1][tree.child(t, i, j)];
        best = std::max(best, v);
      }
      out.node_cost[t][i] = best;
      // Shares: minimize g(D) = max_j (cap_j - D S (r_j - 1)); optimum at a pairwise breakpoint.
      const double s = tree.price(t, i);
      auto g = [&](double d) {
        double m = -kInf;
        for (std::size_t j = 0; j < br.size(); ++j)
          m = std::max(m, out.capital[t + 1][tree.child(t, i, j)] - d * s * (br[j].r - 1.0));
        return m;
      };
      double best_d = 0.0, best_g = g(0.0);
      for (std::size_t j = 0; j < br.size(); ++j) {
        for (std::size_t k = j + 1; k < br.size(); ++k) {
          if (br[j].r == br[k].r) continue;
          const double d = (out.capital[t + 1][tree.child(t, i, k)] - out.capital[t + 1][tree.child(t, i, j)]) /
                           (s * (br[k].r - br[j].r));
          const double v = g(d);
          if (v < best_g) best_g = v, best_d = d;
        }
      }
      // Make dominance hold in floating point, not just in exact arithmetic.
      double cap = best_g;
      for (std::size_t j = 0; j < br.size(); ++j) {
        const double need = out.capital[t + 1][tree.child(t, i, j)];
        while (cap + best_d * (s * br[j].r - s) < need) cap = std::nextafter(cap, kInf);
      }
      out.capital[t][i] = cap;
      out.shares[t][i] = best_d;
    }
  }
  out.cost = out.node_cost[0][0];
  for (std::size_t t = 0; t < T; ++t) {
    const auto& br = tree.layer(t).branches;
    for (std::size_t i = 0; i < tree.n_nodes(t); ++i) {
      const double s = tree.price(t, i);
      for (std::size_t j = 0; j < br.size(); ++j)
        if (out.capital[t][i] + out.shares[t][i] * (s * br[j].r - s) <
            out.capital[t + 1][tree.child(t, i, j)])
          out.dominates = false;
    }
  }
  return out;
}

inline SuperHedgeResult super_hedge_exact(const TreeMarket& tree, const Claim& claim) {
  const std::size_t T = tree.depth();
  std::vector<double> values(tree.n_nodes(T));
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = claim(tree.price(T, i));
  return super_hedge_exact(tree, values);
}

struct TreeOracleOptions {
  std::size_t grid_points = 3000;
  std::size_t path_limit = 200000;
  int golden_iterations = 60;

  void validate() const {
    if (grid_points < 3) throw ValidationError("tree oracle: grid_points must be >= 3");
    if (golden_iterations < 10) throw ValidationError("tree oracle: golden_iterations must be >= 10");
  }
};

/// One root-to-leaf path of a replayed tree solution.
struct TreePath {
  double probability = 0.0;
  double terminal_price = 0.0;
  double claim = 0.0;
  double wealth = 0.0;          ///< primal: terminal wealth; dual: candidate V* = I(y xi) ∧ H
  double deflator = 1.0;        ///< dual: xi_T = dQ/dP along the path
  std::vector<double> beta;     ///< primal: proportion held at each step
};

struct PrimalTreeResult {
  double z = 0.0;
  double value = 0.0;          ///< u(z): exact replay value when replayed, DP value otherwise
  double dp_value = 0.0;       ///< phi_0(s0, z)
  double super_hedge_cost = 0.0;
  bool capped = false;         ///< z >= super-hedging cost
  bool replayed = false;
  std::vector<TreePath> paths; ///< filled when replayed
};

struct DualTreeResult {
  double z = 0.0;
  double y = 0.0;
  double v_value = 0.0;         ///< v(y)
  double bound = 0.0;           ///< v(y) + z y
  double slack = 1.0;           ///< s in xi_T = s dQ/dP
  double primal_value = 0.0;
  double gap = 0.0;             ///< |bound - u(z)|
  double budget_residual = 0.0; ///< |E[V* xi] - z| (replayed trees only)
  bool replayed = false;
  std::vector<TreePath> paths;
};

namespace detail {

inline double golden_max(const std::function<double(double)>& f, double a, double b, int iterations,
                         double* arg) {
  constexpr double kInvPhi = 0.6180339887498949;
  double c = b - kInvPhi * (b - a), d = a + kInvPhi * (b - a);
  double fc = f(c), fd = f(d);
  for (int it = 0; it < iterations && b - a > 0.0; ++it) {
    if (fc >= fd) {
      b = d, d = c, fd = fc;
      c = b - kInvPhi * (b - a);
      fc = f(c);
    } else {
      a = c, c = d, fc = fd;
      d = a + kInvPhi * (b - a);
      fd = f(d);
    }
  }
  double best_x = fc >= fd ? c : d, best = std::max(fc, fd);
  for (double x : {a, b}) {
    const double v = f(x);
    if (v > best) best = v, best_x = x;
  }
  if (arg) *arg = best_x;
  return best;
}

// Dynamic-programming tables of one (tree, utility) pair.
class TreeProgram {
 public:
  TreeProgram(const TreeMarket& tree, const StateUtility& u, const TreeOracleOptions& opt)
      : tree_(tree), u_(u), opt_(opt), T_(tree.depth()) {
    opt.validate();
    hedge_ = super_hedge_exact(tree, u.claim());
    cap_value_.resize(T_ + 1);
    cap_value_[T_].resize(tree.n_nodes(T_));
    h_max_ = 0.0;
    for (std::size_t i = 0; i < tree.n_nodes(T_); ++i) {
      const double h = u.cap(tree.price(T_, i));
      cap_value_[T_][i] = u.value(h, h);
      h_max_ = std::max(h_max_, h);
    }
    for (std::size_t t = T_; t-- > 0;) {
      const auto& br = tree.layer(t).branches;
      cap_value_[t].resize(tree.n_nodes(t));
      for (std::size_t i = 0; i < tree.n_nodes(t); ++i) {
        double v = 0.0;
        for (std::size_t j = 0; j < br.size(); ++j) v += br[j].p * cap_value_[t + 1][tree.child(t, i, j)];
        cap_value_[t][i] = v;
      }
    }
  }

  const SuperHedgeResult& hedge() const { return hedge_; }
  double claim_utility() const { return cap_value_[0][0]; }

  // ---- primal -------------------------------------------------------------------------

  double phi(std::size_t t, std::size_t i, double w) const {
    if (t == T_) {
      const double h = u_.cap(tree_.price(T_, i));
      return u_.value(w, h);
    }
    const double c = hedge_.node_cost[t][i];
    if (w >= c) return cap_value_[t][i];
    const auto& g = phi_grid_[t][i];
    const double pos = std::max(w, 0.0) / c * static_cast<double>(g.size() - 1);
    const auto k = std::min(static_cast<std::size_t>(pos), g.size() - 2);
    const double frac = pos - static_cast<double>(k);
    return g[k] + frac * (g[k + 1] - g[k]);
  }

  // sup over the money amount pi held in the stock; returns value, writes pi.
  double phi_opt(std::size_t t, std::size_t i, double w, double* pi_out) const {
    const auto& br = tree_.layer(t).branches;
    double rmin = kInf, rmax = -kInf;
    for (const auto& b : br) rmin = std::min(rmin, b.r), rmax = std::max(rmax, b.r);
    auto f = [&](double pi) {
      double v = 0.0;
      for (std::size_t j = 0; j < br.size(); ++j)
        v += br[j].p * phi(t + 1, tree_.child(t, i, j), std::max(0.0, w + pi * (br[j].r - 1.0)));
      return v;
    };
    if (!(w > 0.0) || rmax == rmin) {
      if (pi_out) *pi_out = 0.0;
      return f(0.0);
    }
    return golden_max(f, -w / (rmax - 1.0), w / (1.0 - rmin), opt_.golden_iterations, pi_out);
  }

  void build_primal() {
    phi_grid_.assign(T_, {});
    for (std::size_t t = T_; t-- > 1;) {
      phi_grid_[t].resize(tree_.n_nodes(t));
      for (std::size_t i = 0; i < tree_.n_nodes(t); ++i) {
        const double c = hedge_.node_cost[t][i];
        auto& g = phi_grid_[t][i];
        g.resize(opt_.grid_points);
        for (std::size_t k = 0; k < g.size(); ++k) {
          const double w = c * static_cast<double>(k) / static_cast<double>(g.size() - 1);
          g[k] = c > 0.0 ? phi_opt(t, i, w, nullptr) : cap_value_[t][i];
        }
      }
    }
  }

  // ---- dual ---------------------------------------------------------------------------

  double k_value(std::size_t t, std::size_t i, double eta) const {
    if (t == T_) return u_.conjugate(eta, u_.cap(tree_.price(T_, i)));
    const auto& g = k_grid_[t][i];
    if (eta <= 0.0) return g[0];
    if (eta >= eta_max_[t]) return 0.0;
    const double lo = eta_min_[t];
    if (eta < lo) return g[0] + eta / lo * (g[1] - g[0]);
    const double pos = std::log(eta / lo) / log_ratio_[t];
    auto k = std::min(static_cast<std::size_t>(pos), g.size() - 3);
    double x0 = eta_node(t, k), x1 = eta_node(t, k + 1);
    if (eta < x0 && k > 0) --k, x1 = x0, x0 = eta_node(t, k);
    if (eta > x1 && k + 3 < g.size()) ++k, x0 = x1, x1 = eta_node(t, k + 1);
    const double frac = std::clamp((eta - x0) / (x1 - x0), 0.0, 1.0);
    return g[k + 1] + frac * (g[k + 2] - g[k + 1]);
  }

  // min over the risk-neutral polytope; writes the minimizing q.
  double k_opt(std::size_t t, std::size_t i, double eta, std::vector<double>* q_out) const {
    const auto& br = tree_.layer(t).branches;
    const auto& vs = tree_.vertices(t);
    const std::size_t n = br.size();
    std::vector<double> weights(vs.size(), 1.0 / static_cast<double>(vs.size())), q(n);
    auto eval = [&](const std::vector<double>& wts) {
      for (std::size_t j = 0; j < n; ++j) {
        q[j] = 0.0;
        for (std::size_t v = 0; v < vs.size(); ++v) q[j] += wts[v] * vs[v][j];
      }
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        s += br[j].p * k_value(t + 1, tree_.child(t, i, j), eta * q[j] / br[j].p);
      return s;
    };
    double best = eval(weights);
    if (vs.size() == 2) {
      double lam = 0.5;
      best = -golden_max(
          [&](double l) { return -eval({l, 1.0 - l}); }, 0.0, 1.0, opt_.golden_iterations, &lam);
      weights = {lam, 1.0 - lam};
    } else if (vs.size() > 2) {
      // Pairwise mass transfers; the objective is convex in the weights.
      for (int sweep = 0; sweep < 50; ++sweep) {
        const double before = best;
        for (std::size_t a = 0; a < vs.size(); ++a) {
          for (std::size_t b = a + 1; b < vs.size(); ++b) {
            const double total = weights[a] + weights[b];
            if (total <= 0.0) continue;
            auto trial = weights;
            double lam = 0.0;
            const double v = -golden_max(
                [&](double l) {
                  trial[a] = l * total;
                  trial[b] = (1.0 - l) * total;
                  return -eval(trial);
                },
                0.0, 1.0, opt_.golden_iterations, &lam);
            if (v < best) {
              best = v;
              weights[a] = lam * total;
              weights[b] = (1.0 - lam) * total;
            }
          }
        }
        if (before - best <= 1e-15 * std::max(1.0, std::abs(best))) break;
      }
    }
    if (q_out) {
      q_out->assign(n, 0.0);
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t v = 0; v < vs.size(); ++v) (*q_out)[j] += weights[v] * vs[v][j];
    }
    return eval(weights);
  }

  // Above eta_max(t) every leaf sees y xi >= L'(H_max), where Ũ = U(0) = 0.
  void build_dual() {
    const double y_flat = u_.loss().derivative(std::max(h_max_, 1e-300)) * (1.0 + 1e-9) + 1e-300;
    eta_max_.assign(T_ + 1, 0.0);
    eta_min_.assign(T_ + 1, 0.0);
    log_ratio_.assign(T_ + 1, 0.0);
    double m = 1.0;
    for (std::size_t t = T_; t-- > 0;) {
      const auto& br = tree_.layer(t).branches;
      const auto& vs = tree_.vertices(t);
      double worst = kInf;
      for (std::size_t j = 0; j < br.size(); ++j) {
        double qc = 0.0;
        for (const auto& v : vs) qc += v[j] / static_cast<double>(vs.size());
        worst = std::min(worst, qc / br[j].p);
      }
      // A zero centroid weight means no interior measure; fall back to a wide grid.
      m *= worst > 0.0 ? worst : 1e-6;
      eta_max_[t] = y_flat / m;
      eta_min_[t] = eta_max_[t] * 1e-6;
      log_ratio_[t] = std::log(eta_max_[t] / eta_min_[t]) / static_cast<double>(opt_.grid_points - 1);
    }
    k_grid_.assign(T_, {});
    for (std::size_t t = T_; t-- > 1;) {
      k_grid_[t].resize(tree_.n_nodes(t));
      for (std::size_t i = 0; i < tree_.n_nodes(t); ++i) {
        auto& g = k_grid_[t][i];
        g.resize(opt_.grid_points + 1);
        g[0] = k_opt(t, i, 0.0, nullptr);
        for (std::size_t k = 0; k < opt_.grid_points; ++k) g[k + 1] = k_opt(t, i, eta_node(t, k), nullptr);
      }
    }
  }

  double eta_node(std::size_t t, std::size_t k) const {
    return eta_min_[t] * std::exp(log_ratio_[t] * static_cast<double>(k));
  }
  double eta_max(std::size_t t) const { return eta_max_[t]; }

 private:
  const TreeMarket& tree_;
  const StateUtility& u_;
  TreeOracleOptions opt_;
  std::size_t T_;
  SuperHedgeResult hedge_;
  std::vector<std::vector<double>> cap_value_;
  double h_max_ = 0.0;
  std::vector<std::vector<std::vector<double>>> phi_grid_;
  std::vector<std::vector<std::vector<double>>> k_grid_;
  std::vector<double> eta_max_, eta_min_, log_ratio_;
};

template <typename Visit>
void for_each_path(const TreeMarket& tree, std::size_t t, std::size_t node, double prob,
                   std::vector<std::size_t>& branches, Visit&& visit) {
  if (t == tree.depth()) {
    visit(node, prob, branches);
    return;
  }
  const auto& br = tree.layer(t).branches;
  for (std::size_t j = 0; j < br.size(); ++j) {
    branches.push_back(j);
    for_each_path(tree, t + 1, tree.child(t, node, j), prob * br[j].p, branches, visit);
    branches.pop_back();
  }
}

inline PrimalTreeResult replay_primal(const TreeMarket& tree, const StateUtility& u,
                                      const TreeProgram& prog, PrimalTreeResult out) {
  const std::size_t T = tree.depth();
  std::vector<std::size_t> branches;
  double total = 0.0;
  for_each_path(tree, 0, 0, 1.0, branches, [&](std::size_t leaf, double prob, const auto& path) {
    TreePath rec;
    rec.probability = prob;
    double w = out.z;
    std::size_t node = 0;
    for (std::size_t t = 0; t < T; ++t) {
      const double s = tree.price(t, node);
      const double r = tree.layer(t).branches[path[t]].r;
      double pi = 0.0;
      if (w >= prog.hedge().node_cost[t][node]) {
        pi = prog.hedge().shares[t][node] * s;  // cap reached: follow the super-hedge
      } else {
        prog.phi_opt(t, node, w, &pi);
      }
      rec.beta.push_back(w > 0.0 ? pi / w : 0.0);
      w = std::max(0.0, w + pi * (r - 1.0));
      node = tree.child(t, node, path[t]);
    }
    rec.terminal_price = tree.price(T, leaf);
    rec.claim = u.cap(rec.terminal_price);
    rec.wealth = w;
    total += prob * u.value(w, rec.claim);
    out.paths.push_back(std::move(rec));
  });
  out.value = total;
  out.replayed = true;
  return out;
}

}  // namespace detail

/// max E[U(V_T)] over self-financing strategies from wealth z.
inline PrimalTreeResult solve_primal_exact(const TreeMarket& tree, const StateUtility& u, double z,
                                           const TreeOracleOptions& opt = {}) {
  if (!(z > 0.0) || !std::isfinite(z)) throw ValidationError("solve_primal_exact: z must be > 0");
  detail::TreeProgram prog(tree, u, opt);
  PrimalTreeResult out;
  out.z = z;
  out.super_hedge_cost = prog.hedge().cost;
  out.capped = z >= prog.hedge().cost;
  const bool replay = tree.path_count() <= opt.path_limit;
  // The replay may dip a rounding error below the hedge capital, so it needs the tables too.
  if (!out.capped || replay) prog.build_primal();
  out.dp_value = out.value = out.capped ? prog.claim_utility() : prog.phi_opt(0, 0, z, nullptr);
  if (replay) out = detail::replay_primal(tree, u, prog, std::move(out));
  return out;
}

/// min_y { v(y) + z y } with v(y) = min over s dQ/dP, s in [0, 1], of E[Ũ(y s dQ/dP)].
inline DualTreeResult solve_dual_exact(const TreeMarket& tree, const StateUtility& u, double z,
                                       const TreeOracleOptions& opt = {}) {
  if (!(z > 0.0) || !std::isfinite(z)) throw ValidationError("solve_dual_exact: z must be > 0");
  const auto primal = solve_primal_exact(tree, u, z, opt);
  if (primal.capped)
    throw SuperHedgingRegion("z is at or above the super-hedging cost; u(z) = E[U(H)]", primal.value);
  detail::TreeProgram prog(tree, u, opt);
  prog.build_dual();
  DualTreeResult out;
  out.z = z;
  out.primal_value = primal.value;
  auto v = [&](double y) { return prog.k_opt(0, 0, y, nullptr); };
  double y = 0.0;
  detail::golden_max([&](double yy) { return -(v(yy) + z * yy); }, 0.0, prog.eta_max(0),
                     opt.golden_iterations, &y);
  // Slack s: v is non-increasing, so s = 1 unless the minimum is flat.
  double s = 1.0;
  const double f1 = v(y);
  detail::golden_max([&](double ss) { return -v(ss * y); }, 0.0, 1.0, opt.golden_iterations, &s);
  if (!(v(s * y) < f1)) s = 1.0;
  out.slack = s;
  y *= s;

  if (tree.path_count() <= opt.path_limit) {
    // Replay the dual policy: xi_T = prod q_j / p_j along each path.
    std::vector<std::size_t> branches;
    std::vector<double> q;
    detail::for_each_path(tree, 0, 0, 1.0, branches, [&](std::size_t leaf, double prob, const auto& path) {
      TreePath rec;
      rec.probability = prob;
      double xi = 1.0;
      std::size_t node = 0;
      for (std::size_t t = 0; t < tree.depth(); ++t) {
        prog.k_opt(t, node, y * xi, &q);
        xi *= q[path[t]] / tree.layer(t).branches[path[t]].p;
        node = tree.child(t, node, path[t]);
      }
      rec.deflator = xi;
      rec.terminal_price = tree.price(tree.depth(), leaf);
      rec.claim = u.cap(rec.terminal_price);
      out.paths.push_back(std::move(rec));
    });
    auto budget = [&](double yy) {
      double b = 0.0;
      for (const auto& p : out.paths) b += p.probability * p.deflator * u.inverse_capped(yy * p.deflator, p.claim);
      return b;
    };
    // Exact budget for the recovered density: bisection in y (budget is nonincreasing).
    double lo = y, hi = y;
    for (int i = 0; i < 200 && budget(lo) < z; ++i) lo *= 0.5;
    for (int i = 0; i < 200 && budget(hi) > z; ++i) hi = hi * 2.0 + 1e-300;
    if (budget(lo) >= z && budget(hi) <= z) {
      for (int it = 0; it < 300; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mid == lo || mid == hi) break;
        (budget(mid) > z ? lo : hi) = mid;
      }
      y = std::abs(budget(lo) - z) <= std::abs(budget(hi) - z) ? lo : hi;
    }
    double val = 0.0;
    for (auto& p : out.paths) {
      val += p.probability * u.conjugate(y * p.deflator, p.claim);
      p.wealth = u.inverse_capped(y * p.deflator, p.claim);
    }
    out.v_value = val;
    out.budget_residual = std::abs(budget(y) - z);
    out.replayed = true;
  } else {
    out.v_value = v(y);
  }
  out.y = y;
  out.bound = out.v_value + z * y;
  out.gap = std::abs(out.bound - out.primal_value);
  return out;
}

/// Tree dual value v(y) at a given y (no outer minimization).
inline double tree_dual_value(const TreeMarket& tree, const StateUtility& u, double y,
                              const TreeOracleOptions& opt = {}) {
  if (!(y >= 0.0)) throw ValidationError("tree_dual_value: y must be >= 0");
  detail::TreeProgram prog(tree, u, opt);
  prog.build_dual();
  return prog.k_opt(0, 0, y, nullptr);
}

}  // namespace levydual
