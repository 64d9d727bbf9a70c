#include "agentmixer/equilibrium.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "agentmixer/tensor.hpp"

namespace agentmixer {

namespace {

std::vector<std::size_t> strides_of(const std::vector<std::size_t>& n) {
  std::vector<std::size_t> s(n.size(), 1);
  for (std::size_t i = n.size(); i-- > 1;) s[i - 1] = s[i] * n[i];
  return s;
}

std::size_t coord(std::size_t joint, const std::vector<std::size_t>& strides,
                  const std::vector<std::size_t>& n, std::size_t agent) {
  return (joint / strides[agent]) % n[agent];
}

void check_shapes(const NormalFormGame& game, const JointDistributionTable& joint) {
  if (game.n_actions != joint.n_actions) {
    throw DimensionError("joint distribution table does not match the game's action sets");
  }
  std::size_t n = 1;
  for (std::size_t k : game.n_actions) n *= k;
  if (game.payoff.size() != n || joint.probs.size() != n) {
    throw DimensionError("payoff/probability table sizes do not match the action sets");
  }
}

double kl_floored(std::span<const double> p, std::span<const double> q) {
  double kl = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k] <= 0.0) continue;
    const double lq = q[k] > 0.0 ? std::max(std::log(q[k]), -30.0) : -30.0;
    kl += p[k] * (std::log(p[k]) - lq);
  }
  return std::max(kl, 0.0);
}

}  // namespace

// ---------------------------------------------------------------------------
// games

NormalFormGame NormalFormGame::two_player(const std::vector<std::vector<double>>& matrix) {
  NormalFormGame g;
  if (matrix.empty()) throw ConfigError("empty payoff matrix");
  g.n_actions = {matrix.size(), matrix[0].size()};
  for (const auto& row : matrix) {
    if (row.size() != matrix[0].size()) throw ConfigError("ragged payoff matrix");
    g.payoff.insert(g.payoff.end(), row.begin(), row.end());
  }
  return g;
}

double NormalFormGame::range() const {
  const auto [lo, hi] = std::minmax_element(payoff.begin(), payoff.end());
  return *hi - *lo;
}

JointDistributionTable JointDistributionTable::point_mass(const std::vector<std::size_t>& n_actions,
                                                          const std::vector<std::size_t>& action) {
  JointDistributionTable t;
  t.n_actions = n_actions;
  std::size_t n = 1;
  for (std::size_t k : n_actions) n *= k;
  t.probs.assign(n, 0.0);
  const auto s = strides_of(n_actions);
  std::size_t idx = 0;
  for (std::size_t i = 0; i < action.size(); ++i) idx += action[i] * s[i];
  t.probs.at(idx) = 1.0;
  return t;
}

JointDistributionTable JointDistributionTable::product(const std::vector<std::vector<double>>& marginals) {
  JointDistributionTable t;
  for (const auto& m : marginals) t.n_actions.push_back(m.size());
  std::size_t n = 1;
  for (std::size_t k : t.n_actions) n *= k;
  t.probs.assign(n, 1.0);
  const auto s = strides_of(t.n_actions);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < marginals.size(); ++i) t.probs[j] *= marginals[i][coord(j, s, t.n_actions, i)];
  return t;
}

JointDistributionTable JointDistributionTable::uniform(const std::vector<std::size_t>& n_actions) {
  std::vector<std::vector<double>> m;
  for (std::size_t k : n_actions) m.emplace_back(k, 1.0 / static_cast<double>(k));
  return product(m);
}

std::vector<double> JointDistributionTable::marginal(std::size_t agent) const {
  const auto s = strides_of(n_actions);
  std::vector<double> m(n_actions.at(agent), 0.0);
  for (std::size_t j = 0; j < probs.size(); ++j) m[coord(j, s, n_actions, agent)] += probs[j];
  return m;
}

void JointDistributionTable::validate() const {
  double total = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw ContractError("joint distribution has a negative entry");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-12) throw ContractError("joint distribution does not sum to 1");
}

double value_of_joint(const NormalFormGame& game, const JointDistributionTable& joint) {
  check_shapes(game, joint);
  double v = 0.0;
  for (std::size_t j = 0; j < game.payoff.size(); ++j) v += joint.probs[j] * game.payoff[j];
  return v;
}

double deviation_gain(const NormalFormGame& game, const JointDistributionTable& joint,
                      const StrategyModification& f) {
  check_shapes(game, joint);
  const std::size_t i = f.agent;
  if (i >= game.n_agents() || f.map.size() != game.n_actions[i]) {
    throw DimensionError("strategy modification does not match the agent's action set");
  }
  const auto s = strides_of(game.n_actions);
  double gain = 0.0;
  for (std::size_t j = 0; j < game.payoff.size(); ++j) {
    if (joint.probs[j] == 0.0) continue;
    const std::size_t k = coord(j, s, game.n_actions, i);
    const std::size_t fk = f.map[k];
    if (fk >= game.n_actions[i]) throw DimensionError("strategy modification maps outside the action set");
    const std::size_t moved = j - k * s[i] + fk * s[i];
    gain += joint.probs[j] * (game.payoff[moved] - game.payoff[j]);
  }
  return gain;
}

CeGap ce_gap(const NormalFormGame& game, const JointDistributionTable& joint) {
  check_shapes(game, joint);
  const auto s = strides_of(game.n_actions);
  CeGap best;
  best.epsilon = -std::numeric_limits<double>::infinity();
  std::size_t best_moved = 0;
  for (std::size_t i = 0; i < game.n_agents(); ++i) {
    const std::size_t K = game.n_actions[i];
    if (K > 8) {
      throw ContractError("ce_gap refuses agents with more than 8 actions (" + std::to_string(K) +
                          "^" + std::to_string(K) + " modifications)");
    }
    // g[k][k'] = expected gain from playing k' whenever k was recommended
    std::vector<double> g(K * K, 0.0);
    for (std::size_t j = 0; j < game.payoff.size(); ++j) {
      if (joint.probs[j] == 0.0) continue;
      const std::size_t k = coord(j, s, game.n_actions, i);
      for (std::size_t k2 = 0; k2 < K; ++k2) {
        const std::size_t moved = j - k * s[i] + k2 * s[i];
        g[k * K + k2] += joint.probs[j] * (game.payoff[moved] - game.payoff[j]);
      }
    }
    std::vector<std::size_t> f(K, 0);
    while (true) {
      double gain = 0.0;
      std::size_t moved = 0;
      for (std::size_t k = 0; k < K; ++k) {
        gain += g[k * K + f[k]];
        moved += f[k] != k ? 1 : 0;
      }
      const bool better = gain > best.epsilon + 1e-12 ||
                          (std::abs(gain - best.epsilon) <= 1e-12 && moved < best_moved);
      if (better) {
        best.epsilon = gain;
        best.witness = {i, f};
        best_moved = moved;
      }
      bool wrapped = true;
      for (std::size_t pos = K; pos-- > 0;) {
        if (++f[pos] < K) {
          wrapped = false;
          break;
        }
        f[pos] = 0;
      }
      if (wrapped) break;
    }
  }
  best.epsilon = std::max(best.epsilon, 0.0);
  return best;
}

DeviationGap nash_gap(const NormalFormGame& game, const std::vector<std::vector<double>>& marginals) {
  if (marginals.size() != game.n_agents()) throw DimensionError("one marginal per agent required");
  for (std::size_t i = 0; i < marginals.size(); ++i) {
    if (marginals[i].size() != game.n_actions[i]) {
      throw DimensionError("marginal of agent " + std::to_string(i) + " has the wrong size");
    }
  }
  const auto s = strides_of(game.n_actions);
  double v = 0.0;
  for (std::size_t j = 0; j < game.payoff.size(); ++j) {
    double p = 1.0;
    for (std::size_t i = 0; i < marginals.size(); ++i) p *= marginals[i][coord(j, s, game.n_actions, i)];
    v += p * game.payoff[j];
  }
  DeviationGap best;
  best.epsilon = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < game.n_agents(); ++i) {
    // value of pure action k for agent i against the others' marginals
    std::vector<double> br(game.n_actions[i], 0.0);
    for (std::size_t j = 0; j < game.payoff.size(); ++j) {
      double p = 1.0;
      for (std::size_t o = 0; o < marginals.size(); ++o)
        if (o != i) p *= marginals[o][coord(j, s, game.n_actions, o)];
      br[coord(j, s, game.n_actions, i)] += p * game.payoff[j];
    }
    for (std::size_t k = 0; k < br.size(); ++k)
      if (br[k] - v > best.epsilon + 1e-12) best = {br[k] - v, i, k};
  }
  best.epsilon = std::max(best.epsilon, 0.0);
  return best;
}

DeviationGap cce_gap(const NormalFormGame& game, const JointDistributionTable& joint) {
  check_shapes(game, joint);
  const double v = value_of_joint(game, joint);
  const auto s = strides_of(game.n_actions);
  DeviationGap best;
  best.epsilon = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < game.n_agents(); ++i) {
    for (std::size_t k2 = 0; k2 < game.n_actions[i]; ++k2) {
      double dv = 0.0;
      for (std::size_t j = 0; j < game.payoff.size(); ++j) {
        if (joint.probs[j] == 0.0) continue;
        const std::size_t k = coord(j, s, game.n_actions, i);
        dv += joint.probs[j] * game.payoff[j - k * s[i] + k2 * s[i]];
      }
      if (dv - v > best.epsilon + 1e-12) best = {dv - v, i, k2};
    }
  }
  best.epsilon = std::max(best.epsilon, 0.0);
  return best;
}

EquilibriumReport analyze_product(const NormalFormGame& game,
                                  const std::vector<std::vector<double>>& marginals) {
  const JointDistributionTable joint = JointDistributionTable::product(marginals);
  EquilibriumReport r;
  r.value = value_of_joint(game, joint);
  r.normalization = game.range() > 0.0 ? game.range() : 1.0;
  r.ne = nash_gap(game, marginals);
  r.cce = cce_gap(game, joint);
  r.ce = ce_gap(game, joint);
  r.epsilon_ne = r.ne.epsilon;
  r.epsilon_cce = r.cce.epsilon;
  r.epsilon_ce = r.ce.epsilon;
  return r;
}

std::string EquilibriumReport::to_json() const {
  nlohmann::json j;
  j["value"] = value;
  j["normalization"] = normalization;
  j["epsilon_ne"] = epsilon_ne;
  j["epsilon_ce"] = epsilon_ce;
  j["epsilon_cce"] = epsilon_cce;
  j["epsilon_ne_normalized"] = epsilon_ne / normalization;
  j["epsilon_ce_normalized"] = epsilon_ce / normalization;
  j["epsilon_cce_normalized"] = epsilon_cce / normalization;
  j["witnesses"] = {
      {"ne", {{"agent", ne.agent}, {"action", ne.action}}},
      {"cce", {{"agent", cce.agent}, {"action", cce.action}}},
      {"ce", {{"agent", ce.witness.agent}, {"map", ce.witness.map}}},
  };
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// tabular POMDPs

void TabularPomdp::validate() const {
  if (T.size() != n_states * n_actions * n_states || R.size() != n_states * n_actions ||
      O.size() != n_states * n_obs || rho0.size() != n_states) {
    throw DimensionError("tabular POMDP tables do not match its sizes");
  }
  for (std::size_t s = 0; s < n_states; ++s) {
    for (std::size_t a = 0; a < n_actions; ++a) {
      double row = 0.0;
      for (std::size_t s2 = 0; s2 < n_states; ++s2) row += t(s, a, s2);
      if (std::abs(row - 1.0) > 1e-12) throw ContractError("transition row is not stochastic");
    }
    double orow = 0.0;
    for (std::size_t o2 = 0; o2 < n_obs; ++o2) orow += o(s, o2);
    if (std::abs(orow - 1.0) > 1e-12) throw ContractError("observation row is not stochastic");
  }
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ContractError("discount must lie in [0, 1)");
}

IceLake ice_lake_tabular(bool fully_observable, double gamma) {
  IceLake lake;
  TabularPomdp& m = lake.pomdp;
  const std::size_t cells = IceLake::kCols * IceLake::kRows;
  m.n_states = 2 * cells + 1;
  m.n_actions = 4;
  m.n_obs = fully_observable ? m.n_states : cells + 1;
  m.gamma = gamma;
  m.T.assign(m.n_states * m.n_actions * m.n_states, 0.0);
  m.R.assign(m.n_states * m.n_actions, 0.0);
  m.O.assign(m.n_states * m.n_obs, 0.0);
  m.rho0.assign(m.n_states, 0.0);
  const std::size_t term = lake.terminal();
  auto is_pit = [](int x, int y, int pit) { return y == 1 && (pit == 0 ? (x == 1 || x == 2) : (x == 2 || x == 3)); };
  constexpr int dx[4] = {0, 0, -1, 1};
  constexpr int dy[4] = {1, -1, 0, 0};
  for (int pit = 0; pit < 2; ++pit) {
    for (int y = 0; y < IceLake::kRows; ++y) {
      for (int x = 0; x < IceLake::kCols; ++x) {
        const std::size_t s = lake.state_of(x, y, pit);
        const std::size_t obs = fully_observable ? s : static_cast<std::size_t>(y * IceLake::kCols + x);
        m.O[s * m.n_obs + obs] = 1.0;
        for (std::size_t a = 0; a < 4; ++a) {
          int nx = x + dx[a], ny = y + dy[a];
          if (nx < 0 || ny < 0 || nx >= IceLake::kCols || ny >= IceLake::kRows) {
            nx = x;
            ny = y;
          }
          std::size_t next = lake.state_of(nx, ny, pit);
          double reward = 0.0;
          if (is_pit(nx, ny, pit)) {
            next = term;
            reward = -10.0;
          } else if (ny == IceLake::kRows - 1) {
            next = term;
            reward = 10.0;
          }
          m.T[(s * 4 + a) * m.n_states + next] = 1.0;
          m.R[s * 4 + a] = reward;
        }
      }
    }
    m.rho0[lake.state_of(2, 0, pit)] = 0.5;
  }
  for (std::size_t a = 0; a < 4; ++a) m.T[(term * 4 + a) * m.n_states + term] = 1.0;
  m.O[term * m.n_obs + (m.n_obs - 1)] = 1.0;
  m.validate();
  return lake;
}

ValueIterationResult value_iteration(const TabularPomdp& m, double tol) {
  ValueIterationResult res;
  res.value.assign(m.n_states, 0.0);
  std::vector<double> q(m.n_actions);
  for (int it = 0; it < 100000; ++it) {
    double delta = 0.0;
    std::vector<double> next(m.n_states);
    for (std::size_t s = 0; s < m.n_states; ++s) {
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < m.n_actions; ++a) {
        double v = m.r(s, a);
        for (std::size_t s2 = 0; s2 < m.n_states; ++s2) v += m.gamma * m.t(s, a, s2) * res.value[s2];
        best = std::max(best, v);
      }
      next[s] = best;
      delta = std::max(delta, std::abs(best - res.value[s]));
    }
    res.value = std::move(next);
    if (delta < tol) break;
  }
  res.policy.assign(m.n_states, std::vector<double>(m.n_actions, 0.0));
  for (std::size_t s = 0; s < m.n_states; ++s) {
    std::size_t best_a = 0;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < m.n_actions; ++a) {
      double v = m.r(s, a);
      for (std::size_t s2 = 0; s2 < m.n_states; ++s2) v += m.gamma * m.t(s, a, s2) * res.value[s2];
      if (v > best + 1e-12) {
        best = v;
        best_a = a;
      }
    }
    res.policy[s][best_a] = 1.0;
  }
  return res;
}

namespace {

double l1(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += std::abs(a[i] - b[i]);
  return d;
}

constexpr double kBeliefMerge = 1e-10;

std::size_t find_belief(const std::vector<std::vector<double>>& beliefs, std::span<const double> b) {
  for (std::size_t i = 0; i < beliefs.size(); ++i)
    if (l1(beliefs[i], b) <= kBeliefMerge) return i;
  return beliefs.size();
}

}  // namespace

std::vector<double> BeliefPolicy::operator()(std::span<const double> belief) const {
  const std::size_t i = find_belief(beliefs, belief);
  if (i < beliefs.size()) return probs[i];
  if (!fallback) throw ContractError("belief policy has no entry or fallback for this belief");
  return fallback(belief);
}

BeliefPolicy BeliefPolicy::uniform(std::size_t n_actions) {
  BeliefPolicy p;
  p.fallback = [n_actions](std::span<const double>) {
    return std::vector<double>(n_actions, 1.0 / static_cast<double>(n_actions));
  };
  return p;
}

std::vector<double> BeliefOccupancy::conditional(std::size_t b) const {
  std::vector<double> c = joint.at(b);
  const double m = marginal[b];
  for (double& x : c) x = m > 0.0 ? x / m : 0.0;
  return c;
}

double BeliefOccupancy::total_mass() const {
  double t = 0.0;
  for (double m : marginal) t += m;
  return t;
}

std::size_t occupancy_cutoff(double gamma) {
  if (gamma <= 0.0) return 1;
  std::size_t T = 1;
  double g = gamma;
  while (!(g < 1e-8 && g / (1.0 - gamma) < 1e-9)) {
    g *= gamma;
    ++T;
  }
  return T;
}

BeliefOccupancy belief_occupancy(const TabularPomdp& m, const BeliefPolicy& policy,
                                 std::size_t horizon_cutoff, std::size_t max_beliefs) {
  const std::size_t T = horizon_cutoff ? horizon_cutoff : occupancy_cutoff(m.gamma);
  BeliefOccupancy occ;
  occ.horizon = T;
  const std::size_t S = m.n_states;

  auto intern = [&](std::vector<double> b) {
    const std::size_t i = find_belief(occ.beliefs, b);
    if (i == occ.beliefs.size()) {
      if (occ.beliefs.size() >= max_beliefs) {
        throw ContractError("belief enumeration exceeded " + std::to_string(max_beliefs) + " points");
      }
      occ.beliefs.push_back(std::move(b));
      occ.joint.emplace_back(S, 0.0);
      occ.marginal.push_back(0.0);
    }
    return i;
  };

  // frontier: belief index -> P(s_t = s, b_t = b)
  std::vector<std::pair<std::size_t, std::vector<double>>> frontier;
  auto add_mass = [&](std::vector<std::pair<std::size_t, std::vector<double>>>& f, std::size_t b,
                      const std::vector<double>& mass) {
    for (auto& [idx, v] : f) {
      if (idx == b) {
        for (std::size_t s = 0; s < S; ++s) v[s] += mass[s];
        return;
      }
    }
    f.emplace_back(b, mass);
  };
  for (std::size_t o = 0; o < m.n_obs; ++o) {
    std::vector<double> mass(S, 0.0);
    double total = 0.0;
    for (std::size_t s = 0; s < S; ++s) total += (mass[s] = m.rho0[s] * m.o(s, o));
    if (total <= 0.0) continue;
    std::vector<double> b(mass);
    for (double& x : b) x /= total;
    add_mass(frontier, intern(std::move(b)), mass);
  }

  double discount = 1.0;
  std::vector<double> next_mass(S);
  for (std::size_t t = 0; t < T; ++t) {
    for (const auto& [b, mass] : frontier) {
      for (std::size_t s = 0; s < S; ++s) occ.joint[b][s] += discount * mass[s];
    }
    if (t + 1 == T) break;
    std::vector<std::pair<std::size_t, std::vector<double>>> next;
    for (const auto& [b, mass] : frontier) {
      const std::vector<double> pi = policy(occ.beliefs[b]);
      for (std::size_t a = 0; a < m.n_actions; ++a) {
        if (pi[a] <= 0.0) continue;
        std::vector<double> moved(S, 0.0);
        for (std::size_t s = 0; s < S; ++s) {
          if (mass[s] == 0.0) continue;
          for (std::size_t s2 = 0; s2 < S; ++s2) moved[s2] += mass[s] * pi[a] * m.t(s, a, s2);
        }
        for (std::size_t o = 0; o < m.n_obs; ++o) {
          double total = 0.0;
          for (std::size_t s2 = 0; s2 < S; ++s2) total += (next_mass[s2] = moved[s2] * m.o(s2, o));
          if (total <= 0.0) continue;
          std::vector<double> nb(next_mass);
          for (double& x : nb) x /= total;
          add_mass(next, intern(std::move(nb)), next_mass);
        }
      }
    }
    frontier = std::move(next);
    discount *= m.gamma;
  }
  for (std::size_t b = 0; b < occ.beliefs.size(); ++b)
    occ.marginal[b] = std::accumulate(occ.joint[b].begin(), occ.joint[b].end(), 0.0);
  return occ;
}

BeliefPolicy implicit_product_policy(const BeliefOccupancy& occ, const StatePolicy& pi_theta,
                                     const BeliefPolicy& outside) {
  BeliefPolicy out;
  const std::size_t A = pi_theta.at(0).size();
  for (std::size_t b = 0; b < occ.beliefs.size(); ++b) {
    if (occ.marginal[b] <= 0.0) continue;
    const std::vector<double> w = occ.conditional(b);
    std::vector<double> p(A, 0.0);
    for (std::size_t s = 0; s < w.size(); ++s) {
      if (w[s] == 0.0) continue;
      for (std::size_t a = 0; a < A; ++a) p[a] += w[s] * pi_theta[s][a];
    }
    out.beliefs.push_back(occ.beliefs[b]);
    out.probs.push_back(std::move(p));
  }
  out.fallback = [outside](std::span<const double> b) { return outside(b); };
  return out;
}

double total_variation(std::span<const double> p, std::span<const double> q) {
  return 0.5 * l1(p, q);
}

double max_tv_on(const BeliefOccupancy& occ, const BeliefPolicy& a, const BeliefPolicy& b) {
  double worst = 0.0;
  for (const auto& belief : occ.beliefs) worst = std::max(worst, total_variation(a(belief), b(belief)));
  return worst;
}

DistillTrace distill_fixed_point(const TabularPomdp& m, const StatePolicy& pi_theta,
                                 const BeliefPolicy& init, std::size_t max_iters, double tol) {
  DistillTrace trace;
  BeliefPolicy current = init;
  for (std::size_t k = 0; k < max_iters; ++k) {
    const BeliefOccupancy occ = belief_occupancy(m, current);
    BeliefPolicy next = implicit_product_policy(occ, pi_theta, current);
    const double tv = max_tv_on(occ, next, current);
    trace.tv.push_back(tv);
    trace.iterations = k + 1;
    // Beliefs the current iterate no longer reaches keep their previous action
    // distribution; flattening the table avoids a growing chain of fallbacks.
    for (std::size_t i = 0; i < current.beliefs.size(); ++i) {
      if (find_belief(next.beliefs, current.beliefs[i]) == next.beliefs.size()) {
        next.beliefs.push_back(current.beliefs[i]);
        next.probs.push_back(current.probs[i]);
      }
    }
    next.fallback = init.fallback;
    current = std::move(next);
    if (tv < tol) {
      trace.converged = true;
      break;
    }
  }
  trace.policy = std::move(current);
  return trace;
}

IdentifiabilityResult identifiability_check(const TabularPomdp& m, const StatePolicy& pi_theta,
                                            const BeliefPolicy& pi_phi, double tol) {
  const BeliefOccupancy occ = belief_occupancy(m, pi_phi);
  double total = 0.0, weighted = 0.0;
  for (std::size_t b = 0; b < occ.beliefs.size(); ++b) {
    const std::vector<double> q = pi_phi(occ.beliefs[b]);
    for (std::size_t s = 0; s < m.n_states; ++s) {
      const double w = occ.joint[b][s];
      if (w == 0.0) continue;
      weighted += w * kl_floored(pi_theta[s], q);
      total += w;
    }
  }
  IdentifiabilityResult r;
  r.residual_kl = total > 0.0 ? weighted / total : 0.0;
  r.identifiable = r.residual_kl <= tol;
  return r;
}

}  // namespace agentmixer
