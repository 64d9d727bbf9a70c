#include <doctest.h>

#include <cmath>
#include <queue>

#include "agentmixer/envs.hpp"
#include "agentmixer/equilibrium.hpp"

using namespace agentmixer;

namespace {

NormalFormGame climbing() { return NormalFormGame::two_player(default_climbing_payoff()); }

// Brute force over every strategy modification of every agent.
double brute_force_ce(const NormalFormGame& g, const JointDistributionTable& j) {
  double best = 0.0;
  for (std::size_t i = 0; i < g.n_agents(); ++i) {
    const std::size_t K = g.n_actions[i];
    std::size_t maps = 1;
    for (std::size_t k = 0; k < K; ++k) maps *= K;
    for (std::size_t code = 0; code < maps; ++code) {
      StrategyModification f{i, std::vector<std::size_t>(K)};
      std::size_t rest = code;
      for (std::size_t k = 0; k < K; ++k) {
        f.map[k] = rest % K;
        rest /= K;
      }
      best = std::max(best, deviation_gain(g, j, f));
    }
  }
  return best;
}

std::vector<double> random_simplex(std::size_t k, Rng& rng) {
  std::vector<double> p(k);
  double t = 0.0;
  for (double& x : p) t += (x = rng.uniform() + 1e-3);
  for (double& x : p) x /= t;
  return p;
}

}  // namespace

TEST_CASE("value of point-mass, uniform and zero-payoff joints") {
  const NormalFormGame g = climbing();
  CHECK(value_of_joint(g, JointDistributionTable::point_mass({3, 3}, {0, 0})) == 11.0);
  double avg = 0.0;
  for (double v : g.payoff) avg += v / 9.0;
  CHECK(value_of_joint(g, JointDistributionTable::uniform({3, 3})) == doctest::Approx(avg).epsilon(1e-14));
  CHECK(avg == doctest::Approx(-31.0 / 9.0));
  NormalFormGame zero = NormalFormGame::two_player({{0, 0}, {0, 0}});
  Rng rng(1);
  CHECK(value_of_joint(zero, JointDistributionTable::product({random_simplex(2, rng), random_simplex(2, rng)})) == 0.0);
}

TEST_CASE("the optimal point mass is a correlated equilibrium") {
  const CeGap gap = ce_gap(climbing(), JointDistributionTable::point_mass({3, 3}, {0, 0}));
  CHECK(gap.epsilon == 0.0);
}

TEST_CASE("point mass on (2,2) is beaten by moving the second agent to action 1") {
  const NormalFormGame g = climbing();
  const JointDistributionTable j = JointDistributionTable::point_mass({3, 3}, {2, 2});
  const CeGap gap = ce_gap(g, j);
  // payoff(2,1) - payoff(2,2) = 6 - 5
  CHECK(gap.epsilon == 1.0);
  CHECK(gap.epsilon == brute_force_ce(g, j));
  CHECK(gap.witness.agent == 1);
  CHECK(gap.witness.map == std::vector<std::size_t>{0, 1, 1});
}

TEST_CASE("the identity modification never gains") {
  Rng rng(2);
  const NormalFormGame g = climbing();
  for (int t = 0; t < 20; ++t) {
    JointDistributionTable j = JointDistributionTable::uniform({3, 3});
    double total = 0.0;
    for (double& p : j.probs) total += (p = rng.uniform());
    for (double& p : j.probs) p /= total;
    CHECK(deviation_gain(g, j, {0, {0, 1, 2}}) == 0.0);
    CHECK(deviation_gain(g, j, {1, {0, 1, 2}}) == 0.0);
  }
}

TEST_CASE("ce_gap agrees with brute force on random joints") {
  Rng rng(3);
  const NormalFormGame g = climbing();
  for (int t = 0; t < 50; ++t) {
    JointDistributionTable j = JointDistributionTable::uniform({3, 3});
    double total = 0.0;
    for (double& p : j.probs) total += (p = rng.uniform());
    for (double& p : j.probs) p /= total;
    CHECK(std::abs(ce_gap(g, j).epsilon - brute_force_ce(g, j)) <= 1e-12);
  }
}

TEST_CASE("no profitable deviation from the optimal point mass") {
  const NormalFormGame g = climbing();
  CHECK(nash_gap(g, {{1, 0, 0}, {1, 0, 0}}).epsilon == 0.0);
  CHECK(cce_gap(g, JointDistributionTable::point_mass({3, 3}, {0, 0})).epsilon == 0.0);
}

TEST_CASE("cce_gap equals nash_gap on product policies") {
  Rng rng(4);
  const NormalFormGame g = climbing();
  for (int t = 0; t < 50; ++t) {
    const std::vector<std::vector<double>> m{random_simplex(3, rng), random_simplex(3, rng)};
    CHECK(std::abs(cce_gap(g, JointDistributionTable::product(m)).epsilon - nash_gap(g, m).epsilon) <= 1e-12);
  }
}

TEST_CASE("uniform play in a 2x2 coordination game has no profitable deviation") {
  // Against a uniform partner every action earns 1/2, which is what uniform play earns.
  const NormalFormGame g = NormalFormGame::two_player({{1, 0}, {0, 1}});
  CHECK(nash_gap(g, {{0.5, 0.5}, {0.5, 0.5}}).epsilon == 0.0);
  CHECK(nash_gap(g, {{0.5, 0.5}, {0.9, 0.1}}).epsilon == doctest::Approx(0.4));
}

TEST_CASE("analyze_product normalizes by the payoff range") {
  const EquilibriumReport r = analyze_product(climbing(), {{0, 0, 1}, {0, 0, 1}});
  CHECK(r.normalization == 41.0);
  CHECK(r.value == 5.0);
  CHECK(r.epsilon_ce == 1.0);
  CHECK(r.epsilon_ne == 1.0);
  CHECK(r.to_json().find("\"epsilon_ce\"") != std::string::npos);
}

TEST_CASE("ce_gap rejects games with more than 8 actions per agent") {
  std::vector<std::vector<double>> big(9, std::vector<double>(9, 0.0));
  const NormalFormGame g = NormalFormGame::two_player(big);
  CHECK_THROWS(ce_gap(g, JointDistributionTable::uniform({9, 9})));
}

TEST_CASE("ice lake: fully observable value from the start matches the shortest safe path") {
  const IceLake lake = ice_lake_tabular(true);
  const ValueIterationResult vi = value_iteration(lake.pomdp);
  for (int pit = 0; pit < 2; ++pit) {
    // BFS over safe cells to the goal row.
    auto is_pit = [&](int x, int y) { return y == 1 && (pit == 0 ? (x == 1 || x == 2) : (x == 2 || x == 3)); };
    std::vector<int> dist(15, -1);
    std::queue<std::pair<int, int>> q;
    q.push({2, 0});
    dist[2] = 0;
    int moves = -1;
    while (!q.empty() && moves < 0) {
      auto [x, y] = q.front();
      q.pop();
      const int dx[4] = {0, 0, -1, 1}, dy[4] = {1, -1, 0, 0};
      for (int a = 0; a < 4; ++a) {
        const int nx = x + dx[a], ny = y + dy[a];
        if (nx < 0 || ny < 0 || nx >= 5 || ny >= 3 || is_pit(nx, ny)) continue;
        if (ny == 2) {
          moves = dist[y * 5 + x] + 1;
          break;
        }
        if (dist[ny * 5 + nx] < 0) {
          dist[ny * 5 + nx] = dist[y * 5 + x] + 1;
          q.push({nx, ny});
        }
      }
    }
    CHECK(moves == 3);
    // The goal reward is paid on the last move, discounted by all earlier ones.
    CHECK(vi.value[lake.state_of(2, 0, pit)] == doctest::Approx(10.0 * std::pow(0.95, moves - 1)).epsilon(1e-10));
  }
}

TEST_CASE("ice lake: initial belief is the uniform prior over pits") {
  const IceLake lake = ice_lake_tabular(false);
  const BeliefOccupancy occ = belief_occupancy(lake.pomdp, BeliefPolicy::uniform(4));
  const std::vector<double>& b0 = occ.beliefs[0];
  CHECK(b0[lake.state_of(2, 0, 0)] == 0.5);
  CHECK(b0[lake.state_of(2, 0, 1)] == 0.5);
  const std::vector<double> c = occ.conditional(0);
  CHECK(c[lake.state_of(2, 0, 0)] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("occupancy mass is the truncated geometric series") {
  const IceLake lake = ice_lake_tabular(false);
  for (std::size_t T : {5u, 40u, 0u}) {
    const BeliefOccupancy occ = belief_occupancy(lake.pomdp, BeliefPolicy::uniform(4), T);
    const double g = lake.pomdp.gamma;
    CHECK(std::abs(occ.total_mass() - (1.0 - std::pow(g, occ.horizon)) / (1.0 - g)) <= 1e-9);
  }
  const std::size_t T = occupancy_cutoff(0.95);
  const auto tail = [](std::size_t t) { return std::pow(0.95, t) / 0.05; };
  CHECK(std::pow(0.95, T) < 1e-8);
  CHECK(tail(T) < 1e-9);
  CHECK(tail(T - 1) >= 1e-9);
}

TEST_CASE("fully observable beliefs are point masses") {
  const IceLake lake = ice_lake_tabular(true);
  const BeliefOccupancy occ = belief_occupancy(lake.pomdp, BeliefPolicy::uniform(4));
  for (std::size_t b = 0; b < occ.beliefs.size(); ++b) {
    int support = 0;
    for (double x : occ.beliefs[b]) support += x > 0.0 ? 1 : 0;
    CHECK(support == 1);
  }
}

TEST_CASE("implicit product policy of a state-independent policy is that policy") {
  const IceLake lake = ice_lake_tabular(false);
  const StatePolicy flat(lake.pomdp.n_states, {0.1, 0.2, 0.3, 0.4});
  const BeliefOccupancy occ = belief_occupancy(lake.pomdp, BeliefPolicy::uniform(4));
  const BeliefPolicy p = implicit_product_policy(occ, flat, BeliefPolicy::uniform(4));
  for (const auto& probs : p.probs)
    for (std::size_t a = 0; a < 4; ++a) CHECK(probs[a] == doctest::Approx(flat[0][a]).epsilon(1e-14));
  const DistillTrace t = distill_fixed_point(lake.pomdp, flat, BeliefPolicy::uniform(4), 50, 1e-12);
  CHECK(t.converged);
  CHECK(t.policy(occ.beliefs[0])[3] == doctest::Approx(0.4).epsilon(1e-14));
}

TEST_CASE("implicit product policy averages the optimal routes at the initial belief") {
  const IceLake fo = ice_lake_tabular(true);
  const IceLake po = ice_lake_tabular(false);
  const StatePolicy opt = value_iteration(fo.pomdp).policy;
  // The pit position never changes and observations only carry the cell, so the
  // fully observable policy lifts to the partially observable state space as is.
  const BeliefOccupancy occ = belief_occupancy(po.pomdp, BeliefPolicy::uniform(4));
  const BeliefPolicy p = implicit_product_policy(occ, opt, BeliefPolicy::uniform(4));
  const std::vector<double> at_b0 = p(occ.beliefs[0]);
  const std::size_t left = 2, right = 3;
  CHECK(opt[fo.state_of(2, 0, 0)][right] == 1.0);
  CHECK(opt[fo.state_of(2, 0, 1)][left] == 1.0);
  CHECK(at_b0[left] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(at_b0[right] == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("fully observable distillation is exact after one step") {
  const IceLake fo = ice_lake_tabular(true);
  const StatePolicy opt = value_iteration(fo.pomdp).policy;
  const DistillTrace t = distill_fixed_point(fo.pomdp, opt, BeliefPolicy::uniform(4), 50, 1e-12);
  CHECK(t.converged);
  CHECK(t.tv.size() == 2);
  CHECK(t.tv.back() == 0.0);
  const IdentifiabilityResult id = identifiability_check(fo.pomdp, opt, t.policy, 1e-10);
  CHECK(id.identifiable);
  CHECK(id.residual_kl <= 1e-10);
}

TEST_CASE("identifiability of matching state-independent policies") {
  const IceLake po = ice_lake_tabular(false);
  const StatePolicy flat(po.pomdp.n_states, {0.25, 0.25, 0.25, 0.25});
  const IdentifiabilityResult r = identifiability_check(po.pomdp, flat, BeliefPolicy::uniform(4), 1e-12);
  CHECK(r.identifiable);
  CHECK(r.residual_kl == doctest::Approx(0.0));
}

TEST_CASE("the partially observable lake is not identifiable") {
  const IceLake fo = ice_lake_tabular(true);
  const IceLake po = ice_lake_tabular(false);
  const StatePolicy opt = value_iteration(fo.pomdp).policy;
  const DistillTrace t = distill_fixed_point(po.pomdp, opt, BeliefPolicy::uniform(4), 500, 1e-12);
  CHECK(t.converged);
  const IdentifiabilityResult r = identifiability_check(po.pomdp, opt, t.policy, 1e-6);
  CHECK_FALSE(r.identifiable);
  CHECK(r.residual_kl > 0.0);
}

TEST_CASE("successive distillation iterates contract geometrically") {
  const IceLake fo = ice_lake_tabular(true);
  const IceLake po = ice_lake_tabular(false);
  const StatePolicy opt = value_iteration(fo.pomdp).policy;
  const DistillTrace t = distill_fixed_point(po.pomdp, opt, BeliefPolicy::uniform(4), 500, 1e-12);
  CHECK(t.converged);
  CHECK(max_tv_on(belief_occupancy(po.pomdp, t.policy), t.policy,
                  implicit_product_policy(belief_occupancy(po.pomdp, t.policy), opt, t.policy)) <= 1e-8);
}

TEST_CASE("total variation of simple pairs") {
  const std::vector<double> p{0.5, 0.5}, q{1.0, 0.0};
  CHECK(total_variation(p, q) == 0.5);
  CHECK(total_variation(p, p) == 0.0);
}

TEST_CASE("tabular validation catches non-stochastic transitions") {
  IceLake lake = ice_lake_tabular(false);
  lake.pomdp.T[0] += 0.5;
  CHECK_THROWS(lake.pomdp.validate());
}
