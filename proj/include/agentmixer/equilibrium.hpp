#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace agentmixer {

// --- one-shot games --------------------------------------------------------------

// Shared-payoff normal-form game; payoff is row-major over (a^1, ..., a^N).
struct NormalFormGame {
  std::vector<std::size_t> n_actions;
  std::vector<double> payoff;

  static NormalFormGame two_player(const std::vector<std::vector<double>>& matrix);
  std::size_t n_agents() const { return n_actions.size(); }
  std::size_t n_joint() const { return payoff.size(); }
  double range() const;
};

struct JointDistributionTable {
  std::vector<std::size_t> n_actions;
  std::vector<double> probs;

  static JointDistributionTable point_mass(const std::vector<std::size_t>& n_actions,
                                           const std::vector<std::size_t>& action);
  static JointDistributionTable product(const std::vector<std::vector<double>>& marginals);
  static JointDistributionTable uniform(const std::vector<std::size_t>& n_actions);
  std::vector<double> marginal(std::size_t agent) const;
  void validate() const;
};

struct StrategyModification {
  std::size_t agent = 0;
  std::vector<std::size_t> map;  // f(k) for each action k of the agent
};

double value_of_joint(const NormalFormGame& game, const JointDistributionTable& joint);

// Gain in expected payoff from applying f to the deviating agent's coordinate.
double deviation_gain(const NormalFormGame& game, const JointDistributionTable& joint,
                      const StrategyModification& f);

struct CeGap {
  double epsilon = 0.0;
  StrategyModification witness;
};

// Exhaustive search over every map f: A^i -> A^i for every agent (K <= 8). Ties on
// the gain prefer fewer moved actions, then the lexicographically smallest map.
CeGap ce_gap(const NormalFormGame& game, const JointDistributionTable& joint);

struct DeviationGap {
  double epsilon = 0.0;
  std::size_t agent = 0;
  std::size_t action = 0;
};

// Best pure unilateral deviation against the product of `marginals`.
DeviationGap nash_gap(const NormalFormGame& game, const std::vector<std::vector<double>>& marginals);
// Best fixed-action deviation against a correlated joint.
DeviationGap cce_gap(const NormalFormGame& game, const JointDistributionTable& joint);

struct EquilibriumReport {
  double value = 0.0;
  double normalization = 1.0;  // payoff range
  double epsilon_ne = 0.0, epsilon_ce = 0.0, epsilon_cce = 0.0;
  CeGap ce;
  DeviationGap ne, cce;
  std::string to_json() const;
};

// Gaps of the product of the given marginals.
EquilibriumReport analyze_product(const NormalFormGame& game,
                                  const std::vector<std::vector<double>>& marginals);

// --- tabular POMDPs --------------------------------------------------------------

// Single decision maker; observations are emitted on arrival in a state (and at
// the initial state).
struct TabularPomdp {
  std::size_t n_states = 0, n_actions = 0, n_obs = 0;
  std::vector<double> T;  // [s][a][s']
  std::vector<double> R;  // [s][a]
  std::vector<double> O;  // [s][o]
  std::vector<double> rho0;
  double gamma = 0.95;

  double t(std::size_t s, std::size_t a, std::size_t s2) const { return T[(s * n_actions + a) * n_states + s2]; }
  double r(std::size_t s, std::size_t a) const { return R[s * n_actions + a]; }
  double o(std::size_t s, std::size_t obs) const { return O[s * n_obs + obs]; }
  void validate() const;
};

// 5 columns x 3 rows; start (2,0); reaching row 2 pays +10 and ends; a hidden
// two-cell pit in row 1 covers columns {1,2} or {2,3} with probability 1/2 each and
// costs -10 and ends. Actions: up, down, left, right.
struct IceLake {
  TabularPomdp pomdp;
  static constexpr int kCols = 5, kRows = 3;
  std::size_t state_of(int x, int y, int pit) const { return static_cast<std::size_t>((pit * kRows + y) * kCols + x); }
  std::size_t terminal() const { return 2 * kCols * kRows; }
  int pit_of(std::size_t s) const { return static_cast<int>(s) / (kCols * kRows); }
};

IceLake ice_lake_tabular(bool fully_observable, double gamma = 0.95);

// Optimal state values and a greedy deterministic policy [s][a].
struct ValueIterationResult {
  std::vector<double> value;
  std::vector<std::vector<double>> policy;
};
ValueIterationResult value_iteration(const TabularPomdp& m, double tol = 1e-13);

using StatePolicy = std::vector<std::vector<double>>;  // [s][a]

// Policy over beliefs: probabilities for the listed belief points, and a fallback
// for beliefs not in the table.
struct BeliefPolicy {
  std::vector<std::vector<double>> beliefs;
  std::vector<std::vector<double>> probs;
  std::function<std::vector<double>(std::span<const double>)> fallback;

  std::vector<double> operator()(std::span<const double> belief) const;
  static BeliefPolicy uniform(std::size_t n_actions);
};

struct BeliefOccupancy {
  std::vector<std::vector<double>> beliefs;  // b -> distribution over states
  std::vector<std::vector<double>> joint;    // rho(s, b): [b][s]
  std::vector<double> marginal;              // rho(b)
  std::size_t horizon = 0;

  std::vector<double> conditional(std::size_t b) const;  // rho(s | b)
  double total_mass() const;
};

// Smallest T with gamma^T < 1e-8 and gamma^T / (1 - gamma) < 1e-9.
std::size_t occupancy_cutoff(double gamma);

BeliefOccupancy belief_occupancy(const TabularPomdp& m, const BeliefPolicy& policy,
                                 std::size_t horizon_cutoff = 0, std::size_t max_beliefs = 100000);

// pi_hat(a | b) = sum_s rho(s | b) pi_theta(a | s) on the occupancy's belief points;
// `outside` supplies the policy elsewhere.
BeliefPolicy implicit_product_policy(const BeliefOccupancy& occ, const StatePolicy& pi_theta,
                                     const BeliefPolicy& outside);

struct DistillTrace {
  BeliefPolicy policy;
  std::vector<double> tv;  // max TV between successive iterates
  bool converged = false;
  std::size_t iterations = 0;
};

DistillTrace distill_fixed_point(const TabularPomdp& m, const StatePolicy& pi_theta,
                                 const BeliefPolicy& init, std::size_t max_iters, double tol);

struct IdentifiabilityResult {
  bool identifiable = false;
  double residual_kl = 0.0;
};

// E over the normalised occupancy of pi_phi of KL(pi_theta(.|s) || pi_phi(.|b)).
IdentifiabilityResult identifiability_check(const TabularPomdp& m, const StatePolicy& pi_theta,
                                            const BeliefPolicy& pi_phi, double tol);

double total_variation(std::span<const double> p, std::span<const double> q);
// Largest total variation between two policies over the belief points of `occ`.
double max_tv_on(const BeliefOccupancy& occ, const BeliefPolicy& a, const BeliefPolicy& b);

}  // namespace agentmixer
