#pragma once

#include <span>
#include <vector>

#include "agentmixer/mixer.hpp"
#include "agentmixer/policies.hpp"
#include "agentmixer/rng.hpp"

namespace agentmixer {

// Joint action for a batch of B rows: discrete [B x N] indices, or continuous
// [B x N*d] values with agent i occupying columns [i*d, (i+1)*d).
struct JointActionBatch {
  ActionKind kind = ActionKind::discrete;
  std::size_t rows = 0, n_agents = 0, dim = 1;
  std::vector<int> index;
  std::vector<double> value;

  std::vector<int> agent_indices(std::size_t agent) const;
  Tensor agent_values(std::size_t agent) const;
};

// The modified joint policy at a batch of states.
struct JointPolicyState {
  ActionKind kind = ActionKind::discrete;
  std::size_t n_agents = 0, rows = 0;
  std::vector<double> tau;
  std::vector<HeadOutput> individual;
  // discrete
  std::vector<Var> epsilon;    // [B x K]
  std::vector<Var> logits;     // z = (eps + log alpha) / tau
  std::vector<Var> log_probs;  // floored log softmax(z)
  // continuous
  std::vector<Var> mean;     // shared with the individual heads
  std::vector<Var> log_std;  // sigma_theta(s)
};

struct JointConfig {
  std::vector<double> tau;  // per agent; empty means 1.0 for all
};

// Inputs: state [B x S] and one [B x obs*k] history block per agent.
JointPolicyState build_joint(Tape& tape, const Var& state, std::span<const Var> histories,
                             std::span<const PolicyHead> heads, PolicyModifier& pm,
                             const JointConfig& config);

// Product of the decentralised heads with no modifier (independent learners).
JointPolicyState product_policy_state(Tape& tape, std::span<const Var> histories,
                                      std::span<const PolicyHead> heads);

// Per-agent log-probabilities of a batch of joint actions, each [B x 1].
std::vector<Var> joint_agent_log_probs(const JointPolicyState& jps, const JointActionBatch& actions);
// Sum over agents -> [B x 1].
Var joint_log_prob(const JointPolicyState& jps, const JointActionBatch& actions);
// Sum of per-agent entropies -> [B x 1] (continuous: [1 x 1] broadcastable if state-free).
Var joint_entropy(const JointPolicyState& jps);

struct JointSample {
  JointActionBatch actions;
  std::vector<double> log_prob;  // per row, summed over agents
};

// Row b draws from rngs[b % rngs.size()].
JointSample joint_sample(const JointPolicyState& jps, std::span<Rng> rngs);

struct IgcReport {
  std::vector<std::vector<bool>> consistent;  // [row][agent]
  bool all = true;
  double rate = 1.0;  // fraction of (row, agent) pairs whose modes agree
};

IgcReport check_igc(const JointPolicyState& jps);

// Monte Carlo check that Gumbel-perturbed argmax sampling with i.i.d. uniform u
// reproduces the product of the individual categoricals. For tau > 0 actions are
// drawn from softmax((g + log alpha) / tau); tau = 0 takes the argmax.
// Returns the total-variation distance to the product for each tau.
std::vector<double> temperature_degeneration_test(const std::vector<std::vector<double>>& alpha,
                                                  std::size_t n_samples,
                                                  const std::vector<double>& taus, Rng& rng);

}  // namespace agentmixer
