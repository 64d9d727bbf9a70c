#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "agentmixer/autodiff.hpp"
#include "agentmixer/nn.hpp"

namespace agentmixer {

enum class ActionKind { discrete, continuous };

inline constexpr double kLogProbFloor = -30.0;
inline constexpr double kLogStdMin = -10.0;
inline constexpr double kLogStdMax = 2.0;

// --- distribution math on the tape -----------------------------------------
// Row-wise log-softmax floored at kLogProbFloor.
Var categorical_log_probs(const Var& logits);
// log_probs [B x K], actions [B] -> [B x 1]
Var categorical_log_prob(const Var& log_probs, std::span<const int> actions);
Var categorical_entropy(const Var& log_probs);
// Row-wise KL(p || q) from log-probabilities -> [B x 1]
Var categorical_kl(const Var& log_p, const Var& log_q);

// mean [B x d]; log_std [1 x d] or [B x d]; actions [B x d] -> [B x 1]
Var gaussian_log_prob(const Var& mean, const Var& log_std, const Var& actions);
// Sum over dims of log_std + 0.5 log(2 pi e) -> [rows(log_std) x 1]
Var gaussian_entropy(const Var& log_std);
Var gaussian_kl(const Var& mean_p, const Var& log_std_p, const Var& mean_q, const Var& log_std_q);

// Lowest-index argmax.
int argmax(std::span<const double> values);

// --- histories --------------------------------------------------------------
// Last k observations of one agent, oldest first, zero before the episode starts.
class HistoryWindow {
 public:
  HistoryWindow() = default;
  HistoryWindow(int agent_id, std::size_t window, std::size_t obs_dim);

  void reset();
  void push(std::span<const double> obs);

  int agent_id() const { return agent_id_; }
  std::size_t window() const { return window_; }
  std::size_t obs_dim() const { return obs_dim_; }
  std::span<const double> flat() const { return buffer_; }

 private:
  int agent_id_ = 0;
  std::size_t window_ = 1, obs_dim_ = 0;
  std::vector<double> buffer_;
};

// --- heads -------------------------------------------------------------------
struct HeadConfig {
  ActionKind kind = ActionKind::discrete;
  std::size_t obs_dim = 1;
  std::size_t window = 1;
  std::size_t action_dim = 2;  // categories K, or Gaussian dimensions
  std::vector<std::size_t> hidden{64};
  Activation act = Activation::relu;
  double out_gain = 0.01;
  double init_log_std = -0.5;

  std::size_t input_dim() const { return obs_dim * window; }
};

struct HeadOutput {
  ActionKind kind = ActionKind::discrete;
  Var log_probs;  // discrete: [B x K]
  Var mean;       // continuous: [B x d]
  Var log_std;    // continuous: [1 x d], clamped
};

struct AgentAction {
  int index = -1;             // discrete
  std::vector<double> value;  // continuous
  double log_prob = 0.0;
};

// Decentralised policy pi_phi(a | h) for one agent.
class PolicyHead {
 public:
  PolicyHead() = default;
  PolicyHead(ParamStore& store, const std::string& prefix, const HeadConfig& config, Rng& rng);

  HeadOutput forward(Tape& tape, const Var& inputs) const;

  // Decentralised action from one history: the mode if deterministic, else a sample.
  AgentAction act(const HistoryWindow& history, bool deterministic, Rng& rng) const;
  // Mode: argmax category, or the Gaussian mean.
  AgentAction mode(const HistoryWindow& history) const;
  // Differentiable (log pi(a|h), H(pi(.|h))) as [1 x 1] vars on `tape`.
  std::pair<Var, Var> log_prob_and_entropy(Tape& tape, const HistoryWindow& history,
                                           const AgentAction& action) const;

  const HeadConfig& config() const { return config_; }
  const std::string& prefix() const { return prefix_; }

 private:
  void check_history(const HistoryWindow& history) const;

  HeadConfig config_;
  std::string prefix_;
  Mlp body_;
  Tensor* log_std_ = nullptr;
};

// KL(p || q) of two heads evaluated on the same histories -> [B x 1].
Var kl_divergence(const HeadOutput& p, const HeadOutput& q);

}  // namespace agentmixer
