#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "agentmixer/envs.hpp"
#include "agentmixer/joint.hpp"
#include "agentmixer/mixer.hpp"
#include "agentmixer/params.hpp"
#include "agentmixer/policies.hpp"

namespace agentmixer {

enum class Algorithm { agentmixer, ippo, ail };
// per_agent: sum over agents of each agent's clipped surrogate; joint: one clipped
// surrogate on the ratio of joint probabilities; automatic: joint for agentmixer,
// per_agent otherwise.
enum class Surrogate { automatic, per_agent, joint };

std::string to_string(Algorithm a);
Algorithm algorithm_from_string(const std::string& s);
std::string to_string(Surrogate s);
Surrogate surrogate_from_string(const std::string& s);

struct PpoConfig {
  double clip = 0.2;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  int ppo_epochs = 15;
  int minibatches = 1;
  double entropy_coef = 0.01;
  double actor_lr = 5e-4;
  double critic_lr = 5e-4;
  double value_coef = 1.0;
  double max_grad_norm = 10.0;
  double adam_eps = 1e-5;
  double weight_decay = 0.0;
  int rollout_threads = 50;
  int episode_length = 200;
  Surrogate surrogate = Surrogate::automatic;
};

struct DistillConfig {
  double beta_initial = 1.0;
  double anneal_fraction = 0.5;  // beta reaches 0 after this fraction of total steps
  double distill_weight = 1.0;
  double student_lr = 5e-4;
  int distill_epochs = 15;

  // beta after `done` of `total` env steps.
  double beta(std::uint64_t done, std::uint64_t total) const;
};

struct PolicyConfig {
  std::size_t window = 1;
  std::vector<std::size_t> actor_hidden{64};
  std::vector<std::size_t> critic_hidden{64, 64};
  Activation act = Activation::relu;
  double init_log_std = -0.5;
  std::vector<double> tau;  // per-agent temperatures, empty = 1
};

struct TrainConfig {
  Algorithm algorithm = Algorithm::agentmixer;
  EnvParams env;
  PpoConfig ppo;
  MixerConfig mixer;
  DistillConfig distill;
  PolicyConfig policy;
  std::uint64_t total_env_steps = 200000;
  int eval_every = 1;  // updates between evaluations
  int eval_episodes = 32;
  int checkpoint_every = 0;  // updates; 0 = only at the end
  std::uint64_t seed = 1;
  bool record_wallclock = true;
};

// Rows are laid out step-major: row = t * threads + e.
struct TrajectoryBatch {
  std::size_t threads = 0, steps = 0, n_agents = 0;
  std::size_t state_dim = 0, history_dim = 0;
  std::vector<double> states;                   // [rows x state_dim]
  std::vector<std::vector<double>> histories;   // per agent [rows x history_dim]
  JointActionBatch actions;
  std::vector<std::vector<double>> agent_log_probs;  // behaviour, per agent [rows]
  std::vector<double> log_probs;                // behaviour joint log-prob [rows]
  std::vector<double> rewards, dones, values;   // [rows]
  std::vector<double> bootstrap;                // V of the state after the last step [threads]
  std::vector<double> episode_returns;          // episodes finished during collection
  std::size_t rows() const { return threads * steps; }
};

struct GaeResult {
  std::vector<double> advantages, returns;
};

GaeResult compute_gae(const TrajectoryBatch& batch, double gamma, double lambda);
// In place: mean 0, (population) std 1.
void normalize_advantages(std::vector<double>& adv);

struct UpdateStats {
  double policy_loss = 0.0, value_loss = 0.0, entropy = 0.0;
  double approx_kl = 0.0, clip_frac = 0.0;
  double distill_loss = 0.0;
  std::optional<double> igc_consistency_rate;
  double initial_ratio_max_dev = 0.0;  // max |ratio - 1| on the first pass
};

struct EvalStats {
  double mean = 0.0, std = 0.0, success_rate = 0.0;
  int episodes = 0;
  std::vector<double> returns;
};

struct MetricsRow {
  std::uint64_t step = 0, env_steps = 0;
  std::optional<double> mean_train_return, mean_eval_return, eval_std;
  UpdateStats stats;
  double wallclock_s = 0.0;
};

std::string metrics_header();
std::string metrics_line(const MetricsRow& row);

// Decentralised policies only: heads and their parameters, nothing centralised.
class DecentralizedPolicy {
 public:
  DecentralizedPolicy(const EnvSpec& spec, const PolicyConfig& config, std::uint64_t seed);
  ParamStore& params() { return store_; }
  const std::vector<PolicyHead>& heads() const { return heads_; }
  std::vector<PolicyHead>& heads() { return heads_; }

 private:
  ParamStore store_;
  std::vector<PolicyHead> heads_;
};

HeadConfig actor_head_config(const EnvSpec& spec, const PolicyConfig& config);

// Runs deterministic (or sampled) decentralised episodes. Touches only observations
// and the given heads.
EvalStats evaluate(const std::vector<PolicyHead>& heads, Env& env, int n_episodes,
                   std::uint64_t seed, bool deterministic = true);

class Trainer {
 public:
  explicit Trainer(const TrainConfig& config);
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  // One collection + update cycle.
  MetricsRow iterate();
  // Runs to total_env_steps; the callback sees each row.
  void run(const std::function<void(const MetricsRow&)>& on_row);
  bool finished() const { return env_steps_ >= config_.total_env_steps; }

  EvalStats evaluate_policy(int n_episodes) const;

  // Building blocks, exposed for tests.
  TrajectoryBatch collect_rollouts(int threads, int steps);
  UpdateStats agentmixer_update(const TrajectoryBatch& batch);
  UpdateStats independent_ppo_update(const TrajectoryBatch& batch);
  UpdateStats ail_update(const TrajectoryBatch& teacher_batch, const TrajectoryBatch* mixture_batch);
  TrajectoryBatch collect_teacher_rollouts(int threads, int steps);
  TrajectoryBatch collect_mixture_rollouts(int threads, int steps, double beta);
  UpdateStats distill_students(const TrajectoryBatch& batch);

  const TrainConfig& config() const { return config_; }
  const EnvSpec& env_spec() const { return spec_; }
  ParamStore& params() { return store_; }
  const std::vector<PolicyHead>& heads() const { return heads_; }
  const std::vector<PolicyHead>& teacher_heads() const { return teacher_; }
  PolicyModifier* modifier() { return pm_ ? pm_.get() : nullptr; }
  std::uint64_t env_steps() const { return env_steps_; }
  std::uint64_t updates() const { return updates_; }

  // Joint-policy / critic forward used by collection and updates.
  JointPolicyState policy_state(Tape& tape, const Var& state, std::span<const Var> histories);
  Var critic_value(Tape& tape, const Var& state) const;

 private:
  struct EnvSlot {
    std::unique_ptr<Env> env;
    std::vector<HistoryWindow> history;
    Rng env_rng;
    double episode_return = 0.0;
  };
  struct SlotSet {
    std::vector<EnvSlot> slots;
    std::vector<Rng> sample_rngs;
    std::string tag;
  };
  enum class Behaviour { learner, teacher, mixture };
  enum class PolicyPath { joint, product, teacher };

  void ensure_slots(SlotSet& set, int threads);
  void reset_slot(EnvSlot& slot);
  TrajectoryBatch collect(SlotSet& set, int steps, Behaviour behaviour, double beta);
  JointPolicyState teacher_state(Tape& tape, const Var& state);
  UpdateStats ppo_update(const TrajectoryBatch& batch, PolicyPath path);
  JointPolicyState forward_path(Tape& tape, PolicyPath path, const Var& state,
                                std::span<const Var> histories);

  TrainConfig config_;
  EnvSpec spec_;
  ParamStore store_;
  std::vector<PolicyHead> heads_;
  std::vector<PolicyHead> teacher_;
  std::unique_ptr<PolicyModifier> pm_;
  Mlp critic_;
  Adam actor_opt_, mixer_opt_, critic_opt_, student_opt_;
  std::vector<std::string> policy_group_, critic_group_;
  SlotSet slots_, mix_slots_;
  Rng mix_rng_, minibatch_rng_;
  std::uint64_t env_steps_ = 0, updates_ = 0;
  double start_time_ = 0.0;
};

}  // namespace agentmixer
