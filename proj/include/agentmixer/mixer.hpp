#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "agentmixer/nn.hpp"
#include "agentmixer/policies.hpp"

namespace agentmixer {

struct MixerConfig {
  std::size_t n_agents = 2;
  std::size_t channel_dim = 16;
  std::size_t agent_mix_hidden = 32;
  std::size_t channel_mix_hidden = 256;
  std::size_t n_blocks = 1;
  double mixer_lr = 5e-5;
  Activation act = Activation::relu;
  // Continuous mode only: skip the network and use each head's own log std as the
  // joint standard deviation.
  bool identity = false;

  void validate() const;
};

// Per-agent policy parameters feeding the modifier.
struct PolicyFeatures {
  ActionKind kind = ActionKind::discrete;
  std::vector<Var> per_agent;  // discrete: log-probs [B x K]; continuous: [B x 2d] (mean, log std)
};

struct ModificationSignal {
  ActionKind kind = ActionKind::discrete;
  std::vector<Var> u;        // discrete: [B x K] in [1e-6, 1 - 1e-6]
  std::vector<Var> u_logit;  // discrete: logit(u), clamped to the same range
  std::vector<Var> log_std;  // continuous: [B x d] in [-10, 2]
};

// Mixer network over the [(N+1) x C] grid whose row 0 embeds the state and rows
// 1..N embed each agent's policy parameters. A batch of B grids is stacked as
// [B*(N+1) x C].
class PolicyModifier {
 public:
  PolicyModifier() = default;
  PolicyModifier(ParamStore& store, const std::string& prefix, const MixerConfig& config,
                 ActionKind kind, std::size_t state_dim, std::size_t policy_param_dim,
                 std::size_t out_dim, Rng& rng);

  Var embed_policies(Tape& tape, const PolicyFeatures& features, const Var& state) const;
  Var mixer_block(Tape& tape, const Var& grid, std::size_t block) const;
  Var mix(Tape& tape, const Var& grid) const;
  ModificationSignal pm_heads(Tape& tape, const Var& grid) const;

  // embed -> blocks -> heads; counts as one forward call.
  ModificationSignal forward(Tape& tape, const PolicyFeatures& features, const Var& state);

  const MixerConfig& config() const { return config_; }
  ActionKind kind() const { return kind_; }
  std::uint64_t forward_calls() const { return forward_calls_; }
  const std::string& prefix() const { return prefix_; }

 private:
  struct Block {
    LayerNormParams agent_norm;
    Linear agent_fc1, agent_fc2;
    LayerNormParams channel_norm;
    Linear channel_fc1, channel_fc2;
  };

  MixerConfig config_;
  ActionKind kind_ = ActionKind::discrete;
  std::string prefix_;
  std::size_t state_dim_ = 0, policy_param_dim_ = 0, out_dim_ = 0;
  Linear state_embed_, policy_embed_;
  std::vector<Block> blocks_;
  std::vector<Linear> out_heads_;
  std::uint64_t forward_calls_ = 0;
};

inline constexpr double kUClamp = 1e-6;
// Head bias giving u = 1/e, i.e. zero Gumbel perturbation.
inline constexpr double kZeroPerturbationBias = -0.54132485461291810;

}  // namespace agentmixer
