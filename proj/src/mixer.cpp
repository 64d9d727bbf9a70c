#include "agentmixer/mixer.hpp"

#include <cmath>

namespace agentmixer {

void MixerConfig::validate() const {
  if (n_agents == 0 || channel_dim == 0 || agent_mix_hidden == 0 || channel_mix_hidden == 0 ||
      n_blocks == 0) {
    throw ConfigError("mixer dimensions must be positive");
  }
  if (!(mixer_lr > 0.0)) throw ConfigError("mixer.mixer_lr must be positive");
}

PolicyModifier::PolicyModifier(ParamStore& store, const std::string& prefix,
                               const MixerConfig& config, ActionKind kind, std::size_t state_dim,
                               std::size_t policy_param_dim, std::size_t out_dim, Rng& rng)
    : config_(config),
      kind_(kind),
      prefix_(prefix),
      state_dim_(state_dim),
      policy_param_dim_(policy_param_dim),
      out_dim_(out_dim) {
  config.validate();
  const std::size_t C = config.channel_dim, R = config.n_agents + 1;
  state_embed_ = Linear::create(store, prefix + "/embed/state", state_dim, C, rng, 1.0);
  policy_embed_ = Linear::create(store, prefix + "/embed/policy", policy_param_dim, C, rng, 1.0);
  const double g = std::sqrt(2.0);
  for (std::size_t b = 0; b < config.n_blocks; ++b) {
    const std::string p = prefix + "/block" + std::to_string(b);
    Block blk;
    blk.agent_norm = LayerNormParams::create(store, p + "/agent_norm", C);
    blk.agent_fc1 = Linear::create(store, p + "/agent_fc1", R, config.agent_mix_hidden, rng, g);
    blk.agent_fc2 = Linear::create(store, p + "/agent_fc2", config.agent_mix_hidden, R, rng, 1.0);
    blk.channel_norm = LayerNormParams::create(store, p + "/channel_norm", C);
    blk.channel_fc1 = Linear::create(store, p + "/channel_fc1", C, config.channel_mix_hidden, rng, g);
    blk.channel_fc2 = Linear::create(store, p + "/channel_fc2", config.channel_mix_hidden, C, rng, 1.0);
    blocks_.push_back(blk);
  }
  for (std::size_t i = 0; i < config.n_agents; ++i) {
    Linear head = Linear::create(store, prefix + "/head" + std::to_string(i), C, out_dim, rng, 0.01);
    const double bias = kind == ActionKind::discrete ? kZeroPerturbationBias : 0.0;
    for (double& v : head.bias->values()) v = bias;
    out_heads_.push_back(head);
  }
}

Var PolicyModifier::embed_policies(Tape& tape, const PolicyFeatures& features,
                                   const Var& state) const {
  if (features.per_agent.size() != config_.n_agents) {
    throw ConfigError("policy modifier configured for " + std::to_string(config_.n_agents) +
                      " agents received " + std::to_string(features.per_agent.size()));
  }
  if (state.cols() != state_dim_) {
    throw ConfigError("policy modifier expects state width " + std::to_string(state_dim_) +
                      ", got " + shape_string(state.value().shape()));
  }
  std::vector<Var> rows;
  rows.reserve(config_.n_agents + 1);
  rows.push_back(state_embed_(tape, state));
  for (const Var& p : features.per_agent) {
    if (p.cols() != policy_param_dim_ || p.rows() != state.rows()) {
      throw ConfigError("policy features " + shape_string(p.value().shape()) +
                        " do not match modifier input width " + std::to_string(policy_param_dim_));
    }
    rows.push_back(policy_embed_(tape, p));
  }
  return interleave_rows(rows);
}

Var PolicyModifier::mixer_block(Tape& tape, const Var& grid, std::size_t block) const {
  const Block& blk = blocks_.at(block);
  const std::size_t R = config_.n_agents + 1, C = config_.channel_dim;
  // agent mixing: each channel mixes across the N+1 rows
  Var h = group_transpose(blk.agent_norm(tape, grid), R);
  h = blk.agent_fc2(tape, activate(blk.agent_fc1(tape, h), config_.act));
  const Var agent_out = add(grid, group_transpose(h, C));
  // channel mixing: each row mixes across its C channels
  Var c = blk.channel_norm(tape, agent_out);
  c = blk.channel_fc2(tape, activate(blk.channel_fc1(tape, c), config_.act));
  return add(agent_out, c);
}

Var PolicyModifier::mix(Tape& tape, const Var& grid) const {
  Var h = grid;
  for (std::size_t b = 0; b < blocks_.size(); ++b) h = mixer_block(tape, h, b);
  return h;
}

ModificationSignal PolicyModifier::pm_heads(Tape& tape, const Var& grid) const {
  ModificationSignal sig;
  sig.kind = kind_;
  const std::size_t R = config_.n_agents + 1;
  for (std::size_t i = 0; i < config_.n_agents; ++i) {
    const Var raw = out_heads_[i](tape, take_group_row(grid, R, i + 1));
    if (kind_ == ActionKind::discrete) {
      const double hi = std::log1p(-kUClamp) - std::log(kUClamp);
      sig.u.push_back(clamp(sigmoid(raw), kUClamp, 1.0 - kUClamp));
      sig.u_logit.push_back(clamp(raw, -hi, hi));
    } else {
      sig.log_std.push_back(clamp(raw, kLogStdMin, kLogStdMax));
    }
  }
  return sig;
}

ModificationSignal PolicyModifier::forward(Tape& tape, const PolicyFeatures& features,
                                           const Var& state) {
  ++forward_calls_;
  return pm_heads(tape, mix(tape, embed_policies(tape, features, state)));
}

}  // namespace agentmixer
