#include "agentmixer/joint.hpp"

#include <cmath>
#include <limits>

namespace agentmixer {

std::vector<int> JointActionBatch::agent_indices(std::size_t agent) const {
  std::vector<int> out(rows);
  for (std::size_t b = 0; b < rows; ++b) out[b] = index[b * n_agents + agent];
  return out;
}

Tensor JointActionBatch::agent_values(std::size_t agent) const {
  Tensor out = Tensor::matrix(rows, dim);
  const std::size_t stride = n_agents * dim;
  for (std::size_t b = 0; b < rows; ++b)
    for (std::size_t d = 0; d < dim; ++d) out[b * dim + d] = value[b * stride + agent * dim + d];
  return out;
}

JointPolicyState build_joint(Tape& tape, const Var& state, std::span<const Var> histories,
                             std::span<const PolicyHead> heads, PolicyModifier& pm,
                             const JointConfig& config) {
  const std::size_t n = heads.size();
  if (histories.size() != n || pm.config().n_agents != n) {
    throw ConfigError("joint policy over " + std::to_string(n) + " heads got " +
                      std::to_string(histories.size()) + " histories and a modifier for " +
                      std::to_string(pm.config().n_agents) + " agents");
  }
  if (!config.tau.empty() && config.tau.size() != n) {
    throw ConfigError("joint policy needs one temperature per agent");
  }
  JointPolicyState jps;
  jps.kind = heads[0].config().kind;
  jps.n_agents = n;
  jps.rows = state.rows();
  jps.tau = config.tau.empty() ? std::vector<double>(n, 1.0) : config.tau;
  for (std::size_t i = 0; i < n; ++i) {
    if (heads[i].config().kind != jps.kind) throw ConfigError("heads mix action kinds");
    if (histories[i].rows() != jps.rows) {
      throw DimensionError("history batch " + shape_string(histories[i].value().shape()) +
                           " does not match state batch " + shape_string(state.value().shape()));
    }
    jps.individual.push_back(heads[i].forward(tape, histories[i]));
  }

  if (jps.kind == ActionKind::continuous) {
    if (pm.config().identity) {
      for (const HeadOutput& h : jps.individual) {
        jps.mean.push_back(h.mean);
        jps.log_std.push_back(h.log_std);
      }
      return jps;
    }
    PolicyFeatures features;
    features.kind = ActionKind::continuous;
    for (const HeadOutput& h : jps.individual) {
      const Var zeros = tape.constant(Tensor::matrix(jps.rows, h.mean.cols()));
      const Var parts[2] = {h.mean, add(zeros, h.log_std)};
      features.per_agent.push_back(concat_cols(parts));
    }
    const ModificationSignal sig = pm.forward(tape, features, state);
    for (std::size_t i = 0; i < n; ++i) {
      jps.mean.push_back(jps.individual[i].mean);
      jps.log_std.push_back(sig.log_std[i]);
    }
    return jps;
  }

  if (pm.config().identity) throw ConfigError("identity modifier is only defined for continuous actions");
  PolicyFeatures features;
  features.kind = ActionKind::discrete;
  for (const HeadOutput& h : jps.individual) features.per_agent.push_back(h.log_probs);
  const ModificationSignal sig = pm.forward(tape, features, state);
  for (std::size_t i = 0; i < n; ++i) {
    // -log(-log u) with -log(sigmoid(z)) = softplus(-z), stable as u -> 1.
    const Var eps = neg(log(softplus(neg(sig.u_logit[i]))));
    const Var z = scale(add(eps, jps.individual[i].log_probs), 1.0 / jps.tau[i]);
    jps.epsilon.push_back(eps);
    jps.logits.push_back(z);
    jps.log_probs.push_back(categorical_log_probs(z));
  }
  return jps;
}

JointPolicyState product_policy_state(Tape& tape, std::span<const Var> histories,
                                      std::span<const PolicyHead> heads) {
  const std::size_t n = heads.size();
  if (histories.size() != n) {
    throw ConfigError("product policy over " + std::to_string(n) + " heads got " +
                      std::to_string(histories.size()) + " histories");
  }
  JointPolicyState jps;
  jps.kind = heads[0].config().kind;
  jps.n_agents = n;
  jps.rows = histories[0].rows();
  jps.tau.assign(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (heads[i].config().kind != jps.kind) throw ConfigError("heads mix action kinds");
    jps.individual.push_back(heads[i].forward(tape, histories[i]));
    const HeadOutput& h = jps.individual.back();
    if (jps.kind == ActionKind::discrete) {
      jps.logits.push_back(h.log_probs);
      jps.log_probs.push_back(h.log_probs);
    } else {
      jps.mean.push_back(h.mean);
      jps.log_std.push_back(h.log_std);
    }
  }
  return jps;
}

std::vector<Var> joint_agent_log_probs(const JointPolicyState& jps,
                                       const JointActionBatch& actions) {
  if (actions.kind != jps.kind || actions.n_agents != jps.n_agents || actions.rows != jps.rows) {
    throw DimensionError("joint action batch does not match the joint policy");
  }
  std::vector<Var> out;
  for (std::size_t i = 0; i < jps.n_agents; ++i) {
    if (jps.kind == ActionKind::discrete) {
      const std::vector<int> idx = actions.agent_indices(i);
      out.push_back(categorical_log_prob(jps.log_probs[i], idx));
    } else {
      const Var a = jps.mean[i].tape()->constant(actions.agent_values(i));
      out.push_back(gaussian_log_prob(jps.mean[i], jps.log_std[i], a));
    }
  }
  return out;
}

Var joint_log_prob(const JointPolicyState& jps, const JointActionBatch& actions) {
  const std::vector<Var> parts = joint_agent_log_probs(jps, actions);
  Var total = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) total = add(total, parts[i]);
  return total;
}

Var joint_entropy(const JointPolicyState& jps) {
  Var total;
  for (std::size_t i = 0; i < jps.n_agents; ++i) {
    const Var h = jps.kind == ActionKind::discrete ? categorical_entropy(jps.log_probs[i])
                                                   : gaussian_entropy(jps.log_std[i]);
    total = i == 0 ? h : add(total, h);
  }
  return total;
}

JointSample joint_sample(const JointPolicyState& jps, std::span<Rng> rngs) {
  if (rngs.empty()) throw ContractError("joint_sample needs at least one generator");
  JointSample s;
  JointActionBatch& a = s.actions;
  a.kind = jps.kind;
  a.rows = jps.rows;
  a.n_agents = jps.n_agents;
  s.log_prob.assign(jps.rows, 0.0);
  if (jps.kind == ActionKind::discrete) {
    a.dim = 1;
    a.index.assign(jps.rows * jps.n_agents, 0);
    std::vector<double> p;
    for (std::size_t b = 0; b < jps.rows; ++b) {
      Rng& rng = rngs[b % rngs.size()];
      for (std::size_t i = 0; i < jps.n_agents; ++i) {
        const Tensor& lp = jps.log_probs[i].value();
        const std::size_t K = lp.cols();
        p.resize(K);
        for (std::size_t k = 0; k < K; ++k) p[k] = std::exp(lp[b * K + k]);
        const int choice = rng.categorical(p);
        a.index[b * jps.n_agents + i] = choice;
        s.log_prob[b] += lp[b * K + static_cast<std::size_t>(choice)];
      }
    }
    return s;
  }
  const std::size_t d = jps.mean[0].cols();
  a.dim = d;
  a.value.assign(jps.rows * jps.n_agents * d, 0.0);
  constexpr double half_log_2pi = 0.91893853320467274178;
  for (std::size_t b = 0; b < jps.rows; ++b) {
    Rng& rng = rngs[b % rngs.size()];
    for (std::size_t i = 0; i < jps.n_agents; ++i) {
      const Tensor& mu = jps.mean[i].value();
      const Tensor& ls = jps.log_std[i].value();
      const std::size_t lrow = ls.rows() == 1 ? 0 : b;
      for (std::size_t k = 0; k < d; ++k) {
        const double noise = rng.normal();
        const double log_sd = ls[lrow * d + k];
        a.value[(b * jps.n_agents + i) * d + k] = mu[b * d + k] + std::exp(log_sd) * noise;
        s.log_prob[b] += -0.5 * noise * noise - log_sd - half_log_2pi;
      }
    }
  }
  return s;
}

IgcReport check_igc(const JointPolicyState& jps) {
  IgcReport r;
  r.consistent.assign(jps.rows, std::vector<bool>(jps.n_agents, true));
  if (jps.kind == ActionKind::continuous) return r;
  std::size_t agree = 0;
  for (std::size_t b = 0; b < jps.rows; ++b) {
    for (std::size_t i = 0; i < jps.n_agents; ++i) {
      const Tensor& z = jps.logits[i].value();
      const Tensor& lp = jps.individual[i].log_probs.value();
      const std::size_t K = z.cols();
      const bool same = argmax(z.values().subspan(b * K, K)) == argmax(lp.values().subspan(b * K, K));
      r.consistent[b][i] = same;
      agree += same ? 1 : 0;
      r.all = r.all && same;
    }
  }
  const std::size_t total = jps.rows * jps.n_agents;
  r.rate = total ? static_cast<double>(agree) / static_cast<double>(total) : 1.0;
  return r;
}

std::vector<double> temperature_degeneration_test(const std::vector<std::vector<double>>& alpha,
                                                  std::size_t n_samples,
                                                  const std::vector<double>& taus, Rng& rng) {
  if (alpha.empty()) throw ContractError("temperature_degeneration_test needs at least one agent");
  std::vector<std::size_t> sizes;
  std::size_t outcomes = 1;
  std::vector<std::vector<double>> log_alpha;
  for (const auto& a : alpha) {
    double total = 0.0;
    for (double x : a) {
      if (!(x >= 0.0)) throw ContractError("categorical weights must be nonnegative");
      total += x;
    }
    if (!(total > 0.0)) throw ContractError("categorical weights must not all be zero");
    std::vector<double> la(a.size());
    for (std::size_t k = 0; k < a.size(); ++k)
      la[k] = a[k] > 0.0 ? std::log(a[k] / total) : -std::numeric_limits<double>::infinity();
    log_alpha.push_back(std::move(la));
    sizes.push_back(a.size());
    outcomes *= a.size();
  }
  std::vector<double> product(outcomes, 1.0);
  for (std::size_t o = 0; o < outcomes; ++o) {
    std::size_t rest = o;
    for (std::size_t i = alpha.size(); i-- > 0;) {
      product[o] *= std::exp(log_alpha[i][rest % sizes[i]]);
      rest /= sizes[i];
    }
  }

  std::vector<double> tv;
  std::vector<double> w;
  for (double tau : taus) {
    if (tau < 0.0) throw ContractError("temperature must be nonnegative");
    std::vector<double> counts(outcomes, 0.0);
    for (std::size_t s = 0; s < n_samples; ++s) {
      std::size_t o = 0;
      for (std::size_t i = 0; i < alpha.size(); ++i) {
        const std::size_t K = sizes[i];
        w.resize(K);
        for (std::size_t k = 0; k < K; ++k) w[k] = -std::log(-std::log(rng.uniform_open())) + log_alpha[i][k];
        int pick;
        if (tau == 0.0) {
          pick = argmax(w);
        } else {
          const double mx = w[static_cast<std::size_t>(argmax(w))];
          for (double& x : w) x = std::exp((x - mx) / tau);
          pick = rng.categorical(w);
        }
        o = o * K + static_cast<std::size_t>(pick);
      }
      counts[o] += 1.0;
    }
    double d = 0.0;
    for (std::size_t o = 0; o < outcomes; ++o)
      d += std::abs(counts[o] / static_cast<double>(n_samples) - product[o]);
    tv.push_back(0.5 * d);
  }
  return tv;
}

}  // namespace agentmixer
