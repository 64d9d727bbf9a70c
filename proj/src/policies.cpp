#include "agentmixer/policies.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace agentmixer {

namespace {
constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 log(2 pi)
}

Var categorical_log_probs(const Var& logits) {
  return clamp(log_softmax_rows(logits), kLogProbFloor, 0.0);
}

Var categorical_log_prob(const Var& log_probs, std::span<const int> actions) {
  return gather_cols(log_probs, actions);
}

Var categorical_entropy(const Var& log_probs) {
  return neg(row_sum(mul(exp(log_probs), log_probs)));
}

Var categorical_kl(const Var& log_p, const Var& log_q) {
  return row_sum(mul(exp(log_p), sub(log_p, log_q)));
}

Var gaussian_log_prob(const Var& mean, const Var& log_std, const Var& actions) {
  const Var z = div(sub(actions, mean), exp(log_std));
  return add_scalar(row_sum(sub(scale(square(z), -0.5), log_std)),
                    -kHalfLog2Pi * static_cast<double>(mean.cols()));
}

Var gaussian_entropy(const Var& log_std) {
  return row_sum(add_scalar(log_std, 0.5 + kHalfLog2Pi));
}

Var gaussian_kl(const Var& mean_p, const Var& log_std_p, const Var& mean_q,
                const Var& log_std_q) {
  // log(sq/sp) + (sp^2 + (mp - mq)^2) / (2 sq^2) - 1/2, summed over dims
  const Var var_p = exp(scale(log_std_p, 2.0));
  const Var var_q = exp(scale(log_std_q, 2.0));
  const Var diff2 = square(sub(mean_p, mean_q));
  const Var ratio = div(add(diff2, var_p), scale(var_q, 2.0));
  const Var per_dim = add_scalar(add(neg(log_std_p), add(ratio, log_std_q)), -0.5);
  return row_sum(per_dim);
}

int argmax(std::span<const double> values) {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

HistoryWindow::HistoryWindow(int agent_id, std::size_t window, std::size_t obs_dim)
    : agent_id_(agent_id), window_(window), obs_dim_(obs_dim), buffer_(window * obs_dim, 0.0) {
  if (window == 0) throw ConfigError("history window must be at least 1");
}

void HistoryWindow::reset() { std::fill(buffer_.begin(), buffer_.end(), 0.0); }

void HistoryWindow::push(std::span<const double> obs) {
  if (obs.size() != obs_dim_) {
    throw DimensionError("observation of size " + std::to_string(obs.size()) +
                         " pushed into history of width " + std::to_string(obs_dim_));
  }
  std::copy(buffer_.begin() + static_cast<std::ptrdiff_t>(obs_dim_), buffer_.end(), buffer_.begin());
  std::copy(obs.begin(), obs.end(), buffer_.end() - static_cast<std::ptrdiff_t>(obs_dim_));
}

PolicyHead::PolicyHead(ParamStore& store, const std::string& prefix, const HeadConfig& config,
                       Rng& rng)
    : config_(config), prefix_(prefix) {
  if (config.obs_dim == 0 || config.window == 0 || config.action_dim == 0) {
    throw ConfigError("policy head '" + prefix + "' needs positive dimensions");
  }
  body_ = Mlp::create(store, prefix + "/body", config.input_dim(), config.hidden,
                      config.action_dim, rng, config.out_gain, config.act);
  if (config.kind == ActionKind::continuous) {
    log_std_ = &store.add(prefix + "/log_std", Tensor::matrix(1, config.action_dim, config.init_log_std));
  }
}

HeadOutput PolicyHead::forward(Tape& tape, const Var& inputs) const {
  if (inputs.cols() != config_.input_dim()) {
    throw ConfigError("policy head '" + prefix_ + "' expects inputs of width " +
                      std::to_string(config_.input_dim()) + ", got " +
                      shape_string(inputs.value().shape()));
  }
  HeadOutput out;
  out.kind = config_.kind;
  const Var raw = body_(tape, inputs);
  if (config_.kind == ActionKind::discrete) {
    out.log_probs = categorical_log_probs(raw);
  } else {
    out.mean = raw;
    out.log_std = clamp(tape.param(*log_std_), kLogStdMin, kLogStdMax);
  }
  return out;
}

void PolicyHead::check_history(const HistoryWindow& history) const {
  if (history.obs_dim() != config_.obs_dim || history.window() != config_.window) {
    throw ConfigError("history of " + std::to_string(history.window()) + "x" +
                      std::to_string(history.obs_dim()) + " does not match head '" + prefix_ +
                      "' (" + std::to_string(config_.window) + "x" +
                      std::to_string(config_.obs_dim) + ")");
  }
}

AgentAction PolicyHead::act(const HistoryWindow& history, bool deterministic, Rng& rng) const {
  check_history(history);
  Tape tape;
  const Var x = tape.constant(Tensor::row({history.flat().begin(), history.flat().end()}));
  const HeadOutput h = forward(tape, x);
  AgentAction a;
  if (config_.kind == ActionKind::discrete) {
    const auto lp = h.log_probs.value().values();
    if (deterministic) {
      a.index = argmax(lp);
    } else {
      std::vector<double> p(lp.size());
      for (std::size_t k = 0; k < p.size(); ++k) p[k] = std::exp(lp[k]);
      a.index = rng.categorical(p);
    }
    a.log_prob = lp[static_cast<std::size_t>(a.index)];
  } else {
    const auto mu = h.mean.value().values();
    const auto ls = h.log_std.value().values();
    a.value.resize(mu.size());
    double lp = 0.0;
    for (std::size_t d = 0; d < mu.size(); ++d) {
      const double noise = deterministic ? 0.0 : rng.normal();
      a.value[d] = mu[d] + std::exp(ls[d]) * noise;
      lp += -0.5 * noise * noise - ls[d] - kHalfLog2Pi;
    }
    a.log_prob = lp;
  }
  return a;
}

AgentAction PolicyHead::mode(const HistoryWindow& history) const {
  Rng unused(0);
  return act(history, true, unused);
}

std::pair<Var, Var> PolicyHead::log_prob_and_entropy(Tape& tape, const HistoryWindow& history,
                                                     const AgentAction& action) const {
  check_history(history);
  const Var x = tape.constant(Tensor::row({history.flat().begin(), history.flat().end()}));
  const HeadOutput h = forward(tape, x);
  if (config_.kind == ActionKind::discrete) {
    if (action.index < 0 || static_cast<std::size_t>(action.index) >= config_.action_dim) {
      throw ContractError("action " + std::to_string(action.index) + " outside head '" +
                          prefix_ + "' action space");
    }
    const int idx[1] = {action.index};
    return {categorical_log_prob(h.log_probs, idx), categorical_entropy(h.log_probs)};
  }
  if (action.value.size() != config_.action_dim) {
    throw ContractError("action of dimension " + std::to_string(action.value.size()) +
                        " for head '" + prefix_ + "'");
  }
  const Var a = tape.constant(Tensor::row(action.value));
  return {gaussian_log_prob(h.mean, h.log_std, a), gaussian_entropy(h.log_std)};
}

Var kl_divergence(const HeadOutput& p, const HeadOutput& q) {
  if (p.kind != q.kind) throw ContractError("kl_divergence between different families");
  if (p.kind == ActionKind::discrete) {
    if (p.log_probs.cols() != q.log_probs.cols()) {
      throw ContractError("kl_divergence between categoricals of different sizes");
    }
    return categorical_kl(p.log_probs, q.log_probs);
  }
  if (p.mean.cols() != q.mean.cols()) {
    throw ContractError("kl_divergence between Gaussians of different dimension");
  }
  return gaussian_kl(p.mean, p.log_std, q.mean, q.log_std);
}

}  // namespace agentmixer
