#include "agentmixer/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <stdexcept>

namespace agentmixer {

std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::agentmixer: return "agentmixer";
    case Algorithm::ippo: return "ippo";
    case Algorithm::ail: return "ail";
  }
  return "agentmixer";
}

Algorithm algorithm_from_string(const std::string& s) {
  if (s == "agentmixer") return Algorithm::agentmixer;
  if (s == "ippo") return Algorithm::ippo;
  if (s == "ail") return Algorithm::ail;
  throw ConfigError("unknown algorithm '" + s + "' (expected agentmixer, ippo or ail)");
}

std::string to_string(Surrogate s) {
  switch (s) {
    case Surrogate::automatic: return "auto";
    case Surrogate::per_agent: return "per_agent";
    case Surrogate::joint: return "joint";
  }
  return "auto";
}

Surrogate surrogate_from_string(const std::string& s) {
  if (s == "auto") return Surrogate::automatic;
  if (s == "per_agent") return Surrogate::per_agent;
  if (s == "joint") return Surrogate::joint;
  throw ConfigError("unknown surrogate '" + s + "' (expected auto, per_agent or joint)");
}

double DistillConfig::beta(std::uint64_t done, std::uint64_t total) const {
  if (total == 0 || anneal_fraction <= 0.0) return 0.0;
  const double span = anneal_fraction * static_cast<double>(total);
  const double frac = static_cast<double>(done) / span;
  return std::clamp(beta_initial * (1.0 - frac), 0.0, 1.0);
}

GaeResult compute_gae(const TrajectoryBatch& batch, double gamma, double lambda) {
  const std::size_t T = batch.steps, E = batch.threads;
  GaeResult out;
  out.advantages.assign(T * E, 0.0);
  out.returns.assign(T * E, 0.0);
  for (std::size_t e = 0; e < E; ++e) {
    double next_adv = 0.0;
    double next_value = batch.bootstrap.empty() ? 0.0 : batch.bootstrap[e];
    for (std::size_t t = T; t-- > 0;) {
      const std::size_t r = t * E + e;
      const double live = 1.0 - batch.dones[r];
      const double delta = batch.rewards[r] + gamma * next_value * live - batch.values[r];
      next_adv = delta + gamma * lambda * live * next_adv;
      out.advantages[r] = next_adv;
      out.returns[r] = next_adv + batch.values[r];
      next_value = batch.values[r];
    }
  }
  return out;
}

void normalize_advantages(std::vector<double>& adv) {
  if (adv.empty()) return;
  const double n = static_cast<double>(adv.size());
  const double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / n;
  double var = 0.0;
  for (double a : adv) var += (a - mean) * (a - mean);
  const double sd = std::sqrt(var / n);
  for (double& a : adv) a = sd > 1e-12 ? (a - mean) / sd : 0.0;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

Tensor rows_of(const std::vector<double>& flat, std::size_t width, std::span<const std::size_t> rows) {
  Tensor out = Tensor::matrix(rows.size(), width);
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(rows[r] * width), width,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * width));
  return out;
}

JointActionBatch select_actions(const JointActionBatch& a, std::span<const std::size_t> rows) {
  JointActionBatch out;
  out.kind = a.kind;
  out.rows = rows.size();
  out.n_agents = a.n_agents;
  out.dim = a.dim;
  if (a.kind == ActionKind::discrete) {
    for (std::size_t r : rows)
      for (std::size_t i = 0; i < a.n_agents; ++i) out.index.push_back(a.index[r * a.n_agents + i]);
  } else {
    const std::size_t w = a.n_agents * a.dim;
    for (std::size_t r : rows)
      out.value.insert(out.value.end(), a.value.begin() + static_cast<std::ptrdiff_t>(r * w),
                       a.value.begin() + static_cast<std::ptrdiff_t>((r + 1) * w));
  }
  return out;
}

void append_actions(JointActionBatch& dst, const JointActionBatch& src) {
  dst.kind = src.kind;
  dst.n_agents = src.n_agents;
  dst.dim = src.dim;
  dst.rows += src.rows;
  dst.index.insert(dst.index.end(), src.index.begin(), src.index.end());
  dst.value.insert(dst.value.end(), src.value.begin(), src.value.end());
}

JointAction row_action(const JointActionBatch& a, std::size_t row) {
  JointAction out;
  if (a.kind == ActionKind::discrete) {
    out.index.assign(a.index.begin() + static_cast<std::ptrdiff_t>(row * a.n_agents),
                     a.index.begin() + static_cast<std::ptrdiff_t>((row + 1) * a.n_agents));
  } else {
    const std::size_t w = a.n_agents * a.dim;
    out.value.assign(a.value.begin() + static_cast<std::ptrdiff_t>(row * w),
                     a.value.begin() + static_cast<std::ptrdiff_t>((row + 1) * w));
  }
  return out;
}

// Rows of a minibatch with identical network inputs are evaluated once and gathered.
struct UniqueRows {
  std::vector<std::size_t> source;  // batch row of each distinct input
  std::vector<std::size_t> where;   // distinct input of each minibatch row
  bool all_distinct() const { return source.size() == where.size(); }
};

UniqueRows unique_rows(const TrajectoryBatch& batch, std::span<const std::size_t> rows) {
  UniqueRows u;
  std::map<std::vector<double>, std::size_t> seen;
  std::vector<double> key;
  for (std::size_t r : rows) {
    key.assign(batch.states.begin() + static_cast<std::ptrdiff_t>(r * batch.state_dim),
               batch.states.begin() + static_cast<std::ptrdiff_t>((r + 1) * batch.state_dim));
    for (const auto& h : batch.histories)
      key.insert(key.end(), h.begin() + static_cast<std::ptrdiff_t>(r * batch.history_dim),
                 h.begin() + static_cast<std::ptrdiff_t>((r + 1) * batch.history_dim));
    const auto [it, inserted] = seen.emplace(key, u.source.size());
    if (inserted) u.source.push_back(r);
    u.where.push_back(it->second);
  }
  return u;
}

JointPolicyState expand_rows(const JointPolicyState& jps, std::span<const std::size_t> where) {
  JointPolicyState out = jps;
  out.rows = where.size();
  auto g = [&](Var& v) { v = gather_rows(v, where); };
  for (std::size_t i = 0; i < jps.n_agents; ++i) {
    if (jps.kind == ActionKind::discrete) {
      g(out.individual[i].log_probs);
      if (jps.epsilon.empty()) {
        out.logits[i] = out.log_probs[i] = out.individual[i].log_probs;
      } else {
        g(out.epsilon[i]);
        g(out.logits[i]);
        g(out.log_probs[i]);
      }
    } else {
      const bool own_std = jps.log_std[i].id() == jps.individual[i].log_std.id();
      g(out.individual[i].mean);
      out.mean[i] = out.individual[i].mean;
      if (!own_std) g(out.log_std[i]);
    }
  }
  return out;
}

HeadOutput detached(const HeadOutput& h) {
  HeadOutput out;
  out.kind = h.kind;
  if (h.kind == ActionKind::discrete) {
    out.log_probs = detach(h.log_probs);
  } else {
    out.mean = detach(h.mean);
    out.log_std = detach(h.log_std);
  }
  return out;
}

}  // namespace

std::string metrics_header() {
  return "step,env_steps,mean_train_return,mean_eval_return,eval_std,policy_loss,value_loss,"
         "entropy,approx_kl,clip_frac,igc_consistency_rate,wallclock_s";
}

std::string metrics_line(const MetricsRow& row) {
  const UpdateStats& s = row.stats;
  return std::to_string(row.step) + "," + std::to_string(row.env_steps) + "," +
         fmt_opt(row.mean_train_return) + "," + fmt_opt(row.mean_eval_return) + "," +
         fmt_opt(row.eval_std) + "," + fmt(s.policy_loss) + "," + fmt(s.value_loss) + "," +
         fmt(s.entropy) + "," + fmt(s.approx_kl) + "," + fmt(s.clip_frac) + "," +
         fmt_opt(s.igc_consistency_rate) + "," + fmt(row.wallclock_s);
}

HeadConfig actor_head_config(const EnvSpec& spec, const PolicyConfig& config) {
  HeadConfig h;
  h.kind = spec.kind;
  h.obs_dim = spec.obs_dim;
  h.window = config.window;
  h.action_dim = spec.action_dim;
  h.hidden = config.actor_hidden;
  h.act = config.act;
  h.init_log_std = config.init_log_std;
  return h;
}

DecentralizedPolicy::DecentralizedPolicy(const EnvSpec& spec, const PolicyConfig& config,
                                         std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "policy-init");
  const HeadConfig hc = actor_head_config(spec, config);
  for (std::size_t i = 0; i < spec.n_agents; ++i)
    heads_.emplace_back(store_, "actor/agent" + std::to_string(i), hc, rng);
}

EvalStats evaluate(const std::vector<PolicyHead>& heads, Env& env, int n_episodes,
                   std::uint64_t seed, bool deterministic) {
  const EnvSpec& spec = env.spec();
  if (heads.size() != spec.n_agents) {
    throw ConfigError("evaluation with " + std::to_string(heads.size()) + " heads on an env with " +
                      std::to_string(spec.n_agents) + " agents");
  }
  Rng env_rng = Rng::stream(seed, "eval-env");
  Rng act_rng = Rng::stream(seed, "eval-act");
  EvalStats stats;
  std::vector<HistoryWindow> history;
  for (std::size_t i = 0; i < spec.n_agents; ++i)
    history.emplace_back(static_cast<int>(i), heads[i].config().window, spec.obs_dim);

  for (int ep = 0; ep < n_episodes; ++ep) {
    env.reset(env_rng);
    for (std::size_t i = 0; i < spec.n_agents; ++i) {
      history[i].reset();
      history[i].push(env.observation(i));
    }
    double ret = 0.0;
    for (std::size_t t = 0; t < spec.horizon; ++t) {
      JointAction a;
      for (std::size_t i = 0; i < spec.n_agents; ++i) {
        const AgentAction ai = heads[i].act(history[i], deterministic, act_rng);
        if (spec.kind == ActionKind::discrete) {
          a.index.push_back(ai.index);
        } else {
          a.value.insert(a.value.end(), ai.value.begin(), ai.value.end());
        }
      }
      const StepResult r = env.step(a, env_rng);
      ret += r.reward;
      if (r.done) break;
      for (std::size_t i = 0; i < spec.n_agents; ++i) history[i].push(env.observation(i));
    }
    stats.returns.push_back(ret);
  }
  stats.episodes = n_episodes;
  stats.mean = mean_of(stats.returns);
  double var = 0.0;
  int wins = 0;
  for (double r : stats.returns) {
    var += (r - stats.mean) * (r - stats.mean);
    wins += r > 0.0 ? 1 : 0;
  }
  if (n_episodes > 0) {
    stats.std = std::sqrt(var / n_episodes);
    stats.success_rate = static_cast<double>(wins) / n_episodes;
  }
  return stats;
}

Trainer::Trainer(const TrainConfig& config) : config_(config) {
  if (config_.ppo.rollout_threads <= 0 || config_.ppo.episode_length <= 0) {
    throw ConfigError("ppo.rollout_threads and ppo.episode_length must be positive");
  }
  if (config_.ppo.minibatches <= 0) throw ConfigError("ppo.minibatches must be positive");
  spec_ = make_env(config_.env)->spec();
  const std::size_t n = spec_.n_agents;
  if (!config_.policy.tau.empty() && config_.policy.tau.size() != n) {
    throw ConfigError("policy.tau needs one temperature per agent");
  }

  Rng policy_rng = Rng::stream(config_.seed, "policy-init");
  const HeadConfig hc = actor_head_config(spec_, config_.policy);
  for (std::size_t i = 0; i < n; ++i)
    heads_.emplace_back(store_, "actor/agent" + std::to_string(i), hc, policy_rng);

  if (config_.algorithm == Algorithm::agentmixer) {
    MixerConfig mc = config_.mixer;
    mc.n_agents = n;
    Rng pm_rng = Rng::stream(config_.seed, "pm-init");
    const std::size_t d = spec_.action_dim;
    const std::size_t feat = spec_.kind == ActionKind::discrete ? d : 2 * d;
    pm_ = std::make_unique<PolicyModifier>(store_, "mixer", mc, spec_.kind, spec_.state_dim, feat, d,
                                           pm_rng);
  }

  Rng critic_rng = Rng::stream(config_.seed, "critic-init");
  critic_ = Mlp::create(store_, "critic", spec_.state_dim, config_.policy.critic_hidden, 1,
                        critic_rng, 1.0, config_.policy.act);

  if (config_.algorithm == Algorithm::ail) {
    Rng teacher_rng = Rng::stream(config_.seed, "teacher-init");
    HeadConfig tc = hc;
    tc.obs_dim = spec_.state_dim;
    tc.window = 1;
    for (std::size_t i = 0; i < n; ++i)
      teacher_.emplace_back(store_, "teacher/agent" + std::to_string(i), tc, teacher_rng);
  }

  const PpoConfig& p = config_.ppo;
  auto adam = [&](double lr) { return AdamConfig{lr, 0.9, 0.999, p.adam_eps, p.weight_decay}; };
  const auto actor_paths = store_.paths_with_prefix("actor/");
  const auto mixer_paths = store_.paths_with_prefix("mixer/");
  critic_group_ = store_.paths_with_prefix("critic/");
  critic_opt_ = Adam(critic_group_, adam(p.critic_lr));
  if (config_.algorithm == Algorithm::ail) {
    policy_group_ = store_.paths_with_prefix("teacher/");
    actor_opt_ = Adam(policy_group_, adam(p.actor_lr));
    student_opt_ = Adam(actor_paths, adam(config_.distill.student_lr));
  } else {
    policy_group_ = concat(actor_paths, mixer_paths);
    actor_opt_ = Adam(actor_paths, adam(p.actor_lr));
    if (pm_) mixer_opt_ = Adam(mixer_paths, adam(config_.mixer.mixer_lr));
  }

  slots_.tag = "";
  mix_slots_.tag = "mix-";
  mix_rng_ = Rng::stream(config_.seed, "behaviour-mix");
  minibatch_rng_ = Rng::stream(config_.seed, "minibatch");
  start_time_ = now_seconds();
}

void Trainer::reset_slot(EnvSlot& slot) {
  slot.env->reset(slot.env_rng);
  for (std::size_t i = 0; i < slot.history.size(); ++i) {
    slot.history[i].reset();
    slot.history[i].push(slot.env->observation(i));
  }
  slot.episode_return = 0.0;
}

void Trainer::ensure_slots(SlotSet& set, int threads) {
  if (set.slots.size() == static_cast<std::size_t>(threads)) return;
  set.slots.clear();
  set.sample_rngs.clear();
  for (int e = 0; e < threads; ++e) {
    EnvSlot slot;
    slot.env = make_env(config_.env);
    slot.env_rng = Rng::stream(config_.seed, set.tag + "env", static_cast<std::uint64_t>(e));
    for (std::size_t i = 0; i < spec_.n_agents; ++i)
      slot.history.emplace_back(static_cast<int>(i), config_.policy.window, spec_.obs_dim);
    reset_slot(slot);
    set.slots.push_back(std::move(slot));
    set.sample_rngs.push_back(Rng::stream(config_.seed, set.tag + "sampling", static_cast<std::uint64_t>(e)));
  }
}

JointPolicyState Trainer::teacher_state(Tape& tape, const Var& state) {
  const std::vector<Var> inputs(spec_.n_agents, state);
  return product_policy_state(tape, inputs, teacher_);
}

JointPolicyState Trainer::forward_path(Tape& tape, PolicyPath path, const Var& state,
                                       std::span<const Var> histories) {
  switch (path) {
    case PolicyPath::joint: {
      JointConfig jc;
      jc.tau = config_.policy.tau;
      return build_joint(tape, state, histories, heads_, *pm_, jc);
    }
    case PolicyPath::product: return product_policy_state(tape, histories, heads_);
    case PolicyPath::teacher: return teacher_state(tape, state);
  }
  throw ContractError("unknown policy path");
}

JointPolicyState Trainer::policy_state(Tape& tape, const Var& state, std::span<const Var> histories) {
  return forward_path(tape, pm_ ? PolicyPath::joint : PolicyPath::product, state, histories);
}

Var Trainer::critic_value(Tape& tape, const Var& state) const { return critic_(tape, state); }

TrajectoryBatch Trainer::collect(SlotSet& set, int steps, Behaviour behaviour, double beta) {
  const std::size_t E = set.slots.size(), N = spec_.n_agents;
  TrajectoryBatch batch;
  batch.threads = E;
  batch.steps = static_cast<std::size_t>(steps);
  batch.n_agents = N;
  batch.state_dim = spec_.state_dim;
  batch.history_dim = spec_.obs_dim * config_.policy.window;
  batch.histories.resize(N);
  batch.agent_log_probs.resize(N);
  batch.actions.kind = spec_.kind;
  batch.actions.n_agents = N;

  auto gather_state = [&] {
    Tensor s = Tensor::matrix(E, spec_.state_dim);
    for (std::size_t e = 0; e < E; ++e) {
      const std::vector<double> v = set.slots[e].env->state();
      std::copy(v.begin(), v.end(), s.data().begin() + static_cast<std::ptrdiff_t>(e * spec_.state_dim));
    }
    return s;
  };

  for (int t = 0; t < steps; ++t) {
    Tape tape;
    const Tensor state = gather_state();
    batch.states.insert(batch.states.end(), state.data().begin(), state.data().end());
    const Var sv = tape.constant(state);
    std::vector<Var> hv;
    for (std::size_t i = 0; i < N; ++i) {
      Tensor h = Tensor::matrix(E, batch.history_dim);
      for (std::size_t e = 0; e < E; ++e) {
        const auto flat = set.slots[e].history[i].flat();
        std::copy(flat.begin(), flat.end(), h.data().begin() + static_cast<std::ptrdiff_t>(e * batch.history_dim));
      }
      batch.histories[i].insert(batch.histories[i].end(), h.data().begin(), h.data().end());
      hv.push_back(tape.constant(std::move(h)));
    }

    JointPolicyState jps;
    JointActionBatch actions;
    std::vector<std::vector<double>> agent_lp(N, std::vector<double>(E));
    auto record_log_probs = [&](const JointPolicyState& source, const JointActionBatch& a,
                                const std::vector<bool>* use) {
      const std::vector<Var> lp = joint_agent_log_probs(source, a);
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t e = 0; e < E; ++e)
          if (!use || (*use)[e]) agent_lp[i][e] = lp[i].value()[e];
    };

    if (behaviour == Behaviour::mixture) {
      const JointPolicyState teacher = teacher_state(tape, sv);
      const JointPolicyState student = forward_path(tape, PolicyPath::product, sv, hv);
      const JointSample ts = joint_sample(teacher, set.sample_rngs);
      const JointSample ss = joint_sample(student, set.sample_rngs);
      std::vector<bool> from_teacher(E), from_student(E);
      for (std::size_t e = 0; e < E; ++e) {
        from_teacher[e] = mix_rng_.uniform() < beta;
        from_student[e] = !from_teacher[e];
      }
      actions = ts.actions;
      for (std::size_t e = 0; e < E; ++e) {
        if (from_teacher[e]) continue;
        if (spec_.kind == ActionKind::discrete) {
          for (std::size_t i = 0; i < N; ++i) actions.index[e * N + i] = ss.actions.index[e * N + i];
        } else {
          const std::size_t w = N * actions.dim;
          std::copy_n(ss.actions.value.begin() + static_cast<std::ptrdiff_t>(e * w), w,
                      actions.value.begin() + static_cast<std::ptrdiff_t>(e * w));
        }
      }
      record_log_probs(teacher, actions, &from_teacher);
      record_log_probs(student, actions, &from_student);
    } else {
      const PolicyPath path = behaviour == Behaviour::teacher ? PolicyPath::teacher
                              : pm_                           ? PolicyPath::joint
                                                              : PolicyPath::product;
      jps = forward_path(tape, path, sv, hv);
      actions = joint_sample(jps, set.sample_rngs).actions;
      record_log_probs(jps, actions, nullptr);
    }

    const Var values = critic_value(tape, sv);
    for (std::size_t e = 0; e < E; ++e) {
      double total = 0.0;
      for (std::size_t i = 0; i < N; ++i) total += agent_lp[i][e];
      batch.log_probs.push_back(total);
      batch.values.push_back(values.value()[e]);
    }
    for (std::size_t i = 0; i < N; ++i)
      batch.agent_log_probs[i].insert(batch.agent_log_probs[i].end(), agent_lp[i].begin(), agent_lp[i].end());
    append_actions(batch.actions, actions);

    for (std::size_t e = 0; e < E; ++e) {
      EnvSlot& slot = set.slots[e];
      StepResult r;
      try {
        r = slot.env->step(row_action(actions, e), slot.env_rng);
      } catch (const std::exception& ex) {
        throw std::runtime_error("rollout thread " + std::to_string(e) + ": " + ex.what());
      }
      batch.rewards.push_back(r.reward);
      batch.dones.push_back(r.done ? 1.0 : 0.0);
      slot.episode_return += r.reward;
      if (r.done) {
        batch.episode_returns.push_back(slot.episode_return);
        reset_slot(slot);
      } else {
        for (std::size_t i = 0; i < N; ++i) slot.history[i].push(slot.env->observation(i));
      }
    }
  }

  Tape tape;
  const Var last = critic_value(tape, tape.constant(gather_state()));
  batch.bootstrap.assign(last.value().values().begin(), last.value().values().end());
  env_steps_ += E * static_cast<std::size_t>(steps);
  return batch;
}

TrajectoryBatch Trainer::collect_rollouts(int threads, int steps) {
  ensure_slots(slots_, threads);
  return collect(slots_, steps, Behaviour::learner, 0.0);
}

TrajectoryBatch Trainer::collect_teacher_rollouts(int threads, int steps) {
  if (teacher_.empty()) throw ContractError("teacher rollouts need the ail algorithm");
  ensure_slots(slots_, threads);
  return collect(slots_, steps, Behaviour::teacher, 1.0);
}

TrajectoryBatch Trainer::collect_mixture_rollouts(int threads, int steps, double beta) {
  if (teacher_.empty()) throw ContractError("mixture rollouts need the ail algorithm");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ContractError("beta must lie in [0, 1]");
  ensure_slots(mix_slots_, threads);
  return collect(mix_slots_, steps, Behaviour::mixture, beta);
}

UpdateStats Trainer::ppo_update(const TrajectoryBatch& batch, PolicyPath path) {
  const PpoConfig& p = config_.ppo;
  const std::size_t rows = batch.rows(), N = batch.n_agents;
  if (rows == 0) return {};
  GaeResult gae = compute_gae(batch, p.gamma, p.gae_lambda);
  normalize_advantages(gae.advantages);

  std::vector<std::size_t> order(rows);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t mb = static_cast<std::size_t>(p.minibatches);
  const std::size_t mb_size = (rows + mb - 1) / mb;

  UpdateStats stats;
  std::size_t passes = 0;
  bool first = true;
  for (int epoch = 0; epoch < p.ppo_epochs; ++epoch) {
    if (mb > 1) {
      for (std::size_t i = rows; i-- > 1;)
        std::swap(order[i], order[static_cast<std::size_t>(minibatch_rng_.uniform_int(static_cast<int>(i + 1)))]);
    }
    for (std::size_t start = 0; start < rows; start += mb_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(mb_size, rows - start));
      const std::size_t B = idx.size();
      Tape tape;
      const UniqueRows uniq = unique_rows(batch, idx);
      const Var sv = tape.constant(rows_of(batch.states, batch.state_dim, uniq.source));
      std::vector<Var> hv;
      for (std::size_t i = 0; i < N; ++i) hv.push_back(tape.constant(rows_of(batch.histories[i], batch.history_dim, uniq.source)));
      const JointActionBatch actions = select_actions(batch.actions, idx);
      Tensor adv = Tensor::matrix(B, 1), ret = Tensor::matrix(B, 1), old_joint = Tensor::matrix(B, 1);
      std::vector<Tensor> old(N, Tensor::matrix(B, 1));
      for (std::size_t b = 0; b < B; ++b) {
        adv[b] = gae.advantages[idx[b]];
        ret[b] = gae.returns[idx[b]];
        old_joint[b] = batch.log_probs[idx[b]];
        for (std::size_t i = 0; i < N; ++i) old[i][b] = batch.agent_log_probs[i][idx[b]];
      }
      const Var adv_v = tape.constant(adv);

      JointPolicyState jps = forward_path(tape, path, sv, hv);
      if (!uniq.all_distinct()) jps = expand_rows(jps, uniq.where);
      const std::vector<Var> lp = joint_agent_log_probs(jps, actions);
      Var joint_lp = lp[0];
      for (std::size_t i = 1; i < N; ++i) joint_lp = add(joint_lp, lp[i]);
      const Var joint_ratio = exp(sub(joint_lp, tape.constant(old_joint)));

      auto surrogate = [&](const Var& ratio) {
        const Var clipped = clamp(ratio, 1.0 - p.clip, 1.0 + p.clip);
        return neg(mean(minimum(mul(ratio, adv_v), mul(clipped, adv_v))));
      };
      Var policy_loss;
      std::vector<Var> ratios;
      const bool joint_surrogate =
          p.surrogate == Surrogate::joint ||
          (p.surrogate == Surrogate::automatic && config_.algorithm == Algorithm::agentmixer);
      if (joint_surrogate) {
        policy_loss = surrogate(joint_ratio);
        ratios.push_back(joint_ratio);
      } else {
        for (std::size_t i = 0; i < N; ++i) {
          ratios.push_back(exp(sub(lp[i], tape.constant(old[i]))));
          const Var term = surrogate(ratios.back());
          policy_loss = i == 0 ? term : add(policy_loss, term);
        }
      }
      const Var entropy = mean(joint_entropy(jps));
      Var values = critic_value(tape, sv);
      if (!uniq.all_distinct()) values = gather_rows(values, uniq.where);
      const Var value_loss = mean(square(sub(values, tape.constant(ret))));
      const Var loss = add(sub(policy_loss, scale(entropy, p.entropy_coef)), scale(value_loss, p.value_coef));
      if (!std::isfinite(loss.item())) {
        throw NumericError("non-finite loss at update " + std::to_string(updates_) + " (env step " +
                           std::to_string(env_steps_) + ", epoch " + std::to_string(epoch) +
                           "): policy " + fmt(policy_loss.item()) + ", value " +
                           fmt(value_loss.item()) + ", entropy " + fmt(entropy.item()));
      }

      double kl = 0.0, clipped = 0.0, dev = 0.0;
      const auto jr = joint_ratio.value().values();
      for (std::size_t b = 0; b < B; ++b) {
        kl += old_joint[b] - joint_lp.value()[b];
        dev = std::max(dev, std::abs(jr[b] - 1.0));
      }
      std::size_t ratio_count = 0;
      for (const Var& r : ratios)
        for (double x : r.value().values()) {
          clipped += std::abs(x - 1.0) > p.clip ? 1.0 : 0.0;
          ++ratio_count;
        }
      if (first) {
        stats.initial_ratio_max_dev = dev;
        if (path == PolicyPath::joint && jps.kind == ActionKind::discrete)
          stats.igc_consistency_rate = check_igc(jps).rate;
        first = false;
      }
      stats.policy_loss += policy_loss.item();
      stats.value_loss += value_loss.item();
      stats.entropy += entropy.item();
      stats.approx_kl += kl / static_cast<double>(B);
      stats.clip_frac += clipped / static_cast<double>(ratio_count);
      ++passes;

      store_.zero_grad();
      tape.backward(loss);
      check_finite_grads(store_, policy_group_);
      check_finite_grads(store_, critic_group_);
      clip_grad_norm(store_, policy_group_, p.max_grad_norm);
      clip_grad_norm(store_, critic_group_, p.max_grad_norm);
      actor_opt_.step(store_);
      if (pm_ && path == PolicyPath::joint) mixer_opt_.step(store_);
      critic_opt_.step(store_);
      ++store_.step;
    }
  }
  if (passes > 0) {
    const double n = static_cast<double>(passes);
    stats.policy_loss /= n;
    stats.value_loss /= n;
    stats.entropy /= n;
    stats.approx_kl /= n;
    stats.clip_frac /= n;
  }
  return stats;
}

UpdateStats Trainer::agentmixer_update(const TrajectoryBatch& batch) {
  if (!pm_) throw ContractError("agentmixer_update needs the agentmixer algorithm");
  return ppo_update(batch, PolicyPath::joint);
}

UpdateStats Trainer::independent_ppo_update(const TrajectoryBatch& batch) {
  if (config_.algorithm == Algorithm::ail) throw ContractError("independent_ppo_update on an ail trainer");
  return ppo_update(batch, PolicyPath::product);
}

UpdateStats Trainer::distill_students(const TrajectoryBatch& batch) {
  const std::size_t rows = batch.rows(), N = batch.n_agents;
  UpdateStats stats;
  if (rows == 0) return stats;
  std::vector<std::size_t> all(rows);
  std::iota(all.begin(), all.end(), 0);
  const std::vector<std::string>& students = student_opt_.paths();
  const UniqueRows uniq = unique_rows(batch, all);
  double total = 0.0;
  for (int epoch = 0; epoch < config_.distill.distill_epochs; ++epoch) {
    Tape tape;
    const Var sv = tape.constant(rows_of(batch.states, batch.state_dim, uniq.source));
    std::vector<Var> hv;
    for (std::size_t i = 0; i < N; ++i) hv.push_back(tape.constant(rows_of(batch.histories[i], batch.history_dim, uniq.source)));
    const JointPolicyState teacher = teacher_state(tape, sv);
    const JointPolicyState student = product_policy_state(tape, hv, heads_);
    Var kl;
    for (std::size_t i = 0; i < N; ++i) {
      const Var k = kl_divergence(detached(teacher.individual[i]), student.individual[i]);
      kl = i == 0 ? k : add(kl, k);
    }
    if (!uniq.all_distinct()) kl = gather_rows(kl, uniq.where);
    const Var loss = scale(mean(kl), config_.distill.distill_weight);
    if (!std::isfinite(loss.item())) {
      throw NumericError("non-finite distillation loss at update " + std::to_string(updates_));
    }
    total += loss.item();
    store_.zero_grad();
    tape.backward(loss);
    check_finite_grads(store_, students);
    clip_grad_norm(store_, students, config_.ppo.max_grad_norm);
    student_opt_.step(store_);
  }
  if (config_.distill.distill_epochs > 0) stats.distill_loss = total / config_.distill.distill_epochs;
  return stats;
}

UpdateStats Trainer::ail_update(const TrajectoryBatch& teacher_batch, const TrajectoryBatch* mixture_batch) {
  if (teacher_.empty()) throw ContractError("ail_update needs the ail algorithm");
  UpdateStats stats = ppo_update(teacher_batch, PolicyPath::teacher);
  stats.distill_loss = distill_students(mixture_batch ? *mixture_batch : teacher_batch).distill_loss;
  return stats;
}

EvalStats Trainer::evaluate_policy(int n_episodes) const {
  const std::unique_ptr<Env> env = make_env(config_.env);
  return evaluate(heads_, *env, n_episodes, config_.seed, true);
}

MetricsRow Trainer::iterate() {
  const int threads = config_.ppo.rollout_threads, steps = config_.ppo.episode_length;
  MetricsRow row;
  if (config_.algorithm == Algorithm::ail) {
    const double beta = config_.distill.beta(env_steps_, config_.total_env_steps);
    const TrajectoryBatch teacher = collect_teacher_rollouts(threads, steps);
    if (beta >= 1.0) {
      row.stats = ail_update(teacher, nullptr);
    } else {
      const TrajectoryBatch mixture = collect_mixture_rollouts(threads, steps, beta);
      row.stats = ail_update(teacher, &mixture);
    }
    if (!teacher.episode_returns.empty()) row.mean_train_return = mean_of(teacher.episode_returns);
  } else {
    const TrajectoryBatch batch = collect_rollouts(threads, steps);
    row.stats = pm_ ? agentmixer_update(batch) : independent_ppo_update(batch);
    if (!batch.episode_returns.empty()) row.mean_train_return = mean_of(batch.episode_returns);
  }
  ++updates_;
  row.step = updates_;
  row.env_steps = env_steps_;
  const bool due = config_.eval_every > 0 && updates_ % static_cast<std::uint64_t>(config_.eval_every) == 0;
  if ((due || finished()) && config_.eval_episodes > 0) {
    const EvalStats ev = evaluate_policy(config_.eval_episodes);
    row.mean_eval_return = ev.mean;
    row.eval_std = ev.std;
  }
  row.wallclock_s = config_.record_wallclock ? now_seconds() - start_time_ : 0.0;
  return row;
}

void Trainer::run(const std::function<void(const MetricsRow&)>& on_row) {
  while (!finished()) {
    const MetricsRow row = iterate();
    if (on_row) on_row(row);
  }
}

}  // namespace agentmixer
