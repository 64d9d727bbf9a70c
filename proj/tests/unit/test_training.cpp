#include <doctest.h>

#include <cmath>
#include <set>

#include "agentmixer/training.hpp"

using namespace agentmixer;

namespace {

TrainConfig climbing_config(Algorithm alg, std::uint64_t seed = 1) {
  TrainConfig c;
  c.algorithm = alg;
  c.env.name = "climbing";
  c.seed = seed;
  c.ppo.rollout_threads = 8;
  c.ppo.episode_length = 16;
  c.ppo.ppo_epochs = 2;
  c.eval_episodes = 4;
  c.record_wallclock = false;
  return c;
}

double joint_log_prob_of_row(Trainer& t, const TrajectoryBatch& b, std::size_t row) {
  Tape tape;
  const Var state = tape.constant(Tensor(Shape{1, b.state_dim},
                                         std::vector<double>(b.states.begin() + row * b.state_dim,
                                                             b.states.begin() + (row + 1) * b.state_dim)));
  std::vector<Var> hist;
  for (std::size_t i = 0; i < b.n_agents; ++i) {
    const auto& h = b.histories[i];
    hist.push_back(tape.constant(Tensor(Shape{1, b.history_dim},
                                        std::vector<double>(h.begin() + row * b.history_dim,
                                                            h.begin() + (row + 1) * b.history_dim))));
  }
  const JointPolicyState jps = t.policy_state(tape, state, hist);
  JointActionBatch a;
  a.kind = b.actions.kind;
  a.rows = 1;
  a.n_agents = b.n_agents;
  a.dim = b.actions.dim;
  if (a.kind == ActionKind::discrete) {
    a.index.assign(b.actions.index.begin() + row * b.n_agents, b.actions.index.begin() + (row + 1) * b.n_agents);
  } else {
    const std::size_t w = b.n_agents * b.actions.dim;
    a.value.assign(b.actions.value.begin() + row * w, b.actions.value.begin() + (row + 1) * w);
  }
  return joint_log_prob(jps, a).item();
}

std::map<std::string, Tensor> snapshot(Trainer& t, const std::string& prefix) {
  std::map<std::string, Tensor> out;
  for (const std::string& p : t.params().paths_with_prefix(prefix)) out[p] = t.params().get(p);
  return out;
}

bool unchanged(Trainer& t, const std::map<std::string, Tensor>& before) {
  for (const auto& [p, v] : before)
    if (!same_values(v, t.params().get(p))) return false;
  return true;
}

}  // namespace

TEST_CASE("one thread and one step collect exactly one transition") {
  Trainer t(climbing_config(Algorithm::agentmixer));
  const TrajectoryBatch b = t.collect_rollouts(1, 1);
  CHECK(b.rows() == 1);
  CHECK(b.rewards.size() == 1);
  CHECK(b.log_probs.size() == 1);
  CHECK(b.actions.index.size() == 2);
}

TEST_CASE("collection is reproducible under a fixed seed") {
  for (const char* env : {"climbing", "predator_prey", "bridge", "spread"}) {
    TrainConfig c = climbing_config(Algorithm::agentmixer, 7);
    c.env.name = env;
    Trainer a(c), b(c);
    const TrajectoryBatch x = a.collect_rollouts(3, 20), y = b.collect_rollouts(3, 20);
    CHECK(x.rewards == y.rewards);
    CHECK(x.states == y.states);
    CHECK(x.log_probs == y.log_probs);
    CHECK(x.actions.index == y.actions.index);
    CHECK(x.actions.value == y.actions.value);
  }
}

TEST_CASE("mean climbing reward matches the payoff expectation under the sampled joint") {
  Trainer t(climbing_config(Algorithm::agentmixer, 3));
  const TrajectoryBatch b = t.collect_rollouts(100, 100);
  // Stateless game: every row shares one joint distribution.
  Tape tape;
  const Var state = tape.constant(Tensor(Shape{1, b.state_dim}, std::vector<double>(b.states.begin(), b.states.begin() + b.state_dim)));
  std::vector<Var> hist;
  for (std::size_t i = 0; i < 2; ++i)
    hist.push_back(tape.constant(Tensor(Shape{1, b.history_dim}, std::vector<double>(b.histories[i].begin(), b.histories[i].begin() + b.history_dim))));
  const JointPolicyState jps = t.policy_state(tape, state, hist);
  const auto payoff = default_climbing_payoff();
  double mean = 0.0, second = 0.0;
  for (int a0 = 0; a0 < 3; ++a0)
    for (int a1 = 0; a1 < 3; ++a1) {
      const double p = std::exp(jps.log_probs[0].value()[a0] + jps.log_probs[1].value()[a1]);
      mean += p * payoff[a0][a1];
      second += p * payoff[a0][a1] * payoff[a0][a1];
    }
  const double sd = std::sqrt((second - mean * mean) / static_cast<double>(b.rows()));
  double observed = 0.0;
  for (double r : b.rewards) observed += r / static_cast<double>(b.rows());
  CHECK(std::abs(observed - mean) <= 3.0 * sd);
}

TEST_CASE("GAE with lambda 0 is the one-step TD error") {
  TrajectoryBatch b;
  b.threads = 1;
  b.steps = 3;
  b.rewards = {1.0, 2.0, 3.0};
  b.dones = {0, 0, 0};
  b.values = {0.5, -0.5, 0.25};
  b.bootstrap = {2.0};
  const GaeResult g = compute_gae(b, 0.9, 0.0);
  CHECK(g.advantages[0] == doctest::Approx(1.0 + 0.9 * -0.5 - 0.5));
  CHECK(g.advantages[1] == doctest::Approx(2.0 + 0.9 * 0.25 + 0.5));
  CHECK(g.advantages[2] == doctest::Approx(3.0 + 0.9 * 2.0 - 0.25));
  for (std::size_t t = 0; t < 3; ++t) CHECK(g.returns[t] == doctest::Approx(g.advantages[t] + b.values[t]));
}

TEST_CASE("GAE with lambda 1 and zero values is the discounted return") {
  TrajectoryBatch b;
  b.threads = 1;
  b.steps = 4;
  b.rewards = {1.0, 0.0, 2.0, 1.0};
  b.dones = {0, 1, 0, 0};
  b.values = {0, 0, 0, 0};
  b.bootstrap = {0.0};
  const GaeResult g = compute_gae(b, 0.5, 1.0);
  CHECK(g.advantages[0] == doctest::Approx(1.0));
  CHECK(g.advantages[1] == doctest::Approx(0.0));
  CHECK(g.advantages[2] == doctest::Approx(2.0 + 0.5 * 1.0));
  CHECK(g.advantages[3] == doctest::Approx(1.0));
}

TEST_CASE("GAE matches a direct double sum over two interleaved threads") {
  Rng rng(4);
  TrajectoryBatch b;
  b.threads = 2;
  b.steps = 10;
  for (std::size_t r = 0; r < 20; ++r) {
    b.rewards.push_back(rng.normal());
    b.values.push_back(rng.normal());
    b.dones.push_back(rng.uniform() < 0.2 ? 1.0 : 0.0);
  }
  b.bootstrap = {rng.normal(), rng.normal()};
  const double gamma = 0.97, lambda = 0.9;
  const GaeResult g = compute_gae(b, gamma, lambda);
  for (std::size_t e = 0; e < 2; ++e) {
    for (std::size_t t = 0; t < 10; ++t) {
      double adv = 0.0, weight = 1.0;
      for (std::size_t l = t; l < 10; ++l) {
        const std::size_t row = l * 2 + e;
        const double next_v = b.dones[row] ? 0.0 : (l + 1 < 10 ? b.values[(l + 1) * 2 + e] : b.bootstrap[e]);
        adv += weight * (b.rewards[row] + gamma * next_v - b.values[row]);
        if (b.dones[row]) break;
        weight *= gamma * lambda;
      }
      CHECK(std::abs(g.advantages[t * 2 + e] - adv) <= 1e-12);
    }
  }
}

TEST_CASE("advantage normalization uses the population spread") {
  std::vector<double> a{1.0, 3.0};
  normalize_advantages(a);
  CHECK(a[0] == doctest::Approx(-1.0));
  CHECK(a[1] == doctest::Approx(1.0));
  std::vector<double> flat{2.0, 2.0, 2.0};
  normalize_advantages(flat);
  for (double x : flat) CHECK(x == 0.0);
}

TEST_CASE("zero advantages leave the policy untouched without an entropy bonus") {
  for (Algorithm alg : {Algorithm::agentmixer, Algorithm::ippo}) {
    TrainConfig c = climbing_config(alg);
    c.ppo.entropy_coef = 0.0;
    Trainer t(c);
    TrajectoryBatch b = t.collect_rollouts(4, 4);
    for (double& r : b.rewards) r = 0.0;
    std::fill(b.values.begin(), b.values.end(), 0.0);
    std::fill(b.bootstrap.begin(), b.bootstrap.end(), 0.0);
    const auto actor = snapshot(t, "actor/");
    const auto mixer = snapshot(t, "mixer/");
    const auto critic = snapshot(t, "critic/");
    const UpdateStats s = alg == Algorithm::agentmixer ? t.agentmixer_update(b) : t.independent_ppo_update(b);
    CHECK(unchanged(t, actor));
    CHECK(unchanged(t, mixer));
    CHECK_FALSE(unchanged(t, critic));
    CHECK(s.policy_loss == 0.0);
  }
}

TEST_CASE("a rewarded action becomes more likely after one update") {
  for (Algorithm alg : {Algorithm::agentmixer, Algorithm::ippo}) {
    TrainConfig c = climbing_config(alg, 5);
    c.ppo.entropy_coef = 0.0;
    c.ppo.ppo_epochs = 1;
    Trainer t(c);
    TrajectoryBatch b = t.collect_rollouts(8, 4);
    const std::vector<int> target(b.actions.index.begin(), b.actions.index.begin() + 2);
    for (std::size_t r = 0; r < b.rows(); ++r) {
      const bool same = b.actions.index[r * 2] == target[0] && b.actions.index[r * 2 + 1] == target[1];
      b.rewards[r] = same ? 1.0 : 0.0;
    }
    const double before = joint_log_prob_of_row(t, b, 0);
    const UpdateStats s = alg == Algorithm::agentmixer ? t.agentmixer_update(b) : t.independent_ppo_update(b);
    CHECK(joint_log_prob_of_row(t, b, 0) >= before);
    CHECK(s.clip_frac == 0.0);
    CHECK(s.initial_ratio_max_dev == 0.0);
  }
}

TEST_CASE("AgentMixer reports the IGC consistency rate on discrete actions") {
  Trainer t(climbing_config(Algorithm::agentmixer));
  const UpdateStats s = t.agentmixer_update(t.collect_rollouts(4, 4));
  REQUIRE(s.igc_consistency_rate.has_value());
  CHECK(*s.igc_consistency_rate >= 0.0);
  CHECK(*s.igc_consistency_rate <= 1.0);
}

TEST_CASE("independent PPO on climbing improves and evaluates to a payoff entry") {
  std::set<double> entries;
  for (const auto& row : default_climbing_payoff()) entries.insert(row.begin(), row.end());
  for (std::uint64_t seed : {1, 2, 3}) {
    TrainConfig c = climbing_config(Algorithm::ippo, seed);
    c.ppo.rollout_threads = 50;
    c.ppo.episode_length = 200;
    c.ppo.ppo_epochs = 15;
    c.total_env_steps = 200000;
    c.eval_every = 1000;
    Trainer t(c);
    double last = 0.0;
    t.run([&](const MetricsRow& r) {
      if (r.mean_train_return) last = *r.mean_train_return;
    });
    CHECK(last > -31.0 / 9.0 + 5.0);
    const EvalStats e = t.evaluate_policy(4);
    CHECK(entries.count(e.mean) == 1);
    CHECK(e.std == 0.0);
  }
}

TEST_CASE("identity modifier with the per-agent surrogate reproduces independent PPO") {
  TrainConfig c;
  c.env.name = "spread";
  c.ppo.rollout_threads = 4;
  c.ppo.episode_length = 25;
  c.ppo.ppo_epochs = 3;
  c.ppo.entropy_coef = 0.0;
  c.total_env_steps = 300;
  c.eval_episodes = 2;
  c.record_wallclock = false;
  c.algorithm = Algorithm::ippo;
  TrainConfig m = c;
  m.algorithm = Algorithm::agentmixer;
  m.mixer.identity = true;
  m.ppo.surrogate = Surrogate::per_agent;
  Trainer a(c), b(m);
  std::vector<std::string> la, lb;
  a.run([&](const MetricsRow& r) { la.push_back(metrics_line(r)); });
  b.run([&](const MetricsRow& r) { lb.push_back(metrics_line(r)); });
  REQUIRE(la.size() == 3);
  CHECK(la == lb);
  for (const std::string& p : a.params().paths_with_prefix("actor/"))
    CHECK(same_values(a.params().get(p), b.params().get(p)));
}

TEST_CASE("beta anneals linearly to zero") {
  DistillConfig d;
  CHECK(d.beta(0, 1000) == 1.0);
  CHECK(d.beta(250, 1000) == doctest::Approx(0.5));
  CHECK(d.beta(500, 1000) == 0.0);
  CHECK(d.beta(900, 1000) == 0.0);
}

TEST_CASE("mixture collection at beta 0 samples only the students") {
  TrainConfig c = climbing_config(Algorithm::ail);
  c.env.name = "bridge";
  Trainer t(c);
  const TrajectoryBatch b = t.collect_mixture_rollouts(3, 10, 0.0);
  for (std::size_t r = 0; r < b.rows(); ++r) {
    double lp = 0.0;
    for (std::size_t i = 0; i < 2; ++i) {
      Tape tape;
      const auto& h = b.histories[i];
      const HeadOutput out = t.heads()[i].forward(
          tape, tape.constant(Tensor(Shape{1, b.history_dim},
                                     std::vector<double>(h.begin() + r * b.history_dim, h.begin() + (r + 1) * b.history_dim))));
      lp += out.log_probs.value()[static_cast<std::size_t>(b.actions.index[r * 2 + i])];
    }
    CHECK(std::abs(lp - b.log_probs[r]) <= 1e-12);
  }
}

TEST_CASE("distillation towards an identical teacher has zero loss") {
  TrainConfig c = climbing_config(Algorithm::ail);
  c.distill.distill_epochs = 1;
  Trainer t(c);
  // Copy the teacher into the students; both see the same constant observation.
  for (std::size_t i = 0; i < 2; ++i) {
    const std::string s = "actor/agent" + std::to_string(i), te = "teacher/agent" + std::to_string(i);
    for (const std::string& p : t.params().paths_with_prefix(te + "/"))
      t.params().get(s + p.substr(te.size())) = t.params().get(p);
  }
  const TrajectoryBatch teacher = t.collect_teacher_rollouts(4, 4);
  const UpdateStats s = t.distill_students(teacher);
  CHECK(s.distill_loss <= 1e-12);
}

TEST_CASE("deterministic evaluation on climbing has zero variance") {
  Trainer t(climbing_config(Algorithm::agentmixer));
  const EvalStats e = t.evaluate_policy(10);
  CHECK(e.std == 0.0);
  CHECK(e.episodes == 10);
}

TEST_CASE("evaluating the optimal joint action on climbing returns 11") {
  DecentralizedPolicy p(ClimbingGame().spec(), PolicyConfig{}, 1);
  for (std::size_t i = 0; i < 2; ++i) {
    const std::string last = "actor/agent" + std::to_string(i) + "/body/l1";
    for (double& v : p.params().get(last + "/w").values()) v = 0.0;
    p.params().get(last + "/b").values()[0] = 5.0;
  }
  ClimbingGame g;
  const EvalStats e = evaluate(p.heads(), g, 5, 1);
  CHECK(e.mean == 11.0);
  CHECK(e.std == 0.0);
  CHECK(e.success_rate == 1.0);
}

TEST_CASE("uniform stochastic play on climbing averages the payoff table") {
  DecentralizedPolicy p(ClimbingGame().spec(), PolicyConfig{}, 1);
  for (std::size_t i = 0; i < 2; ++i)
    for (double& v : p.params().get("actor/agent" + std::to_string(i) + "/body/l1/w").values()) v = 0.0;
  ClimbingGame g;
  const int n = 20000;
  const EvalStats e = evaluate(p.heads(), g, n, 2, false);
  double second = 0.0;
  for (const auto& row : default_climbing_payoff())
    for (double v : row) second += v * v / 9.0;
  const double mean = -31.0 / 9.0;
  CHECK(std::abs(e.mean - mean) <= 3.0 * std::sqrt((second - mean * mean) / n));
}

TEST_CASE("evaluation of fresh heads stays within the horizon on every environment") {
  for (const char* env : {"predator_prey", "bridge", "spread"}) {
    EnvParams params;
    params.name = env;
    const auto e = make_env(params);
    DecentralizedPolicy p(e->spec(), PolicyConfig{}, 3);
    const EvalStats s = evaluate(p.heads(), *e, 2, 3);
    CHECK(s.episodes == 2);
    CHECK(std::isfinite(s.mean));
  }
}

TEST_CASE("evaluation never reads the full state") {
  EnvParams params;
  params.name = "predator_prey";
  const auto e = make_env(params);
  DecentralizedPolicy p(e->spec(), PolicyConfig{}, 3);
  evaluate(p.heads(), *e, 3, 3);
  CHECK(e->state_reads() == 0);
}

TEST_CASE("metrics rows have the fixed header and leave absent fields blank") {
  CHECK(metrics_header() ==
        "step,env_steps,mean_train_return,mean_eval_return,eval_std,policy_loss,value_loss,entropy,"
        "approx_kl,clip_frac,igc_consistency_rate,wallclock_s");
  MetricsRow r;
  r.step = 3;
  r.env_steps = 30;
  const std::string line = metrics_line(r);
  CHECK(line.rfind("3,30,,,,", 0) == 0);
  int commas = 0;
  for (char ch : line) commas += ch == ',' ? 1 : 0;
  CHECK(commas == 11);
}

TEST_CASE("training metrics are identical across runs with the same seed") {
  TrainConfig c = climbing_config(Algorithm::agentmixer, 9);
  c.total_env_steps = 3 * 8 * 16;
  std::vector<std::string> a, b;
  Trainer x(c), y(c);
  x.run([&](const MetricsRow& r) { a.push_back(metrics_line(r)); });
  y.run([&](const MetricsRow& r) { b.push_back(metrics_line(r)); });
  CHECK(a.size() == 3);
  CHECK(a == b);
}

TEST_CASE("non-finite losses raise NumericError") {
  Trainer t(climbing_config(Algorithm::ippo));
  TrajectoryBatch b = t.collect_rollouts(4, 2);
  b.rewards[0] = std::nan("");
  CHECK_THROWS_AS(t.independent_ppo_update(b), NumericError);
}

TEST_CASE("AIL requires discrete actions or configured teachers") {
  TrainConfig c = climbing_config(Algorithm::ail);
  Trainer t(c);
  CHECK(t.teacher_heads().size() == 2);
  CHECK(t.modifier() == nullptr);
}
