#include <doctest.h>

#include <cmath>

#include "agentmixer/joint.hpp"

using namespace agentmixer;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, double sd = 1.0) {
  Tensor t = Tensor::matrix(r, c);
  for (double& v : t.values()) v = sd * rng.normal();
  return t;
}

struct Fixture {
  ParamStore store;
  std::vector<PolicyHead> heads;
  PolicyModifier pm;

  Fixture(ActionKind kind, std::size_t n, std::size_t k, Rng& rng, bool identity = false) {
    HeadConfig hc;
    hc.kind = kind;
    hc.obs_dim = 3;
    hc.action_dim = k;
    hc.hidden = {8};
    hc.out_gain = 1.0;
    for (std::size_t i = 0; i < n; ++i) heads.emplace_back(store, "actor/agent" + std::to_string(i), hc, rng);
    MixerConfig mc;
    mc.n_agents = n;
    mc.channel_dim = 8;
    mc.agent_mix_hidden = 8;
    mc.channel_mix_hidden = 16;
    mc.identity = identity;
    const std::size_t feat = kind == ActionKind::discrete ? k : 2 * k;
    pm = PolicyModifier(store, "mixer", mc, kind, 4, feat, k, rng);
  }

  JointPolicyState build(Tape& tape, const Tensor& state, const std::vector<Tensor>& hist,
                         JointConfig config = {}) {
    std::vector<Var> h;
    for (const Tensor& t : hist) h.push_back(tape.constant(t));
    return build_joint(tape, tape.constant(state), h, heads, pm, config);
  }
};

// Joint state whose per-agent logits are log alpha + eps, with eps supplied directly.
JointPolicyState with_perturbation(Tape& tape, const std::vector<Tensor>& log_alpha,
                                   const std::vector<Tensor>& eps) {
  JointPolicyState jps;
  jps.kind = ActionKind::discrete;
  jps.n_agents = log_alpha.size();
  jps.rows = log_alpha[0].rows();
  jps.tau.assign(jps.n_agents, 1.0);
  for (std::size_t i = 0; i < jps.n_agents; ++i) {
    HeadOutput h;
    h.log_probs = categorical_log_probs(tape.constant(log_alpha[i]));
    jps.individual.push_back(h);
    const Var z = add(tape.constant(eps[i]), h.log_probs);
    jps.epsilon.push_back(tape.constant(eps[i]));
    jps.logits.push_back(z);
    jps.log_probs.push_back(categorical_log_probs(z));
  }
  return jps;
}

}  // namespace

TEST_CASE("continuous joint mean is the concatenation of the individual means") {
  Rng rng(1);
  Fixture f(ActionKind::continuous, 3, 2, rng);
  Tape tape;
  const std::vector<Tensor> hist{random_matrix(5, 3, rng), random_matrix(5, 3, rng), random_matrix(5, 3, rng)};
  const JointPolicyState jps = f.build(tape, random_matrix(5, 4, rng), hist);
  for (std::size_t i = 0; i < 3; ++i) {
    Tape t2;
    const HeadOutput h = f.heads[i].forward(t2, t2.constant(hist[i]));
    CHECK(same_values(jps.mean[i].value(), h.mean.value()));
  }
  CHECK(check_igc(jps).all);
}

TEST_CASE("zero perturbation reproduces the individual probabilities") {
  Rng rng(2);
  Fixture f(ActionKind::discrete, 2, 4, rng);
  for (const std::string& p : f.store.paths_with_prefix("mixer/head"))
    if (p.ends_with("/w"))
      for (double& v : f.store.get(p).values()) v = 0.0;
  Tape tape;
  const JointPolicyState jps = f.build(tape, random_matrix(6, 4, rng), {random_matrix(6, 3, rng), random_matrix(6, 3, rng)});
  for (std::size_t i = 0; i < 2; ++i) {
    for (double e : jps.epsilon[i].value().values()) CHECK(std::abs(e) <= 1e-15);
    const Tensor& a = jps.log_probs[i].value();
    const Tensor& b = jps.individual[i].log_probs.value();
    for (std::size_t k = 0; k < a.size(); ++k) CHECK(std::abs(a[k] - b[k]) <= 1e-14);
  }
}

TEST_CASE("a constant per-agent shift keeps every argmax") {
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t K = 2 + static_cast<std::size_t>(trial % 4);
    const Tensor la = random_matrix(1, K, rng, 2.0);
    const Tensor eps(Shape{1, K}, 10.0 * rng.normal());
    Tape tape;
    const JointPolicyState jps = with_perturbation(tape, {la}, {eps});
    const IgcReport r = check_igc(jps);
    CHECK(r.all);
  }
}

TEST_CASE("a perturbation larger than the logit gap flips the IGC flag") {
  Tape tape;
  const Tensor la0 = Tensor::row({std::log(0.6), std::log(0.4)});
  const Tensor la1 = Tensor::row({std::log(0.3), std::log(0.7)});
  const Tensor flip = Tensor::row({0.0, 1.0});  // gap log(1.5) < 1
  const Tensor none = Tensor::row({0.0, 0.0});
  const JointPolicyState jps = with_perturbation(tape, {la0, la1}, {flip, none});
  const IgcReport r = check_igc(jps);
  CHECK_FALSE(r.consistent[0][0]);
  CHECK(r.consistent[0][1]);
  CHECK_FALSE(r.all);
  CHECK(r.rate == 0.5);
}

TEST_CASE("a dominant logit is sampled with overwhelming probability") {
  Tape tape;
  const Tensor la = Tensor::row({0.0, -30.0, -30.0});
  const JointPolicyState jps = with_perturbation(tape, {la, la}, {Tensor::row({0, 0, 0}), Tensor::row({0, 0, 0})});
  std::vector<Rng> rngs{Rng(4)};
  for (int i = 0; i < 10000; ++i) {
    const JointSample s = joint_sample(jps, rngs);
    CHECK(s.actions.index[0] == 0);
    CHECK(s.actions.index[1] == 0);
  }
}

TEST_CASE("joint log-prob is the sum of the per-agent log-probs") {
  Rng rng(5);
  Fixture f(ActionKind::discrete, 3, 4, rng);
  Tape tape;
  const JointPolicyState jps = f.build(tape, random_matrix(8, 4, rng),
                                       {random_matrix(8, 3, rng), random_matrix(8, 3, rng), random_matrix(8, 3, rng)});
  std::vector<Rng> rngs{Rng(6), Rng(7)};
  const JointSample s = joint_sample(jps, rngs);
  const Var lp = joint_log_prob(jps, s.actions);
  for (std::size_t b = 0; b < 8; ++b) {
    double direct = 0.0;
    for (std::size_t i = 0; i < 3; ++i) direct += jps.log_probs[i].value()(b, static_cast<std::size_t>(s.actions.index[b * 3 + i]));
    CHECK(std::abs(lp.value()[b] - direct) <= 1e-12);
    CHECK(std::abs(s.log_prob[b] - direct) <= 1e-12);
  }
}

TEST_CASE("continuous samples collapse onto the mean at the log-std floor") {
  Rng rng(8);
  Fixture f(ActionKind::continuous, 2, 2, rng);
  for (const std::string& p : f.store.paths_with_prefix("mixer/head")) {
    for (double& v : f.store.get(p).values()) v = p.ends_with("/b") ? -50.0 : 0.0;
  }
  Tape tape;
  const JointPolicyState jps = f.build(tape, random_matrix(4, 4, rng), {random_matrix(4, 3, rng), random_matrix(4, 3, rng)});
  std::vector<Rng> rngs{Rng(9)};
  const JointSample s = joint_sample(jps, rngs);
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t d = 0; d < 2; ++d)
        CHECK(std::abs(s.actions.value[(b * 2 + i) * 2 + d] - jps.mean[i].value()(b, d)) <= 1e-3);
  const Var lp = joint_log_prob(jps, s.actions);
  for (std::size_t b = 0; b < 4; ++b) CHECK(std::abs(lp.value()[b] - s.log_prob[b]) <= 1e-9);
}

TEST_CASE("identity modifier uses the heads' own standard deviations") {
  Rng rng(10);
  Fixture f(ActionKind::continuous, 2, 2, rng, true);
  Tape tape;
  const JointPolicyState jps = f.build(tape, random_matrix(3, 4, rng), {random_matrix(3, 3, rng), random_matrix(3, 3, rng)});
  CHECK(same_values(jps.log_std[0].value(), f.store.get("actor/agent0/log_std")));
  CHECK(f.pm.forward_calls() == 0);
}

TEST_CASE("identity modifier is rejected for discrete actions") {
  Rng rng(11);
  Fixture f(ActionKind::discrete, 2, 3, rng, true);
  Tape tape;
  CHECK_THROWS_AS(f.build(tape, random_matrix(1, 4, rng), {random_matrix(1, 3, rng), random_matrix(1, 3, rng)}), ConfigError);
}

TEST_CASE("build_joint rejects mismatched agent counts and batch sizes") {
  Rng rng(12);
  Fixture f(ActionKind::discrete, 2, 3, rng);
  Tape tape;
  CHECK_THROWS_AS(f.build(tape, random_matrix(1, 4, rng), {random_matrix(1, 3, rng)}), ConfigError);
  CHECK_THROWS_AS(f.build(tape, random_matrix(2, 4, rng), {random_matrix(1, 3, rng), random_matrix(1, 3, rng)}), DimensionError);
}

TEST_CASE("Gumbel argmax at zero temperature reproduces the categorical") {
  Rng rng(13);
  CHECK(temperature_degeneration_test({{0.5, 0.5}}, 100000, {0.0}, rng)[0] <= 0.02);
  CHECK(temperature_degeneration_test({{0.2, 0.3, 0.5}}, 200000, {0.0}, rng)[0] <= 0.02);
  CHECK(temperature_degeneration_test({{0.0, 1.0, 0.0}}, 10000, {0.0}, rng)[0] <= 1e-3);
}

TEST_CASE("positive temperatures move the sampled distribution away from the product") {
  Rng rng(14);
  const auto tv = temperature_degeneration_test({{0.1, 0.9}}, 100000, {0.0, 5.0}, rng);
  CHECK(tv[0] <= 0.02);
  CHECK(tv[1] > 0.1);
}
