#include "agentmixer/verify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "agentmixer/equilibrium.hpp"
#include "agentmixer/joint.hpp"
#include "agentmixer/mixer.hpp"
#include "agentmixer/nn.hpp"
#include "agentmixer/policies.hpp"

namespace agentmixer {

bool SuiteReport::pass() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.pass; });
}

std::string SuiteReport::to_json() const {
  nlohmann::json j;
  j["suite"] = suite;
  j["pass"] = pass();
  j["checks"] = nlohmann::json::array();
  for (const CheckResult& c : checks) {
    nlohmann::json cj = {{"name", c.name}, {"threshold", c.threshold}, {"pass", c.pass}};
    if (std::isfinite(c.measured)) {
      cj["measured"] = c.measured;
    } else {
      cj["measured"] = c.measured < 0 ? "-inf" : "inf";
    }
    if (c.configurations) cj["configurations"] = c.configurations;
    j["checks"].push_back(cj);
  }
  return j.dump(2);
}

double max_gradient_error(const LossBuilder& loss, const std::vector<Tensor*>& params, Rng& rng,
                          std::size_t max_coords, double h) {
  for (Tensor* p : params) {
    p->set_requires_grad(true);
    p->zero_grad();
  }
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  auto value = [&] {
    Tape tape;
    return loss(tape).item();
  };
  double worst = 0.0;
  for (Tensor* p : params) {
    const std::size_t n = p->size();
    std::vector<double> analytic(n, 0.0);
    if (p->has_grad()) std::copy(p->grad().begin(), p->grad().end(), analytic.begin());
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (max_coords && n > max_coords) {
      for (std::size_t i = 0; i < max_coords; ++i)
        std::swap(coords[i], coords[i + static_cast<std::size_t>(rng.uniform_int(static_cast<int>(n - i)))]);
      coords.resize(max_coords);
    }
    for (std::size_t c : coords) {
      const double v = (*p)[c];
      (*p)[c] = v + h;
      const double up = value();
      (*p)[c] = v - h;
      const double down = value();
      (*p)[c] = v;
      const double numeric = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[c]), std::abs(numeric), 1e-3});
      worst = std::max(worst, std::abs(analytic[c] - numeric) / denom);
    }
  }
  return worst;
}

namespace {

Tensor random_tensor(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.uniform_int(static_cast<int>(hi - lo + 1)));
}

// sum(out * weights) with fixed random weights, so every output element matters.
Var weighted_sum(Tape& tape, const Var& out, const Tensor& weights) {
  return sum(mul(out, tape.constant(weights)));
}

std::vector<Tensor*> store_params(ParamStore& store) {
  std::vector<Tensor*> out;
  for (auto& [_, t] : store.entries()) out.push_back(&t);
  return out;
}

void randomize(ParamStore& store, Rng& rng, double scale) {
  for (auto& [_, t] : store.entries())
    for (double& v : t.values()) v = scale * rng.normal();
}

CheckResult sweep(const std::string& name, std::size_t configs, double threshold,
                  const std::function<double(Rng&)>& one, Rng& rng) {
  CheckResult r;
  r.name = name;
  r.threshold = threshold;
  r.configurations = configs;
  for (std::size_t i = 0; i < configs; ++i) r.measured = std::max(r.measured, one(rng));
  r.pass = r.measured <= threshold;
  return r;
}

double check_unary(Rng& rng, Var (*op)(const Var&)) {
  Tensor x = random_tensor(pick(rng, 1, 4), pick(rng, 1, 5), rng, 2.0);
  const Tensor w = random_tensor(x.rows(), x.cols(), rng);
  return max_gradient_error([&](Tape& t) { return weighted_sum(t, op(t.param(x)), w); }, {&x}, rng);
}

}  // namespace

SuiteReport verify_gradients(std::uint64_t seed, std::size_t configs) {
  Rng rng = Rng::stream(seed, "gradient-sweep");
  SuiteReport report;
  report.suite = "gradients";
  constexpr double tol = 1e-4;

  report.checks.push_back(sweep("linear", configs, tol, [](Rng& r) {
    const std::size_t B = pick(r, 1, 5), in = pick(r, 1, 6), out = pick(r, 1, 6);
    Tensor x = random_tensor(B, in, r), w = random_tensor(in, out, r), b = random_tensor(1, out, r);
    const Tensor wt = random_tensor(B, out, r);
    return max_gradient_error([&](Tape& t) { return weighted_sum(t, linear(t.param(x), t.param(w), t.param(b)), wt); },
                              {&x, &w, &b}, r);
  }, rng));

  report.checks.push_back(sweep("layernorm", configs, tol, [](Rng& r) {
    const std::size_t B = pick(r, 1, 4), d = pick(r, 2, 6);
    Tensor x = random_tensor(B, d, r, 2.0), g = random_tensor(1, d, r), s = random_tensor(1, d, r);
    const Tensor wt = random_tensor(B, d, r);
    return max_gradient_error([&](Tape& t) { return weighted_sum(t, layer_norm(t.param(x), t.param(g), t.param(s), 1e-5), wt); },
                              {&x, &g, &s}, r);
  }, rng));

  report.checks.push_back(sweep("relu", configs, tol, [](Rng& r) { return check_unary(r, relu); }, rng));
  report.checks.push_back(sweep("gelu", configs, tol, [](Rng& r) { return check_unary(r, gelu); }, rng));
  report.checks.push_back(sweep("sigmoid", configs, tol, [](Rng& r) { return check_unary(r, sigmoid); }, rng));
  report.checks.push_back(sweep("softmax", configs, tol, [](Rng& r) { return check_unary(r, softmax_rows); }, rng));
  report.checks.push_back(sweep("log_softmax", configs, tol, [](Rng& r) { return check_unary(r, log_softmax_rows); }, rng));

  report.checks.push_back(sweep("gaussian_log_prob", configs, tol, [](Rng& r) {
    const std::size_t B = pick(r, 1, 4), d = pick(r, 1, 4);
    Tensor mu = random_tensor(B, d, r), ls = random_tensor(1, d, r, 0.5);
    const Tensor a = random_tensor(B, d, r), wt = random_tensor(B, 1, r);
    return max_gradient_error([&](Tape& t) {
      return weighted_sum(t, gaussian_log_prob(t.param(mu), t.param(ls), t.constant(a)), wt);
    }, {&mu, &ls}, r);
  }, rng));

  report.checks.push_back(sweep("categorical_log_prob", configs, tol, [](Rng& r) {
    const std::size_t B = pick(r, 1, 4), K = pick(r, 2, 6);
    Tensor logits = random_tensor(B, K, r, 2.0);
    std::vector<int> actions(B);
    for (int& a : actions) a = r.uniform_int(static_cast<int>(K));
    const Tensor wt = random_tensor(B, 1, r);
    return max_gradient_error([&](Tape& t) {
      return weighted_sum(t, categorical_log_prob(categorical_log_probs(t.param(logits)), actions), wt);
    }, {&logits}, r);
  }, rng));

  report.checks.push_back(sweep("mixer_block", configs, tol, [](Rng& r) {
    MixerConfig mc;
    mc.n_agents = pick(r, 1, 3);
    mc.channel_dim = pick(r, 2, 5);
    mc.agent_mix_hidden = pick(r, 2, 5);
    mc.channel_mix_hidden = pick(r, 2, 6);
    mc.act = r.uniform() < 0.5 ? Activation::relu : Activation::gelu;
    ParamStore store;
    PolicyModifier pm(store, "mixer", mc, ActionKind::discrete, 2, 2, 2, r);
    randomize(store, r, 0.7);
    const std::size_t B = pick(r, 1, 3), rows = B * (mc.n_agents + 1);
    Tensor grid = random_tensor(rows, mc.channel_dim, r);
    const Tensor wt = random_tensor(rows, mc.channel_dim, r);
    std::vector<Tensor*> params;
    for (const std::string& p : store.paths_with_prefix("mixer/block0/")) params.push_back(&store.get(p));
    params.push_back(&grid);
    return max_gradient_error([&](Tape& t) { return weighted_sum(t, pm.mixer_block(t, t.param(grid), 0), wt); },
                              params, r, 24);
  }, rng));

  report.checks.push_back(sweep("gumbel_joint_log_prob", configs, tol, [](Rng& r) {
    const std::size_t N = pick(r, 1, 3), K = pick(r, 2, 4), obs = pick(r, 1, 3), S = pick(r, 1, 4);
    ParamStore store;
    HeadConfig hc;
    hc.obs_dim = obs;
    hc.action_dim = K;
    hc.hidden = {pick(r, 2, 5)};
    std::vector<PolicyHead> heads;
    for (std::size_t i = 0; i < N; ++i) heads.emplace_back(store, "actor/agent" + std::to_string(i), hc, r);
    MixerConfig mc;
    mc.n_agents = N;
    mc.channel_dim = pick(r, 2, 4);
    mc.agent_mix_hidden = pick(r, 2, 4);
    mc.channel_mix_hidden = pick(r, 2, 5);
    PolicyModifier pm(store, "mixer", mc, ActionKind::discrete, S, K, K, r);
    randomize(store, r, 0.6);
    const std::size_t B = pick(r, 1, 3);
    const Tensor state = random_tensor(B, S, r);
    std::vector<Tensor> hist;
    for (std::size_t i = 0; i < N; ++i) hist.push_back(random_tensor(B, obs, r));
    JointActionBatch actions;
    actions.rows = B;
    actions.n_agents = N;
    for (std::size_t k = 0; k < B * N; ++k) actions.index.push_back(r.uniform_int(static_cast<int>(K)));
    JointConfig jc;
    for (std::size_t i = 0; i < N; ++i) jc.tau.push_back(0.5 + r.uniform());
    const Tensor wt = random_tensor(B, 1, r);
    return max_gradient_error([&](Tape& t) {
      std::vector<Var> hv;
      for (const Tensor& h : hist) hv.push_back(t.constant(h));
      const JointPolicyState jps = build_joint(t, t.constant(state), hv, heads, pm, jc);
      return weighted_sum(t, joint_log_prob(jps, actions), wt);
    }, store_params(store), r, 16);
  }, rng));

  return report;
}

SuiteReport verify_gumbel(std::uint64_t seed, std::size_t n_samples, std::size_t configs) {
  Rng rng = Rng::stream(seed, "gumbel-test");
  SuiteReport report;
  report.suite = "gumbel";
  const std::size_t sizes[3] = {2, 3, 5};
  CheckResult r;
  r.name = "tau0_product_tv";
  r.threshold = 0.02;
  r.configurations = configs;
  for (std::size_t c = 0; c < configs; ++c) {
    const std::size_t K = sizes[c % 3];
    std::vector<std::vector<double>> alpha(2, std::vector<double>(K));
    for (auto& a : alpha)
      for (double& x : a) x = rng.uniform_open();
    const std::vector<double> tv = temperature_degeneration_test(alpha, n_samples, {0.0}, rng);
    r.measured = std::max(r.measured, tv[0]);
  }
  r.pass = r.measured <= r.threshold;
  report.checks.push_back(r);
  return report;
}

double max_log_slope(const std::vector<double>& tv) {
  double worst = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k + 1 < tv.size(); ++k) {
    if (tv[k] > 0.0 && tv[k + 1] > 0.0) worst = std::max(worst, std::log(tv[k + 1] / tv[k]));
  }
  return worst;
}

SuiteReport verify_distillation() {
  SuiteReport report;
  report.suite = "distillation";
  const double gamma = 0.95;

  const IceLake fo = ice_lake_tabular(true, gamma);
  const StatePolicy fo_opt = value_iteration(fo.pomdp).policy;
  const DistillTrace fo_trace = distill_fixed_point(fo.pomdp, fo_opt, BeliefPolicy::uniform(4), 50, 1e-12);
  const IdentifiabilityResult fo_id = identifiability_check(fo.pomdp, fo_opt, fo_trace.policy, 1e-10);
  report.checks.push_back({"fully_observable_residual_kl", fo_id.residual_kl, 1e-10, fo_id.residual_kl <= 1e-10});

  const IceLake po = ice_lake_tabular(false, gamma);
  const StatePolicy po_theta = value_iteration(po.pomdp).policy;
  const DistillTrace trace = distill_fixed_point(po.pomdp, po_theta, BeliefPolicy::uniform(4), 200, 1e-12);
  const BeliefOccupancy occ = belief_occupancy(po.pomdp, trace.policy);
  const BeliefPolicy ipp = implicit_product_policy(occ, po_theta, trace.policy);
  const double gap = max_tv_on(occ, trace.policy, ipp);
  report.checks.push_back({"fixed_point_matches_implicit_product", gap, 1e-8, trace.converged && gap <= 1e-8});

  const double slope = max_log_slope(trace.tv);
  const double bound = std::log(gamma) + 0.05;
  report.checks.push_back({"iterate_tv_log_slope", slope, bound, slope <= bound});
  return report;
}

}  // namespace agentmixer
