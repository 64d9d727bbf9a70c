#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "agentmixer/equilibrium.hpp"
#include "agentmixer/runner.hpp"

using namespace agentmixer;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("agentmixer_unit_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

fs::path write_file(const fs::path& file, const std::string& text) {
  std::ofstream(file) << text;
  return file;
}

std::string slurp(const fs::path& file) {
  std::ifstream in(file);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kClimbing =
    "[run]\nalgorithm = agentmixer\nseeds = 1\neval_episodes = 2\nrecord_wallclock = false\n"
    "[env]\nname = climbing\n[ppo]\nrollout_threads = 4\nepisode_length = 8\nppo_epochs = 2\n";

}  // namespace

TEST_CASE("config defaults depend on the environment") {
  CHECK(parse_config("[env]\nname = climbing\n").train.ppo.ppo_epochs == 15);
  CHECK(parse_config("[env]\nname = bridge\n").train.ppo.ppo_epochs == 5);
  const RunConfig s = parse_config("[env]\nname = spread\n");
  CHECK(s.train.ppo.entropy_coef == 0.0);
  CHECK(s.train.ppo.actor_lr == 3e-4);
  CHECK(s.train.ppo.rollout_threads == 40);
  CHECK(s.train.ppo.episode_length == 100);
  const RunConfig c = parse_config("[env]\nname = climbing\n[ppo]\nppo_epochs = 3\n");
  CHECK(c.train.ppo.ppo_epochs == 3);
  CHECK(c.train.total_env_steps == 200000);
}

TEST_CASE("serialized configs parse back to the same config") {
  RunConfig c = parse_config(
      "[run]\nseeds = 3,1,4\n[env]\nname = spread\n[ppo]\nclip = 0.1\nactor_lr = 0.000123456789\n"
      "[policy]\ncritic_hidden = 32,16\ntau = 0.5,2\n[mixer]\nidentity = true\n");
  const std::string text = serialize_config(c);
  const RunConfig back = parse_config(text);
  CHECK(serialize_config(back) == text);
  CHECK(back.seeds == std::vector<std::uint64_t>{3, 1, 4});
  CHECK(back.train.ppo.actor_lr == 0.000123456789);
  CHECK(back.train.policy.tau == std::vector<double>{0.5, 2.0});
  CHECK(back.train.mixer.identity);
}

TEST_CASE("config errors name the offending key") {
  auto message = [](const std::string& text) {
    try {
      parse_config(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message("[ppo]\nclipp = 0.1\n").find("ppo.clipp") != std::string::npos);
  CHECK(message("[ppo]\nclip = abc\n").find("ppo.clip") != std::string::npos);
  CHECK(message("[ppo]\ngamma = 1.5\n").find("ppo.gamma") != std::string::npos);
  CHECK(message("[bogus]\nx = 1\n").find("bogus") != std::string::npos);
  CHECK(message("[env]\nname = chess\n").find("env.name") != std::string::npos);
  CHECK(message("[run]\nalgorithm = dqn\n").find("run.algorithm") != std::string::npos);
  CHECK(message("[mixer]\nidentity = true\n").find("mixer.identity") != std::string::npos);
}

TEST_CASE("git blob hashes match git's object ids") {
  CHECK(git_blob_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  CHECK(git_blob_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST_CASE("zero-step training writes a manifest and a header-only CSV") {
  const fs::path dir = scratch_dir("zero");
  const fs::path cfg = write_file(dir / "climb.ini", kClimbing);
  std::ostringstream out, err;
  TrainOptions o;
  o.steps = 0;
  o.output_root = (dir / "runs").string();
  REQUIRE(cmd_train(cfg, o, out, err) == kExitOk);
  const fs::path run = dir / "runs" / "climb";
  const auto manifest = nlohmann::json::parse(slurp(run / "manifest.json"));
  CHECK(manifest["status"] == "ok");
  CHECK(manifest["config_hash"] == git_blob_hash(manifest["config"].get<std::string>()));
  CHECK(manifest["library_version"] == kLibraryVersion);
  CHECK(slurp(run / "seed_1" / "metrics.csv") == metrics_header() + "\n");
  const auto summary = nlohmann::json::parse(out.str());
  CHECK(summary["final_eval_mean"]["mean"].is_number());
}

TEST_CASE("training twice with the same seed gives identical metrics") {
  const fs::path dir = scratch_dir("repeat");
  const fs::path cfg = write_file(dir / "climb.ini", kClimbing);
  std::ostringstream out, err;
  TrainOptions o;
  o.seed = 4;
  o.steps = 96;
  o.output_root = (dir / "a").string();
  REQUIRE(cmd_train(cfg, o, out, err) == kExitOk);
  o.output_root = (dir / "b").string();
  REQUIRE(cmd_train(cfg, o, out, err) == kExitOk);
  const std::string a = slurp(dir / "a" / "climb" / "seed_4" / "metrics.csv");
  CHECK(a == slurp(dir / "b" / "climb" / "seed_4" / "metrics.csv"));
  CHECK(std::count(a.begin(), a.end(), '\n') == 4);
}

TEST_CASE("the output root comes from the option, then the environment, then the config") {
  const fs::path dir = scratch_dir("root");
  const fs::path cfg = write_file(dir / "climb.ini", kClimbing);
  std::ostringstream out, err;
  TrainOptions o;
  o.steps = 0;
  setenv("AGENTMIXER_OUT", (dir / "from_env").c_str(), 1);
  REQUIRE(cmd_train(cfg, o, out, err) == kExitOk);
  CHECK(fs::exists(dir / "from_env" / "climb" / "manifest.json"));
  o.output_root = (dir / "from_flag").string();
  REQUIRE(cmd_train(cfg, o, out, err) == kExitOk);
  CHECK(fs::exists(dir / "from_flag" / "climb" / "manifest.json"));
  unsetenv("AGENTMIXER_OUT");
}

TEST_CASE("bad configs exit with the usage code") {
  const fs::path dir = scratch_dir("bad");
  const fs::path cfg = write_file(dir / "bad.ini", "[ppo]\nclipp = 0.1\n");
  std::ostringstream out, err;
  CHECK(cmd_train(cfg, {}, out, err) == kExitUsage);
  CHECK(err.str().find("ppo.clipp") != std::string::npos);
  CHECK(cmd_train(dir / "missing.ini", {}, out, err) == kExitUsage);
  const fs::path dup = write_file(dir / "dup.ini", std::string(kClimbing) + "[run]\nseeds = 2\n");
  CHECK(cmd_train(dup, {}, out, err) == kExitUsage);
}

TEST_CASE("eval and analyze of a point-mass checkpoint on climbing") {
  const fs::path dir = scratch_dir("pointmass");
  const fs::path cfg = write_file(dir / "climb.ini", kClimbing);
  const RunConfig c = load_config(cfg);
  ClimbingGame game;
  DecentralizedPolicy p(game.spec(), c.train.policy, 1);
  for (std::size_t i = 0; i < 2; ++i) {
    const std::string last = "actor/agent" + std::to_string(i) + "/body/l1";
    for (double& v : p.params().get(last + "/w").values()) v = 0.0;
    auto b = p.params().get(last + "/b").values();
    b[0] = 60.0;
    b[1] = b[2] = -60.0;
  }
  save_checkpoint(dir / "opt.ckpt", p.params(), {1, 0, 1});

  std::ostringstream out, err;
  REQUIRE(cmd_eval(dir / "opt.ckpt", cfg, 5, out, err) == kExitOk);
  const auto ev = nlohmann::json::parse(out.str());
  CHECK(ev["mean"] == 11.0);
  CHECK(ev["std"] == 0.0);

  std::ostringstream out2;
  REQUIRE(cmd_analyze(dir / "opt.ckpt", cfg, out2, err) == kExitOk);
  const auto an = nlohmann::json::parse(out2.str());
  CHECK(an["epsilon_ce"].get<double>() <= 1e-10);
  CHECK(an["epsilon_ne"].get<double>() <= 1e-10);
  CHECK(an["epsilon_cce"].get<double>() <= 1e-10);

  std::ostringstream out3;
  REQUIRE(cmd_eval(dir / "opt.ckpt", cfg, 1, out3, err) == kExitOk);
  CHECK(nlohmann::json::parse(out3.str())["std"] == 0.0);
}

TEST_CASE("analyze of uniform heads matches the equilibrium fixtures") {
  const fs::path dir = scratch_dir("uniform");
  const fs::path cfg = write_file(dir / "climb.ini", kClimbing);
  ClimbingGame game;
  DecentralizedPolicy p(game.spec(), load_config(cfg).train.policy, 1);
  for (std::size_t i = 0; i < 2; ++i)
    for (double& v : p.params().get("actor/agent" + std::to_string(i) + "/body/l1/w").values()) v = 0.0;
  save_checkpoint(dir / "u.ckpt", p.params(), {1, 0, 1});
  std::ostringstream out, err;
  REQUIRE(cmd_analyze(dir / "u.ckpt", cfg, out, err) == kExitOk);
  const auto an = nlohmann::json::parse(out.str());
  const EquilibriumReport r = analyze_product(NormalFormGame::two_player(default_climbing_payoff()),
                                              {{1. / 3, 1. / 3, 1. / 3}, {1. / 3, 1. / 3, 1. / 3}});
  CHECK(an["epsilon_ce"].get<double>() == doctest::Approx(r.epsilon_ce).epsilon(1e-12));
  CHECK(an["epsilon_ne"].get<double>() == doctest::Approx(r.epsilon_ne).epsilon(1e-12));
}

TEST_CASE("analyze refuses sequential environments and eval refuses mismatched checkpoints") {
  const fs::path dir = scratch_dir("refuse");
  const fs::path climb = write_file(dir / "climb.ini", kClimbing);
  const fs::path bridge = write_file(dir / "bridge.ini", "[env]\nname = bridge\n");
  ClimbingGame game;
  DecentralizedPolicy p(game.spec(), PolicyConfig{}, 1);
  save_checkpoint(dir / "c.ckpt", p.params(), {1, 0, 1});
  std::ostringstream out, err;
  CHECK(cmd_analyze(dir / "c.ckpt", bridge, out, err) == kExitUsage);
  CHECK(cmd_eval(dir / "c.ckpt", bridge, 2, out, err) == kExitUsage);
  CHECK(cmd_eval(dir / "missing.ckpt", climb, 2, out, err) == kExitUsage);
}

TEST_CASE("fresh checkpoints evaluate within the horizon") {
  const fs::path dir = scratch_dir("fresh");
  const fs::path cfg = write_file(dir / "pp.ini", "[env]\nname = predator_prey\n");
  EnvParams params;
  params.name = "predator_prey";
  DecentralizedPolicy p(make_env(params)->spec(), PolicyConfig{}, 2);
  save_checkpoint(dir / "f.ckpt", p.params(), {1, 0, 2});
  std::ostringstream out, err;
  REQUIRE(cmd_eval(dir / "f.ckpt", cfg, 2, out, err) == kExitOk);
  CHECK(nlohmann::json::parse(out.str())["episodes"] == 2);
}

TEST_CASE("verify suites pass and unknown suites are usage errors") {
  std::ostringstream out, err;
  CHECK(cmd_verify("distillation", out, err) == kExitOk);
  CHECK(cmd_verify("gumbel", out, err) == kExitOk);
  CHECK(cmd_verify("nope", out, err) == kExitUsage);
}
