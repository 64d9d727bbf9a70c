#include "agentmixer/runner.hpp"

#include <fcntl.h>
#include <openssl/evp.h>
#include <sys/file.h>
#include <unistd.h>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "agentmixer/equilibrium.hpp"
#include "agentmixer/verify.hpp"

namespace agentmixer {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Field {
  std::string section, key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

[[noreturn]] void bad_value(const std::string& path, const std::string& value, const std::string& why) {
  throw ConfigError(path + ": invalid value '" + value + "' (" + why + ")");
}

double to_double(const std::string& path, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(d)) bad_value(path, v, "expected a finite number");
    return d;
  } catch (const std::logic_error&) {
    bad_value(path, v, "expected a number");
  }
}

long long to_int(const std::string& path, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long i = std::stoll(v, &used);
    if (used != v.size()) bad_value(path, v, "expected an integer");
    return i;
  } catch (const std::logic_error&) {
    bad_value(path, v, "expected an integer");
  }
}

std::uint64_t to_uint(const std::string& path, const std::string& v) {
  const long long i = to_int(path, v);
  if (i < 0) bad_value(path, v, "expected a nonnegative integer");
  return static_cast<std::uint64_t>(i);
}

bool to_bool(const std::string& path, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(path, v, "expected true or false");
}

Activation to_activation(const std::string& path, const std::string& v) {
  if (v == "relu") return Activation::relu;
  if (v == "gelu") return Activation::gelu;
  bad_value(path, v, "expected relu or gelu");
}

std::string activation_name(Activation a) { return a == Activation::gelu ? "gelu" : "relu"; }

template <class T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_floating_point_v<T>) {
      out += fmt(v[i]);
    } else {
      out += std::to_string(v[i]);
    }
  }
  return out;
}

std::vector<std::size_t> to_sizes(const std::string& path, const std::string& v) {
  std::vector<std::size_t> out;
  for (const std::string& item : split_list(v)) {
    const std::uint64_t x = to_uint(path, item);
    if (x == 0) bad_value(path, v, "layer widths must be positive");
    out.push_back(static_cast<std::size_t>(x));
  }
  return out;
}

#define DOUBLE_FIELD(sec, name, member)                                                  \
  Field {                                                                                \
    sec, name, [](RunConfig& c, const std::string& v) { c.member = to_double(sec "." name, v); }, \
        [](const RunConfig& c) { return fmt(c.member); }                                 \
  }
#define INT_FIELD(sec, name, member)                                                                 \
  Field {                                                                                            \
    sec, name,                                                                                       \
        [](RunConfig& c, const std::string& v) { c.member = static_cast<decltype(c.member)>(to_int(sec "." name, v)); }, \
        [](const RunConfig& c) { return std::to_string(c.member); }                                  \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"run", "algorithm", [](RunConfig& c, const std::string& v) {
         try {
           c.train.algorithm = algorithm_from_string(v);
         } catch (const ConfigError&) {
           bad_value("run.algorithm", v, "expected agentmixer, ippo or ail");
         }
       }, [](const RunConfig& c) { return to_string(c.train.algorithm); }},
      {"run", "seeds", [](RunConfig& c, const std::string& v) {
         c.seeds.clear();
         for (const std::string& s : split_list(v)) c.seeds.push_back(to_uint("run.seeds", s));
         if (c.seeds.empty()) bad_value("run.seeds", v, "expected at least one seed");
       }, [](const RunConfig& c) { return join(c.seeds); }},
      {"run", "total_env_steps", [](RunConfig& c, const std::string& v) {
         c.train.total_env_steps = to_uint("run.total_env_steps", v);
       }, [](const RunConfig& c) { return std::to_string(c.train.total_env_steps); }},
      INT_FIELD("run", "eval_every", train.eval_every),
      INT_FIELD("run", "eval_episodes", train.eval_episodes),
      INT_FIELD("run", "checkpoint_every", train.checkpoint_every),
      {"run", "record_wallclock", [](RunConfig& c, const std::string& v) {
         c.train.record_wallclock = to_bool("run.record_wallclock", v);
       }, [](const RunConfig& c) { return std::string(c.train.record_wallclock ? "true" : "false"); }},
      {"run", "output_dir", [](RunConfig& c, const std::string& v) { c.output_dir = v; },
       [](const RunConfig& c) { return c.output_dir; }},
      {"run", "name", [](RunConfig& c, const std::string& v) { c.name = v; },
       [](const RunConfig& c) { return c.name; }},

      {"env", "name", [](RunConfig& c, const std::string& v) { c.train.env.name = v; },
       [](const RunConfig& c) { return c.train.env.name; }},
      {"env", "payoff_file", [](RunConfig& c, const std::string& v) { c.train.env.payoff_file = v; },
       [](const RunConfig& c) { return c.train.env.payoff_file; }},
      INT_FIELD("env", "grid_size", train.env.predator_prey.grid_size),
      INT_FIELD("env", "n_predators", train.env.predator_prey.n_predators),
      INT_FIELD("env", "n_prey", train.env.predator_prey.n_prey),
      DOUBLE_FIELD("env", "capture_reward", train.env.predator_prey.capture_reward),
      DOUBLE_FIELD("env", "single_capture_penalty", train.env.predator_prey.single_capture_penalty),
      INT_FIELD("env", "horizon", train.env.predator_prey.horizon),
      INT_FIELD("env", "view_radius", train.env.predator_prey.view_radius),
      INT_FIELD("env", "spread_agents", train.env.spread_agents),
      DOUBLE_FIELD("env", "spread_half_width", train.env.spread_half_width),

      DOUBLE_FIELD("ppo", "clip", train.ppo.clip),
      DOUBLE_FIELD("ppo", "gamma", train.ppo.gamma),
      DOUBLE_FIELD("ppo", "gae_lambda", train.ppo.gae_lambda),
      INT_FIELD("ppo", "ppo_epochs", train.ppo.ppo_epochs),
      INT_FIELD("ppo", "minibatches", train.ppo.minibatches),
      DOUBLE_FIELD("ppo", "entropy_coef", train.ppo.entropy_coef),
      DOUBLE_FIELD("ppo", "actor_lr", train.ppo.actor_lr),
      DOUBLE_FIELD("ppo", "critic_lr", train.ppo.critic_lr),
      DOUBLE_FIELD("ppo", "value_coef", train.ppo.value_coef),
      DOUBLE_FIELD("ppo", "max_grad_norm", train.ppo.max_grad_norm),
      DOUBLE_FIELD("ppo", "adam_eps", train.ppo.adam_eps),
      DOUBLE_FIELD("ppo", "weight_decay", train.ppo.weight_decay),
      INT_FIELD("ppo", "rollout_threads", train.ppo.rollout_threads),
      INT_FIELD("ppo", "episode_length", train.ppo.episode_length),
      {"ppo", "surrogate", [](RunConfig& c, const std::string& v) {
         try {
           c.train.ppo.surrogate = surrogate_from_string(v);
         } catch (const ConfigError&) {
           bad_value("ppo.surrogate", v, "expected auto, per_agent or joint");
         }
       }, [](const RunConfig& c) { return to_string(c.train.ppo.surrogate); }},

      INT_FIELD("mixer", "channel_dim", train.mixer.channel_dim),
      INT_FIELD("mixer", "agent_mix_hidden", train.mixer.agent_mix_hidden),
      INT_FIELD("mixer", "channel_mix_hidden", train.mixer.channel_mix_hidden),
      INT_FIELD("mixer", "n_blocks", train.mixer.n_blocks),
      DOUBLE_FIELD("mixer", "mixer_lr", train.mixer.mixer_lr),
      {"mixer", "act", [](RunConfig& c, const std::string& v) { c.train.mixer.act = to_activation("mixer.act", v); },
       [](const RunConfig& c) { return activation_name(c.train.mixer.act); }},
      {"mixer", "identity", [](RunConfig& c, const std::string& v) { c.train.mixer.identity = to_bool("mixer.identity", v); },
       [](const RunConfig& c) { return std::string(c.train.mixer.identity ? "true" : "false"); }},

      DOUBLE_FIELD("distill", "beta_initial", train.distill.beta_initial),
      DOUBLE_FIELD("distill", "anneal_fraction", train.distill.anneal_fraction),
      DOUBLE_FIELD("distill", "distill_weight", train.distill.distill_weight),
      DOUBLE_FIELD("distill", "student_lr", train.distill.student_lr),
      INT_FIELD("distill", "distill_epochs", train.distill.distill_epochs),

      INT_FIELD("policy", "window", train.policy.window),
      {"policy", "actor_hidden", [](RunConfig& c, const std::string& v) { c.train.policy.actor_hidden = to_sizes("policy.actor_hidden", v); },
       [](const RunConfig& c) { return join(c.train.policy.actor_hidden); }},
      {"policy", "critic_hidden", [](RunConfig& c, const std::string& v) { c.train.policy.critic_hidden = to_sizes("policy.critic_hidden", v); },
       [](const RunConfig& c) { return join(c.train.policy.critic_hidden); }},
      {"policy", "act", [](RunConfig& c, const std::string& v) { c.train.policy.act = to_activation("policy.act", v); },
       [](const RunConfig& c) { return activation_name(c.train.policy.act); }},
      DOUBLE_FIELD("policy", "init_log_std", train.policy.init_log_std),
      {"policy", "tau", [](RunConfig& c, const std::string& v) {
         c.train.policy.tau.clear();
         for (const std::string& s : split_list(v)) c.train.policy.tau.push_back(to_double("policy.tau", s));
       }, [](const RunConfig& c) { return join(c.train.policy.tau); }},
  };
  return table;
}

#undef DOUBLE_FIELD
#undef INT_FIELD

void require(bool ok, const std::string& path, const std::string& what) {
  if (!ok) throw ConfigError(path + ": " + what);
}

void validate(const RunConfig& c) {
  const TrainConfig& t = c.train;
  require(t.env.name == "climbing" || t.env.name == "predator_prey" || t.env.name == "bridge" ||
              t.env.name == "spread",
          "env.name", "unknown environment '" + t.env.name + "'");
  require(t.eval_every >= 0, "run.eval_every", "must be nonnegative");
  require(t.eval_episodes >= 0, "run.eval_episodes", "must be nonnegative");
  require(t.checkpoint_every >= 0, "run.checkpoint_every", "must be nonnegative");
  const auto& pp = t.env.predator_prey;
  require(pp.grid_size >= 3, "env.grid_size", "must be at least 3");
  require(pp.n_predators >= 2, "env.n_predators", "must be at least 2");
  require(pp.n_prey >= 1, "env.n_prey", "must be at least 1");
  require(pp.n_predators + pp.n_prey < pp.grid_size * pp.grid_size, "env.n_prey", "too many animals for the grid");
  require(pp.horizon >= 1, "env.horizon", "must be at least 1");
  require(pp.view_radius >= 1, "env.view_radius", "must be at least 1");
  require(t.env.spread_agents >= 2, "env.spread_agents", "must be at least 2");
  require(t.env.spread_half_width > 0.0, "env.spread_half_width", "must be positive");
  const PpoConfig& p = t.ppo;
  require(p.clip > 0.0, "ppo.clip", "must be positive");
  require(p.gamma >= 0.0 && p.gamma < 1.0, "ppo.gamma", "must lie in [0, 1)");
  require(p.gae_lambda >= 0.0 && p.gae_lambda <= 1.0, "ppo.gae_lambda", "must lie in [0, 1]");
  require(p.ppo_epochs >= 1, "ppo.ppo_epochs", "must be at least 1");
  require(p.minibatches >= 1, "ppo.minibatches", "must be at least 1");
  require(p.entropy_coef >= 0.0, "ppo.entropy_coef", "must be nonnegative");
  require(p.actor_lr > 0.0, "ppo.actor_lr", "must be positive");
  require(p.critic_lr > 0.0, "ppo.critic_lr", "must be positive");
  require(p.value_coef >= 0.0, "ppo.value_coef", "must be nonnegative");
  require(p.max_grad_norm > 0.0, "ppo.max_grad_norm", "must be positive");
  require(p.adam_eps > 0.0, "ppo.adam_eps", "must be positive");
  require(p.weight_decay >= 0.0, "ppo.weight_decay", "must be nonnegative");
  require(p.rollout_threads >= 1, "ppo.rollout_threads", "must be at least 1");
  require(p.episode_length >= 1, "ppo.episode_length", "must be at least 1");
  const MixerConfig& m = t.mixer;
  require(m.channel_dim >= 1, "mixer.channel_dim", "must be positive");
  require(m.agent_mix_hidden >= 1, "mixer.agent_mix_hidden", "must be positive");
  require(m.channel_mix_hidden >= 1, "mixer.channel_mix_hidden", "must be positive");
  require(m.n_blocks >= 1, "mixer.n_blocks", "must be positive");
  require(m.mixer_lr > 0.0, "mixer.mixer_lr", "must be positive");
  require(!m.identity || t.env.name == "spread", "mixer.identity", "only defined for continuous actions");
  const DistillConfig& d = t.distill;
  require(d.beta_initial >= 0.0 && d.beta_initial <= 1.0, "distill.beta_initial", "must lie in [0, 1]");
  require(d.anneal_fraction >= 0.0 && d.anneal_fraction <= 1.0, "distill.anneal_fraction", "must lie in [0, 1]");
  require(d.distill_weight >= 0.0, "distill.distill_weight", "must be nonnegative");
  require(d.student_lr > 0.0, "distill.student_lr", "must be positive");
  require(d.distill_epochs >= 0, "distill.distill_epochs", "must be nonnegative");
  require(t.policy.window >= 1, "policy.window", "must be at least 1");
  require(!t.policy.actor_hidden.empty(), "policy.actor_hidden", "needs at least one layer");
  require(!t.policy.critic_hidden.empty(), "policy.critic_hidden", "needs at least one layer");
  require(t.policy.init_log_std >= kLogStdMin && t.policy.init_log_std <= kLogStdMax, "policy.init_log_std",
          "must lie in [-10, 2]");
  for (double tau : t.policy.tau) require(tau > 0.0, "policy.tau", "temperatures must be positive");
  require(!c.seeds.empty(), "run.seeds", "expected at least one seed");
}

std::string now_iso() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_atomic(const fs::path& file, const std::string& content) {
  const fs::path tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
    if (!out.flush()) throw std::runtime_error("cannot write " + tmp.string());
  }
  fs::rename(tmp, file);
}

// Exclusive advisory lock on <dir>/.lock, released on destruction.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) {
    fd_ = ::open((dir / ".lock").c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0 || ::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      if (fd_ >= 0) ::close(fd_);
      fd_ = -1;
      throw ConfigError("output directory " + dir.string() + " is in use by another run");
    }
  }
  ~DirLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  int fd_ = -1;
};

json mean_std(const std::vector<double>& v) {
  if (v.empty()) return {{"mean", nullptr}, {"std", nullptr}, {"n", 0}};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - m) * (x - m);
  return {{"mean", m}, {"std", std::sqrt(var / static_cast<double>(v.size()))}, {"n", v.size()}};
}

RunConfig load_for_command(const fs::path& file) { return load_config(file); }

}  // namespace

RunConfig default_config(const std::string& env_name) {
  RunConfig c;
  TrainConfig& t = c.train;
  t.env.name = env_name;
  if (env_name == "predator_prey" || env_name == "bridge") {
    t.ppo.ppo_epochs = 5;
    t.total_env_steps = 1000000;
    t.eval_every = 10;
  } else if (env_name == "spread") {
    t.ppo.ppo_epochs = 5;
    t.ppo.entropy_coef = 0.0;
    t.ppo.actor_lr = 3e-4;
    t.ppo.critic_lr = 3e-4;
    t.ppo.rollout_threads = 40;
    t.ppo.episode_length = 100;
    t.total_env_steps = 400000;
    t.eval_every = 10;
  }
  return c;
}

RunConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config: " + std::string(e.message()) + " at line " + std::to_string(e.line()));
  }
  std::string env_name = "climbing";
  if (const auto env = tree.get_child_optional("env")) {
    if (const auto name = env->get_optional<std::string>("name")) env_name = trim(*name);
  }
  RunConfig c = default_config(env_name);

  static const std::set<std::string> sections = {"run", "env", "ppo", "mixer", "distill", "policy"};
  for (const auto& [section, body] : tree) {
    if (!sections.count(section)) {
      if (body.empty()) throw ConfigError(section + ": key outside any section");
      throw ConfigError(section + ": unknown section");
    }
    for (const auto& [key, value] : body) {
      const std::string path = section + "." + key;
      const Field* field = nullptr;
      for (const Field& f : fields())
        if (f.section == section && f.key == key) field = &f;
      if (!field) throw ConfigError(path + ": unknown key");
      field->set(c, trim(value.data()));
    }
  }
  validate(c);
  return c;
}

RunConfig load_config(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot read config " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig c = parse_config(ss.str());
  if (c.name.empty()) c.name = file.stem().string();
  return c;
}

std::string serialize_config(const RunConfig& config) {
  std::string out;
  std::string section;
  for (const Field& f : fields()) {
    if (f.section != section) {
      if (!section.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += f.key + " = " + f.get(config) + "\n";
  }
  return out;
}

std::string git_blob_hash(const std::string& content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, header.data(), header.size());
  EVP_DigestUpdate(ctx, content.data(), content.size());
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::vector<std::vector<double>> head_marginals(const std::vector<PolicyHead>& heads, Env& env) {
  Rng rng(0);
  env.reset(rng);
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < heads.size(); ++i) {
    const std::vector<double> obs = env.observation(i);
    Tape tape;
    const HeadOutput h = heads[i].forward(tape, tape.constant(Tensor::row(obs)));
    std::vector<double> p;
    for (double lp : h.log_probs.value().values()) p.push_back(std::exp(lp));
    double total = 0.0;
    for (double x : p) total += x;
    for (double& x : p) x /= total;
    out.push_back(std::move(p));
  }
  return out;
}

int cmd_train(const fs::path& config_file, const TrainOptions& options, std::ostream& out,
              std::ostream& err) {
  RunConfig c;
  try {
    c = load_config(config_file);
    if (options.seed) c.seeds = {*options.seed};
    if (options.steps) c.train.total_env_steps = *options.steps;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  }

  fs::path root = c.output_dir;
  if (const char* env = std::getenv("AGENTMIXER_OUT"); env && *env) root = env;
  if (options.output_root) root = *options.output_root;
  const fs::path run_dir = root / c.name;

  json manifest;
  try {
    fs::create_directories(run_dir);
    DirLock lock(run_dir);

    const std::string resolved = serialize_config(c);
    manifest["config"] = resolved;
    manifest["config_hash"] = git_blob_hash(resolved);
    manifest["config_file"] = fs::absolute(config_file).string();
    manifest["library_version"] = kLibraryVersion;
    manifest["algorithm"] = to_string(c.train.algorithm);
    manifest["env"] = c.train.env.name;
    manifest["seeds"] = c.seeds;
    manifest["started_at"] = now_iso();
    manifest["status"] = "running";
    json files = json::array();
    for (std::uint64_t s : c.seeds) files.push_back("seed_" + std::to_string(s) + "/metrics.csv");
    manifest["metrics_files"] = files;
    write_atomic(run_dir / "manifest.json", manifest.dump(2) + "\n");
    write_atomic(run_dir / "config.ini", resolved);

    std::vector<double> eval_means, eval_stds, train_returns, success;
    json per_seed = json::array();
    for (std::uint64_t seed : c.seeds) {
      TrainConfig tc = c.train;
      tc.seed = seed;
      const fs::path seed_dir = run_dir / ("seed_" + std::to_string(seed));
      fs::create_directories(seed_dir);
      std::ofstream csv(seed_dir / "metrics.csv", std::ios::trunc);
      csv << metrics_header() << "\n" << std::flush;

      Trainer trainer(tc);
      std::optional<double> last_train;
      try {
        trainer.run([&](const MetricsRow& row) {
          csv << metrics_line(row) << "\n" << std::flush;
          if (row.mean_train_return) last_train = row.mean_train_return;
          if (tc.checkpoint_every > 0 && row.step % static_cast<std::uint64_t>(tc.checkpoint_every) == 0) {
            save_checkpoint(seed_dir / ("checkpoint_" + std::to_string(row.step) + ".ckpt"),
                            trainer.params(), {1, row.step, seed});
          }
        });
      } catch (const NumericError& e) {
        manifest["status"] = "numeric_error";
        manifest["error"] = {{"seed", seed}, {"updates", trainer.updates()},
                             {"env_steps", trainer.env_steps()}, {"message", e.what()}};
        manifest["finished_at"] = now_iso();
        write_atomic(run_dir / "manifest.json", manifest.dump(2) + "\n");
        err << "numeric error (seed " << seed << ", update " << trainer.updates() << ", env step "
            << trainer.env_steps() << "): " << e.what() << "\n";
        return kExitNumeric;
      }
      const fs::path final_ckpt = seed_dir / "final.ckpt";
      save_checkpoint(final_ckpt, trainer.params(), {1, trainer.updates(), seed});
      const EvalStats ev = trainer.evaluate_policy(std::max(1, tc.eval_episodes));
      eval_means.push_back(ev.mean);
      eval_stds.push_back(ev.std);
      success.push_back(ev.success_rate);
      if (last_train) train_returns.push_back(*last_train);
      per_seed.push_back({{"seed", seed},
                          {"final_eval_mean", ev.mean},
                          {"final_eval_std", ev.std},
                          {"final_success_rate", ev.success_rate},
                          {"final_train_return", last_train ? json(*last_train) : json(nullptr)},
                          {"updates", trainer.updates()},
                          {"env_steps", trainer.env_steps()},
                          {"checkpoint", fs::relative(final_ckpt, run_dir).string()}});
    }

    json summary;
    summary["algorithm"] = to_string(c.train.algorithm);
    summary["env"] = c.train.env.name;
    summary["seeds"] = per_seed;
    summary["final_eval_mean"] = mean_std(eval_means);
    summary["final_eval_std"] = mean_std(eval_stds);
    summary["final_success_rate"] = mean_std(success);
    summary["final_train_return"] = mean_std(train_returns);
    write_atomic(run_dir / "summary.json", summary.dump(2) + "\n");

    manifest["status"] = "ok";
    manifest["finished_at"] = now_iso();
    manifest["summary"] = "summary.json";
    write_atomic(run_dir / "manifest.json", manifest.dump(2) + "\n");
    out << summary.dump(2) << "\n";
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  }
}

int cmd_eval(const fs::path& checkpoint, const fs::path& config_file, int episodes, std::ostream& out,
             std::ostream& err) {
  try {
    if (episodes < 1) throw ConfigError("--episodes must be at least 1");
    const RunConfig c = load_for_command(config_file);
    const std::unique_ptr<Env> env = make_env(c.train.env);
    const Checkpoint ckpt = read_checkpoint(checkpoint);
    DecentralizedPolicy policy(env->spec(), c.train.policy, ckpt.header.rng_seed);
    load_into(policy.params(), ckpt);
    const EvalStats ev = evaluate(policy.heads(), *env, episodes, ckpt.header.rng_seed, true);
    const json j = {{"mean", ev.mean}, {"std", ev.std}, {"episodes", ev.episodes},
                    {"success_rate", ev.success_rate}};
    out << j.dump(2) << "\n";
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  }
}

int cmd_analyze(const fs::path& checkpoint, const fs::path& config_file, std::ostream& out,
                std::ostream& err) {
  try {
    const RunConfig c = load_for_command(config_file);
    const std::unique_ptr<Env> env = make_env(c.train.env);
    const auto* game = dynamic_cast<const ClimbingGame*>(env.get());
    if (!game || !env->spec().matrix_game) {
      throw ConfigError("analyze needs a one-shot matrix game, got env '" + c.train.env.name + "'");
    }
    const Checkpoint ckpt = read_checkpoint(checkpoint);
    DecentralizedPolicy policy(env->spec(), c.train.policy, ckpt.header.rng_seed);
    load_into(policy.params(), ckpt);
    const auto marginals = head_marginals(policy.heads(), *env);
    const EquilibriumReport report = analyze_product(NormalFormGame::two_player(game->payoff()), marginals);
    out << report.to_json() << "\n";
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  }
}

int cmd_verify(const std::string& suite, std::ostream& out, std::ostream& err) {
  SuiteReport report;
  if (suite == "distillation") {
    report = verify_distillation();
  } else if (suite == "gumbel") {
    report = verify_gumbel(1);
  } else if (suite == "gradients") {
    report = verify_gradients(1);
  } else {
    err << "unknown suite '" << suite << "' (expected distillation, gumbel or gradients)\n";
    return kExitUsage;
  }
  out << report.to_json() << "\n";
  if (!report.pass()) {
    err << "suite '" << suite << "' failed\n";
    return kExitVerifyFailed;
  }
  return kExitOk;
}

}  // namespace agentmixer
