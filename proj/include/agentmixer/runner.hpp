#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "agentmixer/training.hpp"

namespace agentmixer {

inline constexpr const char* kLibraryVersion = "0.1.0";

// Exit codes shared by the CLI and the python bindings.
enum ExitCode : int { kExitOk = 0, kExitVerifyFailed = 1, kExitUsage = 2, kExitNumeric = 3 };

struct RunConfig {
  TrainConfig train;
  std::vector<std::uint64_t> seeds{1};
  std::string output_dir = "runs";
  std::string name;  // run directory name; defaults to the config file stem
};

// INI text with sections [run] [env] [ppo] [mixer] [distill] [policy]. Defaults that
// depend on the environment are applied before the file's values. Unknown sections or
// keys and malformed values raise ConfigError naming "section.key".
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& file);
// Every field, so parse_config(serialize_config(c)) reproduces c.
std::string serialize_config(const RunConfig& config);
// Environment-dependent defaults for an otherwise default config.
RunConfig default_config(const std::string& env_name);

// Git blob object id (SHA-1 of "blob <size>\0" + content), lowercase hex.
std::string git_blob_hash(const std::string& content);

struct TrainOptions {
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> steps;
  std::optional<std::string> output_root;  // beats AGENTMIXER_OUT and the config
};

int cmd_train(const std::filesystem::path& config_file, const TrainOptions& options,
              std::ostream& out, std::ostream& err);
int cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& config_file,
             int episodes, std::ostream& out, std::ostream& err);
int cmd_analyze(const std::filesystem::path& checkpoint, const std::filesystem::path& config_file,
                std::ostream& out, std::ostream& err);
int cmd_verify(const std::string& suite, std::ostream& out, std::ostream& err);

// Product marginals of the decentralised heads on a one-shot game's observation.
std::vector<std::vector<double>> head_marginals(const std::vector<PolicyHead>& heads, Env& env);

}  // namespace agentmixer
