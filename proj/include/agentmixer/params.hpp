#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "agentmixer/tensor.hpp"

namespace agentmixer {

// Named learnable tensors. Paths are unique and iteration order is the sorted path
// order, which fixes the layout of checkpoints and gradient-norm sums.
class ParamStore {
 public:
  Tensor& add(const std::string& path, Tensor init);
  Tensor& get(const std::string& path);
  const Tensor& get(const std::string& path) const;
  bool contains(const std::string& path) const { return params_.count(path) != 0; }

  std::map<std::string, Tensor>& entries() { return params_; }
  const std::map<std::string, Tensor>& entries() const { return params_; }
  std::vector<std::string> paths_with_prefix(const std::string& prefix) const;
  std::size_t size() const { return params_.size(); }
  std::size_t value_count() const;

  void zero_grad();

  std::uint64_t step = 0;

 private:
  std::map<std::string, Tensor> params_;
};

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-5;
  double weight_decay = 0.0;
};

// Adam over a fixed group of parameter paths with its own moment estimates.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<std::string> paths, AdamConfig config);

  // Parameters without a gradient buffer are skipped. Throws NumericError naming the
  // first parameter whose gradient is not finite.
  void step(ParamStore& store);

  const AdamConfig& config() const { return config_; }
  AdamConfig& config() { return config_; }
  const std::vector<std::string>& paths() const { return paths_; }
  std::uint64_t steps_taken() const { return t_; }

 private:
  std::vector<std::string> paths_;
  AdamConfig config_;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
  std::uint64_t t_ = 0;
};

// One Adam step over every parameter in the store; increments store.step.
void adam_step(ParamStore& store, Adam& state);

// Throws NumericError naming the offending path if any gradient is NaN/Inf.
void check_finite_grads(const ParamStore& store, const std::vector<std::string>& paths);

// Rescales the group's gradients so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(ParamStore& store, const std::vector<std::string>& paths, double max_norm);

struct CheckpointHeader {
  std::uint32_t format_version = 1;
  std::uint64_t step = 0;
  std::uint64_t rng_seed = 0;
};

// Binary container: magic, header, then (path, shape, little-endian doubles) per
// parameter in path order.
void save_checkpoint(const std::filesystem::path& file, const ParamStore& store,
                     const CheckpointHeader& header);

struct Checkpoint {
  CheckpointHeader header;
  std::map<std::string, Tensor> params;
};

Checkpoint read_checkpoint(const std::filesystem::path& file);

// Copies checkpoint values into existing parameters. Every parameter of the store must
// be present with an identical shape; otherwise ConfigError names the path.
void load_into(ParamStore& store, const Checkpoint& ckpt);

}  // namespace agentmixer
