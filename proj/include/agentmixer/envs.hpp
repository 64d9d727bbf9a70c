#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "agentmixer/policies.hpp"
#include "agentmixer/rng.hpp"

namespace agentmixer {

struct EnvSpec {
  std::string name;
  std::size_t n_agents = 2;
  std::size_t obs_dim = 1;
  std::size_t state_dim = 1;
  ActionKind kind = ActionKind::discrete;
  std::size_t action_dim = 1;  // categories, or continuous dimensions
  std::size_t horizon = 1;
  bool matrix_game = false;
};

struct JointAction {
  std::vector<int> index;     // one per agent (discrete)
  std::vector<double> value;  // n_agents * action_dim (continuous)
};

struct StepResult {
  double reward = 0.0;
  bool done = false;
};

// Episodic environment. Decentralised consumers use observation(); the full state is
// reached only through state(), which counts its reads.
class Env {
 public:
  virtual ~Env() = default;
  virtual const EnvSpec& spec() const = 0;
  virtual void reset(Rng& rng) = 0;
  virtual StepResult step(const JointAction& action, Rng& rng) = 0;
  virtual std::vector<double> observation(std::size_t agent) const = 0;
  virtual std::unique_ptr<Env> clone() const = 0;

  std::vector<double> state() const {
    ++state_reads_;
    return full_state();
  }
  std::uint64_t state_reads() const { return state_reads_; }

 protected:
  virtual std::vector<double> full_state() const = 0;

 private:
  mutable std::uint64_t state_reads_ = 0;
};

// --- climbing matrix game ----------------------------------------------------
std::vector<std::vector<double>> default_climbing_payoff();
// Whitespace-separated rows of numbers.
std::vector<std::vector<double>> load_payoff_file(const std::filesystem::path& file);

class ClimbingGame : public Env {
 public:
  explicit ClimbingGame(std::vector<std::vector<double>> payoff = default_climbing_payoff());
  const EnvSpec& spec() const override { return spec_; }
  void reset(Rng& rng) override;
  StepResult step(const JointAction& action, Rng& rng) override;
  std::vector<double> observation(std::size_t agent) const override;
  std::unique_ptr<Env> clone() const override { return std::make_unique<ClimbingGame>(*this); }

  const std::vector<std::vector<double>>& payoff() const { return payoff_; }
  double payoff(int a0, int a1) const;

 protected:
  std::vector<double> full_state() const override { return {1.0}; }

 private:
  EnvSpec spec_;
  std::vector<std::vector<double>> payoff_;
};

// --- predator-prey -------------------------------------------------------------
struct PredatorPreyConfig {
  int grid_size = 5;
  int n_predators = 2;
  int n_prey = 1;
  double capture_reward = 10.0;
  double single_capture_penalty = -1.0;
  int horizon = 50;
  int view_radius = 2;
};

class PredatorPrey : public Env {
 public:
  enum Action { up = 0, down = 1, left = 2, right = 3, stay = 4, capture = 5 };
  using Cell = std::array<int, 2>;

  explicit PredatorPrey(PredatorPreyConfig config = {});
  const EnvSpec& spec() const override { return spec_; }
  void reset(Rng& rng) override;
  StepResult step(const JointAction& action, Rng& rng) override;
  std::vector<double> observation(std::size_t agent) const override;
  std::unique_ptr<Env> clone() const override { return std::make_unique<PredatorPrey>(*this); }

  // Direct placement for tests.
  void set_positions(std::vector<Cell> predators, std::vector<Cell> prey);
  const std::vector<Cell>& predators() const { return predators_; }
  const std::vector<Cell>& prey() const { return prey_; }

 protected:
  std::vector<double> full_state() const override;

 private:
  Cell random_free_cell(Rng& rng) const;
  bool occupied_by_predator(const Cell& c) const;
  bool in_bounds(const Cell& c) const;

  PredatorPreyConfig config_;
  EnvSpec spec_;
  std::vector<Cell> predators_, prey_;
  int t_ = 0;
};

// --- bridge crossing ------------------------------------------------------------
// Two agents on a 7x5 grid split by a wall at column 3 with openings at rows 1 and
// 3. Agent 0 starts at (0,1) heading to (6,1); agent 1 starts at (6,1) heading to
// (0,1). Physique is small (size 1) or big (size 2); an opening holds total size 2.
class BridgeCrossing : public Env {
 public:
  enum Action { up = 0, down = 1, left = 2, right = 3, stay = 4 };
  using Cell = std::array<int, 2>;
  static constexpr int kWidth = 7, kHeight = 5, kWallX = 3;
  static constexpr double kCongestionPenalty = -5.0, kGoalReward = 10.0, kStepCost = -0.05;
  static constexpr int kHorizon = 30;

  BridgeCrossing();
  const EnvSpec& spec() const override { return spec_; }
  void reset(Rng& rng) override;
  StepResult step(const JointAction& action, Rng& rng) override;
  std::vector<double> observation(std::size_t agent) const override;
  std::unique_ptr<Env> clone() const override { return std::make_unique<BridgeCrossing>(*this); }

  void set_physique(int size0, int size1);
  void set_positions(Cell a0, Cell a1);
  const std::array<Cell, 2>& positions() const { return pos_; }
  static bool is_passage(const Cell& c) { return c[0] == kWallX && (c[1] == 1 || c[1] == 3); }
  static bool is_open(const Cell& c);
  static Cell goal(int agent) { return agent == 0 ? Cell{6, 1} : Cell{0, 1}; }
  static Cell start(int agent) { return agent == 0 ? Cell{0, 1} : Cell{6, 1}; }

 protected:
  std::vector<double> full_state() const override;

 private:
  EnvSpec spec_;
  std::array<Cell, 2> pos_{};
  std::array<int, 2> size_{1, 1};
  std::array<bool, 2> arrived_{false, false};
  int t_ = 0;
};

// --- continuous spread ----------------------------------------------------------
class ContinuousSpread : public Env {
 public:
  ContinuousSpread(int n_agents = 2, double arena_half_width = 1.0, int horizon = 25);
  const EnvSpec& spec() const override { return spec_; }
  void reset(Rng& rng) override;
  StepResult step(const JointAction& action, Rng& rng) override;
  std::vector<double> observation(std::size_t agent) const override;
  std::unique_ptr<Env> clone() const override { return std::make_unique<ContinuousSpread>(*this); }

  // Shared reward of the current layout.
  double layout_reward() const;
  void set_layout(std::vector<std::array<double, 2>> agents,
                  std::vector<std::array<double, 2>> landmarks);

  static constexpr double kMaxSpeed = 0.1, kCollisionRadius = 0.1, kCollisionPenalty = 1.0;

 protected:
  std::vector<double> full_state() const override;

 private:
  EnvSpec spec_;
  double half_width_;
  std::vector<std::array<double, 2>> agents_, landmarks_;
  int t_ = 0;
};

// Builds an environment by name ("climbing", "predator_prey", "bridge", "spread").
struct EnvParams {
  std::string name = "climbing";
  std::string payoff_file;
  PredatorPreyConfig predator_prey;
  int spread_agents = 2;
  double spread_half_width = 1.0;
};

std::unique_ptr<Env> make_env(const EnvParams& params);

}  // namespace agentmixer
