#include "agentmixer/envs.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace agentmixer {

namespace {

void require_discrete(const EnvSpec& spec, const JointAction& a) {
  if (a.index.size() != spec.n_agents) {
    throw ContractError(spec.name + ": expected " + std::to_string(spec.n_agents) +
                        " actions, got " + std::to_string(a.index.size()));
  }
  for (int x : a.index) {
    if (x < 0 || static_cast<std::size_t>(x) >= spec.action_dim) {
      throw ContractError(spec.name + ": action " + std::to_string(x) + " out of range");
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// climbing

std::vector<std::vector<double>> default_climbing_payoff() {
  return {{11, -30, 0}, {-30, 7, 0}, {0, 6, 5}};
}

std::vector<std::vector<double>> load_payoff_file(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot read payoff file " + file.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<double> row;
    std::string tok;
    while (ls >> tok) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw ConfigError("payoff file " + file.string() + ": '" + tok + "' is not a number");
      }
    }
    if (!row.empty()) rows.push_back(std::move(row));
  }
  return rows;
}

ClimbingGame::ClimbingGame(std::vector<std::vector<double>> payoff) : payoff_(std::move(payoff)) {
  const std::size_t k = payoff_.size();
  if (k == 0) throw ConfigError("climbing payoff matrix is empty");
  for (const auto& row : payoff_) {
    if (row.size() != k) {
      throw ConfigError("climbing payoff matrix must be square, got a row of " +
                        std::to_string(row.size()) + " in a " + std::to_string(k) + "-row matrix");
    }
    for (double v : row)
      if (!std::isfinite(v)) throw ConfigError("climbing payoff entries must be finite");
  }
  spec_ = {"climbing", 2, 1, 1, ActionKind::discrete, k, 1, true};
}

void ClimbingGame::reset(Rng&) {}

double ClimbingGame::payoff(int a0, int a1) const {
  return payoff_.at(static_cast<std::size_t>(a0)).at(static_cast<std::size_t>(a1));
}

StepResult ClimbingGame::step(const JointAction& action, Rng&) {
  require_discrete(spec_, action);
  return {payoff(action.index[0], action.index[1]), true};
}

std::vector<double> ClimbingGame::observation(std::size_t) const { return {1.0}; }

// ---------------------------------------------------------------------------
// predator-prey

PredatorPrey::PredatorPrey(PredatorPreyConfig config) : config_(config) {
  if (config.grid_size < 3) throw ConfigError("predator_prey.grid_size must be at least 3");
  if (config.n_predators < 1 || config.n_prey < 1) {
    throw ConfigError("predator_prey needs at least one predator and one prey");
  }
  if (config.n_predators + config.n_prey > config.grid_size * config.grid_size) {
    throw ConfigError("predator_prey: more animals than cells");
  }
  if (config.horizon < 1) throw ConfigError("predator_prey.horizon must be at least 1");
  if (config.view_radius < 0) throw ConfigError("predator_prey.view_radius must be nonnegative");
  spec_.name = "predator_prey";
  spec_.n_agents = static_cast<std::size_t>(config.n_predators);
  spec_.obs_dim = 2 + 3 * static_cast<std::size_t>(config.n_prey);
  spec_.state_dim = 2 * static_cast<std::size_t>(config.n_predators + config.n_prey) + 1;
  spec_.kind = ActionKind::discrete;
  spec_.action_dim = 6;
  spec_.horizon = static_cast<std::size_t>(config.horizon);
}

bool PredatorPrey::in_bounds(const Cell& c) const {
  return c[0] >= 0 && c[1] >= 0 && c[0] < config_.grid_size && c[1] < config_.grid_size;
}

bool PredatorPrey::occupied_by_predator(const Cell& c) const {
  return std::find(predators_.begin(), predators_.end(), c) != predators_.end();
}

PredatorPrey::Cell PredatorPrey::random_free_cell(Rng& rng) const {
  std::vector<Cell> free;
  for (int x = 0; x < config_.grid_size; ++x)
    for (int y = 0; y < config_.grid_size; ++y) {
      const Cell c{x, y};
      if (!occupied_by_predator(c) && std::find(prey_.begin(), prey_.end(), c) == prey_.end())
        free.push_back(c);
    }
  return free[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(free.size())))];
}

void PredatorPrey::reset(Rng& rng) {
  predators_.clear();
  prey_.clear();
  for (int i = 0; i < config_.n_predators; ++i) predators_.push_back(random_free_cell(rng));
  for (int j = 0; j < config_.n_prey; ++j) prey_.push_back(random_free_cell(rng));
  t_ = 0;
}

void PredatorPrey::set_positions(std::vector<Cell> predators, std::vector<Cell> prey) {
  if (predators.size() != static_cast<std::size_t>(config_.n_predators) ||
      prey.size() != static_cast<std::size_t>(config_.n_prey)) {
    throw ConfigError("predator_prey.set_positions: wrong number of animals");
  }
  predators_ = std::move(predators);
  prey_ = std::move(prey);
  t_ = 0;
}

StepResult PredatorPrey::step(const JointAction& action, Rng& rng) {
  require_discrete(spec_, action);
  constexpr int dx[5] = {0, 0, -1, 1, 0};
  constexpr int dy[5] = {1, -1, 0, 0, 0};
  auto manhattan = [](const Cell& a, const Cell& b) {
    return std::abs(a[0] - b[0]) + std::abs(a[1] - b[1]);
  };
  double reward = 0.0;

  // captures are resolved on pre-move positions
  std::vector<bool> caught(prey_.size(), false);
  for (std::size_t j = 0; j < prey_.size(); ++j) {
    int attempts = 0;
    for (std::size_t i = 0; i < predators_.size(); ++i)
      if (action.index[i] == capture && manhattan(predators_[i], prey_[j]) == 1) ++attempts;
    if (attempts >= 2) {
      reward += config_.capture_reward;
      caught[j] = true;
    } else if (attempts == 1) {
      reward += config_.single_capture_penalty;
    }
  }

  for (std::size_t i = 0; i < predators_.size(); ++i) {
    const int a = action.index[i];
    if (a == capture || a == stay) continue;
    const Cell next{predators_[i][0] + dx[a], predators_[i][1] + dy[a]};
    if (in_bounds(next) && std::find(prey_.begin(), prey_.end(), next) == prey_.end())
      predators_[i] = next;
  }

  for (std::size_t j = 0; j < prey_.size(); ++j) {
    if (caught[j]) {
      prey_[j] = Cell{-1, -1};
      prey_[j] = random_free_cell(rng);
      continue;
    }
    auto nearest = [&](const Cell& c) {
      int d = 1 << 20;
      for (const Cell& p : predators_) d = std::min(d, manhattan(c, p));
      return d;
    };
    const int here = nearest(prey_[j]);
    std::vector<Cell> options;
    for (int a = 0; a < 5; ++a) {
      const Cell next{prey_[j][0] + dx[a], prey_[j][1] + dy[a]};
      if (!in_bounds(next) || occupied_by_predator(next)) continue;
      bool other_prey = false;
      for (std::size_t k = 0; k < prey_.size(); ++k) other_prey = other_prey || (k != j && prey_[k] == next);
      if (other_prey) continue;
      if (nearest(next) >= here) options.push_back(next);
    }
    if (!options.empty())
      prey_[j] = options[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(options.size())))];
  }

  ++t_;
  return {reward, t_ >= config_.horizon};
}

std::vector<double> PredatorPrey::observation(std::size_t agent) const {
  const double scale = 1.0 / static_cast<double>(config_.grid_size - 1);
  const Cell& me = predators_.at(agent);
  std::vector<double> obs{me[0] * scale, me[1] * scale};
  const double r = config_.view_radius > 0 ? config_.view_radius : 1;
  for (const Cell& p : prey_) {
    const int ddx = p[0] - me[0], ddy = p[1] - me[1];
    if (std::max(std::abs(ddx), std::abs(ddy)) <= config_.view_radius) {
      obs.insert(obs.end(), {1.0, ddx / r, ddy / r});
    } else {
      obs.insert(obs.end(), {0.0, 0.0, 0.0});
    }
  }
  return obs;
}

std::vector<double> PredatorPrey::full_state() const {
  const double scale = 1.0 / static_cast<double>(config_.grid_size - 1);
  std::vector<double> s;
  for (const Cell& c : predators_) s.insert(s.end(), {c[0] * scale, c[1] * scale});
  for (const Cell& c : prey_) s.insert(s.end(), {c[0] * scale, c[1] * scale});
  s.push_back(static_cast<double>(t_) / config_.horizon);
  return s;
}

// ---------------------------------------------------------------------------
// bridge crossing

BridgeCrossing::BridgeCrossing() {
  spec_ = {"bridge", 2, 5, 7, ActionKind::discrete, 5, kHorizon, false};
  pos_ = {start(0), start(1)};
}

bool BridgeCrossing::is_open(const Cell& c) {
  if (c[0] < 0 || c[1] < 0 || c[0] >= kWidth || c[1] >= kHeight) return false;
  return c[0] != kWallX || is_passage(c);
}

void BridgeCrossing::reset(Rng& rng) {
  size_[0] = rng.uniform() < 0.5 ? 1 : 2;
  size_[1] = rng.uniform() < 0.5 ? 1 : 2;
  pos_ = {start(0), start(1)};
  arrived_ = {false, false};
  t_ = 0;
}

void BridgeCrossing::set_physique(int size0, int size1) {
  if ((size0 != 1 && size0 != 2) || (size1 != 1 && size1 != 2)) {
    throw ConfigError("bridge physique must be 1 (small) or 2 (big)");
  }
  size_ = {size0, size1};
}

void BridgeCrossing::set_positions(Cell a0, Cell a1) {
  pos_ = {a0, a1};
  arrived_ = {a0 == goal(0), a1 == goal(1)};
  t_ = 0;
}

StepResult BridgeCrossing::step(const JointAction& action, Rng&) {
  require_discrete(spec_, action);
  constexpr int dx[5] = {0, 0, -1, 1, 0};
  constexpr int dy[5] = {1, -1, 0, 0, 0};
  std::array<Cell, 2> next = pos_;
  for (int i = 0; i < 2; ++i) {
    if (arrived_[i]) continue;
    const int a = action.index[static_cast<std::size_t>(i)];
    const Cell c{pos_[i][0] + dx[a], pos_[i][1] + dy[a]};
    if (is_open(c)) next[i] = c;
  }
  double reward = kStepCost;
  for (const Cell passage : {Cell{kWallX, 1}, Cell{kWallX, 3}}) {
    int load = 0;
    for (int i = 0; i < 2; ++i)
      if (next[i] == passage) load += size_[i];
    if (load > 2) {
      reward += kCongestionPenalty;
      for (int i = 0; i < 2; ++i)
        if (next[i] == passage && pos_[i] != passage) next[i] = pos_[i];
    }
  }
  pos_ = next;
  for (int i = 0; i < 2; ++i) {
    if (!arrived_[i] && pos_[i] == goal(i)) {
      arrived_[i] = true;
      reward += kGoalReward;
    }
  }
  ++t_;
  return {reward, (arrived_[0] && arrived_[1]) || t_ >= kHorizon};
}

std::vector<double> BridgeCrossing::observation(std::size_t agent) const {
  const std::size_t other = 1 - agent;
  return {pos_.at(agent)[0] / double(kWidth - 1), pos_[agent][1] / double(kHeight - 1),
          size_[agent] == 2 ? 1.0 : 0.0, pos_[other][0] / double(kWidth - 1),
          pos_[other][1] / double(kHeight - 1)};
}

std::vector<double> BridgeCrossing::full_state() const {
  return {pos_[0][0] / double(kWidth - 1), pos_[0][1] / double(kHeight - 1),
          pos_[1][0] / double(kWidth - 1), pos_[1][1] / double(kHeight - 1),
          size_[0] == 2 ? 1.0 : 0.0,       size_[1] == 2 ? 1.0 : 0.0,
          static_cast<double>(t_) / kHorizon};
}

// ---------------------------------------------------------------------------
// continuous spread

ContinuousSpread::ContinuousSpread(int n_agents, double arena_half_width, int horizon)
    : half_width_(arena_half_width) {
  if (n_agents < 2) throw ConfigError("spread needs at least 2 agents");
  if (!(arena_half_width > 0.0)) throw ConfigError("spread arena half width must be positive");
  if (horizon < 1) throw ConfigError("spread horizon must be at least 1");
  const std::size_t n = static_cast<std::size_t>(n_agents);
  spec_ = {"spread", n, 2, 4 * n + 1, ActionKind::continuous, 2,
           static_cast<std::size_t>(horizon), false};
  for (std::size_t k = 0; k < n; ++k) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    landmarks_.push_back({0.5 * half_width_ * std::cos(angle), 0.5 * half_width_ * std::sin(angle)});
  }
  agents_.assign(n, {0.0, 0.0});
}

void ContinuousSpread::reset(Rng& rng) {
  for (auto& a : agents_) {
    a[0] = (2.0 * rng.uniform() - 1.0) * half_width_;
    a[1] = (2.0 * rng.uniform() - 1.0) * half_width_;
  }
  t_ = 0;
}

void ContinuousSpread::set_layout(std::vector<std::array<double, 2>> agents,
                                  std::vector<std::array<double, 2>> landmarks) {
  if (agents.size() != spec_.n_agents || landmarks.size() != spec_.n_agents) {
    throw ConfigError("spread.set_layout: need one position per agent and landmark");
  }
  agents_ = std::move(agents);
  landmarks_ = std::move(landmarks);
  t_ = 0;
}

double ContinuousSpread::layout_reward() const {
  double r = 0.0;
  for (const auto& l : landmarks_) {
    double best = INFINITY;
    for (const auto& a : agents_) best = std::min(best, std::hypot(a[0] - l[0], a[1] - l[1]));
    r -= best;
  }
  for (std::size_t i = 0; i < agents_.size(); ++i)
    for (std::size_t j = i + 1; j < agents_.size(); ++j)
      if (std::hypot(agents_[i][0] - agents_[j][0], agents_[i][1] - agents_[j][1]) < kCollisionRadius)
        r -= kCollisionPenalty;
  return r;
}

StepResult ContinuousSpread::step(const JointAction& action, Rng&) {
  if (action.value.size() != 2 * spec_.n_agents) {
    throw ContractError("spread: expected " + std::to_string(2 * spec_.n_agents) +
                        " action values, got " + std::to_string(action.value.size()));
  }
  for (std::size_t i = 0; i < agents_.size(); ++i) {
    for (int d = 0; d < 2; ++d) {
      const double v = std::clamp(action.value[2 * i + static_cast<std::size_t>(d)], -kMaxSpeed, kMaxSpeed);
      agents_[i][static_cast<std::size_t>(d)] =
          std::clamp(agents_[i][static_cast<std::size_t>(d)] + v, -half_width_, half_width_);
    }
  }
  ++t_;
  return {layout_reward(), t_ >= static_cast<int>(spec_.horizon)};
}

std::vector<double> ContinuousSpread::observation(std::size_t agent) const {
  return {agents_.at(agent)[0], agents_[agent][1]};
}

std::vector<double> ContinuousSpread::full_state() const {
  std::vector<double> s;
  for (const auto& a : agents_) s.insert(s.end(), {a[0], a[1]});
  for (const auto& l : landmarks_) s.insert(s.end(), {l[0], l[1]});
  s.push_back(static_cast<double>(t_) / static_cast<double>(spec_.horizon));
  return s;
}

// ---------------------------------------------------------------------------

std::unique_ptr<Env> make_env(const EnvParams& params) {
  if (params.name == "climbing") {
    if (params.payoff_file.empty()) return std::make_unique<ClimbingGame>();
    return std::make_unique<ClimbingGame>(load_payoff_file(params.payoff_file));
  }
  if (params.name == "predator_prey") return std::make_unique<PredatorPrey>(params.predator_prey);
  if (params.name == "bridge") return std::make_unique<BridgeCrossing>();
  if (params.name == "spread") {
    return std::make_unique<ContinuousSpread>(params.spread_agents, params.spread_half_width);
  }
  throw ConfigError("env.name: unknown environment '" + params.name + "'");
}

}  // namespace agentmixer
