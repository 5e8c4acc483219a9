#pragma once

#include <functional>
#include <string>
#include <vector>

#include "frmdn/cmaes.hpp"
#include "frmdn/control.hpp"
#include "frmdn/data.hpp"
#include "frmdn/model.hpp"

namespace frmdn {

/// The synthetic controllable environment, the small sequence model that
/// learns it, and the episode settings used to score controllers.
struct DreamSetup {
  std::size_t d = 3;
  std::size_t d_action = 1;
  std::size_t hidden = 2;
  std::size_t k = 1;  // one component keeps the dream objective smooth in the controller
  std::size_t data_q = 64;
  std::size_t data_t = 64;
  std::size_t train_epochs = 40;
  double lr = 3e-3;
  std::size_t horizon = 10;
  double init_std = 2.0;
  std::string reward = "norm";
  std::size_t episodes = 4;
};

inline RewardFn make_reward(const std::string& name) {
  if (name == "norm") return norm_reward();
  if (name == "track") return tracking_reward(1.0, 20.0);
  if (name == "zero") return zero_reward();
  throw ValidationError("unknown reward '" + name + "' (expected norm, track or zero)");
}

/// Fits an FRMDN to random-policy rollouts of the control task.
inline FrmdnModel train_dream_model(const DreamSetup& setup, std::uint64_t seed) {
  const auto task = gen_control_task(setup.data_q, setup.data_t, setup.d, setup.d_action, seed);
  ModelConfig cfg;
  cfg.d = setup.d;
  cfg.d_action = setup.d_action;
  cfg.k = setup.k;
  cfg.hidden = setup.hidden;
  cfg.seed = seed;
  auto model = FrmdnModel::create(cfg);
  OptimizerConfig oc;
  oc.kind = OptimizerKind::adam;
  oc.lr = setup.lr;
  Optimizer opt(oc);
  for (std::size_t e = 0; e < setup.train_epochs; ++e) train_epoch(model, task.data, 32, 16, opt, seed, e);
  return model;
}

struct DreamGeneration {
  std::size_t generation = 0;
  double mean_reward = 0.0;  // over the population
  double best_reward = 0.0;
  double sigma = 0.0;        // step size after the update
};

struct DreamSearch {
  std::size_t popsize = 16;
  double sigma = 0.5;
  std::size_t generations = 60;
  bool mirrored = true;
  std::size_t threads = 1;
};

/// Episode seeds shared by every candidate and generation, so the dream
/// objective is a fixed function of the controller parameters.
inline std::vector<std::uint64_t> dream_episode_seeds(std::size_t episodes, std::uint64_t seed) {
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < episodes; ++i) seeds.push_back(derive_seed(seed, 1000 + i));
  return seeds;
}

/// CMA-ES over linear controllers, starting from the zero controller.
inline std::vector<DreamGeneration> run_dream_cmaes(const FrmdnModel& model, const DreamSetup& setup,
                                                    const DreamSearch& search, std::uint64_t seed,
                                                    const std::function<void(const DreamGeneration&)>& on_generation = {}) {
  if (search.generations == 0) throw ValidationError("dream: generations must be positive");
  const auto& cfg = model.config;
  if (cfg.d_action == 0) throw ValidationError("dream: the model has no action input");
  DreamEnv env{&model, make_reward(setup.reward), setup.horizon, setup.init_std};
  const auto seeds = dream_episode_seeds(setup.episodes, seed);
  auto state = cmaes_init(std::vector<double>(LinearController::param_count(cfg.d, cfg.hidden, cfg.d_action), 0.0),
                          search.sigma, search.popsize);
  state.mirrored = search.mirrored;
  Rng rng(derive_seed(seed, 2000));
  std::vector<DreamGeneration> log;
  for (std::size_t g = 0; g < search.generations; ++g) {
    const auto pop = cmaes_ask(state, rng);
    const auto fitness = evaluate_population(env, pop, seeds, search.threads);
    DreamGeneration row;
    row.generation = g + 1;
    double total = 0.0;
    double best = fitness.front();
    for (double f : fitness) {
      total += f;
      best = std::min(best, f);
    }
    row.mean_reward = -total / static_cast<double>(fitness.size());
    row.best_reward = -best;
    cmaes_tell(state, pop, fitness);
    row.sigma = state.sigma;
    log.push_back(row);
    if (on_generation) on_generation(row);
  }
  return log;
}

/// Sliding-window means of the population reward.
inline std::vector<double> moving_average(const std::vector<DreamGeneration>& log, std::size_t window) {
  std::vector<double> out;
  if (window == 0 || log.size() < window) return out;
  for (std::size_t i = window - 1; i < log.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = i + 1 - window; j <= i; ++j) s += log[j].mean_reward;
    out.push_back(s / static_cast<double>(window));
  }
  return out;
}

}  // namespace frmdn
