#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <thread>
#include <vector>

#include "frmdn/model.hpp"

namespace frmdn {

/// a = tanh(W (z ++ h) + b). Parameters are W row-major (d_action rows of
/// d + H entries) followed by b.
struct LinearController {
  std::size_t d = 0;
  std::size_t hidden = 0;
  std::size_t d_action = 0;
  std::vector<double> params;

  static std::size_t param_count(std::size_t d, std::size_t hidden, std::size_t d_action) {
    return d_action * (d + hidden + 1);
  }

  static LinearController zeros(std::size_t d, std::size_t hidden, std::size_t d_action) {
    return from_params(d, hidden, d_action, std::vector<double>(param_count(d, hidden, d_action), 0.0));
  }

  static LinearController from_params(std::size_t d, std::size_t hidden, std::size_t d_action,
                                      std::vector<double> params) {
    if (d_action == 0) throw ValidationError("controller: action dimension must be positive");
    if (params.size() != param_count(d, hidden, d_action)) {
      throw ValidationError("controller: expected " + std::to_string(param_count(d, hidden, d_action)) +
                            " parameters, got " + std::to_string(params.size()));
    }
    return {d, hidden, d_action, std::move(params)};
  }
};

inline std::vector<double> controller_act(std::span<const double> z, std::span<const double> h,
                                          const LinearController& ctrl) {
  if (z.size() != ctrl.d || h.size() != ctrl.hidden) {
    throw ShapeError("controller_act: inputs of size " + std::to_string(z.size()) + " and " +
                     std::to_string(h.size()) + " for a controller expecting " + std::to_string(ctrl.d) + " and " +
                     std::to_string(ctrl.hidden));
  }
  const std::size_t width = ctrl.d + ctrl.hidden;
  const double* bias = ctrl.params.data() + ctrl.d_action * width;
  std::vector<double> a(ctrl.d_action);
  for (std::size_t i = 0; i < ctrl.d_action; ++i) {
    const double* w = ctrl.params.data() + i * width;
    double acc = bias[i];
    for (std::size_t j = 0; j < ctrl.d; ++j) acc += w[j] * z[j];
    for (std::size_t j = 0; j < ctrl.hidden; ++j) acc += w[ctrl.d + j] * h[j];
    a[i] = std::tanh(acc);
  }
  return a;
}

/// Reward for one dream step, given the step index (1-based), the new
/// observation and the action that produced it.
using RewardFn = std::function<double(std::size_t t, std::span<const double> y, std::span<const double> a)>;

inline RewardFn zero_reward() {
  return [](std::size_t, std::span<const double>, std::span<const double>) { return 0.0; };
}

/// -|y|^2.
inline RewardFn norm_reward() {
  return [](std::size_t, std::span<const double> y, std::span<const double>) {
    double s = 0.0;
    for (double v : y) s += v * v;
    return -s;
  };
}

/// -|y - target(t)|^2 with target_i(t) = amplitude * sin(2 pi t / period + i).
inline RewardFn tracking_reward(double amplitude, double period) {
  if (!(period > 0.0)) throw ValidationError("tracking reward: period must be positive");
  return [amplitude, period](std::size_t t, std::span<const double> y, std::span<const double>) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double target =
          amplitude * std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / period + static_cast<double>(i));
      s += (y[i] - target) * (y[i] - target);
    }
    return -s;
  };
}

/// A learned model used as the environment. Episodes start from
/// y_0 ~ N(0, init_std^2 I) drawn from the episode generator.
struct DreamEnv {
  const FrmdnModel* model = nullptr;
  RewardFn reward;
  std::size_t horizon = 30;
  double init_std = 1.0;
};

inline double dream_rollout(const DreamEnv& env, const LinearController& ctrl, Rng& rng) {
  if (!env.model) throw ValidationError("dream: environment has no model");
  const auto& cfg = env.model->config;
  if (cfg.d_action != ctrl.d_action || cfg.d != ctrl.d || cfg.hidden != ctrl.hidden) {
    throw ShapeError("dream: controller dims (d=" + std::to_string(ctrl.d) + ", H=" + std::to_string(ctrl.hidden) +
                     ", d_action=" + std::to_string(ctrl.d_action) + ") do not match the model");
  }
  if (!env.reward) throw ValidationError("dream: environment has no reward function");
  std::vector<double> y(cfg.d);
  for (double& v : y) v = env.init_std * standard_normal(rng);
  auto state = RecurrentState::zeros(1, cfg.hidden);
  double total = 0.0;
  for (std::size_t t = 1; t <= env.horizon; ++t) {
    const auto a = controller_act(y, state.h.row_span(0), ctrl);
    auto g = generate_step(*env.model, y, a, state, rng);
    y = std::move(g.y_next);
    state = std::move(g.state);
    total += env.reward(t, y, a);
  }
  return total;
}

/// Fitness (to be minimized) of each candidate: minus its mean cumulative
/// reward over one episode per entry of `episode_seeds`. Every candidate
/// sees the same seeds, and candidates share no mutable state, so they may
/// be evaluated on `threads` workers with identical results.
inline std::vector<double> evaluate_population(const DreamEnv& env, const std::vector<std::vector<double>>& candidates,
                                               const std::vector<std::uint64_t>& episode_seeds,
                                               std::size_t threads = 1) {
  if (episode_seeds.empty()) throw ValidationError("evaluate_population: need at least one episode per candidate");
  if (!env.model) throw ValidationError("dream: environment has no model");
  const auto& cfg = env.model->config;
  std::vector<double> fitness(candidates.size());
  std::vector<std::exception_ptr> errors(candidates.size());
  auto work = [&](std::size_t i) {
    try {
      const auto ctrl = LinearController::from_params(cfg.d, cfg.hidden, cfg.d_action, candidates[i]);
      double sum = 0.0;
      for (auto seed : episode_seeds) {
        Rng rng(seed);
        sum += dream_rollout(env, ctrl, rng);
      }
      fitness[i] = -sum / static_cast<double>(episode_seeds.size());
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, candidates.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < candidates.size(); ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < candidates.size(); i += workers) work(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return fitness;
}

}  // namespace frmdn
