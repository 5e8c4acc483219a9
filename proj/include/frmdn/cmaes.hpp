#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "frmdn/error.hpp"
#include "frmdn/random.hpp"

namespace frmdn {

inline constexpr double kSigmaFloor = 1e-300;
inline constexpr double kEigenFloor = 1e-14;

/// (mu/mu_w, lambda) CMA-ES with cumulative step-size adaptation and
/// rank-one plus rank-mu covariance updates. Minimizes.
struct CmaesState {
  std::size_t n = 0;
  std::size_t lambda = 0;
  std::size_t mu = 0;
  Eigen::VectorXd weights;  // mu positive weights summing to 1
  double mueff = 0.0;
  double cc = 0.0, cs = 0.0, c1 = 0.0, cmu = 0.0, damps = 0.0, chi_n = 0.0;

  Eigen::VectorXd mean;
  double sigma = 0.0;
  Eigen::MatrixXd cov;
  Eigen::MatrixXd basis;      // eigenvectors of cov
  Eigen::VectorXd axis;       // sqrt of eigenvalues
  Eigen::VectorXd p_sigma;
  Eigen::VectorXd p_c;
  std::size_t generation = 0;
  std::size_t evaluations = 0;
  std::size_t floor_events = 0;  // times the eigenvalue floor had to engage
  bool mirrored = false;         // draw candidates in +z / -z pairs

  /// Square root of cov applied to a vector.
  Eigen::VectorXd transform(const Eigen::VectorXd& z) const { return basis * axis.cwiseProduct(z); }
  /// cov^{-1/2} applied to a vector.
  Eigen::VectorXd whiten(const Eigen::VectorXd& y) const {
    return basis * (basis.transpose() * y).cwiseQuotient(axis);
  }
};

/// Default population size 4 + floor(3 ln n) unless `lambda` is given.
inline CmaesState cmaes_init(const std::vector<double>& mean, double sigma, std::size_t lambda = 0) {
  if (mean.empty()) throw ValidationError("cmaes: dimension must be positive");
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ValidationError("cmaes: sigma must be positive and finite");
  for (double v : mean) {
    if (!std::isfinite(v)) throw ValidationError("cmaes: initial mean must be finite");
  }
  CmaesState s;
  s.n = mean.size();
  const double n = static_cast<double>(s.n);
  s.lambda = lambda ? lambda : 4 + static_cast<std::size_t>(std::floor(3.0 * std::log(n)));
  if (s.lambda < 2) throw ValidationError("cmaes: population size must be at least 2");
  s.mu = s.lambda / 2;
  s.weights.resize(Eigen::Index(s.mu));
  const double base = std::log((static_cast<double>(s.lambda) + 1.0) / 2.0);
  for (std::size_t i = 0; i < s.mu; ++i) s.weights[Eigen::Index(i)] = base - std::log(static_cast<double>(i) + 1.0);
  s.weights /= s.weights.sum();
  s.mueff = 1.0 / s.weights.squaredNorm();

  s.cc = (4.0 + s.mueff / n) / (n + 4.0 + 2.0 * s.mueff / n);
  s.cs = (s.mueff + 2.0) / (n + s.mueff + 5.0);
  s.c1 = 2.0 / ((n + 1.3) * (n + 1.3) + s.mueff);
  s.cmu = std::min(1.0 - s.c1, 2.0 * (s.mueff - 2.0 + 1.0 / s.mueff) / ((n + 2.0) * (n + 2.0) + s.mueff));
  s.damps = 1.0 + 2.0 * std::max(0.0, std::sqrt((s.mueff - 1.0) / (n + 1.0)) - 1.0) + s.cs;
  s.chi_n = std::sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));

  s.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), Eigen::Index(s.n));
  s.sigma = sigma;
  s.cov = Eigen::MatrixXd::Identity(Eigen::Index(s.n), Eigen::Index(s.n));
  s.basis = s.cov;
  s.axis = Eigen::VectorXd::Ones(Eigen::Index(s.n));
  s.p_sigma = Eigen::VectorXd::Zero(Eigen::Index(s.n));
  s.p_c = s.p_sigma;
  return s;
}

/// Draws lambda candidates mean + sigma * cov^{1/2} z.
inline std::vector<std::vector<double>> cmaes_ask(const CmaesState& s, Rng& rng) {
  std::vector<std::vector<double>> pop(s.lambda, std::vector<double>(s.n));
  Eigen::VectorXd z(static_cast<Eigen::Index>(s.n));
  for (std::size_t k = 0; k < pop.size(); ++k) {
    auto& x = pop[k];
    if (s.mirrored && k % 2 == 1) {
      z = -z;
    } else {
      for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = standard_normal(rng);
    }
    const Eigen::VectorXd c = s.mean + s.sigma * s.transform(z);
    std::copy(c.data(), c.data() + c.size(), x.begin());
  }
  return pop;
}

namespace cmaes_detail {

/// Symmetrizes, decomposes and floors the spectrum of cov.
inline void refresh_eigensystem(CmaesState& s) {
  s.cov = 0.5 * (s.cov + s.cov.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s.cov);
  if (es.info() != Eigen::Success) throw NumericError("cmaes: eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues();
  bool floored = false;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (!(ev[i] >= kEigenFloor)) {
      ev[i] = kEigenFloor;
      floored = true;
    }
  }
  s.basis = es.eigenvectors();
  s.axis = ev.cwiseSqrt();
  if (floored) {
    ++s.floor_events;
    s.cov = s.basis * ev.asDiagonal() * s.basis.transpose();
  }
}

}  // namespace cmaes_detail

/// Updates the state from evaluated candidates (lower fitness is better).
/// Only the ranking of fitnesses is used. Ties keep candidate order.
inline void cmaes_tell(CmaesState& s, const std::vector<std::vector<double>>& candidates,
                       const std::vector<double>& fitness) {
  if (candidates.size() != s.lambda || fitness.size() != s.lambda) {
    throw ValidationError("cmaes_tell: expected " + std::to_string(s.lambda) + " candidates and fitnesses, got " +
                          std::to_string(candidates.size()) + " and " + std::to_string(fitness.size()));
  }
  for (std::size_t i = 0; i < s.lambda; ++i) {
    if (!std::isfinite(fitness[i])) throw NumericError("cmaes_tell: non-finite fitness for candidate " + std::to_string(i));
    if (candidates[i].size() != s.n) throw ValidationError("cmaes_tell: candidate has wrong dimension");
  }
  std::vector<std::size_t> order(s.lambda);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return fitness[a] < fitness[b]; });
  const bool flat = std::all_of(fitness.begin(), fitness.end(), [&](double f) { return f == fitness.front(); });

  const double n = static_cast<double>(s.n);
  const Eigen::VectorXd old_mean = s.mean;
  std::vector<Eigen::VectorXd> steps(s.mu);
  for (std::size_t i = 0; i < s.mu; ++i) {
    const auto& x = candidates[order[i]];
    steps[i] = (Eigen::Map<const Eigen::VectorXd>(x.data(), Eigen::Index(s.n)) - old_mean) / s.sigma;
  }
  Eigen::VectorXd y_w = Eigen::VectorXd::Zero(Eigen::Index(s.n));
  if (!flat) {
    for (std::size_t i = 0; i < s.mu; ++i) y_w += s.weights[Eigen::Index(i)] * steps[i];
    s.mean = old_mean + s.sigma * y_w;
  }

  ++s.generation;
  s.evaluations += s.lambda;
  s.p_sigma = (1.0 - s.cs) * s.p_sigma + std::sqrt(s.cs * (2.0 - s.cs) * s.mueff) * s.whiten(y_w);
  const double ps_norm = s.p_sigma.norm();
  const double expected = std::sqrt(1.0 - std::pow(1.0 - s.cs, 2.0 * static_cast<double>(s.generation)));
  const bool h_sigma = ps_norm / expected / s.chi_n < 1.4 + 2.0 / (n + 1.0);
  s.p_c = (1.0 - s.cc) * s.p_c + (h_sigma ? std::sqrt(s.cc * (2.0 - s.cc) * s.mueff) : 0.0) * y_w;

  const double stall = h_sigma ? 0.0 : s.c1 * s.cc * (2.0 - s.cc);
  if (flat) {
    s.cov = (1.0 - s.c1 + stall) * s.cov + s.c1 * s.p_c * s.p_c.transpose();
  } else {
    Eigen::MatrixXd rank_mu = Eigen::MatrixXd::Zero(Eigen::Index(s.n), Eigen::Index(s.n));
    for (std::size_t i = 0; i < s.mu; ++i) rank_mu += s.weights[Eigen::Index(i)] * steps[i] * steps[i].transpose();
    s.cov = (1.0 - s.c1 - s.cmu + stall) * s.cov + s.c1 * s.p_c * s.p_c.transpose() + s.cmu * rank_mu;
  }
  s.sigma *= std::exp((s.cs / s.damps) * (ps_norm / s.chi_n - 1.0));
  if (!std::isfinite(s.sigma)) throw NumericError("cmaes_tell: step size diverged");
  s.sigma = std::max(s.sigma, kSigmaFloor);
  cmaes_detail::refresh_eigensystem(s);
}

}  // namespace frmdn
