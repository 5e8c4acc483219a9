#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "frmdn/frmdn.hpp"

namespace frmdn::testing {

inline Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Tensor t(r, c);
  for (double& v : t.data()) v = scale * standard_normal(rng);
  return t;
}

inline Tensor uniform_tensor(std::size_t r, std::size_t c, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(r, c);
  for (double& v : t.data()) v = u(rng);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_TRUE(a.same_shape(b)) << a.shape_string() << " vs " << b.shape_string();
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Central-difference Jacobian of a row-vector map, J(i, j) = d out_i / d in_j.
inline Eigen::MatrixXd numerical_jacobian(const std::function<std::vector<double>(const std::vector<double>&)>& f,
                                          const std::vector<double>& x, double h = 1e-6) {
  const auto base = f(x);
  Eigen::MatrixXd j(static_cast<Eigen::Index>(base.size()), static_cast<Eigen::Index>(x.size()));
  auto xp = x;
  for (std::size_t c = 0; c < x.size(); ++c) {
    xp[c] = x[c] + h;
    const auto up = f(xp);
    xp[c] = x[c] - h;
    const auto down = f(xp);
    xp[c] = x[c];
    for (std::size_t r = 0; r < base.size(); ++r) {
      j(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = (up[r] - down[r]) / (2.0 * h);
    }
  }
  return j;
}

inline double log_abs_det_of(const Eigen::MatrixXd& m) {
  return std::log(std::abs(m.determinant()));
}

/// Log-density of N(mean, cov) from an explicit covariance matrix.
inline double mvn_log_density(const Eigen::VectorXd& y, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
  const Eigen::LLT<Eigen::MatrixXd> llt(cov);
  const Eigen::VectorXd diff = y - mean;
  const double quad = diff.dot(llt.solve(diff));
  const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return -0.5 * (static_cast<double>(y.size()) * std::log(2.0 * M_PI) + logdet + quad);
}

inline Eigen::VectorXd to_eigen(std::span<const double> v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace frmdn::testing
