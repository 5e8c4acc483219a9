#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "frmdn/graph.hpp"
#include "frmdn/random.hpp"
#include "frmdn/tensor.hpp"

namespace frmdn {

/// Covariance structure of a mixture head.
enum class Structure { full, diagonal, tied, logistic };

constexpr std::string_view to_string(Structure s) {
  switch (s) {
    case Structure::full: return "full";
    case Structure::diagonal: return "diagonal";
    case Structure::tied: return "tied";
    case Structure::logistic: return "logistic";
  }
  return "unknown";
}

inline Structure parse_structure(std::string_view s) {
  if (s == "full") return Structure::full;
  if (s == "diagonal" || s == "diag") return Structure::diagonal;
  if (s == "tied") return Structure::tied;
  if (s == "logistic") return Structure::logistic;
  throw ValidationError("unknown mixture structure '" + std::string(s) + "'");
}

/// Smallest standard deviation (or logistic scale) a head can emit.
inline constexpr double kMinScale = 1e-6;
/// Overflow guard on the other side of the scale logits.
inline constexpr double kScaleLogitBound = 60.0;

struct LogitRange {
  double lo, hi;
};

/// Clamp range for scale logits. Tied heads emit precisions D, so the floor
/// D^{-1/2} >= kMinScale becomes a ceiling on log D.
inline LogitRange scale_logit_range(Structure s) {
  const double log_min = std::log(kMinScale);
  if (s == Structure::tied) return {-kScaleLogitBound, -2.0 * log_min};
  return {log_min, kScaleLogitBound};
}

inline constexpr double kLog2Pi = 1.8378770664093453;  // log(2 pi)

/// Mixture parameters for one time step.
///
/// `d_diag` holds standard deviations for the diagonal structure, the
/// precision diagonals D_k for the tied structure (so that the component
/// precision is U D_k U^T) and the logistic scales for the logistic one.
struct MixtureParams {
  Structure structure = Structure::diagonal;
  Tensor alpha;   // 1 x K
  Tensor mu;      // K x d
  Tensor d_diag;  // K x d

  std::size_t components() const noexcept { return alpha.cols(); }
  std::size_t dim() const noexcept { return mu.cols(); }

  void validate() const {
    if (alpha.rows() != 1 || mu.rows() != alpha.cols() || !mu.same_shape(d_diag)) {
      throw ShapeError("mixture params: inconsistent shapes alpha " + alpha.shape_string() + ", mu " +
                       mu.shape_string() + ", d_diag " + d_diag.shape_string());
    }
    double total = 0.0;
    for (double a : alpha.data()) {
      if (!(a >= 0.0 && a <= 1.0)) throw ValidationError("mixture params: coefficient outside [0, 1]");
      total += a;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ValidationError("mixture params: coefficients do not sum to 1");
    for (double s : d_diag.data()) {
      if (!(s > 0.0)) throw ValidationError("mixture params: non-positive scale");
    }
  }
};

/// The matrix U shared by all components of a tied head, with its cached
/// log|det U|.
class SharedMatrix {
 public:
  static SharedMatrix identity(std::size_t d) {
    SharedMatrix m;
    m.u_ = Tensor::identity(d);
    m.log_abs_det_ = 0.0;
    m.is_identity_ = true;
    return m;
  }

  /// Throws NumericError("degenerate shared matrix") when U is numerically singular.
  static SharedMatrix full(Tensor u) {
    SharedMatrix m;
    m.set(std::move(u));
    return m;
  }

  void set(Tensor u) {
    if (u.rows() != u.cols()) throw ShapeError("shared matrix must be square, got " + u.shape_string());
    log_abs_det_ = checked_log_abs_det(u);
    u_ = std::move(u);
    is_identity_ = false;
  }

  const Tensor& u() const noexcept { return u_; }
  double log_abs_det() const noexcept { return log_abs_det_; }
  bool is_identity() const noexcept { return is_identity_; }
  std::size_t dim() const noexcept { return u_.rows(); }

  /// |det U| below 1e-12 of max|u_ij|^d counts as singular.
  static double checked_log_abs_det(const Tensor& u) {
    double scale = 0.0;
    for (double v : u.data()) scale = std::max(scale, std::abs(v));
    const double lad = frmdn::log_abs_det(u).item();
    if (scale == 0.0 || !std::isfinite(lad) ||
        lad < std::log(1e-12) + static_cast<double>(u.rows()) * std::log(scale)) {
      throw NumericError("degenerate shared matrix");
    }
    return lad;
  }

 private:
  Tensor u_;
  double log_abs_det_ = 0.0;
  bool is_identity_ = true;
};

struct ParamCountReport {
  std::size_t alpha_count = 0;
  std::size_t mu_count = 0;
  std::size_t sigma_count = 0;
  std::size_t total = 0;
};

/// Number of mixture parameters per step for each factorization.
inline ParamCountReport param_count(std::size_t k, std::size_t d, Structure structure) {
  if (k == 0 || d == 0) throw ValidationError("param_count: k and d must be positive");
  ParamCountReport r;
  r.alpha_count = k;
  r.mu_count = k * d;
  switch (structure) {
    case Structure::full: r.sigma_count = k * d * (d + 1) / 2; break;
    case Structure::tied: r.sigma_count = d * d + k * d; break;
    case Structure::diagonal:
    case Structure::logistic: r.sigma_count = k * d; break;
  }
  r.total = r.alpha_count + r.mu_count + r.sigma_count;
  return r;
}

/// Softmax of each row, stabilized by max subtraction.
inline Tensor coeffs_from_logits(const Tensor& z) {
  Tensor out(z.rows(), z.cols());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto in = z.row_span(r);
    auto o = out.row_span(r);
    double m = -std::numeric_limits<double>::infinity();
    for (double v : in) m = std::max(m, v);
    double s = 0.0;
    for (std::size_t i = 0; i < in.size(); ++i) {
      o[i] = std::exp(in[i] - m);
      s += o[i];
    }
    for (double& v : o) v /= s;
  }
  return out;
}

/// exp of the logits after clamping them to the structure's range.
inline Tensor diag_scales_from_logits(const Tensor& z, Structure s = Structure::diagonal) {
  const auto r = scale_logit_range(s);
  return frmdn::exp(frmdn::clamp(z, r.lo, r.hi));
}

namespace detail {

inline void check_point(std::span<const double> y, const MixtureParams& p, Structure want) {
  if (p.structure != want) {
    throw ValidationError("mixture density: expected " + std::string(to_string(want)) + " params, got " +
                          std::string(to_string(p.structure)));
  }
  if (y.size() != p.dim()) {
    throw ShapeError("mixture density: point has dimension " + std::to_string(y.size()) +
                     ", params have " + std::to_string(p.dim()));
  }
}

}  // namespace detail

/// log sum_k alpha_k N(y; mu_k, diag(sigma_k^2)).
inline double diag_gmm_log_density(std::span<const double> y, const MixtureParams& p) {
  detail::check_point(y, p, Structure::diagonal);
  const std::size_t d = p.dim();
  std::vector<double> terms(p.components());
  for (std::size_t k = 0; k < terms.size(); ++k) {
    double quad = 0.0;
    double log_sigma = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double sigma = p.d_diag(k, i);
      const double u = (y[i] - p.mu(k, i)) / sigma;
      quad += u * u;
      log_sigma += std::log(sigma);
    }
    terms[k] = std::log(p.alpha[k]) - 0.5 * static_cast<double>(d) * kLog2Pi - log_sigma - 0.5 * quad;
  }
  return detail::log_sum_exp_span(terms);
}

/// Mixture with component precisions U D_k U^T.
inline double tied_gmm_log_density(std::span<const double> y, const MixtureParams& p, const SharedMatrix& shared) {
  detail::check_point(y, p, Structure::tied);
  const std::size_t d = p.dim();
  if (shared.dim() != d) {
    throw ShapeError("tied density: shared matrix is " + shared.u().shape_string() + " for dimension " +
                     std::to_string(d));
  }
  const Tensor& u = shared.u();
  std::vector<double> terms(p.components());
  std::vector<double> diff(d);
  for (std::size_t k = 0; k < terms.size(); ++k) {
    for (std::size_t i = 0; i < d; ++i) diff[i] = y[i] - p.mu(k, i);
    double quad = 0.0;
    double half_log_det_d = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double r = 0.0;  // (U^T diff)_j
      for (std::size_t i = 0; i < d; ++i) r += u(i, j) * diff[i];
      quad += p.d_diag(k, j) * r * r;
      half_log_det_d += 0.5 * std::log(p.d_diag(k, j));
    }
    terms[k] = std::log(p.alpha[k]) - 0.5 * static_cast<double>(d) * kLog2Pi + shared.log_abs_det() +
               half_log_det_d - 0.5 * quad;
  }
  return detail::log_sum_exp_span(terms);
}

/// Mixture of discretized logistics of bin width C, independent across
/// dimensions: (1/C)[sigma((y - mu + C/2)/s) - sigma((y - mu - C/2)/s)].
inline double logistic_mixture_log_density(std::span<const double> y, const MixtureParams& p, double c_width) {
  detail::check_point(y, p, Structure::logistic);
  if (!(c_width > 0.0)) throw ValidationError("logistic density: width C must be positive");
  const std::size_t d = p.dim();
  const double log_c = std::log(c_width);
  std::vector<double> terms(p.components());
  for (std::size_t k = 0; k < terms.size(); ++k) {
    double t = std::log(p.alpha[k]);
    for (std::size_t i = 0; i < d; ++i) {
      const double s = p.d_diag(k, i);
      if (!(s > 0.0)) throw ValidationError("logistic density: scale must be positive");
      const double a = y[i] - p.mu(k, i);
      const double up = (a + 0.5 * c_width) / s;
      const double lo = (a - 0.5 * c_width) / s;
      // sigma(up) - sigma(lo) = sigma(up) sigma(-lo) (1 - exp(lo - up))
      t += detail::log_sigmoid_scalar(up) + detail::log_sigmoid_scalar(-lo) +
           detail::log1mexp_scalar(c_width / s) - log_c;
    }
    terms[k] = t;
  }
  return detail::log_sum_exp_span(terms);
}

inline double mixture_log_density(std::span<const double> y, const MixtureParams& p, const SharedMatrix& shared,
                                  double c_width = 1.0) {
  switch (p.structure) {
    case Structure::diagonal: return diag_gmm_log_density(y, p);
    case Structure::tied: return tied_gmm_log_density(y, p, shared);
    case Structure::logistic: return logistic_mixture_log_density(y, p, c_width);
    case Structure::full: break;
  }
  throw ValidationError("mixture density: full-covariance heads are not supported");
}

/// Picks the smallest k with u < alpha_1 + ... + alpha_k.
inline std::size_t sample_component(const Tensor& alpha, Rng& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double cum = 0.0;
  for (std::size_t k = 0; k < alpha.size(); ++k) {
    cum += alpha[k];
    if (u < cum) return k;
  }
  // Rounding left cum slightly below 1; fall back to the last component with mass.
  for (std::size_t k = alpha.size(); k-- > 0;) {
    if (alpha[k] > 0.0) return k;
  }
  return 0;
}

/// Draws one point from the mixture.
inline std::vector<double> mixture_sample(const MixtureParams& p, const SharedMatrix& shared, Rng& rng,
                                          double c_width = 1.0) {
  const std::size_t k = sample_component(p.alpha, rng);
  const std::size_t d = p.dim();
  std::vector<double> y(d);
  switch (p.structure) {
    case Structure::diagonal:
      for (std::size_t i = 0; i < d; ++i) y[i] = p.mu(k, i) + p.d_diag(k, i) * standard_normal(rng);
      break;
    case Structure::tied: {
      Eigen::VectorXd w(static_cast<Eigen::Index>(d));
      for (std::size_t i = 0; i < d; ++i) {
        w(static_cast<Eigen::Index>(i)) = standard_normal(rng) / std::sqrt(p.d_diag(k, i));
      }
      // cov of U^{-T} w is U^{-T} D^{-1} U^{-1} = (U D U^T)^{-1}
      const Eigen::VectorXd x = shared.u().to_eigen().transpose().partialPivLu().solve(w);
      for (std::size_t i = 0; i < d; ++i) y[i] = p.mu(k, i) + x(static_cast<Eigen::Index>(i));
      break;
    }
    case Structure::logistic:
      // logistic draw plus uniform jitter on [-C/2, C/2]: the discretized
      // density is the logistic convolved with that box.
      for (std::size_t i = 0; i < d; ++i) {
        const double u = open_uniform(rng);
        const double v = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        y[i] = p.mu(k, i) + p.d_diag(k, i) * std::log(u / (1.0 - u)) + c_width * (v - 0.5);
      }
      break;
    case Structure::full: throw ValidationError("mixture sample: full-covariance heads are not supported");
  }
  return y;
}

// Batched, differentiable evaluation -----------------------------------------

/// Column layout of a head output row: [alpha logits | means | scale logits].
struct HeadLayout {
  Structure structure = Structure::diagonal;
  std::size_t k = 1;
  std::size_t d = 1;

  std::size_t alpha_begin() const noexcept { return 0; }
  std::size_t mu_begin() const noexcept { return k; }
  std::size_t scale_begin() const noexcept { return k + k * d; }
  std::size_t scale_width() const noexcept {
    return structure == Structure::full ? k * d * (d + 1) / 2 : k * d;
  }
  std::size_t width() const noexcept { return scale_begin() + scale_width(); }
};

/// Turns one head output row into MixtureParams (Eqs. softmax / identity / exp).
inline MixtureParams mixture_params_from_row(std::span<const double> row, const HeadLayout& layout) {
  if (layout.structure == Structure::full) {
    throw ValidationError("mixture params: full-covariance heads are not supported");
  }
  if (row.size() != layout.width()) {
    throw ShapeError("mixture params: head row has " + std::to_string(row.size()) + " entries, layout needs " +
                     std::to_string(layout.width()));
  }
  const auto k = layout.k;
  const auto d = layout.d;
  MixtureParams p;
  p.structure = layout.structure;
  p.alpha = coeffs_from_logits(Tensor(1, k, std::vector<double>(row.begin(), row.begin() + long(k))));
  p.mu = Tensor(k, d,
                std::vector<double>(row.begin() + long(layout.mu_begin()), row.begin() + long(layout.scale_begin())));
  p.d_diag = diag_scales_from_logits(
      Tensor(k, d, std::vector<double>(row.begin() + long(layout.scale_begin()), row.end())), layout.structure);
  return p;
}

namespace detail {

// d x (K d): tiles a row K times.
inline Tensor tile_matrix(std::size_t k, std::size_t d) {
  Tensor r(d, k * d);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < d; ++i) r(i, c * d + i) = 1.0;
  }
  return r;
}

// (K d) x K: sums each block of d columns.
inline Tensor block_sum_matrix(std::size_t k, std::size_t d) {
  Tensor s(k * d, k);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < d; ++i) s(c * d + i, c) = 1.0;
  }
  return s;
}

}  // namespace detail

/// Per-row mixture log-density of `z` (B x d) under head outputs (B x width).
/// Returns B x 1. `shared_u` is required for the tied structure.
template <class V>
V mixture_log_density_rows(const V& z, const V& head_out, const HeadLayout& layout, const V* shared_u,
                           double c_width = 1.0) {
  const auto k = layout.k;
  const auto d = layout.d;
  const auto& zv = value_of(z);
  const auto& hv = value_of(head_out);
  if (zv.cols() != d || hv.cols() != layout.width() || zv.rows() != hv.rows()) {
    throw ShapeError("mixture_log_density_rows: targets " + zv.shape_string() + " vs head outputs " +
                     hv.shape_string());
  }
  const V logits = slice(head_out, Axis::cols, 0, k);
  const V mu = slice(head_out, Axis::cols, layout.mu_begin(), layout.scale_begin());
  const auto range = scale_logit_range(layout.structure);
  const V log_scale = clamp(slice(head_out, Axis::cols, layout.scale_begin(), layout.width()), range.lo, range.hi);
  const V tile = lift(z, detail::tile_matrix(k, d));
  const V block_sum = lift(z, detail::block_sum_matrix(k, d));
  const V diff = sub(matmul(z, tile), mu);

  V components;
  double constant = 0.0;
  V extra;
  bool has_extra = false;
  switch (layout.structure) {
    case Structure::diagonal: {
      const V w = mul(diff, exp(neg(log_scale)));
      components = sub(scale(matmul(square(w), block_sum), -0.5), matmul(log_scale, block_sum));
      constant = -0.5 * static_cast<double>(d) * kLog2Pi;
      break;
    }
    case Structure::tied: {
      if (shared_u == nullptr) throw ValidationError("tied density: shared matrix missing");
      std::vector<V> rotated;
      rotated.reserve(k);
      for (std::size_t c = 0; c < k; ++c) {
        rotated.push_back(matmul(slice(diff, Axis::cols, c * d, (c + 1) * d), *shared_u));
      }
      const V r = k == 1 ? rotated.front() : concat(rotated, Axis::cols);
      const V quad = matmul(mul(square(r), exp(log_scale)), block_sum);
      components = scale(sub(matmul(log_scale, block_sum), quad), 0.5);
      constant = -0.5 * static_cast<double>(d) * kLog2Pi;
      extra = log_abs_det(*shared_u);
      SharedMatrix::checked_log_abs_det(value_of(*shared_u));
      has_extra = true;
      break;
    }
    case Structure::logistic: {
      if (!(c_width > 0.0)) throw ValidationError("logistic density: width C must be positive");
      const V inv_scale = exp(neg(log_scale));
      const V half = lift(z, Tensor(1, k * d, 0.5 * c_width));
      const V up = mul(add(diff, half), inv_scale);
      const V lo = mul(sub(diff, half), inv_scale);
      const V per_dim = add(add(log_sigmoid(up), log_sigmoid(neg(lo))), log1mexp(scale(inv_scale, c_width)));
      components = matmul(per_dim, block_sum);
      constant = -static_cast<double>(d) * std::log(c_width);
      break;
    }
    case Structure::full: throw ValidationError("mixture density: full-covariance heads are not supported");
  }
  V out = sub(log_sum_exp(add(components, logits), Reduce::per_row), log_sum_exp(logits, Reduce::per_row));
  out = add(out, lift(z, Tensor::scalar(constant)));
  if (has_extra) out = add(out, extra);
  return out;
}

}  // namespace frmdn
