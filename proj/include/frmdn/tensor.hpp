#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "frmdn/error.hpp"

namespace frmdn {

/// Dense row-major matrix of doubles. Vectors are 1 x n rows, scalars 1 x 1.
///
/// Every operation in the library works on rank-2 tensors; the batch
/// dimension, when present, is always the row index.
class Tensor {
 public:
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<RowMajor>;
  using ConstMap = Eigen::Map<const RowMajor>;

  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("tensor: data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string());
    }
  }

  static Tensor scalar(double v) { return Tensor(1, 1, v); }
  static Tensor row(std::vector<double> values) {
    const auto n = values.size();
    return Tensor(1, n, std::move(values));
  }
  static Tensor identity(std::size_t n) {
    Tensor t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }
  static Tensor from_eigen(const Eigen::MatrixXd& m) {
    Tensor t(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
    t.map() = m;
    return t;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::array<std::size_t, 2> shape() const noexcept { return {rows_, cols_}; }
  bool same_shape(const Tensor& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& vec() const noexcept { return data_; }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<double> row_span(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row_span(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item: tensor " + shape_string() + " is not a scalar");
    return data_[0];
  }

  Map map() noexcept { return Map(data_.data(), Eigen::Index(rows_), Eigen::Index(cols_)); }
  ConstMap map() const noexcept {
    return ConstMap(data_.data(), Eigen::Index(rows_), Eigen::Index(cols_));
  }
  Eigen::MatrixXd to_eigen() const { return map(); }

  std::string shape_string() const {
    return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

enum class Axis { rows = 0, cols = 1 };

/// Reductions either collapse the whole tensor to 1x1 or each row to one value.
enum class Reduce { all, per_row };

namespace detail {

[[noreturn]] inline void shape_mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                   b.shape_string());
}

// b either matches a exactly or is a 1 x cols row broadcast over a's rows.
inline bool row_broadcast(const char* op, const Tensor& a, const Tensor& b) {
  if (a.same_shape(b)) return false;
  if (b.rows() == 1 && b.cols() == a.cols()) return true;
  shape_mismatch(op, a, b);
}

template <class F>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f) {
  const bool bc = row_broadcast(op, a, b);
  Tensor out(a.rows(), a.cols());
  const std::size_t n = a.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* pa = a.data().data() + r * n;
    const double* pb = b.data().data() + (bc ? 0 : r * n);
    double* po = out.data().data() + r * n;
    for (std::size_t c = 0; c < n; ++c) po[c] = f(pa[c], pb[c]);
  }
  return out;
}

template <class F>
Tensor unary(const Tensor& a, F f) {
  Tensor out(a.rows(), a.cols());
  auto in = a.data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = f(in[i]);
  return out;
}

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double log_sigmoid_scalar(double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); }

// log(1 - exp(-x)) for x > 0.
inline double log1mexp_scalar(double x) {
  return x < 0.6931471805599453 ? std::log(-std::expm1(-x)) : std::log1p(-std::exp(-x));
}

inline double log_sum_exp_span(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary("add", a, b, [](double x, double y) { return x + y; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary("sub", a, b, [](double x, double y) { return x - y; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary("mul", a, b, [](double x, double y) { return x * y; });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) detail::shape_mismatch("matmul", a, b);
  Tensor out(a.rows(), b.cols());
  if (a.cols() == 0) return out;
  out.map().noalias() = a.map() * b.map();
  return out;
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::exp(x); });
}
inline Tensor log(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::log(x); });
}
inline Tensor tanh(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::tanh(x); });
}
inline Tensor sigmoid(const Tensor& a) { return detail::unary(a, detail::sigmoid_scalar); }
inline Tensor neg(const Tensor& a) {
  return detail::unary(a, [](double x) { return -x; });
}
inline Tensor square(const Tensor& a) {
  return detail::unary(a, [](double x) { return x * x; });
}
inline Tensor scale(const Tensor& a, double c) {
  return detail::unary(a, [c](double x) { return c * x; });
}
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); });
}
inline Tensor log_sigmoid(const Tensor& a) { return detail::unary(a, detail::log_sigmoid_scalar); }
inline Tensor log1mexp(const Tensor& a) { return detail::unary(a, detail::log1mexp_scalar); }

inline Tensor sum(const Tensor& a, Reduce how = Reduce::all) {
  if (how == Reduce::all) {
    double s = 0.0;
    for (double x : a.data()) s += x;
    return Tensor::scalar(s);
  }
  Tensor out(a.rows(), 1);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double s = 0.0;
    for (double x : a.row_span(r)) s += x;
    out[r] = s;
  }
  return out;
}

inline Tensor mean(const Tensor& a) {
  if (a.empty()) throw ShapeError("mean: empty tensor " + a.shape_string());
  return Tensor::scalar(sum(a).item() / static_cast<double>(a.size()));
}

inline Tensor log_sum_exp(const Tensor& a, Reduce how = Reduce::all) {
  if (how == Reduce::all) return Tensor::scalar(detail::log_sum_exp_span(a.data()));
  Tensor out(a.rows(), 1);
  for (std::size_t r = 0; r < a.rows(); ++r) out[r] = detail::log_sum_exp_span(a.row_span(r));
  return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, Axis axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Tensor& first = parts.front();
  if (axis == Axis::rows) {
    std::size_t rows = 0;
    for (const auto& p : parts) {
      if (p.cols() != first.cols()) detail::shape_mismatch("concat", first, p);
      rows += p.rows();
    }
    std::vector<double> data;
    data.reserve(rows * first.cols());
    for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
    return Tensor(rows, first.cols(), std::move(data));
  }
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != first.rows()) detail::shape_mismatch("concat", first, p);
    cols += p.cols();
  }
  Tensor out(first.rows(), cols);
  for (std::size_t r = 0; r < first.rows(); ++r) {
    double* dst = out.row_span(r).data();
    for (const auto& p : parts) {
      auto src = p.row_span(r);
      std::copy(src.begin(), src.end(), dst);
      dst += src.size();
    }
  }
  return out;
}

inline Tensor slice(const Tensor& a, Axis axis, std::size_t begin, std::size_t end) {
  const std::size_t extent = axis == Axis::rows ? a.rows() : a.cols();
  if (begin > end || end > extent) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of bounds for " + a.shape_string());
  }
  if (axis == Axis::rows) {
    const auto first = a.data().begin() + static_cast<std::ptrdiff_t>(begin * a.cols());
    const auto last = a.data().begin() + static_cast<std::ptrdiff_t>(end * a.cols());
    return Tensor(end - begin, a.cols(), std::vector<double>(first, last));
  }
  Tensor out(a.rows(), end - begin);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto src = a.row_span(r);
    std::copy(src.begin() + static_cast<std::ptrdiff_t>(begin),
              src.begin() + static_cast<std::ptrdiff_t>(end), out.row_span(r).begin());
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  Tensor out(a.cols(), a.rows());
  out.map() = a.map().transpose();
  return out;
}

/// log|det a| via LU with partial pivoting; -inf for an exactly singular matrix.
inline Tensor log_abs_det(const Tensor& a) {
  if (a.rows() != a.cols()) detail::shape_mismatch("log_abs_det", a, a);
  if (a.rows() == 0) return Tensor::scalar(0.0);
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(a.to_eigen());
  const auto& m = lu.matrixLU();
  double s = 0.0;
  for (Eigen::Index i = 0; i < m.rows(); ++i) s += std::log(std::abs(m(i, i)));
  return Tensor::scalar(s);
}

}  // namespace frmdn
