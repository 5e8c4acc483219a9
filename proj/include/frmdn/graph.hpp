#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "frmdn/tensor.hpp"

namespace frmdn {

/// Operation tags recorded on the tape.
enum class Op : std::uint8_t {
  leaf,
  constant,
  add,
  sub,
  mul,
  matmul,
  exp,
  log,
  tanh,
  sigmoid,
  neg,
  sum,
  mean,
  concat,
  slice,
  square,
  log_sum_exp,
  scale,
  clamp,
  log_sigmoid,
  log1mexp,
  log_abs_det,
};

constexpr std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::constant: return "constant";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::matmul: return "matmul";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::tanh: return "tanh";
    case Op::sigmoid: return "sigmoid";
    case Op::neg: return "neg";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::concat: return "concat";
    case Op::slice: return "slice";
    case Op::square: return "square";
    case Op::log_sum_exp: return "log_sum_exp";
    case Op::scale: return "scale";
    case Op::clamp: return "clamp";
    case Op::log_sigmoid: return "log_sigmoid";
    case Op::log1mexp: return "log1mexp";
    case Op::log_abs_det: return "log_abs_det";
  }
  return "unknown";
}

/// Non-tensor arguments of an operation.
struct OpAttr {
  double c = 0.0;  // scale factor
  double lo = 0.0;
  double hi = 0.0;
  Axis axis = Axis::cols;
  Reduce reduce = Reduce::all;
  std::size_t begin = 0;
  std::size_t end = 0;
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  Graph* graph() const noexcept { return graph_; }
  std::int32_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* g, std::int32_t id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  std::int32_t id_ = -1;
};

/// Gradients of a scalar root with respect to every leaf of the graph.
/// Leaves the root does not depend on carry a zero tensor.
class Gradients {
 public:
  bool empty() const noexcept { return ids_.empty(); }
  std::size_t size() const noexcept { return ids_.size(); }
  bool contains(const Var& leaf) const noexcept { return find(leaf.id()) >= 0; }

  const Tensor& operator[](const Var& leaf) const {
    const auto i = find(leaf.id());
    if (i < 0) throw Error("gradients: node " + std::to_string(leaf.id()) + " is not a leaf");
    return grads_[static_cast<std::size_t>(i)];
  }

 private:
  friend class Graph;

  std::ptrdiff_t find(std::int32_t id) const noexcept {
    const auto it = std::lower_bound(ids_.begin(), ids_.end(), id);
    if (it == ids_.end() || *it != id) return -1;
    return it - ids_.begin();
  }

  std::vector<std::int32_t> ids_;
  std::vector<Tensor> grads_;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so node ids are
/// already a topological order. A graph is built for one evaluation and then
/// thrown away.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Differentiable input.
  Var leaf(Tensor value) { return push(Op::leaf, {}, std::move(value), {}, true); }

  /// Input excluded from differentiation.
  Var constant(Tensor value) { return push(Op::constant, {}, std::move(value), {}, false); }

  const Tensor& value(const Var& v) const { return nodes_.at(static_cast<std::size_t>(v.id_)).value; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Evaluates `kind` on `inputs` and records the node for the backward pass.
  Var forward_op(Op kind, const std::vector<Var>& inputs, const OpAttr& attr = {}) {
    std::vector<std::int32_t> parents;
    parents.reserve(inputs.size());
    bool tracked = false;
    for (const auto& in : inputs) {
      if (in.graph_ != this) throw Error(std::string(op_name(kind)) + ": input from another graph");
      parents.push_back(in.id_);
      tracked = tracked || nodes_[static_cast<std::size_t>(in.id_)].tracked;
    }
    check_arity(kind, inputs.size());
    Tensor out = evaluate(kind, parents, attr);
    return push(kind, std::move(parents), std::move(out), attr, tracked);
  }

  /// Runs the backward pass from a 1x1 root.
  Gradients backward(const Var& root) const {
    if (root.graph_ != this) throw Error("backward: root belongs to another graph");
    const auto& root_value = value(root);
    if (root_value.size() != 1) {
      throw ShapeError("backward: root must be scalar, got " + root_value.shape_string());
    }
    std::vector<Tensor> grads(nodes_.size());
    grads[static_cast<std::size_t>(root.id_)] = Tensor(root_value.rows(), root_value.cols(), 1.0);
    for (std::int32_t id = root.id_; id >= 0; --id) {
      const auto& node = nodes_[static_cast<std::size_t>(id)];
      auto& g = grads[static_cast<std::size_t>(id)];
      if (!node.tracked || g.empty() || node.op == Op::leaf) continue;
      propagate(node, g, grads);
    }
    Gradients out;
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      if (nodes_[id].op != Op::leaf) continue;
      out.ids_.push_back(static_cast<std::int32_t>(id));
      out.grads_.push_back(grads[id].empty() ? Tensor(nodes_[id].value.rows(), nodes_[id].value.cols())
                                             : std::move(grads[id]));
    }
    return out;
  }

 private:
  struct Node {
    Op op;
    Tensor value;
    std::vector<std::int32_t> parents;
    OpAttr attr;
    bool tracked;
  };

  Var push(Op op, std::vector<std::int32_t> parents, Tensor value, const OpAttr& attr, bool tracked) {
    nodes_.push_back(Node{op, std::move(value), std::move(parents), attr, tracked});
    return Var(this, static_cast<std::int32_t>(nodes_.size() - 1));
  }

  const Tensor& at(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  static void check_arity(Op kind, std::size_t n) {
    std::size_t want = 1;
    switch (kind) {
      case Op::leaf:
      case Op::constant: want = 0; break;
      case Op::add:
      case Op::sub:
      case Op::mul:
      case Op::matmul: want = 2; break;
      case Op::concat:
        if (n == 0) throw ShapeError("concat: no inputs");
        return;
      default: break;
    }
    if (n != want) {
      throw ShapeError(std::string(op_name(kind)) + ": expected " + std::to_string(want) +
                       " inputs, got " + std::to_string(n));
    }
  }

  Tensor evaluate(Op kind, const std::vector<std::int32_t>& p, const OpAttr& attr) const {
    switch (kind) {
      case Op::add: return frmdn::add(at(p[0]), at(p[1]));
      case Op::sub: return frmdn::sub(at(p[0]), at(p[1]));
      case Op::mul: return frmdn::mul(at(p[0]), at(p[1]));
      case Op::matmul: return frmdn::matmul(at(p[0]), at(p[1]));
      case Op::exp: return frmdn::exp(at(p[0]));
      case Op::log: return frmdn::log(at(p[0]));
      case Op::tanh: return frmdn::tanh(at(p[0]));
      case Op::sigmoid: return frmdn::sigmoid(at(p[0]));
      case Op::neg: return frmdn::neg(at(p[0]));
      case Op::sum: return frmdn::sum(at(p[0]), attr.reduce);
      case Op::mean: return frmdn::mean(at(p[0]));
      case Op::concat: {
        std::vector<Tensor> parts;
        parts.reserve(p.size());
        for (auto id : p) parts.push_back(at(id));
        return frmdn::concat(parts, attr.axis);
      }
      case Op::slice: return frmdn::slice(at(p[0]), attr.axis, attr.begin, attr.end);
      case Op::square: return frmdn::square(at(p[0]));
      case Op::log_sum_exp: return frmdn::log_sum_exp(at(p[0]), attr.reduce);
      case Op::scale: return frmdn::scale(at(p[0]), attr.c);
      case Op::clamp: return frmdn::clamp(at(p[0]), attr.lo, attr.hi);
      case Op::log_sigmoid: return frmdn::log_sigmoid(at(p[0]));
      case Op::log1mexp: return frmdn::log1mexp(at(p[0]));
      case Op::log_abs_det: return frmdn::log_abs_det(at(p[0]));
      case Op::leaf:
      case Op::constant: break;
    }
    throw Error("forward_op: tag " + std::string(op_name(kind)) + " is not an operation");
  }

  // Sums a gradient over rows when the parent was row-broadcast.
  static Tensor reduce_to(const Tensor& parent, Tensor g) {
    if (parent.same_shape(g)) return g;
    Tensor out(1, g.cols());
    for (std::size_t r = 0; r < g.rows(); ++r) {
      auto row = g.row_span(r);
      for (std::size_t c = 0; c < g.cols(); ++c) out[c] += row[c];
    }
    return out;
  }

  void accumulate(std::vector<Tensor>& grads, std::int32_t id, Tensor contribution) const {
    const auto& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.tracked) return;
    auto& g = grads[static_cast<std::size_t>(id)];
    if (g.empty()) {
      g = std::move(contribution);
      return;
    }
    auto dst = g.data();
    auto src = contribution.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  bool tracked(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)].tracked; }

  template <class F>
  static Tensor elementwise(const Tensor& g, const Tensor& a, F f) {
    Tensor out(g.rows(), g.cols());
    auto pg = g.data();
    auto pa = a.data();
    auto po = out.data();
    for (std::size_t i = 0; i < po.size(); ++i) po[i] = f(pg[i], pa[i]);
    return out;
  }

  void propagate(const Node& node, const Tensor& g, std::vector<Tensor>& grads) const {
    const auto& p = node.parents;
    const Tensor& y = node.value;
    switch (node.op) {
      case Op::add:
        accumulate(grads, p[0], g);
        if (tracked(p[1])) accumulate(grads, p[1], reduce_to(at(p[1]), g));
        break;
      case Op::sub:
        accumulate(grads, p[0], g);
        if (tracked(p[1])) accumulate(grads, p[1], reduce_to(at(p[1]), frmdn::neg(g)));
        break;
      case Op::mul:
        if (tracked(p[0])) accumulate(grads, p[0], frmdn::mul(g, at(p[1])));
        if (tracked(p[1])) accumulate(grads, p[1], reduce_to(at(p[1]), frmdn::mul(g, at(p[0]))));
        break;
      case Op::matmul: {
        const Tensor& a = at(p[0]);
        const Tensor& b = at(p[1]);
        if (tracked(p[0])) {
          Tensor ga(a.rows(), a.cols());
          if (b.cols() > 0) ga.map().noalias() = g.map() * b.map().transpose();
          accumulate(grads, p[0], std::move(ga));
        }
        if (tracked(p[1])) {
          Tensor gb(b.rows(), b.cols());
          if (a.rows() > 0) gb.map().noalias() = a.map().transpose() * g.map();
          accumulate(grads, p[1], std::move(gb));
        }
        break;
      }
      case Op::exp:
        accumulate(grads, p[0], elementwise(g, y, [](double gi, double yi) { return gi * yi; }));
        break;
      case Op::log:
        accumulate(grads, p[0], elementwise(g, at(p[0]), [](double gi, double xi) { return gi / xi; }));
        break;
      case Op::tanh:
        accumulate(grads, p[0],
                   elementwise(g, y, [](double gi, double yi) { return gi * (1.0 - yi * yi); }));
        break;
      case Op::sigmoid:
        accumulate(grads, p[0],
                   elementwise(g, y, [](double gi, double yi) { return gi * yi * (1.0 - yi); }));
        break;
      case Op::neg: accumulate(grads, p[0], frmdn::neg(g)); break;
      case Op::square:
        accumulate(grads, p[0],
                   elementwise(g, at(p[0]), [](double gi, double xi) { return 2.0 * xi * gi; }));
        break;
      case Op::scale: accumulate(grads, p[0], frmdn::scale(g, node.attr.c)); break;
      case Op::clamp: {
        const double lo = node.attr.lo;
        const double hi = node.attr.hi;
        accumulate(grads, p[0], elementwise(g, at(p[0]), [lo, hi](double gi, double xi) {
                     return (xi >= lo && xi <= hi) ? gi : 0.0;
                   }));
        break;
      }
      case Op::log_sigmoid:
        accumulate(grads, p[0], elementwise(g, at(p[0]), [](double gi, double xi) {
                     return gi * detail::sigmoid_scalar(-xi);
                   }));
        break;
      case Op::log1mexp:
        accumulate(grads, p[0], elementwise(g, at(p[0]), [](double gi, double xi) {
                     return gi / std::expm1(xi);
                   }));
        break;
      case Op::sum:
      case Op::mean: {
        const Tensor& a = at(p[0]);
        Tensor ga(a.rows(), a.cols());
        if (node.op == Op::sum && node.attr.reduce == Reduce::per_row) {
          for (std::size_t r = 0; r < a.rows(); ++r) {
            for (double& v : ga.row_span(r)) v = g[r];
          }
        } else {
          const double v = node.op == Op::mean ? g[0] / static_cast<double>(a.size()) : g[0];
          for (double& x : ga.data()) x = v;
        }
        accumulate(grads, p[0], std::move(ga));
        break;
      }
      case Op::log_sum_exp: {
        const Tensor& a = at(p[0]);
        Tensor ga(a.rows(), a.cols());
        if (node.attr.reduce == Reduce::per_row) {
          for (std::size_t r = 0; r < a.rows(); ++r) {
            auto src = a.row_span(r);
            auto dst = ga.row_span(r);
            for (std::size_t c = 0; c < a.cols(); ++c) dst[c] = g[r] * std::exp(src[c] - y[r]);
          }
        } else {
          auto src = a.data();
          auto dst = ga.data();
          for (std::size_t i = 0; i < src.size(); ++i) dst[i] = g[0] * std::exp(src[i] - y[0]);
        }
        accumulate(grads, p[0], std::move(ga));
        break;
      }
      case Op::concat: {
        std::size_t offset = 0;
        for (auto id : p) {
          const Tensor& part = at(id);
          const std::size_t extent = node.attr.axis == Axis::rows ? part.rows() : part.cols();
          if (tracked(id)) accumulate(grads, id, frmdn::slice(g, node.attr.axis, offset, offset + extent));
          offset += extent;
        }
        break;
      }
      case Op::slice: {
        const Tensor& a = at(p[0]);
        Tensor ga(a.rows(), a.cols());
        if (node.attr.axis == Axis::rows) {
          std::copy(g.data().begin(), g.data().end(),
                    ga.data().begin() + static_cast<std::ptrdiff_t>(node.attr.begin * a.cols()));
        } else {
          for (std::size_t r = 0; r < a.rows(); ++r) {
            auto src = g.row_span(r);
            std::copy(src.begin(), src.end(),
                      ga.row_span(r).begin() + static_cast<std::ptrdiff_t>(node.attr.begin));
          }
        }
        accumulate(grads, p[0], std::move(ga));
        break;
      }
      case Op::log_abs_det: {
        // d log|det A| / dA = A^{-T}
        const Eigen::MatrixXd inv = at(p[0]).to_eigen().partialPivLu().inverse();
        Tensor ga = Tensor::from_eigen(inv.transpose());
        for (double& v : ga.data()) v *= g[0];
        accumulate(grads, p[0], std::move(ga));
        break;
      }
      case Op::leaf:
      case Op::constant: break;
    }
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph_->value(*this); }

// Named operations on graph values. They mirror the Tensor kernels so model
// code can be written once as a template over the value type.

inline Var add(const Var& a, const Var& b) { return a.graph()->forward_op(Op::add, {a, b}); }
inline Var sub(const Var& a, const Var& b) { return a.graph()->forward_op(Op::sub, {a, b}); }
inline Var mul(const Var& a, const Var& b) { return a.graph()->forward_op(Op::mul, {a, b}); }
inline Var matmul(const Var& a, const Var& b) { return a.graph()->forward_op(Op::matmul, {a, b}); }
inline Var exp(const Var& a) { return a.graph()->forward_op(Op::exp, {a}); }
inline Var log(const Var& a) { return a.graph()->forward_op(Op::log, {a}); }
inline Var tanh(const Var& a) { return a.graph()->forward_op(Op::tanh, {a}); }
inline Var sigmoid(const Var& a) { return a.graph()->forward_op(Op::sigmoid, {a}); }
inline Var neg(const Var& a) { return a.graph()->forward_op(Op::neg, {a}); }
inline Var square(const Var& a) { return a.graph()->forward_op(Op::square, {a}); }
inline Var log_sigmoid(const Var& a) { return a.graph()->forward_op(Op::log_sigmoid, {a}); }
inline Var log1mexp(const Var& a) { return a.graph()->forward_op(Op::log1mexp, {a}); }
inline Var log_abs_det(const Var& a) { return a.graph()->forward_op(Op::log_abs_det, {a}); }
inline Var mean(const Var& a) { return a.graph()->forward_op(Op::mean, {a}); }

inline Var scale(const Var& a, double c) {
  OpAttr attr;
  attr.c = c;
  return a.graph()->forward_op(Op::scale, {a}, attr);
}
inline Var clamp(const Var& a, double lo, double hi) {
  OpAttr attr;
  attr.lo = lo;
  attr.hi = hi;
  return a.graph()->forward_op(Op::clamp, {a}, attr);
}
inline Var sum(const Var& a, Reduce how = Reduce::all) {
  OpAttr attr;
  attr.reduce = how;
  return a.graph()->forward_op(Op::sum, {a}, attr);
}
inline Var log_sum_exp(const Var& a, Reduce how = Reduce::all) {
  OpAttr attr;
  attr.reduce = how;
  return a.graph()->forward_op(Op::log_sum_exp, {a}, attr);
}
inline Var concat(const std::vector<Var>& parts, Axis axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  OpAttr attr;
  attr.axis = axis;
  return parts.front().graph()->forward_op(Op::concat, parts, attr);
}
inline Var slice(const Var& a, Axis axis, std::size_t begin, std::size_t end) {
  OpAttr attr;
  attr.axis = axis;
  attr.begin = begin;
  attr.end = end;
  return a.graph()->forward_op(Op::slice, {a}, attr);
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator-(const Var& a) { return neg(a); }

/// Wraps a constant so it can be combined with `like` in generic code.
inline Tensor lift(const Tensor&, Tensor t) { return t; }
inline Var lift(const Var& like, Tensor t) { return like.graph()->constant(std::move(t)); }

inline const Tensor& value_of(const Tensor& t) { return t; }
inline const Tensor& value_of(const Var& v) { return v.value(); }

// Gradient checking ---------------------------------------------------------

struct ValueAndGradient {
  double value = 0.0;
  std::vector<double> gradient;
};

using DifferentiableFn = std::function<ValueAndGradient(std::span<const double>)>;

/// Adapts a graph-building body to a DifferentiableFn. The body receives the
/// point as a 1 x n leaf and must return a scalar node.
inline DifferentiableFn graph_function(std::function<Var(Graph&, const Var&)> body) {
  return [body = std::move(body)](std::span<const double> point) {
    Graph g;
    const Var x = g.leaf(Tensor::row(std::vector<double>(point.begin(), point.end())));
    const Var y = body(g, x);
    const auto grads = g.backward(y);
    const auto& gx = grads[x];
    return ValueAndGradient{y.value().item(), std::vector<double>(gx.data().begin(), gx.data().end())};
  };
}

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
inline double grad_check(const DifferentiableFn& fn, std::span<const double> point, double step) {
  if (!(step > 0.0 && step <= 1e-2)) {
    throw ValidationError("grad_check: step must lie in (0, 1e-2], got " + std::to_string(step));
  }
  const auto base = fn(point);
  if (!std::isfinite(base.value)) throw NumericError("grad_check: non-finite function value");
  if (base.gradient.size() != point.size()) {
    throw ShapeError("grad_check: gradient length " + std::to_string(base.gradient.size()) +
                     " != point length " + std::to_string(point.size()));
  }
  std::vector<double> x(point.begin(), point.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double up = fn(x).value;
    x[i] = saved - step;
    const double down = fn(x).value;
    x[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("grad_check: non-finite function value at coordinate " + std::to_string(i));
    }
    const double numeric = (up - down) / (2.0 * step);
    const double analytic = base.gradient[i];
    worst = std::max(worst, std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic)));
  }
  return worst;
}

}  // namespace frmdn
