#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "frmdn/graph.hpp"
#include "frmdn/random.hpp"
#include "frmdn/tensor.hpp"

namespace frmdn {

/// Weights of the scale and translation networks of one coupling layer.
/// Both are one-hidden-layer maps: out = W2 tanh(W1 x + b1) + b2.
template <class V>
struct CouplingWeights {
  V s_w1, s_b1, s_w2, s_b2;
  V t_w1, t_b1, t_w2, t_b2;

  template <class F>
  void visit(F&& f) {
    f("s_w1", s_w1);
    f("s_b1", s_b1);
    f("s_w2", s_w2);
    f("s_b2", s_b2);
    f("t_w1", t_w1);
    f("t_b1", t_b1);
    f("t_w2", t_w2);
    f("t_b2", t_b2);
  }
};

/// RealNVP affine coupling: the masked-in coordinates pass through and the
/// rest become x * exp(s_hat) + t, with s_hat = s_clamp * tanh(s_net(x_pass)).
struct CouplingLayer {
  std::vector<unsigned char> mask;  // 1 = pass-through
  Tensor pass_select;               // d x d'
  Tensor trans_select;              // d x (d - d')
  Tensor pass_place;                // d' x d, transpose of pass_select
  Tensor trans_place;               // (d - d') x d
  double s_clamp = 5.0;
  CouplingWeights<Tensor> weights;

  std::size_t dim() const noexcept { return mask.size(); }
  std::size_t pass_dim() const noexcept { return pass_select.cols(); }
  std::size_t trans_dim() const noexcept { return trans_select.cols(); }
  std::size_t hidden() const noexcept { return weights.s_w1.cols(); }
};

/// Builds a layer with the given mask. Hidden layers get scaled-uniform
/// fan-in weights, output layers start at zero so the layer is the identity.
inline CouplingLayer make_coupling_layer(std::vector<unsigned char> mask, std::size_t hidden, double s_clamp,
                                         Rng& rng) {
  std::size_t n_pass = 0;
  for (auto m : mask) n_pass += m ? 1 : 0;
  if (n_pass == 0 || n_pass == mask.size()) {
    throw ValidationError("coupling layer: mask needs at least one pass-through and one transformed coordinate");
  }
  if (!(s_clamp > 0.0)) throw ValidationError("coupling layer: s_clamp must be positive");
  if (hidden == 0) throw ValidationError("coupling layer: hidden width must be positive");
  const std::size_t d = mask.size();
  const std::size_t n_trans = d - n_pass;
  CouplingLayer layer;
  layer.mask = std::move(mask);
  layer.s_clamp = s_clamp;
  layer.pass_select = Tensor(d, n_pass);
  layer.trans_select = Tensor(d, n_trans);
  for (std::size_t i = 0, p = 0, t = 0; i < d; ++i) {
    if (layer.mask[i]) {
      layer.pass_select(i, p++) = 1.0;
    } else {
      layer.trans_select(i, t++) = 1.0;
    }
  }
  layer.pass_place = transpose(layer.pass_select);
  layer.trans_place = transpose(layer.trans_select);

  const double bound = 1.0 / std::sqrt(static_cast<double>(n_pass));
  std::uniform_real_distribution<double> init(-bound, bound);
  auto& w = layer.weights;
  w.s_w1 = Tensor(n_pass, hidden);
  w.t_w1 = Tensor(n_pass, hidden);
  for (double& v : w.s_w1.data()) v = init(rng);
  for (double& v : w.t_w1.data()) v = init(rng);
  w.s_b1 = Tensor(1, hidden);
  w.t_b1 = Tensor(1, hidden);
  w.s_w2 = Tensor(hidden, n_trans);
  w.t_w2 = Tensor(hidden, n_trans);
  w.s_b2 = Tensor(1, n_trans);
  w.t_b2 = Tensor(1, n_trans);
  return layer;
}

/// Alternating mask: coordinate i passes through when i % 2 == parity.
inline std::vector<unsigned char> alternating_mask(std::size_t d, std::size_t parity) {
  std::vector<unsigned char> mask(d);
  for (std::size_t i = 0; i < d; ++i) mask[i] = (i % 2 == parity % 2) ? 1 : 0;
  return mask;
}

struct FlowStack {
  std::vector<CouplingLayer> layers;

  std::size_t depth() const noexcept { return layers.size(); }
};

/// `depth` coupling layers on dimension d with masks flipping between layers.
inline FlowStack make_flow_stack(std::size_t d, std::size_t depth, std::size_t hidden, double s_clamp, Rng& rng) {
  FlowStack stack;
  if (depth > 0 && d < 2) throw ValidationError("flow: coupling layers need dimension >= 2");
  for (std::size_t n = 0; n < depth; ++n) {
    stack.layers.push_back(make_coupling_layer(alternating_mask(d, n), hidden, s_clamp, rng));
  }
  return stack;
}

template <class V>
struct FlowResult {
  V out;      // B x d
  V log_det;  // B x 1
};

namespace detail {

template <class V>
struct CouplingNets {
  V pass;
  V s_hat;
  V t;
};

template <class V>
CouplingNets<V> coupling_nets(const V& x, const CouplingLayer& layer, const CouplingWeights<V>& w) {
  const V pass = matmul(x, lift(x, layer.pass_select));
  const V hs = tanh(add(matmul(pass, w.s_w1), w.s_b1));
  const V s_hat = scale(tanh(add(matmul(hs, w.s_w2), w.s_b2)), layer.s_clamp);
  const V ht = tanh(add(matmul(pass, w.t_w1), w.t_b1));
  const V t = add(matmul(ht, w.t_w2), w.t_b2);
  return {pass, s_hat, t};
}

inline void check_flow_input(const Tensor& x, std::size_t d) {
  if (x.cols() != d) {
    throw ShapeError("flow: input " + x.shape_string() + " does not match dimension " + std::to_string(d));
  }
}

}  // namespace detail

/// One coupling layer applied to a batch of rows, with per-row log|det J|.
template <class V>
FlowResult<V> coupling_forward(const V& x, const CouplingLayer& layer, const CouplingWeights<V>& w) {
  detail::check_flow_input(value_of(x), layer.dim());
  const auto nets = detail::coupling_nets(x, layer, w);
  const V trans = matmul(x, lift(x, layer.trans_select));
  const V y_trans = add(mul(trans, exp(nets.s_hat)), nets.t);
  const V y = add(matmul(nets.pass, lift(x, layer.pass_place)), matmul(y_trans, lift(x, layer.trans_place)));
  return {y, sum(nets.s_hat, Reduce::per_row)};
}

inline FlowResult<Tensor> coupling_forward(const Tensor& x, const CouplingLayer& layer) {
  return coupling_forward(x, layer, layer.weights);
}

inline Tensor coupling_inverse(const Tensor& y, const CouplingLayer& layer) {
  detail::check_flow_input(y, layer.dim());
  const auto nets = detail::coupling_nets(y, layer, layer.weights);
  const Tensor y_trans = matmul(y, layer.trans_select);
  const Tensor x_trans = mul(sub(y_trans, nets.t), exp(neg(nets.s_hat)));
  return add(matmul(nets.pass, layer.pass_place), matmul(x_trans, layer.trans_place));
}

/// Composes the layers in order; total log-det is the sum over layers.
/// `weights[n]` supplies the weights of layer n (graph leaves or the
/// layer's own tensors).
template <class V>
FlowResult<V> flow_forward(const V& y, const FlowStack& stack, const std::vector<const CouplingWeights<V>*>& weights) {
  V z = y;
  V total = lift(y, Tensor(value_of(y).rows(), 1));
  for (std::size_t n = 0; n < stack.layers.size(); ++n) {
    auto step = coupling_forward(z, stack.layers[n], *weights[n]);
    z = step.out;
    total = add(total, step.log_det);
  }
  return {z, total};
}

inline std::vector<const CouplingWeights<Tensor>*> own_weights(const FlowStack& stack) {
  std::vector<const CouplingWeights<Tensor>*> w;
  w.reserve(stack.layers.size());
  for (const auto& layer : stack.layers) w.push_back(&layer.weights);
  return w;
}

inline FlowResult<Tensor> flow_forward(const Tensor& y, const FlowStack& stack) {
  return flow_forward(y, stack, own_weights(stack));
}

/// Inverse map: layer inverses in reverse order.
inline Tensor flow_inverse(const Tensor& z, const FlowStack& stack) {
  Tensor y = z;
  for (std::size_t n = stack.layers.size(); n-- > 0;) y = coupling_inverse(y, stack.layers[n]);
  return y;
}

}  // namespace frmdn
