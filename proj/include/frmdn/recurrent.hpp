#pragma once

#include <cmath>
#include <span>
#include <utility>

#include "frmdn/distributions.hpp"
#include "frmdn/graph.hpp"
#include "frmdn/random.hpp"

namespace frmdn {

/// Gate weights of an LSTM cell. `w` maps the concatenation [x, h] to the
/// four gate pre-activations laid out as [input | forget | cell | output].
template <class V>
struct LstmWeights {
  V w;  // (d_in + H) x 4H
  V b;  // 1 x 4H

  template <class F>
  void visit(F&& f) {
    f("lstm.w", w);
    f("lstm.b", b);
  }
};

struct LstmParams {
  std::size_t input_size = 0;
  std::size_t hidden_size = 0;
  LstmWeights<Tensor> weights;
};

/// Scaled-uniform fan-in weights, zero biases except the forget gate at 1.
inline LstmParams make_lstm(std::size_t input_size, std::size_t hidden_size, Rng& rng) {
  if (input_size == 0 || hidden_size == 0) throw ValidationError("lstm: sizes must be positive");
  LstmParams p;
  p.input_size = input_size;
  p.hidden_size = hidden_size;
  const std::size_t fan_in = input_size + hidden_size;
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> init(-bound, bound);
  p.weights.w = Tensor(fan_in, 4 * hidden_size);
  for (double& v : p.weights.w.data()) v = init(rng);
  p.weights.b = Tensor(1, 4 * hidden_size);
  for (std::size_t j = hidden_size; j < 2 * hidden_size; ++j) p.weights.b[j] = 1.0;
  return p;
}

/// Hidden and cell vectors, one row per sequence in the batch.
struct RecurrentState {
  Tensor h;
  Tensor c;

  static RecurrentState zeros(std::size_t batch, std::size_t hidden) {
    return {Tensor(batch, hidden), Tensor(batch, hidden)};
  }
};

template <class V>
struct CellOutput {
  V h;
  V c;
};

template <class V>
CellOutput<V> lstm_cell(const V& x, const V& h, const V& c, const LstmWeights<V>& w, std::size_t hidden) {
  const V gates = add(matmul(concat(std::vector<V>{x, h}, Axis::cols), w.w), w.b);
  const V in_gate = sigmoid(slice(gates, Axis::cols, 0, hidden));
  const V forget_gate = sigmoid(slice(gates, Axis::cols, hidden, 2 * hidden));
  const V candidate = tanh(slice(gates, Axis::cols, 2 * hidden, 3 * hidden));
  const V out_gate = sigmoid(slice(gates, Axis::cols, 3 * hidden, 4 * hidden));
  const V c_next = add(mul(forget_gate, c), mul(in_gate, candidate));
  return {mul(out_gate, tanh(c_next)), c_next};
}

/// One LSTM step on a batch of inputs (B x d_in). Returns the new hidden
/// rows and the advanced state.
inline std::pair<Tensor, RecurrentState> lstm_step(const Tensor& x, const RecurrentState& state,
                                                   const LstmParams& params) {
  if (x.cols() != params.input_size) {
    throw ShapeError("lstm_step: input " + x.shape_string() + " for input size " +
                     std::to_string(params.input_size));
  }
  if (state.h.cols() != params.hidden_size || state.c.cols() != params.hidden_size ||
      state.h.rows() != x.rows() || !state.h.same_shape(state.c)) {
    throw ShapeError("lstm_step: state " + state.h.shape_string() + "/" + state.c.shape_string() +
                     " for hidden size " + std::to_string(params.hidden_size) + " and batch " +
                     std::to_string(x.rows()));
  }
  auto out = lstm_cell(x, state.h, state.c, params.weights, params.hidden_size);
  Tensor h = out.h;
  return {std::move(h), RecurrentState{std::move(out.h), std::move(out.c)}};
}

/// Linear projection from the hidden state to the mixture head outputs.
template <class V>
struct HeadWeights {
  V w;  // H x width
  V b;  // 1 x width

  template <class F>
  void visit(F&& f) {
    f("head.w", w);
    f("head.b", b);
  }
};

struct HeadParams {
  HeadLayout layout;
  std::size_t hidden_size = 0;
  HeadWeights<Tensor> weights;

  std::size_t output_width() const noexcept { return layout.width(); }
};

inline HeadParams make_head(std::size_t hidden_size, const HeadLayout& layout, Rng& rng) {
  HeadParams p;
  p.layout = layout;
  p.hidden_size = hidden_size;
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_size));
  std::uniform_real_distribution<double> init(-bound, bound);
  p.weights.w = Tensor(hidden_size, layout.width());
  for (double& v : p.weights.w.data()) v = init(rng);
  p.weights.b = Tensor(1, layout.width());
  return p;
}

template <class V>
V head_outputs(const V& h, const HeadWeights<V>& w) {
  return add(matmul(h, w.w), w.b);
}

/// Maps one hidden vector to constrained mixture parameters:
/// softmax coefficients, raw means, exponentiated scales.
inline MixtureParams head_project(std::span<const double> h, const HeadParams& head) {
  if (h.size() != head.hidden_size) {
    throw ShapeError("head_project: hidden vector of length " + std::to_string(h.size()) + " for hidden size " +
                     std::to_string(head.hidden_size));
  }
  const Tensor out = head_outputs(Tensor::row(std::vector<double>(h.begin(), h.end())), head.weights);
  return mixture_params_from_row(out.row_span(0), head.layout);
}

}  // namespace frmdn
