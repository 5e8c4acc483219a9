#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "frmdn/data.hpp"
#include "frmdn/distributions.hpp"
#include "frmdn/flow.hpp"
#include "frmdn/graph.hpp"
#include "frmdn/recurrent.hpp"

namespace frmdn {

/// Architecture of an FRMDN (or, with the flow disabled, a plain RMDN).
struct ModelConfig {
  std::size_t d = 2;
  std::size_t d_action = 0;
  std::size_t k = 5;
  std::size_t hidden = 256;
  std::size_t flow_depth = 2;  // coupling layers; 2 = one pair of opposite masks
  std::size_t flow_hidden = 64;
  double s_clamp = 5.0;
  Structure structure = Structure::diagonal;
  bool flow_enabled = true;
  double c_width = 1.0;
  std::uint64_t seed = 0;

  bool uses_flow() const noexcept { return flow_enabled && flow_depth > 0; }
  std::size_t input_size() const noexcept { return d + d_action; }
  HeadLayout layout() const { return {structure, k, d}; }

  void validate() const {
    if (d == 0) throw ValidationError("model config: d must be positive");
    if (k == 0) throw ValidationError("model config: k must be positive");
    if (hidden == 0) throw ValidationError("model config: hidden must be positive");
    if (structure == Structure::full) {
      throw ValidationError("model config: full-covariance heads cannot be trained; use diagonal, tied or logistic");
    }
    if (!(c_width > 0.0)) throw ValidationError("model config: c_width must be positive");
    if (uses_flow()) {
      if (d < 2) throw ValidationError("model config: a flow needs d >= 2");
      if (flow_hidden == 0) throw ValidationError("model config: flow_hidden must be positive");
      if (!(s_clamp > 0.0)) throw ValidationError("model config: s_clamp must be positive");
    }
  }

  /// key=value lines, one per field.
  std::string to_text() const {
    std::ostringstream out;
    out.precision(17);
    out << "d=" << d << '\n'
        << "d_action=" << d_action << '\n'
        << "k=" << k << '\n'
        << "hidden=" << hidden << '\n'
        << "flow_depth=" << flow_depth << '\n'
        << "flow_hidden=" << flow_hidden << '\n'
        << "s_clamp=" << s_clamp << '\n'
        << "structure=" << to_string(structure) << '\n'
        << "flow=" << (flow_enabled ? "on" : "off") << '\n'
        << "c_width=" << c_width << '\n'
        << "seed=" << seed << '\n';
    return out.str();
  }

  /// Applies one key=value pair; returns false for keys it does not own.
  bool set(const std::string& key, const std::string& value);
};

namespace config_detail {

inline std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ValidationError("invalid value '" + v + "' for " + key + " (expected a non-negative integer)");
  }
  return out;
}

inline double to_double(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  double out = 0.0;
  in >> out;
  if (!in || !in.eof() || !std::isfinite(out)) {
    throw ValidationError("invalid value '" + v + "' for " + key + " (expected a number)");
  }
  return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ValidationError("invalid value '" + v + "' for " + key + " (expected on/off)");
}

/// Splits key=value lines; blank lines and '#' comments are skipped.
inline std::vector<std::pair<std::string, std::string>> parse_lines(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("config line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    }
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

}  // namespace config_detail

inline bool ModelConfig::set(const std::string& key, const std::string& value) {
  using namespace config_detail;
  if (key == "d") d = to_size(key, value);
  else if (key == "d_action") d_action = to_size(key, value);
  else if (key == "k") k = to_size(key, value);
  else if (key == "hidden") hidden = to_size(key, value);
  else if (key == "flow_depth") flow_depth = to_size(key, value);
  else if (key == "flow_hidden") flow_hidden = to_size(key, value);
  else if (key == "s_clamp") s_clamp = to_double(key, value);
  else if (key == "structure") structure = parse_structure(value);
  else if (key == "flow") flow_enabled = to_bool(key, value);
  else if (key == "c_width") c_width = to_double(key, value);
  else if (key == "seed") seed = to_size(key, value);
  else return false;
  return true;
}

/// The trainable model: LSTM backbone, mixture head, optional shared U for
/// the tied head, and the coupling flow applied to targets.
struct FrmdnModel {
  ModelConfig config;
  LstmParams lstm;
  HeadParams head;
  Tensor shared_u;  // d x d when the head is tied, empty otherwise
  FlowStack flow;

  /// Seeded initialization. The flow starts as the identity and U as I.
  static FrmdnModel create(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    FrmdnModel m;
    m.config = cfg;
    m.lstm = make_lstm(cfg.input_size(), cfg.hidden, rng);
    m.head = make_head(cfg.hidden, cfg.layout(), rng);
    if (cfg.structure == Structure::tied) m.shared_u = Tensor::identity(cfg.d);
    if (cfg.uses_flow()) m.flow = make_flow_stack(cfg.d, cfg.flow_depth, cfg.flow_hidden, cfg.s_clamp, rng);
    return m;
  }

  bool tied() const noexcept { return config.structure == Structure::tied; }

  SharedMatrix shared() const {
    return tied() ? SharedMatrix::full(shared_u) : SharedMatrix::identity(config.d);
  }

  /// Visits every trainable tensor in canonical order with its name.
  template <class F>
  void visit_parameters(F&& f) {
    lstm.weights.visit(f);
    head.weights.visit(f);
    if (tied()) f("shared.u", shared_u);
    for (std::size_t n = 0; n < flow.layers.size(); ++n) {
      const std::string prefix = "flow." + std::to_string(n) + ".";
      flow.layers[n].weights.visit([&](const char* name, Tensor& t) { f(prefix + name, t); });
    }
  }

  std::vector<std::pair<std::string, Tensor*>> parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    visit_parameters([&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
    return out;
  }

  // The visitor below only reads, so the const_casts are safe.
  std::size_t parameter_count() const {
    std::size_t n = 0;
    const_cast<FrmdnModel*>(this)->visit_parameters([&](const std::string&, Tensor& t) { n += t.size(); });
    return n;
  }

  std::vector<double> flat_parameters() const {
    std::vector<double> out;
    const_cast<FrmdnModel*>(this)->visit_parameters(
        [&](const std::string&, Tensor& t) { out.insert(out.end(), t.data().begin(), t.data().end()); });
    return out;
  }

  void set_flat_parameters(std::span<const double> values) {
    std::size_t offset = 0;
    visit_parameters([&](const std::string&, Tensor& t) {
      if (offset + t.size() > values.size()) throw ShapeError("set_flat_parameters: vector too short");
      std::copy(values.begin() + long(offset), values.begin() + long(offset + t.size()), t.data().begin());
      offset += t.size();
    });
    if (offset != values.size()) throw ShapeError("set_flat_parameters: vector too long");
  }
};

/// Model parameters as graph leaves, mirroring FrmdnModel's layout.
struct BoundModel {
  LstmWeights<Var> lstm;
  HeadWeights<Var> head;
  Var shared_u;
  std::vector<CouplingWeights<Var>> flow;
  std::vector<Var> leaves;  // canonical parameter order

  std::vector<const CouplingWeights<Var>*> flow_refs() const {
    std::vector<const CouplingWeights<Var>*> out;
    for (const auto& w : flow) out.push_back(&w);
    return out;
  }
};

inline BoundModel bind(Graph& g, FrmdnModel& model) {
  BoundModel b;
  b.flow.resize(model.flow.layers.size());
  std::vector<Var*> slots;
  b.lstm.visit([&](const char*, Var& v) { slots.push_back(&v); });
  b.head.visit([&](const char*, Var& v) { slots.push_back(&v); });
  if (model.tied()) slots.push_back(&b.shared_u);
  for (auto& w : b.flow) w.visit([&](const char*, Var& v) { slots.push_back(&v); });
  std::size_t i = 0;
  model.visit_parameters([&](const std::string&, Tensor& t) {
    *slots[i] = g.leaf(t);
    b.leaves.push_back(*slots[i]);
    ++i;
  });
  return b;
}

/// Mean per-step NLL of a batch split into its two terms.
struct NllReport {
  double total = 0.0;
  double mixture = 0.0;  // -log p(f(y)) under the mixture
  double logdet = 0.0;   // -log|det df/dy|
};

template <class V>
struct NllTerms {
  V total;
  V mixture;
  V logdet;
};

/// Teacher-forced NLL of a batch: inputs x_t (observation and action) drive
/// the LSTM, the head at step t scores the flow image of y_{t+1}.
template <class V>
NllTerms<V> sequence_nll_terms(const ModelConfig& cfg, const FlowStack& flow, const LstmWeights<V>& lstm,
                               const HeadWeights<V>& head, const V* shared_u,
                               const std::vector<const CouplingWeights<V>*>& flow_weights, const SequenceBatch& batch) {
  if (batch.t < 2) throw ValidationError("sequence_nll: sequences need T >= 2, got T=" + std::to_string(batch.t));
  if (batch.q == 0) throw ValidationError("sequence_nll: empty batch");
  if (batch.d != cfg.d || batch.d_action != cfg.d_action) {
    throw ShapeError("sequence_nll: batch dims (d=" + std::to_string(batch.d) + ", d_action=" +
                     std::to_string(batch.d_action) + ") do not match model (d=" + std::to_string(cfg.d) +
                     ", d_action=" + std::to_string(cfg.d_action) + ")");
  }
  const V& anchor = lstm.w;
  V h = lift(anchor, Tensor(batch.q, cfg.hidden));
  V c = lift(anchor, Tensor(batch.q, cfg.hidden));
  std::vector<V> hidden;
  hidden.reserve(batch.t - 1);
  for (std::size_t step = 0; step + 1 < batch.t; ++step) {
    auto out = lstm_cell(lift(anchor, batch.step_inputs(step)), h, c, lstm, cfg.hidden);
    h = out.h;
    c = out.c;
    hidden.push_back(h);
  }
  const V all_hidden = hidden.size() == 1 ? hidden.front() : concat(hidden, Axis::rows);
  const V head_out = head_outputs(all_hidden, head);
  const V targets = lift(anchor, batch.stacked_targets());

  V z = targets;
  V logdet;
  if (cfg.uses_flow()) {
    auto fr = flow_forward(targets, flow, flow_weights);
    z = fr.out;
    logdet = neg(mean(fr.log_det));
  } else {
    logdet = lift(anchor, Tensor::scalar(0.0));
  }
  const V log_density = mixture_log_density_rows(z, head_out, cfg.layout(), shared_u, cfg.c_width);
  const V mixture = neg(mean(log_density));
  return {add(mixture, logdet), mixture, logdet};
}

inline NllReport to_report(const Tensor& total, const Tensor& mixture, const Tensor& logdet) {
  NllReport r{total.item(), mixture.item(), logdet.item()};
  if (!std::isfinite(r.total)) throw NumericError("sequence_nll: non-finite loss");
  return r;
}

/// Mean NLL per (sequence, step) of a batch, evaluated without a tape.
inline NllReport sequence_nll(const FrmdnModel& model, const SequenceBatch& batch) {
  const Tensor* u = model.tied() ? &model.shared_u : nullptr;
  auto terms = sequence_nll_terms<Tensor>(model.config, model.flow, model.lstm.weights, model.head.weights, u,
                                          own_weights(model.flow), batch);
  return to_report(terms.total, terms.mixture, terms.logdet);
}

/// Loss and gradients (canonical parameter order) from one tape.
struct LossAndGrads {
  NllReport loss;
  std::vector<Tensor> grads;
};

inline LossAndGrads sequence_nll_with_grads(FrmdnModel& model, const SequenceBatch& batch) {
  Graph g;
  BoundModel b = bind(g, model);
  const Var* u = model.tied() ? &b.shared_u : nullptr;
  auto terms = sequence_nll_terms<Var>(model.config, model.flow, b.lstm, b.head, u, b.flow_refs(), batch);
  LossAndGrads out;
  out.loss = to_report(terms.total.value(), terms.mixture.value(), terms.logdet.value());
  const auto grads = g.backward(terms.total);
  out.grads.reserve(b.leaves.size());
  for (const auto& leaf : b.leaves) out.grads.push_back(grads[leaf]);
  return out;
}

/// The total NLL of `batch` as a function of the flat parameter vector,
/// with its gradient. Works on a private copy of the model.
inline DifferentiableFn nll_objective(FrmdnModel model, SequenceBatch batch) {
  auto m = std::make_shared<FrmdnModel>(std::move(model));
  auto b = std::make_shared<const SequenceBatch>(std::move(batch));
  return [m, b](std::span<const double> point) {
    m->set_flat_parameters(point);
    auto lg = sequence_nll_with_grads(*m, *b);
    ValueAndGradient out{lg.loss.total, {}};
    for (const auto& g : lg.grads) out.gradient.insert(out.gradient.end(), g.data().begin(), g.data().end());
    return out;
  };
}

/// Adds N(0, std^2) noise to every parameter. Used to move a fresh model
/// (identity flow, zero head bias) to a generic point.
inline void perturb_parameters(FrmdnModel& model, double std_dev, Rng& rng) {
  model.visit_parameters([&](const std::string&, Tensor& t) {
    for (double& v : t.data()) v += std_dev * standard_normal(rng);
  });
}

/// Average of sequence_nll over fixed-length windows of a dataset.
inline NllReport evaluate(const FrmdnModel& model, const SequenceBatch& data, std::size_t window,
                          std::size_t batch_size = 64) {
  const auto len = std::min(window, data.t);
  const auto refs = make_windows(data, len);
  if (refs.empty()) throw ValidationError("evaluate: dataset has no complete window");
  double mixture = 0.0;
  double logdet = 0.0;
  for (std::size_t i = 0; i < refs.size(); i += batch_size) {
    const auto n = std::min(batch_size, refs.size() - i);
    const auto batch = gather_windows(data, std::span(refs).subspan(i, n), len);
    const auto r = sequence_nll(model, batch);
    mixture += r.mixture * static_cast<double>(n);
    logdet += r.logdet * static_cast<double>(n);
  }
  NllReport out;
  out.mixture = mixture / static_cast<double>(refs.size());
  out.logdet = logdet / static_cast<double>(refs.size());
  out.total = out.mixture + out.logdet;
  return out;
}

// Optimization ---------------------------------------------------------------

enum class OptimizerKind { rmsprop, adam };

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "rmsprop" || s == "RMSprop") return OptimizerKind::rmsprop;
  if (s == "adam" || s == "Adam") return OptimizerKind::adam;
  throw ValidationError("unknown optimizer '" + std::string(s) + "'");
}

constexpr std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "rmsprop"; }

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::rmsprop;
  double lr = 1e-4;
  double clip_norm = 10.0;
  double rho = 0.99;  // RMSprop averaging
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// RMSprop / Adam with global-norm gradient clipping.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg = {}) : cfg_(cfg) {
    if (!(cfg_.lr >= 0.0)) throw ValidationError("optimizer: learning rate must be non-negative");
    if (!(cfg_.clip_norm > 0.0)) throw ValidationError("optimizer: clip norm must be positive");
  }

  const OptimizerConfig& config() const noexcept { return cfg_; }
  std::uint64_t steps() const noexcept { return steps_; }

  /// Clips, validates and applies one update. Returns the pre-clip norm.
  /// Throws NumericError before touching `params` if any clipped gradient
  /// is non-finite.
  double update(const std::vector<Tensor*>& params, std::vector<Tensor> grads) {
    if (params.size() != grads.size()) throw ShapeError("optimizer: parameter/gradient count mismatch");
    double sq = 0.0;
    for (const auto& g : grads) {
      for (double v : g.data()) sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) {
      const double f = cfg_.clip_norm / norm;
      for (auto& g : grads) {
        for (double& v : g.data()) v *= f;
      }
    }
    for (const auto& g : grads) {
      if (!g.all_finite()) throw NumericError("optimizer: non-finite gradient after clipping");
    }
    if (first_.empty()) {
      for (const auto* p : params) {
        first_.emplace_back(p->rows(), p->cols());
        second_.emplace_back(p->rows(), p->cols());
      }
    }
    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i]->data();
      auto g = grads[i].data();
      auto m = first_[i].data();
      auto v = second_[i].data();
      if (p.size() != g.size() || p.size() != v.size()) throw ShapeError("optimizer: shape changed between steps");
      for (std::size_t j = 0; j < p.size(); ++j) {
        if (cfg_.kind == OptimizerKind::rmsprop) {
          v[j] = cfg_.rho * v[j] + (1.0 - cfg_.rho) * g[j] * g[j];
          p[j] -= cfg_.lr * g[j] / (std::sqrt(v[j]) + cfg_.eps);
        } else {
          m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
          v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
          p[j] -= cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
        }
      }
    }
    return norm;
  }

  /// Moment buffers, for checkpointing.
  std::vector<Tensor>& first_moments() noexcept { return first_; }
  std::vector<Tensor>& second_moments() noexcept { return second_; }
  void restore(std::uint64_t steps, std::vector<Tensor> first, std::vector<Tensor> second) {
    steps_ = steps;
    first_ = std::move(first);
    second_ = std::move(second);
  }

 private:
  OptimizerConfig cfg_;
  std::uint64_t steps_ = 0;
  std::vector<Tensor> first_;
  std::vector<Tensor> second_;
};

struct LossRecord {
  NllReport loss;
  double grad_norm = 0.0;
};

/// One gradient step on `batch`. On a non-finite gradient the model is left
/// unchanged and NumericError is thrown.
inline LossRecord train_step(FrmdnModel& model, const SequenceBatch& batch, Optimizer& opt) {
  auto lg = sequence_nll_with_grads(model, batch);
  std::vector<Tensor*> params;
  model.visit_parameters([&](const std::string&, Tensor& t) { params.push_back(&t); });
  LossRecord rec;
  rec.loss = lg.loss;
  rec.grad_norm = opt.update(params, std::move(lg.grads));
  if (model.tied()) SharedMatrix::checked_log_abs_det(model.shared_u);
  return rec;
}

/// One pass over shuffled windows. The shuffle is seeded by (seed, epoch).
inline NllReport train_epoch(FrmdnModel& model, const SequenceBatch& data, std::size_t window,
                             std::size_t batch_size, Optimizer& opt, std::uint64_t seed, std::uint64_t epoch) {
  const auto len = std::min(window, data.t);
  auto refs = make_windows(data, len);
  if (refs.empty()) throw ValidationError("train_epoch: dataset has no complete window");
  Rng rng(derive_seed(seed, epoch));
  std::shuffle(refs.begin(), refs.end(), rng);
  double mixture = 0.0;
  double logdet = 0.0;
  for (std::size_t i = 0; i < refs.size(); i += batch_size) {
    const auto n = std::min(batch_size, refs.size() - i);
    const auto batch = gather_windows(data, std::span(refs).subspan(i, n), len);
    const auto rec = train_step(model, batch, opt);
    mixture += rec.loss.mixture * static_cast<double>(n);
    logdet += rec.loss.logdet * static_cast<double>(n);
  }
  NllReport out;
  out.mixture = mixture / static_cast<double>(refs.size());
  out.logdet = logdet / static_cast<double>(refs.size());
  out.total = out.mixture + out.logdet;
  return out;
}

// Generation -----------------------------------------------------------------

struct GenerateResult {
  std::vector<double> y_next;
  RecurrentState state;
  MixtureParams params;
};

/// Advances the LSTM on (y_t, a_t), samples z from the mixture and maps it
/// back through the inverse flow.
inline GenerateResult generate_step(const FrmdnModel& model, std::span<const double> y_t,
                                    std::span<const double> action, const RecurrentState& state, Rng& rng) {
  const auto& cfg = model.config;
  if (y_t.size() != cfg.d || action.size() != cfg.d_action) {
    throw ShapeError("generate_step: got observation of size " + std::to_string(y_t.size()) + " and action of size " +
                     std::to_string(action.size()) + " for d=" + std::to_string(cfg.d) +
                     ", d_action=" + std::to_string(cfg.d_action));
  }
  std::vector<double> x(y_t.begin(), y_t.end());
  x.insert(x.end(), action.begin(), action.end());
  auto [h, next] = lstm_step(Tensor::row(std::move(x)), state, model.lstm);
  GenerateResult out;
  out.params = head_project(h.row_span(0), model.head);
  const SharedMatrix shared = model.shared();
  auto z = mixture_sample(out.params, shared, rng, cfg.c_width);
  Tensor y = Tensor::row(std::move(z));
  if (cfg.uses_flow()) y = flow_inverse(y, model.flow);
  out.y_next = y.vec();
  out.state = std::move(next);
  return out;
}

/// Chooses an action from the current observation and recurrent hidden state.
using ActionFn = std::function<std::vector<double>(std::span<const double> y, std::span<const double> h)>;

/// Free-running generation of `steps` observations after y_0. The returned
/// batch has one sequence of steps + 1 observations (y_0 first).
inline SequenceBatch rollout(const FrmdnModel& model, std::span<const double> y0, const ActionFn& action_fn,
                             std::size_t steps, Rng& rng) {
  const auto& cfg = model.config;
  if (steps < 1) throw ValidationError("rollout: need at least one step");
  if (y0.size() != cfg.d) throw ShapeError("rollout: initial observation has wrong dimension");
  if (cfg.d_action > 0 && !action_fn) throw ValidationError("rollout: model takes actions but no action_fn given");
  SequenceBatch out(1, steps + 1, cfg.d, cfg.d_action);
  out.descriptor = "rollout";
  std::copy(y0.begin(), y0.end(), out.obs(0, 0).begin());
  auto state = RecurrentState::zeros(1, cfg.hidden);
  for (std::size_t t = 0; t < steps; ++t) {
    std::vector<double> action;
    if (cfg.d_action > 0) {
      action = action_fn(out.obs(0, t), state.h.row_span(0));
      if (action.size() != cfg.d_action) throw ShapeError("rollout: action_fn returned wrong action size");
      std::copy(action.begin(), action.end(), out.act(0, t).begin());
    }
    auto g = generate_step(model, out.obs(0, t), action, state, rng);
    std::copy(g.y_next.begin(), g.y_next.end(), out.obs(0, t + 1).begin());
    state = std::move(g.state);
  }
  return out;
}

}  // namespace frmdn
