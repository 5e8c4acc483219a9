#pragma once

#include <cmath>
#include <numbers>
#include <sstream>
#include <tuple>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "frmdn/binary_io.hpp"
#include "frmdn/random.hpp"
#include "frmdn/tensor.hpp"

namespace frmdn {

/// Q sequences of T observation vectors (dimension d), optionally paired
/// with action vectors (dimension d_action) at every step.
struct SequenceBatch {
  std::size_t q = 0;
  std::size_t t = 0;
  std::size_t d = 0;
  std::size_t d_action = 0;
  std::vector<double> observations;  // Q x T x d, row-major
  std::vector<double> actions;       // Q x T x d_action
  std::string descriptor;

  SequenceBatch() = default;
  SequenceBatch(std::size_t q_, std::size_t t_, std::size_t d_, std::size_t d_action_ = 0)
      : q(q_), t(t_), d(d_), d_action(d_action_), observations(q_ * t_ * d_), actions(q_ * t_ * d_action_) {}

  std::span<double> obs(std::size_t seq, std::size_t step) {
    return {observations.data() + (seq * t + step) * d, d};
  }
  std::span<const double> obs(std::size_t seq, std::size_t step) const {
    return {observations.data() + (seq * t + step) * d, d};
  }
  std::span<double> act(std::size_t seq, std::size_t step) {
    return {actions.data() + (seq * t + step) * d_action, d_action};
  }
  std::span<const double> act(std::size_t seq, std::size_t step) const {
    return {actions.data() + (seq * t + step) * d_action, d_action};
  }

  void validate() const {
    if (observations.size() != q * t * d || actions.size() != q * t * d_action) {
      throw ShapeError("sequence batch: array sizes do not match (Q, T, d, d_action)");
    }
    for (double v : observations) {
      if (!std::isfinite(v)) throw ValidationError("sequence batch: non-finite observation");
    }
    for (double v : actions) {
      if (!std::isfinite(v)) throw ValidationError("sequence batch: non-finite action");
    }
  }

  /// Q x (d + d_action) recurrent inputs at `step`: observation then action.
  Tensor step_inputs(std::size_t step) const {
    Tensor x(q, d + d_action);
    for (std::size_t s = 0; s < q; ++s) {
      auto row = x.row_span(s);
      auto o = obs(s, step);
      std::copy(o.begin(), o.end(), row.begin());
      auto a = act(s, step);
      std::copy(a.begin(), a.end(), row.begin() + static_cast<std::ptrdiff_t>(d));
    }
    return x;
  }

  /// Observations at steps 1..T-1 stacked as ((T-1) Q) x d, row (step-1) Q + seq.
  Tensor stacked_targets() const {
    Tensor y((t - 1) * q, d);
    for (std::size_t step = 1; step < t; ++step) {
      for (std::size_t s = 0; s < q; ++s) {
        auto o = obs(s, step);
        std::copy(o.begin(), o.end(), y.row_span((step - 1) * q + s).begin());
      }
    }
    return y;
  }
};

/// Start of a fixed-length window inside a longer batch.
struct WindowRef {
  std::size_t seq = 0;
  std::size_t start = 0;
};

/// Non-overlapping windows of length `len`; a trailing partial window is dropped.
inline std::vector<WindowRef> make_windows(const SequenceBatch& data, std::size_t len) {
  if (len < 2) throw ValidationError("window length must be at least 2");
  std::vector<WindowRef> out;
  if (data.t < len) return out;
  for (std::size_t s = 0; s < data.q; ++s) {
    for (std::size_t start = 0; start + len <= data.t; start += len) out.push_back({s, start});
  }
  return out;
}

inline SequenceBatch gather_windows(const SequenceBatch& data, std::span<const WindowRef> refs, std::size_t len) {
  SequenceBatch out(refs.size(), len, data.d, data.d_action);
  out.descriptor = data.descriptor;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    for (std::size_t step = 0; step < len; ++step) {
      auto src = data.obs(refs[i].seq, refs[i].start + step);
      std::copy(src.begin(), src.end(), out.obs(i, step).begin());
      auto a = data.act(refs[i].seq, refs[i].start + step);
      std::copy(a.begin(), a.end(), out.act(i, step).begin());
    }
  }
  return out;
}

/// Sequences [begin, end) of a batch.
inline SequenceBatch select_sequences(const SequenceBatch& data, std::size_t begin, std::size_t end) {
  if (begin > end || end > data.q) throw ValidationError("select_sequences: range out of bounds");
  SequenceBatch out(end - begin, data.t, data.d, data.d_action);
  out.descriptor = data.descriptor;
  const auto obs_stride = data.t * data.d;
  const auto act_stride = data.t * data.d_action;
  std::copy(data.observations.begin() + static_cast<std::ptrdiff_t>(begin * obs_stride),
            data.observations.begin() + static_cast<std::ptrdiff_t>(end * obs_stride), out.observations.begin());
  std::copy(data.actions.begin() + static_cast<std::ptrdiff_t>(begin * act_stride),
            data.actions.begin() + static_cast<std::ptrdiff_t>(end * act_stride), out.actions.begin());
  return out;
}

// Generators -----------------------------------------------------------------

inline constexpr double kLog2PiE = 2.8378770664093453;  // log(2 pi e)

/// Equicorrelation matrix: unit diagonal, `corr` off the diagonal.
inline Eigen::MatrixXd equicorrelation(std::size_t d, double corr) {
  Eigen::MatrixXd s = Eigen::MatrixXd::Constant(Eigen::Index(d), Eigen::Index(d), corr);
  s.diagonal().setOnes();
  return s;
}

/// Per-step differential entropy of N(0, equicorrelation(d, corr)).
inline double ar_entropy_rate(std::size_t d, double corr) {
  const double dd = static_cast<double>(d);
  const double log_det = (dd - 1.0) * std::log(1.0 - corr) + std::log(1.0 + (dd - 1.0) * corr);
  return 0.5 * (dd * kLog2PiE + log_det);
}

/// y_{t+1} = rho y_t + eps, eps ~ N(0, Sigma) with equicorrelated Sigma.
/// y_0 is drawn from the stationary law N(0, Sigma / (1 - rho^2)).
inline SequenceBatch gen_correlated_ar(std::size_t q, std::size_t t, std::size_t d, double rho, double corr,
                                       std::uint64_t seed) {
  if (d < 2) throw ValidationError("gen_correlated_ar: d must be at least 2");
  if (!(std::abs(rho) < 1.0)) throw ValidationError("gen_correlated_ar: |rho| must be < 1");
  if (!(corr >= 0.0 && corr < 1.0)) {
    throw ValidationError("gen_correlated_ar: non-PD noise correlation (corr must lie in [0, 1))");
  }
  Eigen::LLT<Eigen::MatrixXd> llt(equicorrelation(d, corr));
  if (llt.info() != Eigen::Success) throw ValidationError("gen_correlated_ar: non-PD noise correlation");
  const Eigen::MatrixXd chol = llt.matrixL();
  const double stationary = 1.0 / std::sqrt(1.0 - rho * rho);

  SequenceBatch out(q, t, d);
  std::ostringstream desc;
  desc << "ar q=" << q << " t=" << t << " d=" << d << " rho=" << rho << " corr=" << corr << " seed=" << seed;
  out.descriptor = desc.str();
  Eigen::VectorXd e(static_cast<Eigen::Index>(d));
  for (std::size_t s = 0; s < q; ++s) {
    Rng rng(derive_seed(seed, s));
    for (std::size_t step = 0; step < t; ++step) {
      for (auto& v : e) v = standard_normal(rng);
      const Eigen::VectorXd eps = chol * e;
      auto y = out.obs(s, step);
      for (std::size_t i = 0; i < d; ++i) {
        const double noise = eps(Eigen::Index(i));
        y[i] = step == 0 ? stationary * noise : rho * out.obs(s, step - 1)[i] + noise;
      }
    }
  }
  return out;
}

/// Settings of the regime-switching generator.
struct SwitchingModes {
  std::size_t modes = 2;
  double separation = 4.0;  // distance between consecutive mode means, per coordinate
  double stay = 0.9;        // probability of keeping the current mode
  double emission_std = 1.0;

  double mode_mean(std::size_t m) const {
    return separation * (static_cast<double>(m) - 0.5 * static_cast<double>(modes - 1));
  }
};

/// Hidden Markov regime over Gaussian modes; emissions N(mean_m 1, std^2 I).
inline SequenceBatch gen_switching_modes(std::size_t q, std::size_t t, std::size_t d, const SwitchingModes& cfg,
                                         std::uint64_t seed) {
  if (cfg.modes == 0) throw ValidationError("gen_switching_modes: need at least one mode");
  if (d == 0) throw ValidationError("gen_switching_modes: d must be positive");
  if (!(cfg.stay >= 0.0 && cfg.stay <= 1.0) || !(cfg.emission_std > 0.0)) {
    throw ValidationError("gen_switching_modes: invalid stay probability or emission std");
  }
  SequenceBatch out(q, t, d);
  std::ostringstream desc;
  desc << "modes q=" << q << " t=" << t << " d=" << d << " modes=" << cfg.modes << " sep=" << cfg.separation
       << " stay=" << cfg.stay << " seed=" << seed;
  out.descriptor = desc.str();
  for (std::size_t s = 0; s < q; ++s) {
    Rng rng(derive_seed(seed, s));
    std::size_t mode = std::uniform_int_distribution<std::size_t>(0, cfg.modes - 1)(rng);
    for (std::size_t step = 0; step < t; ++step) {
      if (step > 0 && cfg.modes > 1) {
        const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        if (u >= cfg.stay) {
          // uniform over the other modes
          const auto jump = std::uniform_int_distribution<std::size_t>(1, cfg.modes - 1)(rng);
          mode = (mode + jump) % cfg.modes;
        }
      }
      auto y = out.obs(s, step);
      for (std::size_t i = 0; i < d; ++i) y[i] = cfg.mode_mean(mode) + cfg.emission_std * standard_normal(rng);
    }
  }
  return out;
}

inline SequenceBatch gen_switching_modes(std::size_t q, std::size_t t, std::size_t d, std::size_t modes,
                                         std::uint64_t seed) {
  SwitchingModes cfg;
  cfg.modes = modes;
  return gen_switching_modes(q, t, d, cfg, seed);
}

struct EntropyEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

/// Entropy rate of the regime-switching process, estimated on one long
/// simulated path with the exact forward filter. The standard error comes
/// from 20 batch means.
inline EntropyEstimate switching_entropy_rate(std::size_t d, const SwitchingModes& cfg, std::size_t steps,
                                              std::uint64_t seed) {
  if (steps < 40) throw ValidationError("switching_entropy_rate: need at least 40 steps");
  const auto path = gen_switching_modes(1, steps, d, cfg, seed);
  const std::size_t m = cfg.modes;
  const double dd = static_cast<double>(d);
  const double log_norm = -0.5 * dd * std::log(2.0 * std::numbers::pi * cfg.emission_std * cfg.emission_std);
  const double switch_p = m > 1 ? (1.0 - cfg.stay) / static_cast<double>(m - 1) : 0.0;

  std::vector<double> belief(m, 1.0 / static_cast<double>(m));  // P(mode_t | y_<t)
  std::vector<double> losses;
  losses.reserve(steps - 1);
  std::vector<double> log_terms(m);
  for (std::size_t step = 0; step < steps; ++step) {
    auto y = path.obs(0, step);
    for (std::size_t k = 0; k < m; ++k) {
      double quad = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double u = (y[i] - cfg.mode_mean(k)) / cfg.emission_std;
        quad += u * u;
      }
      log_terms[k] = std::log(belief[k]) + log_norm - 0.5 * quad;
    }
    const double log_pred = detail::log_sum_exp_span(log_terms);
    if (step > 0) losses.push_back(-log_pred);
    std::vector<double> post(m);
    for (std::size_t k = 0; k < m; ++k) post[k] = std::exp(log_terms[k] - log_pred);
    for (std::size_t k = 0; k < m; ++k) {
      double next = 0.0;
      for (std::size_t j = 0; j < m; ++j) next += post[j] * (j == k ? (m > 1 ? cfg.stay : 1.0) : switch_p);
      belief[k] = next;
    }
  }
  constexpr std::size_t kBatches = 20;
  const std::size_t per = losses.size() / kBatches;
  std::vector<double> means(kBatches);
  double total = 0.0;
  for (std::size_t b = 0; b < kBatches; ++b) {
    double s = 0.0;
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) s += losses[i];
    means[b] = s / static_cast<double>(per);
    total += means[b];
  }
  const double mean = total / kBatches;
  double var = 0.0;
  for (double v : means) var += (v - mean) * (v - mean);
  var /= static_cast<double>(kBatches - 1);
  return {mean, std::sqrt(var / kBatches)};
}

/// Linear controllable system recorded under a uniform random policy.
struct ControlTask {
  SequenceBatch data;
  Tensor a;  // d x d, spectral radius < 1
  Tensor b;  // d x d_action
  double noise_std = 0.1;
};

/// Draws the system matrices for a seed: A = Q diag(lambda) Q^T with
/// lambda in [0.5, 0.95] and Q orthogonal, B with N(0, 1/d_action) entries.
inline std::pair<Tensor, Tensor> control_system(std::size_t d, std::size_t d_action, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xc0ffeeULL));
  Eigen::MatrixXd g(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = standard_normal(rng);
  const Eigen::MatrixXd qm = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
  Eigen::VectorXd lambda(static_cast<Eigen::Index>(d));
  std::uniform_real_distribution<double> eig(0.5, 0.95);
  for (auto& v : lambda) v = eig(rng);
  const Eigen::MatrixXd a = qm * lambda.asDiagonal() * qm.transpose();
  Eigen::MatrixXd b(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d_action));
  const double bscale = 1.0 / std::sqrt(static_cast<double>(d_action));
  for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = bscale * standard_normal(rng);
  return {Tensor::from_eigen(a), Tensor::from_eigen(b)};
}

/// y_{t+1} = A y_t + B a_t + noise, with a_t ~ U(-1, 1)^d_action.
inline ControlTask gen_control_task(std::size_t q, std::size_t t, std::size_t d, std::size_t d_action,
                                    std::uint64_t seed, double noise_std = 0.1) {
  if (q == 0 || t == 0 || d == 0 || d_action == 0) throw ValidationError("gen_control_task: dims must be positive");
  if (!(noise_std > 0.0)) throw ValidationError("gen_control_task: noise std must be positive");
  ControlTask task;
  std::tie(task.a, task.b) = control_system(d, d_action, seed);
  task.noise_std = noise_std;
  task.data = SequenceBatch(q, t, d, d_action);
  std::ostringstream desc;
  desc << "control q=" << q << " t=" << t << " d=" << d << " d_action=" << d_action << " seed=" << seed;
  task.data.descriptor = desc.str();
  std::uniform_real_distribution<double> policy(-1.0, 1.0);
  for (std::size_t s = 0; s < q; ++s) {
    Rng rng(derive_seed(seed, s));
    auto y0 = task.data.obs(s, 0);
    for (double& v : y0) v = standard_normal(rng);
    for (std::size_t step = 0; step < t; ++step) {
      auto act = task.data.act(s, step);
      for (double& v : act) v = policy(rng);
      if (step + 1 == t) break;
      auto y = task.data.obs(s, step);
      auto next = task.data.obs(s, step + 1);
      for (std::size_t i = 0; i < d; ++i) {
        double v = noise_std * standard_normal(rng);
        for (std::size_t j = 0; j < d; ++j) v += task.a(i, j) * y[j];
        for (std::size_t j = 0; j < d_action; ++j) v += task.b(i, j) * act[j];
        next[i] = v;
      }
    }
  }
  return task;
}

/// Per-step entropy of the control task's Gaussian transition noise.
inline double control_entropy_rate(std::size_t d, double noise_std) {
  return 0.5 * static_cast<double>(d) * (kLog2PiE + 2.0 * std::log(noise_std));
}

// File formats ---------------------------------------------------------------

inline constexpr std::string_view kFseqMagic = "FSEQ";
inline constexpr std::uint32_t kFseqVersion = 1;

/// "FSEQ", u32 version, u32 Q, T, d, d_action, then observations and actions
/// as little-endian f64.
inline std::string encode_fseq(const SequenceBatch& b) {
  b.validate();
  io::ByteWriter w;
  w.bytes(kFseqMagic);
  w.u32(kFseqVersion);
  w.u32(static_cast<std::uint32_t>(b.q));
  w.u32(static_cast<std::uint32_t>(b.t));
  w.u32(static_cast<std::uint32_t>(b.d));
  w.u32(static_cast<std::uint32_t>(b.d_action));
  for (double v : b.observations) w.f64(v);
  for (double v : b.actions) w.f64(v);
  return w.take();
}

inline SequenceBatch decode_fseq(std::string_view bytes) {
  io::ByteReader r(bytes);
  if (r.bytes(4) != kFseqMagic) throw FormatError("not an FSEQ file (bad magic)");
  const auto version = r.u32();
  if (version != kFseqVersion) throw FormatError("unsupported FSEQ version " + std::to_string(version));
  const std::size_t q = r.u32();
  const std::size_t t = r.u32();
  const std::size_t d = r.u32();
  const std::size_t da = r.u32();
  const std::size_t count = q * t * (d + da);
  if (r.remaining() != count * 8) {
    throw FormatError("FSEQ payload has " + std::to_string(r.remaining()) + " bytes, header implies " +
                      std::to_string(count * 8));
  }
  SequenceBatch b(q, t, d, da);
  for (double& v : b.observations) v = r.f64();
  for (double& v : b.actions) v = r.f64();
  return b;
}

inline void write_fseq(const std::string& path, const SequenceBatch& b) { io::write_file(path, encode_fseq(b)); }
inline SequenceBatch read_fseq(const std::string& path) { return decode_fseq(io::read_file(path)); }

/// Header row then one line per (sequence, step).
inline std::string to_csv(const SequenceBatch& b) {
  std::ostringstream out;
  out.precision(17);
  out << "seq,t";
  for (std::size_t i = 0; i < b.d; ++i) out << ",y" << i;
  for (std::size_t i = 0; i < b.d_action; ++i) out << ",a" << i;
  out << '\n';
  for (std::size_t s = 0; s < b.q; ++s) {
    for (std::size_t step = 0; step < b.t; ++step) {
      out << s << ',' << step;
      for (double v : b.obs(s, step)) out << ',' << v;
      for (double v : b.act(s, step)) out << ',' << v;
      out << '\n';
    }
  }
  return out.str();
}

}  // namespace frmdn
