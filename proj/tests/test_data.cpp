#include "support.hpp"

#include <filesystem>

namespace frmdn {
namespace {

double correlation(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = double(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

TEST(CorrelatedAr, LagAndCrossCorrelation) {
  const double rho = 0.9, corr = 0.6;
  const auto data = gen_correlated_ar(50, 400, 3, rho, corr, 1);
  std::vector<double> now, next, noise0, noise1;
  for (std::size_t s = 0; s < data.q; ++s) {
    for (std::size_t t = 0; t + 1 < data.t; ++t) {
      now.push_back(data.obs(s, t)[0]);
      next.push_back(data.obs(s, t + 1)[0]);
      noise0.push_back(data.obs(s, t + 1)[0] - rho * data.obs(s, t)[0]);
      noise1.push_back(data.obs(s, t + 1)[1] - rho * data.obs(s, t)[1]);
    }
  }
  EXPECT_NEAR(correlation(now, next), rho, 0.01);
  EXPECT_NEAR(correlation(noise0, noise1), corr, 0.02);
}

TEST(CorrelatedAr, FirstStepIsStationary) {
  const double rho = 0.9;
  const auto data = gen_correlated_ar(20000, 2, 2, rho, 0.3, 2);
  double var = 0.0;
  for (std::size_t s = 0; s < data.q; ++s) var += data.obs(s, 0)[0] * data.obs(s, 0)[0];
  var /= double(data.q);
  EXPECT_NEAR(var, 1.0 / (1.0 - rho * rho), 0.2);
}

TEST(CorrelatedAr, EntropyRate) {
  // Independent unit noise gives d/2 log(2 pi e).
  EXPECT_NEAR(ar_entropy_rate(4, 0.0), 2.0 * std::log(2 * M_PI * M_E), 1e-12);
  // Matches the Gaussian entropy of the explicit correlation matrix.
  Eigen::MatrixXd s = Eigen::MatrixXd::Constant(5, 5, 0.7);
  s.diagonal().setOnes();
  EXPECT_NEAR(ar_entropy_rate(5, 0.7), 0.5 * (5 * std::log(2 * M_PI * M_E) + std::log(s.determinant())), 1e-12);
}

TEST(CorrelatedAr, ReproducibleAndSeedSensitive) {
  EXPECT_EQ(gen_correlated_ar(3, 10, 2, 0.5, 0.2, 7).observations,
            gen_correlated_ar(3, 10, 2, 0.5, 0.2, 7).observations);
  EXPECT_NE(gen_correlated_ar(3, 10, 2, 0.5, 0.2, 7).observations,
            gen_correlated_ar(3, 10, 2, 0.5, 0.2, 8).observations);
  // A sequence does not depend on how many others were drawn.
  const auto a = gen_correlated_ar(2, 10, 2, 0.5, 0.2, 7);
  const auto b = gen_correlated_ar(5, 10, 2, 0.5, 0.2, 7);
  EXPECT_TRUE(std::equal(a.observations.begin(), a.observations.end(), b.observations.begin()));
}

TEST(CorrelatedAr, InvalidParameters) {
  EXPECT_THROW(gen_correlated_ar(1, 5, 3, 0.5, 1.0, 1), ValidationError);
  EXPECT_THROW(gen_correlated_ar(1, 5, 3, 0.5, -0.6, 1), ValidationError);
  EXPECT_THROW(gen_correlated_ar(1, 5, 3, 1.0, 0.2, 1), ValidationError);
  EXPECT_THROW(gen_correlated_ar(1, 5, 1, 0.5, 0.2, 1), ValidationError);
}

TEST(SwitchingModes, MarginalIsBimodal) {
  SwitchingModes cfg;
  const auto data = gen_switching_modes(100, 200, 1, cfg, 3);
  // Histogram on [-6, 6]. Modes sit two emission stds either side of zero, so the
  // centre bin holds about 2 exp(-2) of a peak; a single Gaussian would put its maximum there.
  std::vector<double> hist(13, 0.0);
  for (double v : data.observations) {
    const long bin = std::lround(v + 6.0);
    if (bin >= 0 && bin < 13) hist[std::size_t(bin)] += 1.0;
  }
  const double peak = std::max(hist[4], hist[8]);
  EXPECT_LT(hist[6] / peak, 0.4);
  EXPECT_GT(std::min(hist[4], hist[8]) / peak, 0.8);
}

TEST(SwitchingModes, StayProbability) {
  SwitchingModes cfg;
  cfg.emission_std = 0.01;
  const auto data = gen_switching_modes(50, 400, 1, cfg, 4);
  double stays = 0, total = 0;
  for (std::size_t s = 0; s < data.q; ++s) {
    for (std::size_t t = 0; t + 1 < data.t; ++t) {
      stays += (data.obs(s, t)[0] > 0) == (data.obs(s, t + 1)[0] > 0);
      total += 1;
    }
  }
  EXPECT_NEAR(stays / total, cfg.stay, 0.01);
}

TEST(SwitchingModes, EntropyRateLimits) {
  // With stay = 1 each sequence is one Gaussian, so the rate is the emission entropy.
  SwitchingModes frozen;
  frozen.stay = 1.0;
  const auto e = switching_entropy_rate(2, frozen, 5000, 1);
  EXPECT_NEAR(e.value, std::log(2 * M_PI * M_E), 0.05);
  // Well separated modes: emission entropy plus the switching entropy.
  SwitchingModes wide;
  wide.separation = 40.0;
  const auto w = switching_entropy_rate(2, wide, 50000, 2);
  const double switching = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1));
  EXPECT_NEAR(w.value, std::log(2 * M_PI * M_E) + switching, 4 * w.std_error + 0.01);
  EXPECT_GT(w.std_error, 0.0);
  EXPECT_THROW(switching_entropy_rate(2, wide, 10, 1), ValidationError);
}

TEST(ControlTask, LeastSquaresRecoversDynamics) {
  const std::size_t d = 3, da = 2;
  const auto task = gen_control_task(40, 200, d, da, 5);
  const std::size_t n = task.data.q * (task.data.t - 1);
  Eigen::MatrixXd x(n, d + da), y(n, d);
  std::size_t row = 0;
  for (std::size_t s = 0; s < task.data.q; ++s) {
    for (std::size_t t = 0; t + 1 < task.data.t; ++t, ++row) {
      for (std::size_t i = 0; i < d; ++i) x(row, i) = task.data.obs(s, t)[i];
      for (std::size_t i = 0; i < da; ++i) x(row, d + i) = task.data.act(s, t)[i];
      for (std::size_t i = 0; i < d; ++i) y(row, i) = task.data.obs(s, t + 1)[i];
    }
  }
  const Eigen::MatrixXd coef = x.colPivHouseholderQr().solve(y);  // (d + da) x d
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(coef(j, i), task.a(i, j), 0.05);
    for (std::size_t j = 0; j < da; ++j) EXPECT_NEAR(coef(d + j, i), task.b(i, j), 0.05);
  }
  const Eigen::MatrixXd resid = y - x * coef;
  EXPECT_NEAR(std::sqrt(resid.squaredNorm() / double(n * d)), task.noise_std, 0.005);
}

TEST(ControlTask, StableSymmetricDynamics) {
  const auto task = gen_control_task(1, 2, 4, 1, 6);
  const Eigen::MatrixXd a = task.a.to_eigen();
  EXPECT_LT((a - a.transpose()).norm(), 1e-12);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  EXPECT_GE(es.eigenvalues().minCoeff(), 0.5 - 1e-12);
  EXPECT_LE(es.eigenvalues().maxCoeff(), 0.95 + 1e-12);
  for (double v : task.data.actions) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(ControlTask, WithoutActionsItIsAnArProcess) {
  // Removing the action contribution leaves y' = A y + noise.
  const auto task = gen_control_task(20, 100, 2, 1, 7, 0.1);
  double sq = 0.0, count = 0.0;
  for (std::size_t s = 0; s < task.data.q; ++s) {
    for (std::size_t t = 0; t + 1 < task.data.t; ++t) {
      for (std::size_t i = 0; i < 2; ++i) {
        double pred = task.b(i, 0) * task.data.act(s, t)[0];
        for (std::size_t j = 0; j < 2; ++j) pred += task.a(i, j) * task.data.obs(s, t)[j];
        const double r = task.data.obs(s, t + 1)[i] - pred;
        sq += r * r;
        count += 1;
      }
    }
  }
  EXPECT_NEAR(std::sqrt(sq / count), 0.1, 0.005);
  EXPECT_NEAR(control_entropy_rate(2, 0.1), std::log(2 * M_PI * M_E * 0.01), 1e-12);
  EXPECT_THROW(gen_control_task(1, 5, 2, 0, 1), ValidationError);
}

TEST(Windows, CoverageAndGathering) {
  const auto data = gen_correlated_ar(3, 10, 2, 0.5, 0.1, 1);
  const auto refs = make_windows(data, 4);
  EXPECT_EQ(refs.size(), 3u * 2u);
  const auto batch = gather_windows(data, refs, 4);
  EXPECT_EQ(batch.q, refs.size());
  EXPECT_EQ(batch.t, 4u);
  for (std::size_t w = 0; w < refs.size(); ++w) {
    for (std::size_t t = 0; t < 4; ++t) {
      const auto a = batch.obs(w, t);
      const auto b = data.obs(refs[w].seq, refs[w].start + t);
      EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
    }
  }
  EXPECT_TRUE(make_windows(data, 11).empty());
  EXPECT_THROW(make_windows(data, 1), ValidationError);
  EXPECT_THROW(select_sequences(data, 2, 4), ValidationError);
  EXPECT_EQ(select_sequences(data, 1, 3).q, 2u);
}

TEST(Batch, StackedTargetsLayout) {
  const auto data = gen_correlated_ar(2, 4, 2, 0.5, 0.1, 1);
  const Tensor y = data.stacked_targets();
  EXPECT_EQ(y.rows(), 6u);
  EXPECT_EQ(y(3, 1), data.obs(1, 2)[1]);
  const auto task = gen_control_task(2, 3, 2, 1, 1);
  const Tensor x = task.data.step_inputs(1);
  EXPECT_EQ(x(1, 2), task.data.act(1, 1)[0]);
  EXPECT_EQ(x(1, 0), task.data.obs(1, 1)[0]);
}

TEST(Fseq, RoundTripIsBitExact) {
  const auto task = gen_control_task(3, 7, 2, 2, 3);
  const auto bytes = encode_fseq(task.data);
  ASSERT_EQ(bytes.size(), 4 + 5 * 4 + 3 * 7 * 4 * 8u);
  EXPECT_EQ(bytes.substr(0, 4), "FSEQ");
  const auto back = decode_fseq(bytes);
  EXPECT_EQ(back.observations, task.data.observations);
  EXPECT_EQ(back.actions, task.data.actions);
  EXPECT_EQ(encode_fseq(back), bytes);

  const auto path = (std::filesystem::temp_directory_path() / "frmdn_test.fseq").string();
  write_fseq(path, task.data);
  EXPECT_EQ(read_fseq(path).observations, task.data.observations);
  std::filesystem::remove(path);
}

TEST(Fseq, LittleEndianHeader) {
  SequenceBatch b(1, 1, 1);
  b.observations[0] = 1.0;
  const auto bytes = encode_fseq(b);
  EXPECT_EQ(bytes.substr(4, 4), std::string("\x01\0\0\0", 4));
  // 1.0 is 0x3FF0000000000000.
  EXPECT_EQ(static_cast<unsigned char>(bytes.back()), 0x3Fu);
  EXPECT_EQ(static_cast<unsigned char>(bytes[bytes.size() - 2]), 0xF0u);
}

TEST(Fseq, RejectsMalformedInput) {
  const auto bytes = encode_fseq(gen_correlated_ar(2, 3, 2, 0.5, 0.1, 1));
  auto bad = bytes;
  bad[1] = 'X';
  EXPECT_THROW(decode_fseq(bad), FormatError);
  bad = bytes;
  bad[4] = 9;
  EXPECT_THROW(decode_fseq(bad), FormatError);
  EXPECT_THROW(decode_fseq(bytes.substr(0, 10)), FormatError);
  EXPECT_THROW(decode_fseq(bytes.substr(0, bytes.size() - 8)), FormatError);
  EXPECT_THROW(decode_fseq(bytes + std::string(1, '\0')), FormatError);
  EXPECT_THROW(read_fseq("/nonexistent/file.fseq"), Error);
  SequenceBatch nan(1, 1, 1);
  nan.observations[0] = std::nan("");
  EXPECT_THROW(encode_fseq(nan), ValidationError);
}

TEST(Fseq, CsvExport) {
  const auto task = gen_control_task(2, 2, 2, 1, 1);
  const auto csv = to_csv(task.data);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "seq,t,y0,y1,a0");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
}

}  // namespace
}  // namespace frmdn
