#include "support.hpp"

namespace frmdn {
namespace {

using testing::numerical_jacobian;
using testing::random_tensor;

// Output layers start at zero; give every weight a random fan-in scaled value.
void randomize(CouplingLayer& layer, Rng& rng, double scale = 1.0) {
  layer.weights.visit([&](const char*, Tensor& t) {
    const double fan_in = t.rows() > 1 ? double(t.rows()) : 4.0;
    for (double& v : t.data()) v = scale * standard_normal(rng) / std::sqrt(fan_in);
  });
}

FlowStack random_stack(std::size_t d, std::size_t depth, Rng& rng, double scale = 1.0) {
  auto stack = make_flow_stack(d, depth, 16, 5.0, rng);
  for (auto& layer : stack.layers) randomize(layer, rng, scale);
  return stack;
}

std::vector<double> forward_row(const FlowStack& stack, const std::vector<double>& y) {
  const auto out = flow_forward(Tensor::row(y), stack).out;
  return {out.data().begin(), out.data().end()};
}

TEST(Coupling, FreshLayerIsIdentity) {
  Rng rng(1);
  const auto layer = make_coupling_layer(alternating_mask(5, 0), 8, 5.0, rng);
  const Tensor x = random_tensor(7, 5, rng);
  const auto r = coupling_forward(x, layer);
  EXPECT_EQ(r.out, x);
  EXPECT_EQ(r.log_det, Tensor(7, 1));
  EXPECT_EQ(coupling_inverse(x, layer), x);
}

TEST(Coupling, AnalyticAffine) {
  Rng rng(2);
  auto layer = make_coupling_layer({1, 0}, 4, 5.0, rng);
  layer.weights.s_b2[0] = std::atanh(std::log(3.0) / 5.0);
  layer.weights.t_b2[0] = 1.0;
  const Tensor x(3, 2, std::vector<double>{0.5, 2.0, -1.0, 0.0, 4.0, -3.0});
  const auto r = coupling_forward(x, layer);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(r.out(i, 0), x(i, 0));
    EXPECT_NEAR(r.out(i, 1), 3.0 * x(i, 1) + 1.0, 1e-13);
    EXPECT_NEAR(r.log_det[i], std::log(3.0), 1e-15);
  }
  const Tensor back = coupling_inverse(r.out, layer);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(back(i, 1), (r.out(i, 1) - 1.0) / 3.0, 1e-13);
}

TEST(Coupling, PassThroughCoordinatesUnchanged) {
  Rng rng(3);
  auto layer = make_coupling_layer(alternating_mask(6, 1), 8, 5.0, rng);
  randomize(layer, rng);
  const Tensor x = random_tensor(10, 6, rng);
  const auto r = coupling_forward(x, layer);
  for (std::size_t i = 0; i < 10; ++i) {
    for (std::size_t j = 1; j < 6; j += 2) EXPECT_EQ(r.out(i, j), x(i, j));
  }
}

TEST(Coupling, LogDetMatchesNumericalJacobian) {
  Rng rng(4);
  for (int rep = 0; rep < 20; ++rep) {
    auto layer = make_coupling_layer(alternating_mask(4, std::size_t(rep)), 8, 5.0, rng);
    randomize(layer, rng);
    std::vector<double> x(4);
    for (double& v : x) v = standard_normal(rng);
    const FlowStack one{{layer}};
    const auto j = numerical_jacobian([&](const std::vector<double>& p) { return forward_row(one, p); }, x, 1e-6);
    const double analytic = coupling_forward(Tensor::row(x), layer).log_det.item();
    EXPECT_NEAR(analytic, testing::log_abs_det_of(j), 1e-5);
  }
}

TEST(Coupling, RoundTrip) {
  Rng rng(5);
  auto layer = make_coupling_layer(alternating_mask(7, 0), 16, 5.0, rng);
  randomize(layer, rng);
  const Tensor y = random_tensor(1000, 7, rng, 2.0);
  const Tensor back = coupling_forward(coupling_inverse(y, layer), layer).out;
  EXPECT_LT(testing::max_abs_diff(back, y), 1e-9);
}

TEST(Coupling, InvalidMasks) {
  Rng rng(6);
  EXPECT_THROW(make_coupling_layer({1, 1, 1}, 4, 5.0, rng), ValidationError);
  EXPECT_THROW(make_coupling_layer({0, 0}, 4, 5.0, rng), ValidationError);
  EXPECT_THROW(make_coupling_layer({1, 0}, 4, 0.0, rng), ValidationError);
  EXPECT_THROW(make_flow_stack(1, 2, 4, 5.0, rng), ValidationError);
  EXPECT_NO_THROW(make_flow_stack(1, 0, 4, 5.0, rng));
}

TEST(Coupling, ShapeMismatch) {
  Rng rng(7);
  const auto layer = make_coupling_layer(alternating_mask(4, 0), 4, 5.0, rng);
  EXPECT_THROW(coupling_forward(Tensor(2, 3), layer), ShapeError);
  EXPECT_THROW(coupling_inverse(Tensor(2, 5), layer), ShapeError);
}

TEST(Coupling, LogScaleIsBounded) {
  Rng rng(8);
  auto layer = make_coupling_layer(alternating_mask(4, 0), 8, 2.5, rng);
  randomize(layer, rng, 50.0);
  const Tensor x = random_tensor(500, 4, rng, 10.0);
  const auto r = coupling_forward(x, layer);
  // Two transformed coordinates, each with |s_hat| <= 2.5.
  for (double v : r.log_det.data()) EXPECT_LE(std::abs(v), 2 * 2.5 + 1e-12);
  EXPECT_TRUE(r.out.all_finite());
}

TEST(Stack, MasksAlternate) {
  Rng rng(9);
  const auto stack = make_flow_stack(5, 4, 8, 5.0, rng);
  for (std::size_t n = 1; n < stack.depth(); ++n) {
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NE(stack.layers[n].mask[i], stack.layers[n - 1].mask[i]);
  }
}

TEST(Stack, EmptyAndFreshStacksAreIdentity) {
  Rng rng(10);
  const Tensor y = random_tensor(4, 3, rng);
  for (std::size_t depth : {0u, 2u}) {
    const auto stack = make_flow_stack(3, depth, 8, 5.0, rng);
    const auto r = flow_forward(y, stack);
    EXPECT_EQ(r.out, y);
    EXPECT_EQ(r.log_det, Tensor(4, 1));
    EXPECT_EQ(flow_inverse(y, stack), y);
  }
}

TEST(Stack, LogDetIsSumOfLayers) {
  Rng rng(11);
  const auto stack = random_stack(6, 3, rng);
  const Tensor y = random_tensor(20, 6, rng);
  Tensor x = y;
  Tensor total(20, 1);
  for (const auto& layer : stack.layers) {
    auto r = coupling_forward(x, layer);
    total = add(total, r.log_det);
    x = r.out;
  }
  const auto r = flow_forward(y, stack);
  EXPECT_EQ(r.out, x);
  EXPECT_LT(testing::max_abs_diff(r.log_det, total), 1e-14);
}

TEST(Stack, LogDetMatchesNumericalJacobian) {
  Rng rng(12);
  for (std::size_t d = 2; d <= 6; ++d) {
    for (std::size_t depth = 1; depth <= 3; ++depth) {
      const auto stack = random_stack(d, depth, rng);
      for (int rep = 0; rep < 5; ++rep) {
        std::vector<double> y(d);
        for (double& v : y) v = standard_normal(rng);
        const auto j = numerical_jacobian([&](const std::vector<double>& p) { return forward_row(stack, p); }, y);
        EXPECT_NEAR(flow_forward(Tensor::row(y), stack).log_det.item(), testing::log_abs_det_of(j), 1e-4)
            << "d=" << d << " depth=" << depth;
      }
    }
  }
}

TEST(Stack, RoundTripAcrossDepthsAndDims) {
  Rng rng(13);
  double worst = 0.0;
  for (std::size_t depth = 1; depth <= 8; ++depth) {
    for (std::size_t d : {2u, 5u, 16u, 64u}) {
      // Quarter-scale weights keep per-layer log-scales near 0.5, as in a trained flow.
      const auto stack = random_stack(d, depth, rng, 0.25);
      const Tensor y = random_tensor(200, d, rng);
      const Tensor z = flow_forward(y, stack).out;
      worst = std::max(worst, testing::max_abs_diff(flow_inverse(z, stack), y));
      worst = std::max(worst, testing::max_abs_diff(flow_forward(flow_inverse(y, stack), stack).out, y));
    }
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(Stack, ChangeOfVariablesIntegratesToOne) {
  Rng rng(14);
  const auto stack = random_stack(2, 2, rng, 0.25);
  const std::size_t n = 400;
  const double lo = -20.0, hi = 20.0, h = (hi - lo) / double(n);
  Tensor grid(n * n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      grid(i * n + j, 0) = lo + h * (double(i) + 0.5);
      grid(i * n + j, 1) = lo + h * (double(j) + 0.5);
    }
  }
  const auto r = flow_forward(grid, stack);
  double total = 0.0;
  for (std::size_t p = 0; p < n * n; ++p) {
    const double z0 = r.out(p, 0), z1 = r.out(p, 1);
    total += std::exp(-0.5 * (z0 * z0 + z1 * z1) - std::log(2 * M_PI) + r.log_det[p]);
  }
  EXPECT_NEAR(total * h * h, 1.0, 1e-3);
}

TEST(Stack, GraphPathMatchesTensorPath) {
  Rng rng(15);
  const auto stack = random_stack(4, 3, rng);
  const Tensor y = random_tensor(5, 4, rng);
  Graph g;
  std::vector<CouplingWeights<Var>> leaves(stack.depth());
  std::vector<const CouplingWeights<Var>*> ptrs;
  for (std::size_t n = 0; n < stack.depth(); ++n) {
    auto src = stack.layers[n].weights;
    std::vector<Var> made;
    src.visit([&](const char*, Tensor& t) { made.push_back(g.leaf(t)); });
    std::size_t i = 0;
    leaves[n].visit([&](const char*, Var& v) { v = made[i++]; });
    ptrs.push_back(&leaves[n]);
  }
  const auto rv = flow_forward(g.constant(y), stack, ptrs);
  const auto rt = flow_forward(y, stack);
  EXPECT_EQ(rv.out.value(), rt.out);
  EXPECT_EQ(rv.log_det.value(), rt.log_det);
}

}  // namespace
}  // namespace frmdn
