#include <gtest/gtest.h>

#include <cstring>

#include "dcsd/checkpoint.hpp"
#include "dcsd/error.hpp"
#include "dcsd/ops.hpp"
#include "dcsd/optim.hpp"
#include "dcsd/tensor.hpp"
#include "test_util.hpp"

namespace dcsd {
namespace {

TEST(TensorNew, ZerosAndConstant) {
  Tensor z = tensor_new({2, 3}, Init::zeros());
  EXPECT_EQ(z.shape(), (Shape{2, 3}));
  for (double v : z.data()) EXPECT_EQ(v, 0.0);

  Tensor c = tensor_new({1}, Init::constant(7.5));
  EXPECT_EQ(c.item(), 7.5);
}

TEST(TensorNew, SeededNormalIsReproducible) {
  Rng a(42), b(42);
  Tensor x = tensor_new({4, 4}, Init::normal(0.0, 1.0), &a);
  Tensor y = tensor_new({4, 4}, Init::normal(0.0, 1.0), &b);
  ASSERT_EQ(x.numel(), y.numel());
  EXPECT_EQ(std::memcmp(x.data().data(), y.data().data(), x.numel() * sizeof(double)), 0);
}

TEST(TensorNew, RejectsZeroExtent) {
  EXPECT_THROW(tensor_new({2, 0}, Init::zeros()), ShapeError);
  EXPECT_THROW(Tensor(Shape{}, 0.0), ShapeError);
}

TEST(TensorNew, FanScaledInitStatistics) {
  Rng rng(1);
  Tensor w = tensor_new({64, 32, 3, 3}, Init::he_fan_in(), &rng);
  double ss = 0.0;
  for (double v : w.data()) ss += v * v;
  // E[w^2] = 2 / fan_in, fan_in = 32*9
  EXPECT_NEAR(ss / static_cast<double>(w.numel()), 2.0 / 288.0, 0.1 * 2.0 / 288.0);

  Tensor fc = tensor_new({10, 30}, Init::xavier(), &rng);
  const double r = std::sqrt(6.0 / 40.0);
  for (double v : fc.data()) EXPECT_LE(std::abs(v), r);
}

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor({3}, {1.0, 2.0, 3.0}).set_requires_grad(true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareMatchesFiniteDifference) {
  Tensor x = Tensor({2}, {1.0, -2.0}).set_requires_grad(true);
  backward(sum(mul(x, x)));
  // central differences on f(x) = x0^2 + x1^2, h = 1e-6
  const double h = 1e-6;
  const double fd0 = ((1.0 + h) * (1.0 + h) - (1.0 - h) * (1.0 - h)) / (2 * h);
  const double fd1 = ((-2.0 + h) * (-2.0 + h) - (-2.0 - h) * (-2.0 - h)) / (2 * h);
  EXPECT_NEAR(x.grad()[0], fd0, 1e-8);
  EXPECT_NEAR(x.grad()[1], fd1, 1e-8);
  EXPECT_NEAR(x.grad()[0], 2.0, 1e-12);
  EXPECT_NEAR(x.grad()[1], -4.0, 1e-12);
}

TEST(Backward, AccumulatesAcrossCallsUntilZeroed) {
  Tensor x = Tensor({2}, {1.0, 1.0}).set_requires_grad(true);
  backward(sum(x));
  backward(sum(x));
  EXPECT_EQ(x.grad()[0], 2.0);
  x.zero_grad();
  backward(sum(x));
  EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(Backward, RepeatedSweepOnOneGraphDoesNotDoubleCountInterior) {
  Tensor x = Tensor({2}, {1.0, 3.0}).set_requires_grad(true);
  Tensor loss = sum(mul(x, x));
  backward(loss);
  backward(loss);
  EXPECT_EQ(x.grad()[1], 12.0);
}

TEST(Backward, RejectsNonScalar) {
  Tensor x = Tensor({2}, {1.0, 1.0}).set_requires_grad(true);
  EXPECT_THROW(backward(scale(x, 2.0)), ShapeError);
}

TEST(Detach, ValueEqualAndNoGraph) {
  Tensor x = Tensor({3}, {1.0, -2.0, 0.5}).set_requires_grad(true);
  Tensor d = detach(x);
  EXPECT_EQ(d.values(), x.values());
  EXPECT_FALSE(d.requires_grad());
  EXPECT_TRUE(d.is_leaf());
}

TEST(Detach, CutsGradientFlow) {
  Tensor x = Tensor({3}, {1.0, -2.0, 0.5}).set_requires_grad(true);
  Tensor y = Tensor({3}, {4.0, 5.0, 6.0}).set_requires_grad(true);
  backward(sum(mul(detach(x), y)));
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
  EXPECT_EQ(y.grad(), x.values());
}

TEST(Detach, PerturbationProbeLeavesDetachedPathGradientZero) {
  // Gradient reaching x only through detach(x) stays exactly zero at x and
  // at every +-h perturbation of each coordinate, while the sibling y still
  // receives x's (perturbed) values.
  Rng rng(3);
  Tensor x = testing::random_tensor({4}, rng);
  Tensor y = testing::random_tensor({4}, rng);
  const double h = 1e-6;
  for (std::size_t i = 0; i < x.numel(); ++i)
    for (double delta : {0.0, h, -h}) {
      const double orig = x[i];
      x.mutable_data()[i] = orig + delta;
      x.zero_grad();
      y.zero_grad();
      backward(sum(mul(detach(x), y)));
      for (double g : x.grad()) EXPECT_EQ(g, 0.0);
      EXPECT_EQ(y.grad()[i], orig + delta);
      x.mutable_data()[i] = orig;
    }
}

TEST(Determinism, ForwardBackwardBitIdentical) {
  auto run = [] {
    Rng rng(7);
    Tensor x = tensor_new({2, 3, 5, 5}, Init::normal(0.0, 1.0), &rng).set_requires_grad(true);
    Tensor w = tensor_new({4, 3, 3, 3}, Init::he_fan_in(), &rng).set_requires_grad(true);
    Tensor out = relu(conv2d(x, w, 1, 1));
    backward(testing::probe_loss(out));
    std::vector<double> all = out.values();
    for (double g : w.grad()) all.push_back(g);
    for (double g : x.grad()) all.push_back(g);
    return all;
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)), 0);
}

TEST(Adam, ZeroGradientLeavesParametersIdentical) {
  Tensor p = Tensor({3}, {1.0, -1.0, 2.0}).set_requires_grad(true);
  const auto before = p.values();
  p.grad_buffer();  // allocated, all zero
  Adam opt({p}, AdamConfig{0.1, 0.9, 0.999, 1e-8});
  opt.step();
  EXPECT_EQ(p.values(), before);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor p = Tensor({1}, {0.0}).set_requires_grad(true);
  p.grad_buffer()[0] = 1.0;
  Adam opt({p}, AdamConfig{0.1, 0.9, 0.999, 1e-8});
  opt.step();
  // m_hat = v_hat = 1, so the step is lr / (1 + eps)
  EXPECT_NEAR(p.item(), -0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, ReplayIsBitIdentical) {
  auto run = [] {
    Rng rng(5);
    Tensor p = testing::random_tensor({6}, rng);
    Adam opt({p}, AdamConfig{});
    for (int i = 0; i < 10; ++i) {
      opt.zero_grad();
      backward(sum(mul(p, p)));
      opt.step();
    }
    return p.values();
  };
  const auto a = run(), b = run();
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)), 0);
}

TEST(StepSchedule, DividesAtDecayEpochs) {
  StepSchedule s{3.5e-4, {40, 90}, 10.0};
  EXPECT_DOUBLE_EQ(s.lr_at(0), 3.5e-4);
  EXPECT_DOUBLE_EQ(s.lr_at(40), 3.5e-5);
  EXPECT_DOUBLE_EQ(s.lr_at(119), 3.5e-6);
}

TEST(Checkpoint, LayoutIsBitExact) {
  std::vector<NamedTensor> entries{{"ab", Tensor({1, 2}, {1.0, -2.5})}};
  const auto bytes = encode_checkpoint(entries);
  // magic(4) version(4) count(4) namelen(2) name(2) rank(1) extents(8) values(16)
  ASSERT_EQ(bytes.size(), 4u + 4 + 4 + 2 + 2 + 1 + 8 + 16);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "DCSD");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[12], 2);
  EXPECT_EQ(bytes[16], 2);  // rank
  EXPECT_EQ(bytes[17], 1);  // extent 0, little-endian
  EXPECT_EQ(bytes[21], 2);  // extent 1
  double v;
  std::memcpy(&v, bytes.data() + 33, 8);
  EXPECT_EQ(v, -2.5);
}

TEST(Checkpoint, RoundTripPreservesNamesShapesValues) {
  Rng rng(11);
  std::vector<NamedTensor> entries{{"w", tensor_new({3, 2, 3, 3}, Init::he_fan_in(), &rng)},
                                   {"bn.running_var", Tensor({4}, 1.0)}};
  const auto back = decode_checkpoint(encode_checkpoint(entries));
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].name, entries[i].name);
    EXPECT_EQ(back[i].tensor.shape(), entries[i].tensor.shape());
    EXPECT_EQ(back[i].tensor.values(), entries[i].tensor.values());
  }
}

TEST(Checkpoint, RejectsUnknownVersionAndBadMagic) {
  auto bytes = encode_checkpoint({{"x", Tensor({1}, 1.0)}});
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(decode_checkpoint(bad_version), CheckpointError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), CheckpointError);
  bytes.pop_back();
  EXPECT_THROW(decode_checkpoint(bytes), CheckpointError);
}

}  // namespace
}  // namespace dcsd

namespace dcsd {
namespace {

TEST(NoGrad, GuardSuppressesGraphAndRestores) {
  Tensor a = Tensor::constant({2}, 1.5).set_requires_grad(true);
  {
    NoGradGuard guard;
    Tensor b = mul(a, a);
    EXPECT_FALSE(b.requires_grad());
    EXPECT_TRUE(b.is_leaf());
    EXPECT_DOUBLE_EQ(b[0], 2.25);
  }
  EXPECT_TRUE(mul(a, a).requires_grad());
}

}  // namespace
}  // namespace dcsd
