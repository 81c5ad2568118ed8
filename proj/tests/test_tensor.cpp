#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>

#include "mscada/checkpoint.hpp"
#include "mscada/hgcn.hpp"
#include "mscada/ops.hpp"

using namespace mscada;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

// Central differences written out independently of gradient_check.
Tensor numeric_grad(const std::function<double(const Tensor&)>& f, Tensor x, double h = 1e-5) {
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double o = x[i];
    x[i] = o + h;
    const double fp = f(x);
    x[i] = o - h;
    const double fm = f(x);
    x[i] = o;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

double max_rel(const Tensor& a, const Tensor& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(std::abs(a[i]), 1e-8));
  return worst;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrix) {
  Var a = Var::leaf(Tensor({2, 2}, {1, 0, 0, 1}));
  Var b = Var::leaf(Tensor({2, 2}, {3, 4, 5, 6}));
  EXPECT_EQ(matmul(a, b).value(), Tensor({2, 2}, {3, 4, 5, 6}));
}

TEST(Matmul, RowTimesColumn) {
  Var a = Var::leaf(Tensor({1, 2}, {1, 2}));
  Var b = Var::leaf(Tensor({2, 1}, {3, 4}));
  EXPECT_EQ(matmul(a, b).value().item(), 11.0);
}

TEST(Matmul, GradientOfSumMatchesCentralDifferences) {
  Rng rng(7);
  const Tensor a = random_tensor({4, 5}, rng);
  const Tensor b = random_tensor({5, 3}, rng);
  Var va = Var::leaf(a, true);
  reduce_sum(matmul(va, Var::leaf(b))).backward();
  const Tensor fd = numeric_grad(
      [&](const Tensor& x) {
        NoGradGuard g;
        return reduce_sum(matmul(Var::leaf(x), Var::leaf(b))).value().item();
      },
      a);
  EXPECT_LT(max_rel(va.grad(), fd), 1e-6);
  // dA = 1·Bᵀ: row sums of B
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < 5; ++k)
      EXPECT_NEAR(va.grad()[i * 5 + k], b[k * 3] + b[k * 3 + 1] + b[k * 3 + 2], 1e-14);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Var a = Var::leaf(Tensor({2, 3}));
  Var b = Var::leaf(Tensor({4, 2}));
  try {
    matmul(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2×3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("4×2"), std::string::npos) << msg;
  }
}

TEST(Conv2d, ZeroInputGivesZeroOutput) {
  Rng rng(1);
  Var x = Var::leaf(Tensor({1, 2, 4, 4}));
  Var w = Var::leaf(random_tensor({3, 2, 3, 3}, rng));
  const Tensor y = conv2d(x, w).value();
  for (double v : y.storage()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, OnesKernelCountsNeighbours) {
  Var x = Var::leaf(Tensor({1, 1, 3, 3}, 1.0));
  Var w = Var::leaf(Tensor({1, 1, 3, 3}, 1.0));
  const Tensor y = conv2d(x, w).value();
  EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  EXPECT_EQ(y[4], 9.0);
  EXPECT_EQ(y[0], 4.0);
  EXPECT_EQ(y[2], 4.0);
  EXPECT_EQ(y[6], 4.0);
  EXPECT_EQ(y[8], 4.0);
  EXPECT_EQ(y[1], 6.0);
}

TEST(Conv2d, MatchesDirectLoop) {
  Rng rng(3);
  const Tensor x = random_tensor({2, 3, 5, 4}, rng);
  const Tensor w = random_tensor({2, 3, 3, 3}, rng);
  const Tensor b = random_tensor({2}, rng);
  const Tensor y = conv2d(Var::leaf(x), Var::leaf(w), Var::leaf(b)).value();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t f = 0; f < 2; ++f)
      for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 4; ++c) {
          double s = b[f];
          for (std::size_t ch = 0; ch < 3; ++ch)
            for (int dr = -1; dr <= 1; ++dr)
              for (int dc = -1; dc <= 1; ++dc) {
                const int rr = r + dr, cc = c + dc;
                if (rr < 0 || rr >= 5 || cc < 0 || cc >= 4) continue;
                s += x[((n * 3 + ch) * 5 + rr) * 4 + cc] * w[((f * 3 + ch) * 3 + dr + 1) * 3 + dc + 1];
              }
          EXPECT_NEAR(y[((n * 2 + f) * 5 + r) * 4 + c], s, 1e-12);
        }
}

TEST(Conv2d, GradientMatchesCentralDifferences) {
  Rng rng(11);
  const Tensor x = random_tensor({2, 3, 5, 5}, rng);
  const Tensor w = random_tensor({2, 3, 3, 3}, rng);
  const Tensor proj = random_tensor({2, 2, 5, 5}, rng);
  auto f = [&](const Var& in) { return reduce_sum(mul(conv2d(in, Var::leaf(w)), Var::leaf(proj))); };
  EXPECT_LT(gradient_check(f, x), 1e-5);
  auto fw = [&](const Var& in) { return reduce_sum(mul(conv2d(Var::leaf(x), in), Var::leaf(proj))); };
  EXPECT_LT(gradient_check(fw, w), 1e-5);
}

TEST(Conv2d, ChannelMismatchThrows) {
  Var x = Var::leaf(Tensor({1, 2, 4, 4}));
  Var w = Var::leaf(Tensor({1, 3, 3, 3}));
  EXPECT_THROW(conv2d(x, w), DimensionError);
}

TEST(Softmax, UniformOnEqualLogits) {
  const Tensor y = softmax(Var::leaf(Tensor({1, 3}, {0, 0, 0})), 1).value();
  for (double v : y.storage()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeLogitDoesNotOverflow) {
  const Tensor y = softmax(Var::leaf(Tensor({1, 2}, {1000, 0})), 1).value();
  EXPECT_EQ(y[0], 1.0);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_FALSE(std::isnan(y[0]));
}

TEST(Softmax, SumsToOneAlongAxis) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor({2, 5, 3, 4}, rng, -50, 50);
    const Tensor y = softmax(Var::leaf(x), 1).value();
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t p = 0; p < 12; ++p) {
        double s = 0;
        for (std::size_t c = 0; c < 5; ++c) {
          EXPECT_GT(y[(b * 5 + c) * 12 + p], -1e-300);
          s += y[(b * 5 + c) * 12 + p];
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
  }
}

TEST(Softmax, GradientMatchesCentralDifferences) {
  Rng rng(2);
  const Tensor x = random_tensor({2, 4}, rng);
  const Tensor proj = random_tensor({2, 4}, rng);
  auto f = [&](const Var& in) { return reduce_sum(mul(softmax(in, 1), Var::leaf(proj))); };
  EXPECT_LT(gradient_check(f, x), 1e-6);
}

TEST(CrossEntropy, PeakedLogitsGiveNearZeroLoss) {
  Tensor logits({1, 3, 2, 2}, 0.0);
  LabelMap y(1, 2, 2);
  const std::uint8_t cls[4] = {0, 1, 2, 1};
  for (std::size_t p = 0; p < 4; ++p) {
    y.values[p] = cls[p];
    logits[cls[p] * 4 + p] = 20.0;
  }
  EXPECT_LT(cross_entropy(Var::leaf(logits), y).value().item(), 1e-3);
}

TEST(CrossEntropy, FullyIgnoredIsZeroWithZeroGradient) {
  Rng rng(4);
  Var logits = Var::leaf(random_tensor({2, 3, 2, 2}, rng), true);
  LabelMap y(2, 2, 2, kIgnoreLabel);
  Var loss = masked_weighted_cross_entropy(logits, y, Tensor({2, 2, 2}, 1.0));
  EXPECT_EQ(loss.value().item(), 0.0);
  loss.backward();
  const Tensor grad = logits.grad();
  for (double g : grad.storage()) EXPECT_EQ(g, 0.0);
}

TEST(CrossEntropy, TwoPixelWeightedHandValue) {
  // pixel 0: logits (2, 0), label 0, weight 1; pixel 1: logits (0, 1), label 0, weight 0.5
  Tensor logits({1, 2, 1, 2}, {2, 0, 0, 1});
  LabelMap y(1, 1, 2, 0);
  const Tensor w({1, 1, 2}, {1.0, 0.5});
  const double l0 = -std::log(std::exp(2.0) / (std::exp(2.0) + 1.0));
  const double l1 = -std::log(1.0 / (1.0 + std::exp(1.0)));
  const double expected = (1.0 * l0 + 0.5 * l1) / 2.0;
  EXPECT_NEAR(masked_weighted_cross_entropy(Var::leaf(logits), y, w).value().item(), expected, 1e-14);
}

TEST(CrossEntropy, InvalidLabelThrows) {
  LabelMap y(1, 1, 1, 3);
  EXPECT_THROW(cross_entropy(Var::leaf(Tensor({1, 3, 1, 1})), y), InvalidLabelError);
}

TEST(CrossEntropy, IgnoredLogitsDoNotAffectLossOrGradients) {
  Rng rng(9);
  Tensor logits = random_tensor({1, 4, 3, 3}, rng);
  LabelMap y(1, 3, 3);
  for (std::size_t p = 0; p < 9; ++p) y.values[p] = p % 3 == 0 ? kIgnoreLabel : static_cast<std::uint8_t>(p % 4);
  const Tensor w({1, 3, 3}, 0.7);
  Var a = Var::leaf(logits, true);
  Var la = masked_weighted_cross_entropy(a, y, w);
  la.backward();
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t p = 0; p < 9; p += 3) logits[c * 9 + p] += rng.uniform(-5, 5);
  Var b = Var::leaf(logits, true);
  Var lb = masked_weighted_cross_entropy(b, y, w);
  lb.backward();
  EXPECT_EQ(la.value().item(), lb.value().item());
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t p = 0; p < 9; ++p) {
      EXPECT_EQ(a.grad()[c * 9 + p], b.grad()[c * 9 + p]);
      if (p % 3 == 0) EXPECT_EQ(b.grad()[c * 9 + p], 0.0);
    }
}

TEST(Elementwise, Relu) {
  EXPECT_EQ(relu(Var::leaf(Tensor({3}, {-1, 0, 2}))).value(), Tensor({3}, {0, 0, 2}));
}

TEST(Elementwise, ConcatShape) {
  std::vector<Var> parts{Var::leaf(Tensor({2, 3}, 1.0)), Var::leaf(Tensor({2, 5}, 2.0))};
  const Tensor y = concat(parts, 1).value();
  EXPECT_EQ(y.shape(), (Shape{2, 8}));
  EXPECT_EQ(y[2], 1.0);
  EXPECT_EQ(y[3], 2.0);
  EXPECT_EQ(y[8], 1.0);
}

TEST(Elementwise, ReduceMaxTiesToLowerIndex) {
  const MaxWithIndex m = reduce_max_with_index(Var::leaf(Tensor({2}, {0.5, 0.5})), 0);
  EXPECT_EQ(m.values.value().item(), 0.5);
  EXPECT_EQ(m.indices.at(0), 0u);
  const MaxWithIndex m2 = reduce_max_with_index(Var::leaf(Tensor({2, 3}, {1, 3, 3, 2, 2, 2})), 1);
  EXPECT_EQ(m2.indices, (std::vector<std::size_t>{1, 0}));
}

TEST(Elementwise, IncompatibleShapesThrow) {
  EXPECT_THROW(add(Var::leaf(Tensor({2, 3})), Var::leaf(Tensor({3, 2}))), DimensionError);
  EXPECT_THROW(mul(Var::leaf(Tensor({2})), Var::leaf(Tensor({3}))), DimensionError);
  EXPECT_THROW(reshape(Var::leaf(Tensor({2, 3})), {4}), DimensionError);
  std::vector<Var> parts{Var::leaf(Tensor({2, 3})), Var::leaf(Tensor({3, 3}))};
  EXPECT_THROW(concat(parts, 1), DimensionError);
}

TEST(Elementwise, SliceAndPermute) {
  const Tensor x({2, 3}, {0, 1, 2, 3, 4, 5});
  EXPECT_EQ(slice(Var::leaf(x), 1, 1, 2).value(), Tensor({2, 2}, {1, 2, 4, 5}));
  EXPECT_EQ(permute(Var::leaf(x), {1, 0}).value(), Tensor({3, 2}, {0, 3, 1, 4, 2, 5}));
  EXPECT_EQ(reduce_mean(Var::leaf(x)).value().item(), 2.5);
}

TEST(Autodiff, SharedSubexpressionAccumulatesOnce) {
  // y = sum((x+x)·x) = 2·sum(x²); dy/dx = 4x
  Var x = Var::leaf(Tensor({3}, {1, -2, 0.5}), true);
  Var s = add(x, x);
  reduce_sum(mul(s, x)).backward();
  EXPECT_EQ(x.grad(), Tensor({3}, {4, -8, 2}));
}

TEST(Autodiff, NoGradGuardRecordsNothing) {
  Var x = Var::leaf(Tensor({2}, 1.0), true);
  NoGradGuard g;
  Var y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(GradientCheck, SumHasUnitGradient) {
  Rng rng(0);
  const Tensor x = random_tensor({3, 4}, rng);
  Var v = Var::leaf(x, true);
  reduce_sum(v).backward();
  const Tensor grad = v.grad();
  for (double g : grad.storage()) EXPECT_EQ(g, 1.0);
  EXPECT_LT(gradient_check([](const Var& in) { return reduce_sum(in); }, x), 1e-10);
}

TEST(GradientCheck, SoftmaxTimesInput) {
  Rng rng(12);
  const Tensor x = random_tensor({3, 3}, rng);
  EXPECT_LT(gradient_check([](const Var& in) { return reduce_sum(mul(softmax(in, 1), in)); }, x), 1e-5);
}

TEST(GradientCheck, TwoHypergraphLayers) {
  Rng rng(21);
  const Tensor x = random_tensor({8, 4}, rng, 0.1, 1.0);
  const Hypergraph g = knn_hyperedges(x, 3);
  HgcnLayer l1{Var::leaf(random_tensor({4, 5}, rng))};
  HgcnLayer l2{Var::leaf(random_tensor({5, 3}, rng))};
  const Tensor proj = random_tensor({8, 3}, rng);
  auto f = [&](const Var& in) {
    return reduce_sum(mul(hypergraph_conv(g, hypergraph_conv(g, in, l1), l2), Var::leaf(proj)));
  };
  EXPECT_LT(gradient_check(f, x), 1e-4);
}

TEST(GradientCheck, NonScalarIsContractError) {
  EXPECT_THROW(gradient_check([](const Var& in) { return in; }, Tensor({2}, 1.0)), ContractError);
}

TEST(Checkpoint, BitExactRoundTrip) {
  Rng rng(3);
  std::vector<NamedTensor> entries{{"a.w", random_tensor({2, 3, 4}, rng)},
                                   {"scalar", Tensor::scalar(std::numeric_limits<double>::denorm_min())},
                                   {"b", Tensor({1}, {-0.0})}};
  const std::string bytes = encode_checkpoint(entries);
  EXPECT_EQ(bytes.substr(0, 4), "MSCT");
  const auto back = decode_checkpoint(bytes);
  ASSERT_EQ(back.size(), entries.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].name, entries[i].name);
    EXPECT_EQ(back[i].tensor.shape(), entries[i].tensor.shape());
    EXPECT_EQ(std::memcmp(back[i].tensor.storage().data(), entries[i].tensor.storage().data(),
                          8 * back[i].tensor.size()),
              0);
  }
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, HeaderLayout) {
  const std::string bytes = encode_checkpoint({{"xy", Tensor({2}, {1.0, 2.0})}});
  // magic 4 + version 4 + count 4 + namelen 2 + name 2 + dtype 1 + rank 1 + extent 4 + data 16
  ASSERT_EQ(bytes.size(), 38u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), kCheckpointVersion);
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1);
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 2);
  EXPECT_EQ(bytes.substr(14, 2), "xy");
  EXPECT_EQ(bytes[16], 0);
  EXPECT_EQ(bytes[17], 1);
  EXPECT_EQ(static_cast<unsigned char>(bytes[18]), 2);
}

TEST(Checkpoint, TruncatedInputThrows) {
  const std::string bytes = encode_checkpoint({{"x", Tensor({3}, 1.0)}});
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), CheckpointError);
  EXPECT_THROW(decode_checkpoint("MSCX"), CheckpointError);
}
