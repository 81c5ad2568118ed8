#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "mscada/mixing.hpp"
#include "mscada/ops.hpp"
#include "mscada/segnet.hpp"

using namespace mscada;

namespace {

LabelMap striped_label(std::size_t classes, std::size_t h = 8, std::size_t w = 8) {
  LabelMap y(1, h, w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) y.at(0, r, c) = static_cast<std::uint8_t>(c % classes);
  return y;
}

Tensor random_images(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = rng.uniform(0, 1);
  return t;
}

std::set<std::uint8_t> selected_classes(const LabelMap& y, const MixMask& m) {
  std::set<std::uint8_t> s;
  for (std::size_t p = 0; p < y.size(); ++p)
    if (m.keep[p]) s.insert(y.values[p]);
  return s;
}

// Max probability per pixel written directly from logits (c, 0, 0...).
Tensor logits_with_max_prob(const std::vector<double>& probs, std::size_t classes) {
  const std::size_t n = probs.size();
  Tensor z({1, classes, 1, n});
  for (std::size_t p = 0; p < n; ++p) {
    // one class at probs[p], rest share 1 − probs[p] evenly
    const double rest = (1.0 - probs[p]) / static_cast<double>(classes - 1);
    z[p] = std::log(probs[p]);
    for (std::size_t c = 1; c < classes; ++c) z[c * n + p] = std::log(rest);
  }
  return z;
}

}  // namespace

TEST(ClassMask, RatioOneCoversEveryLabelledPixel) {
  Rng rng(0);
  LabelMap y = striped_label(4);
  y.values[3] = kIgnoreLabel;
  const MixMask m = make_class_mask(y, 1.0, rng);
  EXPECT_EQ(m.kind, MixKind::class_level);
  for (std::size_t p = 0; p < y.size(); ++p) EXPECT_EQ(m.keep[p], y.values[p] != kIgnoreLabel ? 1 : 0);
}

TEST(ClassMask, TwoClassesHalfSelectsExactlyOne) {
  Rng rng(1);
  const LabelMap y = striped_label(2);
  for (int t = 0; t < 50; ++t) {
    const MixMask m = make_class_mask(y, 0.5, rng);
    const auto s = selected_classes(y, m);
    ASSERT_EQ(s.size(), 1u);
    for (std::size_t p = 0; p < y.size(); ++p) EXPECT_EQ(m.keep[p], y.values[p] == *s.begin() ? 1 : 0);
  }
}

TEST(ClassMask, SelectionCountIsCeilOfHalf) {
  Rng rng(2);
  for (std::size_t k = 1; k <= 6; ++k) {
    const LabelMap y = striped_label(k);
    const MixMask m = make_class_mask(y, 0.5, rng);
    EXPECT_EQ(selected_classes(y, m).size(), (k + 1) / 2) << k;
  }
}

TEST(ClassMask, FourClassesUniformFrequency) {
  Rng rng(3);
  const LabelMap y = striped_label(4);
  std::vector<int> hits(4, 0);
  for (int t = 0; t < 1000; ++t) {
    const auto s = selected_classes(y, make_class_mask(y, 0.5, rng));
    ASSERT_EQ(s.size(), 2u);
    for (auto c : s) ++hits[c];
  }
  for (int h : hits) EXPECT_NEAR(h / 1000.0, 0.5, 0.05);
}

TEST(ClassMask, EmptyLabelSetThrows) {
  Rng rng(4);
  EXPECT_THROW(make_class_mask(LabelMap(1, 4, 4, kIgnoreLabel), 0.5, rng), ContractError);
}

TEST(RegionMask, AreaWithinOneRow) {
  Rng rng(5);
  for (int t = 0; t < 1000; ++t) {
    const MixMask m = make_region_mask(32, 32, 0.4, rng);
    const double area = static_cast<double>(m.area());
    ASSERT_GE(area, 0.4 * 1024 - 32);
    ASSERT_LE(area, 0.4 * 1024 + 32);
  }
}

TEST(RegionMask, SingleFilledRectangle) {
  Rng rng(6);
  for (int t = 0; t < 200; ++t) {
    const MixMask m = make_region_mask(20, 13, rng.uniform(0.05, 0.9), rng);
    EXPECT_EQ(m.kind, MixKind::region_level);
    std::size_t r0 = 99, r1 = 0, c0 = 99, c1 = 0;
    for (std::size_t r = 0; r < 20; ++r)
      for (std::size_t c = 0; c < 13; ++c)
        if (m.keep[r * 13 + c]) r0 = std::min(r0, r), r1 = std::max(r1, r), c0 = std::min(c0, c), c1 = std::max(c1, c);
    ASSERT_LE(r0, r1);
    EXPECT_EQ(m.area(), (r1 - r0 + 1) * (c1 - c0 + 1));
  }
}

TEST(RegionMask, CentresCoverAllQuadrants) {
  Rng rng(7);
  std::set<int> quadrants;
  for (int t = 0; t < 1000; ++t) {
    const MixMask m = make_region_mask(32, 32, 0.4, rng);
    double rs = 0, cs = 0;
    for (std::size_t p = 0; p < 1024; ++p)
      if (m.keep[p]) rs += static_cast<double>(p / 32), cs += static_cast<double>(p % 32);
    rs /= static_cast<double>(m.area());
    cs /= static_cast<double>(m.area());
    quadrants.insert((rs < 15.5 ? 0 : 2) + (cs < 15.5 ? 0 : 1));
  }
  EXPECT_EQ(quadrants.size(), 4u);
}

TEST(RegionMask, NeverFailsUpToNinetyPercent) {
  Rng rng(8);
  for (double r : {0.01, 0.5, 0.8, 0.9})
    for (std::size_t h : {8u, 9u, 32u}) EXPECT_NO_THROW(make_region_mask(h, 8, r, rng));
  EXPECT_THROW(make_region_mask(8, 8, 1.0, rng), ContractError);
}

class ApplyMix : public ::testing::Test {
 protected:
  void SetUp() override {
    Rng rng(9);
    xs = random_images({2, 3, 4, 4}, rng);
    xt = random_images({2, 3, 4, 4}, rng);
    ys = LabelMap(2, 4, 4, 1);
    yd = LabelMap(2, 4, 4, 4);
  }
  std::vector<MixMask> filled(std::uint8_t v) {
    MixMask m{4, 4, std::vector<std::uint8_t>(16, v), MixKind::region_level};
    return {m, m};
  }
  Tensor xs, xt;
  LabelMap ys, yd;
};

TEST_F(ApplyMix, AllOnesKeepsSource) {
  const MixedBatch m = apply_mix(xs, ys, xt, yd, filled(1));
  EXPECT_EQ(m.image, xs);
  EXPECT_EQ(m.labels, ys);
}

TEST_F(ApplyMix, AllZerosTakesTarget) {
  const MixedBatch m = apply_mix(xs, ys, xt, yd, filled(0));
  EXPECT_EQ(m.image, xt);
  EXPECT_EQ(m.labels, yd);
}

TEST(ApplyMixHand, CheckerboardTwoByTwo) {
  const Tensor xs({1, 1, 2, 2}, {1, 2, 3, 4});
  const Tensor xt({1, 1, 2, 2}, {5, 6, 7, 8});
  LabelMap ys(1, 2, 2, 0), yd(1, 2, 2, 3);
  const MixMask m{2, 2, {1, 0, 0, 1}, MixKind::class_level};
  const MixedBatch out = apply_mix(xs, ys, xt, yd, std::span<const MixMask>(&m, 1));
  EXPECT_EQ(out.image, Tensor({1, 1, 2, 2}, {1, 6, 7, 4}));
  EXPECT_EQ(out.labels.values, (std::vector<std::uint8_t>{0, 3, 3, 0}));
}

TEST_F(ApplyMix, ComplementReconstructsSource) {
  Rng rng(10);
  std::vector<MixMask> masks{make_region_mask(4, 4, 0.4, rng), make_class_mask(LabelMap(1, 4, 4, 2), 1.0, rng)};
  masks[1].keep[5] = 0;
  const MixedBatch a = apply_mix(xs, ys, xt, yd, masks);
  std::vector<MixMask> comp{masks[0].complement(), masks[1].complement()};
  const MixedBatch b = apply_mix(xs, ys, xt, yd, comp);
  const MixedBatch back = apply_mix(a.image, a.labels, b.image, b.labels, masks);
  EXPECT_EQ(back.image, xs);
  EXPECT_EQ(back.labels, ys);
}

TEST_F(ApplyMix, ShapeMismatchThrows) {
  Tensor bad({2, 3, 4, 5});
  EXPECT_THROW(apply_mix(xs, ys, bad, yd, filled(1)), DimensionError);
  EXPECT_THROW(apply_mix(xs, LabelMap(1, 4, 4), xt, yd, filled(1)), DimensionError);
}

TEST_F(ApplyMix, LabelsAreSourceOrDonor) {
  Rng rng(11);
  for (int t = 0; t < 20; ++t) {
    LabelMap y1(2, 4, 4), y2(2, 4, 4);
    for (auto& v : y1.values) v = rng.bernoulli(0.2) ? kIgnoreLabel : static_cast<std::uint8_t>(rng.index(6));
    for (auto& v : y2.values) v = rng.bernoulli(0.2) ? kIgnoreLabel : static_cast<std::uint8_t>(rng.index(6));
    std::vector<MixMask> masks{make_region_mask(4, 4, 0.4, rng), make_region_mask(4, 4, 0.4, rng)};
    const MixedBatch out = apply_mix(xs, y1, xt, y2, masks);
    for (std::size_t i = 0; i < out.labels.size(); ++i) {
      const auto v = out.labels.values[i];
      EXPECT_TRUE(v == kIgnoreLabel || v < 6);
      EXPECT_EQ(v, masks[i / 16].keep[i % 16] ? y1.values[i] : y2.values[i]);
    }
  }
}

TEST(ConfidenceWeights, CertainPredictionsGiveOnes) {
  Tensor z({1, 3, 2, 2}, 0.0);
  for (std::size_t p = 0; p < 4; ++p) z[p] = 800.0;
  const MixMask m{2, 2, {0, 0, 0, 0}, MixKind::region_level};
  const Tensor w = confidence_weight_map(z, std::span<const MixMask>(&m, 1));
  for (double v : w.storage()) EXPECT_EQ(v, 1.0);
}

TEST(ConfidenceWeights, HandCountedFraction) {
  const Tensor z = logits_with_max_prob({0.99, 0.5, 0.97, 0.2}, 6);
  EXPECT_EQ(confident_fraction(z, 0, 0.968), 0.5);
  const MixMask m{1, 4, {1, 0, 0, 0}, MixKind::class_level};
  const Tensor w = confidence_weight_map(z, std::span<const MixMask>(&m, 1), 0.968);
  EXPECT_EQ(w, Tensor({1, 1, 4}, {1.0, 0.5, 0.5, 0.5}));
}

TEST(ConfidenceWeights, FullMaskIgnoresConfidence) {
  const Tensor z = logits_with_max_prob({0.2, 0.3, 0.25, 0.2}, 6);
  const MixMask m{1, 4, {1, 1, 1, 1}, MixKind::region_level};
  const Tensor wmap = confidence_weight_map(z, std::span<const MixMask>(&m, 1));
  for (double v : wmap.storage()) EXPECT_EQ(v, 1.0);
}

TEST(ConfidenceWeights, InvariantToPixelPermutation) {
  Rng rng(12);
  Tensor z({1, 4, 4, 4});
  for (auto& v : z.storage()) v = rng.uniform(-6, 6);
  Tensor zp = z;
  std::vector<std::size_t> perm(16);
  for (std::size_t i = 0; i < 16; ++i) perm[i] = (i * 5 + 3) % 16;
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t p = 0; p < 16; ++p) zp[c * 16 + p] = z[c * 16 + perm[p]];
  EXPECT_EQ(confident_fraction(z, 0, 0.6), confident_fraction(zp, 0, 0.6));
}

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.backbone_channels = 3;
  c.backbone_depth = 1;
  c.expert_channels = 2;
  c.height = 8;
  c.width = 8;
  c.head = HeadKind::none;
  c.num_sources = 2;
  return c;
}

}  // namespace

TEST(BranchSslLoss, FullMaskEqualsSupervisedLoss) {
  Rng rng(13);
  const auto model = MultiBranchModel::init(tiny(), 1);
  const Tensor xs = random_images({1, 3, 8, 8}, rng), xt = random_images({1, 3, 8, 8}, rng);
  LabelMap ys(1, 8, 8);
  for (auto& v : ys.values) v = static_cast<std::uint8_t>(rng.index(6));
  const MixMask m{8, 8, std::vector<std::uint8_t>(64, 1), MixKind::region_level};
  MixedBatch mixed = apply_mix(xs, ys, xt, LabelMap(1, 8, 8, 0), std::span<const MixMask>(&m, 1));
  mixed.weights = confidence_weight_map(model.forward_branch(0, Var::leaf(xt)).value(), std::span<const MixMask>(&m, 1));
  const double ssl = branch_ssl_loss(model, 0, mixed).value().item();
  const double sup = cross_entropy(model.forward_branch(0, Var::leaf(xs)), ys).value().item();
  EXPECT_EQ(ssl, sup);
}

TEST(BranchSslLoss, IgnoredDonorLeavesSourceRegion) {
  Rng rng(14);
  const auto model = MultiBranchModel::init(tiny(), 2);
  const Tensor xs = random_images({1, 3, 8, 8}, rng), xt = random_images({1, 3, 8, 8}, rng);
  LabelMap ys(1, 8, 8);
  for (auto& v : ys.values) v = static_cast<std::uint8_t>(rng.index(6));
  const MixMask m = make_region_mask(8, 8, 0.4, rng);
  MixedBatch mixed = apply_mix(xs, ys, xt, LabelMap(1, 8, 8, kIgnoreLabel), std::span<const MixMask>(&m, 1));
  const double got = branch_ssl_loss(model, 1, mixed).value().item();
  // source-only loss on the mixed image, labels outside the mask ignored
  LabelMap only = ys;
  for (std::size_t p = 0; p < 64; ++p)
    if (!m.keep[p]) only.values[p] = kIgnoreLabel;
  const double expected = cross_entropy(model.forward_branch(1, Var::leaf(mixed.image)), only).value().item();
  EXPECT_EQ(got, expected);
}

TEST(BranchSslLoss, HandComputedTwoByTwo) {
  auto cfg = tiny();
  cfg.height = cfg.width = 8;
  const auto model = MultiBranchModel::init(cfg, 3);
  Rng rng(15);
  const Tensor x = random_images({1, 3, 8, 8}, rng);
  MixedBatch mixed{x, LabelMap(1, 8, 8, kIgnoreLabel), Tensor({1, 8, 8}, 0.0)};
  // four labelled pixels with distinct weights
  const std::size_t pix[4] = {0, 9, 18, 63};
  const std::uint8_t lab[4] = {0, 3, 5, 2};
  const double wts[4] = {1.0, 0.25, 0.5, 1.0};
  for (int i = 0; i < 4; ++i) mixed.labels.values[pix[i]] = lab[i], mixed.weights[pix[i]] = wts[i];
  const Tensor z = model.forward_branch(0, Var::leaf(x)).value();
  double expected = 0;
  for (int i = 0; i < 4; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < 6; ++c) s += std::exp(z[c * 64 + pix[i]]);
    expected += wts[i] * -(z[lab[i] * 64 + pix[i]] - std::log(s));
  }
  expected /= 4;
  EXPECT_NEAR(branch_ssl_loss(model, 0, mixed).value().item(), expected, 1e-12);
}

TEST(BranchSslLoss, GradientsReachOnlyOwnBranch) {
  Rng rng(16);
  const auto model = MultiBranchModel::init(tiny(), 4);
  const Tensor xs = random_images({1, 3, 8, 8}, rng);
  MixedBatch mixed{xs, LabelMap(1, 8, 8, 1), Tensor({1, 8, 8}, 1.0)};
  for (const auto& p : model.parameters()) Var(p.var).zero_grad();
  branch_ssl_loss(model, 0, mixed).backward();
  for (const auto& p : model.parameters()) {
    const bool own = p.name.find(".2.") == std::string::npos;
    EXPECT_EQ(p.var.node()->has_grad(), own) << p.name;
  }
}
