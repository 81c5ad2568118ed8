#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "mscada/ops.hpp"
#include "mscada/segnet.hpp"

using namespace mscada;

namespace {

ModelConfig small_config(std::size_t k = 2) {
  ModelConfig c;
  c.num_sources = k;
  c.backbone_channels = 4;
  c.backbone_depth = 2;
  c.expert_channels = 3;
  c.height = 8;
  c.width = 8;
  c.spatial_width = 4;
  c.spatial_neighbors = 5;
  c.feature_neighbors = 2;
  return c;
}

Var random_input(std::size_t b, Rng& rng, std::size_t h = 8, std::size_t w = 8) {
  Tensor x({b, 3, h, w});
  for (auto& v : x.storage()) v = rng.uniform(0, 1);
  return Var::leaf(x);
}

}  // namespace

TEST(InitModel, SameSeedIsBitwiseIdentical) {
  const auto a = MultiBranchModel::init(small_config(), 5);
  const auto b = MultiBranchModel::init(small_config(), 5);
  ASSERT_EQ(a.parameters().size(), b.parameters().size());
  for (std::size_t i = 0; i < a.parameters().size(); ++i)
    EXPECT_EQ(a.parameters()[i].var.value(), b.parameters()[i].var.value());
}

TEST(InitModel, DifferentSeedsDiffer) {
  const auto a = MultiBranchModel::init(small_config(), 5);
  const auto b = MultiBranchModel::init(small_config(), 6);
  bool differ = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i)
    differ = differ || !(a.parameters()[i].var.value() == b.parameters()[i].var.value());
  EXPECT_TRUE(differ);
}

TEST(InitModel, ThreeSourcesHaveThreeExpertGroups) {
  const auto m = MultiBranchModel::init(small_config(3), 0);
  std::set<std::string> experts;
  for (const auto& p : m.parameters())
    if (p.name.rfind("expert.", 0) == 0) experts.insert(p.name.substr(0, p.name.rfind('.')));
  EXPECT_EQ(experts, (std::set<std::string>{"expert.1", "expert.2", "expert.3"}));
}

TEST(InitModel, HeUniformBounds) {
  const auto m = MultiBranchModel::init(small_config(), 1);
  const Tensor& w = m.parameter("backbone.conv0.w").var.value();
  const double bound = std::sqrt(6.0 / 27.0);
  for (double v : w.storage()) EXPECT_LE(std::abs(v), bound);
}

TEST(InitModel, ParameterGroups) {
  const auto m = MultiBranchModel::init(small_config(), 1);
  for (const auto& p : m.parameters()) {
    const bool backbone = p.name.rfind("backbone.", 0) == 0;
    EXPECT_EQ(p.group, backbone ? ParamGroup::backbone : ParamGroup::head) << p.name;
  }
}

TEST(ForwardBranch, ShapeContract) {
  Rng rng(2);
  const auto m = MultiBranchModel::init(small_config(), 0);
  const Var y = m.forward_branch(1, random_input(2, rng));
  EXPECT_EQ(y.shape(), (Shape{2, 6, 8, 8}));
}

TEST(ForwardBranch, BranchesDiffer) {
  Rng rng(2);
  const auto m = MultiBranchModel::init(small_config(), 0);
  const Var x = random_input(1, rng);
  EXPECT_FALSE(m.forward_branch(0, x).value() == m.forward_branch(1, x).value());
}

TEST(ForwardBranch, ZeroInputGivesUniformSoftmax) {
  const auto m = MultiBranchModel::init(small_config(), 0);
  const Tensor p = softmax(m.forward_branch(0, Var::leaf(Tensor({1, 3, 8, 8}))), 1).value();
  for (double v : p.storage()) EXPECT_NEAR(v, 1.0 / 6.0, 1e-15);
}

TEST(ForwardBranch, OutOfRangeIndexThrows) {
  Rng rng(2);
  const auto m = MultiBranchModel::init(small_config(), 0);
  EXPECT_THROW(m.forward_branch(2, random_input(1, rng)), std::out_of_range);
}

TEST(ForwardBranch, Deterministic) {
  Rng rng(3);
  const auto m = MultiBranchModel::init(small_config(), 0);
  const Var x = random_input(2, rng);
  EXPECT_EQ(m.forward_branch(0, x).value(), m.forward_branch(0, x).value());
  const auto all = m.forward_all_branches(x);
  EXPECT_EQ(all[1].value(), m.forward_branch(1, x).value());
}

TEST(ForwardFeatures, KPlusOneEqualMaps) {
  Rng rng(4);
  auto cfg = small_config();
  cfg.expert_channels = 64;
  cfg.head = HeadKind::linear;
  const auto m = MultiBranchModel::init(cfg, 0);
  const BranchFeatures f = m.forward_features(random_input(2, rng));
  ASSERT_EQ(f.experts.size(), 2u);
  std::vector<Var> all = f.experts;
  all.push_back(f.compressed);
  for (const auto& v : all) EXPECT_EQ(v.shape(), (Shape{2, 64, 8, 8}));
  EXPECT_EQ(concat(all, 1).dim(1), 192u);
}

TEST(ForwardFeatures, ExpertsAreIsolated) {
  Rng rng(5);
  const auto m = MultiBranchModel::init(small_config(), 0);
  const Var x = random_input(1, rng);
  const BranchFeatures before = m.forward_features(x);
  Tensor& w = Var(m.parameter("expert.1.w").var).mutable_value();
  for (auto& v : w.storage()) v += 0.5;
  const BranchFeatures after = m.forward_features(x);
  EXPECT_FALSE(before.experts[0].value() == after.experts[0].value());
  EXPECT_EQ(before.experts[1].value(), after.experts[1].value());
  EXPECT_EQ(before.compressed.value(), after.compressed.value());
}

TEST(ForwardHead, OutputsTargetClasses) {
  Rng rng(6);
  auto cfg = small_config();
  cfg.num_target_classes = 5;
  const auto m = MultiBranchModel::init(cfg, 0);
  EXPECT_EQ(m.forward_head(random_input(2, rng)).shape(), (Shape{2, 5, 8, 8}));
}

class EmaTest : public ::testing::Test {
 protected:
  void SetUp() override {
    student = MultiBranchModel::init(small_config(), 1);
    teacher = EmaTeacher(MultiBranchModel::init(small_config(), 2));
  }
  MultiBranchModel student;
  EmaTeacher teacher;
};

TEST_F(EmaTest, DecayZeroCopiesStudent) {
  teacher.update(student, 0.0);
  for (std::size_t i = 0; i < student.parameters().size(); ++i)
    EXPECT_EQ(teacher.model().parameters()[i].var.value(), student.parameters()[i].var.value());
}

TEST_F(EmaTest, DecayOneKeepsTeacher) {
  const auto before = teacher.model().state();
  teacher.update(student, 1.0);
  const auto after = teacher.model().state();
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i].tensor, after[i].tensor);
}

TEST_F(EmaTest, HalfDecayScalar) {
  for (auto& p : teacher.model().parameters()) Var(p.var).mutable_value() = Tensor(p.var.shape(), 2.0);
  for (auto& p : student.parameters()) Var(p.var).mutable_value() = Tensor(p.var.shape(), 4.0);
  ema_update(teacher, student, 0.5);
  for (const auto& p : teacher.model().parameters())
    for (double v : p.var.value().storage()) EXPECT_EQ(v, 3.0);
}

TEST_F(EmaTest, GeometricConvergence) {
  const double m = 0.9;
  const double t0 = teacher.model().parameters()[0].var.value()[0];
  const double s = student.parameters()[0].var.value()[0];
  double prev = std::abs(t0 - s);
  for (int n = 1; n <= 20; ++n) {
    teacher.update(student, m);
    const double gap = std::abs(teacher.model().parameters()[0].var.value()[0] - s);
    EXPECT_NEAR(gap, std::pow(m, n) * std::abs(t0 - s), 1e-12);
    EXPECT_LE(gap, prev);
    prev = gap;
  }
}

TEST_F(EmaTest, TeacherNeverReceivesGradient) {
  Rng rng(7);
  for (const auto& p : teacher.model().parameters()) EXPECT_FALSE(p.var.requires_grad()) << p.name;
  const Var x = random_input(1, rng);
  const Var y = teacher.model().forward_branch(0, x);
  EXPECT_FALSE(y.requires_grad());
}

TEST_F(EmaTest, TeacherMirrorsStudentNames) {
  const EmaTeacher t(student);
  ASSERT_EQ(t.model().parameters().size(), student.parameters().size());
  for (std::size_t i = 0; i < student.parameters().size(); ++i) {
    EXPECT_EQ(t.model().parameters()[i].name, student.parameters()[i].name);
    EXPECT_EQ(t.model().parameters()[i].var.value(), student.parameters()[i].var.value());
  }
}

TEST_F(EmaTest, MismatchedSetsThrow) {
  const auto other = MultiBranchModel::init(small_config(3), 0);
  EXPECT_THROW(teacher.update(other, 0.5), ContractError);
}

TEST(ModelState, RoundTripThroughLoadState) {
  auto a = MultiBranchModel::init(small_config(), 1);
  auto b = MultiBranchModel::init(small_config(), 2);
  b.load_state(a.state());
  for (std::size_t i = 0; i < a.parameters().size(); ++i)
    EXPECT_EQ(a.parameters()[i].var.value(), b.parameters()[i].var.value());
}

TEST(ModelConfig, ValidationRejectsBadConfigs) {
  auto c = small_config();
  c.num_target_classes = 7;
  EXPECT_THROW(c.validate(), ContractError);
  c = small_config();
  c.height = 3;
  EXPECT_THROW(c.validate(), ContractError);
  c = small_config();
  c.ema_decay = 1.0;
  EXPECT_THROW(c.validate(), ContractError);
}
