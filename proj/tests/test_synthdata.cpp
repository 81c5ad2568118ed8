#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "mscada/synthdata.hpp"

using namespace mscada;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("mscada_test_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                         "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::set<std::uint8_t> support(const std::vector<SceneSample>& samples) {
  std::set<std::uint8_t> s;
  for (const auto& x : samples) s.insert(x.label.values.begin(), x.label.values.end());
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(GenerateDomain, DeterministicGivenSeed) {
  const DomainSpec spec = scenario_preset("equality2").sources[0];
  const auto a = generate_domain(spec, 5, 42);
  const auto b = generate_domain(spec, 5, 42);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].label, b[i].label);
  }
  const auto c = generate_domain(spec, 5, 43);
  EXPECT_NE(a[0].label, c[0].label);
}

TEST(GenerateDomain, LabelsStayInClassSet) {
  DomainSpec spec = scenario_preset("equality2").target;
  spec.classes = {0, 2, 3};
  const auto s = support(generate_domain(spec, 30, 1));
  for (auto v : s) EXPECT_TRUE(v == 0 || v == 2 || v == 3) << int(v);
  EXPECT_EQ(s.size(), 3u);
}

TEST(GenerateDomain, SameGeometryDifferentPalette) {
  const Scenario sc = scenario_preset("equality2");
  DomainSpec a = sc.sources[0], b = sc.sources[0];
  b.palette = sc.target.palette;
  b.shift_gain = sc.target.shift_gain;
  const auto sa = generate_domain(a, 4, 9), sb = generate_domain(b, 4, 9);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(sa[i].label, sb[i].label);
    EXPECT_NE(sa[i].image, sb[i].image);
  }
}

TEST(GenerateDomain, ShiftIsLabelPreserving) {
  DomainSpec spec = scenario_preset("equality2").target;
  const auto shifted = generate_domain(spec, 4, 3);
  spec.shift_enabled = false;
  const auto plain = generate_domain(spec, 4, 3);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(shifted[i].label, plain[i].label);
    EXPECT_NE(shifted[i].image, plain[i].image);
  }
}

TEST(GenerateDomain, ImagesOnEightBitGridInUnitRange) {
  const auto s = generate_domain(scenario_preset("equality3").sources[2], 3, 0);
  for (const auto& x : s)
    for (double v : x.image.storage()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      EXPECT_DOUBLE_EQ(v * 255.0, std::round(v * 255.0));
    }
}

TEST(GenerateDomain, RejectsTooFewClasses) {
  DomainSpec spec = scenario_preset("equality2").sources[0];
  spec.classes = {2};
  EXPECT_THROW(generate_domain(spec, 1, 0), ContractError);
  spec.classes = {1, 2};
  EXPECT_THROW(generate_domain(spec, 0, 0), ContractError);
}

TEST(Presets, Equality2UnionEqualsTarget) {
  const Scenario s = scenario_preset("equality2");
  ASSERT_EQ(s.sources.size(), 2u);
  std::set<std::uint8_t> u;
  for (const auto& d : s.sources) u.insert(d.classes.begin(), d.classes.end());
  EXPECT_EQ(u, std::set<std::uint8_t>(s.target_classes.begin(), s.target_classes.end()));
  EXPECT_NE(s.sources[0].classes, s.sources[1].classes);
  for (const auto& d : s.sources) EXPECT_EQ(d.classes.size(), 5u);
}

TEST(Presets, Inclusion2HasOneOutlier) {
  const Scenario s = scenario_preset("inclusion2");
  std::set<std::uint8_t> u;
  for (const auto& d : s.sources) u.insert(d.classes.begin(), d.classes.end());
  std::size_t absent = 0;
  for (auto c : u) absent += std::count(s.target_classes.begin(), s.target_classes.end(), c) ? 0 : 1;
  EXPECT_EQ(absent, 1u);
}

TEST(Presets, Equality3PairwiseDistinct) {
  const Scenario s = scenario_preset("equality3");
  ASSERT_EQ(s.sources.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = i + 1; j < 3; ++j) EXPECT_NE(s.sources[i].classes, s.sources[j].classes);
}

TEST(Presets, EverySourceIntersectsTarget) {
  for (const char* name : {"equality2", "equality3", "inclusion2"}) {
    const Scenario s = scenario_preset(name);
    for (const auto& d : s.sources) {
      bool meets = false;
      for (auto c : d.classes) meets = meets || std::count(s.target_classes.begin(), s.target_classes.end(), c);
      EXPECT_TRUE(meets) << name;
    }
    EXPECT_EQ(scenario_presets(name).size(), s.sources.size() + 1);
  }
  EXPECT_THROW(scenario_preset("nope"), std::invalid_argument);
}

TEST(Netpbm, PgmRoundTripAndHeader) {
  LabelMap y(1, 3, 4);
  for (std::size_t i = 0; i < 12; ++i) y.values[i] = static_cast<std::uint8_t>(i == 5 ? 255 : i % 6);
  const std::string bytes = encode_pgm(y);
  EXPECT_EQ(bytes.substr(0, 2), "P5");
  EXPECT_NE(bytes.find("255\n"), std::string::npos);
  EXPECT_EQ(decode_pgm(bytes), y);
}

TEST(Netpbm, PpmRoundTripIsLossless) {
  const auto s = generate_domain(scenario_preset("equality2").target, 2, 5);
  for (const auto& x : s) EXPECT_EQ(decode_ppm(encode_ppm(x.image)), x.image);
}

TEST(Netpbm, HeaderCommentsAccepted) {
  const std::string bytes = std::string("P5\n# comment\n2 1\n# more\n255\n") + char(3) + char(4);
  const LabelMap y = decode_pgm(bytes);
  EXPECT_EQ(y.width, 2u);
  EXPECT_EQ(y.values, (std::vector<std::uint8_t>{3, 4}));
}

TEST(Netpbm, MalformedHeadersReportOffsets) {
  try {
    decode_pgm("P6\n2 2\n255\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  try {
    decode_pgm("P5\n2 x\n255\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 5u);
    EXPECT_NE(std::string(e.what()).find("byte 5"), std::string::npos);
  }
  try {
    decode_pgm("P5\n2 2\n65535\nabcd");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_GT(e.offset(), 0u);
  }
  EXPECT_THROW(decode_pgm("P5\n2 2\n255\nabc"), ParseError);
  EXPECT_THROW(decode_ppm("P6\n2 2\n255\nabc"), ParseError);
  EXPECT_THROW(decode_pgm("P5\n2 2"), ParseError);
}

TEST(Dataset, RoundTripAndLayout) {
  TempDir dir;
  const DomainSpec spec = scenario_preset("equality2").sources[1];
  const auto samples = generate_domain(spec, 3, 7);
  write_dataset(dir.path(), spec, samples);
  EXPECT_TRUE(fs::exists(dir.path() / spec.name / "images" / "0.ppm"));
  EXPECT_TRUE(fs::exists(dir.path() / spec.name / "labels" / "2.pgm"));
  EXPECT_TRUE(fs::exists(dir.path() / spec.name / "manifest.json"));
  const auto back = read_dataset(dir.path(), spec.name);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].label, samples[i].label);
    EXPECT_EQ(back[i].image, samples[i].image);
  }
  const DomainManifest m = read_manifest(dir.path(), spec.name);
  EXPECT_EQ(m.classes, spec.classes);
  EXPECT_EQ(m.count, 3u);
  EXPECT_EQ(m.role, DomainRole::source);
  const std::string pgm = slurp(dir.path() / spec.name / "labels" / "0.pgm");
  EXPECT_EQ(pgm.substr(0, 2), "P5");
  EXPECT_EQ(decode_pgm(pgm), samples[0].label);
  const auto j = nlohmann::json::parse(slurp(dir.path() / spec.name / "manifest.json"));
  EXPECT_EQ(j.at("count"), 3);
}

TEST(Dataset, ScenarioKeepsTargetTrainUnlabelled) {
  TempDir dir;
  const ScenarioData data = generate_scenario(scenario_preset("inclusion2"), DataSizes{4, 3, 2}, 1);
  write_scenario(dir.path(), data);
  EXPECT_FALSE(fs::exists(dir.path() / "target" / "labels"));
  EXPECT_TRUE(fs::exists(dir.path() / "target_test" / "labels"));
  EXPECT_TRUE(fs::exists(dir.path() / "scenario.json"));
  EXPECT_THROW(read_dataset(dir.path(), "target"), std::exception);
  const ScenarioData back = read_scenario(dir.path());
  EXPECT_EQ(back.scenario.target_classes, data.scenario.target_classes);
  ASSERT_EQ(back.sources.size(), 2u);
  EXPECT_EQ(back.sources[1].size(), 4u);
  ASSERT_EQ(back.target_train.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(back.target_train[i], data.target_train[i]);
  ASSERT_EQ(back.target_test.size(), 2u);
  EXPECT_EQ(back.target_test[1].label, data.target_test[1].label);
  for (const auto& s : back.target_test)
    for (auto v : s.label.values) EXPECT_LT(v, 5);
}

TEST(Dataset, GeneratedScenarioIsDeterministic) {
  const DataSizes sizes{3, 2, 2};
  const ScenarioData a = generate_scenario(scenario_preset("equality2"), sizes, 4);
  const ScenarioData b = generate_scenario(scenario_preset("equality2"), sizes, 4);
  EXPECT_EQ(a.sources[0][2].image, b.sources[0][2].image);
  EXPECT_EQ(a.target_test[1].label, b.target_test[1].label);
}
