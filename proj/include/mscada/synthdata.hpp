#pragma once

// Procedural multi-domain segmentation benchmark and its on-disk layout:
//   <root>/<domain>/images/<idx>.ppm   (P6, 8-bit)
//   <root>/<domain>/labels/<idx>.pgm   (P5, 8-bit class index, 255 = ignore)
//   <root>/<domain>/manifest.json
// plus <root>/scenario.json describing the class spaces.

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "mscada/label_map.hpp"
#include "mscada/tensor.hpp"

namespace mscada {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at byte " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

enum class DomainRole { source, target };

using Rgb = std::array<double, 3>;

struct DomainSpec {
  std::string name;
  DomainRole role = DomainRole::source;
  std::size_t source_index = 0;        // 1-based for sources, 0 for the target
  std::vector<std::uint8_t> classes;   // union indices, sorted
  std::size_t num_union = 6;
  std::vector<Rgb> palette;            // base colour per union class
  std::vector<double> texture;         // texture amplitude per union class
  double color_jitter = 0.05;          // per-instance colour jitter
  Rgb shift_gain{1.0, 1.0, 1.0};       // global colour affine
  Rgb shift_bias{0.0, 0.0, 0.0};
  double noise = 0.02;                 // per-pixel noise std
  bool shift_enabled = true;
  std::size_t height = 32;
  std::size_t width = 32;

  void validate() const;
};

struct SceneSample {
  Tensor image;  // 3×H×W in [0,1], on the 8-bit grid
  LabelMap label;
};

std::vector<SceneSample> generate_domain(const DomainSpec& spec, std::size_t n, std::uint64_t seed);

struct Scenario {
  std::string name;
  std::size_t num_union = 6;
  std::vector<std::uint8_t> target_classes;
  std::vector<DomainSpec> sources;
  DomainSpec target;
};

// equality2 | equality3 | inclusion2
Scenario scenario_preset(const std::string& name, std::size_t height = 32, std::size_t width = 32);
std::vector<DomainSpec> scenario_presets(const std::string& name);

// Netpbm codecs. Images are 3×H×W reals in [0,1].
std::string encode_ppm(const Tensor& image);
Tensor decode_ppm(const std::string& bytes);
std::string encode_pgm(const LabelMap& label);
LabelMap decode_pgm(const std::string& bytes);

struct DomainManifest {
  std::string name;
  DomainRole role = DomainRole::source;
  std::size_t source_index = 0;
  std::vector<std::uint8_t> classes;
  std::size_t count = 0;
  std::size_t height = 0;
  std::size_t width = 0;
};

void write_dataset(const std::filesystem::path& root, const DomainSpec& domain,
                   const std::vector<SceneSample>& samples);
// Images and labels; for evaluation and source domains.
std::vector<SceneSample> read_dataset(const std::filesystem::path& root, const std::string& domain);
// Images only; the read path for unlabelled target training data.
std::vector<Tensor> read_images(const std::filesystem::path& root, const std::string& domain);
DomainManifest read_manifest(const std::filesystem::path& root, const std::string& domain);

void write_scenario_file(const std::filesystem::path& root, const Scenario& scenario);
// Class spaces and domain names; palettes are not persisted.
Scenario read_scenario_file(const std::filesystem::path& root);

struct ScenarioData {
  Scenario scenario;
  std::vector<std::vector<SceneSample>> sources;
  std::vector<Tensor> target_train;        // unlabelled
  std::vector<SceneSample> target_test;
};

struct DataSizes {
  std::size_t per_source = 200;
  std::size_t target_train = 100;
  std::size_t target_test = 100;
};

ScenarioData generate_scenario(const Scenario& scenario, const DataSizes& sizes, std::uint64_t seed);
void write_scenario(const std::filesystem::path& root, const ScenarioData& data);
ScenarioData read_scenario(const std::filesystem::path& root);

}  // namespace mscada
