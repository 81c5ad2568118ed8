#include "mscada/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>

#include <json.hpp>

#include "mscada/rng.hpp"

namespace mscada {

namespace fs = std::filesystem;
using nlohmann::json;

void DomainSpec::validate() const {
  if (classes.size() < 2) throw ContractError("domain " + name + " needs at least 2 classes");
  if (!std::is_sorted(classes.begin(), classes.end()) ||
      std::adjacent_find(classes.begin(), classes.end()) != classes.end()) {
    throw ContractError("domain " + name + " class set must be sorted and distinct");
  }
  if (classes.back() >= num_union) throw ContractError("domain " + name + " class outside union");
  if (palette.size() != num_union || texture.size() != num_union) {
    throw ContractError("domain " + name + " palette/texture must cover the union");
  }
  if (height < 8 || width < 8) throw ContractError("domain " + name + " grid must be at least 8×8");
}

namespace {

enum class ShapeKind { stripe, rect, blob, disc, small_rect, speckle };

ShapeKind shape_for(std::uint8_t c) {
  static constexpr ShapeKind kinds[] = {ShapeKind::stripe, ShapeKind::rect, ShapeKind::blob,
                                        ShapeKind::disc,   ShapeKind::small_rect, ShapeKind::speckle};
  return kinds[c % 6];
}

// Domain-invariant texture pattern of a class, roughly in [-1, 1].
double texture_pattern(std::uint8_t c, double y, double x, double jitter) {
  switch (c % 6) {
    case 0: return std::sin(1.6 * y);
    case 1: return std::sin(0.8 * (x + y));
    case 2: return std::sin(0.5 * x) * std::sin(0.5 * y);
    case 3: return std::sin(2.1 * x + 1.3 * y) * std::cos(1.7 * y);
    case 4: return 0.0;
    default: return 2.0 * jitter - 1.0;
  }
}

struct Raster {
  std::size_t h, w;
  std::vector<std::uint8_t>& label;
  void set(long y, long x, std::uint8_t c) {
    if (y >= 0 && x >= 0 && y < static_cast<long>(h) && x < static_cast<long>(w)) {
      label[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = c;
    }
  }
  void disc(double cy, double cx, double r, std::uint8_t c) {
    for (long y = static_cast<long>(std::floor(cy - r)); y <= static_cast<long>(std::ceil(cy + r)); ++y) {
      for (long x = static_cast<long>(std::floor(cx - r)); x <= static_cast<long>(std::ceil(cx + r)); ++x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        if (dy * dy + dx * dx <= r * r) set(y, x, c);
      }
    }
  }
  void rect(long top, long left, long rh, long rw, std::uint8_t c) {
    for (long y = top; y < top + rh; ++y) {
      for (long x = left; x < left + rw; ++x) set(y, x, c);
    }
  }
};

void draw_instance(Raster& r, std::uint8_t c, Rng& g) {
  const auto h = static_cast<long>(r.h), w = static_cast<long>(r.w);
  switch (shape_for(c)) {
    case ShapeKind::stripe: {
      const long thick = g.uniform_int(3, 5);
      if (g.bernoulli(0.5)) {
        r.rect(g.uniform_int(0, h - thick), 0, thick, w, c);
      } else {
        r.rect(0, g.uniform_int(0, w - thick), h, thick, c);
      }
      break;
    }
    case ShapeKind::rect: {
      const long rh = g.uniform_int(6, std::min<long>(14, h)), rw = g.uniform_int(6, std::min<long>(14, w));
      r.rect(g.uniform_int(-2, h - rh + 2), g.uniform_int(-2, w - rw + 2), rh, rw, c);
      break;
    }
    case ShapeKind::blob: {
      const double cy = g.uniform(0, static_cast<double>(h)), cx = g.uniform(0, static_cast<double>(w));
      const int parts = static_cast<int>(g.uniform_int(3, 5));
      for (int i = 0; i < parts; ++i) {
        r.disc(cy + g.uniform(-5, 5), cx + g.uniform(-5, 5), g.uniform(3, 6), c);
      }
      break;
    }
    case ShapeKind::disc:
      r.disc(g.uniform(0, static_cast<double>(h)), g.uniform(0, static_cast<double>(w)), g.uniform(3, 6), c);
      break;
    case ShapeKind::small_rect: {
      long rh = g.uniform_int(2, 3), rw = g.uniform_int(4, 6);
      if (g.bernoulli(0.5)) std::swap(rh, rw);
      const int cars = static_cast<int>(g.uniform_int(1, 3));
      for (int i = 0; i < cars; ++i) r.rect(g.uniform_int(0, h - rh), g.uniform_int(0, w - rw), rh, rw, c);
      break;
    }
    case ShapeKind::speckle: {
      const double cy = g.uniform(0, static_cast<double>(h)), cx = g.uniform(0, static_cast<double>(w));
      const int parts = static_cast<int>(g.uniform_int(2, 4));
      for (int i = 0; i < parts; ++i) {
        r.disc(cy + g.uniform(-4, 4), cx + g.uniform(-4, 4), g.uniform(1.5, 3), c);
      }
      break;
    }
  }
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace

std::vector<SceneSample> generate_domain(const DomainSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  if (n == 0) throw ContractError("generate_domain: need at least one sample");
  const Rng root(seed);
  const std::size_t h = spec.height, w = spec.width, hw = h * w;
  std::vector<SceneSample> out;
  out.reserve(n);
  const std::uint8_t background = spec.classes.front();
  const std::vector<std::uint8_t> foreground(spec.classes.begin() + 1, spec.classes.end());
  for (std::size_t s = 0; s < n; ++s) {
    Rng geo = root.fork(2 * s);
    Rng look = root.fork(2 * s + 1);
    SceneSample sample{Tensor(Shape{3, h, w}), LabelMap(1, h, w, background)};
    Raster raster{h, w, sample.label.values};
    const auto instances = geo.uniform_int(3, 8);
    for (std::int64_t i = 0; i < instances; ++i) {
      draw_instance(raster, foreground[geo.index(foreground.size())], geo);
    }
    // Appearance: per-class colour jitter for this sample, texture, noise, shift.
    std::vector<Rgb> colour(spec.num_union);
    for (std::size_t c = 0; c < spec.num_union; ++c) {
      for (std::size_t ch = 0; ch < 3; ++ch) {
        colour[c][ch] = spec.palette[c][ch] + spec.color_jitter * look.normal();
      }
    }
    const double phase_y = look.uniform(0, 6.3), phase_x = look.uniform(0, 6.3);
    for (std::size_t p = 0; p < hw; ++p) {
      const std::uint8_t c = sample.label.values[p];
      const double y = static_cast<double>(p / w) + phase_y, x = static_cast<double>(p % w) + phase_x;
      const double tex = spec.texture[c] * texture_pattern(c, y, x, look.uniform());
      for (std::size_t ch = 0; ch < 3; ++ch) {
        double v = colour[c][ch] + tex + spec.noise * look.normal();
        if (spec.shift_enabled) v = spec.shift_gain[ch] * v + spec.shift_bias[ch];
        sample.image[ch * hw + p] = quantize(v);
      }
    }
    out.push_back(std::move(sample));
  }
  return out;
}

namespace {

const std::vector<Rgb>& base_palette() {
  static const std::vector<Rgb> p = {
      {0.55, 0.55, 0.55},  // impervious surface
      {0.75, 0.35, 0.30},  // building
      {0.45, 0.70, 0.35},  // low vegetation
      {0.15, 0.45, 0.15},  // tree
      {0.90, 0.85, 0.20},  // car
      {0.60, 0.20, 0.60},  // clutter
  };
  return p;
}

DomainSpec make_domain(const std::string& name, DomainRole role, std::size_t index,
                       std::vector<std::uint8_t> classes, std::size_t h, std::size_t w) {
  DomainSpec d;
  d.name = name;
  d.role = role;
  d.source_index = index;
  d.classes = std::move(classes);
  d.num_union = 6;
  d.palette = base_palette();
  d.texture = {0.05, 0.04, 0.06, 0.10, 0.0, 0.12};
  d.height = h;
  d.width = w;
  return d;
}

void perturb_palette(DomainSpec& d, const std::vector<Rgb>& delta) {
  for (std::size_t c = 0; c < d.palette.size(); ++c) {
    for (std::size_t ch = 0; ch < 3; ++ch) d.palette[c][ch] += delta[c][ch];
  }
}

}  // namespace

Scenario scenario_preset(const std::string& name, std::size_t h, std::size_t w) {
  Scenario s;
  s.name = name;
  s.num_union = 6;
  // Per-domain palette offsets and global colour shifts. The target shift is
  // the largest, so unadapted source models confuse several classes.
  const std::vector<Rgb> d1 = {{0.05, 0.00, -0.05}, {0.05, 0.00, 0.00}, {0.00, 0.05, 0.00},
                               {0.00, 0.00, 0.05},  {0.00, 0.00, 0.00}, {0.05, 0.05, 0.00}};
  const std::vector<Rgb> d2 = {{-0.05, 0.00, 0.05}, {0.00, 0.05, 0.05}, {0.05, 0.00, 0.05},
                               {0.05, 0.05, 0.00},  {-0.05, 0.00, 0.00}, {0.00, 0.00, 0.05}};
  const std::vector<Rgb> d3 = {{0.00, 0.05, 0.00}, {-0.05, 0.00, 0.05}, {0.00, -0.05, 0.05},
                               {0.05, 0.00, 0.05}, {0.00, -0.05, 0.05}, {-0.05, 0.05, 0.00}};
  const std::vector<Rgb> dt = {{0.10, 0.00, -0.10}, {-0.15, 0.10, 0.10}, {0.10, -0.10, 0.00},
                               {0.15, 0.15, 0.05},  {-0.20, -0.05, 0.10}, {0.05, 0.15, -0.10}};

  auto source = [&](std::size_t idx, std::vector<std::uint8_t> classes) {
    DomainSpec d = make_domain("source" + std::to_string(idx), DomainRole::source, idx,
                               std::move(classes), h, w);
    const auto& delta = idx == 1 ? d1 : idx == 2 ? d2 : d3;
    perturb_palette(d, delta);
    if (idx == 1) {
      d.shift_gain = {1.05, 0.95, 1.0};
      d.shift_bias = {0.0, 0.02, -0.02};
    } else if (idx == 2) {
      d.shift_gain = {0.9, 1.05, 1.1};
      d.shift_bias = {0.03, 0.0, 0.0};
      d.texture = {0.08, 0.02, 0.04, 0.12, 0.02, 0.10};
    } else {
      d.shift_gain = {1.0, 1.1, 0.9};
      d.shift_bias = {-0.02, 0.0, 0.03};
    }
    return d;
  };

  std::vector<std::uint8_t> target_classes;
  if (name == "equality2") {
    s.sources = {source(1, {0, 1, 2, 4, 5}), source(2, {0, 1, 2, 3, 5})};
    target_classes = {0, 1, 2, 3, 4, 5};
  } else if (name == "equality3") {
    s.sources = {source(1, {0, 1, 2, 4, 5}), source(2, {0, 1, 2, 3, 5}), source(3, {0, 1, 2, 3, 4})};
    target_classes = {0, 1, 2, 3, 4, 5};
  } else if (name == "inclusion2") {
    s.sources = {source(1, {0, 1, 2, 4, 5}), source(2, {0, 1, 2, 3, 5})};
    target_classes = {0, 1, 2, 3, 4};
  } else {
    throw std::invalid_argument("unknown scenario preset: " + name);
  }
  s.target_classes = target_classes;
  s.target = make_domain("target", DomainRole::target, 0, target_classes, h, w);
  perturb_palette(s.target, dt);
  s.target.shift_gain = {0.8, 1.1, 1.25};
  s.target.shift_bias = {0.08, -0.05, -0.05};
  s.target.texture = {0.10, 0.06, 0.08, 0.06, 0.04, 0.10};
  s.target.noise = 0.04;
  return s;
}

std::vector<DomainSpec> scenario_presets(const std::string& name) {
  Scenario s = scenario_preset(name);
  std::vector<DomainSpec> out = s.sources;
  out.push_back(s.target);
  return out;
}

// ---------------------------------------------------------------------------
// Netpbm

namespace {

struct PnmHeader {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t maxval = 0;
  std::size_t data_offset = 0;
};

PnmHeader parse_pnm_header(const std::string& bytes, const char* magic) {
  if (bytes.size() < 2 || bytes.compare(0, 2, magic) != 0) {
    throw ParseError(std::string("expected netpbm magic ") + magic, 0);
  }
  std::size_t pos = 2;
  auto next_number = [&]() -> std::size_t {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    if (pos >= bytes.size()) throw ParseError("truncated netpbm header", pos);
    if (!std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      throw ParseError("malformed netpbm header field", pos);
    }
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (1u << 24)) throw ParseError("netpbm header value too large", pos);
      ++pos;
    }
    return v;
  };
  PnmHeader h;
  h.width = next_number();
  h.height = next_number();
  h.maxval = next_number();
  if (h.width == 0 || h.height == 0) throw ParseError("netpbm image has zero size", pos);
  if (h.maxval != 255) throw ParseError("only 8-bit netpbm (maxval 255) is supported", pos);
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw ParseError("missing whitespace after netpbm header", pos);
  }
  h.data_offset = pos + 1;
  return h;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

std::string encode_ppm(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("encode_ppm expects 3×H×W, got " + shape_str(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2), hw = h * w;
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + 3 * hw);
  for (std::size_t p = 0; p < hw; ++p) {
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double v = std::clamp(image[ch * hw + p], 0.0, 1.0);
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
  }
  return out;
}

Tensor decode_ppm(const std::string& bytes) {
  const PnmHeader hd = parse_pnm_header(bytes, "P6");
  const std::size_t hw = hd.width * hd.height;
  if (bytes.size() - hd.data_offset < 3 * hw) throw ParseError("truncated PPM pixel data", bytes.size());
  Tensor image(Shape{3, hd.height, hd.width});
  for (std::size_t p = 0; p < hw; ++p) {
    for (std::size_t ch = 0; ch < 3; ++ch) {
      image[ch * hw + p] = static_cast<unsigned char>(bytes[hd.data_offset + 3 * p + ch]) / 255.0;
    }
  }
  return image;
}

std::string encode_pgm(const LabelMap& label) {
  if (label.batch != 1) throw DimensionError("encode_pgm expects a one-sample label map");
  std::string out = "P5\n" + std::to_string(label.width) + " " + std::to_string(label.height) + "\n255\n";
  out.append(label.values.begin(), label.values.end());
  return out;
}

LabelMap decode_pgm(const std::string& bytes) {
  const PnmHeader hd = parse_pnm_header(bytes, "P5");
  const std::size_t hw = hd.width * hd.height;
  if (bytes.size() - hd.data_offset < hw) throw ParseError("truncated PGM pixel data", bytes.size());
  LabelMap label(1, hd.height, hd.width);
  for (std::size_t p = 0; p < hw; ++p) {
    label.values[p] = static_cast<std::uint8_t>(bytes[hd.data_offset + p]);
  }
  return label;
}

// ---------------------------------------------------------------------------
// Dataset layout

namespace {

std::string role_name(DomainRole r) { return r == DomainRole::source ? "source" : "target"; }

DomainRole parse_role(const std::string& s) {
  if (s == "source") return DomainRole::source;
  if (s == "target") return DomainRole::target;
  throw std::runtime_error("unknown domain role " + s);
}

void write_manifest(const fs::path& dir, const DomainSpec& domain, std::size_t count, bool labels) {
  json m;
  m["name"] = domain.name;
  m["role"] = role_name(domain.role);
  m["source_index"] = domain.source_index;
  m["classes"] = domain.classes;
  m["count"] = count;
  m["height"] = domain.height;
  m["width"] = domain.width;
  m["labels"] = labels;
  write_file(dir / "manifest.json", m.dump(2) + "\n");
}

void write_images(const fs::path& root, const DomainSpec& domain, const std::vector<Tensor>& images) {
  const fs::path dir = root / domain.name;
  fs::create_directories(dir / "images");
  for (std::size_t i = 0; i < images.size(); ++i) {
    write_file(dir / "images" / (std::to_string(i) + ".ppm"), encode_ppm(images[i]));
  }
  write_manifest(dir, domain, images.size(), false);
}

}  // namespace

void write_dataset(const fs::path& root, const DomainSpec& domain, const std::vector<SceneSample>& samples) {
  const fs::path dir = root / domain.name;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "labels");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    write_file(dir / "images" / (std::to_string(i) + ".ppm"), encode_ppm(samples[i].image));
    write_file(dir / "labels" / (std::to_string(i) + ".pgm"), encode_pgm(samples[i].label));
  }
  write_manifest(dir, domain, samples.size(), true);
}

DomainManifest read_manifest(const fs::path& root, const std::string& domain) {
  const json m = json::parse(read_file(root / domain / "manifest.json"));
  DomainManifest out;
  out.name = m.at("name").get<std::string>();
  out.role = parse_role(m.at("role").get<std::string>());
  out.source_index = m.at("source_index").get<std::size_t>();
  out.classes = m.at("classes").get<std::vector<std::uint8_t>>();
  out.count = m.at("count").get<std::size_t>();
  out.height = m.at("height").get<std::size_t>();
  out.width = m.at("width").get<std::size_t>();
  return out;
}

std::vector<Tensor> read_images(const fs::path& root, const std::string& domain) {
  const DomainManifest m = read_manifest(root, domain);
  std::vector<Tensor> out;
  out.reserve(m.count);
  for (std::size_t i = 0; i < m.count; ++i) {
    out.push_back(decode_ppm(read_file(root / domain / "images" / (std::to_string(i) + ".ppm"))));
  }
  return out;
}

std::vector<SceneSample> read_dataset(const fs::path& root, const std::string& domain) {
  const DomainManifest m = read_manifest(root, domain);
  std::vector<SceneSample> out;
  out.reserve(m.count);
  for (std::size_t i = 0; i < m.count; ++i) {
    const std::string idx = std::to_string(i);
    out.push_back({decode_ppm(read_file(root / domain / "images" / (idx + ".ppm"))),
                   decode_pgm(read_file(root / domain / "labels" / (idx + ".pgm")))});
  }
  return out;
}

void write_scenario_file(const fs::path& root, const Scenario& scenario) {
  json s;
  s["name"] = scenario.name;
  s["num_union"] = scenario.num_union;
  s["target_classes"] = scenario.target_classes;
  json sources = json::array();
  for (const auto& d : scenario.sources) sources.push_back({{"name", d.name}, {"classes", d.classes}});
  s["sources"] = sources;
  s["target_train"] = "target";
  s["target_test"] = "target_test";
  s["height"] = scenario.target.height;
  s["width"] = scenario.target.width;
  fs::create_directories(root);
  write_file(root / "scenario.json", s.dump(2) + "\n");
}

Scenario read_scenario_file(const fs::path& root) {
  const json s = json::parse(read_file(root / "scenario.json"));
  Scenario out;
  out.name = s.at("name").get<std::string>();
  out.num_union = s.at("num_union").get<std::size_t>();
  out.target_classes = s.at("target_classes").get<std::vector<std::uint8_t>>();
  const auto h = s.at("height").get<std::size_t>(), w = s.at("width").get<std::size_t>();
  std::size_t idx = 1;
  for (const auto& src : s.at("sources")) {
    DomainSpec d;
    d.name = src.at("name").get<std::string>();
    d.role = DomainRole::source;
    d.source_index = idx++;
    d.classes = src.at("classes").get<std::vector<std::uint8_t>>();
    d.num_union = out.num_union;
    d.height = h;
    d.width = w;
    out.sources.push_back(std::move(d));
  }
  out.target.name = "target";
  out.target.role = DomainRole::target;
  out.target.classes = out.target_classes;
  out.target.num_union = out.num_union;
  out.target.height = h;
  out.target.width = w;
  return out;
}

ScenarioData generate_scenario(const Scenario& scenario, const DataSizes& sizes, std::uint64_t seed) {
  ScenarioData data;
  data.scenario = scenario;
  const Rng root(seed);
  for (std::size_t i = 0; i < scenario.sources.size(); ++i) {
    data.sources.push_back(generate_domain(scenario.sources[i], sizes.per_source, root.fork(i + 1).seed()));
  }
  for (auto& s : generate_domain(scenario.target, sizes.target_train, root.fork(100).seed())) {
    data.target_train.push_back(std::move(s.image));
  }
  data.target_test = generate_domain(scenario.target, sizes.target_test, root.fork(101).seed());
  return data;
}

void write_scenario(const fs::path& root, const ScenarioData& data) {
  write_scenario_file(root, data.scenario);
  for (std::size_t i = 0; i < data.sources.size(); ++i) {
    write_dataset(root, data.scenario.sources[i], data.sources[i]);
  }
  write_images(root, data.scenario.target, data.target_train);
  DomainSpec test = data.scenario.target;
  test.name = "target_test";
  write_dataset(root, test, data.target_test);
}

ScenarioData read_scenario(const fs::path& root) {
  ScenarioData data;
  data.scenario = read_scenario_file(root);
  for (const auto& d : data.scenario.sources) data.sources.push_back(read_dataset(root, d.name));
  data.target_train = read_images(root, "target");
  data.target_test = read_dataset(root, "target_test");
  return data;
}

}  // namespace mscada
