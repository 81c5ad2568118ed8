#include "mscada/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "mscada/kernels.hpp"
#include "mscada/ops.hpp"

namespace mscada {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ContractError(std::string(name) + " must be positive");
  };
  positive(lr_backbone, "lr_backbone");
  positive(lr_head, "lr_head");
  if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ContractError("alpha and beta must be non-negative");
  if (!(tau > 0.0 && tau < 1.0)) throw ContractError("tau must be in (0, 1)");
  if (!(class_ratio > 0.0 && class_ratio <= 1.0)) throw ContractError("class_ratio must be in (0, 1]");
  if (!(region_ratio > 0.0 && region_ratio < 1.0)) throw ContractError("region_ratio must be in (0, 1)");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ContractError("ema_decay must be in [0, 1)");
  if (!(colour_jitter >= 0.0 && colour_jitter < 1.0)) throw ContractError("colour_jitter must be in [0, 1)");
  if (iterations == 0 || batch_size == 0) throw ContractError("iterations and batch_size must be positive");
  if (eval_every == 0) throw ContractError("eval_every must be positive");
  if (best_expert && summation_fusion) throw ContractError("best_expert and summation_fusion are exclusive");
  if (combined_source && (disable_hgcn || best_expert || summation_fusion)) {
    throw ContractError("combined_source has a single branch and no integration head");
  }
  if (image_size % head_pool != 0) throw ContractError("image_size must be divisible by head_pool");
}

FusionMode TrainConfig::fusion() const {
  if (best_expert) return FusionMode::best_expert;
  if (summation_fusion) return FusionMode::summation;
  return FusionMode::winner_take_all;
}

ModelConfig TrainConfig::model_config(const Scenario& scenario) const {
  ModelConfig m;
  m.num_sources = combined_source ? 1 : scenario.sources.size();
  m.backbone_channels = backbone_channels;
  m.backbone_depth = backbone_depth;
  m.expert_channels = N_f;
  m.num_union_classes = scenario.num_union;
  m.num_target_classes = scenario.target_classes.size();
  m.height = scenario.target.height;
  m.width = scenario.target.width;
  m.ema_decay = ema_decay;
  m.head_pool = head_pool;
  m.spatial_width = spatial_width;
  m.spatial_neighbors = K_s;
  m.feature_neighbors = K_f;
  m.head = combined_source ? HeadKind::none : disable_hgcn ? HeadKind::linear : HeadKind::hypergraph;
  return m;
}

namespace {

std::pair<std::size_t, std::size_t> line_column(const std::string& text, std::size_t offset) {
  offset = std::min(offset, text.size());
  std::size_t line = 1, column = 1;
  for (std::size_t i = 0; i < offset; ++i) {
    if (text[i] == '\n') {
      ++line;
      column = 1;
    } else {
      ++column;
    }
  }
  return {line, column};
}

// Position of a key in the source text, for error messages.
std::pair<std::size_t, std::size_t> key_position(const std::string& text, const std::string& key) {
  const auto at = text.find("\"" + key + "\"");
  return at == std::string::npos ? std::pair<std::size_t, std::size_t>{1, 1} : line_column(text, at);
}

template <typename T>
void read_field(const json& j, const std::string& text, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    const auto [line, col] = key_position(text, key);
    throw ConfigError("config field '" + std::string(key) + "' has the wrong type", line, col);
  }
}

}  // namespace

TrainConfig parse_train_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    // e.byte is the 1-based offset of the offending character.
    const auto [line, col] = line_column(text, e.byte == 0 ? 0 : e.byte - 1);
    throw ConfigError("config is not valid JSON", line, col);
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object", 1, 1);
  TrainConfig c;
  static const std::vector<std::string> known = {
      "scenario", "data", "iterations", "batch_size", "lr_backbone", "lr_head", "alpha", "beta", "tau",
      "class_ratio", "region_ratio", "ema_decay", "K_s", "K_f", "N_f", "backbone_channels",
      "backbone_depth", "head_pool", "spatial_width", "image_size", "seed", "disable_mixing",
      "disable_hgcn", "combined_source", "best_expert", "summation_fusion", "strong_transform", "colour_jitter",
      "eval_teacher", "eval_every", "checkpoint_every"};
  for (const auto& item : j.items()) {
    if (std::find(known.begin(), known.end(), item.key()) == known.end()) {
      const auto [line, col] = key_position(text, item.key());
      throw ConfigError("unknown config field '" + item.key() + "'", line, col);
    }
  }
  read_field(j, text, "scenario", c.scenario);
  read_field(j, text, "data", c.data);
  read_field(j, text, "iterations", c.iterations);
  read_field(j, text, "batch_size", c.batch_size);
  read_field(j, text, "lr_backbone", c.lr_backbone);
  read_field(j, text, "lr_head", c.lr_head);
  read_field(j, text, "alpha", c.alpha);
  read_field(j, text, "beta", c.beta);
  read_field(j, text, "tau", c.tau);
  read_field(j, text, "class_ratio", c.class_ratio);
  read_field(j, text, "region_ratio", c.region_ratio);
  read_field(j, text, "ema_decay", c.ema_decay);
  read_field(j, text, "K_s", c.K_s);
  read_field(j, text, "K_f", c.K_f);
  read_field(j, text, "N_f", c.N_f);
  read_field(j, text, "backbone_channels", c.backbone_channels);
  read_field(j, text, "backbone_depth", c.backbone_depth);
  read_field(j, text, "head_pool", c.head_pool);
  read_field(j, text, "spatial_width", c.spatial_width);
  read_field(j, text, "image_size", c.image_size);
  read_field(j, text, "seed", c.seed);
  read_field(j, text, "disable_mixing", c.disable_mixing);
  read_field(j, text, "disable_hgcn", c.disable_hgcn);
  read_field(j, text, "combined_source", c.combined_source);
  read_field(j, text, "best_expert", c.best_expert);
  read_field(j, text, "summation_fusion", c.summation_fusion);
  read_field(j, text, "strong_transform", c.strong_transform);
  read_field(j, text, "colour_jitter", c.colour_jitter);
  read_field(j, text, "eval_teacher", c.eval_teacher);
  read_field(j, text, "eval_every", c.eval_every);
  read_field(j, text, "checkpoint_every", c.checkpoint_every);
  return c;
}

TrainConfig load_train_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  return parse_train_config({std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()});
}

std::string dump_train_config(const TrainConfig& c) {
  json j;
  j["scenario"] = c.scenario;
  j["data"] = c.data;
  j["iterations"] = c.iterations;
  j["batch_size"] = c.batch_size;
  j["lr_backbone"] = c.lr_backbone;
  j["lr_head"] = c.lr_head;
  j["alpha"] = c.alpha;
  j["beta"] = c.beta;
  j["tau"] = c.tau;
  j["class_ratio"] = c.class_ratio;
  j["region_ratio"] = c.region_ratio;
  j["ema_decay"] = c.ema_decay;
  j["K_s"] = c.K_s;
  j["K_f"] = c.K_f;
  j["N_f"] = c.N_f;
  j["backbone_channels"] = c.backbone_channels;
  j["backbone_depth"] = c.backbone_depth;
  j["head_pool"] = c.head_pool;
  j["spatial_width"] = c.spatial_width;
  j["image_size"] = c.image_size;
  j["seed"] = c.seed;
  j["disable_mixing"] = c.disable_mixing;
  j["disable_hgcn"] = c.disable_hgcn;
  j["combined_source"] = c.combined_source;
  j["best_expert"] = c.best_expert;
  j["summation_fusion"] = c.summation_fusion;
  j["strong_transform"] = c.strong_transform;
  j["colour_jitter"] = c.colour_jitter;
  j["eval_teacher"] = c.eval_teacher;
  j["eval_every"] = c.eval_every;
  j["checkpoint_every"] = c.checkpoint_every;
  return j.dump(2) + "\n";
}

const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names = {"full",           "no-mixing",   "no-hgcn",
                                                 "combined-source", "best-expert", "summation"};
  return names;
}

void apply_ablation(TrainConfig& c, const std::string& name) {
  if (name == "full") return;
  if (name == "no-mixing") {
    c.disable_mixing = true;
  } else if (name == "no-hgcn") {
    c.disable_hgcn = true;
  } else if (name == "combined-source") {
    c.combined_source = true;
  } else if (name == "best-expert") {
    c.best_expert = true;
  } else if (name == "summation") {
    c.summation_fusion = true;
  } else {
    throw std::invalid_argument("unknown ablation '" + name + "'");
  }
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(const std::vector<Parameter>& params, AdamOptions options)
    : params_(params), options_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(p.var.size(), 0.0);
    v_.emplace_back(p.var.size(), 0.0);
  }
}

double Adam::rate(ParamGroup group) const {
  return group == ParamGroup::backbone ? options_.lr_backbone : options_.lr_head;
}

void Adam::step() {
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  last_rates_.clear();
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Node* node = params_[i].var.node();
    const double lr = rate(params_[i].group);
    last_rates_.emplace_back(params_[i].name, lr);
    if (!node->has_grad()) continue;
    auto& value = node->value;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < m.size(); ++j) {
      const double g = node->grad[j];
      m[j] = b1 * m[j] + (1.0 - b1) * g;
      v[j] = b2 * v[j] + (1.0 - b2) * g * g;
      const double m_hat = m[j] / c1, v_hat = v[j] / c2;
      value[j] -= lr * m_hat / (std::sqrt(v_hat) + options_.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Metrics

void ConfusionMatrix::add(std::uint8_t truth, std::uint8_t predicted) {
  if (truth == kIgnoreLabel) return;
  if (truth >= n_ || predicted >= n_) {
    throw InvalidLabelError("confusion entry (" + std::to_string(truth) + ", " +
                            std::to_string(predicted) + ") outside " + std::to_string(n_) + " classes");
  }
  ++counts_[truth * n_ + predicted];
}

void ConfusionMatrix::add(const LabelMap& truth, const LabelMap& predicted) {
  if (truth.values.size() != predicted.values.size()) {
    throw DimensionError("confusion: label maps differ in size");
  }
  for (std::size_t i = 0; i < truth.values.size(); ++i) add(truth.values[i], predicted.values[i]);
}

MetricsReport metrics_from_confusion(const ConfusionMatrix& cm) {
  MetricsReport r;
  r.confusion = cm;
  const std::size_t n = cm.classes();
  double iou_sum = 0.0, f1_sum = 0.0;
  std::size_t iou_count = 0, f1_count = 0;
  for (std::size_t c = 0; c < n; ++c) {
    std::uint64_t tp = cm.at(c, c), fp = 0, fn = 0;
    for (std::size_t o = 0; o < n; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    const std::uint64_t union_count = tp + fp + fn;
    if (union_count == 0) {
      r.iou.emplace_back();
      r.f1.emplace_back();
      continue;
    }
    const double iou = static_cast<double>(tp) / static_cast<double>(union_count);
    const double f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    r.iou.emplace_back(iou);
    r.f1.emplace_back(f1);
    iou_sum += iou;
    f1_sum += f1;
    ++iou_count;
    ++f1_count;
  }
  r.miou = iou_count ? iou_sum / static_cast<double>(iou_count) : 0.0;
  r.mf1 = f1_count ? f1_sum / static_cast<double>(f1_count) : 0.0;
  return r;
}

std::string format_report(const MetricsReport& r, const ClassRegistry& registry) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "iteration " << r.iteration << "\n";
  for (std::size_t c = 0; c < r.iou.size(); ++c) {
    os << "class " << static_cast<int>(registry.to_union(static_cast<std::uint8_t>(c))) << "  IoU ";
    if (r.iou[c]) {
      os << *r.iou[c] << "  F1 " << *r.f1[c];
    } else {
      os << "n/a";
    }
    os << "\n";
  }
  os << "mIoU " << r.miou << "\nmF1 " << r.mf1 << "\n";
  return os.str();
}

namespace {

Tensor stack_images(const std::vector<const Tensor*>& images) {
  const Shape& s = images.front()->shape();
  Tensor out(Shape{images.size(), s[0], s[1], s[2]});
  const std::size_t n = images.front()->size();
  for (std::size_t b = 0; b < images.size(); ++b) {
    std::copy(images[b]->data().begin(), images[b]->data().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(b * n));
  }
  return out;
}

Tensor sample_of(const Tensor& batch, std::size_t b) {
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  Tensor out(s);
  const std::size_t n = out.size();
  std::copy_n(batch.data().begin() + static_cast<std::ptrdiff_t>(b * n), n, out.storage().begin());
  return out;
}

// Argmax over the listed channels of B×C×H×W logits; returns the list index.
LabelMap argmax_over(const Tensor& logits, const std::vector<std::uint8_t>& channels) {
  const std::size_t batch = logits.dim(0), classes = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  const std::size_t hw = h * w;
  LabelMap out(batch, h, w);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* z = logits.data().data() + b * classes * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < channels.size(); ++i) {
        if (z[channels[i] * hw + p] > z[channels[best] * hw + p]) best = i;
      }
      out.values[b * hw + p] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

constexpr std::size_t kEvalChunk = 10;

}  // namespace

LabelMap predict_target(const MultiBranchModel& model, const Tensor& images, const ClassRegistry& registry) {
  NoGradGuard no_grad;
  const Var x = Var::leaf(images);
  if (model.config().head != HeadKind::none) {
    const Tensor logits = model.forward_head(x).value();
    std::vector<std::uint8_t> all(logits.dim(1));
    for (std::size_t c = 0; c < all.size(); ++c) all[c] = static_cast<std::uint8_t>(c);
    return argmax_over(logits, all);
  }
  // Single-branch model: union-space logits restricted to the target classes.
  return argmax_over(model.forward_branch(0, x).value(), registry.target_classes());
}

MetricsReport evaluate(const MultiBranchModel& model, const std::vector<SceneSample>& test,
                       const ClassRegistry& registry) {
  const auto start = std::chrono::steady_clock::now();
  ConfusionMatrix cm(registry.num_target());
  for (std::size_t begin = 0; begin < test.size(); begin += kEvalChunk) {
    const std::size_t end = std::min(test.size(), begin + kEvalChunk);
    std::vector<const Tensor*> images;
    std::vector<LabelMap> labels;
    for (std::size_t i = begin; i < end; ++i) {
      images.push_back(&test[i].image);
      labels.push_back(test[i].label);
    }
    const LabelMap predicted = predict_target(model, stack_images(images), registry);
    cm.add(registry.remap_to_target(LabelMap::stack(labels)), predicted);
  }
  MetricsReport r = metrics_from_confusion(cm);
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

std::vector<std::vector<double>> expert_class_fractions(const MultiBranchModel& model,
                                                        const std::vector<SceneSample>& test) {
  NoGradGuard no_grad;
  const std::size_t k = model.num_sources(), classes = model.config().num_union_classes;
  std::vector<std::vector<std::uint64_t>> counts(k, std::vector<std::uint64_t>(classes, 0));
  std::uint64_t total = 0;
  for (std::size_t begin = 0; begin < test.size(); begin += kEvalChunk) {
    const std::size_t end = std::min(test.size(), begin + kEvalChunk);
    std::vector<const Tensor*> images;
    for (std::size_t i = begin; i < end; ++i) images.push_back(&test[i].image);
    const auto logits = model.forward_all_branches(Var::leaf(stack_images(images)));
    for (std::size_t i = 0; i < k; ++i) {
      const LabelMap pred = argmax_labels(logits[i].value());
      for (auto v : pred.values) ++counts[i][v];
      if (i == 0) total += pred.values.size();
    }
  }
  std::vector<std::vector<double>> out(k, std::vector<double>(classes, 0.0));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t c = 0; c < classes; ++c) {
      out[i][c] = static_cast<double>(counts[i][c]) / static_cast<double>(total);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

std::vector<Var> supervised_losses(const MultiBranchModel& model, const std::vector<SourceBatch>& batches) {
  if (batches.size() != model.num_sources()) {
    throw ContractError("supervised_losses: " + std::to_string(batches.size()) + " batches for " +
                        std::to_string(model.num_sources()) + " branches");
  }
  std::vector<Var> out;
  for (std::size_t i = 0; i < batches.size(); ++i) {
    out.push_back(cross_entropy(model.forward_branch(i, Var::leaf(batches[i].images)), batches[i].labels));
  }
  return out;
}

TrainState init_train_state(const TrainConfig& config, const Scenario& scenario) {
  config.validate();
  TrainState s;
  s.config = config;
  s.registry = ClassRegistry(scenario.num_union, scenario.target_classes);
  const Rng root(config.seed);
  s.student = MultiBranchModel::init(config.model_config(scenario), root.fork(1).seed());
  s.teacher = EmaTeacher(s.student);
  s.optimizer = Adam(s.student.parameters(), AdamOptions{config.lr_backbone, config.lr_head});
  s.rng = root.fork(2);
  return s;
}

StepBatches sample_batches(TrainState& state, const ScenarioData& data) {
  const std::size_t bs = state.config.batch_size;
  StepBatches out;
  auto draw = [&](const std::vector<const SceneSample*>& pool) {
    std::vector<const Tensor*> images;
    std::vector<LabelMap> labels;
    for (std::size_t b = 0; b < bs; ++b) {
      const SceneSample* s = pool[state.rng.index(pool.size())];
      images.push_back(&s->image);
      labels.push_back(s->label);
    }
    return SourceBatch{stack_images(images), LabelMap::stack(labels)};
  };
  if (state.config.combined_source) {
    std::vector<const SceneSample*> pool;
    for (const auto& domain : data.sources) {
      for (const auto& s : domain) pool.push_back(&s);
    }
    out.sources.push_back(draw(pool));
  } else {
    for (const auto& domain : data.sources) {
      std::vector<const SceneSample*> pool;
      for (const auto& s : domain) pool.push_back(&s);
      out.sources.push_back(draw(pool));
    }
  }
  std::vector<const Tensor*> target;
  for (std::size_t b = 0; b < bs; ++b) target.push_back(&data.target_train[state.rng.index(data.target_train.size())]);
  out.target = stack_images(target);
  return out;
}

namespace {

Var sum_all(const std::vector<Var>& terms) {
  Var acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

std::size_t pick_donor(std::size_t i, std::size_t k, Rng& rng) {
  if (k == 2) return 1 - i;
  std::size_t j = rng.index(k - 1);
  return j >= i ? j + 1 : j;
}

}  // namespace

LossBreakdown train_step(TrainState& state, const StepBatches& batches) {
  const TrainConfig& cfg = state.config;
  MultiBranchModel& student = state.student;
  const std::size_t k = student.num_sources();
  const std::size_t bs = batches.target.dim(0), h = batches.target.dim(2), w = batches.target.dim(3);

  // Teacher predictions on the clean target batch.
  std::vector<Tensor> teacher_logits;
  {
    NoGradGuard no_grad;
    for (auto& v : state.teacher.model().forward_all_branches(Var::leaf(batches.target))) {
      teacher_logits.push_back(v.value());
    }
  }

  const std::vector<Var> sup_terms = supervised_losses(student, batches.sources);
  const Var l_sup = sum_all(sup_terms);

  Var l_ssl = Var::leaf(Tensor::scalar(0.0));
  if (!cfg.disable_mixing && k >= 2) {
    std::vector<Var> terms;
    for (std::size_t i = 0; i < k; ++i) {
      const SourceBatch& src = batches.sources[i];
      const std::size_t j = pick_donor(i, k, state.rng);
      const LabelMap donor = argmax_labels(teacher_logits[j]);
      std::vector<MixMask> masks;
      for (std::size_t b = 0; b < bs; ++b) {
        masks.push_back(b < (bs + 1) / 2 ? make_class_mask(src.labels.sample(b), cfg.class_ratio, state.rng)
                                         : make_region_mask(h, w, cfg.region_ratio, state.rng));
      }
      MixedBatch mixed = apply_mix(src.images, src.labels, batches.target, donor, masks);
      mixed.weights = confidence_weight_map(teacher_logits[i], masks, cfg.tau);
      terms.push_back(branch_ssl_loss(student, i, mixed));
    }
    l_ssl = sum_all(terms);
  }

  Var l_ssl_m = Var::leaf(Tensor::scalar(0.0));
  if (student.config().head != HeadKind::none) {
    const FusedPrediction fused = fuse_predictions(teacher_logits, cfg.fusion());
    const LabelMap pseudo = state.registry.remap_to_target(class_filter(fused.labels, state.registry));
    const Tensor gate = confidence_gate(fused.confidence, cfg.tau);
    std::vector<Tensor> strong;
    std::vector<LabelMap> labels;
    Tensor weights(Shape{bs, h, w});
    StrongTransformParams strong_params;
    strong_params.gain_min = 1.0 - cfg.colour_jitter;
    strong_params.gain_max = 1.0 + cfg.colour_jitter;
    strong_params.bias_max = cfg.colour_jitter / 2;
    for (std::size_t b = 0; b < bs; ++b) {
      const StrongTransform t = cfg.strong_transform
                                    ? StrongTransform::sample(h, w, strong_params, state.rng)
                                    : StrongTransform::identity(h, w);
      strong.push_back(apply_strong_transform(t, sample_of(batches.target, b)));
      const TransformedTargets tt = trans_labels(t, pseudo.sample(b), sample_of(gate, b));
      labels.push_back(tt.labels);
      std::copy(tt.weights.data().begin(), tt.weights.data().end(),
                weights.storage().begin() + static_cast<std::ptrdiff_t>(b * h * w));
    }
    std::vector<const Tensor*> ptrs;
    for (const auto& s : strong) ptrs.push_back(&s);
    const Var logits = student.forward_head(Var::leaf(stack_images(ptrs)));
    l_ssl_m = masked_weighted_cross_entropy(logits, LabelMap::stack(labels), weights);
  }

  const Var total = add(l_sup, add(scale(l_ssl, cfg.alpha), scale(l_ssl_m, cfg.beta)));
  LossBreakdown lb{l_sup.value().item(), l_ssl.value().item(), l_ssl_m.value().item(), total.value().item()};
  if (!std::isfinite(lb.total)) {
    std::ostringstream os;
    os << std::setprecision(17) << "non-finite loss at iteration " << state.iteration + 1 << ": sup=" << lb.sup
       << " ssl=" << lb.ssl << " sslM=" << lb.ssl_m << " total=" << lb.total;
    for (std::size_t i = 0; i < sup_terms.size(); ++i) os << " sup[" << i << "]=" << sup_terms[i].value().item();
    throw NonFiniteLossError(os.str(), lb);
  }

  for (const auto& p : student.parameters()) p.var.node()->grad.clear();
  total.backward();
  state.optimizer.step();
  state.teacher.update(student, cfg.ema_decay);
  ++state.iteration;
  return lb;
}

std::vector<NamedTensor> checkpoint_entries(const TrainState& state) {
  std::vector<NamedTensor> out;
  for (auto& e : state.student.state()) out.push_back({"student." + e.name, std::move(e.tensor)});
  for (auto& e : state.teacher.model().state()) out.push_back({"teacher." + e.name, std::move(e.tensor)});
  out.push_back({"iteration", Tensor::scalar(static_cast<double>(state.iteration))});
  return out;
}

MultiBranchModel load_student(const TrainConfig& config, const Scenario& scenario, const fs::path& checkpoint) {
  MultiBranchModel model = MultiBranchModel::init(config.model_config(scenario), 0);
  std::vector<NamedTensor> student;
  for (auto& e : load_checkpoint(checkpoint)) {
    if (e.name.rfind("student.", 0) == 0) student.push_back({e.name.substr(8), std::move(e.tensor)});
  }
  model.load_state(student);
  return model;
}

ScenarioData load_or_generate(const TrainConfig& config) {
  if (!config.data.empty()) return read_scenario(config.data);
  return generate_scenario(scenario_preset(config.scenario, config.image_size, config.image_size), DataSizes{},
                           config.seed);
}

namespace {

std::string csv_number(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

RunResult run_training(const TrainConfig& config, const ScenarioData& data, const RunOptions& options) {
  RunResult result{init_train_state(config, data.scenario), {}, {}};
  TrainState& state = result.state;
  std::ofstream csv;
  if (!options.out.empty()) {
    fs::create_directories(options.out);
    std::ofstream(options.out / "config.json") << dump_train_config(config);
    csv.open(options.out / "metrics.csv");
    csv << "iter,loss_sup,loss_ssl,loss_sslM,mIoU,mF1\n";
  }
  LossBreakdown window;
  std::size_t window_size = 0;
  for (std::size_t it = 1; it <= config.iterations; ++it) {
    const StepBatches batches = sample_batches(state, data);
    const LossBreakdown lb = train_step(state, batches);
    result.losses.push_back(lb);
    window.sup += lb.sup;
    window.ssl += lb.ssl;
    window.ssl_m += lb.ssl_m;
    ++window_size;
    const bool last = it == config.iterations;
    if (it % config.eval_every == 0 || last) {
      const MultiBranchModel& eval_model = config.eval_teacher ? state.teacher.model() : state.student;
      MetricsReport report = evaluate(eval_model, data.target_test, state.registry);
      report.iteration = it;
      const double n = static_cast<double>(window_size);
      const LossBreakdown mean{window.sup / n, window.ssl / n, window.ssl_m / n, 0.0};
      if (csv.is_open()) {
        csv << it << ',' << csv_number(mean.sup) << ',' << csv_number(mean.ssl) << ','
            << csv_number(mean.ssl_m) << ',' << csv_number(report.miou) << ',' << csv_number(report.mf1) << '\n';
        csv.flush();
      }
      if (options.on_row) options.on_row(it, mean, &report);
      window = {};
      window_size = 0;
      if (last) result.final_report = report;
    }
    const bool checkpoint_now = config.checkpoint_every != 0 && it % config.checkpoint_every == 0;
    if (!options.out.empty() && (checkpoint_now || last)) {
      save_checkpoint(options.out / "model.msct", checkpoint_entries(state));
    }
  }
  return result;
}

void configure_threads_from_env() {
  if (const char* env = std::getenv("MSCADA_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || n < 1) {
      throw std::invalid_argument(std::string("MSCADA_THREADS must be a positive integer, got '") + env + "'");
    }
    kernels::set_num_threads(static_cast<int>(n));
  }
}

}  // namespace mscada
