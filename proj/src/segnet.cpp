#include "mscada/segnet.hpp"

#include <algorithm>
#include <unordered_map>

#include "mscada/ops.hpp"

namespace mscada {

void ModelConfig::validate() const {
  const std::size_t min_sources = head == HeadKind::none ? 1 : 2;
  if (num_sources < min_sources) {
    throw ContractError("model needs at least " + std::to_string(min_sources) + " sources");
  }
  if (num_target_classes == 0 || num_target_classes > num_union_classes) {
    throw ContractError("target classes must be in [1, union classes]");
  }
  if (height < 4 || width < 4) throw ContractError("input must be at least 4×4");
  if (backbone_depth == 0 || backbone_channels == 0 || expert_channels < 2) {
    throw ContractError("backbone depth/channels and expert channels must be positive");
  }
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ContractError("ema decay must be in [0, 1)");
  if (head_pool == 0 || height % head_pool || width % head_pool) {
    throw ContractError("head_pool must divide the input size");
  }
  if (head == HeadKind::hypergraph && (height / head_pool) * (width / head_pool) < 2) {
    throw ContractError("hypergraph head needs at least 2 pixels after pooling");
  }
  if (spatial_width == 0) throw ContractError("spatial_width must be positive");
}

std::size_t MultiBranchModel::head_classes() const { return config_.num_target_classes; }

MultiBranchModel MultiBranchModel::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  MultiBranchModel m;
  m.config_ = config;
  Rng rng(seed);
  auto conv = [&rng](std::size_t out, std::size_t in, std::size_t k) {
    const std::size_t fan_in = in * k * k;
    return ConvParams{Var::leaf(he_uniform(Shape{out, in, k, k}, fan_in, rng), true),
                      Var::leaf(Tensor(Shape{out}, 0.0), true)};
  };
  const std::size_t c = config.backbone_channels;
  const std::size_t nf = config.expert_channels;
  for (std::size_t d = 0; d < config.backbone_depth; ++d) {
    m.backbone_.push_back(conv(c, d == 0 ? 3 : c, 3));
  }
  for (std::size_t i = 0; i < config.num_sources; ++i) m.experts_.push_back(conv(nf, c, 3));
  for (std::size_t i = 0; i < config.num_sources; ++i) {
    m.classifiers_.push_back(conv(config.num_union_classes, nf, 1));
  }
  if (config.head != HeadKind::none) m.compressor_ = conv(nf, c, 3);
  if (config.head == HeadKind::hypergraph) {
    HeadConfig hc;
    hc.branches = config.num_sources + 1;
    hc.feature_channels = nf;
    hc.height = config.height / config.head_pool;
    hc.width = config.width / config.head_pool;
    hc.out_classes = config.num_target_classes;
    hc.spatial_width = config.spatial_width;
    hc.spatial_neighbors = config.spatial_neighbors;
    hc.feature_neighbors = config.feature_neighbors;
    m.hgcn_head_ = IntegrationHead(hc, rng);
  } else if (config.head == HeadKind::linear) {
    m.linear_head_ = conv(config.num_target_classes, nf * (config.num_sources + 1), 1);
  }
  m.register_params();
  return m;
}

void MultiBranchModel::register_params() {
  params_.clear();
  auto add = [this](const std::string& name, const ConvParams& p, ParamGroup g) {
    params_.push_back({name + ".w", p.w, g});
    params_.push_back({name + ".b", p.b, g});
  };
  for (std::size_t d = 0; d < backbone_.size(); ++d) {
    add("backbone.conv" + std::to_string(d), backbone_[d], ParamGroup::backbone);
  }
  for (std::size_t i = 0; i < experts_.size(); ++i) {
    add("expert." + std::to_string(i + 1), experts_[i], ParamGroup::head);
  }
  for (std::size_t i = 0; i < classifiers_.size(); ++i) {
    add("classifier." + std::to_string(i + 1), classifiers_[i], ParamGroup::head);
  }
  if (config_.head != HeadKind::none) add("compressor", compressor_, ParamGroup::head);
  if (config_.head == HeadKind::hypergraph) {
    for (auto& p : hgcn_head_.parameters("head.")) {
      params_.push_back({p.name, p.var, ParamGroup::head});
    }
  } else if (config_.head == HeadKind::linear) {
    add("head.linear", linear_head_, ParamGroup::head);
  }
}

void MultiBranchModel::check_source(std::size_t i) const {
  if (i >= config_.num_sources) {
    throw std::out_of_range("source branch " + std::to_string(i) + " out of range for " +
                            std::to_string(config_.num_sources) + " sources");
  }
}

Var MultiBranchModel::backbone(const Var& x) const {
  if (x.value().rank() != 4 || x.dim(1) != 3) {
    throw DimensionError("model input must be B×3×H×W, got " + shape_str(x.shape()));
  }
  Var h = x;
  for (const auto& layer : backbone_) h = relu(conv2d(h, layer.w, layer.b));
  return h;
}

Var MultiBranchModel::expert(std::size_t i, const Var& shared) const {
  check_source(i);
  return relu(conv2d(shared, experts_[i].w, experts_[i].b));
}

Var MultiBranchModel::classify(std::size_t i, const Var& expert_features) const {
  check_source(i);
  return conv2d(expert_features, classifiers_[i].w, classifiers_[i].b);
}

Var MultiBranchModel::compress(const Var& shared) const {
  if (config_.head == HeadKind::none) throw ContractError("model has no integration head");
  return relu(conv2d(shared, compressor_.w, compressor_.b));
}

Var MultiBranchModel::forward_branch(std::size_t i, const Var& x) const {
  check_source(i);
  return classify(i, expert(i, backbone(x)));
}

std::vector<Var> MultiBranchModel::forward_all_branches(const Var& x) const {
  Var shared = backbone(x);
  std::vector<Var> out;
  for (std::size_t i = 0; i < config_.num_sources; ++i) out.push_back(classify(i, expert(i, shared)));
  return out;
}

BranchFeatures MultiBranchModel::forward_features(const Var& x) const {
  Var shared = backbone(x);
  BranchFeatures f;
  for (std::size_t i = 0; i < config_.num_sources; ++i) f.experts.push_back(expert(i, shared));
  f.compressed = compress(shared);
  return f;
}

Var MultiBranchModel::head_from_features(const BranchFeatures& f) const {
  std::vector<Var> maps = f.experts;
  maps.push_back(f.compressed);
  if (config_.head == HeadKind::linear) {
    return conv2d(concat(maps, 1), linear_head_.w, linear_head_.b);
  }
  if (config_.head != HeadKind::hypergraph) throw ContractError("model has no integration head");
  for (auto& m : maps) m = avg_pool2d(m, config_.head_pool);
  return upsample_bilinear(hgcn_head_.integrate(maps), config_.head_pool);
}

std::vector<Hypergraph> MultiBranchModel::head_hypergraphs(const Var& x) const {
  if (config_.head != HeadKind::hypergraph) throw ContractError("model has no hypergraph head");
  NoGradGuard no_grad;
  const BranchFeatures f = forward_features(x);
  std::vector<Var> maps = f.experts;
  maps.push_back(f.compressed);
  for (auto& m : maps) m = avg_pool2d(m, config_.head_pool);
  std::vector<Hypergraph> graphs;
  hgcn_head_.integrate(maps, &graphs);
  return graphs;
}

Var MultiBranchModel::forward_head(const Var& x) const { return head_from_features(forward_features(x)); }

const Parameter& MultiBranchModel::parameter(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p;
  }
  throw std::out_of_range("no parameter named " + name);
}

MultiBranchModel MultiBranchModel::clone(bool trainable) const {
  MultiBranchModel copy = init(config_, 0);
  copy.load_state(state());
  for (auto& p : copy.params_) p.var.node()->requires_grad = trainable;
  return copy;
}

std::vector<NamedTensor> MultiBranchModel::state() const {
  std::vector<NamedTensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back({p.name, p.var.value()});
  return out;
}

void MultiBranchModel::load_state(const std::vector<NamedTensor>& state) {
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& e : state) by_name[e.name] = &e.tensor;
  if (by_name.size() != params_.size()) {
    throw ContractError("state has " + std::to_string(by_name.size()) + " tensors, model has " +
                        std::to_string(params_.size()));
  }
  for (auto& p : params_) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw ContractError("state is missing parameter " + p.name);
    if (it->second->shape() != p.var.shape()) {
      throw ContractError("parameter " + p.name + " has shape " + shape_str(p.var.shape()) +
                          ", state has " + shape_str(it->second->shape()));
    }
    p.var.mutable_value() = *it->second;
  }
}

void EmaTeacher::update(const MultiBranchModel& student, double decay) {
  const auto& sp = student.parameters();
  const auto& tp = model_.parameters();
  if (sp.size() != tp.size()) throw ContractError("teacher and student parameter sets differ");
  for (std::size_t i = 0; i < sp.size(); ++i) {
    if (sp[i].name != tp[i].name || sp[i].var.shape() != tp[i].var.shape()) {
      throw ContractError("teacher parameter " + tp[i].name + " does not mirror student " +
                          sp[i].name);
    }
  }
  for (std::size_t i = 0; i < sp.size(); ++i) {
    auto dst = tp[i].var.node()->value.data();
    const auto src = sp[i].var.value().data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = decay * dst[j] + (1.0 - decay) * src[j];
  }
}

void ema_update(EmaTeacher& teacher, const MultiBranchModel& student, double decay) {
  teacher.update(student, decay);
}

}  // namespace mscada
