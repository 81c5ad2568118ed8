#pragma once

// Multi-branch segmentation network: a shared stride-1 conv backbone, one
// expert + 1×1 classifier per source, a compressor shaped like an expert, and
// the integration head over [experts..., compressor] features.

#include <string>
#include <vector>

#include "mscada/checkpoint.hpp"
#include "mscada/hgcn.hpp"
#include "mscada/rng.hpp"
#include "mscada/tensor.hpp"

namespace mscada {

enum class HeadKind { hypergraph, linear, none };

enum class ParamGroup { backbone, head };

struct ModelConfig {
  std::size_t num_sources = 2;
  std::size_t backbone_channels = 64;
  std::size_t backbone_depth = 4;
  std::size_t expert_channels = 64;  // N_f
  std::size_t num_union_classes = 6;
  std::size_t num_target_classes = 6;
  std::size_t height = 32;
  std::size_t width = 32;
  double ema_decay = 0.999;
  // Head input is average-pooled by this factor and its logits upsampled back.
  std::size_t head_pool = 2;
  std::size_t spatial_width = 64;
  std::size_t spatial_neighbors = 64;
  std::size_t feature_neighbors = 8;
  HeadKind head = HeadKind::hypergraph;

  // Throws ContractError on an invalid combination.
  void validate() const;
};

struct Parameter {
  std::string name;
  Var var;
  ParamGroup group;
};

struct BranchFeatures {
  std::vector<Var> experts;  // k maps, B×N_f×H×W
  Var compressed;            // B×N_f×H×W
};

class MultiBranchModel {
 public:
  MultiBranchModel() = default;

  static MultiBranchModel init(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::size_t num_sources() const { return config_.num_sources; }
  std::size_t head_classes() const;

  Var backbone(const Var& x) const;
  // Expert i (0-based) on backbone features.
  Var expert(std::size_t i, const Var& shared) const;
  Var classify(std::size_t i, const Var& expert_features) const;
  Var compress(const Var& shared) const;

  // F_i(E_i(G(x))): B×N_CS×H×W logits.
  Var forward_branch(std::size_t i, const Var& x) const;
  BranchFeatures forward_features(const Var& x) const;
  // All k branch logits sharing one backbone pass.
  std::vector<Var> forward_all_branches(const Var& x) const;
  // Integration head on x: B×head_classes×H×W logits.
  Var forward_head(const Var& x) const;
  Var head_from_features(const BranchFeatures& f) const;
  // Spatial and feature hypergraphs the head builds for each sample of x.
  std::vector<Hypergraph> head_hypergraphs(const Var& x) const;

  const std::vector<Parameter>& parameters() const { return params_; }
  const Parameter& parameter(const std::string& name) const;

  // Deep copy; the copy's parameters track gradients iff `trainable`.
  MultiBranchModel clone(bool trainable) const;

  std::vector<NamedTensor> state() const;
  void load_state(const std::vector<NamedTensor>& state);

 private:
  struct ConvParams {
    Var w;
    Var b;
  };

  void register_params();
  void check_source(std::size_t i) const;

  ModelConfig config_;
  std::vector<ConvParams> backbone_;
  std::vector<ConvParams> experts_;
  std::vector<ConvParams> classifiers_;
  ConvParams compressor_;
  IntegrationHead hgcn_head_;
  ConvParams linear_head_;
  std::vector<Parameter> params_;
};

// Mean-teacher copy updated by exponential moving average.
class EmaTeacher {
 public:
  EmaTeacher() = default;
  explicit EmaTeacher(const MultiBranchModel& student) : model_(student.clone(false)) {}

  const MultiBranchModel& model() const { return model_; }
  MultiBranchModel& model() { return model_; }

  // θ' ← m·θ' + (1−m)·θ for every parameter.
  void update(const MultiBranchModel& student, double decay);

 private:
  MultiBranchModel model_;
};

void ema_update(EmaTeacher& teacher, const MultiBranchModel& student, double decay);

}  // namespace mscada
