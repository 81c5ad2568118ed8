#pragma once

// Target pseudo-labels from the teacher's expert branches, the class filter
// for outlier classes, the confidence gate, and the strong transformation
// whose geometric part is replayed on labels.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "mscada/label_map.hpp"
#include "mscada/rng.hpp"
#include "mscada/tensor.hpp"

namespace mscada {

class MultiBranchModel;

// Union class space plus the target subset and its index remap.
class ClassRegistry {
 public:
  ClassRegistry() = default;
  ClassRegistry(std::size_t num_union, std::vector<std::uint8_t> target_classes);

  std::size_t num_union() const { return num_union_; }
  std::size_t num_target() const { return target_.size(); }
  const std::vector<std::uint8_t>& target_classes() const { return target_; }
  std::vector<std::uint8_t> outliers() const;
  bool in_target(std::uint8_t union_class) const;
  bool is_equality() const { return target_.size() == num_union_; }

  // Union index → target index, 255 for outliers.
  std::uint8_t to_target(std::uint8_t union_class) const;
  std::uint8_t to_union(std::uint8_t target_index) const { return target_.at(target_index); }

  // Maps every label into target index space; 255 and outliers become 255.
  LabelMap remap_to_target(const LabelMap& union_labels) const;

 private:
  std::size_t num_union_ = 0;
  std::vector<std::uint8_t> target_;
  std::vector<std::uint8_t> remap_;
};

enum class FusionMode { winner_take_all, summation, best_expert };

struct FusedPrediction {
  LabelMap labels;    // union-space argmax
  Tensor confidence;  // B×H×W
};

// Per pixel, the branch whose max softmax probability is largest wins; its
// argmax and probability are emitted. Ties go to the lower branch and class.
FusedPrediction fuse_predictions(std::span<const Tensor> branch_logits,
                                 FusionMode mode = FusionMode::winner_take_all);
FusedPrediction fuse_teacher_predictions(const MultiBranchModel& teacher, const Tensor& x_tgt,
                                         FusionMode mode = FusionMode::winner_take_all);

// Per-pixel argmax of one branch's logits (ties to the lower class).
LabelMap argmax_labels(const Tensor& logits);

// Outlier classes → 255. Values outside the union space are rejected.
LabelMap class_filter(const LabelMap& fused, const ClassRegistry& registry);

inline constexpr double kPseudoLabelThreshold = 0.968;

// 1 where confidence > threshold, else 0.
Tensor confidence_gate(const Tensor& confidence, double threshold = kPseudoLabelThreshold);

struct StrongTransformParams {
  double flip_prob = 0.5;
  bool rotate = true;
  double crop_min = 0.6;
  double crop_max = 1.0;
  double gain_min = 0.8;
  double gain_max = 1.2;
  double bias_max = 0.1;
  double blur_sigma_max = 1.0;
};

struct StrongTransform {
  std::size_t height = 0;
  std::size_t width = 0;
  bool hflip = false;
  bool vflip = false;
  int quarter_turns = 0;  // clockwise
  std::size_t crop_top = 0;
  std::size_t crop_left = 0;
  std::size_t crop_height = 0;
  std::size_t crop_width = 0;
  std::array<double, 3> gain{1.0, 1.0, 1.0};
  std::array<double, 3> bias{0.0, 0.0, 0.0};
  double blur_sigma = 0.0;

  static StrongTransform identity(std::size_t h, std::size_t w);
  static StrongTransform sample(std::size_t h, std::size_t w, const StrongTransformParams& p, Rng& rng);

  // Source pixel feeding output (r, c); false if it lies outside the crop.
  bool source_of(std::size_t r, std::size_t c, std::size_t& sr, std::size_t& sc) const;
};

// Image: C×H×W or 1×C×H×W. Geometric then photometric.
Tensor apply_strong_transform(const StrongTransform& t, const Tensor& image);

struct TransformedTargets {
  LabelMap labels;
  Tensor weights;
};
// Geometric part only, nearest neighbour; unmapped pixels get label 255 and
// weight 0. Labels are one sample, weights 1×H×W or H×W.
TransformedTargets trans_labels(const StrongTransform& t, const LabelMap& labels, const Tensor& weights);

}  // namespace mscada
