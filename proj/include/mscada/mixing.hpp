#pragma once

// Cross-domain mixing: paste part of a labelled source sample onto a target
// sample, labelling the target part with a donor branch's pseudo-labels, and
// weight the target part by the branch's global confidence on the target.

#include <span>
#include <vector>

#include "mscada/label_map.hpp"
#include "mscada/rng.hpp"
#include "mscada/tensor.hpp"

namespace mscada {

class MultiBranchModel;

enum class MixKind { class_level, region_level };

struct MixMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> keep;  // 1 = source pixel, 0 = target pixel
  MixKind kind = MixKind::region_level;

  std::size_t area() const;
  MixMask complement() const;
};

struct MixedBatch {
  Tensor image;     // B×3×H×W
  LabelMap labels;  // B×H×W
  Tensor weights;   // B×H×W
};

inline constexpr double kDefaultClassRatio = 0.5;
inline constexpr double kDefaultRegionRatio = 0.4;
inline constexpr double kDefaultConfidenceTau = 0.968;

// Selects ⌈|P|·ratio⌉ of the classes present in a one-sample label map.
MixMask make_class_mask(const LabelMap& source_label, double ratio, Rng& rng);
// One axis-aligned rectangle of about area_ratio·h·w pixels.
MixMask make_region_mask(std::size_t h, std::size_t w, double area_ratio, Rng& rng);

// Pixelwise selection between the source and target samples, one mask per
// sample. Weights are 1 everywhere until confidence_weight_map fills them.
MixedBatch apply_mix(const Tensor& x_src, const LabelMap& y_src, const Tensor& x_tgt,
                     const LabelMap& y_donor, std::span<const MixMask> masks);

// Fraction of pixels of sample `b` whose max softmax probability exceeds tau.
double confident_fraction(const Tensor& logits, std::size_t b, double tau);

// B×H×W map: 1 on pasted source pixels, the sample's confident fraction on
// target pixels. `target_logits` are predictions on the unmixed target.
Tensor confidence_weight_map(const Tensor& target_logits, std::span<const MixMask> masks,
                             double tau = kDefaultConfidenceTau);

// Weighted cross entropy of branch i on a mixed batch.
Var branch_ssl_loss(const MultiBranchModel& model, std::size_t i, const MixedBatch& mixed);

}  // namespace mscada
