#include "mscada/pseudo.hpp"

#include <algorithm>
#include <cmath>

#include "mscada/ops.hpp"
#include "mscada/segnet.hpp"

namespace mscada {

ClassRegistry::ClassRegistry(std::size_t num_union, std::vector<std::uint8_t> target_classes)
    : num_union_(num_union), target_(std::move(target_classes)) {
  if (num_union == 0 || num_union >= kIgnoreLabel) throw ContractError("union size must be in [1, 254]");
  std::sort(target_.begin(), target_.end());
  if (target_.empty() || std::adjacent_find(target_.begin(), target_.end()) != target_.end()) {
    throw ContractError("target class set must be non-empty and distinct");
  }
  if (target_.back() >= num_union) {
    throw ContractError("target class " + std::to_string(target_.back()) +
                        " is outside the source union");
  }
  remap_.assign(num_union, kIgnoreLabel);
  for (std::size_t i = 0; i < target_.size(); ++i) remap_[target_[i]] = static_cast<std::uint8_t>(i);
}

std::vector<std::uint8_t> ClassRegistry::outliers() const {
  std::vector<std::uint8_t> out;
  for (std::size_t c = 0; c < num_union_; ++c) {
    if (remap_[c] == kIgnoreLabel) out.push_back(static_cast<std::uint8_t>(c));
  }
  return out;
}

bool ClassRegistry::in_target(std::uint8_t union_class) const {
  return union_class < num_union_ && remap_[union_class] != kIgnoreLabel;
}

std::uint8_t ClassRegistry::to_target(std::uint8_t union_class) const {
  if (union_class == kIgnoreLabel) return kIgnoreLabel;
  if (union_class >= num_union_) {
    throw InvalidLabelError("label " + std::to_string(union_class) + " outside union of " +
                            std::to_string(num_union_) + " classes");
  }
  return remap_[union_class];
}

LabelMap ClassRegistry::remap_to_target(const LabelMap& union_labels) const {
  LabelMap out = union_labels;
  for (auto& v : out.values) v = to_target(v);
  return out;
}

LabelMap argmax_labels(const Tensor& logits) {
  if (logits.rank() != 4) throw DimensionError("argmax_labels: expected B×C×H×W");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  const std::size_t hw = h * w;
  LabelMap out(batch, h, w);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* z = logits.data().data() + b * classes * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c) {
        if (z[c * hw + p] > z[best * hw + p]) best = c;
      }
      out.values[b * hw + p] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

FusedPrediction fuse_predictions(std::span<const Tensor> branch_logits, FusionMode mode) {
  if (branch_logits.empty()) throw ContractError("fuse_predictions: no branches");
  const Shape& shape = branch_logits[0].shape();
  for (const auto& t : branch_logits) {
    if (t.shape() != shape || t.rank() != 4) {
      throw DimensionError("fuse_predictions: branch logits must share one B×C×H×W shape");
    }
  }
  const std::size_t batch = shape[0], classes = shape[1], h = shape[2], w = shape[3], hw = h * w;
  const std::size_t k = branch_logits.size();
  std::vector<Tensor> probs;
  probs.reserve(k);
  {
    NoGradGuard no_grad;
    for (const auto& t : branch_logits) probs.push_back(softmax(Var::leaf(t), 1).value());
  }
  FusedPrediction out{LabelMap(batch, h, w), Tensor(Shape{batch, h, w})};

  auto pixel_best = [&](const Tensor& p, std::size_t b, std::size_t px, double& conf) {
    const double* q = p.data().data() + b * classes * hw + px;
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (q[c * hw] > q[best * hw]) best = c;
    }
    conf = q[best * hw];
    return best;
  };

  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t image_branch = 0;
    if (mode == FusionMode::best_expert) {
      // Branch with the highest mean confidence over the whole image.
      double best_mean = -1.0;
      for (std::size_t i = 0; i < k; ++i) {
        double sum = 0.0, conf = 0.0;
        for (std::size_t px = 0; px < hw; ++px) {
          pixel_best(probs[i], b, px, conf);
          sum += conf;
        }
        if (sum > best_mean) {
          best_mean = sum;
          image_branch = i;
        }
      }
    }
    for (std::size_t px = 0; px < hw; ++px) {
      std::size_t label = 0;
      double conf = 0.0;
      if (mode == FusionMode::summation) {
        for (std::size_t c = 0; c < classes; ++c) {
          double s = 0.0;
          for (std::size_t i = 0; i < k; ++i) s += probs[i][(b * classes + c) * hw + px];
          s /= static_cast<double>(k);
          if (c == 0 || s > conf) {
            conf = s;
            label = c;
          }
        }
      } else if (mode == FusionMode::best_expert) {
        label = pixel_best(probs[image_branch], b, px, conf);
      } else {
        conf = -1.0;
        for (std::size_t i = 0; i < k; ++i) {
          double c_i = 0.0;
          const std::size_t l_i = pixel_best(probs[i], b, px, c_i);
          if (c_i > conf) {
            conf = c_i;
            label = l_i;
          }
        }
      }
      out.labels.values[b * hw + px] = static_cast<std::uint8_t>(label);
      out.confidence[b * hw + px] = conf;
    }
  }
  return out;
}

FusedPrediction fuse_teacher_predictions(const MultiBranchModel& teacher, const Tensor& x_tgt,
                                         FusionMode mode) {
  NoGradGuard no_grad;
  std::vector<Tensor> logits;
  for (auto& v : teacher.forward_all_branches(Var::leaf(x_tgt))) logits.push_back(v.value());
  return fuse_predictions(logits, mode);
}

LabelMap class_filter(const LabelMap& fused, const ClassRegistry& registry) {
  LabelMap out = fused;
  for (auto& v : out.values) {
    if (v == kIgnoreLabel) continue;
    if (v >= registry.num_union()) {
      throw InvalidLabelError("fused label " + std::to_string(v) + " outside union of " +
                              std::to_string(registry.num_union()) + " classes");
    }
    if (!registry.in_target(v)) v = kIgnoreLabel;
  }
  return out;
}

Tensor confidence_gate(const Tensor& confidence, double threshold) {
  Tensor out(confidence.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = confidence[i] > threshold ? 1.0 : 0.0;
  return out;
}

StrongTransform StrongTransform::identity(std::size_t h, std::size_t w) {
  StrongTransform t;
  t.height = h;
  t.width = w;
  t.crop_height = h;
  t.crop_width = w;
  return t;
}

StrongTransform StrongTransform::sample(std::size_t h, std::size_t w, const StrongTransformParams& p,
                                        Rng& rng) {
  StrongTransform t = identity(h, w);
  t.hflip = rng.bernoulli(p.flip_prob);
  t.vflip = rng.bernoulli(p.flip_prob);
  if (p.rotate) {
    // Quarter turns keep the grid only when it is square.
    t.quarter_turns = h == w ? static_cast<int>(rng.uniform_int(0, 3))
                             : 2 * static_cast<int>(rng.uniform_int(0, 1));
  }
  const std::size_t min_side = std::min<std::size_t>(8, std::min(h, w));
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double s = rng.uniform(p.crop_min, p.crop_max);
    t.crop_height = std::min(h, static_cast<std::size_t>(std::lround(s * static_cast<double>(h))));
    t.crop_width = std::min(w, static_cast<std::size_t>(std::lround(s * static_cast<double>(w))));
    if (t.crop_height >= min_side && t.crop_width >= min_side) break;
  }
  t.crop_height = std::max(t.crop_height, min_side);
  t.crop_width = std::max(t.crop_width, min_side);
  t.crop_top = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(h - t.crop_height)));
  t.crop_left = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(w - t.crop_width)));
  for (std::size_t c = 0; c < 3; ++c) {
    t.gain[c] = rng.uniform(p.gain_min, p.gain_max);
    t.bias[c] = rng.uniform(-p.bias_max, p.bias_max);
  }
  t.blur_sigma = rng.uniform(0.0, p.blur_sigma_max);
  return t;
}

bool StrongTransform::source_of(std::size_t r, std::size_t c, std::size_t& sr, std::size_t& sc) const {
  // Undo the rotation (clockwise quarter turns on the output grid).
  std::size_t y = r, x = c;
  if (height == width) {
    // One clockwise turn: out[y][x] = in[n−1−x][y].
    for (int q = 0; q < quarter_turns; ++q) {
      const std::size_t ny = height - 1 - x;
      x = y;
      y = ny;
    }
  } else if (quarter_turns % 4 == 2) {
    y = height - 1 - y;
    x = width - 1 - x;
  }
  if (hflip) x = width - 1 - x;
  if (vflip) y = height - 1 - y;
  // Undo crop + resize back to full size.
  const std::size_t cy = (2 * y + 1) * crop_height / (2 * height);
  const std::size_t cx = (2 * x + 1) * crop_width / (2 * width);
  if (cy >= crop_height || cx >= crop_width) return false;
  sr = crop_top + cy;
  sc = crop_left + cx;
  return sr < height && sc < width;
}

namespace {

void gaussian_blur(std::vector<double>& plane, std::size_t h, std::size_t w, double sigma) {
  if (sigma < 1e-3) return;
  const int radius = static_cast<int>(std::ceil(2.0 * sigma));
  std::vector<double> kernel(2 * static_cast<std::size_t>(radius) + 1);
  double norm = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    norm += kernel[static_cast<std::size_t>(i + radius)];
  }
  for (auto& k : kernel) k /= norm;
  const auto ih = static_cast<int>(h), iw = static_cast<int>(w);
  std::vector<double> tmp(plane.size());
  for (int y = 0; y < ih; ++y) {
    for (int x = 0; x < iw; ++x) {
      double s = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int sx = std::clamp(x + i, 0, iw - 1);
        s += kernel[static_cast<std::size_t>(i + radius)] * plane[static_cast<std::size_t>(y * iw + sx)];
      }
      tmp[static_cast<std::size_t>(y * iw + x)] = s;
    }
  }
  for (int y = 0; y < ih; ++y) {
    for (int x = 0; x < iw; ++x) {
      double s = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int sy = std::clamp(y + i, 0, ih - 1);
        s += kernel[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>(sy * iw + x)];
      }
      plane[static_cast<std::size_t>(y * iw + x)] = s;
    }
  }
}

}  // namespace

Tensor apply_strong_transform(const StrongTransform& t, const Tensor& image) {
  const std::size_t r = image.rank();
  if (!(r == 3 || (r == 4 && image.dim(0) == 1))) {
    throw DimensionError("strong transform expects C×H×W or 1×C×H×W, got " + shape_str(image.shape()));
  }
  const std::size_t channels = image.dim(r - 3), h = image.dim(r - 2), w = image.dim(r - 1);
  if (h != t.height || w != t.width) throw DimensionError("strong transform size mismatch");
  Tensor out(image.shape());
  const std::size_t hw = h * w;
  std::vector<double> plane(hw);
  for (std::size_t c = 0; c < channels; ++c) {
    const double gain = c < 3 ? t.gain[c] : 1.0;
    const double bias = c < 3 ? t.bias[c] : 0.0;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        std::size_t sy = 0, sx = 0;
        const double v = t.source_of(y, x, sy, sx) ? image[c * hw + sy * w + sx] : 0.0;
        plane[y * w + x] = std::clamp(gain * v + bias, 0.0, 1.0);
      }
    }
    gaussian_blur(plane, h, w, t.blur_sigma);
    std::copy(plane.begin(), plane.end(), out.data().begin() + static_cast<std::ptrdiff_t>(c * hw));
  }
  return out;
}

TransformedTargets trans_labels(const StrongTransform& t, const LabelMap& labels, const Tensor& weights) {
  if (labels.batch != 1 || labels.height != t.height || labels.width != t.width ||
      weights.size() != labels.size()) {
    throw DimensionError("trans_labels: expects one sample matching the transform grid");
  }
  TransformedTargets out{LabelMap(1, t.height, t.width), Tensor(weights.shape(), 0.0)};
  for (std::size_t y = 0; y < t.height; ++y) {
    for (std::size_t x = 0; x < t.width; ++x) {
      std::size_t sy = 0, sx = 0;
      if (!t.source_of(y, x, sy, sx)) continue;
      out.labels.values[y * t.width + x] = labels.values[sy * t.width + sx];
      out.weights[y * t.width + x] = weights[sy * t.width + sx];
    }
  }
  return out;
}

}  // namespace mscada
