#include "mscada/mixing.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "mscada/ops.hpp"
#include "mscada/segnet.hpp"

namespace mscada {

std::size_t MixMask::area() const {
  return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), std::uint8_t{1}));
}

MixMask MixMask::complement() const {
  MixMask m = *this;
  for (auto& v : m.keep) v = v ? 0 : 1;
  return m;
}

MixMask make_class_mask(const LabelMap& source_label, double ratio, Rng& rng) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ContractError("class mix ratio must be in (0, 1]");
  if (source_label.batch != 1) throw DimensionError("class mask expects a one-sample label map");
  std::set<std::uint8_t> present;
  for (auto v : source_label.values) {
    if (v != kIgnoreLabel) present.insert(v);
  }
  if (present.empty()) throw ContractError("class mask: label map has no labelled pixels");
  const std::vector<std::uint8_t> classes(present.begin(), present.end());
  const auto count = static_cast<std::size_t>(
      std::ceil(static_cast<double>(classes.size()) * ratio - 1e-9));
  std::vector<bool> chosen(256, false);
  for (auto idx : rng.sample_without_replacement(classes.size(), count)) chosen[classes[idx]] = true;
  MixMask m;
  m.height = source_label.height;
  m.width = source_label.width;
  m.kind = MixKind::class_level;
  m.keep.resize(source_label.size());
  for (std::size_t p = 0; p < m.keep.size(); ++p) {
    const auto v = source_label.values[p];
    m.keep[p] = (v != kIgnoreLabel && chosen[v]) ? 1 : 0;
  }
  return m;
}

MixMask make_region_mask(std::size_t h, std::size_t w, double area_ratio, Rng& rng) {
  if (!(area_ratio > 0.0 && area_ratio < 1.0)) throw ContractError("region ratio must be in (0, 1)");
  if (h == 0 || w == 0) throw DimensionError("region mask needs a non-empty grid");
  const double target = area_ratio * static_cast<double>(h * w);
  const double aspect = std::exp(rng.uniform(std::log(0.5), std::log(2.0)));  // height / width
  auto fit = [](double v, std::size_t hi) {
    return std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(v)), 1, hi);
  };
  std::size_t rh = fit(std::sqrt(target * aspect), h);
  std::size_t rw = fit(target / static_cast<double>(rh), w);
  // An aspect that does not fit on one axis is clamped; rebalance the other.
  rh = fit(target / static_cast<double>(rw), h);
  const std::size_t top = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(h - rh)));
  const std::size_t left = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(w - rw)));
  MixMask m;
  m.height = h;
  m.width = w;
  m.kind = MixKind::region_level;
  m.keep.assign(h * w, 0);
  for (std::size_t y = top; y < top + rh; ++y) {
    std::fill_n(m.keep.begin() + static_cast<std::ptrdiff_t>(y * w + left), rw, std::uint8_t{1});
  }
  return m;
}

MixedBatch apply_mix(const Tensor& x_src, const LabelMap& y_src, const Tensor& x_tgt,
                     const LabelMap& y_donor, std::span<const MixMask> masks) {
  if (x_src.shape() != x_tgt.shape() || x_src.rank() != 4) {
    throw DimensionError("apply_mix: images " + shape_str(x_src.shape()) + " and " +
                         shape_str(x_tgt.shape()) + " must be equal B×C×H×W");
  }
  const std::size_t batch = x_src.dim(0), channels = x_src.dim(1), h = x_src.dim(2), w = x_src.dim(3);
  const std::size_t hw = h * w;
  auto same_grid = [&](const LabelMap& l) {
    return l.batch == batch && l.height == h && l.width == w;
  };
  if (!same_grid(y_src) || !same_grid(y_donor) || masks.size() != batch) {
    throw DimensionError("apply_mix: labels and masks must match the image batch " +
                         shape_str(x_src.shape()));
  }
  MixedBatch out{Tensor(x_src.shape()), LabelMap(batch, h, w), Tensor(Shape{batch, h, w}, 1.0)};
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& m = masks[b];
    if (m.height != h || m.width != w) throw DimensionError("apply_mix: mask size mismatch");
    for (std::size_t p = 0; p < hw; ++p) {
      const bool keep = m.keep[p] != 0;
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t i = (b * channels + c) * hw + p;
        out.image[i] = keep ? x_src[i] : x_tgt[i];
      }
      out.labels.values[b * hw + p] = keep ? y_src.values[b * hw + p] : y_donor.values[b * hw + p];
    }
  }
  return out;
}

double confident_fraction(const Tensor& logits, std::size_t b, double tau) {
  const std::size_t classes = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  const double* z = logits.data().data() + b * classes * hw;
  std::size_t confident = 0;
  for (std::size_t p = 0; p < hw; ++p) {
    double mx = z[p];
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, z[c * hw + p]);
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(z[c * hw + p] - mx);
    // max probability = 1 / sum
    if (1.0 / sum > tau) ++confident;
  }
  return static_cast<double>(confident) / static_cast<double>(hw);
}

Tensor confidence_weight_map(const Tensor& target_logits, std::span<const MixMask> masks,
                             double tau) {
  if (target_logits.rank() != 4 || masks.size() != target_logits.dim(0)) {
    throw DimensionError("confidence_weight_map: logits " + shape_str(target_logits.shape()) +
                         " do not match " + std::to_string(masks.size()) + " masks");
  }
  const std::size_t batch = target_logits.dim(0), h = target_logits.dim(2), w = target_logits.dim(3);
  Tensor out(Shape{batch, h, w});
  for (std::size_t b = 0; b < batch; ++b) {
    const double wt = confident_fraction(target_logits, b, tau);
    for (std::size_t p = 0; p < h * w; ++p) out[b * h * w + p] = masks[b].keep[p] ? 1.0 : wt;
  }
  return out;
}

Var branch_ssl_loss(const MultiBranchModel& model, std::size_t i, const MixedBatch& mixed) {
  Var logits = model.forward_branch(i, Var::leaf(mixed.image));
  return masked_weighted_cross_entropy(logits, mixed.labels, mixed.weights);
}

}  // namespace mscada
