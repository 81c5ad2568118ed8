#include "mscada/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "mscada/kernels.hpp"

namespace mscada {

namespace {

// Gradient buffer of input `i`, or nullptr when it does not need one.
std::vector<double>* input_grad(Node& n, std::size_t i) {
  Node& in = *n.inputs[i];
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return make_result(std::move(out), "add", {a, b}, [](Node& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = input_grad(n, k)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
      }
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  return make_result(std::move(out), "sub", {a, b}, [](Node& n) {
    if (auto* g = input_grad(n, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
    }
    if (auto* g = input_grad(n, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= n.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return make_result(std::move(out), "mul", {a, b}, [](Node& n) {
    const auto& av = n.inputs[0]->value.storage();
    const auto& bv = n.inputs[1]->value.storage();
    if (auto* g = input_grad(n, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * bv[i];
    }
    if (auto* g = input_grad(n, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * av[i];
    }
  });
}

Var scale(const Var& a, double factor) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v *= factor;
  return make_result(std::move(out), "scale", {a}, [factor](Node& n) {
    if (auto* g = input_grad(n, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += factor * n.grad[i];
    }
  });
}

Var relu(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v = v < 0.0 ? 0.0 : v;  // NaN passes through
  return make_result(std::move(out), "relu", {a}, [](Node& n) {
    if (auto* g = input_grad(n, 0)) {
      const auto& y = n.value.storage();
      for (std::size_t i = 0; i < g->size(); ++i) {
        if (y[i] > 0.0) (*g)[i] += n.grad[i];
      }
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out(Shape{m, n});
  kernels::gemm_nn({m, n, k}, a.value().data(), b.value().data(), out.data());
  return make_result(std::move(out), "matmul", {a, b}, [m, k, n](Node& nd) {
    const auto& av = nd.inputs[0]->value.storage();
    const auto& bv = nd.inputs[1]->value.storage();
    if (auto* g = input_grad(nd, 0)) {
      kernels::gemm_nt({m, k, n}, nd.grad, bv, *g, true);  // dA = dY·Bᵀ
    }
    if (auto* g = input_grad(nd, 1)) {
      kernels::gemm_tn({k, n, m}, av, nd.grad, *g, true);  // dB = Aᵀ·dY
    }
  });
}

Var conv2d(const Var& x, const Var& w, const Var& bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4) {
    throw DimensionError("conv2d: expected 4-D input and weight, got " + shape_str(xv.shape()) +
                         " and " + shape_str(wv.shape()));
  }
  const std::size_t batch = xv.dim(0), channels = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const std::size_t filters = wv.dim(0), ks = wv.dim(2);
  if (wv.dim(1) != channels) {
    throw DimensionError("conv2d: weight " + shape_str(wv.shape()) + " expects " +
                         std::to_string(wv.dim(1)) + " channels, input " + shape_str(xv.shape()) +
                         " has " + std::to_string(channels));
  }
  if (ks != wv.dim(3) || ks % 2 == 0) {
    throw DimensionError("conv2d: kernel must be square and odd, got " + shape_str(wv.shape()));
  }
  if (ks / 2 > h || ks / 2 > wd) {
    throw DimensionError("conv2d: kernel " + shape_str(wv.shape()) + " does not fit input " +
                         shape_str(xv.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.size() != filters) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " does not match " +
                         std::to_string(filters) + " filters");
  }
  const kernels::ConvGeom geom{channels, h, wd, ks};
  const std::size_t hw = h * wd;
  const std::size_t patch = channels * ks * ks;
  Tensor out(Shape{batch, filters, h, wd});
  std::vector<double> col(patch * hw);
  for (std::size_t b = 0; b < batch; ++b) {
    auto img = xv.data().subspan(b * channels * hw, channels * hw);
    auto dst = out.data().subspan(b * filters * hw, filters * hw);
    if (ks == 1) {
      kernels::gemm_nn({filters, hw, channels}, wv.data(), img, dst);
    } else {
      kernels::im2col(geom, img, col);
      kernels::gemm_nn({filters, hw, patch}, wv.data(), col, dst);
    }
    if (has_bias) {
      const auto& bv = bias.value().storage();
      for (std::size_t f = 0; f < filters; ++f) {
        for (std::size_t p = 0; p < hw; ++p) dst[f * hw + p] += bv[f];
      }
    }
  }
  std::vector<Var> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_result(
      std::move(out), "conv2d", std::move(inputs),
      [geom, batch, filters, hw, patch, has_bias](Node& n) {
        const auto& xs = n.inputs[0]->value.storage();
        const auto& ws = n.inputs[1]->value.storage();
        auto* gx = input_grad(n, 0);
        auto* gw = input_grad(n, 1);
        auto* gb = has_bias ? input_grad(n, 2) : nullptr;
        const std::size_t cin = geom.channels;
        const bool pointwise = geom.ksize == 1;
        std::vector<double> col(pointwise ? 0 : patch * hw);
        std::vector<double> dcol(pointwise ? 0 : patch * hw);
        for (std::size_t b = 0; b < batch; ++b) {
          std::span<const double> gy(n.grad.data() + b * filters * hw, filters * hw);
          std::span<const double> img(xs.data() + b * cin * hw, cin * hw);
          if (gw) {
            if (pointwise) {
              kernels::gemm_nt({filters, cin, hw}, gy, img, *gw, true);
            } else {
              kernels::im2col(geom, img, col);
              kernels::gemm_nt({filters, patch, hw}, gy, col, *gw, true);
            }
          }
          if (gb) {
            for (std::size_t f = 0; f < filters; ++f) {
              double s = 0.0;
              for (std::size_t p = 0; p < hw; ++p) s += gy[f * hw + p];
              (*gb)[f] += s;
            }
          }
          if (gx) {
            std::span<double> dimg(gx->data() + b * cin * hw, cin * hw);
            if (pointwise) {
              kernels::gemm_tn({cin, hw, filters}, ws, gy, dimg, true);
            } else {
              kernels::gemm_tn({patch, hw, filters}, ws, gy, dcol, false);
              kernels::col2im(geom, dcol, dimg);
            }
          }
        }
      });
}

Var softmax(const Var& x, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis);
  Tensor out = x.value();
  auto o = out.data();
  for (std::size_t a = 0; a < s.outer; ++a) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      double* p = o.data() + a * s.extent * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < s.extent; ++c) mx = std::max(mx, p[c * s.inner]);
      double z = 0.0;
      for (std::size_t c = 0; c < s.extent; ++c) {
        p[c * s.inner] = std::exp(p[c * s.inner] - mx);
        z += p[c * s.inner];
      }
      for (std::size_t c = 0; c < s.extent; ++c) p[c * s.inner] /= z;
    }
  }
  return make_result(std::move(out), "softmax", {x}, [s](Node& n) {
    auto* g = input_grad(n, 0);
    if (!g) return;
    const auto& y = n.value.storage();
    for (std::size_t a = 0; a < s.outer; ++a) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = a * s.extent * s.inner + i;
        double dot = 0.0;
        for (std::size_t c = 0; c < s.extent; ++c) {
          dot += n.grad[base + c * s.inner] * y[base + c * s.inner];
        }
        for (std::size_t c = 0; c < s.extent; ++c) {
          const std::size_t k = base + c * s.inner;
          (*g)[k] += y[k] * (n.grad[k] - dot);
        }
      }
    }
  });
}

Var masked_weighted_cross_entropy(const Var& logits, const LabelMap& labels,
                                  const Tensor& weights) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 4) {
    throw DimensionError("cross entropy: logits must be B×C×H×W, got " + shape_str(lv.shape()));
  }
  const std::size_t batch = lv.dim(0), classes = lv.dim(1), h = lv.dim(2), w = lv.dim(3);
  if (labels.batch != batch || labels.height != h || labels.width != w) {
    throw DimensionError("cross entropy: labels " + shape_str({labels.batch, labels.height,
                                                               labels.width}) +
                         " do not match logits " + shape_str(lv.shape()));
  }
  if (weights.size() != batch * h * w) {
    throw DimensionError("cross entropy: weights " + shape_str(weights.shape()) +
                         " do not match logits " + shape_str(lv.shape()));
  }
  const std::size_t hw = h * w;
  std::size_t counted = 0;
  for (auto l : labels.values) {
    if (l == kIgnoreLabel) continue;
    if (l >= classes) {
      throw InvalidLabelError("label " + std::to_string(l) + " is not a valid class for " +
                              std::to_string(classes) + " classes");
    }
    ++counted;
  }
  double total = 0.0;
  const auto ld = lv.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t p = 0; p < hw; ++p) {
      const auto label = labels.values[b * hw + p];
      if (label == kIgnoreLabel) continue;
      const double* z = ld.data() + b * classes * hw + p;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < classes; ++c) mx = std::max(mx, z[c * hw]);
      double sum = 0.0;
      for (std::size_t c = 0; c < classes; ++c) sum += std::exp(z[c * hw] - mx);
      const double nll = -(z[label * hw] - mx - std::log(sum));
      total += weights[b * hw + p] * nll;
    }
  }
  const double denom = counted ? static_cast<double>(counted) : 1.0;
  Tensor out = Tensor::scalar(total / denom);
  return make_result(std::move(out), "cross_entropy", {logits},
                     [labels, weights, batch, classes, hw, denom](Node& n) {
                       auto* g = input_grad(n, 0);
                       if (!g) return;
                       const double upstream = n.grad[0] / denom;
                       const auto& z0 = n.inputs[0]->value.storage();
                       for (std::size_t b = 0; b < batch; ++b) {
                         for (std::size_t p = 0; p < hw; ++p) {
                           const auto label = labels.values[b * hw + p];
                           if (label == kIgnoreLabel) continue;
                           const double wgt = weights[b * hw + p] * upstream;
                           if (wgt == 0.0) continue;
                           const std::size_t base = b * classes * hw + p;
                           double mx = -std::numeric_limits<double>::infinity();
                           for (std::size_t c = 0; c < classes; ++c) {
                             mx = std::max(mx, z0[base + c * hw]);
                           }
                           double sum = 0.0;
                           for (std::size_t c = 0; c < classes; ++c) {
                             sum += std::exp(z0[base + c * hw] - mx);
                           }
                           for (std::size_t c = 0; c < classes; ++c) {
                             const double prob = std::exp(z0[base + c * hw] - mx) / sum;
                             (*g)[base + c * hw] += wgt * (prob - (c == label ? 1.0 : 0.0));
                           }
                         }
                       }
                     });
}

Var cross_entropy(const Var& logits, const LabelMap& labels) {
  Tensor ones(Shape{labels.batch, labels.height, labels.width}, 1.0);
  return masked_weighted_cross_entropy(logits, labels, ones);
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) {
      throw DimensionError("concat: shape " + shape_str(s) + " incompatible with " +
                           shape_str(first) + " on axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  const AxisSplit os = split_at(out_shape, axis);
  Tensor out(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t ext = p.dim(axis);
    const auto src = p.value().data();
    for (std::size_t a = 0; a < os.outer; ++a) {
      std::copy_n(src.data() + a * ext * os.inner, ext * os.inner,
                  out.data().data() + (a * os.extent + offset) * os.inner);
    }
    offset += ext;
  }
  std::vector<std::size_t> extents;
  for (const auto& p : parts) extents.push_back(p.dim(axis));
  std::vector<Var> inputs(parts.begin(), parts.end());
  return make_result(std::move(out), "concat", std::move(inputs),
                     [os, offsets, extents](Node& n) {
                       for (std::size_t k = 0; k < extents.size(); ++k) {
                         auto* g = input_grad(n, k);
                         if (!g) continue;
                         const std::size_t ext = extents[k];
                         for (std::size_t a = 0; a < os.outer; ++a) {
                           const double* src =
                               n.grad.data() + (a * os.extent + offsets[k]) * os.inner;
                           double* dst = g->data() + a * ext * os.inner;
                           for (std::size_t i = 0; i < ext * os.inner; ++i) dst[i] += src[i];
                         }
                       }
                     });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value();
  out.reshape_inplace(std::move(shape));
  return make_result(std::move(out), "reshape", {x}, [](Node& n) {
    if (auto* g = input_grad(n, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
    }
  });
}

Var slice(const Var& x, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisSplit s = split_at(x.shape(), axis);
  if (length == 0 || start + length > s.extent) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") exceeds axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  Tensor out(out_shape);
  const auto src = x.value().data();
  for (std::size_t a = 0; a < s.outer; ++a) {
    std::copy_n(src.data() + (a * s.extent + start) * s.inner, length * s.inner,
                out.data().data() + a * length * s.inner);
  }
  return make_result(std::move(out), "slice", {x}, [s, start, length](Node& n) {
    auto* g = input_grad(n, 0);
    if (!g) return;
    for (std::size_t a = 0; a < s.outer; ++a) {
      const double* src = n.grad.data() + a * length * s.inner;
      double* dst = g->data() + (a * s.extent + start) * s.inner;
      for (std::size_t i = 0; i < length * s.inner; ++i) dst[i] += src[i];
    }
  });
}

Var permute(const Var& x, const std::vector<std::size_t>& perm) {
  const Shape& in = x.shape();
  const std::size_t r = in.size();
  if (perm.size() != r) throw DimensionError("permute: rank mismatch for " + shape_str(in));
  std::vector<bool> used(r, false);
  for (auto p : perm) {
    if (p >= r || used[p]) throw DimensionError("permute: invalid axis order");
    used[p] = true;
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out_shape(r);
  std::vector<std::size_t> strides(r);  // input stride for each output axis
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in[perm[i]];
    strides[i] = in_strides[perm[i]];
  }
  // source offset for each output element
  const std::size_t total = numel(in);
  std::vector<std::size_t> gather(total);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < total; ++o) {
    gather[o] = src;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        src += strides[d];
        break;
      }
      src -= strides[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
  Tensor out(out_shape);
  const auto xv = x.value().data();
  for (std::size_t o = 0; o < total; ++o) out[o] = xv[gather[o]];
  return make_result(std::move(out), "permute", {x}, [gather = std::move(gather)](Node& n) {
    auto* g = input_grad(n, 0);
    if (!g) return;
    for (std::size_t o = 0; o < gather.size(); ++o) (*g)[gather[o]] += n.grad[o];
  });
}

Var reduce_sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return make_result(Tensor::scalar(s), "reduce_sum", {x}, [](Node& n) {
    if (auto* g = input_grad(n, 0)) {
      for (auto& v : *g) v += n.grad[0];
    }
  });
}

Var reduce_mean(const Var& x) {
  const double count = static_cast<double>(x.size());
  return scale(reduce_sum(x), 1.0 / count);
}

MaxWithIndex reduce_max_with_index(const Var& x, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis);
  Shape out_shape;
  for (std::size_t i = 0; i < x.shape().size(); ++i) {
    if (i != axis) out_shape.push_back(x.dim(i));
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);
  std::vector<std::size_t> indices(s.outer * s.inner);
  std::vector<std::size_t> sources(s.outer * s.inner);
  const auto xv = x.value().data();
  for (std::size_t a = 0; a < s.outer; ++a) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = a * s.extent * s.inner + i;
      std::size_t best = 0;
      double best_v = xv[base];
      for (std::size_t c = 1; c < s.extent; ++c) {
        const double v = xv[base + c * s.inner];
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      const std::size_t o = a * s.inner + i;
      out[o] = best_v;
      indices[o] = best;
      sources[o] = base + best * s.inner;
    }
  }
  Var values = make_result(std::move(out), "reduce_max", {x}, [sources](Node& n) {
    auto* g = input_grad(n, 0);
    if (!g) return;
    for (std::size_t o = 0; o < sources.size(); ++o) (*g)[sources[o]] += n.grad[o];
  });
  return {std::move(values), std::move(indices)};
}

Var avg_pool2d(const Var& x, std::size_t factor) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("avg_pool2d: expected 4-D input");
  const std::size_t planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (factor == 0 || h % factor || w % factor) {
    throw DimensionError("avg_pool2d: factor " + std::to_string(factor) + " does not divide " +
                         shape_str(xv.shape()));
  }
  if (factor == 1) return x;
  const std::size_t oh = h / factor, ow = w / factor;
  const double inv = 1.0 / static_cast<double>(factor * factor);
  Tensor out(Shape{xv.dim(0), xv.dim(1), oh, ow});
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        out[(p * oh + y / factor) * ow + xx / factor] += xv[(p * h + y) * w + xx] * inv;
      }
    }
  }
  return make_result(std::move(out), "avg_pool2d", {x}, [planes, h, w, oh, ow, factor, inv](Node& n) {
    auto* g = input_grad(n, 0);
    if (!g) return;
    for (std::size_t p = 0; p < planes; ++p) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t xx = 0; xx < w; ++xx) {
          (*g)[(p * h + y) * w + xx] += n.grad[(p * oh + y / factor) * ow + xx / factor] * inv;
        }
      }
    }
  });
}

namespace {

struct LerpTap {
  std::size_t lo = 0;
  std::size_t hi = 0;
  double frac = 0.0;
};

std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t factor) {
  std::vector<LerpTap> taps(in * factor);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    taps[o] = {lo, std::min(lo + 1, in - 1), src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

Var upsample_bilinear(const Var& x, std::size_t factor) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("upsample_bilinear: expected 4-D input");
  if (factor == 0) throw DimensionError("upsample_bilinear: factor must be positive");
  if (factor == 1) return x;
  const std::size_t planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t oh = h * factor, ow = w * factor;
  auto ty = lerp_taps(h, factor);
  auto tx = lerp_taps(w, factor);
  Tensor out(Shape{xv.dim(0), xv.dim(1), oh, ow});
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = xv.data().data() + p * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      const auto& a = ty[y];
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const auto& b = tx[xx];
        const double top = src[a.lo * w + b.lo] * (1 - b.frac) + src[a.lo * w + b.hi] * b.frac;
        const double bot = src[a.hi * w + b.lo] * (1 - b.frac) + src[a.hi * w + b.hi] * b.frac;
        out[(p * oh + y) * ow + xx] = top * (1 - a.frac) + bot * a.frac;
      }
    }
  }
  return make_result(std::move(out), "upsample_bilinear", {x},
                     [planes, h, w, oh, ow, ty = std::move(ty), tx = std::move(tx)](Node& n) {
                       auto* g = input_grad(n, 0);
                       if (!g) return;
                       for (std::size_t p = 0; p < planes; ++p) {
                         double* dst = g->data() + p * h * w;
                         for (std::size_t y = 0; y < oh; ++y) {
                           const auto& a = ty[y];
                           for (std::size_t xx = 0; xx < ow; ++xx) {
                             const auto& b = tx[xx];
                             const double gv = n.grad[(p * oh + y) * ow + xx];
                             dst[a.lo * w + b.lo] += gv * (1 - a.frac) * (1 - b.frac);
                             dst[a.lo * w + b.hi] += gv * (1 - a.frac) * b.frac;
                             dst[a.hi * w + b.lo] += gv * a.frac * (1 - b.frac);
                             dst[a.hi * w + b.hi] += gv * a.frac * b.frac;
                           }
                         }
                       }
                     });
}

Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.storage()) v = rng.uniform(-bound, bound);
  return t;
}

double gradient_check(const std::function<Var(const Var&)>& f, const Tensor& x, double step) {
  Var input = Var::leaf(x, true);
  Var y = f(input);
  if (y.size() != 1) {
    throw ContractError("gradient_check: function must return a scalar, got " +
                        shape_str(y.shape()));
  }
  y.backward();
  const Tensor analytic = input.grad();

  NoGradGuard no_grad;
  Tensor probe = x;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double fp = f(Var::leaf(probe)).value().item();
    probe[i] = orig - step;
    const double fm = f(Var::leaf(probe)).value().item();
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace mscada
