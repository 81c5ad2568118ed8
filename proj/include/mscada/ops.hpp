#pragma once

// Differentiable tensor operations. All of them record onto the autodiff
// graph when gradients are enabled and an input requires one.

#include <functional>
#include <span>
#include <vector>

#include "mscada/label_map.hpp"
#include "mscada/rng.hpp"
#include "mscada/tensor.hpp"

namespace mscada {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var relu(const Var& a);

// a: m×k, b: k×n.
Var matmul(const Var& a, const Var& b);

// x: B×C×H×W, w: F×C×k×k with odd k, stride 1, zero padding k/2.
// `bias` (F) may be an undefined Var.
Var conv2d(const Var& x, const Var& w, const Var& bias = {});

// Numerically stable softmax along `axis`.
Var softmax(const Var& x, std::size_t axis);

// Mean over non-ignored pixels of weight·(−log softmax(logits)[label]).
// logits: B×C×H×W; labels and weights: B×H×W. Returns a one-element tensor;
// zero when every pixel is ignored. Weights are constants.
Var masked_weighted_cross_entropy(const Var& logits, const LabelMap& labels,
                                  const Tensor& weights);
// Unit weights.
Var cross_entropy(const Var& logits, const LabelMap& labels);

Var concat(std::span<const Var> parts, std::size_t axis);
Var reshape(const Var& x, Shape shape);
Var slice(const Var& x, std::size_t axis, std::size_t start, std::size_t length);
// Output axis i takes input axis perm[i].
Var permute(const Var& x, const std::vector<std::size_t>& perm);

Var reduce_sum(const Var& x);
Var reduce_mean(const Var& x);

struct MaxWithIndex {
  Var values;                        // input shape with `axis` removed
  std::vector<std::size_t> indices;  // argmax, ties to the lowest index
};
MaxWithIndex reduce_max_with_index(const Var& x, std::size_t axis);

// Average pooling with a square window equal to the stride.
Var avg_pool2d(const Var& x, std::size_t factor);
// Bilinear upsampling by an integer factor (half-pixel centres, edge clamp).
Var upsample_bilinear(const Var& x, std::size_t factor);

// He-uniform fan-in initialisation: U(−√(6/fan_in), √(6/fan_in)).
Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng);

// Central-difference check of the autodiff gradient of a scalar function.
// Returns max_i |g_i − fd_i| / max(|g_i|, |fd_i|, 1e-8).
double gradient_check(const std::function<Var(const Var&)>& f, const Tensor& x,
                      double step = 1e-5);

}  // namespace mscada
