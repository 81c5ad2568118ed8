#include "mscada/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>

#include "mscada/hgcn.hpp"
#include "mscada/ops.hpp"
#include "mscada/segnet.hpp"

namespace mscada {

namespace {

constexpr double kStep = 1e-5;

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from zero, for ops with a kink there.
Tensor away_from_zero(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);
  return t;
}

// Scalar test function: random linear functional of y.
Var project(const Var& y, const Tensor& r) { return reduce_sum(mul(y, Var::leaf(r))); }

// Finite-difference check on a parameter that a closure reads directly.
double check_parameter(Var param, const std::function<Var()>& loss) {
  param.zero_grad();
  Var y = loss();
  y.backward();
  const Tensor analytic = param.grad();
  NoGradGuard no_grad;
  Tensor& value = param.mutable_value();
  double worst = 0.0;
  for (std::size_t i = 0; i < value.size(); ++i) {
    const double orig = value[i];
    value[i] = orig + kStep;
    const double fp = loss().value().item();
    value[i] = orig - kStep;
    const double fm = loss().value().item();
    value[i] = orig;
    const double numeric = (fp - fm) / (2.0 * kStep);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

using Check = std::function<double(Rng&)>;

double check_head(Rng& rng, bool params) {
  HeadConfig hc;
  hc.branches = 3;
  hc.feature_channels = 3;
  hc.height = 3;
  hc.width = 3;
  hc.out_classes = 4;
  hc.spatial_width = 3;
  hc.spatial_neighbors = 4;
  hc.feature_neighbors = 2;
  IntegrationHead head(hc, rng);
  const Tensor x = random_tensor(Shape{2, 9, 3, 3}, rng, 0.0, 1.0);
  const Tensor r = random_tensor(Shape{2, 4, 3, 3}, rng);
  auto forward = [&](const Var& in) {
    std::vector<Var> maps;
    for (std::size_t i = 0; i < 3; ++i) maps.push_back(slice(in, 1, 3 * i, 3));
    return project(head.integrate(maps), r);
  };
  if (!params) return gradient_check(forward, x, kStep);
  double worst = 0.0;
  const Var fixed = Var::leaf(x);
  for (const auto& p : head.parameters("")) {
    worst = std::max(worst, check_parameter(p.var, [&] { return forward(fixed); }));
  }
  return worst;
}

double check_model(Rng& rng, HeadKind kind) {
  ModelConfig mc;
  mc.num_sources = 2;
  mc.backbone_channels = 3;
  mc.backbone_depth = 2;
  mc.expert_channels = 3;
  mc.num_union_classes = 4;
  mc.num_target_classes = 3;
  mc.height = 6;
  mc.width = 6;
  mc.head_pool = 2;
  mc.spatial_width = 3;
  mc.spatial_neighbors = 4;
  mc.feature_neighbors = 2;
  mc.head = kind;
  MultiBranchModel model = MultiBranchModel::init(mc, rng.uniform_int(0, 1 << 30));
  // Zero biases put ReLUs fed by all-zero patches exactly on the kink.
  for (auto& p : model.parameters()) {
    if (p.name.ends_with(".b")) Var(p.var).mutable_value() = away_from_zero(p.var.value().shape(), rng);
  }
  const Var x = Var::leaf(random_tensor(Shape{1, 3, 6, 6}, rng, 0.0, 1.0));
  const Tensor r_head = random_tensor(Shape{1, 3, 6, 6}, rng);
  const Tensor r_branch = random_tensor(Shape{1, 4, 6, 6}, rng);
  auto loss = [&] {
    Var total = project(model.forward_head(x), r_head);
    for (std::size_t i = 0; i < 2; ++i) total = add(total, project(model.forward_branch(i, x), r_branch));
    return total;
  };
  double worst = 0.0;
  for (const auto& p : model.parameters()) worst = std::max(worst, check_parameter(p.var, loss));
  return worst;
}

const std::map<std::string, Check>& checks() {
  static const std::map<std::string, Check> table = {
      {"add",
       [](Rng& g) {
         const Tensor c = random_tensor({3, 4}, g), r = random_tensor({3, 4}, g);
         return std::max(gradient_check([&](const Var& x) { return project(add(x, Var::leaf(c)), r); },
                                        random_tensor({3, 4}, g)),
                         gradient_check([&](const Var& x) { return project(add(Var::leaf(c), x), r); },
                                        random_tensor({3, 4}, g)));
       }},
      {"sub",
       [](Rng& g) {
         const Tensor c = random_tensor({3, 4}, g), r = random_tensor({3, 4}, g);
         return std::max(gradient_check([&](const Var& x) { return project(sub(x, Var::leaf(c)), r); },
                                        random_tensor({3, 4}, g)),
                         gradient_check([&](const Var& x) { return project(sub(Var::leaf(c), x), r); },
                                        random_tensor({3, 4}, g)));
       }},
      {"mul",
       [](Rng& g) {
         const Tensor c = random_tensor({3, 4}, g), r = random_tensor({3, 4}, g);
         return std::max(gradient_check([&](const Var& x) { return project(mul(x, Var::leaf(c)), r); },
                                        random_tensor({3, 4}, g)),
                         gradient_check([&](const Var& x) { return project(mul(x, x), r); },
                                        random_tensor({3, 4}, g)));
       }},
      {"scale",
       [](Rng& g) {
         const Tensor r = random_tensor({5}, g);
         const double f = g.uniform(-2, 2);
         return gradient_check([&](const Var& x) { return project(scale(x, f), r); }, random_tensor({5}, g));
       }},
      {"relu",
       [](Rng& g) {
         const Tensor r = random_tensor({4, 4}, g);
         return gradient_check([&](const Var& x) { return project(relu(x), r); }, away_from_zero({4, 4}, g));
       }},
      {"matmul",
       [](Rng& g) {
         const Tensor a = random_tensor({4, 5}, g), b = random_tensor({5, 3}, g), r = random_tensor({4, 3}, g);
         return std::max(
             gradient_check([&](const Var& x) { return project(matmul(x, Var::leaf(b)), r); }, a),
             gradient_check([&](const Var& x) { return project(matmul(Var::leaf(a), x), r); }, b));
       }},
      {"conv2d",
       [](Rng& g) {
         const Tensor x = random_tensor({2, 3, 5, 5}, g), w = random_tensor({4, 3, 3, 3}, g);
         const Tensor b = random_tensor({4}, g), r = random_tensor({2, 4, 5, 5}, g);
         const Tensor w1 = random_tensor({4, 3, 1, 1}, g);
         double worst = gradient_check(
             [&](const Var& v) { return project(conv2d(v, Var::leaf(w), Var::leaf(b)), r); }, x);
         worst = std::max(worst, gradient_check(
             [&](const Var& v) { return project(conv2d(Var::leaf(x), v, Var::leaf(b)), r); }, w));
         worst = std::max(worst, gradient_check(
             [&](const Var& v) { return project(conv2d(Var::leaf(x), Var::leaf(w), v), r); }, b));
         worst = std::max(worst, gradient_check(
             [&](const Var& v) { return project(conv2d(Var::leaf(x), v), r); }, w1));
         return worst;
       }},
      {"softmax",
       [](Rng& g) {
         const Tensor r = random_tensor({2, 4, 3}, g);
         return std::max(
             gradient_check([&](const Var& x) { return project(softmax(x, 1), r); }, random_tensor({2, 4, 3}, g)),
             gradient_check([&](const Var& x) { return reduce_sum(mul(softmax(x, 2), x)); },
                            random_tensor({2, 4, 3}, g)));
       }},
      {"masked_weighted_cross_entropy",
       [](Rng& g) {
         LabelMap labels(2, 3, 3);
         for (auto& v : labels.values) v = g.bernoulli(0.2) ? kIgnoreLabel : static_cast<std::uint8_t>(g.index(4));
         labels.values[0] = 1;
         const Tensor w = random_tensor({2, 3, 3}, g, 0.0, 1.0);
         return gradient_check([&](const Var& x) { return masked_weighted_cross_entropy(x, labels, w); },
                               random_tensor({2, 4, 3, 3}, g, -2.0, 2.0));
       }},
      {"concat",
       [](Rng& g) {
         const Tensor c = random_tensor({2, 2, 3}, g), r = random_tensor({2, 5, 3}, g);
         return gradient_check(
             [&](const Var& x) {
               const std::vector<Var> parts = {Var::leaf(c), x};
               return project(concat(parts, 1), r);
             },
             random_tensor({2, 3, 3}, g));
       }},
      {"reshape",
       [](Rng& g) {
         const Tensor r = random_tensor({6, 2}, g);
         return gradient_check([&](const Var& x) { return project(reshape(x, {6, 2}), r); },
                               random_tensor({3, 4}, g));
       }},
      {"slice",
       [](Rng& g) {
         const Tensor r = random_tensor({2, 2, 4}, g);
         return gradient_check([&](const Var& x) { return project(slice(x, 1, 1, 2), r); },
                               random_tensor({2, 4, 4}, g));
       }},
      {"permute",
       [](Rng& g) {
         const Tensor r = random_tensor({4, 2, 3}, g);
         return gradient_check([&](const Var& x) { return project(permute(x, {2, 0, 1}), r); },
                               random_tensor({2, 3, 4}, g));
       }},
      {"reduce_sum",
       [](Rng& g) {
         return gradient_check([&](const Var& x) { return reduce_sum(mul(x, x)); }, random_tensor({3, 3}, g));
       }},
      {"reduce_mean",
       [](Rng& g) {
         return gradient_check([&](const Var& x) { return reduce_mean(mul(x, x)); }, random_tensor({3, 3}, g));
       }},
      {"reduce_max_with_index",
       [](Rng& g) {
         const Tensor r = random_tensor({2, 4}, g);
         // Distinct values with gaps far larger than the step.
         Tensor x({2, 3, 4});
         std::vector<std::size_t> order = g.sample_without_replacement(x.size(), x.size());
         for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.1 * static_cast<double>(order[i]);
         return gradient_check([&](const Var& v) { return project(reduce_max_with_index(v, 1).values, r); }, x);
       }},
      {"avg_pool2d",
       [](Rng& g) {
         const Tensor r = random_tensor({1, 2, 2, 3}, g);
         return gradient_check([&](const Var& x) { return project(avg_pool2d(x, 2), r); },
                               random_tensor({1, 2, 4, 6}, g));
       }},
      {"upsample_bilinear",
       [](Rng& g) {
         const Tensor r = random_tensor({1, 2, 6, 4}, g);
         return gradient_check([&](const Var& x) { return project(upsample_bilinear(x, 2), r); },
                               random_tensor({1, 2, 3, 2}, g));
       }},
      {"hypergraph_propagate",
       [](Rng& g) {
         const Hypergraph hg = knn_hyperedges(random_tensor({7, 3}, g), 3);
         const Tensor r = random_tensor({7, 4}, g);
         return gradient_check([&](const Var& x) { return project(hypergraph_propagate(hg, x), r); },
                               random_tensor({7, 4}, g));
       }},
      {"hypergraph_conv",
       [](Rng& g) {
         const Tensor x = random_tensor({8, 3}, g);
         const Hypergraph hg = knn_hyperedges(x, 3);
         const Tensor theta = random_tensor({3, 4}, g), r = random_tensor({8, 4}, g);
         return std::max(
             gradient_check([&](const Var& v) { return project(hypergraph_conv(hg, v, {Var::leaf(theta)}), r); }, x),
             gradient_check([&](const Var& v) { return project(hypergraph_conv(hg, Var::leaf(x), {v}), r); }, theta));
       }},
      {"hypergraph_two_layer",
       [](Rng& g) {
         const Tensor x = random_tensor({8, 3}, g);
         const Hypergraph hg = knn_hyperedges(x, 3);
         const Tensor t1 = random_tensor({3, 5}, g), t2 = random_tensor({5, 2}, g), r = random_tensor({8, 2}, g);
         return gradient_check(
             [&](const Var& v) {
               return project(hypergraph_conv(hg, hypergraph_conv(hg, v, {Var::leaf(t1)}), {Var::leaf(t2)}), r);
             },
             x);
       }},
      {"integration_head.input", [](Rng& g) { return check_head(g, false); }},
      {"integration_head.params", [](Rng& g) { return check_head(g, true); }},
      {"model.hypergraph", [](Rng& g) { return check_model(g, HeadKind::hypergraph); }},
      {"model.linear", [](Rng& g) { return check_model(g, HeadKind::linear); }},
  };
  return table;
}

}  // namespace

std::vector<std::string> gradcheck_names() {
  std::vector<std::string> out;
  for (const auto& [name, fn] : checks()) out.push_back(name);
  return out;
}

GradCheckResult run_gradcheck(const std::string& name, std::uint64_t seed) {
  const auto it = checks().find(name);
  if (it == checks().end()) throw std::invalid_argument("unknown gradient check " + name);
  Rng rng(Rng(seed).fork(std::hash<std::string>{}(name)).seed());
  return {name, seed, it->second(rng)};
}

std::vector<GradCheckResult> run_gradcheck_suite(std::size_t seeds) {
  std::vector<GradCheckResult> out;
  for (const auto& name : gradcheck_names()) {
    for (std::size_t s = 0; s < seeds; ++s) out.push_back(run_gradcheck(name, s));
  }
  return out;
}

}  // namespace mscada
