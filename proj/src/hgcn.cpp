#include "mscada/hgcn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mscada/ops.hpp"

namespace mscada {

void Hypergraph::refresh_degrees() {
  if (edge_weights.size() != members.size()) edge_weights.assign(members.size(), 1.0);
  vertex_degrees.assign(n_vertices, 0.0);
  edge_degrees.assign(members.size(), 0.0);
  for (std::size_t e = 0; e < members.size(); ++e) {
    edge_degrees[e] = static_cast<double>(members[e].size());
    for (auto v : members[e]) vertex_degrees[v] += edge_weights[e];
  }
}

Tensor Hypergraph::incidence() const {
  Tensor h(Shape{n_vertices, n_edges()});
  for (std::size_t e = 0; e < members.size(); ++e) {
    for (auto v : members[e]) h[v * n_edges() + e] = 1.0;
  }
  return h;
}

Tensor Hypergraph::propagation() const {
  Tensor p(Shape{n_vertices, n_vertices});
  for (std::size_t e = 0; e < members.size(); ++e) {
    const double c = edge_weights[e] / edge_degrees[e];
    for (auto u : members[e]) {
      for (auto v : members[e]) {
        p[u * n_vertices + v] += c / std::sqrt(vertex_degrees[u] * vertex_degrees[v]);
      }
    }
  }
  return p;
}

std::string Hypergraph::incidence_coo() const {
  std::ostringstream os;
  for (std::size_t e = 0; e < members.size(); ++e) {
    std::vector<std::size_t> sorted = members[e];
    std::sort(sorted.begin(), sorted.end());
    for (auto v : sorted) os << v << ' ' << e << '\n';
  }
  return os.str();
}

Hypergraph knn_hyperedges(const Tensor& x, std::size_t k) {
  if (x.rank() != 2) throw DimensionError("knn_hyperedges: expected n×d, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (k < 1 || k >= n) {
    throw ContractError("knn_hyperedges: need 1 <= K <= n-1, got K=" + std::to_string(k) +
                        " for n=" + std::to_string(n));
  }
  std::vector<double> dist(n * n, 0.0);
  const double* xv = x.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = xv + i * d;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double* xj = xv + j * d;
      double s = 0.0;
#pragma omp simd reduction(+ : s)
      for (std::size_t c = 0; c < d; ++c) s += (xi[c] - xj[c]) * (xi[c] - xj[c]);
      dist[i * n + j] = s;
      dist[j * n + i] = s;
    }
  }
  Hypergraph g;
  g.n_vertices = n;
  g.members.resize(n);
  std::vector<double> scratch(n - 1);
  std::vector<std::size_t> picked;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = dist.data() + i * n;
    // k-th smallest distance among the other vertices.
    std::size_t pos = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) scratch[pos++] = row[j];
    }
    std::nth_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(k - 1), scratch.end());
    const double cut = scratch[k - 1];
    // Everything strictly closer, then ties at the cut in index order.
    picked.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i && row[j] < cut) picked.push_back(j);
    }
    for (std::size_t j = 0; j < n && picked.size() < k; ++j) {
      if (j != i && row[j] == cut) picked.push_back(j);
    }
    std::sort(picked.begin(), picked.end(), [row](std::size_t a, std::size_t b) {
      return row[a] < row[b] || (row[a] == row[b] && a < b);
    });
    auto& edge = g.members[i];
    edge.reserve(k + 1);
    edge.push_back(i);
    edge.insert(edge.end(), picked.begin(), picked.end());
  }
  g.edge_weights.assign(n, 1.0);
  g.refresh_degrees();
  return g;
}

namespace {

// out += P·in for an n×c row-major block.
void apply_propagation(const Hypergraph& g, const double* in, std::size_t cols, double* out) {
  const std::size_t n = g.n_vertices;
  std::vector<double> inv_sqrt(n);
  for (std::size_t v = 0; v < n; ++v) {
    if (!(g.vertex_degrees[v] > 0.0)) {
      throw ContractError("hypergraph vertex " + std::to_string(v) + " has zero degree");
    }
    inv_sqrt[v] = 1.0 / std::sqrt(g.vertex_degrees[v]);
  }
  std::vector<double> edge_acc(cols);
  for (std::size_t e = 0; e < g.n_edges(); ++e) {
    std::fill(edge_acc.begin(), edge_acc.end(), 0.0);
    for (auto v : g.members[e]) {
      const double s = inv_sqrt[v];
      const double* row = in + v * cols;
      for (std::size_t c = 0; c < cols; ++c) edge_acc[c] += s * row[c];
    }
    const double we = g.edge_weights[e] / g.edge_degrees[e];
    for (auto v : g.members[e]) {
      const double s = we * inv_sqrt[v];
      double* row = out + v * cols;
      for (std::size_t c = 0; c < cols; ++c) row[c] += s * edge_acc[c];
    }
  }
}

}  // namespace

Var hypergraph_propagate(const Hypergraph& g, const Var& x) {
  if (x.value().rank() != 2 || x.dim(0) != g.n_vertices) {
    throw DimensionError("hypergraph_propagate: features " + shape_str(x.shape()) +
                         " do not match " + std::to_string(g.n_vertices) + " vertices");
  }
  const std::size_t cols = x.dim(1);
  Tensor out(x.shape());
  apply_propagation(g, x.value().data().data(), cols, out.data().data());
  // P is symmetric, so the adjoint is another propagation.
  return make_result(std::move(out), "hypergraph_propagate", {x}, [g, cols](Node& n) {
    if (!n.inputs[0]->requires_grad) return;
    apply_propagation(g, n.grad.data(), cols, n.inputs[0]->grad_buffer().data());
  });
}

Var hypergraph_conv(const Hypergraph& g, const Var& x, const HgcnLayer& layer) {
  return relu(hypergraph_propagate(g, matmul(x, layer.theta)));
}

std::size_t HeadConfig::spatial_k() const {
  return std::min(spatial_neighbors, pixels() - 1);
}

std::size_t HeadConfig::feature_k() const {
  return std::min(feature_neighbors, feature_channels - 1);
}

IntegrationHead::IntegrationHead(const HeadConfig& config, Rng& rng, bool trainable)
    : config_(config) {
  if (config.branches < 2 || config.feature_channels < 2 || config.pixels() < 2) {
    throw ContractError("integration head needs >= 2 branches, channels and pixels");
  }
  const std::size_t k = config.experts();
  const std::size_t hw = config.pixels();
  const std::size_t nf = config.feature_channels;
  auto make = [&](std::size_t in, std::size_t out) {
    return HgcnLayer{Var::leaf(he_uniform(Shape{in, out}, in, rng), trainable)};
  };
  spatial_[0] = make(nf * config.branches, config.spatial_width * k);
  spatial_[1] = make(config.spatial_width * k, config.spatial_width);
  feature_[0] = make(hw * config.branches, hw * k);
  feature_[1] = make(hw * k, hw);
  const std::size_t concat = config.spatial_width + nf;
  classifier_w_ = Var::leaf(he_uniform(Shape{config.out_classes, concat, 1, 1}, concat, rng), trainable);
  classifier_b_ = Var::leaf(Tensor(Shape{config.out_classes}, 0.0), trainable);
}

Var IntegrationHead::integrate(std::span<const Var> features, std::vector<Hypergraph>* graphs) const {
  const auto& c = config_;
  if (features.size() != c.branches) {
    throw DimensionError("integrate: expected " + std::to_string(c.branches) + " feature maps, got " +
                         std::to_string(features.size()));
  }
  const Shape expected{features[0].dim(0), c.feature_channels, c.height, c.width};
  for (const auto& f : features) {
    if (f.shape() != expected) {
      throw DimensionError("integrate: feature map " + shape_str(f.shape()) + " expected " +
                           shape_str(expected));
    }
  }
  const std::size_t batch = expected[0];
  const std::size_t nf = c.feature_channels;
  const std::size_t hw = c.pixels();
  const std::size_t channels = nf * c.branches;
  Var stacked = concat(features, 1);  // B × (N_f·(k+1)) × H × W

  std::vector<Var> per_sample;
  per_sample.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    Var sample = reshape(slice(stacked, 0, b, 1), Shape{channels, hw});

    // Spatial view: pixels are vertices.
    Var x1 = permute(sample, {1, 0});  // hw × channels
    const Hypergraph g1 = knn_hyperedges(x1.value(), c.spatial_k());
    Var y1 = hypergraph_conv(g1, hypergraph_conv(g1, x1, spatial_[0]), spatial_[1]);

    // Feature view: channels are vertices, each carrying its map from every branch.
    Var x2 = reshape(permute(reshape(sample, Shape{c.branches, nf, hw}), {1, 0, 2}),
                     Shape{nf, c.branches * hw});
    const Hypergraph g2 = knn_hyperedges(x2.value(), c.feature_k());
    Var y2 = hypergraph_conv(g2, hypergraph_conv(g2, x2, feature_[0]), feature_[1]);
    if (graphs) {
      graphs->push_back(g1);
      graphs->push_back(g2);
    }

    const Var views[] = {permute(y1, {1, 0}), y2};  // [spatial ‖ feature]
    per_sample.push_back(
        reshape(concat(views, 0), Shape{1, c.spatial_width + nf, c.height, c.width}));
  }
  return conv2d(concat(per_sample, 0), classifier_w_, classifier_b_);
}

std::vector<NamedParam> IntegrationHead::parameters(const std::string& prefix) const {
  return {
      {prefix + "spatial.0.theta", spatial_[0].theta},
      {prefix + "spatial.1.theta", spatial_[1].theta},
      {prefix + "feature.0.theta", feature_[0].theta},
      {prefix + "feature.1.theta", feature_[1].theta},
      {prefix + "classifier.w", classifier_w_},
      {prefix + "classifier.b", classifier_b_},
  };
}

void write_incidence_coo(const std::filesystem::path& path, const Hypergraph& g) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "# vertices " << g.n_vertices << " edges " << g.n_edges() << '\n' << g.incidence_coo();
}

}  // namespace mscada
