#pragma once

// Hypergraph knowledge-integration head.
//
// Each vertex spawns one hyperedge made of itself and its K nearest
// neighbours (Euclidean). Convolution uses the normalised propagation
//   P = Dv^-1/2 · H · W · De^-1 · Hᵀ · Dv^-1/2
// followed by a learned projection and ReLU. The head runs a two-layer
// stack on a spatial view (pixels as vertices) and on a feature view
// (channels as vertices), concatenates both, and classifies per pixel.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mscada/rng.hpp"
#include "mscada/tensor.hpp"

namespace mscada {

struct Hypergraph {
  std::size_t n_vertices = 0;
  // members[e] lists the vertices of hyperedge e (the source vertex first).
  std::vector<std::vector<std::size_t>> members;
  std::vector<double> edge_weights;
  std::vector<double> vertex_degrees;  // d(v) = Σ_e w(e)·h(v,e)
  std::vector<double> edge_degrees;    // δ(e) = Σ_v h(v,e)

  std::size_t n_edges() const { return members.size(); }

  // Recomputes both degree vectors from members and edge_weights.
  void refresh_degrees();
  // Dense n_vertices × n_edges 0/1 matrix.
  Tensor incidence() const;
  // Dense n×n propagation operator P.
  Tensor propagation() const;
  // "vertex edge" pairs, one per line.
  std::string incidence_coo() const;
};

// X is n×d. Requires 1 ≤ K ≤ n−1. Neighbour ties go to the lower index.
Hypergraph knn_hyperedges(const Tensor& x, std::size_t k);

// P·X for a fixed hypergraph (the graph itself carries no gradient).
Var hypergraph_propagate(const Hypergraph& g, const Var& x);

struct HgcnLayer {
  Var theta;  // in_dim × out_dim
};

// relu(P · X · Θ)
Var hypergraph_conv(const Hypergraph& g, const Var& x, const HgcnLayer& layer);

struct HeadConfig {
  std::size_t branches = 3;        // k experts + compressor
  std::size_t feature_channels = 64;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t out_classes = 6;
  std::size_t spatial_width = 64;  // second spatial layer width; first is spatial_width·k
  std::size_t spatial_neighbors = 64;
  std::size_t feature_neighbors = 8;

  std::size_t experts() const { return branches - 1; }
  std::size_t pixels() const { return height * width; }
  std::size_t spatial_k() const;
  std::size_t feature_k() const;
};

struct NamedParam {
  std::string name;
  Var var;
};

class IntegrationHead {
 public:
  IntegrationHead() = default;
  IntegrationHead(const HeadConfig& config, Rng& rng, bool trainable = true);

  const HeadConfig& config() const { return config_; }

  // features: `branches` maps of B×N_f×H×W. Returns B×out_classes×H×W logits.
  // If `graphs` is given, each sample's spatial and feature hypergraphs are
  // appended to it in that order.
  Var integrate(std::span<const Var> features, std::vector<Hypergraph>* graphs = nullptr) const;

  // Spatial then feature layers, then the classifier weight and bias.
  std::vector<NamedParam> parameters(const std::string& prefix) const;

 private:
  HeadConfig config_;
  HgcnLayer spatial_[2];
  HgcnLayer feature_[2];
  Var classifier_w_;
  Var classifier_b_;
};

void write_incidence_coo(const std::filesystem::path& path, const Hypergraph& g);

}  // namespace mscada
