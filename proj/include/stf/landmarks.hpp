#pragma once

#include <string>
#include <vector>

#include "stf/tensor.hpp"

namespace stf {

enum class LandmarkStrategy { segment_means, stcs };

std::string to_string(LandmarkStrategy s);
LandmarkStrategy landmark_strategy_from_string(const std::string& s);

// Pairwise node distances (road-network or coordinate-derived). Symmetric,
// zero diagonal, non-negative; row-major n x n.
struct NodeGeometry {
    int n_nodes = 0;
    std::vector<double> distances;

    double dist(int i, int j) const { return distances[static_cast<size_t>(i) * n_nodes + j]; }
    void validate() const;
};

// Partition of nodes into s clusters; cluster ids are 0-based and every
// cluster is non-empty. Labels are canonical: ordered by smallest member.
struct ClusterMap {
    std::vector<int> assignment;  // node -> cluster id in [0, s)
    int s = 0;

    void validate() const;
};

struct LandmarkSet {
    Tensor q_landmarks;  // m x d
    Tensor k_landmarks;  // m x d
    LandmarkStrategy strategy = LandmarkStrategy::segment_means;
    i64 m = 0;
};

// Everything the strategies need beyond Q and K themselves. `fixed` wins when
// set (used by tests to inject identity landmarks).
struct LandmarkContext {
    const LandmarkSet* fixed = nullptr;
    const ClusterMap* clusters = nullptr;  // stcs prerequisite
    int time_steps = 0;                    // stcs: rows are T groups of N
    int sampling_iterations = 8;           // stcs: p
    u64 seed = 0;
};

// Mean over contiguous blocks of l = n/m rows (one scan, O(n) elements).
// Gradients flow through the averaging.
Tensor segment_means(const Tensor& rows, i64 m);

// Element-touch counter behind the linear-scan assertion in tests.
u64 landmark_scan_ops();
void reset_landmark_scan_ops();

// Bottom-up average-linkage clustering on the precomputed distance matrix.
// Ties break deterministically on the smaller (i, j) index pair.
ClusterMap agglomerative_cluster(const NodeGeometry& geom, int s);

// Spatial-Temporal Cluster Sampling: for each time step and cluster, draw p
// samples from a per-dimension N(mu, sigma^2) over the cluster's rows and
// average them. Returns s*T landmarks in (t, c) order, detached (sampling
// carries no gradient).
Tensor stcs_landmarks(const Tensor& rows, const ClusterMap& clusters, int time_steps, int p, u64 seed);

LandmarkSet make_landmark_set(const Tensor& q, const Tensor& k, LandmarkStrategy strategy, i64 m,
                              const LandmarkContext& ctx);

}  // namespace stf
