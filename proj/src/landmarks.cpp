#include "stf/landmarks.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>

namespace stf {

namespace {
std::atomic<u64> g_scan_ops{0};
}

u64 landmark_scan_ops() { return g_scan_ops.load(); }
void reset_landmark_scan_ops() { g_scan_ops.store(0); }

std::string to_string(LandmarkStrategy s) {
    return s == LandmarkStrategy::segment_means ? "segment-means" : "stcs";
}

LandmarkStrategy landmark_strategy_from_string(const std::string& s) {
    if (s == "segment-means") return LandmarkStrategy::segment_means;
    if (s == "stcs") return LandmarkStrategy::stcs;
    throw std::invalid_argument(msg("unknown landmark strategy '", s, "' (expected segment-means or stcs)"));
}

void NodeGeometry::validate() const {
    check_arg(n_nodes >= 1, "NodeGeometry: at least one node required");
    check_arg(static_cast<i64>(distances.size()) == static_cast<i64>(n_nodes) * n_nodes,
              msg("NodeGeometry: distance matrix size ", distances.size(), " does not match ", n_nodes,
                  " nodes"));
    for (int i = 0; i < n_nodes; ++i) {
        check_arg(dist(i, i) == 0.0, msg("NodeGeometry: nonzero diagonal at node ", i));
        for (int j = 0; j < n_nodes; ++j) {
            check_arg(dist(i, j) >= 0.0, msg("NodeGeometry: negative distance at (", i, ",", j, ")"));
            check_arg(dist(i, j) == dist(j, i), msg("NodeGeometry: asymmetric at (", i, ",", j, ")"));
        }
    }
}

void ClusterMap::validate() const {
    check_arg(s >= 1, "ClusterMap: cluster count must be >= 1");
    std::vector<i64> sizes(static_cast<size_t>(s), 0);
    for (int c : assignment) {
        check_arg(c >= 0 && c < s, msg("ClusterMap: assignment ", c, " outside [0,", s, ")"));
        ++sizes[static_cast<size_t>(c)];
    }
    for (int c = 0; c < s; ++c)
        check_arg(sizes[static_cast<size_t>(c)] > 0, msg("ClusterMap: cluster ", c, " is empty"));
}

Tensor segment_means(const Tensor& rows, i64 m) {
    check_arg(m >= 1, "segment_means: landmark count must be >= 1");
    check_arg(rows.rank() == 2, msg("segment_means: rank-2 input required, got ", shape_str(rows.shape())));
    check_arg(rows.rows() % m == 0,
              msg("segment_means: ", rows.rows(), " rows not divisible by m = ", m,
                  " (pad the sequence first)"));
    g_scan_ops.fetch_add(static_cast<u64>(rows.size()));
    return segment_mean_rows(rows, m);
}

ClusterMap agglomerative_cluster(const NodeGeometry& geom, int s) {
    geom.validate();
    const int n = geom.n_nodes;
    check_arg(s >= 1 && s <= n, msg("agglomerative_cluster: s = ", s, " outside [1,", n, "]"));

    // Active clusters as sorted member lists; average linkage via the
    // Lance-Williams update on a dense inter-cluster distance table.
    std::vector<std::vector<int>> members(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) members[static_cast<size_t>(i)] = {i};
    std::vector<std::vector<double>> d(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(n)));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) d[static_cast<size_t>(i)][static_cast<size_t>(j)] = geom.dist(i, j);
    std::vector<bool> alive(static_cast<size_t>(n), true);

    int remaining = n;
    while (remaining > s) {
        int best_i = -1, best_j = -1;
        double best = std::numeric_limits<double>::infinity();
        for (int i = 0; i < n; ++i) {
            if (!alive[static_cast<size_t>(i)]) continue;
            for (int j = i + 1; j < n; ++j) {
                if (!alive[static_cast<size_t>(j)]) continue;
                const double dd = d[static_cast<size_t>(i)][static_cast<size_t>(j)];
                if (dd < best) {  // strict: ties keep the smallest (i, j) pair
                    best = dd;
                    best_i = i;
                    best_j = j;
                }
            }
        }
        const double wi = static_cast<double>(members[static_cast<size_t>(best_i)].size());
        const double wj = static_cast<double>(members[static_cast<size_t>(best_j)].size());
        for (int k = 0; k < n; ++k) {
            if (!alive[static_cast<size_t>(k)] || k == best_i || k == best_j) continue;
            const double dk = (wi * d[static_cast<size_t>(best_i)][static_cast<size_t>(k)] +
                               wj * d[static_cast<size_t>(best_j)][static_cast<size_t>(k)]) /
                              (wi + wj);
            d[static_cast<size_t>(best_i)][static_cast<size_t>(k)] = dk;
            d[static_cast<size_t>(k)][static_cast<size_t>(best_i)] = dk;
        }
        auto& mi = members[static_cast<size_t>(best_i)];
        auto& mj = members[static_cast<size_t>(best_j)];
        mi.insert(mi.end(), mj.begin(), mj.end());
        std::sort(mi.begin(), mi.end());
        mj.clear();
        alive[static_cast<size_t>(best_j)] = false;
        --remaining;
    }

    // Canonical labels: clusters ordered by their smallest member.
    std::vector<int> heads;
    for (int i = 0; i < n; ++i)
        if (alive[static_cast<size_t>(i)]) heads.push_back(members[static_cast<size_t>(i)].front());
    std::vector<int> order(heads.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<int> head_owner;
    for (int i = 0; i < n; ++i)
        if (alive[static_cast<size_t>(i)]) head_owner.push_back(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        return heads[static_cast<size_t>(a)] < heads[static_cast<size_t>(b)];
    });

    ClusterMap map;
    map.s = s;
    map.assignment.assign(static_cast<size_t>(n), -1);
    for (int rank = 0; rank < static_cast<int>(order.size()); ++rank) {
        const int src = head_owner[static_cast<size_t>(order[static_cast<size_t>(rank)])];
        for (int node : members[static_cast<size_t>(src)]) map.assignment[static_cast<size_t>(node)] = rank;
    }
    map.validate();
    return map;
}

Tensor stcs_landmarks(const Tensor& rows, const ClusterMap& clusters, int time_steps, int p, u64 seed) {
    check_arg(rows.rank() == 2, "stcs_landmarks: rank-2 input required");
    check_arg(p >= 1, msg("stcs_landmarks: sampling iterations p = ", p, " must be >= 1"));
    check_arg(time_steps >= 1, "stcs_landmarks: time_steps must be >= 1");
    clusters.validate();
    const i64 n = rows.rows(), d = rows.cols();
    const i64 n_nodes = static_cast<i64>(clusters.assignment.size());
    check_arg(n == n_nodes * time_steps,
              msg("stcs_landmarks: ", n, " rows != ", n_nodes, " nodes x ", time_steps, " steps"));
    const int s = clusters.s;

    std::vector<std::vector<i64>> cluster_nodes(static_cast<size_t>(s));
    for (i64 node = 0; node < n_nodes; ++node)
        cluster_nodes[static_cast<size_t>(clusters.assignment[static_cast<size_t>(node)])].push_back(node);

    g_scan_ops.fetch_add(static_cast<u64>(rows.size()));

    auto rng = make_rng(seed);
    std::normal_distribution<double> unit_normal(0.0, 1.0);
    const double* src = rows.data().data();

    Tensor out({static_cast<i64>(s) * time_steps, d});
    double* po = out.mutable_data();
    std::vector<double> mean(static_cast<size_t>(d)), var(static_cast<size_t>(d));
    for (int t = 0; t < time_steps; ++t) {
        for (int c = 0; c < s; ++c) {
            const auto& nodes = cluster_nodes[static_cast<size_t>(c)];
            const double inv_count = 1.0 / static_cast<double>(nodes.size());
            std::fill(mean.begin(), mean.end(), 0.0);
            std::fill(var.begin(), var.end(), 0.0);
            for (i64 node : nodes) {
                const double* row = src + (static_cast<i64>(t) * n_nodes + node) * d;
                for (i64 j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += row[j];
            }
            for (i64 j = 0; j < d; ++j) mean[static_cast<size_t>(j)] *= inv_count;
            for (i64 node : nodes) {
                const double* row = src + (static_cast<i64>(t) * n_nodes + node) * d;
                for (i64 j = 0; j < d; ++j) {
                    const double dv = row[j] - mean[static_cast<size_t>(j)];
                    var[static_cast<size_t>(j)] += dv * dv;
                }
            }
            double* lm = po + (static_cast<i64>(t) * s + c) * d;
            for (i64 j = 0; j < d; ++j) {
                const double sigma = std::sqrt(var[static_cast<size_t>(j)] * inv_count);  // population
                if (sigma == 0.0) {
                    lm[j] = mean[static_cast<size_t>(j)];  // degenerate Gaussian: exact
                    continue;
                }
                double sum = 0.0;
                for (int i = 0; i < p; ++i) sum += mean[static_cast<size_t>(j)] + sigma * unit_normal(rng);
                lm[j] = sum / static_cast<double>(p);
            }
        }
    }
    return out;
}

LandmarkSet make_landmark_set(const Tensor& q, const Tensor& k, LandmarkStrategy strategy, i64 m,
                              const LandmarkContext& ctx) {
    if (ctx.fixed != nullptr) return *ctx.fixed;
    check_arg(q.rank() == 2 && k.rank() == 2 && q.cols() == k.cols(),
              msg("make_landmark_set: Q ", shape_str(q.shape()), " and K ", shape_str(k.shape()),
                  " must be rank-2 with equal width"));
    LandmarkSet set;
    set.strategy = strategy;
    if (strategy == LandmarkStrategy::segment_means) {
        set.q_landmarks = segment_means(q, m);
        set.k_landmarks = segment_means(k, m);
        set.m = m;
    } else {
        check_arg(ctx.clusters != nullptr, "make_landmark_set: stcs requires a ClusterMap");
        check_arg(ctx.time_steps >= 1, "make_landmark_set: stcs requires time_steps");
        // Independent draws for Q and K, derived from one seed.
        set.q_landmarks = stcs_landmarks(q.detached(), *ctx.clusters, ctx.time_steps,
                                         ctx.sampling_iterations, split_seed(ctx.seed, 0));
        set.k_landmarks = stcs_landmarks(k.detached(), *ctx.clusters, ctx.time_steps,
                                         ctx.sampling_iterations, split_seed(ctx.seed, 1));
        set.m = static_cast<i64>(ctx.clusters->s) * ctx.time_steps;
        check_arg(m <= 0 || m == set.m,
                  msg("make_landmark_set: configured m = ", m, " but stcs yields s*T = ", set.m));
    }
    return set;
}

}  // namespace stf
