#pragma once

#include <utility>
#include <vector>

#include "stf/attention.hpp"
#include "stf/data.hpp"

namespace stf {

struct EmbeddingConfig {
    int d_f = 24;  // width per embedded input feature
    int d_a = 80;  // adaptive embedding width
    int steps_per_day = 288;
    int days_per_week = 7;

    int d_h() const { return 3 * d_f + d_a; }
};

struct ModelConfig {
    int layers = 3;
    int heads = 4;
    int input_steps = 12;  // T
    int horizon = 12;      // T'
    EmbeddingConfig embedding;
    int feed_forward = 256;
    AttentionVariant variant = AttentionVariant::exact;
    LandmarkStrategy landmark_strategy = LandmarkStrategy::segment_means;
    i64 landmarks = 72;  // m (segment-means)
    int clusters = 6;    // s (stcs; m = s * T)
    int sampling_iterations = 8;
    PinvConfig pinv;
    double dropout = 0.0;

    void validate() const;
    i64 resolved_landmarks() const;
    AttentionConfig attention_config() const;
};

struct BlockParams {
    ProjectionWeights attn;
    Tensor ln1_gain, ln1_bias;
    Tensor ln2_gain, ln2_bias;
    Tensor ff_w1, ff_b1, ff_w2, ff_b2;
};

// All learnable state. Tensors are detached here; training attaches them to
// a fresh tape per step via attached().
struct ModelParams {
    Tensor value_proj_w, value_proj_b;   // 1 x d_f, d_f
    Tensor tod_table, dow_table;         // steps_per_day x d_f, days_per_week x d_f
    Tensor adaptive_embedding;           // T x N x d_a
    std::vector<BlockParams> blocks;
    Tensor reg_w, reg_b;                 // (T d_h) x T', T'

    int time_steps() const { return static_cast<int>(adaptive_embedding.extent(0)); }
    int n_nodes() const { return static_cast<int>(adaptive_embedding.extent(1)); }

    i64 count() const;
    bool all_finite() const;
    std::vector<std::pair<std::string, const Tensor*>> named() const;
    std::vector<std::pair<std::string, Tensor*>> named();
    ModelParams attached(Tape& tape) const;
};

ModelParams init_params(const ModelConfig& cfg, int n_nodes, u64 seed);

// Per-forward inputs that are not parameters: cluster map and seed for stcs
// landmark sampling, dropout state, and an optional fixed landmark set used
// by tests.
struct ForwardContext {
    const ClusterMap* clusters = nullptr;
    u64 landmark_seed = 0;
    bool training = false;
    u64 dropout_seed = 0;
    const LandmarkSet* fixed_landmarks = nullptr;
};

// Window -> (N*T) x d_h ST-token matrix, time-major (all nodes of step 1,
// then step 2, ...). Columns: [value | day-of-week | time-of-day | adaptive].
Tensor embed(const Window& window, const ModelParams& params, const ModelConfig& cfg);

// Pre-norm residual block: x + MH(LN(x)), then h + FF(LN(h)).
Tensor encoder_block(const Tensor& tokens, const BlockParams& bp, const ModelConfig& cfg,
                     const LandmarkContext& lmctx, std::mt19937_64* dropout_rng, double dropout);

// Full model: embed -> encoder stack -> per-node regression over the
// concatenated T feature vectors. Output shape T' x N x 1.
Tensor forward(const Window& window, const ModelParams& params, const ModelConfig& cfg,
               const ForwardContext* ctx = nullptr);

}  // namespace stf
