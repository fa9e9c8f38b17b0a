#include "stf/model.hpp"

#include <cmath>

namespace stf {

void ModelConfig::validate() const {
    check_arg(layers >= 1, "ModelConfig: layers must be >= 1");
    check_arg(input_steps >= 1 && horizon >= 1, "ModelConfig: T and T' must be >= 1");
    check_arg(embedding.d_f >= 1 && embedding.d_a >= 1, "ModelConfig: embedding widths must be >= 1");
    check_arg(feed_forward >= 1, "ModelConfig: feed_forward width must be >= 1");
    check_arg(heads >= 1 && embedding.d_h() % heads == 0,
              msg("ModelConfig: d_h = ", embedding.d_h(), " not divisible by heads = ", heads));
    check_arg(dropout >= 0.0 && dropout <= 0.5, msg("ModelConfig: dropout = ", dropout,
                                                    " outside [0, 0.5]"));
    check_arg(pinv.iterations >= 1, "ModelConfig: pinv iterations must be >= 1");
    if (variant == AttentionVariant::nystrom) {
        if (landmark_strategy == LandmarkStrategy::stcs)
            check_arg(clusters >= 1, "ModelConfig: stcs needs clusters >= 1");
        else
            check_arg(landmarks >= 1, "ModelConfig: segment-means needs landmarks >= 1");
        check_arg(sampling_iterations >= 1, "ModelConfig: sampling_iterations must be >= 1");
    }
}

i64 ModelConfig::resolved_landmarks() const {
    if (landmark_strategy == LandmarkStrategy::stcs)
        return static_cast<i64>(clusters) * input_steps;
    return landmarks;
}

AttentionConfig ModelConfig::attention_config() const {
    AttentionConfig a;
    a.d_h = embedding.d_h();
    a.heads = heads;
    a.variant = variant;
    a.landmark_strategy = landmark_strategy;
    a.landmarks = resolved_landmarks();
    a.pinv = pinv;
    return a;
}

namespace {

void fill_glorot(Tensor& t, i64 fan_in, i64 fan_out, std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    double* d = t.mutable_data();
    for (i64 i = 0; i < t.size(); ++i) d[i] = dist(rng);
}

void fill_normal(Tensor& t, double scale, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    double* d = t.mutable_data();
    for (i64 i = 0; i < t.size(); ++i) d[i] = scale * dist(rng);
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, int n_nodes, u64 seed) {
    cfg.validate();
    check_arg(n_nodes >= 1, "init_params: n_nodes must be >= 1");
    const i64 d_f = cfg.embedding.d_f;
    const i64 d_h = cfg.embedding.d_h();
    const i64 T = cfg.input_steps;

    auto rng = make_rng(split_seed(seed, 101));
    ModelParams p;
    p.value_proj_w = Tensor::zeros({1, d_f});
    fill_glorot(p.value_proj_w, 1, d_f, rng);
    p.value_proj_b = Tensor::zeros({d_f});
    p.tod_table = Tensor::zeros({cfg.embedding.steps_per_day, d_f});
    fill_glorot(p.tod_table, cfg.embedding.steps_per_day, d_f, rng);
    p.dow_table = Tensor::zeros({cfg.embedding.days_per_week, d_f});
    fill_glorot(p.dow_table, cfg.embedding.days_per_week, d_f, rng);
    p.adaptive_embedding = Tensor::zeros({T, n_nodes, cfg.embedding.d_a});
    fill_normal(p.adaptive_embedding, 0.01, rng);

    for (int layer = 0; layer < cfg.layers; ++layer) {
        BlockParams bp;
        for (Tensor* w : {&bp.attn.w_q, &bp.attn.w_k, &bp.attn.w_v, &bp.attn.w_out}) {
            *w = Tensor::zeros({d_h, d_h});
            fill_glorot(*w, d_h, d_h, rng);
        }
        bp.ln1_gain = Tensor::full({d_h}, 1.0);
        bp.ln1_bias = Tensor::zeros({d_h});
        bp.ln2_gain = Tensor::full({d_h}, 1.0);
        bp.ln2_bias = Tensor::zeros({d_h});
        bp.ff_w1 = Tensor::zeros({d_h, cfg.feed_forward});
        fill_glorot(bp.ff_w1, d_h, cfg.feed_forward, rng);
        bp.ff_b1 = Tensor::zeros({cfg.feed_forward});
        bp.ff_w2 = Tensor::zeros({cfg.feed_forward, d_h});
        fill_glorot(bp.ff_w2, cfg.feed_forward, d_h, rng);
        bp.ff_b2 = Tensor::zeros({d_h});
        p.blocks.push_back(std::move(bp));
    }

    p.reg_w = Tensor::zeros({T * d_h, cfg.horizon});
    fill_glorot(p.reg_w, T * d_h, cfg.horizon, rng);
    p.reg_b = Tensor::zeros({cfg.horizon});
    return p;
}

i64 ModelParams::count() const {
    i64 n = 0;
    for (const auto& [name, t] : named()) n += t->size();
    return n;
}

bool ModelParams::all_finite() const {
    for (const auto& [name, t] : named())
        if (!t->all_finite()) return false;
    return true;
}

std::vector<std::pair<std::string, const Tensor*>> ModelParams::named() const {
    auto mutable_view = const_cast<ModelParams*>(this)->named();
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.reserve(mutable_view.size());
    for (auto& [name, t] : mutable_view) out.emplace_back(name, t);
    return out;
}

std::vector<std::pair<std::string, Tensor*>> ModelParams::named() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back("value_proj_w", &value_proj_w);
    out.emplace_back("value_proj_b", &value_proj_b);
    out.emplace_back("tod_table", &tod_table);
    out.emplace_back("dow_table", &dow_table);
    out.emplace_back("adaptive_embedding", &adaptive_embedding);
    for (size_t i = 0; i < blocks.size(); ++i) {
        const std::string prefix = "block" + std::to_string(i) + ".";
        BlockParams& bp = blocks[i];
        out.emplace_back(prefix + "w_q", &bp.attn.w_q);
        out.emplace_back(prefix + "w_k", &bp.attn.w_k);
        out.emplace_back(prefix + "w_v", &bp.attn.w_v);
        out.emplace_back(prefix + "w_out", &bp.attn.w_out);
        out.emplace_back(prefix + "ln1_gain", &bp.ln1_gain);
        out.emplace_back(prefix + "ln1_bias", &bp.ln1_bias);
        out.emplace_back(prefix + "ln2_gain", &bp.ln2_gain);
        out.emplace_back(prefix + "ln2_bias", &bp.ln2_bias);
        out.emplace_back(prefix + "ff_w1", &bp.ff_w1);
        out.emplace_back(prefix + "ff_b1", &bp.ff_b1);
        out.emplace_back(prefix + "ff_w2", &bp.ff_w2);
        out.emplace_back(prefix + "ff_b2", &bp.ff_b2);
    }
    out.emplace_back("reg_w", &reg_w);
    out.emplace_back("reg_b", &reg_b);
    return out;
}

ModelParams ModelParams::attached(Tape& tape) const {
    ModelParams copy = *this;
    auto src = named();
    auto dst = copy.named();
    for (size_t i = 0; i < src.size(); ++i) *dst[i].second = tape.watch(*src[i].second);
    return copy;
}

Tensor embed(const Window& window, const ModelParams& params, const ModelConfig& cfg) {
    cfg.validate();
    const int T = window.T, N = window.N;
    check_arg(T == cfg.input_steps, msg("embed: window has T = ", T, ", config expects ", cfg.input_steps));
    check_arg(T == params.time_steps() && N == params.n_nodes(),
              msg("embed: window ", T, "x", N, " does not match adaptive embedding ",
                  shape_str(params.adaptive_embedding.shape())));
    const i64 n_tokens = static_cast<i64>(N) * T;

    std::vector<i64> tod_idx(static_cast<size_t>(n_tokens)), dow_idx(static_cast<size_t>(n_tokens));
    for (int t = 0; t < T; ++t) {
        const int dow = window.day_of_week[static_cast<size_t>(t)];
        const int tod = window.time_of_day[static_cast<size_t>(t)];
        check_arg(dow >= 1 && dow <= cfg.embedding.days_per_week,
                  msg("embed: day-of-week flag ", dow, " outside [1,", cfg.embedding.days_per_week, "]"));
        check_arg(tod >= 1 && tod <= cfg.embedding.steps_per_day,
                  msg("embed: time-of-day flag ", tod, " outside [1,", cfg.embedding.steps_per_day, "]"));
        for (int nd = 0; nd < N; ++nd) {
            const size_t tok = static_cast<size_t>(t) * N + nd;
            dow_idx[tok] = dow - 1;  // flags are 1-based externally
            tod_idx[tok] = tod - 1;
        }
    }

    Tensor value_col = Tensor::from_data({n_tokens, 1}, window.values);
    Tensor value_emb = add_rowvec(matmul(value_col, params.value_proj_w), params.value_proj_b);
    Tensor dow_emb = lookup_rows(params.dow_table, dow_idx);
    Tensor tod_emb = lookup_rows(params.tod_table, tod_idx);
    Tensor adaptive = reshape(params.adaptive_embedding, {n_tokens, cfg.embedding.d_a});
    return concat_cols({value_emb, dow_emb, tod_emb, adaptive});
}

namespace {

Tensor maybe_dropout(Tensor t, std::mt19937_64* rng, double rate) {
    if (rng == nullptr || rate <= 0.0) return t;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Tensor mask(t.shape());
    double* d = mask.mutable_data();
    const double keep_inv = 1.0 / (1.0 - rate);
    for (i64 i = 0; i < mask.size(); ++i) d[i] = unit(*rng) < rate ? 0.0 : keep_inv;
    return mul(t, mask);
}

Tensor feed_forward(const Tensor& x, const BlockParams& bp) {
    Tensor h = relu(add_rowvec(matmul(x, bp.ff_w1), bp.ff_b1));
    return add_rowvec(matmul(h, bp.ff_w2), bp.ff_b2);
}

}  // namespace

Tensor encoder_block(const Tensor& tokens, const BlockParams& bp, const ModelConfig& cfg,
                     const LandmarkContext& lmctx, std::mt19937_64* dropout_rng, double dropout) {
    const AttentionConfig attn_cfg = cfg.attention_config();
    Tensor attn_out = multi_head(layer_norm(tokens, bp.ln1_gain, bp.ln1_bias), attn_cfg, bp.attn, &lmctx);
    Tensor h = add(tokens, maybe_dropout(std::move(attn_out), dropout_rng, dropout));
    Tensor ff_out = feed_forward(layer_norm(h, bp.ln2_gain, bp.ln2_bias), bp);
    return add(h, maybe_dropout(std::move(ff_out), dropout_rng, dropout));
}

Tensor forward(const Window& window, const ModelParams& params, const ModelConfig& cfg,
               const ForwardContext* ctx) {
    cfg.validate();
    const int T = cfg.input_steps, N = window.N;
    const i64 d_h = cfg.embedding.d_h();
    const i64 n_tokens = static_cast<i64>(N) * T;

    Tensor tokens = embed(window, params, cfg);

    // Segment-means needs the padded length divisible by m; padded zero
    // tokens ride through the encoder stack and are dropped before the
    // regression layer. They never appear in the loss.
    i64 padded = n_tokens;
    if (cfg.variant == AttentionVariant::nystrom &&
        cfg.landmark_strategy == LandmarkStrategy::segment_means) {
        const i64 m = cfg.resolved_landmarks();
        check_arg(m <= n_tokens, msg("forward: landmark count m = ", m, " exceeds sequence length ",
                                     n_tokens));
        padded = (n_tokens + m - 1) / m * m;
        if (padded != n_tokens) tokens = pad_rows(tokens, padded);
    }

    LandmarkContext lmctx;
    std::mt19937_64 dropout_rng;
    std::mt19937_64* rng_ptr = nullptr;
    double dropout = 0.0;
    if (ctx != nullptr) {
        lmctx.clusters = ctx->clusters;
        lmctx.time_steps = T;
        lmctx.sampling_iterations = cfg.sampling_iterations;
        lmctx.fixed = ctx->fixed_landmarks;
        if (ctx->training && cfg.dropout > 0.0) {
            dropout_rng = make_rng(split_seed(ctx->dropout_seed, 7));
            rng_ptr = &dropout_rng;
            dropout = cfg.dropout;
        }
    } else {
        lmctx.time_steps = T;
        lmctx.sampling_iterations = cfg.sampling_iterations;
    }
    if (cfg.variant == AttentionVariant::nystrom && cfg.landmark_strategy == LandmarkStrategy::stcs)
        check_arg(lmctx.fixed != nullptr || lmctx.clusters != nullptr,
                  "forward: stcs variant requires a ClusterMap in the forward context");

    for (int layer = 0; layer < cfg.layers; ++layer) {
        lmctx.seed = split_seed(ctx ? ctx->landmark_seed : 0, static_cast<u64>(layer));
        tokens = encoder_block(tokens, params.blocks[static_cast<size_t>(layer)], cfg, lmctx, rng_ptr,
                               dropout);
    }

    if (padded != n_tokens) tokens = slice_rows(tokens, 0, n_tokens);

    // (N*T) x d_h time-major -> per node, its T feature vectors concatenated.
    Tensor by_node = reshape(permute(reshape(tokens, {T, N, d_h}), {1, 0, 2}), {N, T * d_h});
    Tensor pred = add_rowvec(matmul(by_node, params.reg_w), params.reg_b);  // N x T'
    return reshape(transpose(pred), {cfg.horizon, N, 1});
}

}  // namespace stf
