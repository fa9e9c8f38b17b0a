#include "stf/attention.hpp"

#include <cmath>

namespace stf {

std::string to_string(AttentionVariant v) {
    return v == AttentionVariant::exact ? "exact" : "nystrom";
}

AttentionVariant attention_variant_from_string(const std::string& s) {
    if (s == "exact") return AttentionVariant::exact;
    if (s == "nystrom") return AttentionVariant::nystrom;
    throw std::invalid_argument(msg("unknown attention variant '", s, "' (expected exact or nystrom)"));
}

void AttentionConfig::validate() const {
    check_arg(d_h >= 1 && heads >= 1, "AttentionConfig: d_h and heads must be >= 1");
    check_arg(d_h % heads == 0, msg("AttentionConfig: d_h = ", d_h, " not divisible by heads = ", heads));
    if (variant == AttentionVariant::nystrom)
        check_arg(landmarks >= 1, "AttentionConfig: landmark count must be >= 1");
}

std::array<Tensor, 3> project_qkv(const Tensor& x, const ProjectionWeights& w) {
    check_arg(x.rank() == 2, msg("project_qkv: rank-2 input required, got ", shape_str(x.shape())));
    check_arg(x.cols() == w.w_q.rows(),
              msg("project_qkv: input width ", x.cols(), " does not match projection ",
                  shape_str(w.w_q.shape())));
    return {matmul(x, w.w_q), matmul(x, w.w_k), matmul(x, w.w_v)};
}

namespace {

Tensor scaled_scores(const Tensor& a, const Tensor& b_t_source) {
    // softmax(a b^T / sqrt(d)) where d is the width of a.
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(a.cols()));
    return softmax_rows(scale(matmul(a, transpose(b_t_source)), inv_scale));
}

}  // namespace

Tensor exact_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    check_arg(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, "exact_attention: rank-2 inputs required");
    check_arg(q.rows() == k.rows() && k.rows() == v.rows() && q.cols() == k.cols(),
              msg("exact_attention: inconsistent shapes Q", shape_str(q.shape()), " K",
                  shape_str(k.shape()), " V", shape_str(v.shape())));
    return matmul(scaled_scores(q, k), v);
}

Tensor nystrom_attention(const Tensor& q, const Tensor& k, const Tensor& v, const LandmarkSet& landmarks,
                         const PinvConfig& pinv) {
    check_arg(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, "nystrom_attention: rank-2 inputs required");
    const i64 n = q.rows();
    const i64 m = landmarks.q_landmarks.rows();
    check_arg(m >= 1 && m <= n, msg("nystrom_attention: landmark count m = ", m,
                                    " must be in [1, n = ", n, "]"));
    check_arg(landmarks.k_landmarks.rows() == m, "nystrom_attention: Q/K landmark counts differ");
    check_arg(landmarks.q_landmarks.cols() == q.cols() && landmarks.k_landmarks.cols() == k.cols(),
              "nystrom_attention: landmark width does not match inputs");

    const Tensor f = scaled_scores(q, landmarks.k_landmarks);              // n x m
    const Tensor b = scaled_scores(landmarks.q_landmarks, k);              // m x n
    const Tensor a = scaled_scores(landmarks.q_landmarks, landmarks.k_landmarks);  // m x m
    const Tensor a_pinv = iterative_pinv(a, pinv);
    return matmul(f, matmul(a_pinv, matmul(b, v)));
}

Tensor multi_head(const Tensor& x, const AttentionConfig& cfg, const ProjectionWeights& w,
                  const LandmarkContext* lmctx) {
    cfg.validate();
    check_arg(x.rank() == 2 && x.cols() == cfg.d_h,
              msg("multi_head: input ", shape_str(x.shape()), " does not match d_h = ", cfg.d_h));
    auto [q, k, v] = project_qkv(x, w);

    LandmarkSet landmarks;
    const LandmarkContext empty_ctx{};
    if (cfg.variant == AttentionVariant::nystrom) {
        const LandmarkContext& ctx = lmctx ? *lmctx : empty_ctx;
        landmarks = make_landmark_set(q, k, cfg.landmark_strategy, cfg.landmarks, ctx);
    }

    const i64 dh = cfg.d_h / cfg.heads;
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(cfg.heads));
    for (int h = 0; h < cfg.heads; ++h) {
        const i64 lo = static_cast<i64>(h) * dh, hi = lo + dh;
        const Tensor qh = slice_cols(q, lo, hi);
        const Tensor kh = slice_cols(k, lo, hi);
        const Tensor vh = slice_cols(v, lo, hi);
        if (cfg.variant == AttentionVariant::exact) {
            heads.push_back(exact_attention(qh, kh, vh));
        } else {
            LandmarkSet lm_h;
            lm_h.strategy = landmarks.strategy;
            lm_h.m = landmarks.m;
            lm_h.q_landmarks = slice_cols(landmarks.q_landmarks, lo, hi);
            lm_h.k_landmarks = slice_cols(landmarks.k_landmarks, lo, hi);
            heads.push_back(nystrom_attention(qh, kh, vh, lm_h, cfg.pinv));
        }
    }
    return matmul(cfg.heads == 1 ? heads[0] : concat_cols(heads), w.w_out);
}

}  // namespace stf
