#pragma once

#include <array>

#include "stf/landmarks.hpp"
#include "stf/linalg.hpp"
#include "stf/tensor.hpp"

namespace stf {

enum class AttentionVariant { exact, nystrom };

std::string to_string(AttentionVariant v);
AttentionVariant attention_variant_from_string(const std::string& s);

struct AttentionConfig {
    int d_h = 152;
    int heads = 4;
    AttentionVariant variant = AttentionVariant::exact;
    LandmarkStrategy landmark_strategy = LandmarkStrategy::segment_means;
    i64 landmarks = 72;  // m (for stcs this must equal s * T)
    PinvConfig pinv;

    void validate() const;
};

struct ProjectionWeights {
    Tensor w_q, w_k, w_v, w_out;  // all d_h x d_h
};

std::array<Tensor, 3> project_qkv(const Tensor& x, const ProjectionWeights& w);

// softmax(Q K^T / sqrt(d)) V with the full n x n score matrix. The scale uses
// the width of the given Q, so per-head calls scale by the head width.
Tensor exact_attention(const Tensor& q, const Tensor& k, const Tensor& v);

// F (pinv(A) (B V)) with F = softmax(Q Kt^T / sqrt(d)), B = softmax(Qt K^T / sqrt(d)),
// A = softmax(Qt Kt^T / sqrt(d)). The bracketing keeps every intermediate at
// n x m or smaller; no n x n matrix is formed.
Tensor nystrom_attention(const Tensor& q, const Tensor& k, const Tensor& v, const LandmarkSet& landmarks,
                         const PinvConfig& pinv = {});

// Per-head attention over d_h/heads-wide slices, concatenated and passed
// through w_out. For the nystrom variant, landmarks are computed once from
// the full-width Q, K and sliced per head (equivalent to per-head selection,
// since both strategies act per dimension).
Tensor multi_head(const Tensor& x, const AttentionConfig& cfg, const ProjectionWeights& w,
                  const LandmarkContext* lmctx = nullptr);

}  // namespace stf
