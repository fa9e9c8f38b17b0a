#pragma once

#include "stf/tensor.hpp"

namespace stf {

struct PinvConfig {
    int iterations = 6;
};

// Approximate Moore-Penrose inverse of a square matrix by the third-order
// iteration Z <- 1/4 Z (13 I - A Z (15 I - A Z (7 I - A Z))), starting from
// Z0 = A^T / (|A|_1 |A|_inf). Built from tape ops; gradients flow through the
// whole unrolled iteration, Z0 norms included.
Tensor iterative_pinv(const Tensor& a, const PinvConfig& cfg = {});

// SVD-based pseudoinverse used as an independent test oracle. Guarded to
// m <= 64 so it cannot slip onto a hot path. Output is detached.
Tensor svd_pinv_oracle(const Tensor& a);

// |a z a - a|_F / max(|a|_F, 1e-30)
double pinv_residual(const Tensor& a, const Tensor& z);

// Largest singular value; same test-scale guard as the oracle.
double spectral_norm(const Tensor& a);

}  // namespace stf
