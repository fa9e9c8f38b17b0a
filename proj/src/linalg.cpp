#include "stf/linalg.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>

namespace stf {

namespace {

Eigen::MatrixXd to_eigen(const Tensor& t) {
    Eigen::MatrixXd m(t.rows(), t.cols());
    for (i64 i = 0; i < t.rows(); ++i)
        for (i64 j = 0; j < t.cols(); ++j) m(i, j) = t(i, j);
    return m;
}

Tensor from_eigen(const Eigen::MatrixXd& m) {
    std::vector<double> data(static_cast<size_t>(m.rows() * m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            data[static_cast<size_t>(i * m.cols() + j)] = m(i, j);
    return Tensor::from_data({m.rows(), m.cols()}, std::move(data));
}

constexpr i64 kOracleMaxDim = 64;

// Z0 = A^T / (|A|_1 |A|_inf) as one differentiable unit. The norms are max
// column / row abs sums; their subgradients touch only the maximizing column
// jmax and row imax.
Tensor pinv_initial_guess(const Tensor& a, double norm1, double norm_inf, i64 jmax, i64 imax) {
    const i64 m = a.rows();
    const double s = 1.0 / (norm1 * norm_inf);
    Tensor z0({m, m});
    {
        double* pz = z0.mutable_data();
        const double* pa = a.data().data();
        for (i64 i = 0; i < m; ++i)
            for (i64 j = 0; j < m; ++j) pz[i * m + j] = pa[j * m + i] * s;
    }
    if (a.attached()) {
        Tape* tape = a.tape();
        const int na = a.node();
        auto abuf = a.buffer();
        int node = tape->record(
            z0.size(), [na, abuf, s, m, jmax, imax, norm1, norm_inf](std::span<const double> g, Tape& t) {
                auto ga = t.grad_buffer(na);
                const double* pa = abuf->data();
                double contracted = 0.0;  // <g, A^T> drives the scale sensitivity
                for (i64 i = 0; i < m; ++i)
                    for (i64 j = 0; j < m; ++j) {
                        contracted += g[static_cast<size_t>(i * m + j)] * pa[j * m + i];
                        ga[static_cast<size_t>(j * m + i)] += g[static_cast<size_t>(i * m + j)] * s;
                    }
                const auto sign = [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); };
                const double dn1 = contracted * (-s / norm1);
                const double dninf = contracted * (-s / norm_inf);
                for (i64 k = 0; k < m; ++k)
                    ga[static_cast<size_t>(k * m + jmax)] += dn1 * sign(pa[k * m + jmax]);
                for (i64 l = 0; l < m; ++l)
                    ga[static_cast<size_t>(imax * m + l)] += dninf * sign(pa[imax * m + l]);
            });
        z0.attach(tape, node);
    }
    return z0;
}

}  // namespace

Tensor iterative_pinv(const Tensor& a, const PinvConfig& cfg) {
    check_arg(a.rank() == 2 && a.rows() == a.cols(),
              msg("iterative_pinv: square matrix required, got ", shape_str(a.shape())));
    check_arg(cfg.iterations >= 1, "iterative_pinv: iterations must be >= 1");
    check_arg(a.all_finite(), "iterative_pinv: matrix has non-finite entries");
    const i64 m = a.rows();

    // |A|_1 = max column abs sum, |A|_inf = max row abs sum.
    double norm1 = 0.0, norm_inf = 0.0;
    double max_abs = 0.0;
    i64 jmax = 0, imax = 0;
    {
        std::vector<double> col_sums(static_cast<size_t>(m), 0.0);
        const auto data = a.data();
        for (i64 i = 0; i < m; ++i) {
            double row_sum = 0.0;
            for (i64 j = 0; j < m; ++j) {
                const double v = std::fabs(data[static_cast<size_t>(i * m + j)]);
                row_sum += v;
                col_sums[static_cast<size_t>(j)] += v;
                max_abs = std::max(max_abs, v);
            }
            if (row_sum > norm_inf) {
                norm_inf = row_sum;
                imax = i;
            }
        }
        for (i64 j = 0; j < m; ++j)
            if (col_sums[static_cast<size_t>(j)] > norm1) {
                norm1 = col_sums[static_cast<size_t>(j)];
                jmax = j;
            }
    }
    if (max_abs == 0.0) return Tensor::zeros({m, m});  // pinv of the zero matrix

    const Tensor eye7 = scale(Tensor::identity(m), 7.0);
    const Tensor eye15 = scale(Tensor::identity(m), 15.0);
    const Tensor eye13 = scale(Tensor::identity(m), 13.0);

    Tensor z = pinv_initial_guess(a, norm1, norm_inf, jmax, imax);
    for (int j = 0; j < cfg.iterations; ++j) {
        check_runtime(z.all_finite(),
                      msg("iterative_pinv: iteration diverged at iteration ", j));
        Tensor az = matmul(a, z);
        Tensor inner = sub(eye7, az);
        inner = sub(eye15, matmul(az, inner));
        inner = sub(eye13, matmul(az, inner));
        z = scale(matmul(z, inner), 0.25);
    }
    check_runtime(z.all_finite(),
                  msg("iterative_pinv: iteration diverged at iteration ", cfg.iterations));
    return z;
}

Tensor svd_pinv_oracle(const Tensor& a) {
    check_arg(a.rank() == 2 && a.rows() == a.cols(),
              msg("svd_pinv_oracle: square matrix required, got ", shape_str(a.shape())));
    check_arg(a.rows() <= kOracleMaxDim,
              msg("svd_pinv_oracle: test-scale oracle limited to m <= ", kOracleMaxDim, ", got m = ",
                  a.rows()));
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(a), Eigen::ComputeFullU | Eigen::ComputeFullV);
    const auto& sigma = svd.singularValues();
    const double cutoff = 1e-10 * (sigma.size() > 0 ? sigma(0) : 0.0);
    Eigen::VectorXd inv = sigma;
    for (Eigen::Index i = 0; i < inv.size(); ++i) inv(i) = sigma(i) > cutoff ? 1.0 / sigma(i) : 0.0;
    Eigen::MatrixXd pinv = svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
    return from_eigen(pinv);
}

double pinv_residual(const Tensor& a, const Tensor& z) {
    check_arg(a.rank() == 2 && z.rank() == 2, "pinv_residual: rank-2 inputs required");
    check_arg(a.cols() == z.rows() && z.cols() == a.rows(),
              msg("pinv_residual: shapes not conformable: ", shape_str(a.shape()), " and ",
                  shape_str(z.shape())));
    const Tensor aza = matmul(matmul(a.detached(), z.detached()), a.detached());
    double num = 0.0, den = 0.0;
    const auto pa = a.data();
    const auto pz = aza.data();
    for (size_t i = 0; i < pa.size(); ++i) {
        const double d = pz[i] - pa[i];
        num += d * d;
        den += pa[i] * pa[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-30);
}

double spectral_norm(const Tensor& a) {
    check_arg(a.rank() == 2, "spectral_norm: rank-2 input required");
    check_arg(a.rows() <= kOracleMaxDim && a.cols() <= kOracleMaxDim,
              msg("spectral_norm: test-scale helper limited to m <= ", kOracleMaxDim));
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(a));
    return svd.singularValues().size() > 0 ? svd.singularValues()(0) : 0.0;
}

}  // namespace stf
