#pragma once

#include <map>
#include <string>
#include <vector>

#include "stf/attention.hpp"

namespace stf {

// Random attention inputs with near-orthogonal query rows (per 64-row group
// an orthonormal basis scaled by sqrt(d), plus Gaussian jitter); K correlates
// with Q. Score matrices of such inputs stay well-conditioned, which the
// fixed 6-step pseudoinverse needs wherever exactness is asserted.
void well_conditioned_qkv(i64 n, int d, std::mt19937_64& rng, Tensor& q, Tensor& k, Tensor& v);

// ---- approximation-quality report -------------------------------------------

struct ApproxRow {
    std::string strategy;
    i64 n = 0;
    i64 m = 0;
    int trials = 0;
    double mean_abs_err = 0.0;
    double max_abs_err = 0.0;
};

struct ApproxOptions {
    i64 n = 512;      // multiple of 128, <= 4096 (exact S must fit)
    int trials = 10;
    u64 seed = 1;
    int d = 64;
    int time_steps = 8;  // stcs rows are T groups of n/T
    PinvConfig pinv;     // 6 iterations, as in the model
};

// For m in {n/16, n/8, n/4, n/2, n} and both landmark strategies, the mean
// and max absolute deviation of Nystrom attention from exact attention over
// random trials. Inputs are drawn well-conditioned (near-orthogonal queries,
// keys correlated with queries) so the fixed-iteration pseudoinverse is not
// the bottleneck being measured.
std::vector<ApproxRow> run_approx_report(const ApproxOptions& opt);

std::string approx_rows_to_csv(const std::vector<ApproxRow>& rows);
std::vector<ApproxRow> approx_rows_from_csv(const std::string& text);

// ---- scaling benchmark --------------------------------------------------------

struct BenchRecord {
    std::string variant;   // exact | nystrom
    std::string strategy;  // "-" for exact
    i64 requested_n = 0;
    i64 n = 0;  // effective length (segment-means pads up to a multiple of m)
    i64 m = 0;
    int trials = 0;
    double attention_ms = 0.0;  // median over trials
    double model_ms = 0.0;      // secondary column: median full-model forward
    i64 peak_bytes = 0;
    i64 largest_block = 0;
};

struct BenchOptions {
    std::vector<i64> sizes = {768, 1536, 3072, 6144};
    i64 max_n = 6144;
    i64 exact_cap = 3072;                                 // exact path never runs above this
    i64 memory_budget_bytes = 4ll * 1024 * 1024 * 1024;   // guard for the n x n score matrix
    i64 landmarks = 72;
    int d_h = 152;
    int heads = 4;
    int trials = 9;        // attention timing (median, first 2 warmups discarded)
    int model_trials = 3;  // full-model timing
    int max_trials = 101;
    int time_steps = 12;  // model rows per node; stcs: s = landmarks / T
    u64 seed = 1;
};

std::vector<BenchRecord> run_scaling_bench(const BenchOptions& opt);

// Least-squares slope of log(attention time) vs log(n), one entry per
// (variant, strategy) group with at least two points.
std::map<std::string, double> bench_slopes(const std::vector<BenchRecord>& records);

std::string bench_records_to_csv(const std::vector<BenchRecord>& records);
std::vector<BenchRecord> bench_records_from_csv(const std::string& text);

}  // namespace stf
