#include "stf/bench.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "stf/model.hpp"

namespace stf {

void well_conditioned_qkv(i64 n, int d, std::mt19937_64& rng, Tensor& q, Tensor& k, Tensor& v) {
    std::normal_distribution<double> normal(0.0, 1.0);
    const double beta = 0.5;
    q = Tensor::zeros({n, d});
    k = Tensor::zeros({n, d});
    v = Tensor::zeros({n, d});
    double* pq = q.mutable_data();
    double* pk = k.mutable_data();
    double* pv = v.mutable_data();
    const double root_d = std::sqrt(static_cast<double>(d));
    for (i64 base = 0; base < n; base += d) {
        Eigen::MatrixXd g(d, d);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) g(i, j) = normal(rng);
        Eigen::MatrixXd orth = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
        const i64 rows = std::min<i64>(d, n - base);
        for (i64 i = 0; i < rows; ++i)
            for (int j = 0; j < d; ++j)
                pq[(base + i) * d + j] = root_d * orth(static_cast<Eigen::Index>(i), j) + beta * normal(rng);
    }
    for (i64 i = 0; i < n * d; ++i) pk[i] = pq[i] + beta * normal(rng);
    for (i64 i = 0; i < n * d; ++i) pv[i] = normal(rng);
}

namespace {

NodeGeometry random_geometry(int n_nodes, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> coord(0.0, 100.0);
    std::vector<double> xs(static_cast<size_t>(n_nodes)), ys(static_cast<size_t>(n_nodes));
    for (int i = 0; i < n_nodes; ++i) {
        xs[static_cast<size_t>(i)] = coord(rng);
        ys[static_cast<size_t>(i)] = coord(rng);
    }
    NodeGeometry geom;
    geom.n_nodes = n_nodes;
    geom.distances.resize(static_cast<size_t>(n_nodes) * n_nodes);
    for (int i = 0; i < n_nodes; ++i)
        for (int j = 0; j < n_nodes; ++j) {
            const double dx = xs[static_cast<size_t>(i)] - xs[static_cast<size_t>(j)];
            const double dy = ys[static_cast<size_t>(i)] - ys[static_cast<size_t>(j)];
            geom.distances[static_cast<size_t>(i) * n_nodes + j] = i == j ? 0.0 : std::hypot(dx, dy);
        }
    return geom;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

std::vector<ApproxRow> run_approx_report(const ApproxOptions& opt) {
    check_arg(opt.n <= 4096, msg("approx report: n = ", opt.n, " too large to materialize exact S "
                                 "(limit 4096)"));
    check_arg(opt.n >= 128 && opt.n % 128 == 0,
              msg("approx report: n = ", opt.n, " must be a positive multiple of 128"));
    check_arg(opt.trials >= 1, "approx report: trials must be >= 1");
    const i64 n = opt.n;
    const int T = opt.time_steps;
    check_arg(n % T == 0, msg("approx report: n = ", n, " not divisible by time_steps = ", T));
    const int n_nodes = static_cast<int>(n / T);

    std::vector<ApproxRow> rows;
    const std::vector<i64> ms = {n / 16, n / 8, n / 4, n / 2, n};
    for (const LandmarkStrategy strategy : {LandmarkStrategy::segment_means, LandmarkStrategy::stcs}) {
        for (i64 m : ms) {
            auto rng = make_rng(split_seed(opt.seed, static_cast<u64>(m) * 2 +
                                                         (strategy == LandmarkStrategy::stcs ? 1 : 0)));
            const int s = static_cast<int>(m / T);
            ClusterMap clusters;
            if (strategy == LandmarkStrategy::stcs) {
                check_arg(m % T == 0, msg("approx report: stcs needs m divisible by T, got m = ", m));
                NodeGeometry geom = random_geometry(n_nodes, rng);
                clusters = agglomerative_cluster(geom, s);
            }
            double mean_sum = 0.0, max_err = 0.0;
            for (int trial = 0; trial < opt.trials; ++trial) {
                Tensor q, k, v;
                well_conditioned_qkv(n, opt.d, rng, q, k, v);
                const Tensor exact = exact_attention(q, k, v);
                LandmarkContext ctx;
                ctx.clusters = strategy == LandmarkStrategy::stcs ? &clusters : nullptr;
                ctx.time_steps = T;
                ctx.seed = split_seed(opt.seed, 91 + static_cast<u64>(trial));
                const LandmarkSet lm = make_landmark_set(q, k, strategy, m, ctx);
                const Tensor approx = nystrom_attention(q, k, v, lm, opt.pinv);
                double trial_sum = 0.0, trial_max = 0.0;
                const auto pe = exact.data();
                const auto pa = approx.data();
                for (size_t i = 0; i < pe.size(); ++i) {
                    const double e = std::fabs(pa[i] - pe[i]);
                    trial_sum += e;
                    trial_max = std::max(trial_max, e);
                }
                mean_sum += trial_sum / static_cast<double>(pe.size());
                max_err = std::max(max_err, trial_max);
            }
            ApproxRow row;
            row.strategy = to_string(strategy);
            row.n = n;
            row.m = m;
            row.trials = opt.trials;
            row.mean_abs_err = mean_sum / static_cast<double>(opt.trials);
            row.max_abs_err = max_err;
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

std::string approx_rows_to_csv(const std::vector<ApproxRow>& rows) {
    std::ostringstream os;
    os << "strategy,n,m,trials,mean_abs_err,max_abs_err\n";
    for (const auto& r : rows)
        os << r.strategy << "," << r.n << "," << r.m << "," << r.trials << ","
           << fmt_double(r.mean_abs_err) << "," << fmt_double(r.max_abs_err) << "\n";
    return os.str();
}

namespace {

std::vector<std::string> csv_cells(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    cells.push_back(cur);
    return cells;
}

}  // namespace

std::vector<ApproxRow> approx_rows_from_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    check_runtime(static_cast<bool>(std::getline(is, line)), "approx CSV is empty");
    check_runtime(line == "strategy,n,m,trials,mean_abs_err,max_abs_err",
                  msg("approx CSV has unexpected header '", line, "'"));
    std::vector<ApproxRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto cells = csv_cells(line);
        check_runtime(cells.size() == 6, msg("approx CSV row has ", cells.size(), " cells"));
        ApproxRow r;
        r.strategy = cells[0];
        r.n = std::stoll(cells[1]);
        r.m = std::stoll(cells[2]);
        r.trials = std::stoi(cells[3]);
        r.mean_abs_err = std::stod(cells[4]);
        r.max_abs_err = std::stod(cells[5]);
        rows.push_back(std::move(r));
    }
    return rows;
}

// ---- scaling benchmark -----------------------------------------------------------

namespace {

double median_ms(std::vector<double>& samples) {
    std::sort(samples.begin(), samples.end());
    const size_t n = samples.size();
    return n % 2 == 1 ? samples[n / 2] : 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
}

template <typename Fn>
double timed_median_ms(Fn&& fn, int trials, int max_trials, int warmup) {
    for (;;) {
        for (int i = 0; i < warmup; ++i) fn();
        std::vector<double> samples;
        samples.reserve(static_cast<size_t>(trials));
        for (int i = 0; i < trials; ++i) {
            const auto start = std::chrono::steady_clock::now();
            fn();
            samples.push_back(
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
                    .count());
        }
        const double med = median_ms(samples);
        if (med >= 0.5 || trials >= max_trials) return med;
        trials = std::min(max_trials, trials * 3);  // timer resolution too coarse
    }
}

Window random_window(int T, int N, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Window w;
    w.T = T;
    w.N = N;
    w.values.resize(static_cast<size_t>(T) * N);
    for (double& v : w.values) v = normal(rng);
    w.day_of_week.resize(static_cast<size_t>(T));
    w.time_of_day.resize(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) {
        w.day_of_week[static_cast<size_t>(t)] = t % 7 + 1;
        w.time_of_day[static_cast<size_t>(t)] = t % 288 + 1;
    }
    return w;
}

}  // namespace

std::vector<BenchRecord> run_scaling_bench(const BenchOptions& opt) {
    check_arg(opt.trials >= 9, "bench: at least 9 timing trials required");
    check_arg(opt.landmarks >= 1 && opt.d_h >= 1 && opt.heads >= 1, "bench: invalid dimensions");
    check_arg(opt.d_h % opt.heads == 0, "bench: d_h must be divisible by heads");
    check_arg(opt.landmarks % opt.time_steps == 0,
              msg("bench: landmarks = ", opt.landmarks, " must be divisible by time_steps = ",
                  opt.time_steps, " for the stcs rows"));

    auto rng = make_rng(split_seed(opt.seed, 2024));
    std::normal_distribution<double> normal(0.0, 1.0);

    ModelConfig base_model;
    base_model.input_steps = opt.time_steps;
    base_model.horizon = opt.time_steps;
    base_model.heads = opt.heads;
    // Default embedding widths give d_h = 152; keep the benchmark's d_h in
    // sync by construction.
    check_arg(base_model.embedding.d_h() == opt.d_h,
              msg("bench: d_h = ", opt.d_h, " must equal the model width ",
                  base_model.embedding.d_h()));

    std::vector<BenchRecord> records;
    for (i64 requested_n : opt.sizes) {
        if (requested_n > opt.max_n) continue;
        check_arg(requested_n % opt.time_steps == 0,
                  msg("bench: n = ", requested_n, " not divisible by time_steps = ", opt.time_steps));
        const int n_nodes = static_cast<int>(requested_n / opt.time_steps);
        const int s = static_cast<int>(opt.landmarks / opt.time_steps);

        struct Mode {
            AttentionVariant variant;
            LandmarkStrategy strategy;
        };
        const std::vector<Mode> modes = {{AttentionVariant::exact, LandmarkStrategy::segment_means},
                                         {AttentionVariant::nystrom, LandmarkStrategy::segment_means},
                                         {AttentionVariant::nystrom, LandmarkStrategy::stcs}};
        for (const Mode& mode : modes) {
            const bool is_exact = mode.variant == AttentionVariant::exact;
            if (is_exact) {
                if (requested_n > opt.exact_cap) continue;  // guarded, not crashed
                const i64 score_bytes = requested_n * requested_n * static_cast<i64>(sizeof(double));
                if (score_bytes > opt.memory_budget_bytes) continue;
            }

            i64 effective_n = requested_n;
            if (!is_exact && mode.strategy == LandmarkStrategy::segment_means &&
                requested_n % opt.landmarks != 0)
                effective_n = (requested_n + opt.landmarks - 1) / opt.landmarks * opt.landmarks;

            AttentionConfig attn_cfg;
            attn_cfg.d_h = opt.d_h;
            attn_cfg.heads = opt.heads;
            attn_cfg.variant = mode.variant;
            attn_cfg.landmark_strategy = mode.strategy;
            attn_cfg.landmarks = opt.landmarks;

            ProjectionWeights w;
            for (Tensor* t : {&w.w_q, &w.w_k, &w.w_v, &w.w_out}) {
                *t = Tensor::zeros({opt.d_h, opt.d_h});
                double* d = t->mutable_data();
                const double scale = 1.0 / std::sqrt(static_cast<double>(opt.d_h));
                for (i64 i = 0; i < t->size(); ++i) d[i] = scale * normal(rng);
            }
            Tensor x({effective_n, opt.d_h});
            {
                double* d = x.mutable_data();
                for (i64 i = 0; i < x.size(); ++i) d[i] = normal(rng);
            }

            ClusterMap clusters;
            LandmarkContext lmctx;
            if (mode.strategy == LandmarkStrategy::stcs && !is_exact) {
                NodeGeometry geom = random_geometry(n_nodes, rng);
                clusters = agglomerative_cluster(geom, s);
                lmctx.clusters = &clusters;
                lmctx.time_steps = opt.time_steps;
                lmctx.seed = split_seed(opt.seed, static_cast<u64>(requested_n));
            }

            alloc_stats::reset();
            const double attention_ms = timed_median_ms(
                [&] {
                    Tensor out = multi_head(x, attn_cfg, w, &lmctx);
                    (void)out;
                },
                opt.trials, opt.max_trials, 2);
            const i64 peak = alloc_stats::peak_bytes();
            const i64 largest = alloc_stats::largest_block();

            ModelConfig model_cfg = base_model;
            model_cfg.variant = mode.variant;
            model_cfg.landmark_strategy = mode.strategy;
            model_cfg.landmarks = opt.landmarks;
            model_cfg.clusters = s;
            ModelParams params = init_params(model_cfg, n_nodes, opt.seed);
            Window window = random_window(opt.time_steps, n_nodes, rng);
            ForwardContext fctx;
            fctx.clusters = lmctx.clusters;
            fctx.landmark_seed = lmctx.seed;
            const double model_ms = timed_median_ms(
                [&] {
                    Tensor out = forward(window, params, model_cfg, &fctx);
                    (void)out;
                },
                opt.model_trials, opt.model_trials, 1);

            BenchRecord rec;
            rec.variant = to_string(mode.variant);
            rec.strategy = is_exact ? "-" : to_string(mode.strategy);
            rec.requested_n = requested_n;
            rec.n = effective_n;
            rec.m = is_exact ? 0 : opt.landmarks;
            rec.trials = opt.trials;
            rec.attention_ms = attention_ms;
            rec.model_ms = model_ms;
            rec.peak_bytes = peak;
            rec.largest_block = largest;
            records.push_back(std::move(rec));
        }
    }
    return records;
}

std::map<std::string, double> bench_slopes(const std::vector<BenchRecord>& records) {
    std::map<std::string, std::vector<std::pair<double, double>>> groups;
    for (const auto& r : records)
        groups[r.variant + "/" + r.strategy].emplace_back(std::log(static_cast<double>(r.n)),
                                                          std::log(r.attention_ms));
    std::map<std::string, double> slopes;
    for (const auto& [key, pts] : groups) {
        if (pts.size() < 2) continue;
        double sx = 0, sy = 0, sxx = 0, sxy = 0;
        for (const auto& [x, y] : pts) {
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
        }
        const double n = static_cast<double>(pts.size());
        slopes[key] = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    }
    return slopes;
}

std::string bench_records_to_csv(const std::vector<BenchRecord>& records) {
    std::ostringstream os;
    os << "variant,strategy,requested_n,n,m,trials,attention_ms,model_ms,peak_bytes,largest_block\n";
    for (const auto& r : records)
        os << r.variant << "," << r.strategy << "," << r.requested_n << "," << r.n << "," << r.m << ","
           << r.trials << "," << fmt_double(r.attention_ms) << "," << fmt_double(r.model_ms) << ","
           << r.peak_bytes << "," << r.largest_block << "\n";
    return os.str();
}

std::vector<BenchRecord> bench_records_from_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    check_runtime(static_cast<bool>(std::getline(is, line)), "bench CSV is empty");
    check_runtime(line == "variant,strategy,requested_n,n,m,trials,attention_ms,model_ms,peak_bytes,"
                          "largest_block",
                  msg("bench CSV has unexpected header '", line, "'"));
    std::vector<BenchRecord> records;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto cells = csv_cells(line);
        check_runtime(cells.size() == 10, msg("bench CSV row has ", cells.size(), " cells"));
        BenchRecord r;
        r.variant = cells[0];
        r.strategy = cells[1];
        r.requested_n = std::stoll(cells[2]);
        r.n = std::stoll(cells[3]);
        r.m = std::stoll(cells[4]);
        r.trials = std::stoi(cells[5]);
        r.attention_ms = std::stod(cells[6]);
        r.model_ms = std::stod(cells[7]);
        r.peak_bytes = std::stoll(cells[8]);
        r.largest_block = std::stoll(cells[9]);
        records.push_back(std::move(r));
    }
    return records;
}

}  // namespace stf
