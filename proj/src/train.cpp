#include "stf/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace stf {

Tensor masked_mae(const Tensor& pred, const Tensor& target, const Tensor& mask) {
    check_arg(pred.shape() == target.shape() && pred.shape() == mask.shape(),
              msg("masked_mae: shapes differ: pred ", shape_str(pred.shape()), ", target ",
                  shape_str(target.shape()), ", mask ", shape_str(mask.shape())));
    i64 count = 0;
    for (double m : mask.data()) count += (m != 0.0);
    check_arg(count > 0, "masked_mae: mask is all false");
    Tensor masked_abs = mul(abs(sub(pred, target)), mask.detached());
    return scale(sum_all(masked_abs), 1.0 / static_cast<double>(count));
}

OptimizerState OptimizerState::init(const std::vector<const Tensor*>& params, double lr, double wd) {
    OptimizerState s;
    s.learning_rate = lr;
    s.weight_decay = wd;
    for (const Tensor* t : params) {
        s.m.emplace_back(static_cast<size_t>(t->size()), 0.0);
        s.v.emplace_back(static_cast<size_t>(t->size()), 0.0);
    }
    return s;
}

OptimizerState OptimizerState::init(const ModelParams& params, double lr, double wd) {
    std::vector<const Tensor*> list;
    for (const auto& [name, t] : params.named()) list.push_back(t);
    return init(list, lr, wd);
}

void adam_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
               OptimizerState& state) {
    check_arg(params.size() == grads.size(),
              msg("adam_step: ", grads.size(), " gradients for ", params.size(), " parameters"));
    check_arg(state.m.size() == params.size(),
              "adam_step: optimizer state not initialized for these params");
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = *params[pi];
        const Tensor& g = grads[pi];
        check_arg(g.shape() == p.shape(), msg("adam_step: gradient shape ", shape_str(g.shape()),
                                              " does not match parameter shape ", shape_str(p.shape())));
        double* pd = p.mutable_data();
        const double* gd = g.data().data();
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        const i64 n = p.size();
        for (i64 i = 0; i < n; ++i) {
            // Decoupled weight decay, applied before the Adam delta.
            if (state.weight_decay != 0.0) pd[i] -= state.learning_rate * state.weight_decay * pd[i];
            m[static_cast<size_t>(i)] = state.beta1 * m[static_cast<size_t>(i)] + (1.0 - state.beta1) * gd[i];
            v[static_cast<size_t>(i)] =
                state.beta2 * v[static_cast<size_t>(i)] + (1.0 - state.beta2) * gd[i] * gd[i];
            const double mhat = m[static_cast<size_t>(i)] / bc1;
            const double vhat = v[static_cast<size_t>(i)] / bc2;
            pd[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
        }
    }
}

void adam_step(ModelParams& params, const std::vector<Tensor>& grads, OptimizerState& state) {
    std::vector<Tensor*> list;
    for (auto& [name, t] : params.named()) list.push_back(t);
    adam_step(list, grads, state);
}

// ---- metrics -------------------------------------------------------------------

MetricReport compute_metrics(std::span<const double> pred, std::span<const double> target,
                             std::span<const uint8_t> mask, int horizon, int n_nodes,
                             std::span<const int> metric_steps) {
    check_arg(pred.size() == target.size() && pred.size() == mask.size(),
              "compute_metrics: input spans differ in length");
    const size_t block = static_cast<size_t>(horizon) * static_cast<size_t>(n_nodes);
    check_arg(block > 0 && pred.size() % block == 0,
              "compute_metrics: span length is not a multiple of horizon * n_nodes");
    const size_t windows = pred.size() / block;

    MetricReport report;
    for (int step : metric_steps) {
        if (step < 1 || step > horizon) continue;
        double abs_sum = 0.0, sq_sum = 0.0, ape_sum = 0.0;
        i64 count = 0, ape_count = 0, excluded = 0;
        for (size_t w = 0; w < windows; ++w) {
            const size_t base = w * block + static_cast<size_t>(step - 1) * static_cast<size_t>(n_nodes);
            for (int j = 0; j < n_nodes; ++j) {
                if (mask[base + static_cast<size_t>(j)] == 0) {
                    ++excluded;
                    continue;
                }
                const double err = pred[base + static_cast<size_t>(j)] - target[base + static_cast<size_t>(j)];
                abs_sum += std::fabs(err);
                sq_sum += err * err;
                ++count;
                const double t = target[base + static_cast<size_t>(j)];
                if (std::fabs(t) >= 1e-6) {  // MAPE undefined near zero targets
                    ape_sum += std::fabs(err / t);
                    ++ape_count;
                }
            }
        }
        check_runtime(count > 0, msg("compute_metrics: no valid targets at horizon step ", step));
        HorizonMetrics hm;
        hm.mae = abs_sum / static_cast<double>(count);
        hm.rmse = std::sqrt(sq_sum / static_cast<double>(count));
        hm.mape_percent = ape_count > 0 ? 100.0 * ape_sum / static_cast<double>(ape_count) : 0.0;
        hm.count = count;
        hm.excluded = excluded;
        report.horizons[step] = hm;
    }
    return report;
}

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

std::string MetricReport::to_text() const {
    std::ostringstream os;
    for (const auto& [step, hm] : horizons) {
        const std::string prefix = "horizon_" + std::to_string(step) + ".";
        os << prefix << "mae: " << fmt_double(hm.mae) << "\n";
        os << prefix << "rmse: " << fmt_double(hm.rmse) << "\n";
        os << prefix << "mape_percent: " << fmt_double(hm.mape_percent) << "\n";
        os << prefix << "count: " << hm.count << "\n";
        os << prefix << "excluded: " << hm.excluded << "\n";
    }
    return os.str();
}

MetricReport MetricReport::from_text(const std::string& text) {
    MetricReport report;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto colon = line.find(':');
        check_runtime(colon != std::string::npos, msg("metric report line without ':': '", line, "'"));
        std::string key = line.substr(0, colon);
        const std::string value = line.substr(colon + 1);
        check_runtime(key.rfind("horizon_", 0) == 0, msg("unexpected metric key '", key, "'"));
        const auto dot = key.find('.');
        check_runtime(dot != std::string::npos, msg("metric key without field: '", key, "'"));
        const int step = std::stoi(key.substr(8, dot - 8));
        const std::string field = key.substr(dot + 1);
        HorizonMetrics& hm = report.horizons[step];
        if (field == "mae") {
            hm.mae = std::stod(value);
        } else if (field == "rmse") {
            hm.rmse = std::stod(value);
        } else if (field == "mape_percent") {
            hm.mape_percent = std::stod(value);
        } else if (field == "count") {
            hm.count = std::stoll(value);
        } else if (field == "excluded") {
            hm.excluded = std::stoll(value);
        } else {
            throw std::runtime_error(msg("unknown metric field '", field, "'"));
        }
    }
    return report;
}

// ---- training --------------------------------------------------------------------

namespace {

struct SampleTensors {
    Tensor target;  // T' x N x 1, normalized
    Tensor mask;    // T' x N x 1
};

SampleTensors target_tensors(const TargetBlock& tb, const NormStats& stats) {
    const i64 horizon = tb.horizon, n = tb.N;
    Tensor target({horizon, n, 1});
    Tensor mask({horizon, n, 1});
    double* pt = target.mutable_data();
    double* pm = mask.mutable_data();
    for (i64 i = 0; i < horizon * n; ++i) {
        pm[i] = tb.mask[static_cast<size_t>(i)] != 0 ? 1.0 : 0.0;
        pt[i] = tb.mask[static_cast<size_t>(i)] != 0
                    ? normalize_value(tb.values[static_cast<size_t>(i)], stats)
                    : 0.0;
    }
    return {std::move(target), std::move(mask)};
}

// Masked MAE of a stream on the normalized scale, without a tape.
double stream_masked_mae(const WindowStream& stream, const ModelParams& params, const ModelConfig& cfg,
                         const ClusterMap* clusters, u64 landmark_seed) {
    double abs_sum = 0.0;
    i64 count = 0;
    for (i64 w = 0; w < stream.size(); ++w) {
        const Window window = stream.input(w);
        const TargetBlock tb = stream.target(w);
        ForwardContext ctx;
        ctx.clusters = clusters;
        ctx.landmark_seed = split_seed(landmark_seed, static_cast<u64>(w));
        const Tensor pred = forward(window, params, cfg, &ctx);
        const auto pd = pred.data();
        for (size_t i = 0; i < tb.mask.size(); ++i) {
            if (tb.mask[i] == 0) continue;
            const double t = normalize_value(tb.values[i], stream.stats());
            abs_sum += std::fabs(pd[i] - t);
            ++count;
        }
    }
    check_runtime(count > 0, "validation stream has no valid targets");
    return abs_sum / static_cast<double>(count);
}

}  // namespace

TrainResult train(const TrainOptions& opt, const DatasetBundle& bundle) {
    opt.model.validate();
    check_arg(opt.batch_size >= 1, "train: batch_size must be >= 1");
    check_arg(opt.epochs >= 0, "train: epochs must be >= 0");

    const ModelConfig& cfg = opt.model;
    Windows windows = make_windows(bundle, cfg.input_steps, cfg.horizon, opt.ratios);

    TrainResult result;
    result.stats = windows.stats;
    const bool use_stcs =
        cfg.variant == AttentionVariant::nystrom && cfg.landmark_strategy == LandmarkStrategy::stcs;
    if (use_stcs) result.clusters = agglomerative_cluster(bundle.geometry, cfg.clusters);
    const ClusterMap* clusters = use_stcs ? &result.clusters : nullptr;

    ModelParams params = init_params(cfg, bundle.flow.n_nodes, opt.seed);
    OptimizerState state = OptimizerState::init(params, opt.learning_rate, opt.weight_decay);

    result.best_params = params;
    result.best_val_loss = std::numeric_limits<double>::infinity();

    std::vector<i64> order(static_cast<size_t>(windows.train.size()));
    std::iota(order.begin(), order.end(), 0);

    i64 global_step = 0;
    bool stop = false;
    for (int epoch = 0; epoch < opt.epochs && !stop; ++epoch) {
        const auto epoch_start = std::chrono::steady_clock::now();
        auto shuffle_rng = make_rng(split_seed(opt.seed, 1000 + static_cast<u64>(epoch)));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double epoch_loss_sum = 0.0;
        i64 epoch_batches = 0;
        for (size_t pos = 0; pos < order.size() && !stop; pos += static_cast<size_t>(opt.batch_size)) {
            const size_t end = std::min(order.size(), pos + static_cast<size_t>(opt.batch_size));
            std::vector<i64> batch_idx(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                       order.begin() + static_cast<std::ptrdiff_t>(end));
            const ForecastBatch batch = windows.train.batch(batch_idx);

            Tape tape;
            ModelParams watched = params.attached(tape);
            Tensor loss_sum = Tensor::scalar(0.0);
            i64 total_count = 0;
            try {
                for (size_t b = 0; b < batch.inputs.size(); ++b) {
                    ForwardContext ctx;
                    ctx.clusters = clusters;
                    ctx.landmark_seed = split_seed(
                        split_seed(opt.seed, 7777 + static_cast<u64>(global_step)), static_cast<u64>(b));
                    ctx.training = true;
                    ctx.dropout_seed = split_seed(
                        split_seed(opt.seed, 9999 + static_cast<u64>(global_step)), static_cast<u64>(b));
                    const Tensor pred = forward(batch.inputs[b], watched, cfg, &ctx);
                    const SampleTensors st = target_tensors(batch.targets[b], windows.stats);
                    i64 cnt = 0;
                    for (double m : st.mask.data()) cnt += (m != 0.0);
                    total_count += cnt;
                    loss_sum = add(loss_sum, sum_all(mul(abs(sub(pred, st.target)), st.mask)));
                }
            } catch (const std::runtime_error& e) {
                // Non-finite activations surface inside the forward pass.
                throw std::runtime_error(msg("training diverged at epoch ", epoch, ", batch ",
                                             epoch_batches, ": ", e.what()));
            }
            check_runtime(total_count > 0, "train: batch has no valid targets");
            Tensor loss = scale(loss_sum, 1.0 / static_cast<double>(total_count));
            const double loss_value = loss.value();
            check_runtime(std::isfinite(loss_value),
                          msg("training diverged (non-finite loss) at epoch ", epoch, ", batch ",
                              epoch_batches));
            if (global_step == 0) result.step0_loss = loss_value;

            Gradients grads = tape.backward(loss);
            std::vector<Tensor> grad_list;
            for (const auto& [name, t] : watched.named()) grad_list.push_back(grads.of(*t));
            adam_step(params, grad_list, state);

            result.step_losses.push_back(loss_value);
            epoch_loss_sum += loss_value;
            ++epoch_batches;
            ++global_step;
            if (opt.max_steps > 0 && global_step >= opt.max_steps) stop = true;
        }

        const double val_loss = stream_masked_mae(windows.val, params, cfg, clusters,
                                                  split_seed(opt.seed, 31337));
        if (val_loss < result.best_val_loss) {
            result.best_val_loss = val_loss;
            result.best_params = params;
        }
        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
        result.epochs.push_back({epoch, epoch_batches > 0 ? epoch_loss_sum / static_cast<double>(epoch_batches)
                                                          : 0.0,
                                 val_loss, seconds});
    }

    result.params = params;
    if (!std::isfinite(result.best_val_loss)) result.best_params = params;
    return result;
}

MetricReport evaluate(const ModelParams& params, const ModelConfig& cfg, const WindowStream& stream,
                      const NormStats& stats, const ClusterMap* clusters) {
    check_arg(stream.size() > 0, "evaluate: empty test stream");
    const int horizon = cfg.horizon;
    const int n_nodes = params.n_nodes();
    std::vector<double> pred_all, target_all;
    std::vector<uint8_t> mask_all;
    pred_all.reserve(static_cast<size_t>(stream.size()) * static_cast<size_t>(horizon) *
                     static_cast<size_t>(n_nodes));
    for (i64 w = 0; w < stream.size(); ++w) {
        const Window window = stream.input(w);
        const TargetBlock tb = stream.target(w);
        ForwardContext ctx;
        ctx.clusters = clusters;
        ctx.landmark_seed = split_seed(424242, static_cast<u64>(w));
        const Tensor pred = forward(window, params, cfg, &ctx);
        const auto pd = pred.data();
        for (size_t i = 0; i < tb.values.size(); ++i) {
            pred_all.push_back(denormalize_value(pd[i], stats));
            target_all.push_back(tb.values[i]);
            mask_all.push_back(tb.mask[i]);
        }
    }
    const std::vector<int> steps = {3, 6, 12};
    return compute_metrics(pred_all, target_all, mask_all, horizon, n_nodes, steps);
}

GradCheckReport gradient_check(const ModelConfig& cfg, int n_nodes, u64 seed, double tolerance,
                               i64 corrupt_param) {
    cfg.validate();
    auto rng = make_rng(split_seed(seed, 55));
    std::normal_distribution<double> normal(0.0, 1.0);

    Window window;
    window.T = cfg.input_steps;
    window.N = n_nodes;
    window.values.resize(static_cast<size_t>(window.T) * n_nodes);
    for (double& v : window.values) v = normal(rng);
    window.day_of_week.resize(static_cast<size_t>(window.T));
    window.time_of_day.resize(static_cast<size_t>(window.T));
    for (int t = 0; t < window.T; ++t) {
        window.day_of_week[static_cast<size_t>(t)] = t % cfg.embedding.days_per_week + 1;
        window.time_of_day[static_cast<size_t>(t)] = t % cfg.embedding.steps_per_day + 1;
    }

    Tensor target({cfg.horizon, n_nodes, 1});
    {
        double* d = target.mutable_data();
        for (i64 i = 0; i < target.size(); ++i) d[i] = normal(rng);
    }
    Tensor mask = Tensor::full({cfg.horizon, n_nodes, 1}, 1.0);
    mask.mutable_data()[0] = 0.0;  // exercise the masked path

    ModelParams params = init_params(cfg, n_nodes, seed);

    const auto loss_at = [&](const ModelParams& p) {
        return masked_mae(forward(window, p, cfg, nullptr), target, mask).value();
    };

    Tape tape;
    ModelParams watched = params.attached(tape);
    Tensor loss = masked_mae(forward(window, watched, cfg, nullptr), target, mask);
    Gradients grads = tape.backward(loss);

    GradCheckReport report;
    report.tolerance = tolerance;
    const double h = 1e-6;
    auto watched_named = watched.named();
    auto named = params.named();
    i64 flat = 0;
    for (size_t pi = 0; pi < named.size(); ++pi) {
        Tensor analytic = grads.of(*watched_named[pi].second);
        const double* ag = analytic.data().data();
        Tensor& p = *named[pi].second;
        double* pd = p.mutable_data();
        for (i64 i = 0; i < p.size(); ++i, ++flat) {
            const double saved = pd[i];
            pd[i] = saved + h;
            const double up = loss_at(params);
            pd[i] = saved - h;
            const double down = loss_at(params);
            pd[i] = saved;
            const double fd = (up - down) / (2.0 * h);
            double a = ag[i];
            if (flat == corrupt_param) a = 2.0 * a + 0.05;
            const double rel = std::fabs(a - fd) / std::max({std::fabs(a), std::fabs(fd), 1.0});
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = named[pi].first + "[" + std::to_string(i) + "]";
            }
        }
    }
    report.pass = report.max_rel_err <= tolerance;
    return report;
}

void write_loss_log(const std::vector<EpochLog>& log, const std::filesystem::path& file) {
    std::ofstream out(file);
    check_runtime(out.good(), msg("cannot write loss log to ", file.string()));
    out << "epoch,train_loss,val_loss,seconds\n";
    for (const EpochLog& e : log)
        out << e.epoch << "," << fmt_double(e.train_loss) << "," << fmt_double(e.val_loss) << ","
            << fmt_double(e.seconds) << "\n";
}

}  // namespace stf
