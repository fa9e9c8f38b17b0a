#pragma once

#include <filesystem>
#include <map>

#include "stf/checkpoint.hpp"
#include "stf/model.hpp"

namespace stf {

// Mean |pred - target| over mask-true positions; differentiable in pred.
// target and mask enter as constants.
Tensor masked_mae(const Tensor& pred, const Tensor& target, const Tensor& mask);

// Adam with decoupled weight decay (p <- p - lr*wd*p before the Adam delta).
struct OptimizerState {
    double learning_rate = 0.001;
    double weight_decay = 0.0003;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    i64 step = 0;
    std::vector<std::vector<double>> m, v;  // aligned with the parameter list

    static OptimizerState init(const std::vector<const Tensor*>& params, double lr, double wd);
    static OptimizerState init(const ModelParams& params, double lr, double wd);
};

void adam_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
               OptimizerState& state);
void adam_step(ModelParams& params, const std::vector<Tensor>& grads, OptimizerState& state);

// MAE / RMSE / MAPE (percent) per forecast horizon, in original units.
struct HorizonMetrics {
    double mae = 0.0;
    double rmse = 0.0;
    double mape_percent = 0.0;
    i64 count = 0;      // positions contributing to MAE/RMSE
    i64 excluded = 0;   // null targets skipped
};

struct MetricReport {
    std::map<int, HorizonMetrics> horizons;  // key: 1-based forecast step

    std::string to_text() const;
    static MetricReport from_text(const std::string& text);
};

// Pure metric computation on already-denormalized predictions; exposed so
// the definitions are testable without a model.
MetricReport compute_metrics(std::span<const double> pred, std::span<const double> target,
                             std::span<const uint8_t> mask, int horizon, int n_nodes,
                             std::span<const int> metric_steps);

struct TrainOptions {
    ModelConfig model;
    SplitRatios ratios;
    double learning_rate = 0.001;
    double weight_decay = 0.0003;
    int epochs = 30;
    int batch_size = 16;
    i64 max_steps = 0;  // 0 = no cap; counts Adam steps across epochs
    u64 seed = 1;
};

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double seconds = 0.0;
};

struct TrainResult {
    ModelParams params;       // final
    ModelParams best_params;  // best validation loss
    double best_val_loss = 0.0;
    std::vector<EpochLog> epochs;
    std::vector<double> step_losses;  // per-Adam-step training loss
    double step0_loss = 0.0;          // first batch loss before any update
    NormStats stats;
    ClusterMap clusters;  // populated for the stcs strategy
};

TrainResult train(const TrainOptions& opt, const DatasetBundle& bundle);

MetricReport evaluate(const ModelParams& params, const ModelConfig& cfg, const WindowStream& stream,
                      const NormStats& stats, const ClusterMap* clusters = nullptr);

// Central finite differences over every parameter of a tiny model vs the
// tape gradients. corrupt_param, when >= 0, perturbs that analytic gradient
// entry to prove the check can fail.
struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    bool pass = false;
    double tolerance = 0.0;
};

GradCheckReport gradient_check(const ModelConfig& cfg, int n_nodes, u64 seed, double tolerance,
                               i64 corrupt_param = -1);

void write_loss_log(const std::vector<EpochLog>& log, const std::filesystem::path& file);

}  // namespace stf
