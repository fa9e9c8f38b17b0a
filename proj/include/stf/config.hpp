#pragma once

#include <filesystem>
#include <string>

#include "stf/model.hpp"
#include "stf/train.hpp"

namespace stf {

// Raised for configuration problems; the CLI maps it to exit code 2.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// One validated document covering model, optimizer, data and output settings.
// JSON on disk with exactly these field names; unknown keys are rejected.
struct RunConfig {
    // data
    std::string data_path;
    std::string output_dir = "out";
    double train_ratio = 0.7;
    double val_ratio = 0.1;
    double test_ratio = 0.2;

    // model
    std::string variant = "exact";                    // exact | nystrom
    std::string landmark_strategy = "segment-means";  // segment-means | stcs
    i64 landmarks = 72;
    int clusters = 6;
    int sampling_iterations = 8;
    int layers = 3;
    int heads = 4;
    int input_steps = 12;
    int forecast_steps = 12;
    int feature_dim = 24;
    int adaptive_dim = 80;
    int steps_per_day = 288;
    int days_per_week = 7;
    int feed_forward = 256;
    int pinv_iterations = 6;
    double dropout = 0.0;

    // optimizer
    double learning_rate = 0.001;
    double weight_decay = 0.0003;
    int epochs = 30;
    int batch_size = 16;
    i64 max_steps = 0;
    u64 seed = 1;

    ModelConfig to_model_config() const;
    TrainOptions to_train_options() const;
    void validate_for_training() const;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& file);
std::string run_config_to_json(const RunConfig& cfg);

}  // namespace stf
