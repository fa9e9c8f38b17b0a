#include "stf/config.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

namespace stf {

using nlohmann::json;

namespace {

template <typename T>
void take(const json& j, const char* key, T& out, std::set<std::string>& seen) {
    seen.insert(key);
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(msg("config field '", key, "' has the wrong type"));
    }
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(msg("config is not valid JSON: ", e.what()));
    }
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");

    RunConfig cfg;
    std::set<std::string> seen;
    take(j, "data_path", cfg.data_path, seen);
    take(j, "output_dir", cfg.output_dir, seen);
    take(j, "train_ratio", cfg.train_ratio, seen);
    take(j, "val_ratio", cfg.val_ratio, seen);
    take(j, "test_ratio", cfg.test_ratio, seen);
    take(j, "variant", cfg.variant, seen);
    take(j, "landmark_strategy", cfg.landmark_strategy, seen);
    take(j, "landmarks", cfg.landmarks, seen);
    take(j, "clusters", cfg.clusters, seen);
    take(j, "sampling_iterations", cfg.sampling_iterations, seen);
    take(j, "layers", cfg.layers, seen);
    take(j, "heads", cfg.heads, seen);
    take(j, "input_steps", cfg.input_steps, seen);
    take(j, "forecast_steps", cfg.forecast_steps, seen);
    take(j, "feature_dim", cfg.feature_dim, seen);
    take(j, "adaptive_dim", cfg.adaptive_dim, seen);
    take(j, "steps_per_day", cfg.steps_per_day, seen);
    take(j, "days_per_week", cfg.days_per_week, seen);
    take(j, "feed_forward", cfg.feed_forward, seen);
    take(j, "pinv_iterations", cfg.pinv_iterations, seen);
    take(j, "dropout", cfg.dropout, seen);
    take(j, "learning_rate", cfg.learning_rate, seen);
    take(j, "weight_decay", cfg.weight_decay, seen);
    take(j, "epochs", cfg.epochs, seen);
    take(j, "batch_size", cfg.batch_size, seen);
    take(j, "max_steps", cfg.max_steps, seen);
    take(j, "seed", cfg.seed, seen);

    for (const auto& [key, value] : j.items())
        if (seen.find(key) == seen.end())
            throw ConfigError(msg("unknown config key '", key, "'"));

    // Surface enum typos at parse time.
    try {
        attention_variant_from_string(cfg.variant);
        landmark_strategy_from_string(cfg.landmark_strategy);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in.good()) throw ConfigError(msg("cannot open config file ", file.string()));
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_run_config(text);
}

std::string run_config_to_json(const RunConfig& cfg) {
    json j{{"data_path", cfg.data_path},
           {"output_dir", cfg.output_dir},
           {"train_ratio", cfg.train_ratio},
           {"val_ratio", cfg.val_ratio},
           {"test_ratio", cfg.test_ratio},
           {"variant", cfg.variant},
           {"landmark_strategy", cfg.landmark_strategy},
           {"landmarks", cfg.landmarks},
           {"clusters", cfg.clusters},
           {"sampling_iterations", cfg.sampling_iterations},
           {"layers", cfg.layers},
           {"heads", cfg.heads},
           {"input_steps", cfg.input_steps},
           {"forecast_steps", cfg.forecast_steps},
           {"feature_dim", cfg.feature_dim},
           {"adaptive_dim", cfg.adaptive_dim},
           {"steps_per_day", cfg.steps_per_day},
           {"days_per_week", cfg.days_per_week},
           {"feed_forward", cfg.feed_forward},
           {"pinv_iterations", cfg.pinv_iterations},
           {"dropout", cfg.dropout},
           {"learning_rate", cfg.learning_rate},
           {"weight_decay", cfg.weight_decay},
           {"epochs", cfg.epochs},
           {"batch_size", cfg.batch_size},
           {"max_steps", cfg.max_steps},
           {"seed", cfg.seed}};
    return j.dump(2);
}

ModelConfig RunConfig::to_model_config() const {
    ModelConfig m;
    m.layers = layers;
    m.heads = heads;
    m.input_steps = input_steps;
    m.horizon = forecast_steps;
    m.embedding.d_f = feature_dim;
    m.embedding.d_a = adaptive_dim;
    m.embedding.steps_per_day = steps_per_day;
    m.embedding.days_per_week = days_per_week;
    m.feed_forward = feed_forward;
    m.variant = attention_variant_from_string(variant);
    m.landmark_strategy = landmark_strategy_from_string(landmark_strategy);
    m.landmarks = landmarks;
    m.clusters = clusters;
    m.sampling_iterations = sampling_iterations;
    m.pinv.iterations = pinv_iterations;
    m.dropout = dropout;
    try {
        m.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return m;
}

TrainOptions RunConfig::to_train_options() const {
    TrainOptions opt;
    opt.model = to_model_config();
    opt.ratios = {train_ratio, val_ratio, test_ratio};
    opt.learning_rate = learning_rate;
    opt.weight_decay = weight_decay;
    opt.epochs = epochs;
    opt.batch_size = batch_size;
    opt.max_steps = max_steps;
    opt.seed = seed;
    return opt;
}

void RunConfig::validate_for_training() const {
    if (data_path.empty())
        throw ConfigError("config field 'data_path' is required (path to a dataset bundle directory)");
    to_model_config();
    if (learning_rate <= 0) throw ConfigError("config field 'learning_rate' must be positive");
    if (epochs < 0) throw ConfigError("config field 'epochs' must be >= 0");
    if (batch_size < 1) throw ConfigError("config field 'batch_size' must be >= 1");
}

}  // namespace stf
