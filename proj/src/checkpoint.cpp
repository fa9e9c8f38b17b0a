#include "stf/checkpoint.hpp"

#include <fstream>

#include <json.hpp>

namespace stf {

using nlohmann::json;

namespace {

json config_to_json(const ModelConfig& c) {
    return json{{"layers", c.layers},
                {"heads", c.heads},
                {"input_steps", c.input_steps},
                {"horizon", c.horizon},
                {"feature_dim", c.embedding.d_f},
                {"adaptive_dim", c.embedding.d_a},
                {"steps_per_day", c.embedding.steps_per_day},
                {"days_per_week", c.embedding.days_per_week},
                {"feed_forward", c.feed_forward},
                {"variant", to_string(c.variant)},
                {"landmark_strategy", to_string(c.landmark_strategy)},
                {"landmarks", c.landmarks},
                {"clusters", c.clusters},
                {"sampling_iterations", c.sampling_iterations},
                {"pinv_iterations", c.pinv.iterations},
                {"dropout", c.dropout}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.layers = j.at("layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.input_steps = j.at("input_steps").get<int>();
    c.horizon = j.at("horizon").get<int>();
    c.embedding.d_f = j.at("feature_dim").get<int>();
    c.embedding.d_a = j.at("adaptive_dim").get<int>();
    c.embedding.steps_per_day = j.at("steps_per_day").get<int>();
    c.embedding.days_per_week = j.at("days_per_week").get<int>();
    c.feed_forward = j.at("feed_forward").get<int>();
    c.variant = attention_variant_from_string(j.at("variant").get<std::string>());
    c.landmark_strategy = landmark_strategy_from_string(j.at("landmark_strategy").get<std::string>());
    c.landmarks = j.at("landmarks").get<i64>();
    c.clusters = j.at("clusters").get<int>();
    c.sampling_iterations = j.at("sampling_iterations").get<int>();
    c.pinv.iterations = j.at("pinv_iterations").get<int>();
    c.dropout = j.at("dropout").get<double>();
    return c;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& file) {
    json j;
    j["version"] = ckpt.version;
    j["config"] = config_to_json(ckpt.config);
    j["n_nodes"] = ckpt.n_nodes;
    j["normalization"] = {{"mean", ckpt.stats.mean}, {"stddev", ckpt.stats.stddev}};
    json params = json::object();
    for (const auto& [name, t] : ckpt.params.named()) {
        json entry;
        entry["shape"] = t->shape();
        entry["data"] = std::vector<double>(t->data().begin(), t->data().end());
        params[name] = std::move(entry);
    }
    j["params"] = std::move(params);
    std::ofstream out(file);
    check_runtime(out.good(), msg("cannot write checkpoint to ", file.string()));
    out << j.dump();
}

Checkpoint load_checkpoint(const std::filesystem::path& file) {
    std::ifstream in(file);
    check_runtime(in.good(), msg("cannot open checkpoint ", file.string()));
    json j = json::parse(in);
    check_runtime(j.contains("version"), "checkpoint missing mandatory version field");
    Checkpoint ckpt;
    ckpt.version = j.at("version").get<int>();
    check_runtime(ckpt.version == 1, msg("unsupported checkpoint version ", ckpt.version));
    ckpt.config = config_from_json(j.at("config"));
    ckpt.n_nodes = j.at("n_nodes").get<int>();
    ckpt.stats.mean = j.at("normalization").at("mean").get<double>();
    ckpt.stats.stddev = j.at("normalization").at("stddev").get<double>();

    ckpt.params = init_params(ckpt.config, ckpt.n_nodes, 0);
    const json& params = j.at("params");
    for (auto& [name, t] : ckpt.params.named()) {
        check_runtime(params.contains(name), msg("checkpoint missing parameter '", name, "'"));
        const json& entry = params.at(name);
        const Shape shape = entry.at("shape").get<Shape>();
        check_runtime(shape == t->shape(),
                      msg("checkpoint parameter '", name, "' has shape ", shape_str(shape),
                          ", expected ", shape_str(t->shape()),
                          " (config/checkpoint mismatch, e.g. T or N differ)"));
        auto data = entry.at("data").get<std::vector<double>>();
        *t = Tensor::from_data(shape, std::move(data));
    }
    return ckpt;
}

}  // namespace stf
