#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "stf/bench.hpp"
#include "stf/checkpoint.hpp"
#include "stf/config.hpp"
#include "stf/train.hpp"

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& file, const std::string& text) {
    std::ofstream out(file);
    stf::check_runtime(out.good(), stf::msg("cannot write ", file.string()));
    out << text;
}

int cmd_train(const std::string& config_path, const std::string& out_override) {
    stf::RunConfig cfg = stf::load_run_config(config_path);
    cfg.validate_for_training();
    const fs::path out_dir = out_override.empty() ? fs::path(cfg.output_dir) : fs::path(out_override);
    fs::create_directories(out_dir);

    const stf::DatasetBundle bundle = stf::load_bundle(cfg.data_path);
    const stf::TrainOptions opt = cfg.to_train_options();
    std::cout << "training on '" << bundle.meta.name << "' (" << bundle.flow.n_nodes << " nodes, "
              << bundle.flow.length << " steps), variant=" << cfg.variant << "\n";
    const stf::TrainResult result = stf::train(opt, bundle);
    for (const auto& e : result.epochs)
        std::cout << "epoch " << e.epoch << ": train " << e.train_loss << ", val " << e.val_loss << " ("
                  << e.seconds << " s)\n";

    stf::Checkpoint ckpt;
    ckpt.config = opt.model;
    ckpt.n_nodes = bundle.flow.n_nodes;
    ckpt.stats = result.stats;
    ckpt.params = result.best_params;
    stf::save_checkpoint(ckpt, out_dir / "checkpoint.json");
    stf::write_loss_log(result.epochs, out_dir / "loss_log.csv");

    const stf::Windows windows = stf::make_windows(bundle, opt.model.input_steps, opt.model.horizon,
                                                   opt.ratios);
    const stf::ClusterMap* clusters = result.clusters.s > 0 ? &result.clusters : nullptr;
    const stf::MetricReport report =
        stf::evaluate(ckpt.params, opt.model, windows.test, result.stats, clusters);
    write_text(out_dir / "metrics.txt", report.to_text());
    std::cout << report.to_text();
    std::cout << "artifacts written to " << out_dir.string() << "\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& config_path,
             const std::string& out_override) {
    stf::RunConfig cfg = stf::load_run_config(config_path);
    if (cfg.data_path.empty())
        throw stf::ConfigError("config field 'data_path' is required (path to a dataset bundle directory)");
    const fs::path out_dir = out_override.empty() ? fs::path(cfg.output_dir) : fs::path(out_override);
    fs::create_directories(out_dir);

    const stf::Checkpoint ckpt = stf::load_checkpoint(checkpoint_path);
    const stf::DatasetBundle bundle = stf::load_bundle(cfg.data_path);
    if (bundle.flow.n_nodes != ckpt.n_nodes)
        throw stf::ConfigError(stf::msg("checkpoint was trained on ", ckpt.n_nodes,
                                        " nodes but the bundle has ", bundle.flow.n_nodes,
                                        " (incompatible adaptive embedding)"));

    const stf::Windows windows = stf::make_windows(bundle, ckpt.config.input_steps, ckpt.config.horizon,
                                                   {cfg.train_ratio, cfg.val_ratio, cfg.test_ratio});
    stf::ClusterMap clusters;
    const stf::ClusterMap* cluster_ptr = nullptr;
    if (ckpt.config.variant == stf::AttentionVariant::nystrom &&
        ckpt.config.landmark_strategy == stf::LandmarkStrategy::stcs) {
        clusters = stf::agglomerative_cluster(bundle.geometry, ckpt.config.clusters);
        cluster_ptr = &clusters;
    }
    const stf::MetricReport report =
        stf::evaluate(ckpt.params, ckpt.config, windows.test, ckpt.stats, cluster_ptr);
    write_text(out_dir / "metrics.txt", report.to_text());
    std::cout << report.to_text();
    return 0;
}

int cmd_approx_report(stf::i64 n, stf::u64 seed, int trials, int pinv_iterations,
                      const std::string& out_dir_str) {
    stf::ApproxOptions opt;
    opt.n = n;
    opt.seed = seed;
    opt.trials = trials;
    opt.pinv.iterations = pinv_iterations;
    const auto rows = stf::run_approx_report(opt);
    const std::string csv = stf::approx_rows_to_csv(rows);
    const fs::path out_dir(out_dir_str);
    fs::create_directories(out_dir);
    write_text(out_dir / "approx_report.csv", csv);
    std::cout << csv;
    return 0;
}

int cmd_synth(int nodes, stf::i64 length, stf::u64 seed, const std::string& out_dir_str) {
    const stf::DatasetBundle bundle = stf::generate_synthetic(nodes, length, seed);
    stf::write_bundle(bundle, out_dir_str);
    std::cout << "synthetic bundle with " << nodes << " nodes and " << length << " steps written to "
              << out_dir_str << "\n";
    return 0;
}

int cmd_bench(stf::i64 max_n, stf::u64 seed, const std::string& out_dir_str) {
    stf::BenchOptions opt;
    opt.max_n = max_n;
    opt.seed = seed;
    const auto records = stf::run_scaling_bench(opt);
    const std::string csv = stf::bench_records_to_csv(records);
    const fs::path out_dir(out_dir_str);
    fs::create_directories(out_dir);
    write_text(out_dir / "bench.csv", csv);
    std::cout << csv;
    std::ostringstream slopes_csv;
    slopes_csv << "group,slope\n";
    for (const auto& [group, slope] : stf::bench_slopes(records))
        slopes_csv << group << "," << slope << "\n";
    write_text(out_dir / "bench_slopes.csv", slopes_csv.str());
    std::cout << slopes_csv.str();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"STformer / NSTformer traffic forecasting toolkit"};
    app.require_subcommand(1);

    std::string config_path, checkpoint_path, out_dir;

    auto* train = app.add_subcommand("train", "train a model and write checkpoint + reports");
    train->add_option("--config", config_path, "run configuration (JSON)")->required();
    train->add_option("--out", out_dir, "output directory (overrides config output_dir)");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    eval->add_option("--config", config_path, "run configuration (JSON)")->required();
    eval->add_option("--out", out_dir, "output directory");

    stf::i64 approx_n = 512;
    stf::u64 seed = 1;
    int trials = 10;
    int pinv_iterations = 6;
    std::string report_out = "out";
    auto* approx = app.add_subcommand("approx-report",
                                      "Nystrom vs exact attention error across landmark counts");
    approx->add_option("--n", approx_n, "sequence length (multiple of 128, <= 4096)");
    approx->add_option("--seed", seed, "random seed");
    approx->add_option("--trials", trials, "trials per row (>= 10 recommended)");
    approx->add_option("--pinv-iterations", pinv_iterations, "pseudoinverse iterations");
    approx->add_option("--out", report_out, "output directory");

    stf::i64 max_n = 6144;
    auto* bench = app.add_subcommand("bench", "attention scaling benchmark (exact vs nystrom)");
    bench->add_option("--max-n", max_n, "largest sequence length to measure");
    bench->add_option("--seed", seed, "random seed");
    bench->add_option("--out", report_out, "output directory");

    int synth_nodes = 8;
    stf::i64 synth_length = 2000;
    std::string synth_out = "bundle";
    auto* synth = app.add_subcommand("synth", "write a synthetic dataset bundle");
    synth->add_option("--nodes", synth_nodes, "sensor count (>= 2)");
    synth->add_option("--length", synth_length, "time steps (>= 48)");
    synth->add_option("--seed", seed, "random seed");
    synth->add_option("--out", synth_out, "bundle directory to create");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(config_path, out_dir);
        if (eval->parsed()) return cmd_eval(checkpoint_path, config_path, out_dir);
        if (approx->parsed()) return cmd_approx_report(approx_n, seed, trials, pinv_iterations, report_out);
        if (bench->parsed()) return cmd_bench(max_n, seed, report_out);
        if (synth->parsed()) return cmd_synth(synth_nodes, synth_length, seed, synth_out);
    } catch (const stf::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid argument: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
