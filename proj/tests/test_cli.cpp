#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "stf/bench.hpp"
#include "stf/config.hpp"
#include "stf/data.hpp"
#include "stf/train.hpp"

using namespace stf;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    const fs::path dir = fs::temp_directory_path() / ("stf_cli_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(STF_CLI_PATH) + " " + args + " >" + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

// Small exact-variant run configuration over a synthetic bundle.
std::string small_config_json(const fs::path& bundle_dir, const fs::path& out_dir) {
    RunConfig cfg;
    cfg.data_path = bundle_dir.string();
    cfg.output_dir = out_dir.string();
    cfg.layers = 1;
    cfg.heads = 4;
    cfg.input_steps = 4;
    cfg.forecast_steps = 4;
    cfg.feature_dim = 4;
    cfg.adaptive_dim = 8;  // d_h = 20
    cfg.feed_forward = 32;
    cfg.epochs = 1;
    cfg.batch_size = 8;
    cfg.max_steps = 5;
    cfg.seed = 9;
    return run_config_to_json(cfg);
}

}  // namespace

TEST_CASE("run config: defaults and round-trip") {
    const RunConfig defaults = parse_run_config("{}");
    CHECK(defaults.feature_dim == 24);
    CHECK(defaults.adaptive_dim == 80);
    CHECK(defaults.layers == 3);
    CHECK(defaults.heads == 4);
    CHECK(defaults.input_steps == 12);
    CHECK(defaults.forecast_steps == 12);
    CHECK(defaults.landmarks == 72);
    CHECK(defaults.clusters == 6);
    CHECK(defaults.learning_rate == 0.001);
    CHECK(defaults.weight_decay == 0.0003);
    CHECK(defaults.epochs == 30);
    CHECK(defaults.train_ratio == 0.7);

    RunConfig cfg = defaults;
    cfg.data_path = "/tmp/bundle";
    cfg.variant = "nystrom";
    cfg.seed = 1234567;
    const RunConfig back = parse_run_config(run_config_to_json(cfg));
    CHECK(back.data_path == cfg.data_path);
    CHECK(back.variant == "nystrom");
    CHECK(back.seed == 1234567);
}

TEST_CASE("run config: unknown keys and bad values are rejected by name") {
    CHECK_THROWS_WITH_AS(parse_run_config("{\"lerning_rate\": 0.1}"),
                         doctest::Contains("lerning_rate"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_run_config("{\"layers\": \"three\"}"), doctest::Contains("layers"),
                         ConfigError);
    CHECK_THROWS_AS(parse_run_config("{\"variant\": \"fast\"}"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("not json"), ConfigError);
}

TEST_CASE("run config: missing data path is reported by field name") {
    const RunConfig cfg = parse_run_config("{}");
    CHECK_THROWS_WITH_AS(cfg.validate_for_training(), doctest::Contains("data_path"), ConfigError);
}

TEST_CASE("model config derivation validates") {
    RunConfig cfg = parse_run_config("{\"heads\": 5}");
    CHECK_THROWS_AS(cfg.to_model_config(), ConfigError);  // 152 % 5 != 0
}

TEST_CASE("approx CSV round-trip") {
    std::vector<ApproxRow> rows = {{"segment-means", 256, 16, 10, 0.125, 1.5},
                                   {"stcs", 256, 256, 10, 1e-15, 3.25e-13}};
    const auto back = approx_rows_from_csv(approx_rows_to_csv(rows));
    REQUIRE(back.size() == 2);
    for (size_t i = 0; i < 2; ++i) {
        CHECK(back[i].strategy == rows[i].strategy);
        CHECK(back[i].n == rows[i].n);
        CHECK(back[i].m == rows[i].m);
        CHECK(back[i].trials == rows[i].trials);
        CHECK(back[i].mean_abs_err == rows[i].mean_abs_err);
        CHECK(back[i].max_abs_err == rows[i].max_abs_err);
    }
    CHECK_THROWS_AS(approx_rows_from_csv("bad,header\n"), std::runtime_error);
}

TEST_CASE("bench CSV round-trip") {
    std::vector<BenchRecord> records = {{"exact", "-", 768, 768, 0, 9, 123.456, 500.5, 1 << 20, 4096},
                                        {"nystrom", "stcs", 6144, 6144, 72, 9, 42.0, 99.0, 1 << 22, 64}};
    const auto back = bench_records_from_csv(bench_records_to_csv(records));
    REQUIRE(back.size() == 2);
    for (size_t i = 0; i < 2; ++i) {
        CHECK(back[i].variant == records[i].variant);
        CHECK(back[i].strategy == records[i].strategy);
        CHECK(back[i].requested_n == records[i].requested_n);
        CHECK(back[i].n == records[i].n);
        CHECK(back[i].m == records[i].m);
        CHECK(back[i].attention_ms == records[i].attention_ms);
        CHECK(back[i].model_ms == records[i].model_ms);
        CHECK(back[i].peak_bytes == records[i].peak_bytes);
        CHECK(back[i].largest_block == records[i].largest_block);
    }
}

TEST_CASE("approx report: row structure, non-negative errors, exact identity row") {
    ApproxOptions opt;
    opt.n = 128;
    opt.trials = 3;
    opt.seed = 5;
    const auto rows = run_approx_report(opt);
    REQUIRE(rows.size() == 10);  // 5 landmark counts x 2 strategies
    for (const auto& r : rows) {
        CHECK(r.mean_abs_err >= 0.0);
        CHECK(r.max_abs_err >= r.mean_abs_err);
        CHECK(r.trials == 3);
        if (r.m == r.n) CHECK(r.max_abs_err <= 1e-5);  // identity landmarks
    }
    CHECK_THROWS_AS(run_approx_report({8192, 3, 1, 64, 8, {}}), std::invalid_argument);  // too large
    CHECK_THROWS_AS(run_approx_report({100, 3, 1, 64, 8, {}}), std::invalid_argument);   // not /128
}

TEST_CASE("approx report is deterministic given a seed") {
    ApproxOptions opt;
    opt.n = 128;
    opt.trials = 2;
    opt.seed = 77;
    const auto a = run_approx_report(opt);
    const auto b = run_approx_report(opt);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].mean_abs_err == b[i].mean_abs_err);
        CHECK(a[i].max_abs_err == b[i].max_abs_err);
    }
}

TEST_CASE("scaling bench: guards, record structure, effective padding") {
    BenchOptions opt;
    opt.sizes = {96, 192};
    opt.max_n = 192;
    opt.exact_cap = 96;  // 192 exceeds the cap: no exact row for it
    opt.landmarks = 36;  // 96 % 36 != 0: segment-means pads to 108
    opt.trials = 9;
    opt.seed = 3;
    const auto records = run_scaling_bench(opt);

    bool exact_above_cap = false;
    bool padded_seen = false;
    for (const auto& r : records) {
        CHECK(r.trials >= 9);
        CHECK(r.attention_ms > 0.0);
        CHECK(r.model_ms > 0.0);
        CHECK(r.peak_bytes > 0);
        if (r.variant == "exact" && r.requested_n > opt.exact_cap) exact_above_cap = true;
        if (r.variant == "nystrom" && r.strategy == "segment-means" && r.requested_n == 96) {
            CHECK(r.n == 108);
            padded_seen = true;
        }
        if (r.variant == "nystrom") CHECK(r.m == 36);
    }
    CHECK_FALSE(exact_above_cap);
    CHECK(padded_seen);

    // The memory budget also guards the exact path independently of the cap.
    BenchOptions strict = opt;
    strict.exact_cap = 8192;
    strict.memory_budget_bytes = 1024;  // even 96 x 96 doubles exceed this
    const auto guarded = run_scaling_bench(strict);
    for (const auto& r : guarded) CHECK(r.variant != "exact");
}

TEST_CASE("loss log is line-oriented with a stable header") {
    const fs::path dir = temp_dir("losslog");
    std::vector<EpochLog> log = {{0, 0.5, 0.625, 1.25}, {1, 0.25, 0.5, 1.5}};
    write_loss_log(log, dir / "loss_log.csv");
    const std::string text = read_file(dir / "loss_log.csv");
    CHECK(text.rfind("epoch,train_loss,val_loss,seconds\n", 0) == 0);
    CHECK(text.find("\n0,0.5,0.625,1.25\n") != std::string::npos);
    CHECK(text.find("\n1,0.25,0.5,1.5\n") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("bench slope fit on synthetic records") {
    std::vector<BenchRecord> records;
    for (i64 n : {512, 1024, 2048}) {
        BenchRecord quad{"exact", "-", n, n, 0, 9,
                         1e-4 * static_cast<double>(n) * static_cast<double>(n), 0, 0, 0};
        BenchRecord lin{"nystrom", "stcs", n, n, 72, 9, 0.05 * static_cast<double>(n), 0, 0, 0};
        records.push_back(quad);
        records.push_back(lin);
    }
    const auto slopes = bench_slopes(records);
    CHECK(slopes.at("exact/-") == doctest::Approx(2.0).epsilon(1e-9));
    CHECK(slopes.at("nystrom/stcs") == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("cli: train, artifacts, determinism, eval") {
    const fs::path dir = temp_dir("train");
    const fs::path bundle_dir = dir / "bundle";
    write_bundle(generate_synthetic(5, 200, 33), bundle_dir);
    const fs::path out1 = dir / "run1";
    const fs::path out2 = dir / "run2";
    const fs::path config_file = dir / "config.json";
    std::ofstream(config_file) << small_config_json(bundle_dir, out1);

    REQUIRE(run_cli("train --config " + config_file.string(), dir / "train1.log") == 0);
    CHECK(fs::exists(out1 / "checkpoint.json"));
    CHECK(fs::exists(out1 / "loss_log.csv"));
    CHECK(fs::exists(out1 / "metrics.txt"));

    // Same seed, exact variant: bit-identical metric report.
    REQUIRE(run_cli("train --config " + config_file.string() + " --out " + out2.string(),
                    dir / "train2.log") == 0);
    CHECK(read_file(out1 / "metrics.txt") == read_file(out2 / "metrics.txt"));

    // The written report parses back to the same values.
    const MetricReport parsed = MetricReport::from_text(read_file(out1 / "metrics.txt"));
    CHECK(parsed.to_text() == read_file(out1 / "metrics.txt"));

    const fs::path eval_out = dir / "eval";
    REQUIRE(run_cli("eval --checkpoint " + (out1 / "checkpoint.json").string() + " --config " +
                        config_file.string() + " --out " + eval_out.string(),
                    dir / "eval.log") == 0);
    CHECK(fs::exists(eval_out / "metrics.txt"));

    // Node-count mismatch: evaluating against a different bundle must fail
    // with exit code 2 and no report.
    const fs::path other_bundle = dir / "bundle8";
    write_bundle(generate_synthetic(8, 200, 34), other_bundle);
    RunConfig mismatch = parse_run_config(small_config_json(other_bundle, dir / "eval_bad"));
    const fs::path bad_config = dir / "config_bad.json";
    std::ofstream(bad_config) << run_config_to_json(mismatch);
    CHECK(run_cli("eval --checkpoint " + (out1 / "checkpoint.json").string() + " --config " +
                      bad_config.string(),
                  dir / "eval_bad.log") == 2);
    CHECK_FALSE(fs::exists(dir / "eval_bad" / "metrics.txt"));

    fs::remove_all(dir);
}

TEST_CASE("cli: missing data path exits 2 naming the field") {
    const fs::path dir = temp_dir("nodata");
    const fs::path config_file = dir / "config.json";
    std::ofstream(config_file) << "{}";
    const fs::path log = dir / "train.log";
    CHECK(run_cli("train --config " + config_file.string(), log) == 2);
    CHECK(read_file(log).find("data_path") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("cli: synth writes a loadable bundle") {
    const fs::path dir = temp_dir("synth");
    const fs::path bundle_dir = dir / "bundle";
    REQUIRE(run_cli("synth --nodes 4 --length 100 --seed 5 --out " + bundle_dir.string(),
                    dir / "synth.log") == 0);
    const DatasetBundle loaded = load_bundle(bundle_dir);
    CHECK(loaded.flow.n_nodes == 4);
    CHECK(loaded.flow.length == 100);
    fs::remove_all(dir);
}

TEST_CASE("cli: approx-report writes a parseable CSV") {
    const fs::path dir = temp_dir("approx");
    REQUIRE(run_cli("approx-report --n 128 --trials 2 --seed 3 --out " + dir.string(),
                    dir / "report.log") == 0);
    const auto rows = approx_rows_from_csv(read_file(dir / "approx_report.csv"));
    CHECK(rows.size() == 10);
    fs::remove_all(dir);
}
