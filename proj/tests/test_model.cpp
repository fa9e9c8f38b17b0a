#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "stf/checkpoint.hpp"
#include "stf/model.hpp"
#include "testutil.hpp"

using namespace stf;
using stf::testing::random_tensor;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.heads = 1;
    cfg.input_steps = 3;
    cfg.horizon = 3;
    cfg.embedding.d_f = 2;
    cfg.embedding.d_a = 4;  // d_h = 10
    cfg.feed_forward = 16;
    return cfg;
}

Window random_window(const ModelConfig& cfg, int n_nodes, u64 seed) {
    auto rng = make_rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Window w;
    w.T = cfg.input_steps;
    w.N = n_nodes;
    w.values.resize(static_cast<size_t>(w.T) * n_nodes);
    for (double& v : w.values) v = normal(rng);
    for (int t = 0; t < w.T; ++t) {
        w.day_of_week.push_back(t % cfg.embedding.days_per_week + 1);
        w.time_of_day.push_back((t * 7) % cfg.embedding.steps_per_day + 1);
    }
    return w;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (size_t i = 0; i < a.data().size(); ++i)
        worst = std::max(worst, std::fabs(a.data()[i] - b.data()[i]));
    return worst;
}

}  // namespace

TEST_CASE("embed: zero parameters and zero values give a zero embedding") {
    const ModelConfig cfg = tiny_config();
    const int N = 4;
    ModelParams params = init_params(cfg, N, 1);
    for (auto& [name, t] : params.named()) *t = Tensor::zeros(t->shape());
    Window w = random_window(cfg, N, 2);
    std::fill(w.values.begin(), w.values.end(), 0.0);
    const Tensor tokens = embed(w, params, cfg);
    CHECK(tokens.rows() == N * cfg.input_steps);
    CHECK(tokens.cols() == cfg.embedding.d_h());
    for (double v : tokens.data()) CHECK(v == 0.0);
}

TEST_CASE("embed: changing only the day-of-week flag changes only that slice") {
    const ModelConfig cfg = tiny_config();
    const int N = 3;
    const ModelParams params = init_params(cfg, N, 3);
    Window a = random_window(cfg, N, 4);
    Window b = a;
    b.day_of_week[1] = a.day_of_week[1] % 7 + 1;

    const Tensor ea = embed(a, params, cfg);
    const Tensor eb = embed(b, params, cfg);
    const int d_f = cfg.embedding.d_f;
    for (i64 tok = 0; tok < ea.rows(); ++tok) {
        const bool affected = tok / N == 1;  // time-major: tokens of step t=1
        for (i64 c = 0; c < ea.cols(); ++c) {
            const bool dow_slice = c >= d_f && c < 2 * d_f;  // [value | dow | tod | adaptive]
            if (affected && dow_slice) continue;
            CHECK(ea(tok, c) == eb(tok, c));
        }
        if (affected) {
            bool any_diff = false;
            for (i64 c = d_f; c < 2 * d_f; ++c) any_diff |= ea(tok, c) != eb(tok, c);
            CHECK(any_diff);
        }
    }
}

TEST_CASE("embed: time-flag out of range is rejected") {
    const ModelConfig cfg = tiny_config();
    const ModelParams params = init_params(cfg, 2, 5);
    Window w = random_window(cfg, 2, 6);
    w.day_of_week[0] = 8;
    CHECK_THROWS_AS(embed(w, params, cfg), std::invalid_argument);
    w.day_of_week[0] = 1;
    w.time_of_day[0] = 0;
    CHECK_THROWS_AS(embed(w, params, cfg), std::invalid_argument);
}

TEST_CASE("embed: default dimensions produce the 2484 x 152 token matrix") {
    ModelConfig cfg;  // paper defaults: d_f 24, d_a 80, T 12
    const int N = 207;
    const ModelParams params = init_params(cfg, N, 7);
    Window w;
    w.T = 12;
    w.N = N;
    w.values.assign(static_cast<size_t>(12) * N, 0.5);
    for (int t = 0; t < 12; ++t) {
        w.day_of_week.push_back(3);
        w.time_of_day.push_back(t + 1);
    }
    const Tensor tokens = embed(w, params, cfg);
    CHECK(tokens.rows() == 2484);
    CHECK(tokens.cols() == 152);
}

TEST_CASE("encoder_block: zero sublayer weights reduce to the identity") {
    const ModelConfig cfg = tiny_config();
    ModelParams params = init_params(cfg, 4, 8);
    BlockParams& bp = params.blocks[0];
    for (Tensor* t : {&bp.attn.w_q, &bp.attn.w_k, &bp.attn.w_v, &bp.attn.w_out, &bp.ff_w1, &bp.ff_w2})
        *t = Tensor::zeros(t->shape());

    auto rng = make_rng(9);
    const Tensor tokens = random_tensor({12, cfg.embedding.d_h()}, rng);
    const Tensor out = encoder_block(tokens, bp, cfg, {}, nullptr, 0.0);
    CHECK(max_abs_diff(out, tokens) == 0.0);
}

TEST_CASE("encoder_block: shape preserved and matches a hand-composed reference") {
    const ModelConfig cfg = tiny_config();
    const ModelParams params = init_params(cfg, 4, 10);
    const BlockParams& bp = params.blocks[0];
    auto rng = make_rng(11);
    const Tensor tokens = random_tensor({8, cfg.embedding.d_h()}, rng);

    const Tensor out = encoder_block(tokens, bp, cfg, {}, nullptr, 0.0);
    CHECK(out.rows() == 8);
    CHECK(out.cols() == cfg.embedding.d_h());

    const Tensor h = add(tokens, multi_head(layer_norm(tokens, bp.ln1_gain, bp.ln1_bias),
                                            cfg.attention_config(), bp.attn));
    const Tensor ff_in = layer_norm(h, bp.ln2_gain, bp.ln2_bias);
    const Tensor ff = add_rowvec(
        matmul(relu(add_rowvec(matmul(ff_in, bp.ff_w1), bp.ff_b1)), bp.ff_w2), bp.ff_b2);
    const Tensor reference = add(h, ff);
    CHECK(max_abs_diff(out, reference) <= 1e-12);
}

TEST_CASE("forward: output shape and exact-variant determinism") {
    const ModelConfig cfg = tiny_config();
    const int N = 4;
    const ModelParams params = init_params(cfg, N, 12);
    const Window w = random_window(cfg, N, 13);

    const Tensor a = forward(w, params, cfg);
    CHECK(a.shape() == Shape{cfg.horizon, N, 1});
    const Tensor b = forward(w, params, cfg);
    for (size_t i = 0; i < a.data().size(); ++i) CHECK(a.data()[i] == b.data()[i]);  // bit-identical
}

TEST_CASE("forward: nystrom with m = n identity landmarks matches the exact variant") {
    ModelConfig cfg = tiny_config();
    const int N = 4;
    const i64 n_tokens = static_cast<i64>(N) * cfg.input_steps;
    const ModelParams params = init_params(cfg, N, 14);
    const Window w = random_window(cfg, N, 15);

    const Tensor exact_out = forward(w, params, cfg);

    cfg.variant = AttentionVariant::nystrom;
    cfg.landmark_strategy = LandmarkStrategy::segment_means;  // m = n: identity landmarks
    cfg.landmarks = n_tokens;
    // Random-init score matrices are near-uniform, hence badly conditioned;
    // give the fixed-point iteration room to converge for the comparison.
    cfg.pinv.iterations = 24;
    const Tensor nystrom_out = forward(w, params, cfg);
    CHECK(max_abs_diff(exact_out, nystrom_out) <= 1e-4);
}

TEST_CASE("forward: segment-means pads to a landmark multiple and drops the padding") {
    ModelConfig cfg = tiny_config();
    cfg.variant = AttentionVariant::nystrom;
    cfg.landmarks = 4;  // N*T = 15, padded to 16
    const int N = 5;
    const ModelParams params = init_params(cfg, N, 16);
    const Window w = random_window(cfg, N, 17);
    const Tensor out = forward(w, params, cfg);
    CHECK(out.shape() == Shape{cfg.horizon, N, 1});
    CHECK(out.all_finite());
}

TEST_CASE("forward: nystrom variant never materializes the token-squared matrix") {
    ModelConfig cfg = tiny_config();
    cfg.input_steps = 6;
    cfg.horizon = 2;
    const int N = 16;  // 96 tokens
    const i64 n_tokens = 96;
    cfg.variant = AttentionVariant::nystrom;
    cfg.landmarks = 12;
    const ModelParams params = init_params(cfg, N, 18);
    const Window w = random_window(cfg, N, 19);

    alloc_stats::reset();
    forward(w, params, cfg);
    CHECK(alloc_stats::largest_block() < n_tokens * n_tokens * static_cast<i64>(sizeof(double)));

    ModelConfig exact_cfg = cfg;
    exact_cfg.variant = AttentionVariant::exact;
    alloc_stats::reset();
    forward(w, params, exact_cfg);
    CHECK(alloc_stats::largest_block() >= n_tokens * n_tokens * static_cast<i64>(sizeof(double)));
}

TEST_CASE("init_params: deterministic, finite, and at the reference budget") {
    ModelConfig cfg;  // METR-LA defaults
    const ModelParams a = init_params(cfg, 207, 21);
    const ModelParams b = init_params(cfg, 207, 21);
    const ModelParams c = init_params(cfg, 207, 22);

    auto na = a.named();
    auto nb = b.named();
    bool identical = true, differs_with_seed = false;
    for (size_t i = 0; i < na.size(); ++i) {
        const auto da = na[i].second->data();
        const auto db = nb[i].second->data();
        for (size_t j = 0; j < da.size(); ++j) identical &= da[j] == db[j];
    }
    auto nc = c.named();
    for (size_t i = 0; i < na.size(); ++i) {
        const auto da = na[i].second->data();
        const auto dc = nc[i].second->data();
        for (size_t j = 0; j < da.size(); ++j) differs_with_seed |= da[j] != dc[j];
    }
    CHECK(identical);
    CHECK(differs_with_seed);
    CHECK(a.all_finite());

    // Reference parameter budget: 743,388 for the full-width default model.
    const double reference = 743388.0;
    CHECK(std::fabs(static_cast<double>(a.count()) - reference) <= 0.05 * reference);
}

TEST_CASE("dropout: deterministic per seed, off at evaluation") {
    ModelConfig cfg = tiny_config();
    cfg.dropout = 0.3;
    const int N = 4;
    const ModelParams params = init_params(cfg, N, 23);
    const Window w = random_window(cfg, N, 24);

    ForwardContext train_ctx;
    train_ctx.training = true;
    train_ctx.dropout_seed = 5;
    const Tensor t1 = forward(w, params, cfg, &train_ctx);
    const Tensor t2 = forward(w, params, cfg, &train_ctx);
    CHECK(max_abs_diff(t1, t2) == 0.0);

    train_ctx.dropout_seed = 6;
    const Tensor t3 = forward(w, params, cfg, &train_ctx);
    CHECK(max_abs_diff(t1, t3) > 0.0);

    ForwardContext eval_ctx;  // training = false: no dropout
    const Tensor e1 = forward(w, params, cfg, &eval_ctx);
    ModelConfig no_dropout = cfg;
    no_dropout.dropout = 0.0;
    const Tensor e2 = forward(w, params, no_dropout, nullptr);
    CHECK(max_abs_diff(e1, e2) == 0.0);
}

TEST_CASE("checkpoint: save/load round-trip is exact") {
    namespace fs = std::filesystem;
    const fs::path file = fs::temp_directory_path() / "stf_test_ckpt.json";

    Checkpoint ckpt;
    ckpt.config = tiny_config();
    ckpt.n_nodes = 4;
    ckpt.stats = {57.25, 9.125};
    ckpt.params = init_params(ckpt.config, 4, 25);
    save_checkpoint(ckpt, file);
    const Checkpoint loaded = load_checkpoint(file);

    CHECK(loaded.version == 1);
    CHECK(loaded.n_nodes == 4);
    CHECK(loaded.stats.mean == ckpt.stats.mean);
    CHECK(loaded.stats.stddev == ckpt.stats.stddev);
    auto orig = ckpt.params.named();
    auto back = loaded.params.named();
    REQUIRE(orig.size() == back.size());
    for (size_t i = 0; i < orig.size(); ++i) {
        const auto da = orig[i].second->data();
        const auto db = back[i].second->data();
        REQUIRE(da.size() == db.size());
        for (size_t j = 0; j < da.size(); ++j) CHECK(da[j] == db[j]);
    }
    fs::remove(file);
}

TEST_CASE("checkpoint: variants share all parameters (interchange)") {
    namespace fs = std::filesystem;
    const fs::path file = fs::temp_directory_path() / "stf_test_ckpt_swap.json";

    ModelConfig cfg = tiny_config();
    const int N = 4;
    Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.n_nodes = N;
    ckpt.params = init_params(cfg, N, 26);
    save_checkpoint(ckpt, file);

    Checkpoint loaded = load_checkpoint(file);
    const Window w = random_window(cfg, N, 27);
    const Tensor exact_out = forward(w, loaded.params, loaded.config);

    // Same checkpoint drives the linear-attention variant unchanged.
    loaded.config.variant = AttentionVariant::nystrom;
    loaded.config.landmark_strategy = LandmarkStrategy::segment_means;
    loaded.config.landmarks = static_cast<i64>(N) * cfg.input_steps;
    loaded.config.pinv.iterations = 24;
    const Tensor nystrom_out = forward(w, loaded.params, loaded.config);
    CHECK(max_abs_diff(exact_out, nystrom_out) <= 1e-4);
    fs::remove(file);
}

TEST_CASE("checkpoint: mismatched shapes are rejected") {
    namespace fs = std::filesystem;
    const fs::path file = fs::temp_directory_path() / "stf_test_ckpt_bad.json";

    Checkpoint ckpt;
    ckpt.config = tiny_config();
    ckpt.n_nodes = 4;
    ckpt.params = init_params(ckpt.config, 4, 28);
    save_checkpoint(ckpt, file);

    // Tamper: claim a different node count; the adaptive embedding no longer
    // matches and loading must fail.
    std::ifstream in(file);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    const auto pos = text.find("\"n_nodes\":4");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 11, "\"n_nodes\":5");
    std::ofstream(file) << text;

    CHECK_THROWS_WITH_AS(load_checkpoint(file), doctest::Contains("adaptive_embedding"),
                         std::runtime_error);
    fs::remove(file);
}

TEST_CASE("checkpoint: version field is mandatory") {
    namespace fs = std::filesystem;
    const fs::path file = fs::temp_directory_path() / "stf_test_ckpt_nover.json";
    std::ofstream(file) << "{\"config\":{}}";
    CHECK_THROWS_WITH_AS(load_checkpoint(file), doctest::Contains("version"), std::runtime_error);
    fs::remove(file);
}
