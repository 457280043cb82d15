#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "alope/data.hpp"
#include "alope/heads.hpp"
#include "alope/lora.hpp"
#include "alope/train.hpp"
#include "alope/transformer.hpp"
#include "testutil.hpp"

using namespace alope;

namespace {

// Dump with embeddings[i][slot][k] = fill(i, slot, k) and per-sample targets.
EmbeddingDump make_dump(std::vector<std::int32_t> layers, std::int32_t source_n, std::int64_t n,
                        std::int64_t d,
                        const std::function<float(std::int64_t, std::int64_t, std::int64_t)>& fill,
                        const std::function<float(std::int64_t)>& target) {
    EmbeddingDump dump;
    dump.layers = std::move(layers);
    dump.source_n_layers = source_n;
    dump.hidden_dim = d;
    const auto n_slots = dump.n_layers();
    dump.embeddings.reserve(static_cast<std::size_t>(n * n_slots * d));
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t slot = 0; slot < n_slots; ++slot)
            for (std::int64_t k = 0; k < d; ++k) dump.embeddings.push_back(fill(i, slot, k));
    dump.targets.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) dump.targets.push_back(target(i));
    dump.validate();
    return dump;
}

// Dump whose slot `planted` carries a perfect linear signal; other slots hold
// independent noise uncorrelated with the target.
EmbeddingDump planted_dump(std::int64_t n, std::int64_t d, std::int64_t n_slots,
                           std::int64_t planted, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<float> cells(static_cast<std::size_t>(n * n_slots * d));
    for (auto& c : cells) c = static_cast<float>(rng.uniform(-1.0, 1.0));
    std::vector<double> w_star(static_cast<std::size_t>(d));
    for (std::int64_t k = 0; k < d; ++k)
        w_star[static_cast<std::size_t>(k)] = (k % 2 == 0 ? 1.0 : -1.0) * (1.0 + static_cast<double>(k)) / static_cast<double>(d);
    const auto cell = [&](std::int64_t i, std::int64_t slot, std::int64_t k) {
        return cells[static_cast<std::size_t>((i * n_slots + slot) * d + k)];
    };
    std::vector<std::int32_t> layers(static_cast<std::size_t>(n_slots));
    for (std::int64_t s = 0; s < n_slots; ++s) layers[static_cast<std::size_t>(s)] = static_cast<std::int32_t>(s);
    return make_dump(layers, static_cast<std::int32_t>(n_slots), n, d,
                     [&](std::int64_t i, std::int64_t slot, std::int64_t k) { return cell(i, slot, k); },
                     [&](std::int64_t i) {
                         double y = 0.0;
                         for (std::int64_t k = 0; k < d; ++k)
                             y += w_star[static_cast<std::size_t>(k)] * static_cast<double>(cell(i, planted, k));
                         return static_cast<float>(y);
                     });
}

std::vector<double> values_of(const Tensor<double>& t) {
    const auto s = t.data();
    return {s.begin(), s.end()};
}

}  // namespace

TEST_CASE("optimizer names parse and render") {
    CHECK(parse_optimizer("adamw") == Optimizer::adamw);
    CHECK(parse_optimizer("sgd") == Optimizer::sgd);
    CHECK(optimizer_name(Optimizer::adamw) == "adamw");
    CHECK(optimizer_name(Optimizer::sgd) == "sgd");
    CHECK_THROWS_WITH_AS(parse_optimizer("adam"), doctest::Contains("unknown optimizer"), ShapeError);
}

TEST_CASE("train config rejects nonsense settings") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    TrainConfig bad = cfg;
    bad.epochs = -1;
    CHECK_THROWS_AS(bad.validate(), ShapeError);
    bad = cfg;
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), ShapeError);
    bad = cfg;
    bad.learning_rate = 0.0;
    CHECK_THROWS_AS(bad.validate(), ShapeError);
    bad = cfg;
    bad.learning_rate = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(bad.validate(), ShapeError);
    bad = cfg;
    bad.weight_decay = -0.1;
    CHECK_THROWS_AS(bad.validate(), ShapeError);
    bad = cfg;
    bad.layers.clear();
    CHECK_THROWS_AS(bad.validate(), ShapeError);
}

TEST_CASE("adamw matches a hand-computed reference step") {
    // Two steps with constant gradients, tracked independently in scalars.
    const double lr = 0.1, wd = 0.01;
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    const std::vector<double> p0 = {1.0, -0.5};
    const std::vector<double> g = {0.5, -0.25};

    auto param = Tensor<double>::from_data({2}, std::vector<double>(p0), true);
    auto grad = param.mutable_grad();
    grad[0] = g[0];
    grad[1] = g[1];
    AdamWState state;
    adamw_step<double>({param}, state, lr, wd);

    std::vector<double> expect(2), m(2, 0.0), v(2, 0.0);
    for (int i = 0; i < 2; ++i) {
        m[i] = (1.0 - beta1) * g[i];
        v[i] = (1.0 - beta2) * g[i] * g[i];
        const double mhat = m[i] / (1.0 - beta1);
        const double vhat = v[i] / (1.0 - beta2);
        expect[i] = p0[i] - lr * mhat / (std::sqrt(vhat) + eps) - lr * wd * p0[i];
    }
    CHECK(std::abs(param.data()[0] - expect[0]) <= 1e-12);
    CHECK(std::abs(param.data()[1] - expect[1]) <= 1e-12);

    // Second step, same gradients (grads were not zeroed, values unchanged).
    adamw_step<double>({param}, state, lr, wd);
    for (int i = 0; i < 2; ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        const double mhat = m[i] / (1.0 - beta1 * beta1);
        const double vhat = v[i] / (1.0 - beta2 * beta2);
        expect[i] = expect[i] - lr * mhat / (std::sqrt(vhat) + eps) - lr * wd * expect[i];
    }
    CHECK(state.t == 2);
    CHECK(std::abs(param.data()[0] - expect[0]) <= 1e-12);
    CHECK(std::abs(param.data()[1] - expect[1]) <= 1e-12);
}

TEST_CASE("adamw with zero gradients") {
    auto param = Tensor<double>::from_data({3}, {0.25, -1.5, 2.0}, true);
    param.zero_grad();
    AdamWState state;

    SUBCASE("and zero decay leaves parameters untouched") {
        adamw_step<double>({param}, state, 0.05, 0.0);
        CHECK(param.data()[0] == 0.25);
        CHECK(param.data()[1] == -1.5);
        CHECK(param.data()[2] == 2.0);
    }
    SUBCASE("applies exactly the decoupled decay") {
        const double lr = 0.05, wd = 0.1;
        adamw_step<double>({param}, state, lr, wd);
        CHECK(param.data()[0] == 0.25 - lr * wd * 0.25);
        CHECK(param.data()[1] == -1.5 - lr * wd * -1.5);
        CHECK(param.data()[2] == 2.0 - lr * wd * 2.0);
    }
}

TEST_CASE("sgd applies lr times gradient plus decoupled decay") {
    auto param = Tensor<double>::from_data({2}, {1.0, -2.0}, true);
    auto grad = param.mutable_grad();
    grad[0] = 0.5;
    grad[1] = -1.0;
    sgd_step<double>({param}, 0.1, 0.01);
    CHECK(param.data()[0] == 1.0 - 0.1 * 0.5 - 0.1 * 0.01 * 1.0);
    CHECK(param.data()[1] == -2.0 - 0.1 * -1.0 - 0.1 * 0.01 * -2.0);
}

TEST_CASE("gradient clipping scales by the global norm") {
    auto a = Tensor<double>::from_data({2}, {0.0, 0.0}, true);
    auto b = Tensor<double>::from_data({1}, {0.0}, true);
    a.mutable_grad()[0] = 3.0;
    a.mutable_grad()[1] = 0.0;
    b.mutable_grad()[0] = 4.0;

    SUBCASE("reports the pre-clip norm and rescales") {
        const double norm = clip_grad_norm<double>({a, b}, 1.0);
        CHECK(norm == doctest::Approx(5.0));
        CHECK(a.grad()[0] == doctest::Approx(0.6));
        CHECK(b.grad()[0] == doctest::Approx(0.8));
    }
    SUBCASE("leaves gradients alone when under the limit") {
        const double norm = clip_grad_norm<double>({a, b}, 10.0);
        CHECK(norm == doctest::Approx(5.0));
        CHECK(a.grad()[0] == 3.0);
        CHECK(b.grad()[0] == 4.0);
    }
    SUBCASE("non-positive limit disables clipping") {
        const double norm = clip_grad_norm<double>({a, b}, 0.0);
        CHECK(norm == doctest::Approx(5.0));
        CHECK(a.grad()[0] == 3.0);
    }
}

TEST_CASE("full-batch descent on a linear problem decreases the loss monotonically") {
    const auto dump = planted_dump(32, 6, 1, 0, 11);
    Rng rng(5);
    auto strategy = make_strategy<double>(StrategyKind::vanilla, {0}, 6, 1, rng);
    TrainConfig cfg;
    cfg.optimizer = Optimizer::sgd;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 32;
    cfg.epochs = 40;
    cfg.grad_clip = 0.0;
    cfg.seed = 3;
    const auto report = train(dump, strategy, cfg);
    REQUIRE(report.loss_curve.size() == 40);
    for (std::size_t i = 1; i < report.loss_curve.size(); ++i)
        CHECK(report.loss_curve[i] <= report.loss_curve[i - 1] + 1e-12);
    CHECK(report.loss_curve.back() < report.loss_curve.front());
    CHECK(report.trainable_params == 6);
}

TEST_CASE("training is bitwise deterministic for a fixed seed") {
    const auto dump = planted_dump(24, 5, 2, 1, 7);
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.epochs = 3;
    cfg.seed = 42;

    const auto run = [&](std::uint64_t seed) {
        TrainConfig c = cfg;
        c.seed = seed;
        Rng rng(9);
        auto strategy = make_strategy<double>(StrategyKind::vanilla, {-1}, 5, 2, rng);
        const auto report = train(dump, strategy, c);
        return std::make_pair(report.loss_curve, values_of(strategy.head.w));
    };
    const auto first = run(42);
    const auto second = run(42);
    CHECK(first.first == second.first);
    CHECK(first.second == second.second);

    const auto other = run(43);
    CHECK(first.first != other.first);  // different shuffles => different curve
}

TEST_CASE("zero epochs trains nothing and changes nothing") {
    const auto dump = planted_dump(10, 4, 1, 0, 2);
    Rng rng(1);
    auto strategy = make_strategy<double>(StrategyKind::vanilla, {0}, 4, 1, rng);
    const auto before = values_of(strategy.head.w);
    TrainConfig cfg;
    cfg.epochs = 0;
    const auto report = train(dump, strategy, cfg);
    CHECK(report.loss_curve.empty());
    CHECK(report.val_metric.empty());
    CHECK(values_of(strategy.head.w) == before);
    CHECK(report.trainable_params == 4);
}

TEST_CASE("an exploding learning rate aborts with step diagnostics") {
    const auto dump = planted_dump(16, 4, 1, 0, 3);
    Rng rng(1);
    auto strategy = make_strategy<double>(StrategyKind::vanilla, {0}, 4, 1, rng);
    TrainConfig cfg;
    cfg.optimizer = Optimizer::sgd;
    cfg.learning_rate = 1e12;
    cfg.batch_size = 16;
    cfg.epochs = 50;
    cfg.grad_clip = 0.0;
    try {
        train(dump, strategy, cfg);
        FAIL("expected divergence");
    } catch (const TrainingDiverged& e) {
        CHECK(e.step >= 1);
        CHECK(e.lr == 1e12);
        CHECK(doctest::String(e.what()) != doctest::String(""));
    }
}

TEST_CASE("validation metrics are logged per epoch or per interval") {
    const auto dump = planted_dump(10, 4, 1, 0, 8);
    const std::vector<std::int64_t> train_idx = {0, 1, 2, 3, 4, 5, 6, 7};
    const std::vector<std::int64_t> val_idx = {8, 9};
    TrainConfig cfg;
    cfg.batch_size = 2;  // 4 steps per epoch
    cfg.epochs = 2;

    SUBCASE("per epoch by default") {
        Rng rng(4);
        auto strategy = make_strategy<double>(StrategyKind::vanilla, {0}, 4, 1, rng);
        const auto report = train(dump, strategy, cfg, &train_idx, &val_idx);
        CHECK(report.loss_curve.size() == 8);
        CHECK(report.val_metric.size() == 2);
        for (const double rho : report.val_metric) CHECK(std::isfinite(rho));
    }
    SUBCASE("every eval_every steps when set") {
        Rng rng(4);
        auto strategy = make_strategy<double>(StrategyKind::vanilla, {0}, 4, 1, rng);
        TrainConfig c = cfg;
        c.eval_every = 3;
        const auto report = train(dump, strategy, c, &train_idx, &val_idx);
        CHECK(report.loss_curve.size() == 8);
        CHECK(report.val_metric.size() == 2);  // steps 3 and 6
    }
    SUBCASE("out-of-range subset indices are rejected") {
        Rng rng(4);
        auto strategy = make_strategy<double>(StrategyKind::vanilla, {0}, 4, 1, rng);
        const std::vector<std::int64_t> bad = {0, 99};
        CHECK_THROWS_WITH_AS(train(dump, strategy, cfg, &bad, nullptr),
                             doctest::Contains("out of range"), ShapeError);
    }
}

TEST_CASE("a loss target stops training early") {
    const auto dump = planted_dump(12, 4, 1, 0, 5);
    Rng rng(2);
    auto strategy = make_strategy<double>(StrategyKind::vanilla, {0}, 4, 1, rng);
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.batch_size = 12;
    cfg.target_loss = 1e9;  // already satisfied at the first step
    const auto report = train(dump, strategy, cfg);
    CHECK(report.loss_curve.size() == 1);
}

TEST_CASE("dynamic and multihead strategies train on dumps") {
    const auto dump = planted_dump(40, 6, 3, 2, 21);
    TrainConfig cfg;
    cfg.epochs = 20;
    cfg.batch_size = 40;
    cfg.learning_rate = 0.02;

    SUBCASE("dynamic") {
        Rng rng(6);
        auto strategy = make_strategy<double>(StrategyKind::dynamic, {0, 1, 2}, 6, 3, rng);
        const auto report = train(dump, strategy, cfg);
        CHECK(report.loss_curve.back() < report.loss_curve.front());
        CHECK(report.trainable_params == 3 + 6);
    }
    SUBCASE("multihead") {
        Rng rng(6);
        auto strategy = make_strategy<double>(StrategyKind::multihead, {1, 2}, 6, 3, rng,
                                              {0.25, 0.75});
        const auto report = train(dump, strategy, cfg);
        CHECK(report.loss_curve.back() < report.loss_curve.front());
        CHECK(report.trainable_params == 2 * 6);
    }
}

TEST_CASE("live training adapts only the adapters and heads") {
    TransformerConfig mc;
    mc.n_layers = 2;
    mc.d_model = 8;
    mc.n_heads = 2;
    mc.d_ff = 12;
    mc.vocab_size = 16;
    mc.max_seq_len = 8;
    Transformer<double> model(mc, 31);

    Rng data_rng(17);
    std::vector<std::vector<std::int32_t>> sequences;
    std::vector<double> targets;
    for (int i = 0; i < 6; ++i) {
        std::vector<std::int32_t> seq;
        for (int t = 0; t < 5; ++t) seq.push_back(static_cast<std::int32_t>(1 + data_rng.below(15)));
        sequences.push_back(seq);
        targets.push_back(data_rng.uniform(-1.0, 1.0));
    }

    Rng rng(3);
    auto strategy = make_strategy<double>(StrategyKind::vanilla, {-1}, mc.d_model, mc.n_layers, rng);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.learning_rate = 1e-3;
    cfg.lora_rank = 2;
    cfg.seed = 12;
    const std::vector<std::int64_t> val_idx = {4, 5};
    const std::vector<std::int64_t> train_idx = {0, 1, 2, 3};
    const auto report = train(model, sequences, targets, strategy, cfg, &train_idx, &val_idx);

    CHECK(model.adapters().size() == 8);  // 2 layers x 4 attention projections
    CHECK(report.base_hash_before == report.base_hash_after);
    LoraConfig lcfg;
    lcfg.rank = 2;
    CHECK(report.trainable_params == lora_param_count(mc, lcfg) + strategy.n_parameters());
    CHECK(report.loss_curve.size() == 2);  // one step per epoch over 4 train samples
    CHECK(report.val_metric.size() == 2);

    // B matrices started at zero; training moved them.
    double b_norm = 0.0;
    for (const auto& [name, param] : model.named_adapter_parameters())
        if (name.back() == 'B')
            for (const double x : param.data()) b_norm += x * x;
    CHECK(b_norm > 0.0);

    SUBCASE("mismatched targets are rejected") {
        std::vector<double> short_targets(sequences.size() - 1, 0.0);
        Transformer<double> fresh(mc, 31);
        CHECK_THROWS_WITH_AS(train(fresh, sequences, short_targets, strategy, cfg),
                             doctest::Contains("counts differ"), ShapeError);
    }
}

TEST_CASE("heads-only live training leaves the model without adapters") {
    TransformerConfig mc;
    mc.n_layers = 1;
    mc.d_model = 6;
    mc.n_heads = 2;
    mc.d_ff = 8;
    mc.vocab_size = 12;
    mc.max_seq_len = 6;
    Transformer<double> model(mc, 5);

    std::vector<std::vector<std::int32_t>> sequences = {{1, 2, 3}, {4, 5}, {6, 7, 8}, {9}};
    std::vector<double> targets = {0.1, -0.4, 0.9, 0.3};
    Rng rng(8);
    auto strategy = make_strategy<double>(StrategyKind::vanilla, {-1}, mc.d_model, mc.n_layers, rng);
    TrainConfig cfg;
    cfg.train_lora = false;
    cfg.epochs = 1;
    cfg.batch_size = 2;
    const auto report = train(model, sequences, targets, strategy, cfg);
    CHECK(model.adapters().empty());
    CHECK(report.base_hash_before == report.base_hash_after);
    CHECK(report.trainable_params == strategy.n_parameters());
}

TEST_CASE("layer sweep recovers a planted layer from a dump") {
    const auto dump = planted_dump(120, 8, 3, 1, 99);
    TrainConfig cfg;
    cfg.epochs = 40;
    cfg.batch_size = 32;
    cfg.learning_rate = 0.02;
    cfg.seed = 4;
    const auto report = layer_sweep<double>(dump, {0, 1, 2}, cfg);
    REQUIRE(report.runs.size() == 3);
    CHECK(report.pairs == std::vector<std::string>{"all"});
    CHECK(report.n_train + report.n_test == 120);
    CHECK(report.n_test == 24);
    for (const auto& run : report.runs) {
        CHECK(run.ok);
        CHECK(std::isfinite(run.avg));
    }
    CHECK(report.best_layer == 1);
    const double planted = report.runs[1].avg;
    CHECK(planted > 0.9);
    CHECK(planted > report.runs[0].avg + 0.2);
    CHECK(planted > report.runs[2].avg + 0.2);
}

TEST_CASE("sweep ties break toward the layer closest to the end") {
    // Slots 0 and 2 hold identical embeddings, so their runs tie exactly.
    Rng rng(13);
    std::vector<std::vector<float>> rows;
    const std::int64_t n = 30, d = 4;
    for (std::int64_t i = 0; i < n; ++i) {
        std::vector<float> r;
        for (std::int64_t k = 0; k < d; ++k) r.push_back(static_cast<float>(rng.uniform(-1.0, 1.0)));
        rows.push_back(r);
    }
    Rng noise(14);
    std::vector<std::vector<float>> mid;
    for (std::int64_t i = 0; i < n; ++i) {
        std::vector<float> r;
        for (std::int64_t k = 0; k < d; ++k) r.push_back(static_cast<float>(noise.uniform(-1.0, 1.0)));
        mid.push_back(r);
    }
    const auto dump = make_dump({0, 1, 2}, 3, n, d,
                                [&](std::int64_t i, std::int64_t slot, std::int64_t k) {
                                    const auto& src = slot == 1 ? mid : rows;
                                    return src[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
                                },
                                [&](std::int64_t i) {
                                    return rows[static_cast<std::size_t>(i)][0] -
                                           rows[static_cast<std::size_t>(i)][2];
                                });
    TrainConfig cfg;
    cfg.epochs = 15;
    cfg.batch_size = 30;
    cfg.learning_rate = 0.05;
    const auto report = layer_sweep<double>(dump, {0, 1, 2}, cfg);
    REQUIRE(report.runs.size() == 3);
    CHECK(report.runs[0].avg == report.runs[2].avg);  // identical data, identical init
    CHECK(report.best_layer == 2);

    // The same tie expressed with signed indices resolves the same way.
    const auto signed_report = layer_sweep<double>(dump, {-3, -2, -1}, cfg);
    CHECK(signed_report.best_layer == -1);
}

TEST_CASE("sweep records per-layer failures and presses on") {
    const auto dump = planted_dump(30, 4, 2, 0, 6);
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.batch_size = 30;
    cfg.learning_rate = 0.05;

    SUBCASE("an out-of-range layer fails alone") {
        const auto report = layer_sweep<double>(dump, {0, 99}, cfg);
        REQUIRE(report.runs.size() == 2);
        CHECK(report.runs[0].ok);
        CHECK_FALSE(report.runs[1].ok);
        CHECK(!report.runs[1].error.empty());
        CHECK(report.best_layer == 0);
    }
    SUBCASE("a sweep with no usable layer throws") {
        CHECK_THROWS_WITH_AS(layer_sweep<double>(dump, {98, 99}, cfg),
                             doctest::Contains("no layer produced a usable score"),
                             std::runtime_error);
    }
    SUBCASE("an empty layer list is rejected") {
        CHECK_THROWS_AS(layer_sweep<double>(dump, {}, cfg), ShapeError);
    }
}

TEST_CASE("sweep groups test scores by pair id") {
    const auto dump = planted_dump(60, 6, 2, 1, 33);
    std::vector<std::string> pair_ids;
    for (int i = 0; i < 60; ++i) pair_ids.push_back(i % 2 == 0 ? "de-en" : "zh-en");
    TrainConfig cfg;
    cfg.epochs = 25;
    cfg.batch_size = 48;
    cfg.learning_rate = 0.02;
    const auto report = layer_sweep<double>(dump, {0, 1}, cfg, 0.25, &pair_ids);
    CHECK(report.pairs == std::vector<std::string>{"de-en", "zh-en"});
    for (const auto& run : report.runs) {
        REQUIRE(run.ok);
        REQUIRE(run.per_pair.size() == 2);
        CHECK(run.per_pair.count("de-en") == 1);
        CHECK(run.per_pair.count("zh-en") == 1);
    }
    const auto& best = report.runs[1];
    const double mean = (best.per_pair.at("de-en") + best.per_pair.at("zh-en")) / 2.0;
    CHECK(best.avg == doctest::Approx(mean).epsilon(1e-12));
    CHECK(report.best_layer == 1);

    SUBCASE("misaligned pair ids are rejected") {
        std::vector<std::string> wrong(59, "x");
        CHECK_THROWS_WITH_AS(layer_sweep<double>(dump, {0, 1}, cfg, 0.25, &wrong),
                             doctest::Contains("align"), ShapeError);
    }
}

TEST_CASE("live sweep trains an adapted model per layer") {
    TransformerConfig mc;
    mc.n_layers = 2;
    mc.d_model = 6;
    mc.n_heads = 2;
    mc.d_ff = 8;
    mc.vocab_size = 10;
    mc.max_seq_len = 6;
    const Transformer<double> base(mc, 19);

    Rng rng(23);
    std::vector<std::vector<std::int32_t>> sequences;
    std::vector<double> targets;
    std::vector<std::string> pair_ids;
    for (int i = 0; i < 10; ++i) {
        std::vector<std::int32_t> seq;
        for (int t = 0; t < 4; ++t) seq.push_back(static_cast<std::int32_t>(1 + rng.below(9)));
        sequences.push_back(seq);
        targets.push_back(rng.uniform(0.0, 1.0));
        pair_ids.push_back("all");
    }
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 8;
    cfg.lora_rank = 2;
    const auto report = layer_sweep(base, sequences, targets, pair_ids, {-1, -2}, cfg, 0.3);
    REQUIRE(report.runs.size() == 2);
    CHECK(report.n_test == 3);
    for (const auto& run : report.runs) {
        CHECK(run.ok);
        CHECK(run.train_report.base_hash_before == run.train_report.base_hash_after);
        CHECK(run.train_report.base_hash_before == base.base_hash());
    }
}
