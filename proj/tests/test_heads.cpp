#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdint>
#include <vector>

#include "alope/data.hpp"
#include "alope/heads.hpp"
#include "doctest.h"
#include "testutil.hpp"

using namespace alope;
using doctest::Approx;

namespace {

// A hand-built trace with one position per layer matrix; row `final` is the
// prediction site.
ForwardTrace<double> stub_trace(const std::vector<std::vector<double>>& per_layer) {
    ForwardTrace<double> tr;
    for (const auto& h : per_layer)
        tr.hidden_states.push_back(
            Tensor<double>::from_data({1, static_cast<std::int64_t>(h.size())}, h, false));
    tr.final_token_index = 0;
    return tr;
}

ForwardTrace<double> random_trace(Rng& rng, std::int64_t n_layers, std::int64_t seq,
                                  std::int64_t d, std::int64_t final_idx) {
    ForwardTrace<double> tr;
    for (std::int64_t k = 0; k < n_layers; ++k)
        tr.hidden_states.push_back(testutil::random_tensor({seq, d}, rng, false, -1.0, 1.0));
    tr.final_token_index = final_idx;
    return tr;
}

RegressionHead<double> fixed_head(std::int64_t layer, std::vector<double> w) {
    RegressionHead<double> head;
    head.layer = layer;
    const std::int64_t d = static_cast<std::int64_t>(w.size());
    head.w = Tensor<double>::from_data({d}, std::move(w), true);
    return head;
}

// Dense solve of a·x = b (row-major n×n) by Gaussian elimination with partial
// pivoting; the independent oracle for the least-squares check.
std::vector<double> solve_linear(std::vector<double> a, std::vector<double> b) {
    const std::size_t n = b.size();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
        for (std::size_t c = 0; c < n; ++c) std::swap(a[col * n + c], a[piv * n + c]);
        std::swap(b[col], b[piv]);
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = a[r * n + col] / a[col * n + col];
            for (std::size_t c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
            b[r] -= f * b[col];
        }
    }
    std::vector<double> x(n);
    for (std::size_t r = n; r-- > 0;) {
        double s = b[r];
        for (std::size_t c = r + 1; c < n; ++c) s -= a[r * n + c] * x[c];
        x[r] = s / a[r * n + r];
    }
    return x;
}

}  // namespace

TEST_CASE("vanilla head computes the dot product with the selected layer state") {
    const auto tr = stub_trace({{1, 2, 3}, {4, 5, 6}});

    CHECK(predict_vanilla(tr, fixed_head(-1, {0, 0, 0})).item() == 0.0);
    CHECK(predict_vanilla(tr, fixed_head(0, {3, 0, 0})).item() == 3.0);
    CHECK(predict_vanilla(tr, fixed_head(-1, {3, 0, 0})).item() == 12.0);

    const double once = predict_vanilla(tr, fixed_head(-1, {1, 1, 1})).item();
    const double twice = predict_vanilla(tr, fixed_head(-1, {2, 2, 2})).item();
    CHECK(once == 15.0);
    CHECK(twice == 2.0 * once);  // linear in w

    auto biased = fixed_head(-1, {0, 0, 0});
    biased.bias = Tensor<double>::scalar(5.0, true);
    CHECK(predict_vanilla(tr, biased).item() == 5.0);
}

TEST_CASE("head factories draw small weights and a zero bias") {
    Rng rng(11);
    const auto head = make_head<double>(-1, 16, rng);
    CHECK(head.w.numel() == 16);
    CHECK(head.w.requires_grad());
    CHECK_FALSE(head.bias.defined());
    double mag = 0;
    for (double v : head.w.data()) {
        CHECK(std::abs(v) < 0.2);  // 10 sigma
        mag += std::abs(v);
    }
    CHECK(mag > 0.0);

    const auto with_bias = make_head<double>(-1, 16, rng, true);
    REQUIRE(with_bias.bias.defined());
    CHECK(with_bias.bias.item() == 0.0);
    CHECK(with_bias.bias.requires_grad());
    CHECK_THROWS_AS(make_head<double>(-1, 0, rng), ShapeError);
}

TEST_CASE("dynamic weighting starts uniform: prediction is the layer average") {
    const auto tr = stub_trace({{2, 0}, {4, 0}, {6, 0}});
    Rng rng(3);

    auto dw = make_dynamic<double>({0, 1, 2}, 2, 3, rng);
    for (double v : dw.w.data()) CHECK(v == 0.0);
    dw.head = fixed_head(0, {1, 0});
    CHECK(predict_dynamic(tr, dw).item() == Approx((2.0 + 4.0 + 6.0) / 3.0).epsilon(1e-12));

    auto pair = make_dynamic<double>({0, 1}, 2, 3, rng);
    pair.head = fixed_head(0, {1, 0});
    CHECK(predict_dynamic(tr, pair).item() == Approx(3.0).epsilon(1e-12));
}

TEST_CASE("dynamic weighting saturates toward the dominant layer") {
    const auto tr = stub_trace({{2, 0}, {4, 0}, {6, 0}});
    DynamicWeighting<double> dw;
    dw.layers = {0, 2};
    dw.w = Tensor<double>::from_data({2}, {50.0, 0.0}, true);
    dw.head = fixed_head(0, {1, 0});
    // softmax([50, 0]) puts all but ~2e-22 of the mass on layer 0.
    CHECK(predict_dynamic(tr, dw).item() == Approx(2.0).epsilon(1e-12));
}

TEST_CASE("dynamic weighting is inert when every layer carries the same state") {
    const std::vector<double> h = {1.5, -2.0};
    const auto tr = stub_trace({h, h, h});
    DynamicWeighting<double> dw;
    dw.layers = {0, 1, 2};
    dw.w = Tensor<double>::from_data({3}, {0.3, -1.2, 2.0}, true);  // arbitrary mixture
    dw.head = fixed_head(0, {0.7, 0.4});
    const auto vanilla = fixed_head(-1, {0.7, 0.4});
    CHECK(predict_dynamic(tr, dw).item() ==
          Approx(predict_vanilla(tr, vanilla).item()).epsilon(1e-12));
}

TEST_CASE("layer-set validation rejects singletons, duplicates, and bad indices") {
    Rng rng(5);
    CHECK_THROWS_WITH_AS(make_dynamic<double>({-1}, 4, 8, rng), doctest::Contains("at least 2"),
                         ShapeError);
    // -1 and 7 resolve to the same absolute layer of an 8-layer model.
    CHECK_THROWS_WITH_AS(make_dynamic<double>({-1, 7}, 4, 8, rng), doctest::Contains("duplicate"),
                         ShapeError);
    CHECK_THROWS_AS(make_dynamic<double>({-1, -9}, 4, 8, rng), ShapeError);
    CHECK_NOTHROW(check_distinct_layers({-1, -7, 0}, 8));
    CHECK_THROWS_AS(check_distinct_layers({1, -7}, 8), ShapeError);

    // The same validation applies at predict time against the trace depth.
    const auto tr = stub_trace({{1.0}, {2.0}, {3.0}});
    DynamicWeighting<double> dw;
    dw.layers = {0, 5};
    dw.w = Tensor<double>::zeros({2}, true);
    dw.head = fixed_head(0, {1.0});
    CHECK_THROWS_AS(predict_dynamic(tr, dw), ShapeError);
}

TEST_CASE("multi-head prediction is the arithmetic mean of the member heads") {
    const auto tr = stub_trace({{10}, {20}, {30}});
    MultiHead<double> mh;
    mh.heads = {fixed_head(0, {1.0}), fixed_head(1, {1.0}), fixed_head(2, {1.0})};
    mh.loss_weights = {0.2, 0.3, 0.5};  // must not influence prediction
    const double pred = multihead_predict(tr, mh).item();
    CHECK(pred == Approx(20.0));
    CHECK(pred == ((10.0 + 20.0) + 30.0) * (1.0 / 3.0));  // exact mean, same arithmetic
}

TEST_CASE("multi-head loss is the weighted aggregate of per-head MSEs") {
    // One sample, two heads: squared errors are exactly 0.2 and 0.4.
    const auto tr = stub_trace({{std::sqrt(0.2)}, {std::sqrt(0.4)}});
    const std::vector<ForwardTrace<double>> traces = {tr};
    const std::vector<double> targets = {0.0};

    MultiHead<double> mh;
    mh.heads = {fixed_head(0, {1.0}), fixed_head(1, {1.0})};
    mh.loss_weights = {0.5, 0.5};
    CHECK(multihead_loss(traces, mh, targets).item() == Approx(0.3).epsilon(1e-12));

    mh.loss_weights = {0.25, 0.75};
    CHECK(multihead_loss(traces, mh, targets).item() == Approx(0.35).epsilon(1e-12));

    mh.loss_weights = {1.0};
    CHECK_THROWS_WITH_AS(multihead_loss(traces, mh, targets), doctest::Contains("loss weights"),
                         ShapeError);
    mh.loss_weights = {0.5, 0.5};
    CHECK_THROWS_AS(multihead_loss(traces, mh, {0.0, 1.0}), ShapeError);
    CHECK_THROWS_AS(multihead_loss(std::vector<ForwardTrace<double>>{}, mh,
                                   std::vector<double>{}),
                    ShapeError);
}

TEST_CASE("multi-head factory validates and normalizes its loss weights") {
    Rng rng(7);
    CHECK_THROWS_WITH_AS(make_multihead<double>({-1}, 4, 8, rng), doctest::Contains("at least 2"),
                         ShapeError);
    CHECK_THROWS_AS(make_multihead<double>({-1, 7}, 4, 8, rng), ShapeError);
    CHECK_THROWS_AS(make_multihead<double>({0, 1}, 4, 8, rng, {0.5, -0.5}), ShapeError);
    CHECK_THROWS_AS(make_multihead<double>({0, 1}, 4, 8, rng, {0.5, 0.25, 0.25}), ShapeError);

    const auto mh = make_multihead<double>({0, 1}, 4, 8, rng, {2.0, 6.0});
    REQUIRE(mh.loss_weights.size() == 2);
    CHECK(mh.loss_weights[0] == 0.25);  // 2/8, exact in binary
    CHECK(mh.loss_weights[1] == 0.75);
    CHECK(mh.heads[0].layer == 0);
    CHECK(mh.heads[1].layer == 1);

    const auto uniform = make_multihead<double>({0, 1, 2}, 4, 8, rng);
    for (double w : uniform.loss_weights) CHECK(w == Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("head gradients agree with central differences for every strategy") {
    Rng rng(19);
    const std::int64_t d = 5;
    std::vector<ForwardTrace<double>> traces;
    for (int i = 0; i < 4; ++i) traces.push_back(random_trace(rng, 3, 1, d, 0));
    const std::vector<double> targets = {0.3, -0.7, 1.1, 0.2};
    const Tensor<double> y =
        Tensor<double>::from_data({4}, std::vector<double>(targets.begin(), targets.end()), false);

    SUBCASE("dynamic weighting: raw layer weights, head weights, bias") {
        auto dw = make_dynamic<double>({0, 1, 2}, d, 3, rng, true);
        for (auto& v : dw.w.mutable_data()) v = rng.uniform(-1.0, 1.0);
        const auto loss_value = [&]() {
            std::vector<Tensor<double>> rows;
            for (const auto& tr : traces) rows.push_back(reshape(predict_dynamic(tr, dw), {1}));
            return mse_loss(concat(rows), y).item();
        };
        {
            std::vector<Tensor<double>> rows;
            for (const auto& tr : traces) rows.push_back(reshape(predict_dynamic(tr, dw), {1}));
            backward(mse_loss(concat(rows), y));
        }
        const auto res =
            testutil::grad_check(loss_value, {dw.w, dw.head.w, dw.head.bias}, 1e-5, 1e-8);
        CAPTURE(res.worst_param);
        CAPTURE(res.worst_index);
        CHECK(res.max_rel_err < 1e-6);
    }

    SUBCASE("multi-head loss: every member head") {
        auto mh = make_multihead<double>({0, 1, 2}, d, 3, rng, {1.0, 2.0, 3.0});
        const auto loss_value = [&]() { return multihead_loss(traces, mh, targets).item(); };
        backward(multihead_loss(traces, mh, targets));
        const auto res = testutil::grad_check(
            loss_value, {mh.heads[0].w, mh.heads[1].w, mh.heads[2].w}, 1e-5, 1e-8);
        CHECK(res.max_rel_err < 1e-6);
    }

    SUBCASE("batched multi-head loss over a layer batch") {
        auto mh = make_multihead<double>({0, 2}, d, 3, rng, {}, true);
        const auto batch = gather_layers(traces, {0, 1, 2});
        const auto loss_value = [&]() { return multihead_batch_loss(batch, mh, y).item(); };
        backward(multihead_batch_loss(batch, mh, y));
        const auto res = testutil::grad_check(
            loss_value, {mh.heads[0].w, mh.heads[0].bias, mh.heads[1].w, mh.heads[1].bias}, 1e-5,
            1e-8);
        CHECK(res.max_rel_err < 1e-6);
    }
}

TEST_CASE("batched scores reproduce per-trace predictions exactly") {
    Rng rng(23);
    const std::int64_t d = 6;
    std::vector<ForwardTrace<double>> traces;
    for (int i = 0; i < 5; ++i) traces.push_back(random_trace(rng, 3, 4, d, 2));
    const auto batch = gather_layers(traces, {-1, -2, 0});
    REQUIRE(batch.n == 5);
    REQUIRE(batch.source_n_layers == 3);
    REQUIRE(batch.abs_layers == std::vector<std::int64_t>{2, 1, 0});

    auto head = make_head<double>(-2, d, rng, true);
    for (auto& v : head.bias.mutable_data()) v = 0.37;
    const auto scores = head_scores(batch, head);
    REQUIRE(scores.numel() == 5);
    for (int i = 0; i < 5; ++i)
        CHECK(scores.data()[i] == predict_vanilla(traces[static_cast<std::size_t>(i)], head).item());

    auto dw = make_dynamic<double>({-1, 0}, d, 3, rng);
    for (auto& v : dw.w.mutable_data()) v = rng.uniform(-1.0, 1.0);
    const auto dyn = dynamic_scores(batch, dw);
    for (int i = 0; i < 5; ++i)
        CHECK(dyn.data()[i] == predict_dynamic(traces[static_cast<std::size_t>(i)], dw).item());

    auto mh = make_multihead<double>({-1, -3}, d, 3, rng);
    const auto both = multihead_scores(batch, mh);
    for (int i = 0; i < 5; ++i)
        CHECK(both.data()[i] == multihead_predict(traces[static_cast<std::size_t>(i)], mh).item());

    // The batched loss is the same arithmetic as the per-trace loss.
    const std::vector<double> targets = {0.1, 0.2, 0.3, 0.4, 0.5};
    const Tensor<double> y =
        Tensor<double>::from_data({5}, std::vector<double>(targets.begin(), targets.end()), false);
    CHECK(multihead_batch_loss(batch, mh, y).item() == multihead_loss(traces, mh, targets).item());

    const auto last_only = gather_layers(traces, {-1});
    CHECK_THROWS_WITH_AS(last_only.at(0), doctest::Contains("not in the gathered layer batch"),
                         ShapeError);
    CHECK_THROWS_AS(gather_layers(std::vector<ForwardTrace<double>>{}, {-1}), ShapeError);
}

TEST_CASE("frozen embedding dumps gather into the same batch form") {
    EmbeddingDump dump;
    dump.layers = {2, 5, 7};
    dump.hidden_dim = 4;
    dump.source_n_layers = 8;
    dump.targets = {0.5f, 1.5f, 2.5f};
    dump.source_model = "stub";
    dump.embeddings.resize(3 * 3 * 4);
    for (std::int64_t i = 0; i < 3; ++i)
        for (std::int64_t slot = 0; slot < 3; ++slot)
            for (std::int64_t k = 0; k < 4; ++k)
                dump.embeddings[static_cast<std::size_t>((i * 3 + slot) * 4 + k)] =
                    static_cast<float>(i * 100 + slot * 10 + k);

    const auto batch = gather_layers<double>(dump, {-1, 5});
    REQUIRE(batch.n == 3);
    CHECK(batch.source_n_layers == 8);
    CHECK(batch.abs_layers == std::vector<std::int64_t>{7, 5});
    // Layer -1 of the 8-layer source is absolute 7, stored in slot 2.
    for (std::int64_t i = 0; i < 3; ++i)
        for (std::int64_t k = 0; k < 4; ++k) {
            CHECK(batch.at(-1).at(i, k) == static_cast<double>(i * 100 + 20 + k));
            CHECK(batch.at(5).at(i, k) == static_cast<double>(i * 100 + 10 + k));
        }
    CHECK_FALSE(batch.at(-1).requires_grad());

    // Heads read straight off the frozen batch; only head parameters train.
    const auto head = fixed_head(-1, {1, 0, 0, 0});
    const auto scores = head_scores(batch, head);
    for (std::int64_t i = 0; i < 3; ++i) CHECK(scores.data()[i] == static_cast<double>(i * 100 + 20));
    backward(sum(scores));
    double wg = 0;
    for (double g : head.w.grad()) wg += std::abs(g);
    CHECK(wg > 0.0);

    // Absent or unresolvable layers are typed errors.
    CHECK_THROWS_WITH_AS(gather_layers<double>(dump, {-2}), doctest::Contains("not in dump"),
                         FormatError);  // absolute 6 was not exported
    CHECK_THROWS_AS(gather_layers<double>(dump, {-9}), ShapeError);   // out of range for depth 8
    EmbeddingDump empty = dump;
    empty.targets.clear();
    empty.embeddings.clear();
    CHECK_THROWS_AS(gather_layers<double>(empty, {-1}), ShapeError);
}

TEST_CASE("gradient descent on the batch path converges to the least-squares solution") {
    Rng rng(101);
    const std::int64_t n = 64, d = 8;
    std::vector<double> x_data(static_cast<std::size_t>(n * d));
    for (auto& v : x_data) v = rng.normal();
    std::vector<double> w_star(static_cast<std::size_t>(d));
    for (auto& v : w_star) v = rng.normal();
    const double b_star = 3.0;
    std::vector<double> y_data(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        double s = b_star;
        for (std::int64_t k = 0; k < d; ++k)
            s += x_data[static_cast<std::size_t>(i * d + k)] * w_star[static_cast<std::size_t>(k)];
        y_data[static_cast<std::size_t>(i)] = s + 0.1 * rng.normal();
    }

    // Oracle: solve the (d+1)-dim normal equations for [w; b] with an
    // appended all-ones column.
    const std::size_t m = static_cast<std::size_t>(d + 1);
    std::vector<double> xtx(m * m, 0.0), xty(m, 0.0);
    const auto col = [&](std::int64_t i, std::size_t c) {
        return c < static_cast<std::size_t>(d) ? x_data[static_cast<std::size_t>(i * d) + c] : 1.0;
    };
    for (std::int64_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t c = 0; c < m; ++c) xtx[r * m + c] += col(i, r) * col(i, c);
            xty[r] += col(i, r) * y_data[static_cast<std::size_t>(i)];
        }
    const std::vector<double> sol = solve_linear(xtx, xty);

    LayerBatch<double> batch;
    batch.source_n_layers = 1;
    batch.abs_layers = {0};
    batch.H = {Tensor<double>::from_data({n, d}, x_data, false)};
    batch.n = n;
    const Tensor<double> y = Tensor<double>::from_data({n}, y_data, false);

    RegressionHead<double> head;
    head.layer = -1;
    head.w = Tensor<double>::zeros({d}, true);
    head.bias = Tensor<double>::scalar(0.0, true);
    const double lr = 0.25;
    for (int it = 0; it < 1200; ++it) {
        head.w.zero_grad();
        head.bias.zero_grad();
        backward(mse_loss(head_scores(batch, head), y));
        auto wd = head.w.mutable_data();
        for (std::int64_t k = 0; k < d; ++k) wd[k] -= lr * head.w.grad()[k];
        head.bias.mutable_data()[0] -= lr * head.bias.grad()[0];
    }

    for (std::int64_t k = 0; k < d; ++k)
        CHECK(head.w.data()[k] == Approx(sol[static_cast<std::size_t>(k)]).epsilon(1e-6));
    CHECK(head.bias.item() == Approx(sol[m - 1]).epsilon(1e-6));

    // Prediction RMSE against the oracle's predictions.
    const auto preds = head_scores(batch, head);
    double se = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        double oracle = sol[m - 1];
        for (std::int64_t k = 0; k < d; ++k)
            oracle += x_data[static_cast<std::size_t>(i * d + k)] * sol[static_cast<std::size_t>(k)];
        se += (preds.data()[i] - oracle) * (preds.data()[i] - oracle);
    }
    CHECK(std::sqrt(se / static_cast<double>(n)) < 1e-3);
}
