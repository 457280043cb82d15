#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "alope/checkpoint.hpp"
#include "alope/data.hpp"
#include "doctest.h"

using namespace alope;

namespace {

std::string temp_path(const std::string& stem) {
    return "/tmp/alope_ckpt_test_" + stem + "_" + std::to_string(::getpid());
}

std::string slurp(const std::string& path) { return read_file(path); }

void spit(const std::string& path, const std::string& bytes) { atomic_write_file(path, bytes); }

TransformerConfig tiny_config() {
    TransformerConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ff = 12;
    cfg.vocab_size = 16;
    cfg.max_seq_len = 8;
    return cfg;
}

bool bitwise_equal(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() &&
           (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

}  // namespace

TEST_CASE("the raw container round-trips bit-exactly") {
    Checkpoint ckpt;
    ckpt.meta = {{"kind", "stub"}, {"note", "unit test"}, {"nested", {{"x", 1}}}};
    ckpt.tensors.emplace_back(
        "a", TensorRecord{{2, 3}, {1.5f, -0.0f, 3.25e-40f, -7.0f, 0.1f, 8128.0f}});
    ckpt.tensors.emplace_back("b.bias", TensorRecord{{}, {-2.25f}});  // rank-0 scalar
    ckpt.tensors.emplace_back("c", TensorRecord{{4}, {0, 1, 2, 3}});

    const std::string path = temp_path("roundtrip");
    write_checkpoint(ckpt, path);
    const Checkpoint back = read_checkpoint(path);

    CHECK(back.version == 1);
    CHECK(back.kind() == "stub");
    CHECK(back.meta == ckpt.meta);
    REQUIRE(back.tensors.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back.tensors[i].first == ckpt.tensors[i].first);
        CHECK(back.tensors[i].second.shape == ckpt.tensors[i].second.shape);
        CHECK(bitwise_equal(back.tensors[i].second.values, ckpt.tensors[i].second.values));
    }
    CHECK(back.has_tensor("b.bias"));
    CHECK_FALSE(back.has_tensor("nope"));
    CHECK_THROWS_AS(back.tensor("nope"), FormatError);

    // A second write of the reread checkpoint is byte-identical.
    const std::string path2 = temp_path("roundtrip2");
    write_checkpoint(back, path2);
    CHECK(slurp(path) == slurp(path2));
    std::remove(path.c_str());
    std::remove(path2.c_str());
}

TEST_CASE("malformed checkpoint files raise typed errors") {
    Checkpoint ckpt;
    ckpt.meta = {{"kind", "stub"}};
    ckpt.tensors.emplace_back("t", TensorRecord{{2}, {1.0f, 2.0f}});
    const std::string path = temp_path("bad");
    write_checkpoint(ckpt, path);
    const std::string good = slurp(path);

    SUBCASE("magic mismatch") {
        std::string bad = good;
        bad[0] = 'N';
        spit(path, bad);
        CHECK_THROWS_AS(read_checkpoint(path), MagicMismatchError);
    }
    SUBCASE("version mismatch") {
        std::string bad = good;
        bad[4] = 9;
        spit(path, bad);
        CHECK_THROWS_AS(read_checkpoint(path), VersionMismatchError);
    }
    SUBCASE("truncation at several depths") {
        for (const std::size_t keep : {std::size_t{2}, std::size_t{6}, good.size() - 3}) {
            spit(path, good.substr(0, keep));
            CHECK_THROWS_AS(read_checkpoint(path), TruncatedFileError);
        }
    }
    SUBCASE("trailing bytes") {
        spit(path, good + "x");
        CHECK_THROWS_WITH_AS(read_checkpoint(path), doctest::Contains("trailing"), FormatError);
    }
    SUBCASE("meta block that is not a JSON object") {
        // Rewrite with the meta text replaced by an array of the same length.
        Checkpoint raw = ckpt;
        raw.meta = nlohmann::json::object();
        write_checkpoint(raw, path);
        std::string bad = slurp(path);
        const std::string needle = "{}";
        const std::size_t at = bad.find(needle);
        REQUIRE(at != std::string::npos);
        bad.replace(at, 2, "[]");
        spit(path, bad);
        CHECK_THROWS_AS(read_checkpoint(path), FormatError);
    }
    SUBCASE("duplicate tensor names rejected on write") {
        Checkpoint dup = ckpt;
        dup.tensors.emplace_back("t", TensorRecord{{1}, {3.0f}});
        CHECK_THROWS_WITH_AS(write_checkpoint(dup, path), doctest::Contains("duplicate"),
                             FormatError);
    }
    SUBCASE("payload length must match the declared shape") {
        Checkpoint wrong = ckpt;
        wrong.tensors[0].second.values.push_back(9.0f);
        CHECK_THROWS_AS(write_checkpoint(wrong, path), FormatError);
    }
    std::remove(path.c_str());
}

TEST_CASE("model checkpoints restore the exact forward function") {
    Transformer<float> model(tiny_config(), 77);
    const std::string path = temp_path("model");
    write_checkpoint(model_checkpoint(model), path);

    const auto loaded = model_from_checkpoint<float>(read_checkpoint(path));
    CHECK(loaded.config().n_layers == 2);
    CHECK(loaded.base_hash() == model.base_hash());

    const std::vector<std::int32_t> ids = {1, 5, 9, 3};
    const auto ta = model.forward(ids);
    const auto tb = loaded.forward(ids);
    for (std::int64_t k = 0; k < 2; ++k)
        for (std::int64_t i = 0; i < ta.hidden_states[static_cast<std::size_t>(k)].numel(); ++i)
            CHECK(ta.hidden_states[static_cast<std::size_t>(k)].data()[i] ==
                  tb.hidden_states[static_cast<std::size_t>(k)].data()[i]);

    SUBCASE("a double model snapshots through 32-bit records idempotently") {
        Transformer<double> wide(tiny_config(), 78);
        const Checkpoint first = model_checkpoint(wide);
        write_checkpoint(first, path);
        const auto narrow = model_from_checkpoint<double>(read_checkpoint(path));
        const Checkpoint second = model_checkpoint(narrow);
        REQUIRE(first.tensors.size() == second.tensors.size());
        for (std::size_t i = 0; i < first.tensors.size(); ++i)
            CHECK(bitwise_equal(first.tensors[i].second.values, second.tensors[i].second.values));
    }

    SUBCASE("wrong kind and mismatched tensor sets are format errors") {
        Checkpoint ckpt = model_checkpoint(model);
        ckpt.meta["kind"] = "adapters";
        CHECK_THROWS_WITH_AS(model_from_checkpoint<float>(ckpt), doctest::Contains("kind"),
                             FormatError);
        ckpt = model_checkpoint(model);
        ckpt.tensors.pop_back();
        CHECK_THROWS_AS(model_from_checkpoint<float>(ckpt), FormatError);
        ckpt = model_checkpoint(model);
        ckpt.tensors[0].second.shape[0] += 1;
        ckpt.tensors[0].second.values.resize(static_cast<std::size_t>(
            shape_numel(ckpt.tensors[0].second.shape)));
        CHECK_THROWS_AS(model_from_checkpoint<float>(ckpt), FormatError);
        ckpt = model_checkpoint(model);
        ckpt.meta.erase("config");
        CHECK_THROWS_AS(model_from_checkpoint<float>(ckpt), FormatError);
    }
    std::remove(path.c_str());
}

TEST_CASE("adapter checkpoints load onto a fresh base") {
    Transformer<float> base(tiny_config(), 5);
    Transformer<float> adapted = base.clone();
    LoraConfig lora;
    lora.rank = 3;
    lora.scale = 0.5;
    lora.targets = {"attn.q", "attn.v", "ff.down"};
    inject(adapted, lora, 6);
    Rng rng(7);
    for (auto& [name, ad] : adapted.adapters()) {
        (void)name;
        for (auto& v : ad.A.mutable_data()) v = static_cast<float>(rng.normal(0.0, 0.1));
        for (auto& v : ad.B.mutable_data()) v = static_cast<float>(rng.normal(0.0, 0.1));
    }

    const std::string path = temp_path("adapters");
    write_checkpoint(adapter_checkpoint(adapted), path);
    const Checkpoint ckpt = read_checkpoint(path);
    CHECK(ckpt.kind() == "adapters");
    CHECK(ckpt.meta["rank"] == 3);
    CHECK(ckpt.meta["scale"] == 0.5);
    CHECK(ckpt.tensors.size() == 2 * adapted.adapters().size());

    Transformer<float> fresh = base.clone();
    load_adapters(fresh, ckpt);
    REQUIRE(fresh.adapters().size() == adapted.adapters().size());
    for (const auto& [name, t] : fresh.named_parameters()) {
        (void)name;
        CHECK_FALSE(t.requires_grad());  // loading freezes the base
    }

    const std::vector<std::int32_t> ids = {1, 4, 2, 7};
    const auto ta = adapted.forward(ids);
    const auto tf = fresh.forward(ids);
    for (std::int64_t i = 0; i < ta.hidden_states[1].numel(); ++i)
        CHECK(ta.hidden_states[1].data()[i] == tf.hidden_states[1].data()[i]);

    SUBCASE("loading twice or onto unknown projections fails") {
        CHECK_THROWS_WITH_AS(load_adapters(fresh, ckpt), doctest::Contains("already"), ShapeError);
        Checkpoint renamed = ckpt;
        renamed.tensors[0].first = "layers.9.attn.q.A";
        renamed.tensors[1].first = "layers.9.attn.q.B";
        Transformer<float> other = base.clone();
        CHECK_THROWS_AS(load_adapters(other, renamed), FormatError);
    }
    SUBCASE("an un-adapted model has nothing to snapshot") {
        CHECK_THROWS_AS(adapter_checkpoint(base), ShapeError);
    }
    std::remove(path.c_str());
}

TEST_CASE("head checkpoints restore every strategy with its exact weights") {
    Rng rng(9);
    const std::int64_t d = 6, n_layers = 4;

    LayerBatch<float> batch;
    batch.source_n_layers = n_layers;
    batch.abs_layers = {0, 1, 2, 3};
    batch.n = 5;
    for (int k = 0; k < 4; ++k) {
        std::vector<float> vals(5 * static_cast<std::size_t>(d));
        for (auto& v : vals) v = static_cast<float>(rng.uniform(-1.0, 1.0));
        batch.H.push_back(Tensor<float>::from_data({5, d}, std::move(vals), false));
    }

    const std::string path = temp_path("head");
    const auto roundtrip = [&](const HeadStrategy<float>& s) {
        save_head_checkpoint(s, path);
        return strategy_from_checkpoint<float>(read_checkpoint(path));
    };

    SUBCASE("vanilla with bias") {
        auto s = make_strategy<float>(StrategyKind::vanilla, {-2}, d, n_layers, rng, {}, true);
        s.head.bias.mutable_data()[0] = 1.25f;
        const auto back = roundtrip(s);
        CHECK(back.kind == StrategyKind::vanilla);
        CHECK(back.layers == std::vector<std::int64_t>{-2});
        const auto a = s.scores(batch);
        const auto b = back.scores(batch);
        for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);

        // The sidecar names the strategy and layers.
        const auto sidecar = nlohmann::json::parse(slurp(path + ".json"));
        CHECK(sidecar["strategy"] == "vanilla");
        CHECK(sidecar["layers"] == std::vector<std::int64_t>{-2});
        CHECK(sidecar["with_bias"] == true);
        std::remove((path + ".json").c_str());
    }
    SUBCASE("dynamic") {
        auto s = make_strategy<float>(StrategyKind::dynamic, {-1, -3}, d, n_layers, rng);
        for (auto& v : s.dynamic.w.mutable_data()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
        const auto back = roundtrip(s);
        CHECK(back.kind == StrategyKind::dynamic);
        const auto a = s.scores(batch);
        const auto b = back.scores(batch);
        for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
    }
    SUBCASE("multihead keeps its loss weights") {
        auto s = make_strategy<float>(StrategyKind::multihead, {-1, -2, -4}, d, n_layers, rng,
                                      {1.0f, 2.0f, 5.0f}, true);
        const auto back = roundtrip(s);
        CHECK(back.kind == StrategyKind::multihead);
        REQUIRE(back.multi.loss_weights.size() == 3);
        for (std::size_t h = 0; h < 3; ++h)
            CHECK(back.multi.loss_weights[h] == s.multi.loss_weights[h]);
        const auto a = s.scores(batch);
        const auto b = back.scores(batch);
        for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
        // Loss agrees too (weights and biases all restored).
        const Tensor<float> y = Tensor<float>::from_data({5}, {0.1f, 0.2f, 0.3f, 0.4f, 0.5f}, false);
        CHECK(s.loss(batch, y).item() == back.loss(batch, y).item());
    }
    SUBCASE("head restore validates its meta") {
        auto s = make_strategy<float>(StrategyKind::vanilla, {-1}, d, n_layers, rng);
        Checkpoint ckpt = head_checkpoint(s);
        ckpt.meta["strategy"] = "vanilla";
        ckpt.meta["layers"] = std::vector<std::int64_t>{-1, -2};
        CHECK_THROWS_AS(strategy_from_checkpoint<float>(ckpt), FormatError);
        ckpt = head_checkpoint(s);
        ckpt.meta.erase("with_bias");
        CHECK_THROWS_AS(strategy_from_checkpoint<float>(ckpt), FormatError);
        ckpt = head_checkpoint(s);
        ckpt.meta["kind"] = "model";
        CHECK_THROWS_AS(strategy_from_checkpoint<float>(ckpt), FormatError);
    }
    std::remove(path.c_str());
}

TEST_CASE("strategy wrapper: arity rules and parameter accounting") {
    Rng rng(33);
    CHECK_THROWS_WITH_AS(
        make_strategy<double>(StrategyKind::vanilla, {-1, -7}, 8, 8, rng),
        doctest::Contains("exactly one layer"), ShapeError);
    CHECK_THROWS_AS(make_strategy<double>(StrategyKind::dynamic, {-1}, 8, 8, rng), ShapeError);
    CHECK_THROWS_AS(
        make_strategy<double>(StrategyKind::vanilla, {-1}, 8, 8, rng, {0.5}), ShapeError);
    CHECK_THROWS_AS(make_strategy<double>(StrategyKind::vanilla, {-9}, 8, 8, rng), ShapeError);

    CHECK(parse_strategy("vanilla") == StrategyKind::vanilla);
    CHECK(parse_strategy("dynamic") == StrategyKind::dynamic);
    CHECK(parse_strategy("multihead") == StrategyKind::multihead);
    CHECK_THROWS_AS(parse_strategy("extra"), ShapeError);
    CHECK(strategy_name(StrategyKind::dynamic) == "dynamic");

    const auto vanilla = make_strategy<double>(StrategyKind::vanilla, {-1}, 8, 8, rng, {}, true);
    CHECK(vanilla.n_parameters() == 8 + 1);
    const auto dynamic = make_strategy<double>(StrategyKind::dynamic, {-1, -3, -5}, 8, 8, rng);
    CHECK(dynamic.n_parameters() == 3 + 8);
    const auto multi = make_strategy<double>(StrategyKind::multihead, {-1, -3}, 8, 8, rng);
    CHECK(multi.n_parameters() == 2 * 8);
    CHECK(multi.named_parameters()[0].first == "heads.0.w");
    CHECK(vanilla.named_parameters()[1].first == "head.bias");
    CHECK(dynamic.named_parameters()[0].first == "dynamic.w");
}
