// Python bindings for the core operations: statistics, the miniature
// backbone, frozen-embedding dumps, head training, and layer sweeps.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <string>
#include <vector>

#include "alope/checkpoint.hpp"
#include "alope/data.hpp"
#include "alope/heads.hpp"
#include "alope/lora.hpp"
#include "alope/report.hpp"
#include "alope/stats.hpp"
#include "alope/train.hpp"
#include "alope/transformer.hpp"

namespace py = pybind11;
using namespace alope;

namespace {

std::vector<double> final_state_values(const Transformer<double>& model,
                                       const std::vector<std::int32_t>& ids, std::int64_t layer) {
    const auto trace = model.forward(ids);
    const auto h = final_token_state(trace, layer);
    return {h.data().begin(), h.data().end()};
}

py::dict report_to_dict(const TrainReport& report) {
    py::dict d;
    d["loss_curve"] = report.loss_curve;
    d["val_metric"] = report.val_metric;
    d["trainable_params"] = report.trainable_params;
    d["base_hash_before"] = report.base_hash_before;
    d["base_hash_after"] = report.base_hash_after;
    return d;
}

py::dict sweep_to_dict(const SweepReport& sweep) {
    py::dict d;
    d["best_layer"] = sweep.best_layer;
    d["n_train"] = sweep.n_train;
    d["n_test"] = sweep.n_test;
    d["pairs"] = sweep.pairs;
    d["test_indices"] = sweep.test_indices;
    py::list runs;
    for (const auto& run : sweep.runs) {
        py::dict r;
        r["layer"] = run.layer;
        r["ok"] = run.ok;
        r["error"] = run.error;
        r["avg"] = run.avg;
        r["per_pair"] = run.per_pair;
        r["test_predictions"] = run.test_predictions;
        runs.append(std::move(r));
    }
    d["runs"] = std::move(runs);
    return d;
}

// Trains a fresh strategy on a dump and returns the report plus whole-set
// predictions (the strategy itself stays a C++ detail).
py::dict train_on_dump(const EmbeddingDump& dump, const TrainConfig& cfg,
                       const std::string& head_path) {
    TrainConfig local = cfg;
    local.frozen_backbone = true;
    Rng rng(local.seed);
    auto strategy =
        make_strategy<double>(local.strategy, local.layers, dump.hidden_dim,
                              dump.source_n_layers, rng,
                              std::vector<double>(local.loss_weights), local.with_bias);
    const TrainReport report = train(dump, strategy, local);
    py::dict d = report_to_dict(report);
    const auto batch = gather_layers<double>(dump, local.layers);
    const auto scores = strategy.scores(batch);
    d["predictions"] = std::vector<double>{scores.data().begin(), scores.data().end()};
    if (!head_path.empty()) save_head_checkpoint(strategy, head_path);
    return d;
}

}  // namespace

PYBIND11_MODULE(_alope, m) {
    m.doc() = "Layer-adaptive regression heads over a miniature decoder backbone";
    m.attr("__version__") = "0.1.0";

    // --- statistics -----------------------------------------------------------
    m.def(
        "spearman",
        [](const std::vector<double>& a, const std::vector<double>& b) {
            return stats::spearman(a, b);
        },
        py::arg("a"), py::arg("b"), "Spearman rank correlation (average ranks for ties)");
    m.def(
        "pearson",
        [](const std::vector<double>& a, const std::vector<double>& b) {
            return stats::pearson(a, b);
        },
        py::arg("a"), py::arg("b"), "Pearson correlation");
    m.def(
        "williams_test",
        [](double r12, double r13, double r23, std::int64_t n, bool two_sided) {
            const auto res = stats::williams_test(r12, r13, r23, n, two_sided);
            return py::make_tuple(res.t, res.p, res.df);
        },
        py::arg("r12"), py::arg("r13"), py::arg("r23"), py::arg("n"),
        py::arg("two_sided") = false,
        "Williams test for two correlations sharing a reference; returns (t, p, df)");

    // --- data -----------------------------------------------------------------
    py::class_<QESample>(m, "QESample")
        .def(py::init<>())
        .def_readwrite("source_lang", &QESample::source_lang)
        .def_readwrite("target_lang", &QESample::target_lang)
        .def_readwrite("source_text", &QESample::source_text)
        .def_readwrite("translated_text", &QESample::translated_text)
        .def_readwrite("score", &QESample::score)
        .def_readwrite("pair_id", &QESample::pair_id);

    m.def("load_tsv", &load_tsv, py::arg("path"), py::arg("score_min") = 0.0,
          py::arg("score_max") = 100.0);
    m.def("write_tsv", &write_tsv, py::arg("path"), py::arg("samples"));
    m.def(
        "gen_synthetic",
        [](std::int64_t n, std::uint64_t seed) {
            SynthConfig cfg;
            cfg.n_samples = n;
            cfg.seed = seed;
            return gen_synthetic(cfg);
        },
        py::arg("n") = 64, py::arg("seed") = 0);

    py::class_<PromptTemplate>(m, "PromptTemplate")
        .def(py::init<std::string>())
        .def_static("gemba_default", &PromptTemplate::gemba_default)
        .def("build", &PromptTemplate::build)
        .def_property_readonly("text", &PromptTemplate::text);

    py::class_<Tokenizer>(m, "Tokenizer")
        .def(py::init<>())
        .def("train", &Tokenizer::train, py::arg("corpus"), py::arg("target_vocab"))
        .def("tokenize",
             [](const Tokenizer& t, const std::string& text) { return t.tokenize(text); })
        .def("detokenize", &Tokenizer::detokenize)
        .def_property_readonly("vocab_size", &Tokenizer::vocab_size);

    py::class_<EmbeddingDump>(m, "EmbeddingDump")
        .def(py::init<>())
        .def_readonly("layers", &EmbeddingDump::layers)
        .def_readonly("hidden_dim", &EmbeddingDump::hidden_dim)
        .def_readonly("source_n_layers", &EmbeddingDump::source_n_layers)
        .def_readonly("targets", &EmbeddingDump::targets)
        .def_property_readonly("n_samples", &EmbeddingDump::n_samples)
        .def("sample_layer",
             [](const EmbeddingDump& d, std::int64_t i, std::int64_t slot) {
                 const float* p = d.sample_layer(i, slot);
                 return std::vector<float>(p, p + d.hidden_dim);
             },
             py::arg("i"), py::arg("slot"));

    m.def("read_dump", &read_dump, py::arg("path"));
    m.def("write_dump", &write_dump, py::arg("dump"), py::arg("path"));
    m.def("gen_planted_dump", &gen_planted_dump, py::arg("n_samples"), py::arg("layers"),
          py::arg("hidden_dim"), py::arg("source_n_layers"), py::arg("planted_layer"),
          py::arg("noise_sigma") = 0.1, py::arg("seed") = 0);

    // --- backbone ---------------------------------------------------------------
    py::class_<TransformerConfig>(m, "TransformerConfig")
        .def(py::init([](std::int64_t n_layers, std::int64_t d_model, std::int64_t n_heads,
                         std::int64_t d_ff, std::int64_t vocab_size, std::int64_t max_seq_len) {
                 TransformerConfig cfg;
                 cfg.n_layers = n_layers;
                 cfg.d_model = d_model;
                 cfg.n_heads = n_heads;
                 cfg.d_ff = d_ff;
                 cfg.vocab_size = vocab_size;
                 cfg.max_seq_len = max_seq_len;
                 cfg.validate();
                 return cfg;
             }),
             py::arg("n_layers") = 4, py::arg("d_model") = 32, py::arg("n_heads") = 4,
             py::arg("d_ff") = 64, py::arg("vocab_size") = 512, py::arg("max_seq_len") = 64)
        .def_readonly("n_layers", &TransformerConfig::n_layers)
        .def_readonly("d_model", &TransformerConfig::d_model)
        .def_readonly("n_heads", &TransformerConfig::n_heads)
        .def_readonly("d_ff", &TransformerConfig::d_ff)
        .def_readonly("vocab_size", &TransformerConfig::vocab_size)
        .def_readonly("max_seq_len", &TransformerConfig::max_seq_len);

    py::class_<Transformer<double>>(m, "Transformer")
        .def(py::init<TransformerConfig, std::uint64_t>(), py::arg("config"), py::arg("seed") = 0)
        .def_property_readonly("config", &Transformer<double>::config)
        .def("final_state", &final_state_values, py::arg("token_ids"), py::arg("layer") = -1,
             "Final-token hidden state at a signed layer index")
        .def("all_final_states",
             [](const Transformer<double>& model, const std::vector<std::int32_t>& ids) {
                 const auto trace = model.forward(ids);
                 std::vector<std::vector<double>> states;
                 for (std::int64_t k = 0; k < trace.n_layers(); ++k) {
                     const auto h = final_token_state(trace, k);
                     states.emplace_back(h.data().begin(), h.data().end());
                 }
                 return states;
             })
        .def("inject_lora",
             [](Transformer<double>& model, std::int64_t rank, double scale,
                const std::vector<std::string>& targets, std::uint64_t seed) {
                 LoraConfig cfg;
                 cfg.rank = rank;
                 cfg.scale = scale;
                 if (!targets.empty()) cfg.targets = targets;
                 inject(model, cfg, seed);
             },
             py::arg("rank") = 32, py::arg("scale") = 1.0,
             py::arg("targets") = std::vector<std::string>{}, py::arg("seed") = 0)
        .def("merge_lora", [](Transformer<double>& model) { merge_all(model); })
        .def("base_hash", &Transformer<double>::base_hash)
        .def("n_base_parameters", &Transformer<double>::n_base_parameters)
        .def("save",
             [](const Transformer<double>& model, const std::string& path) {
                 write_checkpoint(model_checkpoint(model), path);
             })
        .def_static("load", [](const std::string& path) {
            return model_from_checkpoint<double>(read_checkpoint(path));
        });

    // --- training ----------------------------------------------------------------
    py::enum_<StrategyKind>(m, "StrategyKind")
        .value("vanilla", StrategyKind::vanilla)
        .value("dynamic", StrategyKind::dynamic)
        .value("multihead", StrategyKind::multihead);

    py::enum_<Optimizer>(m, "Optimizer")
        .value("adamw", Optimizer::adamw)
        .value("sgd", Optimizer::sgd);

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("strategy", &TrainConfig::strategy)
        .def_readwrite("layers", &TrainConfig::layers)
        .def_readwrite("loss_weights", &TrainConfig::loss_weights)
        .def_readwrite("with_bias", &TrainConfig::with_bias)
        .def_readwrite("epochs", &TrainConfig::epochs)
        .def_readwrite("batch_size", &TrainConfig::batch_size)
        .def_readwrite("learning_rate", &TrainConfig::learning_rate)
        .def_readwrite("weight_decay", &TrainConfig::weight_decay)
        .def_readwrite("optimizer", &TrainConfig::optimizer)
        .def_readwrite("seed", &TrainConfig::seed)
        .def_readwrite("grad_clip", &TrainConfig::grad_clip)
        .def_readwrite("eval_every", &TrainConfig::eval_every)
        .def_readwrite("target_loss", &TrainConfig::target_loss)
        .def_readwrite("train_lora", &TrainConfig::train_lora)
        .def_readwrite("lora_rank", &TrainConfig::lora_rank)
        .def_readwrite("lora_scale", &TrainConfig::lora_scale)
        .def_readwrite("lora_targets", &TrainConfig::lora_targets);

    m.def("train_on_dump", &train_on_dump, py::arg("dump"), py::arg("config"),
          py::arg("head_path") = std::string(),
          "Train a fresh head strategy on a frozen dump; returns the report "
          "with whole-set predictions");
    m.def(
        "layer_sweep",
        [](const EmbeddingDump& dump, const std::vector<std::int64_t>& layers,
           const TrainConfig& cfg, double test_fraction) {
            TrainConfig local = cfg;
            local.frozen_backbone = true;
            return sweep_to_dict(layer_sweep<double>(dump, layers, local, test_fraction, nullptr));
        },
        py::arg("dump"), py::arg("layers"), py::arg("config"), py::arg("test_fraction") = 0.2,
        "Per-layer vanilla-head sweep over a frozen dump");

    // --- reporting ------------------------------------------------------------------
    m.def(
        "compare_predictions",
        [](const std::vector<double>& first, const std::vector<double>& second,
           const std::vector<double>& references, double alpha, bool two_sided) {
            ScoredSet a{"all", first, references};
            ScoredSet b{"all", second, references};
            const auto cmp = compare_pair(a, b, alpha, two_sided);
            py::dict d;
            d["n"] = cmp.n;
            d["rho1"] = cmp.rho1;
            d["rho2"] = cmp.rho2;
            d["r23"] = cmp.r23;
            d["t"] = cmp.t;
            d["p"] = cmp.p;
            d["significant"] = cmp.significant;
            return d;
        },
        py::arg("first"), py::arg("second"), py::arg("references"), py::arg("alpha") = 0.05,
        py::arg("two_sided") = false,
        "Williams comparison of two prediction vectors against shared references");
}
