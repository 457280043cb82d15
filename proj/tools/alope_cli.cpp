// alope: command-line surface for layer-adaptive regression heads.
//
// Exit codes: 0 success, 1 runtime failure (e.g. divergence), 2 usage or
// config error (bad flags, missing or malformed inputs).

#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "alope/checkpoint.hpp"
#include "alope/data.hpp"
#include "alope/heads.hpp"
#include "alope/lora.hpp"
#include "alope/report.hpp"
#include "alope/stats.hpp"
#include "alope/train.hpp"
#include "alope/transformer.hpp"

#ifndef ALOPE_BUILD_ID
#define ALOPE_BUILD_ID "unknown"
#endif

namespace {

using nlohmann::json;
using namespace alope;

// Thrown for anything the user can fix by changing flags or inputs; mapped to
// exit code 2 (everything else that escapes a command maps to 1).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Runs the input-loading / validation phase of a command: any failure there
// is by definition a usage problem.
template <typename F>
auto usage_phase(F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const UsageError&) {
        throw;
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
}

void require_exists(const std::string& path) {
    if (!std::filesystem::exists(path)) throw UsageError("no such file: " + path);
}

std::vector<std::int64_t> parse_i64_list(const std::string& text, const char* what) {
    std::vector<std::int64_t> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t comma = text.find(',', start);
        if (comma == std::string::npos) comma = text.size();
        const std::string tok = text.substr(start, comma - start);
        char* end = nullptr;
        const long long v = std::strtoll(tok.c_str(), &end, 10);
        if (tok.empty() || end != tok.c_str() + tok.size())
            throw UsageError(std::string(what) + ": bad integer '" + tok + "' in '" + text + "'");
        out.push_back(v);
        start = comma + 1;
    }
    if (out.empty()) throw UsageError(std::string(what) + ": empty list");
    return out;
}

std::vector<double> parse_f64_list(const std::string& text, const char* what) {
    std::vector<double> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t comma = text.find(',', start);
        if (comma == std::string::npos) comma = text.size();
        const std::string tok = text.substr(start, comma - start);
        char* end = nullptr;
        const double v = std::strtod(tok.c_str(), &end);
        if (tok.empty() || end != tok.c_str() + tok.size() || !std::isfinite(v))
            throw UsageError(std::string(what) + ": bad number '" + tok + "' in '" + text + "'");
        out.push_back(v);
        start = comma + 1;
    }
    return out;
}

std::vector<std::string> parse_str_list(const std::string& text) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t comma = text.find(',', start);
        if (comma == std::string::npos) comma = text.size();
        out.push_back(text.substr(start, comma - start));
        start = comma + 1;
    }
    return out;
}

std::string hex64(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016" PRIx64, v);
    return buf;
}

std::string now_iso_utc() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// --- run manifests ---------------------------------------------------------
//
// Every artifact directory gets exactly one manifest.json capturing the
// command, the full effective configuration, the seed, the build id, and a
// digest of every input file — enough to rerun the command and expect
// identical outputs.

struct ManifestBuilder {
    std::string command;
    json config = json::object();
    std::uint64_t seed = 0;
    json inputs = json::object();
    std::vector<std::string> outputs;
    std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

    void add_input(const std::string& path) {
        const std::string bytes = read_file(path);
        inputs[path] = hex64(fnv1a64(bytes.data(), bytes.size()));
    }

    void write(const std::string& out_dir) {
        json m;
        m["command"] = command;
        m["config"] = config;
        m["seed"] = seed;
        m["build"] = ALOPE_BUILD_ID;
        m["inputs"] = inputs;
        m["outputs"] = outputs;
        m["elapsed_s"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        m["created_at"] = now_iso_utc();
        atomic_write_file(out_dir + "/manifest.json", m.dump(2) + "\n");
    }
};

std::string prepare_out_dir(const std::string& out) {
    std::error_code ec;
    std::filesystem::create_directories(out, ec);
    if (ec) throw UsageError("cannot create output directory '" + out + "': " + ec.message());
    return out;
}

// --- shared option blocks ----------------------------------------------------

constexpr std::int64_t kDefaultLayers = 4;
constexpr std::int64_t kDefaultDModel = 32;
constexpr std::int64_t kDefaultHeads = 4;
constexpr std::int64_t kDefaultDff = 64;
constexpr std::int64_t kDefaultVocab = 512;
constexpr std::int64_t kDefaultMaxSeq = 64;

struct ModelFlags {
    std::string checkpoint;
    std::int64_t n_layers = kDefaultLayers;
    std::int64_t d_model = kDefaultDModel;
    std::int64_t n_heads = kDefaultHeads;
    std::int64_t d_ff = kDefaultDff;
    std::int64_t vocab = kDefaultVocab;
    std::int64_t max_seq = kDefaultMaxSeq;

    void add(CLI::App* cmd) {
        cmd->add_option("--checkpoint", checkpoint,
                        "Model checkpoint to load (default: fresh seeded model)");
        cmd->add_option("--n-layers", n_layers, "Fresh model: transformer blocks");
        cmd->add_option("--d-model", d_model, "Fresh model: hidden width");
        cmd->add_option("--n-heads", n_heads, "Fresh model: attention heads");
        cmd->add_option("--d-ff", d_ff, "Fresh model: feed-forward width");
        cmd->add_option("--vocab", vocab, "Fresh model: vocabulary size");
        cmd->add_option("--max-seq", max_seq, "Fresh model: maximum sequence length");
    }

    json to_json() const {
        return {{"checkpoint", checkpoint}, {"n_layers", n_layers}, {"d_model", d_model},
                {"n_heads", n_heads},       {"d_ff", d_ff},         {"vocab", vocab},
                {"max_seq", max_seq}};
    }

    // Fresh model or checkpoint load; the bool reports which.
    std::pair<Transformer<double>, bool> build(std::uint64_t seed, ManifestBuilder& mf) const {
        if (!checkpoint.empty()) {
            require_exists(checkpoint);
            mf.add_input(checkpoint);
            auto model = usage_phase(
                [&] { return model_from_checkpoint<double>(read_checkpoint(checkpoint)); });
            return {std::move(model), false};
        }
        TransformerConfig cfg;
        cfg.n_layers = n_layers;
        cfg.d_model = d_model;
        cfg.n_heads = n_heads;
        cfg.d_ff = d_ff;
        cfg.vocab_size = vocab;
        cfg.max_seq_len = max_seq;
        usage_phase([&] { cfg.validate(); });
        return {Transformer<double>(cfg, seed), true};
    }
};

struct DataFlags {
    std::string data;
    std::string norm = "minmax";
    double score_min = 0.0;
    double score_max = 100.0;
    std::string template_path;

    void add(CLI::App* cmd) {
        cmd->add_option("--data", data, "QE dataset TSV (live backbone path)");
        cmd->add_option("--norm", norm, "Score normalization: none|minmax|zscore");
        cmd->add_option("--score-min", score_min, "Lower bound of the score scale");
        cmd->add_option("--score-max", score_max, "Upper bound of the score scale");
        cmd->add_option("--template", template_path, "Prompt template file (default: built-in)");
    }

    json to_json() const {
        return {{"data", data},           {"norm", norm},
                {"score_min", score_min}, {"score_max", score_max},
                {"template", template_path}};
    }
};

struct TrainFlags {
    std::string strategy = "vanilla";
    std::string layers = "-1";
    std::string loss_weights;
    bool with_bias = false;
    std::int64_t epochs = 3;
    std::int64_t batch_size = 16;
    double lr = 2e-4;
    double weight_decay = 0.0;
    std::string optimizer = "adamw";
    double grad_clip = 1.0;
    std::int64_t eval_every = 0;
    double target_loss = 0.0;
    bool no_lora = false;
    std::int64_t lora_rank = 32;
    double lora_scale = 1.0;
    std::string lora_targets = "attn.q,attn.k,attn.v,attn.o";

    void add(CLI::App* cmd, bool with_strategy) {
        if (with_strategy) {
            cmd->add_option("--strategy", strategy, "Head strategy: vanilla|dynamic|multihead");
            cmd->add_option("--layers", layers, "Comma-separated signed layer indices");
            cmd->add_option("--loss-weights", loss_weights,
                            "Multihead per-head loss weights (default: uniform)");
            cmd->add_flag("--with-bias", with_bias, "Add a bias term to regression heads");
        }
        cmd->add_option("--epochs", epochs, "Training epochs");
        cmd->add_option("--batch-size", batch_size, "Mini-batch size");
        cmd->add_option("--lr", lr, "Learning rate");
        cmd->add_option("--weight-decay", weight_decay, "Decoupled weight decay");
        cmd->add_option("--optimizer", optimizer, "adamw|sgd");
        cmd->add_option("--grad-clip", grad_clip, "Global gradient-norm clip (<=0 disables)");
        cmd->add_option("--eval-every", eval_every,
                        "Steps between mid-epoch validations (0: per epoch)");
        cmd->add_option("--target-loss", target_loss, "Stop early below this loss (<=0: off)");
        cmd->add_flag("--no-lora", no_lora, "Live path: train heads only, no adapters");
        cmd->add_option("--lora-rank", lora_rank, "LoRA rank");
        cmd->add_option("--lora-scale", lora_scale, "LoRA scale");
        cmd->add_option("--lora-targets", lora_targets, "Comma-separated projection kinds");
    }

    TrainConfig to_config(std::uint64_t seed) const {
        TrainConfig cfg;
        cfg.strategy = usage_phase([&] { return parse_strategy(strategy); });
        cfg.layers = parse_i64_list(layers, "--layers");
        if (!loss_weights.empty()) cfg.loss_weights = parse_f64_list(loss_weights, "--loss-weights");
        cfg.with_bias = with_bias;
        cfg.epochs = epochs;
        cfg.batch_size = batch_size;
        cfg.learning_rate = lr;
        cfg.weight_decay = weight_decay;
        cfg.optimizer = usage_phase([&] { return parse_optimizer(optimizer); });
        cfg.seed = seed;
        cfg.grad_clip = grad_clip;
        cfg.eval_every = eval_every;
        cfg.target_loss = target_loss;
        cfg.train_lora = !no_lora;
        cfg.lora_rank = lora_rank;
        cfg.lora_scale = lora_scale;
        cfg.lora_targets = parse_str_list(lora_targets);
        usage_phase([&] { cfg.validate(); });
        return cfg;
    }

    json to_json() const {
        return {{"strategy", strategy},
                {"layers", layers},
                {"loss_weights", loss_weights},
                {"with_bias", with_bias},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"lr", lr},
                {"weight_decay", weight_decay},
                {"optimizer", optimizer},
                {"grad_clip", grad_clip},
                {"eval_every", eval_every},
                {"target_loss", target_loss},
                {"no_lora", no_lora},
                {"lora_rank", lora_rank},
                {"lora_scale", lora_scale},
                {"lora_targets", lora_targets}};
    }
};

// --- dataset ingestion (live path) -------------------------------------------

struct LiveData {
    std::vector<QESample> samples;
    std::vector<std::vector<std::int32_t>> sequences;
    std::vector<double> targets;  // normalized
    std::vector<std::string> pair_ids;
    ScoreTransform transform;
};

LiveData load_live_data(const DataFlags& flags, std::int64_t max_seq_len, std::int64_t vocab_size,
                        ManifestBuilder& mf) {
    require_exists(flags.data);
    mf.add_input(flags.data);
    LiveData out;
    out.samples = usage_phase([&] { return load_tsv(flags.data, flags.score_min, flags.score_max); });
    const NormMode mode = usage_phase([&] { return parse_norm_mode(flags.norm); });
    out.transform = usage_phase(
        [&] { return normalize_scores(out.samples, mode, flags.score_min, flags.score_max); });

    PromptTemplate tmpl = PromptTemplate::gemba_default();
    if (!flags.template_path.empty()) {
        require_exists(flags.template_path);
        mf.add_input(flags.template_path);
        tmpl = usage_phase([&] { return PromptTemplate(read_file(flags.template_path)); });
    }

    Tokenizer tokenizer;  // byte-level; every text tokenizes
    if (vocab_size < tokenizer.vocab_size())
        throw UsageError("model vocabulary (" + std::to_string(vocab_size) +
                         ") is smaller than the byte-level tokenizer needs (" +
                         std::to_string(tokenizer.vocab_size()) + ")");

    out.sequences.reserve(out.samples.size());
    out.targets.reserve(out.samples.size());
    out.pair_ids.reserve(out.samples.size());
    for (const auto& sample : out.samples) {
        auto ids = tokenizer.tokenize(tmpl.build(sample));
        out.sequences.push_back(
            truncate_head_tail(ids, static_cast<std::size_t>(max_seq_len)));
        out.targets.push_back(sample.score);
        out.pair_ids.push_back(sample.pair_id);
    }
    return out;
}

// --- splits -------------------------------------------------------------------

struct Split {
    std::vector<std::int64_t> train;
    std::vector<std::int64_t> val;
};

Split make_split(std::int64_t n, double val_fraction, std::uint64_t seed) {
    Split split;
    if (val_fraction <= 0.0) {
        split.train.resize(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) split.train[static_cast<std::size_t>(i)] = i;
        return split;
    }
    if (n < 2) throw UsageError("need at least 2 samples for a validation split");
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    Rng rng(seed);
    rng.shuffle(idx.begin(), idx.end());
    const auto n_val = std::clamp<std::int64_t>(
        static_cast<std::int64_t>(std::llround(static_cast<double>(n) * val_fraction)), 1, n - 1);
    split.val.assign(idx.begin(), idx.begin() + n_val);
    split.train.assign(idx.begin() + n_val, idx.end());
    std::sort(split.val.begin(), split.val.end());
    std::sort(split.train.begin(), split.train.end());
    return split;
}

// --- train ---------------------------------------------------------------------

struct TrainCmd {
    std::string out = "alope-train";
    std::uint64_t seed = 0;
    std::string dump_path;
    double val_fraction = 0.0;
    DataFlags data;
    ModelFlags model;
    TrainFlags hypers;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("train", "Train a regression-head strategy");
        cmd->fallthrough();
        cmd->add_option("--out", out, "Artifact directory");
        cmd->add_option("--seed", seed, "Master seed for all randomness");
        cmd->add_option("--dump", dump_path, "Frozen embedding dump (skips the backbone)");
        cmd->add_option("--val-fraction", val_fraction, "Held-out validation fraction");
        data.add(cmd);
        model.add(cmd);
        hypers.add(cmd, /*with_strategy=*/true);
    }

    json config_json() const {
        json cfg = hypers.to_json();
        cfg.update(data.to_json());
        cfg.update(model.to_json());
        cfg["dump"] = dump_path;
        cfg["val_fraction"] = val_fraction;
        cfg["out"] = out;
        return cfg;
    }

    int run() {
        if (dump_path.empty() == data.data.empty())
            throw UsageError("train: pass exactly one of --dump or --data");

        ManifestBuilder mf;
        mf.command = "train";
        mf.seed = seed;
        mf.config = config_json();
        prepare_out_dir(out);

        TrainConfig cfg = hypers.to_config(seed);
        TrainReport report;
        std::vector<PredictionRow> predictions;
        json extra;

        if (!dump_path.empty()) {
            cfg.frozen_backbone = true;
            require_exists(dump_path);
            mf.add_input(dump_path);
            const EmbeddingDump dump = usage_phase([&] { return read_dump(dump_path); });
            usage_phase([&] {
                for (std::int64_t layer : cfg.layers)
                    dump.layer_slot(static_cast<std::int32_t>(
                        resolve_layer(layer, dump.source_n_layers)));
            });
            Rng rng(seed);
            auto strategy = usage_phase([&] {
                return make_strategy<double>(cfg.strategy, cfg.layers, dump.hidden_dim,
                                             dump.source_n_layers, rng,
                                             std::vector<double>(cfg.loss_weights), cfg.with_bias);
            });
            const Split split = make_split(dump.n_samples(), val_fraction, seed);
            report = train(dump, strategy, cfg, val_fraction > 0 ? &split.train : nullptr,
                           val_fraction > 0 ? &split.val : nullptr);
            save_head_checkpoint(strategy, out + "/head.ckpt");

            const auto batch = gather_layers<double>(dump, cfg.layers);
            const auto scores = strategy.scores(batch);
            for (std::int64_t i = 0; i < dump.n_samples(); ++i) {
                PredictionRow row;
                row.pair_id = "all";
                row.index = i;
                row.prediction = scores.data()[static_cast<std::size_t>(i)];
                row.reference = dump.targets[static_cast<std::size_t>(i)];
                predictions.push_back(std::move(row));
            }
            extra["mode"] = "frozen-dump";
            extra["n_samples"] = dump.n_samples();
            extra["n_train"] = static_cast<std::int64_t>(split.train.size());
            extra["n_val"] = static_cast<std::int64_t>(split.val.size());
        } else {
            auto [backbone, fresh] = model.build(seed, mf);
            LiveData live = load_live_data(data, backbone.config().max_seq_len,
                                           backbone.config().vocab_size, mf);
            Rng rng(seed);
            auto strategy = usage_phase([&] {
                return make_strategy<double>(cfg.strategy, cfg.layers,
                                             backbone.config().d_model,
                                             backbone.config().n_layers, rng,
                                             std::vector<double>(cfg.loss_weights), cfg.with_bias);
            });
            const auto n = static_cast<std::int64_t>(live.samples.size());
            const Split split = make_split(n, val_fraction, seed);
            report = train(backbone, live.sequences, live.targets, strategy, cfg,
                           val_fraction > 0 ? &split.train : nullptr,
                           val_fraction > 0 ? &split.val : nullptr);
            save_head_checkpoint(strategy, out + "/head.ckpt");
            if (!backbone.adapters().empty()) {
                write_checkpoint(adapter_checkpoint(backbone), out + "/adapters.ckpt");
                mf.outputs.push_back("adapters.ckpt");
            }
            if (fresh) {
                write_checkpoint(model_checkpoint(backbone), out + "/model.ckpt");
                mf.outputs.push_back("model.ckpt");
            }
            for (std::int64_t i = 0; i < n; ++i) {
                const auto trace = backbone.forward(live.sequences[static_cast<std::size_t>(i)]);
                const auto batch = gather_layers<double>({trace}, cfg.layers);
                PredictionRow row;
                row.pair_id = live.pair_ids[static_cast<std::size_t>(i)];
                row.index = i;
                row.prediction = live.transform.invert(strategy.scores(batch).item());
                row.reference = live.samples[static_cast<std::size_t>(i)].score;
                predictions.push_back(std::move(row));
            }
            extra["mode"] = "live";
            extra["n_samples"] = n;
            extra["n_train"] = static_cast<std::int64_t>(split.train.size());
            extra["n_val"] = static_cast<std::int64_t>(split.val.size());
            extra["base_hash_before"] = hex64(report.base_hash_before);
            extra["base_hash_after"] = hex64(report.base_hash_after);
        }

        write_predictions(out + "/predictions.tsv", predictions);

        json rj = extra;
        rj["strategy"] = hypers.strategy;
        rj["layers"] = parse_i64_list(hypers.layers, "--layers");
        rj["trainable_params"] = report.trainable_params;
        rj["steps"] = static_cast<std::int64_t>(report.loss_curve.size());
        rj["final_loss"] = report.loss_curve.empty() ? json() : json(report.loss_curve.back());
        rj["loss_curve"] = report.loss_curve;
        rj["val_spearman"] = report.val_metric;
        rj["checkpoint"] = "head.ckpt";
        atomic_write_file(out + "/train_report.json", rj.dump(2) + "\n");

        mf.outputs.insert(mf.outputs.end(),
                          {"head.ckpt", "head.ckpt.json", "train_report.json", "predictions.tsv"});
        mf.write(out);

        std::printf("train: %s, %lld steps, trainable params %lld\n",
                    extra["mode"].get<std::string>().c_str(),
                    static_cast<long long>(report.loss_curve.size()),
                    static_cast<long long>(report.trainable_params));
        if (!report.loss_curve.empty())
            std::printf("loss %.6g -> %.6g\n", report.loss_curve.front(),
                        report.loss_curve.back());
        if (!report.val_metric.empty())
            std::printf("validation spearman %.4f\n", report.val_metric.back());
        std::printf("wrote %s/head.ckpt\n", out.c_str());
        return 0;
    }
};

// --- sweep ---------------------------------------------------------------------

struct SweepCmd {
    std::string out = "alope-sweep";
    std::uint64_t seed = 0;
    std::string dump_path;
    std::string layers = "-1,-7,-11,-16,-20,-24";
    double test_fraction = 0.2;
    double alpha = 0.05;
    bool two_sided = false;
    DataFlags data;
    ModelFlags model;
    TrainFlags hypers;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("sweep",
                                       "Per-layer vanilla-head sweep with a significance report");
        cmd->add_option("--out", out, "Artifact directory");
        cmd->add_option("--seed", seed, "Master seed for all randomness");
        cmd->add_option("--dump", dump_path, "Frozen embedding dump (skips the backbone)");
        cmd->add_option("--layers", layers, "Comma-separated signed layer indices to sweep");
        cmd->add_option("--test-fraction", test_fraction, "Held-out test fraction");
        cmd->add_option("--alpha", alpha, "Significance level for the report stars");
        cmd->add_flag("--two-sided", two_sided, "Two-sided Williams tests (default one-sided)");
        data.add(cmd);
        model.add(cmd);
        hypers.add(cmd, /*with_strategy=*/false);
        cmd->fallthrough();
    }

    json config_json() const {
        json cfg = hypers.to_json();
        cfg.update(data.to_json());
        cfg.update(model.to_json());
        cfg["dump"] = dump_path;
        cfg["layers"] = layers;
        cfg["test_fraction"] = test_fraction;
        cfg["alpha"] = alpha;
        cfg["two_sided"] = two_sided;
        cfg["out"] = out;
        cfg.erase("strategy");  // sweeps are vanilla by construction
        return cfg;
    }

    int run() {
        if (dump_path.empty() == data.data.empty())
            throw UsageError("sweep: pass exactly one of --dump or --data");
        if (!(test_fraction > 0.0) || !(test_fraction < 1.0))
            throw UsageError("sweep: --test-fraction must lie in (0, 1)");

        ManifestBuilder mf;
        mf.command = "sweep";
        mf.seed = seed;
        mf.config = config_json();
        prepare_out_dir(out);

        TrainConfig cfg = hypers.to_config(seed);
        const auto layer_list = parse_i64_list(layers, "--layers");

        SweepReport sweep;
        std::vector<double> targets;
        std::vector<std::string> pair_ids;
        if (!dump_path.empty()) {
            cfg.frozen_backbone = true;
            require_exists(dump_path);
            mf.add_input(dump_path);
            const EmbeddingDump dump = usage_phase([&] { return read_dump(dump_path); });
            sweep = layer_sweep<double>(dump, layer_list, cfg, test_fraction, nullptr);
            targets.assign(dump.targets.begin(), dump.targets.end());
        } else {
            auto [backbone, fresh] = model.build(seed, mf);
            (void)fresh;
            LiveData live = load_live_data(data, backbone.config().max_seq_len,
                                           backbone.config().vocab_size, mf);
            sweep = layer_sweep(backbone, live.sequences, live.targets, live.pair_ids, layer_list,
                                cfg, test_fraction);
            targets = live.targets;
            pair_ids = live.pair_ids;
        }

        const auto rows = rows_from_sweep(sweep, targets, pair_ids.empty() ? nullptr : &pair_ids);
        const ReportTable table = build_report(rows, alpha, two_sided);
        const std::string csv = report_csv(table);
        atomic_write_file(out + "/sweep_report.csv", csv);

        json sj;
        sj["best_layer"] = sweep.best_layer;
        sj["n_train"] = sweep.n_train;
        sj["n_test"] = sweep.n_test;
        sj["test_fraction"] = test_fraction;
        sj["alpha"] = alpha;
        sj["two_sided"] = two_sided;
        sj["runs"] = json::array();
        for (const auto& run : sweep.runs) {
            json r;
            r["layer"] = run.layer;
            r["ok"] = run.ok;
            r["error"] = run.error;
            r["avg"] = run.ok ? json(run.avg) : json();
            r["per_pair"] = run.per_pair;
            sj["runs"].push_back(std::move(r));
        }
        sj["table"] = json::parse(report_json(table));
        atomic_write_file(out + "/sweep_report.json", sj.dump(2) + "\n");

        mf.outputs.insert(mf.outputs.end(), {"sweep_report.csv", "sweep_report.json"});
        mf.write(out);

        std::fputs(csv.c_str(), stdout);
        std::printf("best layer: %lld (train %lld / test %lld)\n",
                    static_cast<long long>(sweep.best_layer),
                    static_cast<long long>(sweep.n_train), static_cast<long long>(sweep.n_test));
        return 0;
    }
};

// --- eval ----------------------------------------------------------------------

struct EvalCmd {
    std::string out = "alope-eval";
    std::string predictions_path;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("eval", "Per-pair correlation metrics for a prediction file");
        cmd->add_option("--out", out, "Artifact directory");
        cmd->add_option("--predictions", predictions_path, "Prediction TSV")->required();
        cmd->fallthrough();
    }

    static json metrics_for(const std::vector<double>& preds, const std::vector<double>& refs) {
        json m;
        m["n"] = static_cast<std::int64_t>(preds.size());
        try {
            m["spearman"] = stats::spearman(preds, refs);
        } catch (const DegenerateInputError&) {
            m["spearman"] = nullptr;
        }
        try {
            m["pearson"] = stats::pearson(preds, refs);
        } catch (const DegenerateInputError&) {
            m["pearson"] = nullptr;
        }
        return m;
    }

    static void print_metrics(const std::string& label, const json& m) {
        const auto fmt = [](const json& v) {
            return v.is_null() ? std::string("      NA") : [&] {
                char buf[16];
                std::snprintf(buf, sizeof(buf), "%8.3f", v.get<double>());
                return std::string(buf);
            }();
        };
        std::printf("%-12s %6lld   %s   %s\n", label.c_str(),
                    static_cast<long long>(m["n"].get<std::int64_t>()),
                    fmt(m["spearman"]).c_str(), fmt(m["pearson"]).c_str());
    }

    int run() {
        require_exists(predictions_path);
        const auto rows = usage_phase([&] { return read_predictions(predictions_path); });
        const auto sets = usage_phase([&] { return group_predictions(rows); });

        ManifestBuilder mf;
        mf.command = "eval";
        mf.config = {{"predictions", predictions_path}, {"out", out}};
        mf.add_input(predictions_path);
        prepare_out_dir(out);

        json metrics;
        metrics["pairs"] = json::array();
        std::vector<double> all_preds, all_refs;
        std::printf("%-12s %6s   %8s   %8s\n", "pair", "n", "spearman", "pearson");
        for (const auto& set : sets) {
            json m = metrics_for(set.predictions, set.references);
            m["pair_id"] = set.pair_id;
            print_metrics(set.pair_id, m);
            metrics["pairs"].push_back(std::move(m));
            all_preds.insert(all_preds.end(), set.predictions.begin(), set.predictions.end());
            all_refs.insert(all_refs.end(), set.references.begin(), set.references.end());
        }
        metrics["overall"] = metrics_for(all_preds, all_refs);
        print_metrics("overall", metrics["overall"]);
        atomic_write_file(out + "/metrics.json", metrics.dump(2) + "\n");

        mf.outputs.push_back("metrics.json");
        mf.write(out);
        return 0;
    }
};

// --- compare -------------------------------------------------------------------

struct CompareCmd {
    std::string out = "alope-compare";
    std::string first_path;
    std::string second_path;
    double alpha = 0.05;
    bool two_sided = false;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand(
            "compare", "Williams significance test between two prediction files");
        cmd->add_option("--out", out, "Artifact directory");
        cmd->add_option("--first", first_path, "First prediction TSV")->required();
        cmd->add_option("--second", second_path, "Second prediction TSV")->required();
        cmd->add_option("--alpha", alpha, "Significance level");
        cmd->add_flag("--two-sided", two_sided, "Two-sided test (default one-sided)");
        cmd->fallthrough();
    }

    int run() {
        require_exists(first_path);
        require_exists(second_path);
        const auto first = usage_phase(
            [&] { return group_predictions(read_predictions(first_path)); });
        const auto second = usage_phase(
            [&] { return group_predictions(read_predictions(second_path)); });
        if (first.size() != second.size())
            throw UsageError("compare: the files cover different numbers of pairs");

        ManifestBuilder mf;
        mf.command = "compare";
        mf.config = {{"first", first_path},
                     {"second", second_path},
                     {"alpha", alpha},
                     {"two_sided", two_sided},
                     {"out", out}};
        mf.add_input(first_path);
        mf.add_input(second_path);
        prepare_out_dir(out);

        json cj;
        cj["alpha"] = alpha;
        cj["two_sided"] = two_sided;
        cj["pairs"] = json::array();
        std::size_t n_significant = 0;
        std::printf("%-12s %6s   %7s %7s %7s   %8s %8s  verdict\n", "pair", "n", "rho1", "rho2",
                    "r23", "t", "p");
        for (std::size_t i = 0; i < first.size(); ++i) {
            if (first[i].pair_id != second[i].pair_id)
                throw UsageError("compare: pair sets differ ('" + first[i].pair_id + "' vs '" +
                                 second[i].pair_id + "')");
            PairComparison cmp;
            try {
                cmp = compare_pair(first[i], second[i], alpha, two_sided);
            } catch (const ShapeError& e) {
                throw UsageError(e.what());
            }
            n_significant += cmp.significant ? 1 : 0;
            std::printf("%-12s %6lld   %7.3f %7.3f %7.3f   %8.3f %8.4f  %s\n",
                        cmp.pair_id.c_str(), static_cast<long long>(cmp.n), cmp.rho1, cmp.rho2,
                        cmp.r23, cmp.t, cmp.p, cmp.significant ? "significant" : "not significant");
            json p;
            p["pair_id"] = cmp.pair_id;
            p["n"] = cmp.n;
            p["rho1"] = cmp.rho1;
            p["rho2"] = cmp.rho2;
            p["r23"] = cmp.r23;
            p["t"] = cmp.t;
            p["p"] = cmp.p;
            p["significant"] = cmp.significant;
            cj["pairs"].push_back(std::move(p));
        }
        std::printf("%zu/%zu pairs significant at alpha=%g (%s)\n", n_significant, first.size(),
                    alpha, two_sided ? "two-sided" : "one-sided");
        atomic_write_file(out + "/compare.json", cj.dump(2) + "\n");

        mf.outputs.push_back("compare.json");
        mf.write(out);
        return 0;
    }
};

// --- export-embeddings -----------------------------------------------------------

struct ExportCmd {
    std::string out = "alope-export";
    std::uint64_t seed = 0;
    std::string layers = "all";
    std::string adapters_path;
    DataFlags data;
    ModelFlags model;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("export-embeddings",
                                       "Dump per-layer final-token embeddings for a dataset");
        cmd->add_option("--out", out, "Artifact directory");
        cmd->add_option("--seed", seed, "Seed for a fresh model");
        cmd->add_option("--layers", layers, "'all' or comma-separated signed layer indices");
        cmd->add_option("--adapters", adapters_path, "Adapter checkpoint to load onto the model");
        data.add(cmd);
        model.add(cmd);
        cmd->fallthrough();
    }

    int run() {
        if (data.data.empty()) throw UsageError("export-embeddings: --data is required");

        ManifestBuilder mf;
        mf.command = "export-embeddings";
        mf.seed = seed;
        mf.config = data.to_json();
        mf.config.update(model.to_json());
        mf.config["layers"] = layers;
        mf.config["adapters"] = adapters_path;
        mf.config["out"] = out;
        prepare_out_dir(out);

        auto [backbone, fresh] = model.build(seed, mf);
        if (!adapters_path.empty()) {
            require_exists(adapters_path);
            mf.add_input(adapters_path);
            usage_phase([&] { load_adapters(backbone, read_checkpoint(adapters_path)); });
        }
        LiveData live = load_live_data(data, backbone.config().max_seq_len,
                                       backbone.config().vocab_size, mf);

        const std::int64_t n_layers = backbone.config().n_layers;
        std::vector<std::int32_t> abs_layers;
        if (layers == "all") {
            for (std::int64_t k = 0; k < n_layers; ++k)
                abs_layers.push_back(static_cast<std::int32_t>(k));
        } else {
            for (std::int64_t k : parse_i64_list(layers, "--layers"))
                abs_layers.push_back(static_cast<std::int32_t>(
                    usage_phase([&] { return resolve_layer(k, n_layers); })));
            std::sort(abs_layers.begin(), abs_layers.end());
            abs_layers.erase(std::unique(abs_layers.begin(), abs_layers.end()), abs_layers.end());
        }

        EmbeddingDump dump;
        dump.layers = abs_layers;
        dump.hidden_dim = backbone.config().d_model;
        dump.source_n_layers = static_cast<std::int32_t>(n_layers);
        dump.source_model = model.checkpoint.empty()
                                ? "fresh(seed=" + std::to_string(seed) + ")"
                                : model.checkpoint;
        const auto n = static_cast<std::int64_t>(live.samples.size());
        dump.embeddings.reserve(static_cast<std::size_t>(n) * abs_layers.size() *
                                static_cast<std::size_t>(dump.hidden_dim));
        for (std::int64_t i = 0; i < n; ++i) {
            const auto trace = backbone.forward(live.sequences[static_cast<std::size_t>(i)]);
            for (const std::int32_t layer : abs_layers) {
                const auto h = final_token_state(trace, layer);
                for (const double v : h.data())
                    dump.embeddings.push_back(static_cast<float>(v));
            }
            dump.targets.push_back(static_cast<float>(live.targets[static_cast<std::size_t>(i)]));
        }
        write_dump(dump, out + "/embeddings.bin");

        mf.outputs.insert(mf.outputs.end(), {"embeddings.bin", "embeddings.bin.json"});
        mf.write(out);

        std::printf("exported %lld samples x %zu layers x %lld dims -> %s/embeddings.bin\n",
                    static_cast<long long>(n), abs_layers.size(),
                    static_cast<long long>(dump.hidden_dim), out.c_str());
        return 0;
    }
};

// --- gen-synth -------------------------------------------------------------------

struct GenSynthCmd {
    std::string out = "alope-synth";
    std::uint64_t seed = 0;
    std::string format = "tsv";
    std::int64_t n = 64;
    // tsv
    std::string pairs = "En-Gu,Et-En";
    double score_min = 0.0;
    double score_max = 100.0;
    bool no_marker = false;
    // dump
    std::string layers = "0,1,2,3,4,5,6,7";
    std::int64_t hidden = 16;
    std::int64_t source_layers = 0;  // 0: max(layers)+1
    std::int64_t planted = -1;
    double noise = 0.1;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("gen-synth",
                                       "Deterministic synthetic datasets and planted dumps");
        cmd->add_option("--out", out, "Artifact directory");
        cmd->add_option("--seed", seed, "Generation seed");
        cmd->add_option("--format", format, "tsv|dump");
        cmd->add_option("--n", n, "Number of samples");
        cmd->add_option("--pairs", pairs, "tsv: comma-separated Src-Tgt language pairs");
        cmd->add_option("--score-min", score_min, "tsv: score lower bound");
        cmd->add_option("--score-max", score_max, "tsv: score upper bound");
        cmd->add_flag("--no-marker", no_marker, "tsv: drop the learnable score marker");
        cmd->add_option("--layers", layers, "dump: absolute layer ids to store");
        cmd->add_option("--hidden", hidden, "dump: hidden width");
        cmd->add_option("--source-layers", source_layers,
                        "dump: source model depth (default max layer + 1)");
        cmd->add_option("--planted", planted, "dump: layer carrying the signal");
        cmd->add_option("--noise", noise, "dump: target noise sigma");
        cmd->fallthrough();
    }

    int run() {
        ManifestBuilder mf;
        mf.command = "gen-synth";
        mf.seed = seed;
        mf.config = {{"format", format},   {"n", n},
                     {"pairs", pairs},     {"score_min", score_min},
                     {"score_max", score_max}, {"no_marker", no_marker},
                     {"layers", layers},   {"hidden", hidden},
                     {"source_layers", source_layers}, {"planted", planted},
                     {"noise", noise},     {"out", out}};
        prepare_out_dir(out);

        if (format == "tsv") {
            SynthConfig cfg;
            cfg.n_samples = n;
            cfg.seed = seed;
            cfg.score_min = score_min;
            cfg.score_max = score_max;
            cfg.plant_marker = !no_marker;
            cfg.pairs.clear();
            for (const auto& pair : parse_str_list(pairs)) {
                const auto dash = pair.find('-');
                if (dash == std::string::npos || dash == 0 || dash + 1 == pair.size())
                    throw UsageError("--pairs: expected Src-Tgt, got '" + pair + "'");
                cfg.pairs.emplace_back(pair.substr(0, dash), pair.substr(dash + 1));
            }
            const auto samples = usage_phase([&] { return gen_synthetic(cfg); });
            write_tsv(out + "/synth.tsv", samples);
            mf.outputs.push_back("synth.tsv");
            mf.write(out);
            std::printf("wrote %s/synth.tsv (%zu samples, %zu pairs)\n", out.c_str(),
                        samples.size(), cfg.pairs.size());
            return 0;
        }
        if (format == "dump") {
            if (planted < 0) throw UsageError("gen-synth dump: --planted is required");
            std::vector<std::int32_t> layer_ids;
            for (std::int64_t k : parse_i64_list(layers, "--layers")) {
                if (k < 0) throw UsageError("gen-synth dump: layer ids are absolute (>= 0)");
                layer_ids.push_back(static_cast<std::int32_t>(k));
            }
            std::int64_t depth = source_layers;
            if (depth <= 0)
                depth = 1 + *std::max_element(layer_ids.begin(), layer_ids.end());
            const auto dump = usage_phase([&] {
                return gen_planted_dump(n, layer_ids, hidden, static_cast<std::int32_t>(depth),
                                        static_cast<std::int32_t>(planted), noise, seed);
            });
            write_dump(dump, out + "/planted.bin");
            mf.outputs.insert(mf.outputs.end(), {"planted.bin", "planted.bin.json"});
            mf.write(out);
            std::printf("wrote %s/planted.bin (%lld samples, signal at layer %lld)\n", out.c_str(),
                        static_cast<long long>(n), static_cast<long long>(planted));
            return 0;
        }
        throw UsageError("gen-synth: --format must be tsv or dump, got '" + format + "'");
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"alope: layer-adaptive regression heads over a frozen decoder backbone"};
    app.set_version_flag("--version", ALOPE_BUILD_ID);
    app.require_subcommand(1);
    // One config file can cover several commands: keys live in a section named
    // after the command ([train], [sweep], ...) and use long option names.
    // Command-line flags override config values; the env var supplies a
    // default path when --config is absent.
    app.set_config("--config", "", "Config file with [command] sections of key=value pairs")
        ->envname("ALOPE_CONFIG");

    TrainCmd train_cmd;
    SweepCmd sweep_cmd;
    EvalCmd eval_cmd;
    CompareCmd compare_cmd;
    ExportCmd export_cmd;
    GenSynthCmd gen_cmd;
    train_cmd.add(app);
    sweep_cmd.add(app);
    eval_cmd.add(app);
    compare_cmd.add(app);
    export_cmd.add(app);
    gen_cmd.add(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);  // prints help or the error message
        return code == 0 ? 0 : 2;
    }

    try {
        if (app.got_subcommand("train")) return train_cmd.run();
        if (app.got_subcommand("sweep")) return sweep_cmd.run();
        if (app.got_subcommand("eval")) return eval_cmd.run();
        if (app.got_subcommand("compare")) return compare_cmd.run();
        if (app.got_subcommand("export-embeddings")) return export_cmd.run();
        if (app.got_subcommand("gen-synth")) return gen_cmd.run();
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
