#include "alope/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "alope/stats.hpp"

namespace alope {

Optimizer parse_optimizer(const std::string& name) {
    if (name == "adamw") return Optimizer::adamw;
    if (name == "sgd") return Optimizer::sgd;
    throw ShapeError("unknown optimizer '" + name + "' (expected adamw or sgd)");
}

std::string optimizer_name(Optimizer opt) {
    return opt == Optimizer::adamw ? "adamw" : "sgd";
}

void TrainConfig::validate() const {
    if (epochs < 0) throw ShapeError("train config: epochs must be >= 0");
    if (batch_size < 1) throw ShapeError("train config: batch size must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
        throw ShapeError("train config: learning rate must be positive and finite");
    if (weight_decay < 0.0 || !std::isfinite(weight_decay))
        throw ShapeError("train config: weight decay must be >= 0");
    if (eval_every < 0) throw ShapeError("train config: eval interval must be >= 0");
    if (layers.empty()) throw ShapeError("train config: at least one layer is required");
}

template <typename T>
void adamw_step(const std::vector<Tensor<T>>& params, AdamWState& state, double lr, double wd) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t p = 0; p < params.size(); ++p) {
            const auto n = static_cast<std::size_t>(params[p].numel());
            state.m[p].assign(n, 0.0);
            state.v[p].assign(n, 0.0);
        }
    }
    if (state.m.size() != params.size())
        throw ShapeError("adamw: optimizer state holds a different parameter count");
    ++state.t;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor<T> param = params[p];  // cheap handle copy; shares the node
        auto data = param.mutable_data();
        const auto grad = param.grad();
        if (state.m[p].size() != data.size())
            throw ShapeError("adamw: optimizer state does not match parameter size");
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double g = static_cast<double>(grad[i]);
            const double m = state.m[p][i] = state.beta1 * state.m[p][i] + (1.0 - state.beta1) * g;
            const double v = state.v[p][i] = state.beta2 * state.v[p][i] + (1.0 - state.beta2) * g * g;
            const double update = lr * (m / bc1) / (std::sqrt(v / bc2) + state.eps);
            const double x = static_cast<double>(data[i]);
            data[i] = static_cast<T>(x - update - lr * wd * x);
        }
    }
}

template <typename T>
void sgd_step(const std::vector<Tensor<T>>& params, double lr, double wd) {
    for (Tensor<T> param : params) {
        auto data = param.mutable_data();
        const auto grad = param.grad();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double x = static_cast<double>(data[i]);
            data[i] = static_cast<T>(x - lr * static_cast<double>(grad[i]) - lr * wd * x);
        }
    }
}

template <typename T>
double clip_grad_norm(const std::vector<Tensor<T>>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& param : params)
        for (const T g : param.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (Tensor<T> param : params) {
            auto grad = param.mutable_grad();
            for (auto& g : grad) g = static_cast<T>(static_cast<double>(g) * scale);
        }
    }
    return norm;
}

namespace {

// One data source for the shared loop: a row count, a target accessor, and a
// gatherer that turns an index subset into a LayerBatch.
template <typename T>
struct TrainSource {
    std::int64_t n = 0;
    std::function<LayerBatch<T>(const std::vector<std::int64_t>&)> gather;
    std::function<T(std::int64_t)> target_at;
};

std::vector<std::int64_t> resolve_indices(const std::vector<std::int64_t>* subset,
                                          std::int64_t n, const char* what) {
    std::vector<std::int64_t> out;
    if (subset == nullptr) {
        out.resize(static_cast<std::size_t>(n));
        std::iota(out.begin(), out.end(), std::int64_t{0});
        return out;
    }
    out = *subset;
    for (const std::int64_t i : out)
        if (i < 0 || i >= n) {
            std::ostringstream msg;
            msg << what << " index " << i << " out of range for " << n << " samples";
            throw ShapeError(msg.str());
        }
    return out;
}

template <typename T>
Tensor<T> targets_for(const TrainSource<T>& src, const std::vector<std::int64_t>& idx) {
    std::vector<T> vals;
    vals.reserve(idx.size());
    for (const std::int64_t i : idx) vals.push_back(src.target_at(i));
    const std::int64_t m = static_cast<std::int64_t>(vals.size());
    return Tensor<T>::from_data({m}, std::move(vals));
}

template <typename T>
double eval_spearman(const TrainSource<T>& src, const HeadStrategy<T>& strategy,
                     const std::vector<std::int64_t>& idx) {
    const auto batch = src.gather(idx);
    const auto scores = strategy.scores(batch);
    std::vector<double> pred, truth;
    pred.reserve(idx.size());
    truth.reserve(idx.size());
    const auto vals = scores.data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        pred.push_back(static_cast<double>(vals[i]));
        truth.push_back(static_cast<double>(src.target_at(idx[i])));
    }
    try {
        return stats::spearman(pred, truth);
    } catch (const DegenerateInputError&) {
        return std::numeric_limits<double>::quiet_NaN();
    }
}

template <typename T>
[[noreturn]] void throw_diverged(double loss, std::int64_t step, double lr, double grad_norm) {
    std::ostringstream msg;
    msg << "training diverged: non-finite loss " << loss << " at step " << step
        << " (lr=" << lr << ", last grad norm=" << grad_norm << ")";
    throw TrainingDiverged(msg.str(), step, lr, grad_norm);
}

template <typename T>
TrainReport run_training(const TrainSource<T>& src, HeadStrategy<T>& strategy,
                         const std::vector<Tensor<T>>& trainables, const TrainConfig& cfg,
                         const std::vector<std::int64_t>* train_indices,
                         const std::vector<std::int64_t>* val_indices) {
    cfg.validate();
    if (src.n <= 0) throw ShapeError("train: the dataset is empty");
    std::vector<std::int64_t> order = resolve_indices(train_indices, src.n, "train");
    if (order.empty()) throw ShapeError("train: the training subset is empty");
    const std::vector<std::int64_t> val = resolve_indices(val_indices, src.n, "validation");
    const bool have_val = val_indices != nullptr && !val.empty();

    TrainReport report;
    for (const auto& param : trainables) report.trainable_params += param.numel();

    Rng rng(cfg.seed);
    AdamWState state;
    double last_grad_norm = 0.0;
    std::int64_t step = 0;
    bool stop = false;
    for (std::int64_t epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        for (std::size_t start = 0; start < order.size() && !stop; start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const std::vector<std::int64_t> batch_idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                      order.begin() + static_cast<std::ptrdiff_t>(end));
            const auto batch = src.gather(batch_idx);
            const auto targets = targets_for(src, batch_idx);
            zero_grads(trainables);
            const auto loss = strategy.loss(batch, targets);
            const double loss_value = static_cast<double>(loss.item());
            if (!std::isfinite(loss_value)) throw_diverged<T>(loss_value, step, cfg.learning_rate, last_grad_norm);
            backward(loss);
            const double grad_norm = clip_grad_norm(trainables, cfg.grad_clip);
            if (!std::isfinite(grad_norm))
                throw_diverged<T>(loss_value, step, cfg.learning_rate, grad_norm);
            last_grad_norm = grad_norm;
            if (cfg.optimizer == Optimizer::adamw)
                adamw_step(trainables, state, cfg.learning_rate, cfg.weight_decay);
            else
                sgd_step(trainables, cfg.learning_rate, cfg.weight_decay);
            report.loss_curve.push_back(loss_value);
            ++step;
            if (cfg.target_loss > 0.0 && loss_value < cfg.target_loss) stop = true;
            if (!stop && have_val && cfg.eval_every > 0 && step % cfg.eval_every == 0)
                report.val_metric.push_back(eval_spearman(src, strategy, val));
        }
        if (!stop && have_val && cfg.eval_every == 0)
            report.val_metric.push_back(eval_spearman(src, strategy, val));
    }
    return report;
}

// Rows `idx` of every layer matrix, as fresh constant leaves.
template <typename T>
LayerBatch<T> subset_batch(const LayerBatch<T>& full, const std::vector<std::int64_t>& idx) {
    LayerBatch<T> out;
    out.source_n_layers = full.source_n_layers;
    out.abs_layers = full.abs_layers;
    out.n = static_cast<std::int64_t>(idx.size());
    out.H.reserve(full.H.size());
    for (const auto& mat : full.H) {
        const std::int64_t d = mat.dim(1);
        const auto src = mat.data();
        std::vector<T> vals;
        vals.reserve(idx.size() * static_cast<std::size_t>(d));
        for (const std::int64_t i : idx) {
            const auto* row = src.data() + i * d;
            vals.insert(vals.end(), row, row + d);
        }
        const std::int64_t m = static_cast<std::int64_t>(idx.size());
        out.H.push_back(Tensor<T>::from_data({m, d}, std::move(vals)));
    }
    return out;
}

}  // namespace

template <typename T>
TrainReport train(const EmbeddingDump& dump, HeadStrategy<T>& strategy, const TrainConfig& cfg,
                  const std::vector<std::int64_t>* train_indices,
                  const std::vector<std::int64_t>* val_indices) {
    dump.validate();
    // Gathering up front also validates that every strategy layer is present.
    const LayerBatch<T> full = gather_layers<T>(dump, strategy.layers);
    TrainSource<T> src;
    src.n = dump.n_samples();
    src.gather = [&full](const std::vector<std::int64_t>& idx) { return subset_batch(full, idx); };
    src.target_at = [&dump](std::int64_t i) {
        return static_cast<T>(dump.targets[static_cast<std::size_t>(i)]);
    };
    return run_training(src, strategy, strategy.parameters(), cfg, train_indices, val_indices);
}

template <typename T>
TrainReport train(Transformer<T>& model, const std::vector<std::vector<std::int32_t>>& sequences,
                  const std::vector<T>& targets, HeadStrategy<T>& strategy, const TrainConfig& cfg,
                  const std::vector<std::int64_t>* train_indices,
                  const std::vector<std::int64_t>* val_indices) {
    if (sequences.size() != targets.size())
        throw ShapeError("train: sequence and target counts differ");
    if (cfg.train_lora && model.adapters().empty()) {
        LoraConfig lcfg;
        lcfg.rank = cfg.lora_rank;
        lcfg.scale = cfg.lora_scale;
        lcfg.targets = cfg.lora_targets;
        inject(model, lcfg, cfg.seed);
    }
    // The base stays frozen no matter how the model arrived here.
    model.set_base_trainable(false);

    TrainSource<T> src;
    src.n = static_cast<std::int64_t>(sequences.size());
    src.gather = [&model, &sequences, &strategy](const std::vector<std::int64_t>& idx) {
        std::vector<ForwardTrace<T>> traces;
        traces.reserve(idx.size());
        for (const std::int64_t i : idx)
            traces.push_back(model.forward(sequences[static_cast<std::size_t>(i)]));
        return gather_layers(traces, strategy.layers);
    };
    src.target_at = [&targets](std::int64_t i) { return targets[static_cast<std::size_t>(i)]; };

    std::vector<Tensor<T>> trainables;
    for (auto& [name, param] : model.named_adapter_parameters()) trainables.push_back(param);
    for (const auto& param : strategy.parameters()) trainables.push_back(param);

    const std::uint64_t before = model.base_hash();
    TrainReport report = run_training(src, strategy, trainables, cfg, train_indices, val_indices);
    report.base_hash_before = before;
    report.base_hash_after = model.base_hash();
    return report;
}

// --- layer sweep ---------------------------------------------------------------

namespace {

struct Split {
    std::vector<std::int64_t> train;
    std::vector<std::int64_t> test;
};

Split split_samples(std::int64_t n, double test_fraction, std::uint64_t seed) {
    if (n < 2) throw ShapeError("layer sweep: need at least 2 samples to split");
    if (!(test_fraction > 0.0) || !(test_fraction < 1.0))
        throw ShapeError("layer sweep: test fraction must lie in (0, 1)");
    std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), std::int64_t{0});
    Rng rng(seed);
    rng.shuffle(perm.begin(), perm.end());
    auto n_test = static_cast<std::int64_t>(std::llround(static_cast<double>(n) * test_fraction));
    n_test = std::clamp<std::int64_t>(n_test, 1, n - 1);
    Split split;
    split.test.assign(perm.begin(), perm.begin() + n_test);
    split.train.assign(perm.begin() + n_test, perm.end());
    return split;
}

std::vector<std::string> pair_columns(const std::vector<std::string>* pair_ids) {
    if (pair_ids == nullptr || pair_ids->empty()) return {"all"};
    const std::set<std::string> uniq(pair_ids->begin(), pair_ids->end());
    return {uniq.begin(), uniq.end()};
}

// Fills run.per_pair and run.avg from predictions aligned with test indices.
void score_pairs(SweepRun& run, const std::vector<std::string>& pairs,
                 const std::vector<std::int64_t>& test_idx, const std::vector<double>& preds,
                 const std::function<double(std::int64_t)>& target_at,
                 const std::vector<std::string>* pair_ids) {
    double sum = 0.0;
    std::int64_t defined = 0;
    for (const auto& pair : pairs) {
        std::vector<double> p, t;
        for (std::size_t i = 0; i < test_idx.size(); ++i) {
            const std::int64_t sample = test_idx[i];
            if (pair_ids != nullptr && !pair_ids->empty() &&
                (*pair_ids)[static_cast<std::size_t>(sample)] != pair)
                continue;
            p.push_back(preds[i]);
            t.push_back(target_at(sample));
        }
        double rho = std::numeric_limits<double>::quiet_NaN();
        if (p.size() >= 2) {
            try {
                rho = stats::spearman(p, t);
            } catch (const DegenerateInputError&) {
            }
        }
        run.per_pair[pair] = rho;
        if (std::isfinite(rho)) {
            sum += rho;
            ++defined;
        }
    }
    run.avg = defined > 0 ? sum / static_cast<double>(defined)
                          : std::numeric_limits<double>::quiet_NaN();
}

std::int64_t resolve_abs(std::int64_t layer, std::int64_t n_layers) {
    const std::int64_t abs = layer >= 0 ? layer : n_layers + layer;
    return abs;
}

// Argmax of avg over successful runs; ties break toward the layer whose
// resolved index is closest to the end of the stack (i.e. closest to -1).
void choose_best(SweepReport& report, std::int64_t n_layers) {
    bool found = false;
    double best_avg = 0.0;
    std::int64_t best_abs = -1;
    for (const auto& run : report.runs) {
        if (!run.ok || !std::isfinite(run.avg)) continue;
        const std::int64_t abs = resolve_abs(run.layer, n_layers);
        if (!found || run.avg > best_avg || (run.avg == best_avg && abs > best_abs)) {
            found = true;
            best_avg = run.avg;
            best_abs = abs;
            report.best_layer = run.layer;
        }
    }
    if (!found) {
        std::string detail = report.runs.empty() ? "no layers requested" : report.runs.front().error;
        throw std::runtime_error("layer sweep: no layer produced a usable score (" + detail + ")");
    }
}

}  // namespace

template <typename T>
SweepReport layer_sweep(const EmbeddingDump& dump, const std::vector<std::int64_t>& layers,
                        const TrainConfig& cfg, double test_fraction,
                        const std::vector<std::string>* pair_ids) {
    dump.validate();
    if (layers.empty()) throw ShapeError("layer sweep: no layers given");
    if (pair_ids != nullptr && !pair_ids->empty() &&
        static_cast<std::int64_t>(pair_ids->size()) != dump.n_samples())
        throw ShapeError("layer sweep: pair ids do not align with the dump samples");
    const Split split = split_samples(dump.n_samples(), test_fraction, cfg.seed);

    SweepReport report;
    report.pairs = pair_columns(pair_ids);
    report.n_train = static_cast<std::int64_t>(split.train.size());
    report.n_test = static_cast<std::int64_t>(split.test.size());
    report.test_indices = split.test;
    const auto target_at = [&dump](std::int64_t i) {
        return static_cast<double>(dump.targets[static_cast<std::size_t>(i)]);
    };
    for (const std::int64_t layer : layers) {
        SweepRun run;
        run.layer = layer;
        try {
            Rng head_rng(cfg.seed);  // identical head init for every layer
            auto strategy = make_strategy<T>(StrategyKind::vanilla, {layer}, dump.hidden_dim,
                                             dump.source_n_layers, head_rng, {}, cfg.with_bias);
            run.train_report = train(dump, strategy, cfg, &split.train, nullptr);
            const auto full = gather_layers<T>(dump, {layer});
            const auto scores = strategy.scores(subset_batch(full, split.test));
            std::vector<double> preds;
            preds.reserve(split.test.size());
            for (const T v : scores.data()) preds.push_back(static_cast<double>(v));
            score_pairs(run, report.pairs, split.test, preds, target_at, pair_ids);
            run.test_predictions = std::move(preds);
            run.ok = true;
        } catch (const std::exception& e) {
            run.ok = false;
            run.error = e.what();
        }
        report.runs.push_back(std::move(run));
    }
    choose_best(report, dump.source_n_layers);
    return report;
}

template <typename T>
SweepReport layer_sweep(const Transformer<T>& base,
                        const std::vector<std::vector<std::int32_t>>& sequences,
                        const std::vector<T>& targets, const std::vector<std::string>& pair_ids,
                        const std::vector<std::int64_t>& layers, const TrainConfig& cfg,
                        double test_fraction) {
    if (layers.empty()) throw ShapeError("layer sweep: no layers given");
    if (sequences.size() != targets.size())
        throw ShapeError("layer sweep: sequence and target counts differ");
    if (!pair_ids.empty() && pair_ids.size() != sequences.size())
        throw ShapeError("layer sweep: pair ids do not align with the samples");
    const Split split = split_samples(static_cast<std::int64_t>(sequences.size()), test_fraction,
                                      cfg.seed);

    SweepReport report;
    report.pairs = pair_columns(&pair_ids);
    report.n_train = static_cast<std::int64_t>(split.train.size());
    report.n_test = static_cast<std::int64_t>(split.test.size());
    report.test_indices = split.test;
    const auto target_at = [&targets](std::int64_t i) {
        return static_cast<double>(targets[static_cast<std::size_t>(i)]);
    };
    for (const std::int64_t layer : layers) {
        SweepRun run;
        run.layer = layer;
        try {
            Transformer<T> model = base.clone();
            Rng head_rng(cfg.seed);
            auto strategy = make_strategy<T>(StrategyKind::vanilla, {layer},
                                             base.config().d_model, base.config().n_layers,
                                             head_rng, {}, cfg.with_bias);
            run.train_report = train(model, sequences, targets, strategy, cfg, &split.train, nullptr);
            std::vector<ForwardTrace<T>> traces;
            traces.reserve(split.test.size());
            for (const std::int64_t i : split.test)
                traces.push_back(model.forward(sequences[static_cast<std::size_t>(i)]));
            const auto scores = strategy.scores(gather_layers(traces, {layer}));
            std::vector<double> preds;
            preds.reserve(split.test.size());
            for (const T v : scores.data()) preds.push_back(static_cast<double>(v));
            score_pairs(run, report.pairs, split.test, preds, target_at, &pair_ids);
            run.test_predictions = std::move(preds);
            run.ok = true;
        } catch (const std::exception& e) {
            run.ok = false;
            run.error = e.what();
        }
        report.runs.push_back(std::move(run));
    }
    choose_best(report, base.config().n_layers);
    return report;
}

#define ALOPE_INSTANTIATE_TRAIN(T)                                                                  \
    template void adamw_step(const std::vector<Tensor<T>>&, AdamWState&, double, double);           \
    template void sgd_step(const std::vector<Tensor<T>>&, double, double);                          \
    template double clip_grad_norm(const std::vector<Tensor<T>>&, double);                          \
    template TrainReport train(const EmbeddingDump&, HeadStrategy<T>&, const TrainConfig&,          \
                               const std::vector<std::int64_t>*, const std::vector<std::int64_t>*); \
    template TrainReport train(Transformer<T>&, const std::vector<std::vector<std::int32_t>>&,      \
                               const std::vector<T>&, HeadStrategy<T>&, const TrainConfig&,         \
                               const std::vector<std::int64_t>*, const std::vector<std::int64_t>*); \
    template SweepReport layer_sweep<T>(const EmbeddingDump&, const std::vector<std::int64_t>&,     \
                                        const TrainConfig&, double,                                 \
                                        const std::vector<std::string>*);                           \
    template SweepReport layer_sweep(const Transformer<T>&,                                         \
                                     const std::vector<std::vector<std::int32_t>>&,                 \
                                     const std::vector<T>&, const std::vector<std::string>&,        \
                                     const std::vector<std::int64_t>&, const TrainConfig&, double);

ALOPE_INSTANTIATE_TRAIN(float)
ALOPE_INSTANTIATE_TRAIN(double)

#undef ALOPE_INSTANTIATE_TRAIN

}  // namespace alope
