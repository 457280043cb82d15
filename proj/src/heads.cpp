#include "alope/heads.hpp"

#include <algorithm>

namespace alope {

void check_distinct_layers(const std::vector<std::int64_t>& layers, std::int64_t n_layers) {
    std::vector<std::int64_t> resolved;
    resolved.reserve(layers.size());
    for (std::int64_t l : layers) resolved.push_back(resolve_layer(l, n_layers));
    std::sort(resolved.begin(), resolved.end());
    const auto dup = std::adjacent_find(resolved.begin(), resolved.end());
    if (dup != resolved.end())
        throw ShapeError("layer set resolves to duplicate absolute layer " + std::to_string(*dup));
}

template <typename T>
RegressionHead<T> make_head(std::int64_t layer, std::int64_t d_model, Rng& rng, bool with_bias) {
    if (d_model < 1) throw ShapeError("regression head needs d_model >= 1");
    RegressionHead<T> head;
    head.layer = layer;
    std::vector<T> w(static_cast<std::size_t>(d_model));
    for (auto& v : w) v = static_cast<T>(rng.normal(0.0, 0.02));
    head.w = Tensor<T>::from_data({d_model}, std::move(w), true);
    if (with_bias) head.bias = Tensor<T>::scalar(T(0), true);
    return head;
}

template <typename T>
DynamicWeighting<T> make_dynamic(std::vector<std::int64_t> layers, std::int64_t d_model,
                                 std::int64_t n_layers, Rng& rng, bool with_bias) {
    if (layers.size() < 2)
        throw ShapeError("dynamic weighting needs at least 2 layers (got " +
                         std::to_string(layers.size()) + "); use a vanilla head for one layer");
    check_distinct_layers(layers, n_layers);
    DynamicWeighting<T> dw;
    dw.layers = std::move(layers);
    // Zero raw weights: softmax starts uniform over the selected layers.
    dw.w = Tensor<T>::zeros({static_cast<std::int64_t>(dw.layers.size())}, true);
    dw.head = make_head<T>(dw.layers[0], d_model, rng, with_bias);  // layer field unused
    return dw;
}

template <typename T>
MultiHead<T> make_multihead(const std::vector<std::int64_t>& layers, std::int64_t d_model,
                            std::int64_t n_layers, Rng& rng, std::vector<T> loss_weights,
                            bool with_bias) {
    if (layers.size() < 2)
        throw ShapeError("multi-head regression needs at least 2 heads (got " +
                         std::to_string(layers.size()) + ")");
    check_distinct_layers(layers, n_layers);
    MultiHead<T> mh;
    if (loss_weights.empty()) loss_weights.assign(layers.size(), T(1) / T(layers.size()));
    if (loss_weights.size() != layers.size())
        throw ShapeError("got " + std::to_string(loss_weights.size()) + " loss weights for " +
                         std::to_string(layers.size()) + " heads");
    T total = 0;
    for (T w : loss_weights) {
        if (!(w > T(0))) throw ShapeError("multi-head loss weights must be positive");
        total += w;
    }
    for (T& w : loss_weights) w /= total;  // normalized to sum 1
    mh.loss_weights = std::move(loss_weights);
    for (std::int64_t layer : layers) mh.heads.push_back(make_head<T>(layer, d_model, rng, with_bias));
    return mh;
}

namespace {

template <typename T>
Tensor<T> head_output(const Tensor<T>& h, const RegressionHead<T>& head) {
    Tensor<T> y = dot(h, head.w);
    if (head.bias.defined()) y = add(y, head.bias);
    return y;
}

// Predictions of one head over every trace, as a length-n tensor.
template <typename T>
Tensor<T> concat_scalars(std::vector<Tensor<T>> scalars) {
    std::vector<Tensor<T>> rows;
    rows.reserve(scalars.size());
    for (auto& s : scalars) rows.push_back(reshape(s, {1}));
    return concat(rows);
}

}  // namespace

template <typename T>
Tensor<T> predict_vanilla(const ForwardTrace<T>& trace, const RegressionHead<T>& head) {
    return head_output(final_token_state(trace, head.layer), head);
}

template <typename T>
Tensor<T> predict_dynamic(const ForwardTrace<T>& trace, const DynamicWeighting<T>& dw) {
    if (dw.layers.size() < 2) throw ShapeError("dynamic weighting needs at least 2 layers");
    check_distinct_layers(dw.layers, trace.n_layers());
    const Tensor<T> alpha = softmax(dw.w);
    Tensor<T> combined;
    for (std::size_t i = 0; i < dw.layers.size(); ++i) {
        const Tensor<T> term =
            scale_t(final_token_state(trace, dw.layers[i]), element(alpha, static_cast<std::int64_t>(i)));
        combined = combined.defined() ? add(combined, term) : term;
    }
    return head_output(combined, dw.head);
}

template <typename T>
Tensor<T> multihead_loss(const std::vector<ForwardTrace<T>>& traces, const MultiHead<T>& mh,
                         const std::vector<T>& targets) {
    if (traces.empty()) throw ShapeError("multihead_loss: empty batch");
    if (traces.size() != targets.size())
        throw ShapeError("multihead_loss: " + std::to_string(traces.size()) + " traces vs " +
                         std::to_string(targets.size()) + " targets");
    if (mh.loss_weights.size() != mh.heads.size())
        throw ShapeError("multihead_loss: " + std::to_string(mh.loss_weights.size()) +
                         " loss weights for " + std::to_string(mh.heads.size()) + " heads");
    const Tensor<T> y = Tensor<T>::from_data({static_cast<std::int64_t>(targets.size())},
                                             std::vector<T>(targets.begin(), targets.end()), false);
    Tensor<T> loss;
    for (std::size_t h = 0; h < mh.heads.size(); ++h) {
        std::vector<Tensor<T>> preds;
        preds.reserve(traces.size());
        for (const auto& trace : traces) preds.push_back(predict_vanilla(trace, mh.heads[h]));
        const Tensor<T> term = scale(mse_loss(concat_scalars(std::move(preds)), y), mh.loss_weights[h]);
        loss = loss.defined() ? add(loss, term) : term;
    }
    return loss;
}

template <typename T>
Tensor<T> multihead_predict(const ForwardTrace<T>& trace, const MultiHead<T>& mh) {
    if (mh.heads.empty()) throw ShapeError("multihead_predict: no heads");
    Tensor<T> acc;
    for (const RegressionHead<T>& head : mh.heads) {
        const Tensor<T> y = predict_vanilla(trace, head);
        acc = acc.defined() ? add(acc, y) : y;
    }
    return scale(acc, T(1) / T(mh.heads.size()));
}

// --- batched embedding form --------------------------------------------------

template <typename T>
const Tensor<T>& LayerBatch<T>::at(std::int64_t signed_layer) const {
    const std::int64_t abs = resolve_layer(signed_layer, source_n_layers);
    for (std::size_t i = 0; i < abs_layers.size(); ++i)
        if (abs_layers[i] == abs) return H[i];
    throw ShapeError("layer " + std::to_string(signed_layer) + " (absolute " + std::to_string(abs) +
                     ") is not in the gathered layer batch");
}

template <typename T>
LayerBatch<T> gather_layers(const std::vector<ForwardTrace<T>>& traces,
                            const std::vector<std::int64_t>& layers) {
    if (traces.empty()) throw ShapeError("gather_layers: empty trace batch");
    LayerBatch<T> batch;
    batch.source_n_layers = traces[0].n_layers();
    batch.n = static_cast<std::int64_t>(traces.size());
    for (std::int64_t layer : layers) {
        batch.abs_layers.push_back(resolve_layer(layer, batch.source_n_layers));
        std::vector<Tensor<T>> rows;
        rows.reserve(traces.size());
        for (const auto& trace : traces) rows.push_back(final_token_state(trace, layer));
        batch.H.push_back(stack_rows(rows));
    }
    return batch;
}

template <typename T>
LayerBatch<T> gather_layers(const EmbeddingDump& dump, const std::vector<std::int64_t>& layers) {
    dump.validate();
    if (dump.n_samples() < 1) throw ShapeError("gather_layers: empty embedding dump");
    LayerBatch<T> batch;
    batch.source_n_layers = dump.source_n_layers;
    batch.n = dump.n_samples();
    for (std::int64_t layer : layers) {
        const std::int64_t abs = resolve_layer(layer, dump.source_n_layers);
        const std::int64_t slot = dump.layer_slot(static_cast<std::int32_t>(abs));
        batch.abs_layers.push_back(abs);
        std::vector<T> values(static_cast<std::size_t>(batch.n * dump.hidden_dim));
        for (std::int64_t i = 0; i < batch.n; ++i) {
            const float* src = dump.sample_layer(i, slot);
            for (std::int64_t d = 0; d < dump.hidden_dim; ++d)
                values[static_cast<std::size_t>(i * dump.hidden_dim + d)] = static_cast<T>(src[d]);
        }
        batch.H.push_back(Tensor<T>::from_data({batch.n, dump.hidden_dim}, std::move(values), false));
    }
    return batch;
}

template <typename T>
Tensor<T> head_scores(const LayerBatch<T>& batch, const RegressionHead<T>& head) {
    const Tensor<T>& H = batch.at(head.layer);
    Tensor<T> preds = reshape(linear(H, reshape(head.w, {1, H.dim(1)})), {batch.n});
    if (head.bias.defined()) preds = add(preds, broadcast_scalar(head.bias, batch.n));
    return preds;
}

template <typename T>
Tensor<T> dynamic_scores(const LayerBatch<T>& batch, const DynamicWeighting<T>& dw) {
    if (dw.layers.size() < 2) throw ShapeError("dynamic weighting needs at least 2 layers");
    check_distinct_layers(dw.layers, batch.source_n_layers);
    const Tensor<T> alpha = softmax(dw.w);
    Tensor<T> combined;
    for (std::size_t i = 0; i < dw.layers.size(); ++i) {
        const Tensor<T> term =
            scale_t(batch.at(dw.layers[i]), element(alpha, static_cast<std::int64_t>(i)));
        combined = combined.defined() ? add(combined, term) : term;
    }
    Tensor<T> preds = reshape(linear(combined, reshape(dw.head.w, {1, combined.dim(1)})), {batch.n});
    if (dw.head.bias.defined()) preds = add(preds, broadcast_scalar(dw.head.bias, batch.n));
    return preds;
}

template <typename T>
Tensor<T> multihead_scores(const LayerBatch<T>& batch, const MultiHead<T>& mh) {
    if (mh.heads.empty()) throw ShapeError("multihead_scores: no heads");
    Tensor<T> acc;
    for (const RegressionHead<T>& head : mh.heads) {
        const Tensor<T> preds = head_scores(batch, head);
        acc = acc.defined() ? add(acc, preds) : preds;
    }
    return scale(acc, T(1) / T(mh.heads.size()));
}

template <typename T>
Tensor<T> multihead_batch_loss(const LayerBatch<T>& batch, const MultiHead<T>& mh,
                               const Tensor<T>& targets) {
    if (mh.loss_weights.size() != mh.heads.size())
        throw ShapeError("multihead_batch_loss: " + std::to_string(mh.loss_weights.size()) +
                         " loss weights for " + std::to_string(mh.heads.size()) + " heads");
    Tensor<T> loss;
    for (std::size_t h = 0; h < mh.heads.size(); ++h) {
        const Tensor<T> term = scale(mse_loss(head_scores(batch, mh.heads[h]), targets),
                                     mh.loss_weights[h]);
        loss = loss.defined() ? add(loss, term) : term;
    }
    return loss;
}

// --- strategy wrapper ----------------------------------------------------------

StrategyKind parse_strategy(const std::string& name) {
    if (name == "vanilla") return StrategyKind::vanilla;
    if (name == "dynamic") return StrategyKind::dynamic;
    if (name == "multihead") return StrategyKind::multihead;
    throw ShapeError("unknown head strategy '" + name +
                     "' (expected vanilla, dynamic, or multihead)");
}

std::string strategy_name(StrategyKind kind) {
    switch (kind) {
        case StrategyKind::vanilla: return "vanilla";
        case StrategyKind::dynamic: return "dynamic";
        case StrategyKind::multihead: return "multihead";
    }
    throw ShapeError("invalid strategy kind");
}

namespace {

template <typename T>
void push_head_params(std::vector<std::pair<std::string, Tensor<T>>>& out, const std::string& prefix,
                      const RegressionHead<T>& head) {
    out.emplace_back(prefix + ".w", head.w);
    if (head.bias.defined()) out.emplace_back(prefix + ".bias", head.bias);
}

}  // namespace

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> HeadStrategy<T>::named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    switch (kind) {
        case StrategyKind::vanilla:
            push_head_params(out, "head", head);
            break;
        case StrategyKind::dynamic:
            out.emplace_back("dynamic.w", dynamic.w);
            push_head_params(out, "head", dynamic.head);
            break;
        case StrategyKind::multihead:
            for (std::size_t h = 0; h < multi.heads.size(); ++h)
                push_head_params(out, "heads." + std::to_string(h), multi.heads[h]);
            break;
    }
    return out;
}

template <typename T>
std::vector<Tensor<T>> HeadStrategy<T>::parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) {
        (void)name;
        out.push_back(t);
    }
    return out;
}

template <typename T>
std::int64_t HeadStrategy<T>::n_parameters() const {
    std::int64_t total = 0;
    for (const auto& [name, t] : named_parameters()) {
        (void)name;
        total += t.numel();
    }
    return total;
}

template <typename T>
Tensor<T> HeadStrategy<T>::scores(const LayerBatch<T>& batch) const {
    switch (kind) {
        case StrategyKind::vanilla: return head_scores(batch, head);
        case StrategyKind::dynamic: return dynamic_scores(batch, dynamic);
        case StrategyKind::multihead: return multihead_scores(batch, multi);
    }
    throw ShapeError("invalid strategy kind");
}

template <typename T>
Tensor<T> HeadStrategy<T>::loss(const LayerBatch<T>& batch, const Tensor<T>& targets) const {
    if (kind == StrategyKind::multihead) return multihead_batch_loss(batch, multi, targets);
    return mse_loss(scores(batch), targets);
}

template <typename T>
HeadStrategy<T> make_strategy(StrategyKind kind, const std::vector<std::int64_t>& layers,
                              std::int64_t d_model, std::int64_t n_layers, Rng& rng,
                              std::vector<T> loss_weights, bool with_bias) {
    if (kind != StrategyKind::multihead && !loss_weights.empty())
        throw ShapeError("loss weights apply to the multihead strategy only");
    HeadStrategy<T> s;
    s.kind = kind;
    s.layers = layers;
    switch (kind) {
        case StrategyKind::vanilla:
            if (layers.size() != 1)
                throw ShapeError("vanilla strategy takes exactly one layer (got " +
                                 std::to_string(layers.size()) + ")");
            resolve_layer(layers[0], n_layers);
            s.head = make_head<T>(layers[0], d_model, rng, with_bias);
            break;
        case StrategyKind::dynamic:
            s.dynamic = make_dynamic<T>(layers, d_model, n_layers, rng, with_bias);
            break;
        case StrategyKind::multihead:
            s.multi = make_multihead<T>(layers, d_model, n_layers, rng, std::move(loss_weights),
                                        with_bias);
            break;
    }
    return s;
}

#define ALOPE_INSTANTIATE_STRATEGY(T)                                                               \
    template struct HeadStrategy<T>;                                                                \
    template HeadStrategy<T> make_strategy(StrategyKind, const std::vector<std::int64_t>&,          \
                                           std::int64_t, std::int64_t, Rng&, std::vector<T>, bool);

ALOPE_INSTANTIATE_STRATEGY(float)
ALOPE_INSTANTIATE_STRATEGY(double)

#undef ALOPE_INSTANTIATE_STRATEGY

#define ALOPE_INSTANTIATE_HEADS(T)                                                                  \
    template RegressionHead<T> make_head(std::int64_t, std::int64_t, Rng&, bool);                   \
    template DynamicWeighting<T> make_dynamic(std::vector<std::int64_t>, std::int64_t,              \
                                              std::int64_t, Rng&, bool);                            \
    template MultiHead<T> make_multihead(const std::vector<std::int64_t>&, std::int64_t,            \
                                         std::int64_t, Rng&, std::vector<T>, bool);                 \
    template Tensor<T> predict_vanilla(const ForwardTrace<T>&, const RegressionHead<T>&);           \
    template Tensor<T> predict_dynamic(const ForwardTrace<T>&, const DynamicWeighting<T>&);         \
    template Tensor<T> multihead_loss(const std::vector<ForwardTrace<T>>&, const MultiHead<T>&,     \
                                      const std::vector<T>&);                                       \
    template Tensor<T> multihead_predict(const ForwardTrace<T>&, const MultiHead<T>&);              \
    template struct LayerBatch<T>;                                                                  \
    template LayerBatch<T> gather_layers(const std::vector<ForwardTrace<T>>&,                       \
                                         const std::vector<std::int64_t>&);                         \
    template LayerBatch<T> gather_layers(const EmbeddingDump&, const std::vector<std::int64_t>&);   \
    template Tensor<T> head_scores(const LayerBatch<T>&, const RegressionHead<T>&);                 \
    template Tensor<T> dynamic_scores(const LayerBatch<T>&, const DynamicWeighting<T>&);            \
    template Tensor<T> multihead_scores(const LayerBatch<T>&, const MultiHead<T>&);                 \
    template Tensor<T> multihead_batch_loss(const LayerBatch<T>&, const MultiHead<T>&,              \
                                            const Tensor<T>&);

ALOPE_INSTANTIATE_HEADS(float)
ALOPE_INSTANTIATE_HEADS(double)

#undef ALOPE_INSTANTIATE_HEADS

}  // namespace alope
