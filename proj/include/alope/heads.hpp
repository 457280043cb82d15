#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "alope/data.hpp"
#include "alope/transformer.hpp"

namespace alope {

// Single linear map from a layer's final-token hidden state to a scalar
// score: y = dot(h_k, w) (+ bias when enabled; off by default).
template <typename T>
struct RegressionHead {
    std::int64_t layer = -1;  // signed layer index
    Tensor<T> w;              // [d_model]
    Tensor<T> bias;           // rank-0; defined() iff the bias is enabled
};

// Trainable softmax-normalized combination of several layers' final-token
// embeddings, fed to one regression head (whose own layer field is unused).
template <typename T>
struct DynamicWeighting {
    std::vector<std::int64_t> layers;  // size L >= 2, distinct after resolution
    Tensor<T> w;                       // raw weights [L]; alpha = softmax(w)
    RegressionHead<T> head;
};

// Independent heads at distinct layers trained under a fixed positive
// weighting of per-head MSE losses; prediction is their arithmetic mean.
template <typename T>
struct MultiHead {
    std::vector<RegressionHead<T>> heads;  // size H >= 2
    std::vector<T> loss_weights;           // positive, sums to 1
};

// Factories validate their invariants and draw initial weights from `rng`
// (heads ~ N(0, 0.02); dynamic raw weights start at zero, i.e. uniform alpha).
template <typename T>
RegressionHead<T> make_head(std::int64_t layer, std::int64_t d_model, Rng& rng,
                            bool with_bias = false);
template <typename T>
DynamicWeighting<T> make_dynamic(std::vector<std::int64_t> layers, std::int64_t d_model,
                                 std::int64_t n_layers, Rng& rng, bool with_bias = false);
template <typename T>
MultiHead<T> make_multihead(const std::vector<std::int64_t>& layers, std::int64_t d_model,
                            std::int64_t n_layers, Rng& rng, std::vector<T> loss_weights = {},
                            bool with_bias = false);

// Throws unless all signed layers resolve to distinct absolute indices.
void check_distinct_layers(const std::vector<std::int64_t>& layers, std::int64_t n_layers);

// --- single-trace predictions (scalar outputs) ------------------------------

template <typename T>
Tensor<T> predict_vanilla(const ForwardTrace<T>& trace, const RegressionHead<T>& head);

template <typename T>
Tensor<T> predict_dynamic(const ForwardTrace<T>& trace, const DynamicWeighting<T>& dw);

// Weighted aggregate of per-head MSE losses over a batch of traces.
template <typename T>
Tensor<T> multihead_loss(const std::vector<ForwardTrace<T>>& traces, const MultiHead<T>& mh,
                         const std::vector<T>& targets);

// Exact arithmetic mean of the per-head predictions (loss weights play no
// role at inference).
template <typename T>
Tensor<T> multihead_predict(const ForwardTrace<T>& trace, const MultiHead<T>& mh);

// --- batched embedding form --------------------------------------------------
//
// The shared representation for the live path (forward traces) and the frozen
// path (embedding dumps): one [n x d_model] matrix of final-token embeddings
// per selected layer.

template <typename T>
struct LayerBatch {
    std::int64_t source_n_layers = 0;       // depth used to resolve signed indices
    std::vector<std::int64_t> abs_layers;   // resolved, aligned with H
    std::vector<Tensor<T>> H;               // each [n x d_model]
    std::int64_t n = 0;

    const Tensor<T>& at(std::int64_t signed_layer) const;
};

// Live path: stacks final_token_state over traces for each selected layer.
template <typename T>
LayerBatch<T> gather_layers(const std::vector<ForwardTrace<T>>& traces,
                            const std::vector<std::int64_t>& layers);

// Frozen path: constant leaves sliced out of the dump (negative indices
// resolve against the dump's source model depth).
template <typename T>
LayerBatch<T> gather_layers(const EmbeddingDump& dump, const std::vector<std::int64_t>& layers);

// Per-sample scores [n] for each strategy over a batch.
template <typename T>
Tensor<T> head_scores(const LayerBatch<T>& batch, const RegressionHead<T>& head);
template <typename T>
Tensor<T> dynamic_scores(const LayerBatch<T>& batch, const DynamicWeighting<T>& dw);
template <typename T>
Tensor<T> multihead_scores(const LayerBatch<T>& batch, const MultiHead<T>& mh);

// Weighted aggregate MSE for multihead training: targets shape [n].
template <typename T>
Tensor<T> multihead_batch_loss(const LayerBatch<T>& batch, const MultiHead<T>& mh,
                               const Tensor<T>& targets);

// --- strategy wrapper ----------------------------------------------------------

enum class StrategyKind { vanilla, dynamic, multihead };

StrategyKind parse_strategy(const std::string& name);  // ShapeError on unknown
std::string strategy_name(StrategyKind kind);

// One trainable head configuration of any strategy, with a uniform surface for
// parameter listing, scoring, and loss. Exactly the member matching `kind` is
// populated.
template <typename T>
struct HeadStrategy {
    StrategyKind kind = StrategyKind::vanilla;
    std::vector<std::int64_t> layers;  // as requested (signed)
    RegressionHead<T> head;            // vanilla
    DynamicWeighting<T> dynamic;       // dynamic
    MultiHead<T> multi;                // multihead

    std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const;
    std::vector<Tensor<T>> parameters() const;
    std::int64_t n_parameters() const;

    Tensor<T> scores(const LayerBatch<T>& batch) const;
    Tensor<T> loss(const LayerBatch<T>& batch, const Tensor<T>& targets) const;
};

// Validates layer arity for the strategy (vanilla: exactly one layer;
// dynamic/multihead: at least two, distinct after resolution) and draws fresh
// parameters. Loss weights are a multihead-only setting.
template <typename T>
HeadStrategy<T> make_strategy(StrategyKind kind, const std::vector<std::int64_t>& layers,
                              std::int64_t d_model, std::int64_t n_layers, Rng& rng,
                              std::vector<T> loss_weights = {}, bool with_bias = false);

extern template struct HeadStrategy<float>;
extern template struct HeadStrategy<double>;
extern template HeadStrategy<float> make_strategy(StrategyKind, const std::vector<std::int64_t>&,
                                                  std::int64_t, std::int64_t, Rng&,
                                                  std::vector<float>, bool);
extern template HeadStrategy<double> make_strategy(StrategyKind, const std::vector<std::int64_t>&,
                                                   std::int64_t, std::int64_t, Rng&,
                                                   std::vector<double>, bool);

}  // namespace alope
