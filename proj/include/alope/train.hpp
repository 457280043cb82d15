#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "alope/data.hpp"
#include "alope/heads.hpp"
#include "alope/lora.hpp"
#include "alope/transformer.hpp"

namespace alope {

enum class Optimizer { adamw, sgd };

Optimizer parse_optimizer(const std::string& name);  // ShapeError on unknown
std::string optimizer_name(Optimizer opt);

struct TrainConfig {
    StrategyKind strategy = StrategyKind::vanilla;
    std::vector<std::int64_t> layers = {-1};
    std::vector<double> loss_weights;  // multihead only
    bool with_bias = false;

    std::int64_t epochs = 3;
    std::int64_t batch_size = 16;
    double learning_rate = 2e-4;
    double weight_decay = 0.0;
    Optimizer optimizer = Optimizer::adamw;
    std::uint64_t seed = 0;
    double grad_clip = 1.0;      // global max-norm; <= 0 disables clipping
    std::int64_t eval_every = 0;  // optimizer steps between mid-epoch validations; 0 = per-epoch only
    double target_loss = 0.0;    // stop once a step's loss drops below; <= 0 disables
    bool frozen_backbone = false;  // embedding-path mode (heads only, no backbone)

    // Live-path backbone adaptation.
    bool train_lora = true;
    std::int64_t lora_rank = 32;
    double lora_scale = 1.0;
    std::vector<std::string> lora_targets = {"attn.q", "attn.k", "attn.v", "attn.o"};

    void validate() const;  // positive epochs/batch/lr
};

struct TrainReport {
    std::vector<double> loss_curve;  // one entry per optimizer step
    std::vector<double> val_metric;  // validation Spearman at each eval point
    std::string checkpoint_path;     // filled by callers that persist artifacts
    std::int64_t trainable_params = 0;
    std::uint64_t base_hash_before = 0;  // live path only
    std::uint64_t base_hash_after = 0;   // equal to before by the frozen-base guarantee
};

// AdamW first/second moments, keyed by parameter order, lazily sized.
struct AdamWState {
    std::vector<std::vector<double>> m, v;
    std::int64_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One decoupled-weight-decay update from the gradients currently stored on
// `params`: p -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * p, with
// bias-corrected moments.
template <typename T>
void adamw_step(const std::vector<Tensor<T>>& params, AdamWState& state, double lr, double wd);

// Plain SGD with the same decoupled decay convention.
template <typename T>
void sgd_step(const std::vector<Tensor<T>>& params, double lr, double wd);

// Scales gradients so their global L2 norm is at most max_norm (no-op when
// max_norm <= 0); returns the pre-clip norm.
template <typename T>
double clip_grad_norm(const std::vector<Tensor<T>>& params, double max_norm);

// Frozen-embedding path: trains the strategy's heads on dump rows. Optional
// index subsets select the training and validation samples (default: train on
// all, no validation). Fixed seed => bitwise-identical report.
template <typename T>
TrainReport train(const EmbeddingDump& dump, HeadStrategy<T>& strategy, const TrainConfig& cfg,
                  const std::vector<std::int64_t>* train_indices = nullptr,
                  const std::vector<std::int64_t>* val_indices = nullptr);

// Live path: forwards token sequences through the backbone each step. Injects
// fresh LoRA adapters when cfg.train_lora and none are present; the base is
// frozen either way and its hash recorded before/after.
template <typename T>
TrainReport train(Transformer<T>& model, const std::vector<std::vector<std::int32_t>>& sequences,
                  const std::vector<T>& targets, HeadStrategy<T>& strategy, const TrainConfig& cfg,
                  const std::vector<std::int64_t>* train_indices = nullptr,
                  const std::vector<std::int64_t>* val_indices = nullptr);

// --- layer sweep ---------------------------------------------------------------

struct SweepRun {
    std::int64_t layer = 0;  // as requested (signed)
    bool ok = false;
    std::string error;                     // failure diagnostic when !ok
    std::map<std::string, double> per_pair;  // pair -> test-split Spearman (NaN = undefined)
    double avg = 0.0;                      // mean over defined pairs
    std::vector<double> test_predictions;  // aligned with SweepReport::test_indices
    TrainReport train_report;
};

struct SweepReport {
    std::vector<std::string> pairs;  // column order
    std::vector<SweepRun> runs;      // input layer order
    std::int64_t best_layer = 0;     // argmax avg; ties break toward the layer closest to -1
    std::int64_t n_train = 0;
    std::int64_t n_test = 0;
    std::vector<std::int64_t> test_indices;  // samples scored by every run
};

// Frozen path: one independent vanilla-head run per layer over a shared
// train/test split of the dump (fresh head each run, same base embeddings).
// Per-layer failures are recorded and the sweep continues. Optional pair ids
// (aligned with dump samples) produce per-pair columns; otherwise one "all"
// column.
template <typename T>
SweepReport layer_sweep(const EmbeddingDump& dump, const std::vector<std::int64_t>& layers,
                        const TrainConfig& cfg, double test_fraction = 0.2,
                        const std::vector<std::string>* pair_ids = nullptr);

// Live path: clones the base model per layer, injects fresh adapters, trains,
// and evaluates on the held-out split.
template <typename T>
SweepReport layer_sweep(const Transformer<T>& base,
                        const std::vector<std::vector<std::int32_t>>& sequences,
                        const std::vector<T>& targets, const std::vector<std::string>& pair_ids,
                        const std::vector<std::int64_t>& layers, const TrainConfig& cfg,
                        double test_fraction = 0.2);

#define ALOPE_EXTERN_TRAIN(T)                                                                       \
    extern template void adamw_step(const std::vector<Tensor<T>>&, AdamWState&, double, double);    \
    extern template void sgd_step(const std::vector<Tensor<T>>&, double, double);                   \
    extern template double clip_grad_norm(const std::vector<Tensor<T>>&, double);                   \
    extern template TrainReport train(const EmbeddingDump&, HeadStrategy<T>&, const TrainConfig&,   \
                                      const std::vector<std::int64_t>*,                             \
                                      const std::vector<std::int64_t>*);                            \
    extern template TrainReport train(Transformer<T>&,                                              \
                                      const std::vector<std::vector<std::int32_t>>&,                \
                                      const std::vector<T>&, HeadStrategy<T>&, const TrainConfig&,  \
                                      const std::vector<std::int64_t>*,                             \
                                      const std::vector<std::int64_t>*);                            \
    extern template SweepReport layer_sweep<T>(const EmbeddingDump&,                                \
                                               const std::vector<std::int64_t>&,                    \
                                               const TrainConfig&, double,                          \
                                               const std::vector<std::string>*);                    \
    extern template SweepReport layer_sweep(const Transformer<T>&,                                  \
                                            const std::vector<std::vector<std::int32_t>>&,          \
                                            const std::vector<T>&,                                  \
                                            const std::vector<std::string>&,                        \
                                            const std::vector<std::int64_t>&, const TrainConfig&,   \
                                            double);

ALOPE_EXTERN_TRAIN(float)
ALOPE_EXTERN_TRAIN(double)

#undef ALOPE_EXTERN_TRAIN

}  // namespace alope
