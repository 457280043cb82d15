#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "alope/transformer.hpp"

namespace alope {

struct LoraConfig {
    std::int64_t rank = 32;
    double scale = 1.0;
    // Projection kinds to adapt in every layer. Attention projections by
    // default; feed-forward projections ("ff.gate", "ff.up", "ff.down") are
    // opt-in.
    std::vector<std::string> targets = {"attn.q", "attn.k", "attn.v", "attn.o"};
};

// Attaches fresh adapters (A ~ N(0, 0.02), B = 0) for every target in every
// layer and freezes the base weights. With B = 0 the adapted forward equals
// the base forward exactly.
template <typename T>
void inject(Transformer<T>& model, const LoraConfig& cfg, std::uint64_t seed);

// The merged dense weight W + scale·B·A for one adapter.
template <typename T>
Tensor<T> merge(const LoraAdapter<T>& adapter, const Tensor<T>& base_weight);

// Replaces every adapted projection's base weight by its merged weight and
// drops the adapters; the model then computes the adapted function densely.
template <typename T>
void merge_all(Transformer<T>& model);

// Closed-form trainable adapter count: sum of rank·(d_in + d_out) over all
// injected targets.
std::int64_t lora_param_count(const TransformerConfig& cfg, const LoraConfig& lora);

struct ProjDims {
    std::int64_t d_in;
    std::int64_t d_out;
};

// Input/output widths of one adaptable projection kind ("attn.q" ... "ff.down");
// throws listing the valid kinds on anything else.
ProjDims projection_dims(const TransformerConfig& cfg, const std::string& kind);

extern template void inject(Transformer<float>&, const LoraConfig&, std::uint64_t);
extern template void inject(Transformer<double>&, const LoraConfig&, std::uint64_t);
extern template Tensor<float> merge(const LoraAdapter<float>&, const Tensor<float>&);
extern template Tensor<double> merge(const LoraAdapter<double>&, const Tensor<double>&);
extern template void merge_all(Transformer<float>&);
extern template void merge_all(Transformer<double>&);

}  // namespace alope
