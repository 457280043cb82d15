#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "alope/common.hpp"
#include "alope/tensor.hpp"

namespace alope {

enum class Activation { silu, gelu };

Activation parse_activation(const std::string& name);
std::string activation_name(Activation act);

struct TransformerConfig {
    std::int64_t n_layers = 8;
    std::int64_t d_model = 64;
    std::int64_t n_heads = 4;
    std::int64_t d_ff = 128;
    std::int64_t vocab_size = 512;
    std::int64_t max_seq_len = 256;
    Activation activation = Activation::silu;

    void validate() const;
    std::int64_t head_dim() const { return d_model / n_heads; }
};

// Maps the signed layer convention (-1 = final layer, non-negative = absolute
// from the input side) to an absolute index in [0, n_layers).
std::int64_t resolve_layer(std::int64_t idx, std::int64_t n_layers);

// Every layer's full hidden-state sequence from one forward call, plus the
// position of the last non-padding token. hidden_states[k] is the output of
// block k after both residual additions, shape [seq_len x d_model].
template <typename T>
struct ForwardTrace {
    std::vector<Tensor<T>> hidden_states;
    std::int64_t final_token_index = 0;

    std::int64_t n_layers() const { return static_cast<std::int64_t>(hidden_states.size()); }
    std::int64_t seq_len() const { return hidden_states.empty() ? 0 : hidden_states[0].dim(0); }
};

// The final-token hidden state h_k at (signed) layer k: the row of H_k at the
// last non-padding position. Pure read; the trace is not mutated.
template <typename T>
Tensor<T> final_token_state(const ForwardTrace<T>& trace, std::int64_t layer);

// Low-rank adapter attached to one projection: the adapted projection
// computes x·Wᵀ + scale·x·Aᵀ·Bᵀ with W frozen and A, B trainable.
template <typename T>
struct LoraAdapter {
    Tensor<T> A;  // [rank x d_in]
    Tensor<T> B;  // [d_out x rank]
    T scale = T(1);

    std::int64_t rank() const { return A.dim(0); }
};

template <typename T>
struct TransformerLayer {
    Tensor<T> attn_norm;  // [d_model] RMS gain
    Tensor<T> q, k, v, o;  // [d_model x d_model]
    Tensor<T> ff_norm;    // [d_model] RMS gain
    Tensor<T> gate, up;   // [d_ff x d_model]
    Tensor<T> down;       // [d_model x d_ff]
};

// Decoder-only embedding backbone: pre-norm RMS blocks, learned absolute
// positions, gated feed-forward, causal + padding-masked attention. There is
// no output head and no final norm — the product is the per-layer hidden
// state trace.
template <typename T>
class Transformer {
  public:
    static constexpr std::int32_t kPadId = 0;

    Transformer(TransformerConfig cfg, std::uint64_t seed);

    const TransformerConfig& config() const { return cfg_; }

    // Runs one right-padded (or unpadded) sequence. Token ids must be valid,
    // the first position non-pad, and padding confined to the tail.
    ForwardTrace<T> forward(const std::vector<std::int32_t>& token_ids) const;

    // Base parameters in a fixed, documented order (embeddings first, then
    // per-layer tensors). The same order feeds checkpoints and hashing.
    std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const;

    // Adapter tensors as "lora.<target>.A" / "lora.<target>.B" pairs.
    std::vector<std::pair<std::string, Tensor<T>>> named_adapter_parameters() const;

    // Adapters keyed by projection name, e.g. "layers.0.attn.q". The forward
    // pass applies any adapter present for a projection it computes.
    std::map<std::string, LoraAdapter<T>>& adapters() { return adapters_; }
    const std::map<std::string, LoraAdapter<T>>& adapters() const { return adapters_; }

    // Names of every projection an adapter may target, in layer order.
    std::vector<std::string> projection_names() const;

    // Flips gradient tracking on every base parameter (adapters unaffected).
    void set_base_trainable(bool on);

    // FNV-1a digest over all base parameter bytes in named order; the
    // frozen-base guarantee is "this value never changes during training".
    std::uint64_t base_hash() const;

    // Deep copy: fresh leaf tensors with identical values (used by sweeps).
    Transformer clone() const;

    std::int64_t n_base_parameters() const;

  private:
    Transformer() = default;  // for clone()

    Tensor<T> project(const Tensor<T>& x, const Tensor<T>& w, const std::string& name) const;

    TransformerConfig cfg_;
    Tensor<T> tok_embed_;  // [vocab_size x d_model]
    Tensor<T> pos_embed_;  // [max_seq_len x d_model]
    std::vector<TransformerLayer<T>> layers_;
    std::map<std::string, LoraAdapter<T>> adapters_;
};

extern template class Transformer<float>;
extern template class Transformer<double>;
extern template Tensor<float> final_token_state(const ForwardTrace<float>&, std::int64_t);
extern template Tensor<double> final_token_state(const ForwardTrace<double>&, std::int64_t);

}  // namespace alope
