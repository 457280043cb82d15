#include "alope/lora.hpp"

#include <algorithm>

namespace alope {

namespace {

const char* const kProjectionKinds[] = {"attn.q", "attn.k", "attn.v", "attn.o",
                                        "ff.gate", "ff.up", "ff.down"};

}  // namespace

ProjDims projection_dims(const TransformerConfig& cfg, const std::string& kind) {
    if (kind == "attn.q" || kind == "attn.k" || kind == "attn.v" || kind == "attn.o")
        return {cfg.d_model, cfg.d_model};
    if (kind == "ff.gate" || kind == "ff.up") return {cfg.d_model, cfg.d_ff};
    if (kind == "ff.down") return {cfg.d_ff, cfg.d_model};
    std::string valid;
    for (const char* k : kProjectionKinds) valid += (valid.empty() ? "" : ", ") + std::string(k);
    throw ShapeError("unknown LoRA target '" + kind + "' (valid targets: " + valid + ")");
}

namespace {

void validate_config(const TransformerConfig& model_cfg, const LoraConfig& cfg) {
    if (cfg.rank < 1) throw ShapeError("LoRA rank must be >= 1, got " + std::to_string(cfg.rank));
    if (cfg.targets.empty()) throw ShapeError("LoRA target set must be non-empty");
    for (const std::string& kind : cfg.targets) {
        const ProjDims dims = projection_dims(model_cfg, kind);
        if (cfg.rank > std::min(dims.d_in, dims.d_out))
            throw ShapeError("LoRA rank " + std::to_string(cfg.rank) + " exceeds min(d_in, d_out) = " +
                             std::to_string(std::min(dims.d_in, dims.d_out)) + " for target '" + kind + "'");
    }
}

}  // namespace

template <typename T>
void inject(Transformer<T>& model, const LoraConfig& cfg, std::uint64_t seed) {
    validate_config(model.config(), cfg);
    Rng rng(seed);
    for (std::int64_t layer = 0; layer < model.config().n_layers; ++layer) {
        for (const std::string& kind : cfg.targets) {
            const ProjDims dims = projection_dims(model.config(), kind);
            LoraAdapter<T> ad;
            std::vector<T> a_init(static_cast<std::size_t>(cfg.rank * dims.d_in));
            for (auto& v : a_init) v = static_cast<T>(rng.normal(0.0, 0.02));
            ad.A = Tensor<T>::from_data({cfg.rank, dims.d_in}, std::move(a_init), true);
            ad.B = Tensor<T>::zeros({dims.d_out, cfg.rank}, true);
            ad.scale = static_cast<T>(cfg.scale);
            model.adapters()["layers." + std::to_string(layer) + "." + kind] = std::move(ad);
        }
    }
    // "keeping the original weights frozen": the base stops tracking grads.
    model.set_base_trainable(false);
}

template <typename T>
Tensor<T> merge(const LoraAdapter<T>& adapter, const Tensor<T>& base_weight) {
    const std::int64_t d_out = adapter.B.dim(0);
    const std::int64_t r = adapter.rank();
    const std::int64_t d_in = adapter.A.dim(1);
    if (adapter.B.dim(1) != r)
        throw ShapeError("merge: B shape " + shape_str(adapter.B.shape()) + " does not match rank " +
                         std::to_string(r));
    if (base_weight.rank() != 2 || base_weight.dim(0) != d_out || base_weight.dim(1) != d_in)
        throw ShapeError("merge: base weight shape " + shape_str(base_weight.shape()) +
                         " does not match adapter delta [" + std::to_string(d_out) + ", " +
                         std::to_string(d_in) + "]");
    std::vector<T> out(base_weight.data().begin(), base_weight.data().end());
    for (std::int64_t i = 0; i < d_out; ++i)
        for (std::int64_t l = 0; l < r; ++l) {
            const T b = adapter.B.at(i, l) * adapter.scale;
            if (b == T(0)) continue;
            for (std::int64_t j = 0; j < d_in; ++j)
                out[static_cast<std::size_t>(i * d_in + j)] += b * adapter.A.at(l, j);
        }
    return Tensor<T>::from_data(base_weight.shape(), std::move(out), false);
}

template <typename T>
void merge_all(Transformer<T>& model) {
    if (model.adapters().empty()) return;
    auto params = model.named_parameters();
    for (const auto& [name, ad] : model.adapters()) {
        Tensor<T> base;
        for (auto& [pname, tensor] : params)
            if (pname == name) base = tensor;
        if (!base.defined()) throw ShapeError("merge_all: no base parameter named '" + name + "'");
        const Tensor<T> merged = merge(ad, base);
        std::copy(merged.data().begin(), merged.data().end(), base.mutable_data().begin());
    }
    model.adapters().clear();
}

std::int64_t lora_param_count(const TransformerConfig& cfg, const LoraConfig& lora) {
    validate_config(cfg, lora);
    std::int64_t per_layer = 0;
    for (const std::string& kind : lora.targets) {
        const ProjDims dims = projection_dims(cfg, kind);
        per_layer += lora.rank * (dims.d_in + dims.d_out);
    }
    return per_layer * cfg.n_layers;
}

template void inject(Transformer<float>&, const LoraConfig&, std::uint64_t);
template void inject(Transformer<double>&, const LoraConfig&, std::uint64_t);
template Tensor<float> merge(const LoraAdapter<float>&, const Tensor<float>&);
template Tensor<double> merge(const LoraAdapter<double>&, const Tensor<double>&);
template void merge_all(Transformer<float>&);
template void merge_all(Transformer<double>&);

}  // namespace alope
