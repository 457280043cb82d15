#include "alope/transformer.hpp"

#include <cmath>

namespace alope {

Activation parse_activation(const std::string& name) {
    if (name == "silu") return Activation::silu;
    if (name == "gelu") return Activation::gelu;
    throw FormatError("unknown activation '" + name + "' (silu|gelu)");
}

std::string activation_name(Activation act) {
    return act == Activation::silu ? "silu" : "gelu";
}

void TransformerConfig::validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 1)
        throw ShapeError("transformer config: all counts must be >= 1");
    if (max_seq_len < 2) throw ShapeError("transformer config: max_seq_len must be >= 2");
    if (d_model % n_heads != 0)
        throw ShapeError("transformer config: d_model " + std::to_string(d_model) +
                         " is not divisible by n_heads " + std::to_string(n_heads));
}

std::int64_t resolve_layer(std::int64_t idx, std::int64_t n_layers) {
    if (n_layers < 1) throw ShapeError("resolve_layer: n_layers must be >= 1");
    const std::int64_t abs = idx < 0 ? n_layers + idx : idx;
    if (abs < 0 || abs >= n_layers)
        throw ShapeError("layer index " + std::to_string(idx) + " out of range for a model with " +
                         std::to_string(n_layers) + " layers");
    return abs;
}

template <typename T>
Tensor<T> final_token_state(const ForwardTrace<T>& trace, std::int64_t layer) {
    const std::int64_t abs = resolve_layer(layer, trace.n_layers());
    return row_slice(trace.hidden_states[static_cast<std::size_t>(abs)], trace.final_token_index);
}

namespace {

template <typename T>
Tensor<T> init_normal(Shape shape, Rng& rng, double stddev) {
    std::vector<T> values(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : values) v = static_cast<T>(rng.normal(0.0, stddev));
    return Tensor<T>::from_data(std::move(shape), std::move(values), true);
}

}  // namespace

template <typename T>
Transformer<T>::Transformer(TransformerConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const std::int64_t d = cfg_.d_model;
    tok_embed_ = init_normal<T>({cfg_.vocab_size, d}, rng, 0.02);
    pos_embed_ = init_normal<T>({cfg_.max_seq_len, d}, rng, 0.02);
    layers_.reserve(static_cast<std::size_t>(cfg_.n_layers));
    for (std::int64_t i = 0; i < cfg_.n_layers; ++i) {
        TransformerLayer<T> layer;
        layer.attn_norm = Tensor<T>::full({d}, T(1), true);
        layer.q = init_normal<T>({d, d}, rng, 0.02);
        layer.k = init_normal<T>({d, d}, rng, 0.02);
        layer.v = init_normal<T>({d, d}, rng, 0.02);
        layer.o = init_normal<T>({d, d}, rng, 0.02);
        layer.ff_norm = Tensor<T>::full({d}, T(1), true);
        layer.gate = init_normal<T>({cfg_.d_ff, d}, rng, 0.02);
        layer.up = init_normal<T>({cfg_.d_ff, d}, rng, 0.02);
        layer.down = init_normal<T>({d, cfg_.d_ff}, rng, 0.02);
        layers_.push_back(std::move(layer));
    }
}

template <typename T>
Tensor<T> Transformer<T>::project(const Tensor<T>& x, const Tensor<T>& w,
                                  const std::string& name) const {
    Tensor<T> out = linear(x, w);
    const auto it = adapters_.find(name);
    if (it != adapters_.end()) {
        const LoraAdapter<T>& ad = it->second;
        out = add(out, scale(linear(linear(x, ad.A), ad.B), ad.scale));
    }
    return out;
}

template <typename T>
ForwardTrace<T> Transformer<T>::forward(const std::vector<std::int32_t>& token_ids) const {
    const std::int64_t s = static_cast<std::int64_t>(token_ids.size());
    if (s < 1) throw ShapeError("forward: empty token sequence");
    if (s > cfg_.max_seq_len)
        throw ShapeError("forward: sequence length " + std::to_string(s) + " exceeds max_seq_len " +
                         std::to_string(cfg_.max_seq_len));
    if (token_ids[0] == kPadId) throw ShapeError("forward: sequence must not start with padding");
    std::int64_t final_index = 0;
    for (std::int64_t i = 0; i < s; ++i) {
        const std::int32_t id = token_ids[static_cast<std::size_t>(i)];
        if (id < 0 || id >= cfg_.vocab_size)
            throw ShapeError("forward: token id " + std::to_string(id) +
                             " outside vocab of " + std::to_string(cfg_.vocab_size));
        if (id != kPadId) {
            if (i > final_index + 1)
                throw ShapeError("forward: padding must be confined to the tail (non-pad token at "
                                 "position " + std::to_string(i) + " after padding)");
            final_index = i;
        }
    }

    // mask[i*s + j] = 1 iff position i may attend to j: causal and j non-pad.
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(s * s), 0);
    for (std::int64_t i = 0; i < s; ++i)
        for (std::int64_t j = 0; j <= i; ++j)
            if (token_ids[static_cast<std::size_t>(j)] != kPadId)
                mask[static_cast<std::size_t>(i * s + j)] = 1;

    std::vector<std::int32_t> positions(static_cast<std::size_t>(s));
    for (std::int64_t i = 0; i < s; ++i) positions[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(i);

    ForwardTrace<T> trace;
    trace.final_token_index = final_index;
    trace.hidden_states.reserve(layers_.size());

    Tensor<T> x = add(embedding_gather(tok_embed_, token_ids), embedding_gather(pos_embed_, positions));
    const std::int64_t dh = cfg_.head_dim();
    const T att_scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(dh)));

    for (std::size_t li = 0; li < layers_.size(); ++li) {
        const TransformerLayer<T>& L = layers_[li];
        const std::string base = "layers." + std::to_string(li) + ".";

        const Tensor<T> a_in = rms_norm(x, L.attn_norm);
        const Tensor<T> q = project(a_in, L.q, base + "attn.q");
        const Tensor<T> k = project(a_in, L.k, base + "attn.k");
        const Tensor<T> v = project(a_in, L.v, base + "attn.v");

        std::vector<Tensor<T>> ctx;
        ctx.reserve(static_cast<std::size_t>(cfg_.n_heads));
        for (std::int64_t h = 0; h < cfg_.n_heads; ++h) {
            const Tensor<T> qh = col_slice(q, h * dh, dh);
            const Tensor<T> kh = col_slice(k, h * dh, dh);
            const Tensor<T> vh = col_slice(v, h * dh, dh);
            const Tensor<T> scores = scale(matmul(qh, transpose(kh)), att_scale);
            const Tensor<T> probs = masked_row_softmax(scores, mask);
            ctx.push_back(matmul(probs, vh));
        }
        x = add(x, project(concat_cols(ctx), L.o, base + "attn.o"));

        const Tensor<T> f_in = rms_norm(x, L.ff_norm);
        const Tensor<T> gate_out = project(f_in, L.gate, base + "ff.gate");
        const Tensor<T> act = cfg_.activation == Activation::silu ? silu(gate_out) : gelu(gate_out);
        const Tensor<T> up_out = project(f_in, L.up, base + "ff.up");
        x = add(x, project(mul(act, up_out), L.down, base + "ff.down"));

        trace.hidden_states.push_back(x);
    }
    return trace;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> Transformer<T>::named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("tok_embed", tok_embed_);
    out.emplace_back("pos_embed", pos_embed_);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const std::string base = "layers." + std::to_string(i) + ".";
        const TransformerLayer<T>& L = layers_[i];
        out.emplace_back(base + "attn_norm", L.attn_norm);
        out.emplace_back(base + "attn.q", L.q);
        out.emplace_back(base + "attn.k", L.k);
        out.emplace_back(base + "attn.v", L.v);
        out.emplace_back(base + "attn.o", L.o);
        out.emplace_back(base + "ff_norm", L.ff_norm);
        out.emplace_back(base + "ff.gate", L.gate);
        out.emplace_back(base + "ff.up", L.up);
        out.emplace_back(base + "ff.down", L.down);
    }
    return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> Transformer<T>::named_adapter_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (const auto& [name, ad] : adapters_) {
        out.emplace_back("lora." + name + ".A", ad.A);
        out.emplace_back("lora." + name + ".B", ad.B);
    }
    return out;
}

template <typename T>
std::vector<std::string> Transformer<T>::projection_names() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const std::string base = "layers." + std::to_string(i) + ".";
        for (const char* p : {"attn.q", "attn.k", "attn.v", "attn.o", "ff.gate", "ff.up", "ff.down"})
            out.push_back(base + p);
    }
    return out;
}

template <typename T>
void Transformer<T>::set_base_trainable(bool on) {
    for (auto& [name, t] : named_parameters()) {
        (void)name;
        Tensor<T> param = t;
        param.set_requires_grad(on);
    }
}

template <typename T>
std::uint64_t Transformer<T>::base_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : named_parameters()) {
        h = fnv1a64(name.data(), name.size(), h);
        h = fnv1a64(t.data().data(), t.data().size_bytes(), h);
    }
    return h;
}

template <typename T>
Transformer<T> Transformer<T>::clone() const {
    Transformer<T> copy;
    copy.cfg_ = cfg_;
    auto dup = [](const Tensor<T>& t) {
        return Tensor<T>::from_data(t.shape(), {t.data().begin(), t.data().end()},
                                    t.requires_grad());
    };
    copy.tok_embed_ = dup(tok_embed_);
    copy.pos_embed_ = dup(pos_embed_);
    copy.layers_.reserve(layers_.size());
    for (const TransformerLayer<T>& L : layers_) {
        TransformerLayer<T> c;
        c.attn_norm = dup(L.attn_norm);
        c.q = dup(L.q);
        c.k = dup(L.k);
        c.v = dup(L.v);
        c.o = dup(L.o);
        c.ff_norm = dup(L.ff_norm);
        c.gate = dup(L.gate);
        c.up = dup(L.up);
        c.down = dup(L.down);
        copy.layers_.push_back(std::move(c));
    }
    for (const auto& [name, ad] : adapters_) {
        LoraAdapter<T> c;
        c.A = dup(ad.A);
        c.B = dup(ad.B);
        c.scale = ad.scale;
        copy.adapters_.emplace(name, std::move(c));
    }
    return copy;
}

template <typename T>
std::int64_t Transformer<T>::n_base_parameters() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : named_parameters()) {
        (void)name;
        n += t.numel();
    }
    return n;
}

template class Transformer<float>;
template class Transformer<double>;
template Tensor<float> final_token_state(const ForwardTrace<float>&, std::int64_t);
template Tensor<double> final_token_state(const ForwardTrace<double>&, std::int64_t);

}  // namespace alope
