#include "alope/checkpoint.hpp"

#include <algorithm>
#include <set>

#include "alope/data.hpp"
#include "binio.hpp"

namespace alope {

namespace {

constexpr char kMagic[4] = {'A', 'L', 'C', 'P'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

bool Checkpoint::has_tensor(const std::string& name) const {
    for (const auto& [n, rec] : tensors)
        if (n == name) return true;
    return false;
}

const TensorRecord& Checkpoint::tensor(const std::string& name) const {
    for (const auto& [n, rec] : tensors)
        if (n == name) return rec;
    throw FormatError("checkpoint has no tensor named '" + name + "'");
}

std::string Checkpoint::kind() const {
    if (meta.is_object() && meta.contains("kind") && meta["kind"].is_string())
        return meta["kind"].get<std::string>();
    return "";
}

void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    if (!ckpt.meta.is_object()) throw FormatError("checkpoint meta must be a JSON object");
    std::set<std::string> seen;
    for (const auto& [name, rec] : ckpt.tensors) {
        if (!seen.insert(name).second)
            throw FormatError("checkpoint has duplicate tensor name '" + name + "'");
        if (shape_numel(rec.shape) != static_cast<std::int64_t>(rec.values.size()))
            throw FormatError("tensor '" + name + "' payload length " +
                              std::to_string(rec.values.size()) + " does not match shape " +
                              shape_str(rec.shape));
    }

    std::string out;
    out.append(kMagic, 4);
    binio::put_u32(out, kVersion);
    const std::string meta_text = ckpt.meta.dump();
    binio::put_u64(out, meta_text.size());
    out += meta_text;
    binio::put_u64(out, ckpt.tensors.size());
    for (const auto& [name, rec] : ckpt.tensors) {
        binio::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        binio::put_u32(out, static_cast<std::uint32_t>(rec.shape.size()));
        for (std::int64_t d : rec.shape) binio::put_u64(out, static_cast<std::uint64_t>(d));
        for (float v : rec.values) binio::put_f32(out, v);
    }
    atomic_write_file(path, out);
}

Checkpoint read_checkpoint(const std::string& path) {
    const std::string buf = read_file(path);
    binio::ByteReader in(buf, path);

    char magic[4];
    in.raw_magic(magic);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw MagicMismatchError(path + ": not a checkpoint file (magic '" +
                                 std::string(magic, 4) + "')");
    Checkpoint ckpt;
    ckpt.version = in.u32();
    if (ckpt.version != kVersion)
        throw VersionMismatchError(path + ": unsupported checkpoint version " +
                                   std::to_string(ckpt.version));

    const std::uint64_t meta_len = in.u64();
    const std::string meta_text = in.bytes(meta_len, "meta block");
    ckpt.meta = nlohmann::json::parse(meta_text, nullptr, false);
    if (ckpt.meta.is_discarded() || !ckpt.meta.is_object())
        throw FormatError(path + ": checkpoint meta block is not a JSON object");

    const std::uint64_t n_tensors = in.u64();
    std::set<std::string> seen;
    for (std::uint64_t t = 0; t < n_tensors; ++t) {
        const std::uint32_t name_len = in.u32();
        const std::string name = in.bytes(name_len, "tensor name");
        if (!seen.insert(name).second)
            throw FormatError(path + ": duplicate tensor name '" + name + "'");
        TensorRecord rec;
        const std::uint32_t rank = in.u32();
        std::int64_t numel = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            const std::int64_t d = static_cast<std::int64_t>(in.u64());
            if (d < 0) throw FormatError(path + ": negative dimension in tensor '" + name + "'");
            rec.shape.push_back(d);
            numel *= d;
        }
        rec.values.resize(static_cast<std::size_t>(numel));
        in.f32_array(rec.values.data(), rec.values.size());
        ckpt.tensors.emplace_back(name, std::move(rec));
    }
    if (in.remaining() != 0)
        throw FormatError(path + ": " + std::to_string(in.remaining()) +
                          " trailing bytes after checkpoint payload");
    return ckpt;
}

// --- model snapshots ----------------------------------------------------------

namespace {

template <typename T>
TensorRecord to_record(const Tensor<T>& t) {
    TensorRecord rec;
    rec.shape = t.shape();
    rec.values.reserve(static_cast<std::size_t>(t.numel()));
    for (T v : t.data()) rec.values.push_back(static_cast<float>(v));
    return rec;
}

template <typename T>
void fill_from_record(Tensor<T> t, const TensorRecord& rec, const std::string& name,
                      const std::string& what) {
    if (rec.shape != t.shape())
        throw FormatError(what + ": tensor '" + name + "' has shape " + shape_str(rec.shape) +
                          ", expected " + shape_str(t.shape()));
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < rec.values.size(); ++i) dst[i] = static_cast<T>(rec.values[i]);
}

void require_kind(const Checkpoint& ckpt, const std::string& kind) {
    if (ckpt.kind() != kind)
        throw FormatError("checkpoint kind '" + ckpt.kind() + "' where '" + kind + "' expected");
}

nlohmann::json config_to_json(const TransformerConfig& cfg) {
    return {{"n_layers", cfg.n_layers},       {"d_model", cfg.d_model},
            {"n_heads", cfg.n_heads},         {"d_ff", cfg.d_ff},
            {"vocab_size", cfg.vocab_size},   {"max_seq_len", cfg.max_seq_len},
            {"activation", activation_name(cfg.activation)}};
}

TransformerConfig config_from_json(const nlohmann::json& j) {
    TransformerConfig cfg;
    try {
        cfg.n_layers = j.at("n_layers").get<std::int64_t>();
        cfg.d_model = j.at("d_model").get<std::int64_t>();
        cfg.n_heads = j.at("n_heads").get<std::int64_t>();
        cfg.d_ff = j.at("d_ff").get<std::int64_t>();
        cfg.vocab_size = j.at("vocab_size").get<std::int64_t>();
        cfg.max_seq_len = j.at("max_seq_len").get<std::int64_t>();
        cfg.activation = parse_activation(j.at("activation").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad model config in checkpoint meta: " + std::string(e.what()));
    }
    cfg.validate();
    return cfg;
}

}  // namespace

template <typename T>
Checkpoint model_checkpoint(const Transformer<T>& model) {
    Checkpoint ckpt;
    ckpt.meta = {{"kind", "model"}, {"config", config_to_json(model.config())}};
    for (const auto& [name, t] : model.named_parameters()) ckpt.tensors.emplace_back(name, to_record(t));
    return ckpt;
}

template <typename T>
Transformer<T> model_from_checkpoint(const Checkpoint& ckpt) {
    require_kind(ckpt, "model");
    if (!ckpt.meta.contains("config"))
        throw FormatError("model checkpoint meta lacks a 'config' block");
    const TransformerConfig cfg = config_from_json(ckpt.meta["config"]);
    Transformer<T> model(cfg, 0);
    const auto params = model.named_parameters();
    if (ckpt.tensors.size() != params.size())
        throw FormatError("model checkpoint holds " + std::to_string(ckpt.tensors.size()) +
                          " tensors, expected " + std::to_string(params.size()));
    for (const auto& [name, t] : params)
        fill_from_record(t, ckpt.tensor(name), name, "model checkpoint");
    return model;
}

// --- adapter snapshots ----------------------------------------------------------

template <typename T>
Checkpoint adapter_checkpoint(const Transformer<T>& model) {
    if (model.adapters().empty())
        throw ShapeError("adapter_checkpoint: model has no adapters");
    Checkpoint ckpt;
    const LoraAdapter<T>& first = model.adapters().begin()->second;
    std::set<std::string> kinds;
    for (const auto& [name, ad] : model.adapters()) {
        // "layers.<N>." prefix is followed by the projection kind.
        const std::size_t second_dot = name.find('.', name.find('.') + 1);
        kinds.insert(name.substr(second_dot + 1));
        ckpt.tensors.emplace_back(name + ".A", to_record(ad.A));
        ckpt.tensors.emplace_back(name + ".B", to_record(ad.B));
    }
    ckpt.meta = {{"kind", "adapters"},
                 {"rank", first.rank()},
                 {"scale", static_cast<double>(first.scale)},
                 {"targets", std::vector<std::string>(kinds.begin(), kinds.end())}};
    return ckpt;
}

template <typename T>
void load_adapters(Transformer<T>& model, const Checkpoint& ckpt) {
    require_kind(ckpt, "adapters");
    if (!model.adapters().empty())
        throw ShapeError("load_adapters: model already has adapters");
    double scale = 1.0;
    try {
        scale = ckpt.meta.at("scale").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad adapter checkpoint meta: " + std::string(e.what()));
    }

    const auto dims_of = [&](const std::string& projection) {
        // Validate the projection exists on this model, then look up its dims.
        const auto names = model.projection_names();
        if (std::find(names.begin(), names.end(), projection) == names.end())
            throw FormatError("adapter checkpoint targets unknown projection '" + projection + "'");
        const std::size_t second_dot = projection.find('.', projection.find('.') + 1);
        return projection_dims(model.config(), projection.substr(second_dot + 1));
    };

    for (const auto& [name, rec] : ckpt.tensors) {
        if (name.size() < 2 || name[name.size() - 2] != '.') continue;  // pairs handled via ".A"
        if (name.back() != 'A') continue;
        const std::string projection = name.substr(0, name.size() - 2);
        const std::string b_name = projection + ".B";
        const auto [d_in, d_out] = dims_of(projection);

        LoraAdapter<T> ad;
        ad.scale = static_cast<T>(scale);
        const TensorRecord& a_rec = ckpt.tensor(name);
        const TensorRecord& b_rec = ckpt.tensor(b_name);
        if (a_rec.shape.size() != 2 || a_rec.shape[1] != d_in)
            throw FormatError("adapter '" + name + "' has shape " + shape_str(a_rec.shape) +
                              ", expected rank x " + std::to_string(d_in));
        if (b_rec.shape.size() != 2 || b_rec.shape[0] != d_out ||
            b_rec.shape[1] != a_rec.shape[0])
            throw FormatError("adapter '" + b_name + "' has shape " + shape_str(b_rec.shape) +
                              ", expected " + std::to_string(d_out) + " x " +
                              std::to_string(a_rec.shape[0]));
        ad.A = Tensor<T>::zeros({a_rec.shape[0], d_in}, true);
        ad.B = Tensor<T>::zeros({d_out, a_rec.shape[0]}, true);
        fill_from_record(ad.A, a_rec, name, "adapter checkpoint");
        fill_from_record(ad.B, b_rec, b_name, "adapter checkpoint");
        model.adapters().emplace(projection, std::move(ad));
    }
    if (model.adapters().empty())
        throw FormatError("adapter checkpoint holds no adapter tensors");
    if (2 * model.adapters().size() != ckpt.tensors.size())
        throw FormatError("adapter checkpoint tensors do not pair up into A/B sets");
    model.set_base_trainable(false);
}

// --- head snapshots --------------------------------------------------------------

namespace {

template <typename T>
nlohmann::json strategy_meta(const HeadStrategy<T>& strategy) {
    bool with_bias = false;
    std::vector<double> weights;
    switch (strategy.kind) {
        case StrategyKind::vanilla: with_bias = strategy.head.bias.defined(); break;
        case StrategyKind::dynamic: with_bias = strategy.dynamic.head.bias.defined(); break;
        case StrategyKind::multihead:
            with_bias = !strategy.multi.heads.empty() && strategy.multi.heads[0].bias.defined();
            for (T w : strategy.multi.loss_weights) weights.push_back(static_cast<double>(w));
            break;
    }
    nlohmann::json meta = {{"kind", "head"},
                           {"strategy", strategy_name(strategy.kind)},
                           {"layers", strategy.layers},
                           {"with_bias", with_bias}};
    if (!weights.empty()) meta["loss_weights"] = weights;
    return meta;
}

}  // namespace

template <typename T>
Checkpoint head_checkpoint(const HeadStrategy<T>& strategy) {
    Checkpoint ckpt;
    ckpt.meta = strategy_meta(strategy);
    for (const auto& [name, t] : strategy.named_parameters())
        ckpt.tensors.emplace_back(name, to_record(t));
    return ckpt;
}

template <typename T>
HeadStrategy<T> strategy_from_checkpoint(const Checkpoint& ckpt) {
    require_kind(ckpt, "head");
    HeadStrategy<T> s;
    bool with_bias = false;
    std::vector<T> weights;
    try {
        s.kind = parse_strategy(ckpt.meta.at("strategy").get<std::string>());
        s.layers = ckpt.meta.at("layers").get<std::vector<std::int64_t>>();
        with_bias = ckpt.meta.at("with_bias").get<bool>();
        if (ckpt.meta.contains("loss_weights"))
            for (double w : ckpt.meta["loss_weights"].get<std::vector<double>>())
                weights.push_back(static_cast<T>(w));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad head checkpoint meta: " + std::string(e.what()));
    }
    if (s.layers.empty()) throw FormatError("head checkpoint has an empty layer list");

    const auto restore_head = [&](const std::string& prefix, std::int64_t layer) {
        const TensorRecord& w_rec = ckpt.tensor(prefix + ".w");
        if (w_rec.shape.size() != 1)
            throw FormatError("head checkpoint tensor '" + prefix + ".w' must be 1-D");
        RegressionHead<T> head;
        head.layer = layer;
        head.w = Tensor<T>::zeros({w_rec.shape[0]}, true);
        fill_from_record(head.w, w_rec, prefix + ".w", "head checkpoint");
        if (with_bias) {
            head.bias = Tensor<T>::scalar(T(0), true);
            fill_from_record(head.bias, ckpt.tensor(prefix + ".bias"), prefix + ".bias",
                             "head checkpoint");
        }
        return head;
    };

    switch (s.kind) {
        case StrategyKind::vanilla:
            if (s.layers.size() != 1)
                throw FormatError("vanilla head checkpoint must list exactly one layer");
            s.head = restore_head("head", s.layers[0]);
            break;
        case StrategyKind::dynamic: {
            const TensorRecord& w_rec = ckpt.tensor("dynamic.w");
            if (w_rec.shape != Shape{static_cast<std::int64_t>(s.layers.size())})
                throw FormatError("dynamic.w shape " + shape_str(w_rec.shape) +
                                  " does not match " + std::to_string(s.layers.size()) +
                                  " layers");
            s.dynamic.layers = s.layers;
            s.dynamic.w = Tensor<T>::zeros({static_cast<std::int64_t>(s.layers.size())}, true);
            fill_from_record(s.dynamic.w, w_rec, "dynamic.w", "head checkpoint");
            s.dynamic.head = restore_head("head", s.layers[0]);
            break;
        }
        case StrategyKind::multihead: {
            if (weights.size() != s.layers.size())
                throw FormatError("head checkpoint has " + std::to_string(weights.size()) +
                                  " loss weights for " + std::to_string(s.layers.size()) +
                                  " layers");
            s.multi.loss_weights = weights;
            for (std::size_t h = 0; h < s.layers.size(); ++h)
                s.multi.heads.push_back(restore_head("heads." + std::to_string(h), s.layers[h]));
            break;
        }
    }
    return s;
}

template <typename T>
void save_head_checkpoint(const HeadStrategy<T>& strategy, const std::string& path) {
    write_checkpoint(head_checkpoint(strategy), path);
    atomic_write_file(path + ".json", strategy_meta(strategy).dump(2) + "\n");
}

template Checkpoint model_checkpoint(const Transformer<float>&);
template Checkpoint model_checkpoint(const Transformer<double>&);
template Transformer<float> model_from_checkpoint(const Checkpoint&);
template Transformer<double> model_from_checkpoint(const Checkpoint&);
template Checkpoint adapter_checkpoint(const Transformer<float>&);
template Checkpoint adapter_checkpoint(const Transformer<double>&);
template void load_adapters(Transformer<float>&, const Checkpoint&);
template void load_adapters(Transformer<double>&, const Checkpoint&);
template Checkpoint head_checkpoint(const HeadStrategy<float>&);
template Checkpoint head_checkpoint(const HeadStrategy<double>&);
template HeadStrategy<float> strategy_from_checkpoint(const Checkpoint&);
template HeadStrategy<double> strategy_from_checkpoint(const Checkpoint&);
template void save_head_checkpoint(const HeadStrategy<float>&, const std::string&);
template void save_head_checkpoint(const HeadStrategy<double>&, const std::string&);

}  // namespace alope
