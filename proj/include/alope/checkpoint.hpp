#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "alope/heads.hpp"
#include "alope/lora.hpp"
#include "alope/transformer.hpp"
#include "json.hpp"

namespace alope {

// One named tensor inside the container; payloads are little-endian 32-bit
// floats regardless of the in-memory precision.
struct TensorRecord {
    Shape shape;
    std::vector<float> values;
};

// The shared versioned binary container for model, adapter, and head
// checkpoints: magic "ALCP", version, a JSON meta block (whose "kind" field
// identifies the payload), then named tensor records. Round-trips are
// bit-exact and writes atomic.
struct Checkpoint {
    std::uint32_t version = 1;
    nlohmann::json meta = nlohmann::json::object();
    std::vector<std::pair<std::string, TensorRecord>> tensors;

    bool has_tensor(const std::string& name) const;
    const TensorRecord& tensor(const std::string& name) const;  // FormatError if absent
    std::string kind() const;                                   // meta["kind"], "" if unset
};

void write_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

// --- model snapshots ---------------------------------------------------------

// kind "model": the full config plus every base parameter in named order.
template <typename T>
Checkpoint model_checkpoint(const Transformer<T>& model);

template <typename T>
Transformer<T> model_from_checkpoint(const Checkpoint& ckpt);

// --- adapter snapshots (separate from the base, loadable onto a fresh one) ---

// kind "adapters": rank/scale/targets in meta, A/B pairs keyed by projection.
template <typename T>
Checkpoint adapter_checkpoint(const Transformer<T>& model);

// Validates shapes against `model`'s config, installs the adapters, and
// freezes the base (the invariant every adapted model maintains).
template <typename T>
void load_adapters(Transformer<T>& model, const Checkpoint& ckpt);

// --- head snapshots -----------------------------------------------------------

// kind "head": strategy type, layer set, and loss weights in meta (also echoed
// to a "<path>.json" sidecar by save_head_checkpoint), head tensors by name.
template <typename T>
Checkpoint head_checkpoint(const HeadStrategy<T>& strategy);

template <typename T>
HeadStrategy<T> strategy_from_checkpoint(const Checkpoint& ckpt);

// write_checkpoint plus the JSON sidecar describing the strategy.
template <typename T>
void save_head_checkpoint(const HeadStrategy<T>& strategy, const std::string& path);

extern template Checkpoint model_checkpoint(const Transformer<float>&);
extern template Checkpoint model_checkpoint(const Transformer<double>&);
extern template Transformer<float> model_from_checkpoint(const Checkpoint&);
extern template Transformer<double> model_from_checkpoint(const Checkpoint&);
extern template Checkpoint adapter_checkpoint(const Transformer<float>&);
extern template Checkpoint adapter_checkpoint(const Transformer<double>&);
extern template void load_adapters(Transformer<float>&, const Checkpoint&);
extern template void load_adapters(Transformer<double>&, const Checkpoint&);
extern template Checkpoint head_checkpoint(const HeadStrategy<float>&);
extern template Checkpoint head_checkpoint(const HeadStrategy<double>&);
extern template HeadStrategy<float> strategy_from_checkpoint(const Checkpoint&);
extern template HeadStrategy<double> strategy_from_checkpoint(const Checkpoint&);
extern template void save_head_checkpoint(const HeadStrategy<float>&, const std::string&);
extern template void save_head_checkpoint(const HeadStrategy<double>&, const std::string&);

}  // namespace alope
