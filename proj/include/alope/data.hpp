#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "alope/common.hpp"

namespace alope {

// One quality-estimation example: a source/translation pair with a human
// quality score inside the configured range.
struct QESample {
    std::string source_lang;
    std::string target_lang;
    std::string source_text;
    std::string translated_text;
    double score = 0.0;
    std::string pair_id;  // defaults to "<source_lang>-<target_lang>"
};

// ---------------------------------------------------------------------------
// TSV dataset I/O
// ---------------------------------------------------------------------------

// Parses a UTF-8 TSV with header "src_lang tgt_lang src mt score [pair_id]".
// Scores are validated against [score_min, score_max]; any malformed row
// raises FormatError naming the 1-based line number.
std::vector<QESample> load_tsv(const std::string& path, double score_min, double score_max);

// Writes the same format load_tsv reads (always includes the pair_id column).
void write_tsv(const std::string& path, const std::vector<QESample>& samples);

// Number of samples per pair_id, in sorted pair order.
std::map<std::string, std::size_t> pair_counts(const std::vector<QESample>& samples);

// ---------------------------------------------------------------------------
// Prompt construction
// ---------------------------------------------------------------------------

// A template with the four placeholders {source_lang}, {target_lang},
// {source_text}, {translated_text}, each required exactly once.
class PromptTemplate {
  public:
    explicit PromptTemplate(std::string text);

    // Instruction + 0-100 scale + source + translation, with the translation
    // slot last so the final token of the rendered prompt ends the
    // translation. Fully replaceable by user templates.
    static PromptTemplate gemba_default();

    std::string build(const QESample& sample) const;
    const std::string& text() const { return text_; }

  private:
    std::string text_;
};

// ---------------------------------------------------------------------------
// Tokenizer: byte-level with optional learned merges
// ---------------------------------------------------------------------------

// Byte-level tokenizer with optional greedy learned merges. Every input byte
// maps to a base id, so no text can be out of vocabulary; merges only
// compress. Ids: 0 = PAD, 1 = BOS, 2 = EOS, 3..258 = bytes, 259+ = merges.
class Tokenizer {
  public:
    static constexpr std::int32_t kPad = 0;
    static constexpr std::int32_t kBos = 1;
    static constexpr std::int32_t kEos = 2;
    static constexpr std::int32_t kByteBase = 3;
    static constexpr std::int32_t kMergeBase = kByteBase + 256;
    static constexpr std::int32_t kMaxVocab = 4096;

    Tokenizer() = default;                                               // pure byte-level
    explicit Tokenizer(std::vector<std::pair<std::int32_t, std::int32_t>> merges);

    // Learns merges greedily (most frequent adjacent pair first, ties broken
    // toward the lexicographically smallest pair) until target_vocab ids
    // exist or no pair repeats.
    void train(const std::vector<std::string>& corpus, std::int32_t target_vocab);

    // BOS followed by the merged byte encoding of the text. Never fails.
    std::vector<std::int32_t> tokenize(std::string_view text) const;

    // Inverse of tokenize: unfolds merges back to bytes, skipping
    // PAD/BOS/EOS. Exact byte round-trip for any input.
    std::string detokenize(const std::vector<std::int32_t>& ids) const;

    std::int32_t vocab_size() const {
        return kMergeBase + static_cast<std::int32_t>(merges_.size());
    }
    const std::vector<std::pair<std::int32_t, std::int32_t>>& merges() const { return merges_; }

  private:
    std::vector<std::pair<std::int32_t, std::int32_t>> merges_;
};

// Keeps the first half and the trailing remainder of an overlong sequence so
// the final token (end of the translation slot) survives truncation.
std::vector<std::int32_t> truncate_head_tail(const std::vector<std::int32_t>& ids,
                                             std::size_t max_len);

// ---------------------------------------------------------------------------
// Score normalization
// ---------------------------------------------------------------------------

enum class NormMode { none, minmax, zscore };

NormMode parse_norm_mode(const std::string& name);
std::string norm_mode_name(NormMode mode);

// Invertible affine transform y' = (y - shift) / scale, recorded so exported
// predictions can be mapped back to the original score range.
struct ScoreTransform {
    NormMode mode = NormMode::none;
    double shift = 0.0;
    double scale = 1.0;

    double apply(double y) const { return (y - shift) / scale; }
    double invert(double y) const { return y * scale + shift; }
};

// Fits the transform for `mode`: minmax maps [score_min, score_max] to
// [0, 1]; zscore centres on the sample mean/stddev. Throws
// DegenerateInputError for zscore on a zero-variance set.
ScoreTransform fit_score_transform(const std::vector<double>& scores, NormMode mode,
                                   double score_min, double score_max);

// Applies fit_score_transform to every sample score, returning the transform.
ScoreTransform normalize_scores(std::vector<QESample>& samples, NormMode mode, double score_min,
                                double score_max);

// ---------------------------------------------------------------------------
// Frozen-embedding dump
// ---------------------------------------------------------------------------

// Per-layer final-token embeddings exported for head training without a live
// backbone. Payload is little-endian 32-bit floats, sample-major
// [n_samples x n_layers x hidden]. `layers` holds absolute layer indices
// (sorted, distinct); `source_n_layers` is the depth of the exporting model
// so negative layer indices remain resolvable against the dump.
struct EmbeddingDump {
    std::uint32_t version = 1;
    std::vector<std::int32_t> layers;
    std::int64_t hidden_dim = 0;
    std::int32_t source_n_layers = 0;
    std::vector<float> embeddings;
    std::vector<float> targets;
    std::string source_model;  // recorded in the JSON sidecar only

    std::int64_t n_samples() const { return static_cast<std::int64_t>(targets.size()); }
    std::int64_t n_layers() const { return static_cast<std::int64_t>(layers.size()); }

    // Position of absolute layer id `abs_layer` in `layers`; throws if absent.
    std::int64_t layer_slot(std::int32_t abs_layer) const;

    // Pointer to the hidden_dim floats for sample i at layer slot `slot`.
    const float* sample_layer(std::int64_t i, std::int64_t slot) const;

    void validate() const;  // header/payload consistency
};

// Binary dump plus a "<path>.json" sidecar (source model, layers, creation
// time). Writes are atomic (temp file + rename); round-trips are bit-exact.
void write_dump(const EmbeddingDump& dump, const std::string& path);
EmbeddingDump read_dump(const std::string& path);

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

struct SynthConfig {
    std::int64_t n_samples = 64;
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, std::string>> pairs = {{"En", "Gu"}, {"Et", "En"}};
    double score_min = 0.0;
    double score_max = 100.0;
    // When true, the translation ends with a marker word encoding the score
    // percentile, so tiny models can actually learn the score from the text.
    bool plant_marker = true;
};

// Deterministic synthetic QE samples (word-salad texts, uniform scores).
std::vector<QESample> gen_synthetic(const SynthConfig& cfg);

// Dump whose targets depend only on the planted layer:
// target_i = dot(u, h[planted]) / sqrt(hidden) + noise_sigma * eps_i, with all
// other layers pure N(0,1) noise. `planted_layer` must appear in `layers`.
EmbeddingDump gen_planted_dump(std::int64_t n_samples, const std::vector<std::int32_t>& layers,
                               std::int64_t hidden_dim, std::int32_t source_n_layers,
                               std::int32_t planted_layer, double noise_sigma,
                               std::uint64_t seed);

// ---------------------------------------------------------------------------
// Small file helpers shared across modules
// ---------------------------------------------------------------------------

// Whole-file read; throws FormatError when the file cannot be opened.
std::string read_file(const std::string& path);

// Atomic whole-file write: temp file in the same directory, then rename.
void atomic_write_file(const std::string& path, std::string_view bytes);

}  // namespace alope
