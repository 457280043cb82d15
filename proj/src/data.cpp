#include "alope/data.hpp"

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

#include "binio.hpp"

namespace alope {

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t tab = line.find('\t', start);
        if (tab == std::string::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
}

double parse_score(const std::string& text, const std::string& where) {
    std::size_t used = 0;
    double value = 0.0;
    try {
        value = std::stod(text, &used);
    } catch (const std::exception&) {
        throw FormatError(where + ": score '" + text + "' is not a number");
    }
    if (used != text.size())
        throw FormatError(where + ": score '" + text + "' has trailing characters");
    return value;
}

}  // namespace

// ---------------------------------------------------------------------------
// TSV dataset I/O
// ---------------------------------------------------------------------------

std::vector<QESample> load_tsv(const std::string& path, double score_min, double score_max) {
    if (score_min >= score_max)
        throw FormatError("score range [" + std::to_string(score_min) + ", " +
                          std::to_string(score_max) + "] is empty");
    std::istringstream in(read_file(path));
    std::string line;
    std::int64_t line_no = 0;
    auto where = [&] { return path + ":" + std::to_string(line_no); };

    if (!std::getline(in, line)) throw FormatError(path + ": empty file, header row required");
    line_no = 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::vector<std::string> header = split_tabs(line);
    const std::vector<std::string> required = {"src_lang", "tgt_lang", "src", "mt", "score"};
    const bool has_pair_id = header.size() == 6 && header[5] == "pair_id";
    if (header.size() != 5 && !has_pair_id)
        throw FormatError(where() + ": header must be 'src_lang\\ttgt_lang\\tsrc\\tmt\\tscore' "
                          "with optional trailing 'pair_id', got '" + line + "'");
    for (std::size_t i = 0; i < required.size(); ++i)
        if (header[i] != required[i])
            throw FormatError(where() + ": header column " + std::to_string(i + 1) +
                              " must be '" + required[i] + "', got '" + header[i] + "'");

    std::vector<QESample> samples;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;  // tolerate blank lines / trailing newline
        const std::vector<std::string> cols = split_tabs(line);
        if (cols.size() != header.size())
            throw FormatError(where() + ": expected " + std::to_string(header.size()) +
                              " columns, got " + std::to_string(cols.size()));
        QESample s;
        s.source_lang = cols[0];
        s.target_lang = cols[1];
        s.source_text = cols[2];
        s.translated_text = cols[3];
        s.score = parse_score(cols[4], where());
        s.pair_id = has_pair_id && !cols[5].empty() ? cols[5]
                                                    : s.source_lang + "-" + s.target_lang;
        if (s.source_lang.empty() || s.target_lang.empty())
            throw FormatError(where() + ": empty language tag");
        if (s.source_text.empty() || s.translated_text.empty())
            throw FormatError(where() + ": empty text field");
        if (s.score < score_min || s.score > score_max)
            throw FormatError(where() + ": score " + cols[4] + " outside [" +
                              std::to_string(score_min) + ", " + std::to_string(score_max) + "]");
        samples.push_back(std::move(s));
    }
    return samples;
}

void write_tsv(const std::string& path, const std::vector<QESample>& samples) {
    std::string out = "src_lang\ttgt_lang\tsrc\tmt\tscore\tpair_id\n";
    char score_buf[64];
    for (const QESample& s : samples) {
        std::snprintf(score_buf, sizeof(score_buf), "%.6g", s.score);
        out += s.source_lang;
        out += '\t';
        out += s.target_lang;
        out += '\t';
        out += s.source_text;
        out += '\t';
        out += s.translated_text;
        out += '\t';
        out += score_buf;
        out += '\t';
        out += s.pair_id;
        out += '\n';
    }
    atomic_write_file(path, out);
}

std::map<std::string, std::size_t> pair_counts(const std::vector<QESample>& samples) {
    std::map<std::string, std::size_t> counts;
    for (const QESample& s : samples) ++counts[s.pair_id];
    return counts;
}

// ---------------------------------------------------------------------------
// Prompt construction
// ---------------------------------------------------------------------------

namespace {
constexpr const char* kPlaceholders[4] = {"{source_lang}", "{target_lang}", "{source_text}",
                                          "{translated_text}"};
}

PromptTemplate::PromptTemplate(std::string text) : text_(std::move(text)) {
    for (const char* ph : kPlaceholders) {
        const std::size_t first = text_.find(ph);
        if (first == std::string::npos)
            throw FormatError(std::string("prompt template is missing placeholder ") + ph);
        if (text_.find(ph, first + 1) != std::string::npos)
            throw FormatError(std::string("prompt template repeats placeholder ") + ph);
    }
}

PromptTemplate PromptTemplate::gemba_default() {
    return PromptTemplate(
        "Score the following translation from {source_lang} to {target_lang} on a continuous "
        "scale from 0 to 100, where 0 means no meaning preserved and 100 means a perfect "
        "translation. Source: {source_text} Translation: {translated_text}");
}

std::string PromptTemplate::build(const QESample& sample) const {
    const std::string* values[4] = {&sample.source_lang, &sample.target_lang,
                                    &sample.source_text, &sample.translated_text};
    std::string out = text_;
    for (int i = 0; i < 4; ++i) {
        const std::size_t pos = out.find(kPlaceholders[i]);
        out.replace(pos, std::strlen(kPlaceholders[i]), *values[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

namespace {

std::vector<std::int32_t> byte_ids(std::string_view text) {
    std::vector<std::int32_t> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(Tokenizer::kByteBase + static_cast<std::int32_t>(c));
    return ids;
}

// One left-to-right pass replacing every (non-overlapping) occurrence of the
// pair with `merged_id`, in place.
void apply_merge(std::vector<std::int32_t>& ids, std::pair<std::int32_t, std::int32_t> pair,
                 std::int32_t merged_id) {
    std::size_t write = 0;
    std::size_t read = 0;
    while (read < ids.size()) {
        if (read + 1 < ids.size() && ids[read] == pair.first && ids[read + 1] == pair.second) {
            ids[write++] = merged_id;
            read += 2;
        } else {
            ids[write++] = ids[read++];
        }
    }
    ids.resize(write);
}

}  // namespace

Tokenizer::Tokenizer(std::vector<std::pair<std::int32_t, std::int32_t>> merges)
    : merges_(std::move(merges)) {
    for (std::size_t i = 0; i < merges_.size(); ++i) {
        const std::int32_t limit = kMergeBase + static_cast<std::int32_t>(i);
        if (merges_[i].first < 0 || merges_[i].first >= limit || merges_[i].second < 0 ||
            merges_[i].second >= limit)
            throw FormatError("merge rule " + std::to_string(i) + " references id outside [0, " +
                              std::to_string(limit) + ")");
    }
    if (vocab_size() > kMaxVocab)
        throw FormatError("merge list implies vocab " + std::to_string(vocab_size()) +
                          " > max " + std::to_string(kMaxVocab));
}

void Tokenizer::train(const std::vector<std::string>& corpus, std::int32_t target_vocab) {
    if (target_vocab > kMaxVocab)
        throw FormatError("target vocab " + std::to_string(target_vocab) + " > max " +
                          std::to_string(kMaxVocab));
    merges_.clear();
    std::vector<std::vector<std::int32_t>> seqs;
    seqs.reserve(corpus.size());
    for (const std::string& text : corpus) seqs.push_back(byte_ids(text));

    while (vocab_size() < target_vocab) {
        std::map<std::pair<std::int32_t, std::int32_t>, std::int64_t> counts;
        for (const auto& seq : seqs)
            for (std::size_t i = 0; i + 1 < seq.size(); ++i) ++counts[{seq[i], seq[i + 1]}];
        std::pair<std::int32_t, std::int32_t> best{};
        std::int64_t best_count = 0;
        for (const auto& [pair, count] : counts)  // map order breaks ties deterministically
            if (count > best_count) {
                best = pair;
                best_count = count;
            }
        if (best_count < 2) break;  // nothing left worth merging
        const std::int32_t merged_id = vocab_size();
        merges_.push_back(best);
        for (auto& seq : seqs) apply_merge(seq, best, merged_id);
    }
}

std::vector<std::int32_t> Tokenizer::tokenize(std::string_view text) const {
    std::vector<std::int32_t> ids = byte_ids(text);
    for (std::size_t i = 0; i < merges_.size(); ++i)
        apply_merge(ids, merges_[i], kMergeBase + static_cast<std::int32_t>(i));
    ids.insert(ids.begin(), kBos);
    return ids;
}

std::string Tokenizer::detokenize(const std::vector<std::int32_t>& ids) const {
    std::string out;
    std::vector<std::int32_t> stack;
    for (std::int32_t id : ids) {
        stack.push_back(id);
        while (!stack.empty()) {
            const std::int32_t top = stack.back();
            stack.pop_back();
            if (top < 0 || top >= vocab_size())
                throw FormatError("token id " + std::to_string(top) + " outside vocab of " +
                                  std::to_string(vocab_size()));
            if (top < kByteBase) continue;  // PAD/BOS/EOS carry no bytes
            if (top < kMergeBase) {
                out.push_back(static_cast<char>(top - kByteBase));
            } else {
                const auto& [left, right] = merges_[static_cast<std::size_t>(top - kMergeBase)];
                stack.push_back(right);  // unfold; left comes off the stack first
                stack.push_back(left);
            }
        }
    }
    return out;
}

std::vector<std::int32_t> truncate_head_tail(const std::vector<std::int32_t>& ids,
                                             std::size_t max_len) {
    if (max_len < 2) throw ShapeError("truncate_head_tail requires max_len >= 2");
    if (ids.size() <= max_len) return ids;
    const std::size_t head = max_len / 2;
    const std::size_t tail = max_len - head;
    std::vector<std::int32_t> out(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(head));
    out.insert(out.end(), ids.end() - static_cast<std::ptrdiff_t>(tail), ids.end());
    return out;
}

// ---------------------------------------------------------------------------
// Score normalization
// ---------------------------------------------------------------------------

NormMode parse_norm_mode(const std::string& name) {
    if (name == "none") return NormMode::none;
    if (name == "minmax") return NormMode::minmax;
    if (name == "zscore") return NormMode::zscore;
    throw FormatError("unknown normalization mode '" + name + "' (none|minmax|zscore)");
}

std::string norm_mode_name(NormMode mode) {
    switch (mode) {
        case NormMode::none: return "none";
        case NormMode::minmax: return "minmax";
        case NormMode::zscore: return "zscore";
    }
    return "none";
}

ScoreTransform fit_score_transform(const std::vector<double>& scores, NormMode mode,
                                   double score_min, double score_max) {
    ScoreTransform t;
    t.mode = mode;
    switch (mode) {
        case NormMode::none:
            break;
        case NormMode::minmax:
            t.shift = score_min;
            t.scale = score_max - score_min;
            break;
        case NormMode::zscore: {
            if (scores.empty()) throw DegenerateInputError("zscore over an empty score set");
            double mean = 0.0;
            for (double s : scores) mean += s;
            mean /= static_cast<double>(scores.size());
            double var = 0.0;
            for (double s : scores) var += (s - mean) * (s - mean);
            var /= static_cast<double>(scores.size());
            if (var <= 0.0)
                throw DegenerateInputError("zscore over a zero-variance score set");
            t.shift = mean;
            t.scale = std::sqrt(var);
            break;
        }
    }
    return t;
}

ScoreTransform normalize_scores(std::vector<QESample>& samples, NormMode mode, double score_min,
                                double score_max) {
    std::vector<double> scores;
    scores.reserve(samples.size());
    for (const QESample& s : samples) scores.push_back(s.score);
    const ScoreTransform t = fit_score_transform(scores, mode, score_min, score_max);
    for (QESample& s : samples) s.score = t.apply(s.score);
    return t;
}

// ---------------------------------------------------------------------------
// Frozen-embedding dump
// ---------------------------------------------------------------------------

namespace {

constexpr char kDumpMagic[4] = {'A', 'L', 'P', 'E'};
constexpr std::uint32_t kDumpVersion = 1;

std::string iso8601_now() {
    char buf[32];
    const std::time_t now = std::time(nullptr);
    std::tm tm_utc{};
    gmtime_r(&now, &tm_utc);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
}

}  // namespace

std::int64_t EmbeddingDump::layer_slot(std::int32_t abs_layer) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
        if (layers[i] == abs_layer) return static_cast<std::int64_t>(i);
    std::string have;
    for (std::int32_t l : layers) have += (have.empty() ? "" : ", ") + std::to_string(l);
    throw FormatError("layer " + std::to_string(abs_layer) + " not in dump (has: " + have + ")");
}

const float* EmbeddingDump::sample_layer(std::int64_t i, std::int64_t slot) const {
    return embeddings.data() + (i * n_layers() + slot) * hidden_dim;
}

void EmbeddingDump::validate() const {
    if (layers.empty()) throw FormatError("embedding dump has an empty layer list");
    for (std::size_t i = 1; i < layers.size(); ++i)
        if (layers[i] <= layers[i - 1])
            throw FormatError("dump layer list must be sorted and distinct");
    for (std::int32_t l : layers)
        if (l < 0 || l >= source_n_layers)
            throw FormatError("dump layer " + std::to_string(l) +
                              " outside source model depth " + std::to_string(source_n_layers));
    if (hidden_dim < 1) throw FormatError("dump hidden_dim must be >= 1");
    const std::size_t expect = static_cast<std::size_t>(n_samples()) *
                               static_cast<std::size_t>(n_layers()) *
                               static_cast<std::size_t>(hidden_dim);
    if (embeddings.size() != expect)
        throw FormatError("dump payload holds " + std::to_string(embeddings.size()) +
                          " floats, header implies " + std::to_string(expect));
}

void write_dump(const EmbeddingDump& dump, const std::string& path) {
    dump.validate();
    std::string out;
    out.reserve(40 + 4 * (dump.embeddings.size() + dump.targets.size() + dump.layers.size()));
    out.append(kDumpMagic, 4);
    binio::put_u32(out, kDumpVersion);
    binio::put_u64(out, static_cast<std::uint64_t>(dump.n_samples()));
    binio::put_u32(out, static_cast<std::uint32_t>(dump.layers.size()));
    binio::put_u32(out, static_cast<std::uint32_t>(dump.hidden_dim));
    binio::put_u32(out, static_cast<std::uint32_t>(dump.source_n_layers));
    for (std::int32_t l : dump.layers) binio::put_u32(out, static_cast<std::uint32_t>(l));
    for (float v : dump.embeddings) binio::put_f32(out, v);
    for (float v : dump.targets) binio::put_f32(out, v);
    atomic_write_file(path, out);

    nlohmann::json sidecar;
    sidecar["source_model"] = dump.source_model;
    sidecar["layers"] = dump.layers;
    sidecar["source_n_layers"] = dump.source_n_layers;
    sidecar["hidden_dim"] = dump.hidden_dim;
    sidecar["n_samples"] = dump.n_samples();
    sidecar["created_at"] = iso8601_now();
    atomic_write_file(path + ".json", sidecar.dump(2) + "\n");
}

EmbeddingDump read_dump(const std::string& path) {
    const std::string buf = read_file(path);
    binio::ByteReader in(buf, path);

    char magic[4];
    in.raw_magic(magic);
    if (std::memcmp(magic, kDumpMagic, 4) != 0)
        throw MagicMismatchError(path + ": bad magic, not an embedding dump");
    EmbeddingDump dump;
    dump.version = in.u32();
    if (dump.version != kDumpVersion)
        throw VersionMismatchError(path + ": dump version " + std::to_string(dump.version) +
                                   ", expected " + std::to_string(kDumpVersion));
    const std::uint64_t n_samples = in.u64();
    const std::uint32_t n_layers = in.u32();
    dump.hidden_dim = static_cast<std::int64_t>(in.u32());
    dump.source_n_layers = static_cast<std::int32_t>(in.u32());
    dump.layers.resize(n_layers);
    for (std::uint32_t i = 0; i < n_layers; ++i) dump.layers[i] = in.i32();
    dump.embeddings.resize(n_samples * n_layers * static_cast<std::uint64_t>(dump.hidden_dim));
    in.f32_array(dump.embeddings.data(), dump.embeddings.size());
    dump.targets.resize(n_samples);
    in.f32_array(dump.targets.data(), dump.targets.size());
    if (in.remaining() != 0)
        throw FormatError(path + ": " + std::to_string(in.remaining()) +
                          " unexpected trailing bytes");
    dump.validate();
    return dump;
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kWords[] = {
    "river",  "stone",  "cloud",  "market", "silver", "garden", "window", "letter",
    "bridge", "forest", "answer", "yellow", "copper", "meadow", "signal", "branch",
    "hollow", "summer", "winter", "candle", "mirror", "harbor", "violet", "thread",
    "tunnel", "saddle", "lantern", "orchard", "pepper", "marble", "timber", "feather"};
constexpr std::size_t kNumWords = sizeof(kWords) / sizeof(kWords[0]);

std::string random_words(Rng& rng, std::size_t lo, std::size_t hi) {
    const std::size_t n = lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
    std::string out;
    for (std::size_t i = 0; i < n; ++i) {
        if (!out.empty()) out += ' ';
        out += kWords[rng.below(kNumWords)];
    }
    return out;
}

}  // namespace

std::vector<QESample> gen_synthetic(const SynthConfig& cfg) {
    if (cfg.n_samples < 1) throw FormatError("synthetic generator needs n_samples >= 1");
    if (cfg.pairs.empty()) throw FormatError("synthetic generator needs at least one pair");
    if (cfg.score_min >= cfg.score_max)
        throw FormatError("synthetic generator needs score_min < score_max");
    Rng rng(cfg.seed);
    std::vector<QESample> samples;
    samples.reserve(static_cast<std::size_t>(cfg.n_samples));
    for (std::int64_t i = 0; i < cfg.n_samples; ++i) {
        const auto& pair = cfg.pairs[static_cast<std::size_t>(i) % cfg.pairs.size()];
        QESample s;
        s.source_lang = pair.first;
        s.target_lang = pair.second;
        s.pair_id = pair.first + "-" + pair.second;
        s.source_text = random_words(rng, 3, 8);
        s.translated_text = random_words(rng, 2, 6);
        s.score = rng.uniform(cfg.score_min, cfg.score_max);
        if (cfg.plant_marker) {
            // Append a marker word q00..q99 encoding the score percentile so
            // the score is recoverable from the final tokens of the prompt.
            const double unit = (s.score - cfg.score_min) / (cfg.score_max - cfg.score_min);
            int bucket = static_cast<int>(unit * 100.0);
            bucket = std::min(std::max(bucket, 0), 99);
            char marker[8];
            std::snprintf(marker, sizeof(marker), " q%02d", bucket);
            s.translated_text += marker;
        }
        samples.push_back(std::move(s));
    }
    return samples;
}

EmbeddingDump gen_planted_dump(std::int64_t n_samples, const std::vector<std::int32_t>& layers,
                               std::int64_t hidden_dim, std::int32_t source_n_layers,
                               std::int32_t planted_layer, double noise_sigma,
                               std::uint64_t seed) {
    EmbeddingDump dump;
    dump.layers = layers;
    dump.hidden_dim = hidden_dim;
    dump.source_n_layers = source_n_layers;
    dump.source_model = "synthetic-planted";
    dump.embeddings.resize(static_cast<std::size_t>(n_samples) * layers.size() *
                           static_cast<std::size_t>(hidden_dim));
    dump.targets.resize(static_cast<std::size_t>(n_samples));
    dump.validate();
    const std::int64_t slot = dump.layer_slot(planted_layer);

    Rng rng(seed);
    std::vector<double> u(static_cast<std::size_t>(hidden_dim));
    for (double& v : u) v = rng.normal();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
    for (std::int64_t i = 0; i < n_samples; ++i) {
        double signal = 0.0;
        for (std::int64_t li = 0; li < dump.n_layers(); ++li) {
            float* h = dump.embeddings.data() + (i * dump.n_layers() + li) * hidden_dim;
            for (std::int64_t d = 0; d < hidden_dim; ++d) {
                h[d] = static_cast<float>(rng.normal());
                if (li == slot) signal += u[static_cast<std::size_t>(d)] * h[d];
            }
        }
        dump.targets[static_cast<std::size_t>(i)] =
            static_cast<float>(signal * inv_sqrt_d + noise_sigma * rng.normal());
    }
    return dump;
}

// ---------------------------------------------------------------------------
// File helpers
// ---------------------------------------------------------------------------

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path + "' for reading");
    std::ostringstream buf;
    buf << in.rdbuf();
    if (in.bad()) throw FormatError("read error on '" + path + "'");
    return std::move(buf).str();
}

void atomic_write_file(const std::string& path, std::string_view bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot open '" + tmp + "' for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw FormatError("write error on '" + tmp + "'");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw FormatError("cannot rename '" + tmp + "' to '" + path + "': " +
                          std::strerror(errno));
}

}  // namespace alope
