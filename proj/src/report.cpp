#include "alope/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

namespace alope {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double safe_spearman(const std::vector<double>& a, const std::vector<double>& b) {
    try {
        return stats::spearman(a, b);
    } catch (const DegenerateInputError&) {
        return kNaN;
    }
}

std::string fixed3(double x) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", x);
    return buf;
}

const ScoredSet* find_pair(const ReportRow& row, const std::string& pair) {
    for (const auto& set : row.pairs)
        if (set.pair_id == pair) return &set;
    return nullptr;
}

}  // namespace

void ScoredSet::validate() const {
    if (predictions.size() != references.size())
        throw ShapeError("scored set '" + pair_id + "': prediction and reference counts differ");
    if (predictions.size() < 2)
        throw ShapeError("scored set '" + pair_id + "': need at least 2 samples");
}

ReportTable build_report(const std::vector<ReportRow>& rows, double alpha, bool two_sided) {
    if (rows.empty()) throw ShapeError("report: no rows");
    std::set<std::string> columns;
    for (const auto& row : rows)
        for (const auto& set : row.pairs) {
            set.validate();
            columns.insert(set.pair_id);
        }
    if (columns.empty()) throw ShapeError("report: no pair has scores");

    ReportTable table;
    table.alpha = alpha;
    table.two_sided = two_sided;
    table.pair_columns.assign(columns.begin(), columns.end());
    for (const auto& row : rows) table.row_labels.push_back(row.label);

    table.cells.resize(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        table.cells[r].resize(table.pair_columns.size());
        double sum = 0.0;
        std::int64_t defined = 0;
        for (std::size_t c = 0; c < table.pair_columns.size(); ++c) {
            ReportCell& cell = table.cells[r][c];
            cell.rho = kNaN;
            cell.p_vs_best = kNaN;
            const ScoredSet* set = find_pair(rows[r], table.pair_columns[c]);
            if (set == nullptr) continue;
            const double rho = safe_spearman(set->predictions, set->references);
            if (!std::isfinite(rho)) continue;
            cell.rho = rho;
            cell.defined = true;
            sum += rho;
            ++defined;
        }
        table.avg.push_back(defined > 0 ? sum / static_cast<double>(defined) : kNaN);
    }

    // Column bests and their significance against every rival row.
    for (std::size_t c = 0; c < table.pair_columns.size(); ++c) {
        std::size_t best = rows.size();
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (!table.cells[r][c].defined) continue;
            if (best == rows.size() || table.cells[r][c].rho > table.cells[best][c].rho) best = r;
        }
        if (best == rows.size()) continue;
        table.cells[best][c].best = true;
        const ScoredSet* top = find_pair(rows[best], table.pair_columns[c]);
        bool significant = false;
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (r == best || !table.cells[r][c].defined) continue;
            significant = true;  // at least one rival exists; each test below can veto
            break;
        }
        for (std::size_t r = 0; r < rows.size() && significant; ++r) {
            if (r == best || !table.cells[r][c].defined) continue;
            const ScoredSet* rival = find_pair(rows[r], table.pair_columns[c]);
            double p = kNaN;
            if (rival->predictions.size() == top->predictions.size()) {
                const double r23 = safe_spearman(top->predictions, rival->predictions);
                if (std::isfinite(r23)) {
                    try {
                        p = stats::williams_test(table.cells[best][c].rho, table.cells[r][c].rho,
                                                 r23,
                                                 static_cast<std::int64_t>(top->predictions.size()),
                                                 two_sided)
                                .p;
                    } catch (const std::exception&) {
                    }
                }
            }
            table.cells[r][c].p_vs_best = p;
            if (!std::isfinite(p) || !(p < alpha)) significant = false;
        }
        // Fill p-values for the remaining rivals even after a veto.
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (r == best || !table.cells[r][c].defined || std::isfinite(table.cells[r][c].p_vs_best))
                continue;
            const ScoredSet* rival = find_pair(rows[r], table.pair_columns[c]);
            if (rival->predictions.size() != top->predictions.size()) continue;
            const double r23 = safe_spearman(top->predictions, rival->predictions);
            if (!std::isfinite(r23)) continue;
            try {
                table.cells[r][c].p_vs_best =
                    stats::williams_test(table.cells[best][c].rho, table.cells[r][c].rho, r23,
                                         static_cast<std::int64_t>(top->predictions.size()),
                                         two_sided)
                        .p;
            } catch (const std::exception&) {
            }
        }
        table.cells[best][c].significant = significant;
    }
    return table;
}

std::string report_csv(const ReportTable& table) {
    std::string out = "config";
    for (const auto& pair : table.pair_columns) out += "," + pair;
    out += ",Avg\n";
    for (std::size_t r = 0; r < table.row_labels.size(); ++r) {
        out += table.row_labels[r];
        for (std::size_t c = 0; c < table.pair_columns.size(); ++c) {
            const ReportCell& cell = table.cells[r][c];
            out += ",";
            if (!cell.defined) {
                out += "NA";
                continue;
            }
            out += fixed3(cell.rho);
            if (cell.best && cell.significant) out += "*";
        }
        out += ",";
        out += std::isfinite(table.avg[r]) ? fixed3(table.avg[r]) : "NA";
        out += "\n";
    }
    return out;
}

std::string report_json(const ReportTable& table) {
    nlohmann::json doc;
    doc["alpha"] = table.alpha;
    doc["two_sided"] = table.two_sided;
    doc["columns"] = table.pair_columns;
    doc["rows"] = nlohmann::json::array();
    for (std::size_t r = 0; r < table.row_labels.size(); ++r) {
        nlohmann::json row;
        row["label"] = table.row_labels[r];
        row["avg"] = table.avg[r];  // NaN serializes as null
        row["cells"] = nlohmann::json::array();
        for (std::size_t c = 0; c < table.pair_columns.size(); ++c) {
            const ReportCell& cell = table.cells[r][c];
            nlohmann::json j;
            j["pair"] = table.pair_columns[c];
            j["rho"] = cell.defined ? nlohmann::json(cell.rho) : nlohmann::json(nullptr);
            j["best"] = cell.best;
            j["significant"] = cell.significant;
            j["p_vs_best"] =
                std::isfinite(cell.p_vs_best) ? nlohmann::json(cell.p_vs_best) : nlohmann::json(nullptr);
            row["cells"].push_back(std::move(j));
        }
        doc["rows"].push_back(std::move(row));
    }
    return doc.dump(2) + "\n";
}

std::vector<ReportRow> rows_from_sweep(const SweepReport& sweep, const std::vector<double>& targets,
                                       const std::vector<std::string>* pair_ids) {
    for (const std::int64_t i : sweep.test_indices)
        if (i < 0 || i >= static_cast<std::int64_t>(targets.size()))
            throw ShapeError("sweep rows: test index out of range of the targets");
    if (pair_ids != nullptr && !pair_ids->empty() && pair_ids->size() != targets.size())
        throw ShapeError("sweep rows: pair ids do not align with the targets");

    std::vector<ReportRow> rows;
    for (const auto& run : sweep.runs) {
        ReportRow row;
        row.label = std::to_string(run.layer);
        if (run.ok && run.test_predictions.size() == sweep.test_indices.size()) {
            for (const auto& pair : sweep.pairs) {
                ScoredSet set;
                set.pair_id = pair;
                for (std::size_t i = 0; i < sweep.test_indices.size(); ++i) {
                    const auto sample = static_cast<std::size_t>(sweep.test_indices[i]);
                    if (pair_ids != nullptr && !pair_ids->empty() && (*pair_ids)[sample] != pair)
                        continue;
                    set.predictions.push_back(run.test_predictions[i]);
                    set.references.push_back(targets[sample]);
                }
                if (set.predictions.size() >= 2) row.pairs.push_back(std::move(set));
            }
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

PairComparison compare_pair(const ScoredSet& first, const ScoredSet& second, double alpha,
                            bool two_sided) {
    first.validate();
    second.validate();
    if (first.pair_id != second.pair_id)
        throw ShapeError("compare: pair ids differ ('" + first.pair_id + "' vs '" +
                         second.pair_id + "')");
    if (first.references.size() != second.references.size() ||
        first.references != second.references)
        throw ShapeError("compare: the two sets must share identical references");

    PairComparison cmp;
    cmp.pair_id = first.pair_id;
    cmp.n = static_cast<std::int64_t>(first.references.size());
    cmp.rho1 = stats::spearman(first.predictions, first.references);
    cmp.rho2 = stats::spearman(second.predictions, second.references);
    cmp.r23 = stats::spearman(first.predictions, second.predictions);
    const auto res = stats::williams_test(cmp.rho1, cmp.rho2, cmp.r23, cmp.n, two_sided);
    cmp.t = res.t;
    cmp.p = res.p;
    cmp.significant = cmp.p < alpha;
    return cmp;
}

namespace {

constexpr const char* kPredictionHeader = "pair_id\tindex\tprediction\treference";

std::string full_precision(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t tab = line.find('\t', start);
        if (tab == std::string::npos) {
            fields.push_back(line.substr(start));
            return fields;
        }
        fields.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
}

double parse_double_field(const std::string& field, const std::string& path, std::size_t line_no,
                          const char* what) {
    char* end = nullptr;
    const double value = std::strtod(field.c_str(), &end);
    if (field.empty() || end != field.c_str() + field.size() || !std::isfinite(value))
        throw FormatError(path + ":" + std::to_string(line_no) + ": bad " + what + " '" + field +
                          "'");
    return value;
}

}  // namespace

void write_predictions(const std::string& path, const std::vector<PredictionRow>& rows) {
    std::string out = kPredictionHeader;
    out += '\n';
    for (const auto& row : rows) {
        out += row.pair_id;
        out += '\t';
        out += std::to_string(row.index);
        out += '\t';
        out += full_precision(row.prediction);
        out += '\t';
        out += full_precision(row.reference);
        out += '\n';
    }
    atomic_write_file(path, out);
}

std::vector<PredictionRow> read_predictions(const std::string& path) {
    const std::string text = read_file(path);
    std::vector<PredictionRow> rows;
    std::size_t pos = 0;
    std::size_t line_no = 0;
    while (pos < text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) nl = text.size();
        std::string line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line_no == 1) {
            if (line != kPredictionHeader)
                throw FormatError(path + ":1: expected header '" +
                                  std::string(kPredictionHeader) + "'");
            continue;
        }
        if (line.empty()) continue;
        const auto fields = split_tabs(line);
        if (fields.size() != 4)
            throw FormatError(path + ":" + std::to_string(line_no) + ": expected 4 fields, got " +
                              std::to_string(fields.size()));
        PredictionRow row;
        row.pair_id = fields[0];
        if (row.pair_id.empty())
            throw FormatError(path + ":" + std::to_string(line_no) + ": empty pair_id");
        char* end = nullptr;
        row.index = std::strtoll(fields[1].c_str(), &end, 10);
        if (fields[1].empty() || end != fields[1].c_str() + fields[1].size() || row.index < 0)
            throw FormatError(path + ":" + std::to_string(line_no) + ": bad index '" + fields[1] +
                              "'");
        row.prediction = parse_double_field(fields[2], path, line_no, "prediction");
        row.reference = parse_double_field(fields[3], path, line_no, "reference");
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw FormatError(path + ": no prediction rows");
    return rows;
}

std::vector<ScoredSet> group_predictions(const std::vector<PredictionRow>& rows) {
    std::map<std::string, ScoredSet> by_pair;
    for (const auto& row : rows) {
        auto& set = by_pair[row.pair_id];
        set.pair_id = row.pair_id;
        set.predictions.push_back(row.prediction);
        set.references.push_back(row.reference);
    }
    std::vector<ScoredSet> sets;
    sets.reserve(by_pair.size());
    for (auto& [pair, set] : by_pair) {
        set.validate();
        sets.push_back(std::move(set));
    }
    return sets;
}

}  // namespace alope
