#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "alope/stats.hpp"
#include "alope/train.hpp"

namespace alope {

// One model's predictions against shared human references for one language
// pair (or any labeled subset).
struct ScoredSet {
    std::string pair_id;
    std::vector<double> predictions;
    std::vector<double> references;

    void validate() const;  // equal lengths >= 2
};

// One report row: a strategy/layer configuration scored on each pair.
struct ReportRow {
    std::string label;
    std::vector<ScoredSet> pairs;  // a pair absent from a row renders as NA
};

struct ReportCell {
    double rho = 0.0;          // NaN = undefined (constant vector, missing pair)
    bool defined = false;
    bool best = false;         // column maximum among defined cells
    bool significant = false;  // best and ahead of every rival per Williams at alpha
    double p_vs_best = 0.0;    // NaN when untestable; 0.5 at exact ties
};

struct ReportTable {
    std::vector<std::string> pair_columns;          // sorted pair ids
    std::vector<std::string> row_labels;
    std::vector<std::vector<ReportCell>> cells;     // rows x pairs
    std::vector<double> avg;                        // per-row mean over defined cells
    double alpha = 0.05;
    bool two_sided = false;
};

// Grid of Spearman correlations, one row per run and one column per pair plus
// the row average. The best cell of each column is starred when the Williams
// test (on the rank correlations, sharing the human references) puts it ahead
// of every rival row at `alpha`; one-sided by default.
ReportTable build_report(const std::vector<ReportRow>& rows, double alpha = 0.05,
                         bool two_sided = false);

// UTF-8 CSV with a header row; correlations to 3 decimals, "*" on significant
// column bests, NA for undefined cells.
std::string report_csv(const ReportTable& table);

// Full-precision JSON (undefined values serialize as null).
std::string report_json(const ReportTable& table);

// Rows for a layer sweep: one per run, labeled by its signed layer, scoring
// the held-out predictions recorded in the sweep. `targets` holds per-sample
// references for the whole dataset; optional pair ids group the columns.
std::vector<ReportRow> rows_from_sweep(const SweepReport& sweep,
                                       const std::vector<double>& targets,
                                       const std::vector<std::string>* pair_ids = nullptr);

// Williams comparison of two prediction sets against the same references.
struct PairComparison {
    std::string pair_id;
    std::int64_t n = 0;
    double rho1 = 0.0;  // corr(predictions1, references)
    double rho2 = 0.0;
    double r23 = 0.0;   // corr(predictions1, predictions2)
    double t = 0.0;
    double p = 0.0;
    bool significant = false;  // p < alpha
};

PairComparison compare_pair(const ScoredSet& first, const ScoredSet& second, double alpha = 0.05,
                            bool two_sided = false);

// --- prediction files ----------------------------------------------------------
//
// The interchange format for scored predictions: a UTF-8 TSV with the header
// "pair_id\tindex\tprediction\treference", one row per sample. References ride
// along so a single file is a self-contained evaluation input.

struct PredictionRow {
    std::string pair_id;
    std::int64_t index = 0;  // sample position in the originating dataset
    double prediction = 0.0;
    double reference = 0.0;
};

void write_predictions(const std::string& path, const std::vector<PredictionRow>& rows);

// FormatError names the 1-based line of any malformed row.
std::vector<PredictionRow> read_predictions(const std::string& path);

// Groups rows by pair id (sorted) into per-pair scored sets; every pair needs
// at least two rows.
std::vector<ScoredSet> group_predictions(const std::vector<PredictionRow>& rows);

}  // namespace alope
