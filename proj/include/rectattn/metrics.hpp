#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rectattn/model.hpp"
#include "rectattn/taskgen.hpp"

namespace rectattn {

// p in [0, 1]. Linear interpolation between order statistics at the 1-based
// rank 1 + p (count - 1). Throws DegenerateError on fewer than 2 values.
double percentile(std::vector<double> values, double p);
// p90 - p10 under the same convention.
double spread_90_10(std::vector<double> values);

enum class ScoreSpace { Logits, PostSoftmax };
std::string to_string(ScoreSpace s);
ScoreSpace parse_score_space(std::string_view name);

struct HeadMargin {
    int layer = 0;
    int head = 0;
    double margin = 0.0;
    std::size_t entries = 0;
};

struct MarginReport {
    std::vector<HeadMargin> heads;
    double mean() const;
};

// One margin per (layer, head) over every unmasked (row, column) entry.
// layer < 0 takes all layers.
MarginReport attention_margin(const AttentionCapture& capture, ScoreSpace on = ScoreSpace::Logits, int layer = -1);

// (mean of row[answers] - mean of row[others]) * 1000, where others are the
// unmasked positions j <= readout (any j when !causal) outside `answers`.
// Throws OrderingError when an answer lies after the readout under a causal
// mask and DegenerateError when either set is empty.
double gap_of_row(std::span<const double> row, const std::vector<int>& answers, std::size_t readout, bool causal);

// Final layer, head-averaged attention row at the episode's readout.
double answer_gap(const AttentionCapture& capture, const Episode& episode);

struct GapReport {
    std::vector<double> per_episode;
    double mean() const;
    double stderr_() const;
};

struct ReportRecord {
    std::string run_id;
    std::uint64_t seed = 0;
    std::string mode;
    std::string variant;
    double xi = 0.0;
    int layer = -1;  // -1: aggregated over layers
    int head = -1;   // -1: aggregated over heads
    std::string metric;
    double value = 0.0;

    bool operator==(const ReportRecord&) const = default;
};

enum class ReportFormat { Csv, Jsonl };

// Header: run_id,seed,mode,variant,xi,layer,head,metric,value. Doubles use
// the shortest round-trip representation, so equal records give equal bytes.
void emit_report(const std::vector<ReportRecord>& records, ReportFormat format, const std::string& path);
std::vector<ReportRecord> read_report(const std::string& path, ReportFormat format);

// Shortest decimal that parses back to the same double.
std::string format_double(double v);

} // namespace rectattn
