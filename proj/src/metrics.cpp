#include "rectattn/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "rectattn/error.hpp"
#include "rectattn/serialize.hpp"

namespace rectattn {

double percentile(std::vector<double> values, double p) {
    if (values.size() < 2) throw DegenerateError("percentile needs at least 2 values");
    if (!(p >= 0.0 && p <= 1.0)) throw DomainError("percentile p must lie in [0, 1]");
    std::sort(values.begin(), values.end());
    const double rank = p * static_cast<double>(values.size() - 1);  // 0-based
    const std::size_t lo = static_cast<std::size_t>(std::floor(rank));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

double spread_90_10(std::vector<double> values) {
    if (values.size() < 2) throw DegenerateError("margin needs at least 2 unmasked entries");
    std::sort(values.begin(), values.end());
    return percentile(values, 0.9) - percentile(values, 0.1);
}

std::string to_string(ScoreSpace s) { return s == ScoreSpace::Logits ? "LOGITS" : "POST_SOFTMAX"; }

ScoreSpace parse_score_space(std::string_view name) {
    if (name == "LOGITS") return ScoreSpace::Logits;
    if (name == "POST_SOFTMAX") return ScoreSpace::PostSoftmax;
    throw ConfigError("unknown score space '" + std::string(name) + "'");
}

double MarginReport::mean() const {
    if (heads.empty()) return 0.0;
    double s = 0.0;
    for (const HeadMargin& h : heads) s += h.margin;
    return s / static_cast<double>(heads.size());
}

MarginReport attention_margin(const AttentionCapture& capture, ScoreSpace on, int layer) {
    if (capture.layers.empty()) throw DegenerateError("attention_margin: empty capture");
    MarginReport report;
    const std::size_t n = capture.seq_len;
    for (std::size_t l = 0; l < capture.layers.size(); ++l) {
        if (layer >= 0 && static_cast<std::size_t>(layer) != l) continue;
        for (std::size_t h = 0; h < capture.layers[l].size(); ++h) {
            const Tensor& s = on == ScoreSpace::Logits ? capture.layers[l][h].logits : capture.layers[l][h].probs;
            std::vector<double> vals;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    if (!capture.masked(i, j)) vals.push_back(s.at(i, j));
            report.heads.push_back({static_cast<int>(l), static_cast<int>(h), spread_90_10(std::move(vals)), 0});
            report.heads.back().entries = capture.causal ? n * (n + 1) / 2 : n * n;
        }
    }
    if (report.heads.empty()) throw DimensionError("attention_margin: layer out of range");
    return report;
}

double gap_of_row(std::span<const double> row, const std::vector<int>& answers, std::size_t readout, bool causal) {
    if (readout >= row.size()) throw DimensionError("gap_of_row: readout outside the row");
    std::vector<char> is_answer(row.size(), 0);
    for (int a : answers) {
        if (a < 0 || static_cast<std::size_t>(a) >= row.size()) throw DimensionError("gap_of_row: answer position out of range");
        if (causal && static_cast<std::size_t>(a) > readout) throw OrderingError("answer position after the readout");
        is_answer[static_cast<std::size_t>(a)] = 1;
    }
    const std::size_t end = causal ? readout + 1 : row.size();
    double sa = 0.0, so = 0.0;
    std::size_t na = 0, no = 0;
    for (std::size_t j = 0; j < end; ++j) {
        if (is_answer[j]) {
            sa += row[j];
            ++na;
        } else {
            so += row[j];
            ++no;
        }
    }
    if (na == 0 || no == 0) throw DegenerateError("gap_of_row: answer or other set is empty");
    return (sa / static_cast<double>(na) - so / static_cast<double>(no)) * 1000.0;
}

double answer_gap(const AttentionCapture& capture, const Episode& episode) {
    if (capture.layers.empty()) throw DegenerateError("answer_gap: empty capture");
    if (episode.answer_positions.empty()) throw DegenerateError("answer_gap: episode has no answer positions");
    const std::size_t readout = episode.readout();
    for (int a : episode.answer_positions)
        if (capture.causal && a >= 0 && static_cast<std::size_t>(a) > readout)
            throw OrderingError("answer position after the readout");
    const auto& heads = capture.layers.back();
    std::vector<double> row(capture.seq_len, 0.0);
    for (const HeadCapture& h : heads)
        for (std::size_t j = 0; j < capture.seq_len; ++j) row[j] += h.probs.at(readout, j);
    for (double& v : row) v /= static_cast<double>(heads.size());
    return gap_of_row(row, episode.answer_positions, readout, capture.causal);
}

double GapReport::mean() const {
    if (per_episode.empty()) return 0.0;
    double s = 0.0;
    for (double v : per_episode) s += v;
    return s / static_cast<double>(per_episode.size());
}

double GapReport::stderr_() const {
    const std::size_t n = per_episode.size();
    if (n < 2) return 0.0;
    const double m = mean();
    double ss = 0.0;
    for (double v : per_episode) ss += (v - m) * (v - m);
    return std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n));
}

std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

namespace {

constexpr const char* kHeader = "run_id,seed,mode,variant,xi,layer,head,metric,value";

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(std::move(cur));
    return out;
}

double parse_double(const std::string& s) {
    if (s == "nan") return std::nan("");
    if (s == "inf") return INFINITY;
    if (s == "-inf") return -INFINITY;
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw IoError("bad number '" + s + "'");
    return v;
}

} // namespace

void emit_report(const std::vector<ReportRecord>& records, ReportFormat format, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    if (format == ReportFormat::Csv) {
        out << kHeader << '\n';
        for (const ReportRecord& r : records)
            out << csv_field(r.run_id) << ',' << r.seed << ',' << csv_field(r.mode) << ',' << csv_field(r.variant)
                << ',' << format_double(r.xi) << ',' << r.layer << ',' << r.head << ',' << csv_field(r.metric) << ','
                << format_double(r.value) << '\n';
    } else {
        for (const ReportRecord& r : records) {
            // Non-finite values are not valid JSON numbers; store them as strings.
            auto num = [](double v) { return std::isfinite(v) ? Json(v) : Json(format_double(v)); };
            out << Json{{"run_id", r.run_id}, {"seed", r.seed},   {"mode", r.mode},   {"variant", r.variant},
                        {"xi", num(r.xi)},    {"layer", r.layer}, {"head", r.head},   {"metric", r.metric},
                        {"value", num(r.value)}}
                       .dump()
                << '\n';
        }
    }
    if (!out) throw IoError("write failed: " + path);
}

std::vector<ReportRecord> read_report(const std::string& path, ReportFormat format) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::vector<ReportRecord> records;
    std::string line;
    if (format == ReportFormat::Csv) {
        if (!std::getline(in, line) || line != kHeader) throw IoError(path + ": missing report header");
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto f = split_csv_line(line);
            if (f.size() != 9) throw IoError(path + ": expected 9 columns");
            ReportRecord r;
            r.run_id = f[0];
            r.seed = std::stoull(f[1]);
            r.mode = f[2];
            r.variant = f[3];
            r.xi = parse_double(f[4]);
            r.layer = std::stoi(f[5]);
            r.head = std::stoi(f[6]);
            r.metric = f[7];
            r.value = parse_double(f[8]);
            records.push_back(std::move(r));
        }
    } else {
        auto num = [](const Json& v) { return v.is_string() ? parse_double(v.get<std::string>()) : v.get<double>(); };
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            try {
                const Json j = Json::parse(line);
                ReportRecord r;
                r.run_id = j.at("run_id").get<std::string>();
                r.seed = j.at("seed").get<std::uint64_t>();
                r.mode = j.at("mode").get<std::string>();
                r.variant = j.at("variant").get<std::string>();
                r.xi = num(j.at("xi"));
                r.layer = j.at("layer").get<int>();
                r.head = j.at("head").get<int>();
                r.metric = j.at("metric").get<std::string>();
                r.value = num(j.at("value"));
                records.push_back(std::move(r));
            } catch (const nlohmann::json::exception& e) {
                throw IoError(path + ": " + e.what());
            }
        }
    }
    return records;
}

} // namespace rectattn
