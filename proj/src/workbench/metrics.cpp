#include "sar/workbench/metrics.hpp"

#include <filesystem>
#include <sstream>

#include "sar/errors.hpp"
#include "sar/workbench/config.hpp"

namespace sar::workbench {

namespace {

std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
    return s;
}

std::vector<std::string> split_row(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

std::string metric_text(double v) { return format_double(v); }

CsvSink::CsvSink(const std::string& path, std::vector<std::string> columns) : columns_(std::move(columns)) {
    std::error_code ec;
    const bool fresh = !std::filesystem::exists(path, ec) || std::filesystem::file_size(path, ec) == 0;
    if (!fresh) {
        std::ifstream in(path);
        std::string first;
        std::getline(in, first);
        if (first != join(columns_)) throw UsageError("csv '" + path + "' has a different header");
    }
    out_.open(path, std::ios::app);
    if (!out_) throw UsageError("cannot open '" + path + "' for appending");
    if (fresh) out_ << join(columns_) << "\n";
}

void CsvSink::write(const std::vector<std::string>& row) {
    if (row.size() != columns_.size()) throw UsageError("csv row has the wrong number of fields");
    for (const std::string& f : row) {
        if (f.find(',') != std::string::npos || f.find('\n') != std::string::npos) {
            throw UsageError("csv field contains a separator");
        }
    }
    out_ << join(row) << "\n";
    out_.flush();
}

std::vector<std::string> step_row(const StepMetrics& m) {
    return {std::to_string(m.step), m.scheme, metric_text(m.loss_tf), metric_text(m.loss_csf), std::to_string(m.nfe)};
}

std::vector<std::string> timing_row(const StepMetrics& m) {
    return {std::to_string(m.step), m.scheme, metric_text(m.wall_time)};
}

std::vector<std::string> eval_row(const std::string& scheme, std::int64_t step, const EvalResult& r) {
    std::string per_scale;
    for (std::size_t i = 0; i < r.per_scale_fd.size(); ++i) per_scale += (i ? ";" : "") + metric_text(r.per_scale_fd[i]);
    return {scheme, std::to_string(step), metric_text(r.fd), metric_text(r.precision), metric_text(r.recall), per_scale,
            std::to_string(r.nfe_per_image)};
}

int CsvTable::column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == name) return static_cast<int>(i);
    }
    return -1;
}

CsvTable parse_csv(const std::string& text, std::ostream* warnings) {
    CsvTable t;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto fields = split_row(line);
        if (t.header.empty()) {
            t.header = std::move(fields);
            continue;
        }
        if (fields.size() != t.header.size()) {
            if (warnings != nullptr) *warnings << "warning: skipping malformed csv line " << lineno << "\n";
            continue;
        }
        t.rows.push_back(std::move(fields));
    }
    return t;
}

CsvTable read_csv(const std::string& path, std::ostream* warnings) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_csv(ss.str(), warnings);
}

}  // namespace sar::workbench
