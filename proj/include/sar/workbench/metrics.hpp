#pragma once

// Append-only CSV sinks with a fixed column order, and a tolerant reader.

#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "sar/evaluation.hpp"
#include "sar/training.hpp"

namespace sar::workbench {

/// Per-step training record. Wall time lives in a separate timing file so
/// that this one is a deterministic function of the configuration.
inline const std::vector<std::string> kStepColumns = {"step", "scheme", "loss_tf", "loss_csf", "nfe"};
inline const std::vector<std::string> kTimingColumns = {"step", "scheme", "wall_time"};
inline const std::vector<std::string> kEvalColumns = {"scheme", "step", "fd", "precision", "recall", "per_scale_fd", "nfe"};

class CsvSink {
public:
    CsvSink() = default;
    /// Opens `path` for appending; writes the header when the file is new or
    /// empty, and throws UsageError when an existing header differs.
    CsvSink(const std::string& path, std::vector<std::string> columns);

    void write(const std::vector<std::string>& row);
    [[nodiscard]] bool is_open() const noexcept { return out_.is_open(); }

private:
    std::ofstream out_;
    std::vector<std::string> columns_;
};

[[nodiscard]] std::vector<std::string> step_row(const StepMetrics& m);
[[nodiscard]] std::vector<std::string> timing_row(const StepMetrics& m);
[[nodiscard]] std::vector<std::string> eval_row(const std::string& scheme, std::int64_t step, const EvalResult& r);

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    [[nodiscard]] int column(const std::string& name) const;  ///< -1 when absent
};

/// Splits on commas (no quoting; values never contain commas). Rows whose
/// field count differs from the header are skipped with a warning line.
[[nodiscard]] CsvTable parse_csv(const std::string& text, std::ostream* warnings = nullptr);
[[nodiscard]] CsvTable read_csv(const std::string& path, std::ostream* warnings = nullptr);

/// Shortest round-trip text for metric values.
[[nodiscard]] std::string metric_text(double v);

}  // namespace sar::workbench
