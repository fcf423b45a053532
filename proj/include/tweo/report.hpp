#pragma once

#include <string>
#include <vector>

#include "tweo/diagnostics.hpp"
#include "tweo/trainer.hpp"

namespace tweo {

struct Series {
  std::string label;
  std::vector<double> x, y;  // same length
};

// Columns must share a length; values print with %.10g so a rewrite of the
// same data is byte-identical.
void write_csv(const std::string& path, const std::vector<std::string>& headers,
               const std::vector<std::vector<double>>& columns);

std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series,
                           bool log_y = false);

std::string svg_histogram(const std::string& title, const HistogramReport& h);

void write_text_file(const std::string& path, const std::string& content);

std::vector<TelemetryRecord> read_telemetry(const std::string& path);

}  // namespace tweo
