#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace saerec::pipeline {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

/// Self-contained SVG line chart with axes, ticks and a legend.
std::string svg_line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                           const std::vector<Series>& series);

/// Renders charts and report/report.md from the CSV and JSON artifacts already
/// in `output_dir`. Stages that were skipped are left out. Returns the written
/// paths relative to `output_dir`.
std::vector<std::string> render_report(const std::filesystem::path& output_dir);

}  // namespace saerec::pipeline
