#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace bevkd::plots {

// Minimal static SVG charts for the ablation reports; no external deps.
struct Series {
  std::string name;
  std::vector<double> values;  // one per group
};

void bar_chart(const std::filesystem::path& path, const std::string& title,
               const std::vector<std::string>& groups, const std::vector<Series>& series);

// One polyline per series across the x labels (e.g. near/far buckets).
void line_chart(const std::filesystem::path& path, const std::string& title,
                const std::vector<std::string>& x_labels, const std::vector<Series>& series,
                const std::string& y_label);

}  // namespace bevkd::plots
