#include "bevkd/plots.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "bevkd/util.hpp"

namespace bevkd::plots {

namespace {

constexpr int kWidth = 640;
constexpr int kHeight = 400;
constexpr int kMarginLeft = 60;
constexpr int kMarginRight = 20;
constexpr int kMarginTop = 40;
constexpr int kMarginBottom = 60;

const char* kColors[] = {"#4878d0", "#ee854a", "#6acc64", "#d65f5f", "#956cb4"};

double max_value(const std::vector<Series>& series) {
  double m = 0.0;
  for (const auto& s : series)
    for (double v : s.values) m = std::max(m, v);
  return m <= 0.0 ? 1.0 : m;
}

void svg_header(std::ostringstream& out, const std::string& title) {
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" viewBox=\"0 0 " << kWidth << " " << kHeight << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << kWidth / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\""
      << " font-size=\"16\">" << title << "</text>\n";
}

void axes(std::ostringstream& out, double vmax) {
  const int x0 = kMarginLeft, y0 = kHeight - kMarginBottom, y1 = kMarginTop;
  out << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << kWidth - kMarginRight
      << "\" y2=\"" << y0 << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 << "\" y2=\"" << y1
      << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = vmax * i / 4.0;
    const double y = y0 - (y0 - y1) * i / 4.0;
    out << "<text x=\"" << x0 - 6 << "\" y=\"" << y + 4
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << format_double(v, 3)
        << "</text>\n";
  }
}

void legend(std::ostringstream& out, const std::vector<Series>& series) {
  int x = kMarginLeft + 10;
  for (std::size_t s = 0; s < series.size(); ++s) {
    out << "<rect x=\"" << x << "\" y=\"" << kMarginTop - 12 << "\" width=\"12\" height=\"12\" fill=\""
        << kColors[s % 5] << "\"/>\n"
        << "<text x=\"" << x + 16 << "\" y=\"" << kMarginTop - 2
        << "\" font-family=\"sans-serif\" font-size=\"12\">" << series[s].name << "</text>\n";
    x += 18 + static_cast<int>(series[s].name.size()) * 8;
  }
}

}  // namespace

void bar_chart(const std::filesystem::path& path, const std::string& title,
               const std::vector<std::string>& groups, const std::vector<Series>& series) {
  std::ostringstream out;
  svg_header(out, title);
  const double vmax = max_value(series) * 1.1;
  axes(out, vmax);
  legend(out, series);

  const int y0 = kHeight - kMarginBottom;
  const double plot_w = kWidth - kMarginLeft - kMarginRight;
  const double plot_h = y0 - kMarginTop;
  const double group_w = plot_w / std::max<std::size_t>(1, groups.size());
  const double bar_w = group_w * 0.7 / std::max<std::size_t>(1, series.size());

  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double gx = kMarginLeft + group_w * (g + 0.15);
    for (std::size_t s = 0; s < series.size(); ++s) {
      if (g >= series[s].values.size()) continue;
      const double v = series[s].values[g];
      const double h = plot_h * std::min(1.0, std::max(0.0, v / vmax));
      out << "<rect x=\"" << gx + s * bar_w << "\" y=\"" << y0 - h << "\" width=\"" << bar_w * 0.9
          << "\" height=\"" << h << "\" fill=\"" << kColors[s % 5] << "\"/>\n";
    }
    out << "<text x=\"" << kMarginLeft + group_w * (g + 0.5) << "\" y=\"" << y0 + 18
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << groups[g]
        << "</text>\n";
  }
  out << "</svg>\n";
  atomic_write_file(path, out.str());
}

void line_chart(const std::filesystem::path& path, const std::string& title,
                const std::vector<std::string>& x_labels, const std::vector<Series>& series,
                const std::string& y_label) {
  std::ostringstream out;
  svg_header(out, title);
  const double vmax = max_value(series) * 1.1;
  axes(out, vmax);
  legend(out, series);

  const int y0 = kHeight - kMarginBottom;
  const double plot_w = kWidth - kMarginLeft - kMarginRight;
  const double plot_h = y0 - kMarginTop;
  const double step = plot_w / std::max<std::size_t>(2, x_labels.size());

  for (std::size_t i = 0; i < x_labels.size(); ++i) {
    out << "<text x=\"" << kMarginLeft + step * (i + 0.5) << "\" y=\"" << y0 + 18
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << x_labels[i]
        << "</text>\n";
  }
  out << "<text x=\"14\" y=\"" << kMarginTop + plot_h / 2
      << "\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 14 "
      << kMarginTop + plot_h / 2 << ")\" text-anchor=\"middle\">" << y_label << "</text>\n";

  for (std::size_t s = 0; s < series.size(); ++s) {
    out << "<polyline fill=\"none\" stroke=\"" << kColors[s % 5] << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < series[s].values.size(); ++i) {
      const double x = kMarginLeft + step * (i + 0.5);
      const double y = y0 - plot_h * std::min(1.0, std::max(0.0, series[s].values[i] / vmax));
      out << x << "," << y << " ";
    }
    out << "\"/>\n";
    for (std::size_t i = 0; i < series[s].values.size(); ++i) {
      const double x = kMarginLeft + step * (i + 0.5);
      const double y = y0 - plot_h * std::min(1.0, std::max(0.0, series[s].values[i] / vmax));
      out << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"3\" fill=\"" << kColors[s % 5]
          << "\"/>\n";
    }
  }
  out << "</svg>\n";
  atomic_write_file(path, out.str());
}

}  // namespace bevkd::plots
