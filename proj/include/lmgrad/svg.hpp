#pragma once

// Minimal polyline plots.

#include <iosfwd>
#include <string>
#include <vector>

namespace lmgrad {

struct Series {
  std::string label;
  std::vector<double> x, y;
};

struct PlotOptions {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  bool log_y = false;
  int width = 640;
  int height = 420;
};

/// Points that are non-finite, or non-positive on a log axis, are skipped.
void write_svg_plot(std::ostream& out, const std::vector<Series>& series, const PlotOptions& options);
void save_svg_plot(const std::string& path, const std::vector<Series>& series, const PlotOptions& options);

}  // namespace lmgrad
