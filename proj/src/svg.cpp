#include "lmgrad/svg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <ostream>
#include <stdexcept>

#include "lmgrad/format.hpp"

namespace lmgrad {

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt_tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

struct Axis {
  bool log = false;
  double lo = 0, hi = 1;

  bool accepts(double v) const { return std::isfinite(v) && (!log || v > 0); }
  double map(double v) const { return log ? std::log10(v) : v; }

  void fit(const std::vector<double>& values) {
    double a = std::numeric_limits<double>::infinity(), b = -a;
    for (double v : values) {
      a = std::min(a, map(v));
      b = std::max(b, map(v));
    }
    if (!std::isfinite(a)) a = 0, b = 1;
    if (b - a < 1e-12) {
      const double pad = std::max(1e-12, std::abs(a) * 0.05 + (log ? 0.5 : 0.5));
      a -= pad;
      b += pad;
    }
    lo = a;
    hi = b;
  }

  double frac(double v) const { return (map(v) - lo) / (hi - lo); }
  double tick_value(double f) const {
    const double t = lo + f * (hi - lo);
    return log ? std::pow(10.0, t) : t;
  }
};

}  // namespace

void write_svg_plot(std::ostream& out, const std::vector<Series>& series, const PlotOptions& options) {
  Axis ax{options.log_x}, ay{options.log_y};
  std::vector<double> xs, ys;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw std::invalid_argument("svg: series '" + s.label + "' has mismatched x/y");
    for (std::size_t i = 0; i < s.x.size(); ++i)
      if (ax.accepts(s.x[i]) && ay.accepts(s.y[i])) {
        xs.push_back(s.x[i]);
        ys.push_back(s.y[i]);
      }
  }
  ax.fit(xs);
  ay.fit(ys);

  const double w = options.width, h = options.height;
  const double left = 70, right = 160, top = 36, bottom = 50;
  const double pw = w - left - right, ph = h - top - bottom;
  auto px = [&](double v) { return left + ax.frac(v) * pw; };
  auto py = [&](double v) { return top + (1.0 - ay.frac(v)) * ph; };

  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << options.width << "\" height=\"" << options.height
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << escape(options.title)
      << "</text>\n";
  out << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double f = k / 4.0;
    const double gx = left + f * pw, gy = top + (1 - f) * ph;
    out << "<line x1=\"" << gx << "\" y1=\"" << top + ph << "\" x2=\"" << gx << "\" y2=\"" << top + ph + 4
        << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << gx << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">"
        << fmt_tick(ax.tick_value(f)) << "</text>\n";
    out << "<line x1=\"" << left - 4 << "\" y1=\"" << gy << "\" x2=\"" << left << "\" y2=\"" << gy
        << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << left - 6 << "\" y=\"" << gy + 4 << "\" text-anchor=\"end\">" << fmt_tick(ay.tick_value(f))
        << "</text>\n";
  }
  out << "<text x=\"" << left + pw / 2 << "\" y=\"" << h - 10 << "\" text-anchor=\"middle\">"
      << escape(options.x_label) << (options.log_x ? " (log)" : "") << "</text>\n";
  out << "<text transform=\"translate(16," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << escape(options.y_label) << (options.log_y ? " (log)" : "") << "</text>\n";

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kPalette[k % std::size(kPalette)];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    bool first = true;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!ax.accepts(s.x[i]) || !ay.accepts(s.y[i])) continue;
      out << (first ? "" : " ") << fmt_double(px(s.x[i])) << ',' << fmt_double(py(s.y[i]));
      first = false;
    }
    out << "\"/>\n";
    const double ly = top + 12 + 16 * static_cast<double>(k);
    out << "<line x1=\"" << left + pw + 10 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 28 << "\" y2=\"" << ly
        << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << left + pw + 32 << "\" y=\"" << ly + 4 << "\">" << escape(s.label) << "</text>\n";
  }
  out << "</svg>\n";
}

void save_svg_plot(const std::string& path, const std::vector<Series>& series, const PlotOptions& options) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_svg_plot(out, series, options);
}

}  // namespace lmgrad
