#include "tred/plot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "tred/error.hpp"
#include "tred/log.hpp"

namespace tred {

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
      default: out += c;
    }
  }
  return out;
}

struct Axis {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  bool log = false;

  double tf(double v) const { return log ? std::log10(v) : v; }
  void include(double v) {
    if (log && !(v > 0.0)) return;
    lo = std::min(lo, tf(v));
    hi = std::max(hi, tf(v));
  }
  void finish() {
    if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
    if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
  }
};

}  // namespace

void write_svg_plot(const std::filesystem::path& file, const std::vector<PlotSeries>& series,
                    const PlotOptions& options) {
  if (series.empty()) throw InvalidInput("write_svg_plot: no series");
  Axis ax{.log = options.log_x};
  Axis ay{.log = options.log_y};
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw ShapeMismatch("write_svg_plot: x and y differ in length");
    for (size_t i = 0; i < s.x.size(); ++i) {
      ax.include(s.x[i]);
      const double e = i < s.err.size() ? s.err[i] : 0.0;
      ay.include(s.y[i] - e);
      ay.include(s.y[i] + e);
    }
  }
  ax.finish();
  ay.finish();

  const double left = 70, right = 150, top = 40, bottom = 55;
  const double pw = options.width - left - right;
  const double ph = options.height - top - bottom;
  const auto px = [&](double v) { return left + (ax.tf(v) - ax.lo) / (ax.hi - ax.lo) * pw; };
  const auto py = [&](double v) { return top + ph - (ay.tf(v) - ay.lo) / (ay.hi - ay.lo) * ph; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << options.width << "\" height=\"" << options.height
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << left + pw / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">"
      << escape(options.title) << "</text>\n";
  svg << "<text x=\"" << left + pw / 2 << "\" y=\"" << options.height - 12 << "\" text-anchor=\"middle\">"
      << escape(options.x_label) << "</text>\n";
  svg << "<text transform=\"translate(16," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << escape(options.y_label) << "</text>\n";

  for (int t = 0; t <= 4; ++t) {
    const double fx = ax.lo + (ax.hi - ax.lo) * t / 4.0;
    const double fy = ay.lo + (ay.hi - ay.lo) * t / 4.0;
    const double vx = ax.log ? std::pow(10.0, fx) : fx;
    const double vy = ay.log ? std::pow(10.0, fy) : fy;
    const double sx = left + pw * t / 4.0;
    const double sy = top + ph - ph * t / 4.0;
    svg << "<text x=\"" << sx << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">"
        << log::format("%.3g", vx) << "</text>\n";
    svg << "<text x=\"" << left - 6 << "\" y=\"" << sy + 4 << "\" text-anchor=\"end\">" << log::format("%.3g", vy)
        << "</text>\n";
  }

  for (size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kPalette[k % std::size(kPalette)];
    if (!options.markers_only && s.x.size() > 1) {
      svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
      for (size_t i = 0; i < s.x.size(); ++i) {
        if (ax.log && !(s.x[i] > 0.0)) continue;
        svg << px(s.x[i]) << "," << py(s.y[i]) << " ";
      }
      svg << "\"/>\n";
    }
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (ax.log && !(s.x[i] > 0.0)) continue;
      if (i < s.err.size() && s.err[i] > 0.0) {
        svg << "<line x1=\"" << px(s.x[i]) << "\" x2=\"" << px(s.x[i]) << "\" y1=\"" << py(s.y[i] - s.err[i])
            << "\" y2=\"" << py(s.y[i] + s.err[i]) << "\" stroke=\"" << color << "\"/>\n";
      }
      svg << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i]) << "\" r=\""
          << (options.markers_only ? 2.5 : 3.5) << "\" fill=\"" << color << "\"/>\n";
    }
    const double ly = top + 14 + 18.0 * static_cast<double>(k);
    svg << "<rect x=\"" << left + pw + 12 << "\" y=\"" << ly - 9 << "\" width=\"10\" height=\"10\" fill=\"" << color
        << "\"/>\n";
    svg << "<text x=\"" << left + pw + 28 << "\" y=\"" << ly << "\">" << escape(s.label) << "</text>\n";
  }
  svg << "</svg>\n";

  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file);
  if (!out) throw InvalidInput("write_svg_plot: cannot write " + file.string());
  out << svg.str();
}

}  // namespace tred
