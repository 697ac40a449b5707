#pragma once

// Static SVG figures for sweeps, spectra and embeddings.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace tred {

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> err;  // optional symmetric error bars
};

struct PlotOptions {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  bool log_y = false;
  bool markers_only = false;  // scatter instead of lines
  int width = 640;
  int height = 420;
};

void write_svg_plot(const std::filesystem::path& file, const std::vector<PlotSeries>& series,
                    const PlotOptions& options);

}  // namespace tred
