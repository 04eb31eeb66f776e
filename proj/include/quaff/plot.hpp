// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace quaff {

// One polyline. A NaN in y breaks the line; lo/hi (same length as x, or empty) draw a band.
struct PlotSeries {
  std::string label;
  std::vector<double> x, y;
  std::vector<double> lo, hi;
};

std::string render_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                              const std::vector<PlotSeries>& series);

struct BarPanel {
  std::string y_label;
  std::vector<std::string> categories;
  std::vector<double> values;
};

// Side-by-side bar panels sharing one title.
std::string render_bar_chart(const std::string& title, const std::vector<BarPanel>& panels);

std::string xml_escape(const std::string& s);

}  // namespace quaff
