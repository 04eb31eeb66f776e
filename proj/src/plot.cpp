// SPDX-License-Identifier: Apache-2.0
#include "quaff/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace quaff {

namespace {

constexpr double kW = 720, kH = 420, kLeft = 70, kRight = 170, kTop = 40, kBottom = 50;
const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string px(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void finish() {
    if (!std::isfinite(lo)) lo = 0, hi = 1;
    if (hi - lo < 1e-12) {
      const double pad = std::max(std::fabs(lo) * 0.05, 0.5);
      lo -= pad;
      hi += pad;
    }
  }
};

std::vector<double> ticks(double lo, double hi, int target = 5) {
  const double raw = (hi - lo) / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (m * mag >= raw) {
      step = m * mag;
      break;
    }
  }
  std::vector<double> out;
  for (double t = std::ceil(lo / step) * step; t <= hi + step * 1e-9; t += step) out.push_back(std::fabs(t) < step * 1e-9 ? 0.0 : t);
  return out;
}

void header(std::ostringstream& o, const std::string& title, double w, double h) {
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w << ' '
    << h << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(title) << "</text>\n";
}

}  // namespace

std::string xml_escape(const std::string& s) {
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

std::string render_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                              const std::vector<PlotSeries>& series) {
  Range xr, yr;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      xr.add(s.x[i]);
      yr.add(s.y[i]);
      if (!s.lo.empty()) yr.add(s.lo[i]);
      if (!s.hi.empty()) yr.add(s.hi[i]);
    }
  }
  xr.finish();
  yr.finish();
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  auto sx = [&](double x) { return kLeft + (x - xr.lo) / (xr.hi - xr.lo) * pw; };
  auto sy = [&](double y) { return kTop + ph - (y - yr.lo) / (yr.hi - yr.lo) * ph; };

  std::ostringstream o;
  header(o, title, kW, kH);
  o << "<g stroke=\"#ddd\">\n";
  for (double t : ticks(yr.lo, yr.hi)) o << "<line x1=\"" << kLeft << "\" x2=\"" << kLeft + pw << "\" y1=\"" << px(sy(t)) << "\" y2=\"" << px(sy(t)) << "\"/>\n";
  o << "</g>\n";
  o << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (double t : ticks(yr.lo, yr.hi)) {
    o << "<text x=\"" << kLeft - 6 << "\" y=\"" << px(sy(t) + 4) << "\" text-anchor=\"end\">" << num(t) << "</text>\n";
  }
  for (double t : ticks(xr.lo, xr.hi)) {
    o << "<text x=\"" << px(sx(t)) << "\" y=\"" << kTop + ph + 16 << "\" text-anchor=\"middle\">" << num(t) << "</text>\n";
  }
  o << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\">" << xml_escape(x_label) << "</text>\n";
  o << "<text transform=\"translate(16," << kTop + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">" << xml_escape(y_label) << "</text>\n";

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kPalette[k % std::size(kPalette)];
    // Split into runs of finite points; each run is drawn on its own, so gaps stay open.
    std::vector<std::pair<std::size_t, std::size_t>> runs;
    for (std::size_t i = 0; i < s.x.size();) {
      while (i < s.x.size() && !std::isfinite(s.y[i])) ++i;
      const std::size_t b = i;
      while (i < s.x.size() && std::isfinite(s.y[i])) ++i;
      if (i > b) runs.emplace_back(b, i);
    }
    for (auto [b, e] : runs) {
      if (!s.lo.empty() && !s.hi.empty()) {
        o << "<polygon fill=\"" << color << "\" fill-opacity=\"0.18\" stroke=\"none\" points=\"";
        for (std::size_t i = b; i < e; ++i) o << px(sx(s.x[i])) << ',' << px(sy(s.hi[i])) << ' ';
        for (std::size_t i = e; i-- > b;) o << px(sx(s.x[i])) << ',' << px(sy(s.lo[i])) << ' ';
        o << "\"/>\n";
      }
      if (e - b == 1) {
        o << "<circle cx=\"" << px(sx(s.x[b])) << "\" cy=\"" << px(sy(s.y[b])) << "\" r=\"2\" fill=\"" << color << "\"/>\n";
        continue;
      }
      o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t i = b; i < e; ++i) o << px(sx(s.x[i])) << ',' << px(sy(s.y[i])) << ' ';
      o << "\"/>\n";
    }
    const double ly = kTop + 12 + 18 * static_cast<double>(k);
    o << "<line x1=\"" << kW - kRight + 12 << "\" x2=\"" << kW - kRight + 32 << "\" y1=\"" << ly << "\" y2=\"" << ly
      << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << kW - kRight + 36 << "\" y=\"" << ly + 4 << "\">" << xml_escape(s.label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string render_bar_chart(const std::string& title, const std::vector<BarPanel>& panels) {
  const double panel_w = 360, w = panel_w * static_cast<double>(std::max<std::size_t>(panels.size(), 1)), h = kH;
  std::ostringstream o;
  header(o, title, w, h);
  for (std::size_t p = 0; p < panels.size(); ++p) {
    const auto& bp = panels[p];
    const double x0 = panel_w * static_cast<double>(p) + kLeft, pw = panel_w - kLeft - 20, ph = h - kTop - kBottom - 30;
    double top = 0;
    for (double v : bp.values) {
      if (std::isfinite(v)) top = std::max(top, v);
    }
    if (top <= 0) top = 1;
    auto tk = ticks(0, top);
    top = std::max(top, tk.back());
    auto sy = [&](double y) { return kTop + ph - y / top * ph; };
    o << "<rect x=\"" << x0 << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (double t : tk) {
      o << "<text x=\"" << x0 - 6 << "\" y=\"" << px(sy(t) + 4) << "\" text-anchor=\"end\">" << num(t) << "</text>\n";
    }
    o << "<text transform=\"translate(" << x0 - 55 << ',' << kTop + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << xml_escape(bp.y_label) << "</text>\n";
    const double slot = pw / static_cast<double>(std::max<std::size_t>(bp.values.size(), 1));
    for (std::size_t i = 0; i < bp.values.size(); ++i) {
      const double v = std::isfinite(bp.values[i]) ? bp.values[i] : 0.0;
      const double bx = x0 + slot * static_cast<double>(i) + slot * 0.15;
      o << "<rect x=\"" << px(bx) << "\" y=\"" << px(sy(v)) << "\" width=\"" << px(slot * 0.7) << "\" height=\""
        << px(kTop + ph - sy(v)) << "\" fill=\"" << kPalette[i % std::size(kPalette)] << "\"/>\n";
      o << "<text transform=\"translate(" << px(bx + slot * 0.35) << ',' << kTop + ph + 12
        << ") rotate(30)\" font-size=\"10\">" << xml_escape(bp.categories[i]) << "</text>\n";
    }
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace quaff
